#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <vector>

#include "cpcr/checkpoint.hpp"
#include "cpcr/network.hpp"
#include "cpcr/trainer.hpp"

using namespace cpcr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("cpcr_ckpt_" + tag + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

NetworkConfig tiny_config() {
  NetworkConfig cfg;
  cfg.encoder_channels = {2, 4, 8, 16, 32};
  cfg.input_h = cfg.input_w = 16;
  return cfg;
}

std::vector<unsigned char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary | std::ios::ate);
  REQUIRE(in.good());
  std::vector<unsigned char> bytes(static_cast<size_t>(in.tellg()));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  return bytes;
}

}  // namespace

TEST_SUITE("network_config_json") {
  TEST_CASE("round-trips every field") {
    NetworkConfig cfg = tiny_config();
    cfg.num_classes = 3;
    cfg.branch_dropout_rate = 0.25;
    cfg.aux_perturbation_by_scale = {{1, PerturbationKind::dropout},
                                     {2, PerturbationKind::feature_noise},
                                     {3, PerturbationKind::feature_dropout}};
    cfg.feature_noise_range = 0.15;
    cfg.feature_dropout_threshold_range = {0.6, 0.8};
    const NetworkConfig back = network_config_from_json(network_config_to_json(cfg));
    CHECK(back == cfg);
  }

  TEST_CASE("unknown keys are rejected, partial overrides apply onto a base") {
    CHECK_THROWS_AS(network_config_from_json({{"classes", 4}}), ConfigError);

    const NetworkConfig base = tiny_config();
    const NetworkConfig patched =
        network_config_from_json({{"num_classes", 2}}, base);
    CHECK(patched.num_classes == 2);
    CHECK(patched.encoder_channels == base.encoder_channels);
    CHECK(patched.input_h == base.input_h);
  }

  TEST_CASE("malformed values are config errors") {
    CHECK_THROWS_AS(network_config_from_json({{"encoder_channels", {1, 2}}}),
                    ConfigError);
    CHECK_THROWS_AS(network_config_from_json({{"num_classes", "four"}}),
                    ConfigError);
    CHECK_THROWS_AS(
        network_config_from_json({{"feature_dropout_threshold_range", {0.7}}}),
        ConfigError);
  }
}

TEST_SUITE("checkpoint_io") {
  TEST_CASE("model checkpoints round-trip parameters bitwise") {
    TempDir tmp("model_rt");
    const fs::path p = tmp.path / "model.ckpt";
    DBPNet<float> net(tiny_config(), 41);

    Checkpoint ckpt;
    ckpt.kind = "model";
    ckpt.network = net.config();
    ckpt.seed = 41;
    ckpt.iteration = 123;
    ckpt.best_val_dice = 0.875;
    ckpt.parameters = snapshot_parameters(net);
    save_checkpoint(ckpt, p.string());

    const Checkpoint back = load_checkpoint(p.string());
    CHECK(back.kind == "model");
    CHECK(back.network == net.config());
    CHECK(back.seed == 41);
    CHECK(back.iteration == 123);
    CHECK(back.best_val_dice == 0.875);
    REQUIRE(back.parameters.size() == ckpt.parameters.size());
    for (size_t i = 0; i < back.parameters.size(); ++i) {
      CHECK(back.parameters[i].name == ckpt.parameters[i].name);
      CHECK(back.parameters[i].shape == ckpt.parameters[i].shape);
      CHECK(back.parameters[i].data == ckpt.parameters[i].data);
    }
    CHECK(back.momentum.empty());

    DBPNet<float> other(tiny_config(), 999);
    restore_parameters(other, back.parameters, "test");
    for (size_t i = 0; i < net.parameters().size(); ++i) {
      const auto& a = net.parameters()[i].var.value();
      const auto& b = other.parameters()[i].var.value();
      CHECK((a.array() == b.array()).all());
    }
  }

  TEST_CASE("save-load-save produces byte-identical files") {
    TempDir tmp("idem");
    DBPNet<float> net(tiny_config(), 7);
    Sgd<float> opt(OptimizerConfig{}, &net.parameters());

    Checkpoint ckpt;
    ckpt.kind = "train_state";
    ckpt.network = net.config();
    ckpt.seed = 7;
    ckpt.iteration = 55;
    ckpt.best_val_dice = 1.0 / 3.0;
    ckpt.parameters = snapshot_parameters(net);
    ckpt.momentum = opt.snapshot();

    const fs::path p1 = tmp.path / "a.ckpt";
    const fs::path p2 = tmp.path / "b.ckpt";
    save_checkpoint(ckpt, p1.string());
    save_checkpoint(load_checkpoint(p1.string()), p2.string());
    CHECK(slurp(p1) == slurp(p2));
  }

  TEST_CASE("corruption and version mismatches are load errors") {
    TempDir tmp("corrupt");
    DBPNet<float> net(tiny_config(), 7);
    Checkpoint ckpt;
    ckpt.kind = "model";
    ckpt.network = net.config();
    ckpt.parameters = snapshot_parameters(net);
    const fs::path p = tmp.path / "c.ckpt";
    save_checkpoint(ckpt, p.string());
    const auto good = slurp(p);

    auto write = [&](std::vector<unsigned char> bytes) {
      std::ofstream out(p, std::ios::binary);
      out.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
    };

    auto bad_magic = good;
    bad_magic[0] = 'X';
    write(bad_magic);
    CHECK_THROWS_WITH_AS(load_checkpoint(p.string()),
                         doctest::Contains("not a checkpoint"), DataError);

    auto bad_version = good;
    bad_version[8] = 9;
    write(bad_version);
    CHECK_THROWS_WITH_AS(load_checkpoint(p.string()),
                         doctest::Contains("version"), DataError);

    auto truncated = good;
    truncated.resize(truncated.size() - 17);
    write(truncated);
    CHECK_THROWS_WITH_AS(load_checkpoint(p.string()),
                         doctest::Contains("truncated"), DataError);

    auto trailing = good;
    trailing.push_back(0);
    write(trailing);
    CHECK_THROWS_WITH_AS(load_checkpoint(p.string()),
                         doctest::Contains("trailing"), DataError);
  }

  TEST_CASE("restore guards against mismatched parameter sets") {
    DBPNet<float> net(tiny_config(), 7);
    auto params = snapshot_parameters(net);

    auto missing = params;
    missing.pop_back();
    CHECK_THROWS_AS(restore_parameters(net, missing, "test"), DataError);

    auto renamed = params;
    renamed[0].name = "encoder.block0.not_a_real_name";
    CHECK_THROWS_AS(restore_parameters(net, renamed, "test"), DataError);

    auto reshaped = params;
    reshaped[0].shape.c += 1;
    reshaped[0].data.resize(static_cast<size_t>(reshaped[0].shape.count()));
    CHECK_THROWS_AS(restore_parameters(net, reshaped, "test"), DataError);
  }

  TEST_CASE("momentum is only valid for train_state checkpoints") {
    TempDir tmp("kind");
    DBPNet<float> net(tiny_config(), 7);
    Sgd<float> opt(OptimizerConfig{}, &net.parameters());
    Checkpoint ckpt;
    ckpt.kind = "model";
    ckpt.network = net.config();
    ckpt.parameters = snapshot_parameters(net);
    ckpt.momentum = opt.snapshot();
    CHECK_THROWS_AS(save_checkpoint(ckpt, (tmp.path / "x.ckpt").string()),
                    ArgumentError);
    CHECK_THROWS_AS([&] {
      Checkpoint bad = ckpt;
      bad.kind = "optimizer";
      bad.momentum.clear();
      save_checkpoint(bad, (tmp.path / "y.ckpt").string());
    }(), ArgumentError);
  }
}
