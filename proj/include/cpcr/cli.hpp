#ifndef CPCR_CLI_HPP
#define CPCR_CLI_HPP

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpcr/checkpoint.hpp"
#include "cpcr/data.hpp"
#include "cpcr/trainer.hpp"

namespace cpcr {

// One declarative run document: network + trainer settings plus a data
// source, either a synthetic generator spec or a dataset directory. Parsing
// is strict (unknown keys are errors) and validation happens before any
// command writes a file.

struct RunConfig {
  NetworkConfig network;
  TrainConfig trainer;
  std::optional<SyntheticSpec> synthetic;
  std::string dataset_path;
  DatasetLayout dataset_layout = DatasetLayout::synthetic_archive;
  double labeled_ratio = 0.1;
  std::string out_dir = "runs/out";

  void validate() const {
    network.validate();
    trainer.validate();
    if (synthetic) synthetic->validate();
    if (synthetic.has_value() == !dataset_path.empty())
      throw ConfigError(
          "run config needs exactly one data source: 'synthetic' or "
          "'dataset_path'");
    if (!(labeled_ratio > 0.0) || labeled_ratio > 1.0)
      throw ConfigError("run.labeled_ratio must be in (0, 1]");
    if (out_dir.empty()) throw ConfigError("run.out_dir must not be empty");
    if (network.num_classes < 2)
      throw ConfigError("run.network.num_classes must be at least 2");
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                const std::set<std::string>& known,
                                const std::string& where) {
  if (!j.is_object())
    throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!known.count(key))
      throw ConfigError(where + " has unknown key '" + key + "'");
  }
}

template <class T>
void take(const nlohmann::json& j, const char* key, T& into,
          const std::string& where) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// JSON codecs (apply keys onto a base, reject unknown keys)

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j,
                                              SyntheticSpec base = {}) {
  detail::reject_unknown_keys(
      j,
      {"num_volumes", "slices_per_volume", "image_h", "image_w", "num_classes",
       "noise_std", "bias_amp", "seed"},
      "synthetic");
  detail::take(j, "num_volumes", base.num_volumes, "synthetic");
  detail::take(j, "slices_per_volume", base.slices_per_volume, "synthetic");
  detail::take(j, "image_h", base.image_h, "synthetic");
  detail::take(j, "image_w", base.image_w, "synthetic");
  detail::take(j, "num_classes", base.num_classes, "synthetic");
  detail::take(j, "noise_std", base.noise_std, "synthetic");
  detail::take(j, "bias_amp", base.bias_amp, "synthetic");
  detail::take(j, "seed", base.seed, "synthetic");
  return base;
}

inline nlohmann::json synthetic_spec_to_json(const SyntheticSpec& s) {
  return {{"num_volumes", s.num_volumes},
          {"slices_per_volume", s.slices_per_volume},
          {"image_h", s.image_h},
          {"image_w", s.image_w},
          {"num_classes", s.num_classes},
          {"noise_std", s.noise_std},
          {"bias_amp", s.bias_amp},
          {"seed", s.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j,
                                          TrainConfig base = {}) {
  detail::reject_unknown_keys(
      j,
      {"max_iterations", "val_every", "seed", "consistency_temperature",
       "val_branch", "optimizer", "lr_schedule", "loss_weights", "batch"},
      "trainer");
  detail::take(j, "max_iterations", base.max_iterations, "trainer");
  detail::take(j, "val_every", base.val_every, "trainer");
  detail::take(j, "seed", base.seed, "trainer");
  detail::take(j, "consistency_temperature", base.consistency_temperature,
               "trainer");
  detail::take(j, "val_branch", base.val_branch, "trainer");
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::reject_unknown_keys(o, {"kind", "lr", "momentum", "weight_decay"},
                                "trainer.optimizer");
    detail::take(o, "kind", base.optimizer.kind, "trainer.optimizer");
    detail::take(o, "lr", base.optimizer.lr, "trainer.optimizer");
    detail::take(o, "momentum", base.optimizer.momentum, "trainer.optimizer");
    detail::take(o, "weight_decay", base.optimizer.weight_decay,
                 "trainer.optimizer");
  }
  if (j.contains("lr_schedule")) {
    const auto& s = j.at("lr_schedule");
    detail::reject_unknown_keys(s, {"kind", "poly_power"},
                                "trainer.lr_schedule");
    detail::take(s, "kind", base.lr_schedule.kind, "trainer.lr_schedule");
    detail::take(s, "poly_power", base.lr_schedule.poly_power,
                 "trainer.lr_schedule");
  }
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    detail::reject_unknown_keys(
        w, {"fixed_weight", "w_max", "t_max", "ramp_step_iters",
            "kl_t2_rescale"},
        "trainer.loss_weights");
    detail::take(w, "fixed_weight", base.loss_weights.fixed_weight,
                 "trainer.loss_weights");
    detail::take(w, "w_max", base.loss_weights.w_max, "trainer.loss_weights");
    detail::take(w, "t_max", base.loss_weights.t_max, "trainer.loss_weights");
    detail::take(w, "ramp_step_iters", base.loss_weights.ramp_step_iters,
                 "trainer.loss_weights");
    detail::take(w, "kl_t2_rescale", base.loss_weights.kl_t2_rescale,
                 "trainer.loss_weights");
  }
  if (j.contains("batch")) {
    const auto& b = j.at("batch");
    detail::reject_unknown_keys(
        b, {"labeled", "unlabeled", "patch_h", "patch_w", "augment"},
        "trainer.batch");
    detail::take(b, "labeled", base.batch.labeled, "trainer.batch");
    detail::take(b, "unlabeled", base.batch.unlabeled, "trainer.batch");
    detail::take(b, "patch_h", base.batch.patch_h, "trainer.batch");
    detail::take(b, "patch_w", base.batch.patch_w, "trainer.batch");
    detail::take(b, "augment", base.batch.augment, "trainer.batch");
  }
  return base;
}

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
  return {{"max_iterations", t.max_iterations},
          {"val_every", t.val_every},
          {"seed", t.seed},
          {"consistency_temperature", t.consistency_temperature},
          {"val_branch", t.val_branch},
          {"optimizer",
           {{"kind", t.optimizer.kind},
            {"lr", t.optimizer.lr},
            {"momentum", t.optimizer.momentum},
            {"weight_decay", t.optimizer.weight_decay}}},
          {"lr_schedule",
           {{"kind", t.lr_schedule.kind},
            {"poly_power", t.lr_schedule.poly_power}}},
          {"loss_weights",
           {{"fixed_weight", t.loss_weights.fixed_weight},
            {"w_max", t.loss_weights.w_max},
            {"t_max", t.loss_weights.t_max},
            {"ramp_step_iters", t.loss_weights.ramp_step_iters},
            {"kl_t2_rescale", t.loss_weights.kl_t2_rescale}}},
          {"batch",
           {{"labeled", t.batch.labeled},
            {"unlabeled", t.batch.unlabeled},
            {"patch_h", t.batch.patch_h},
            {"patch_w", t.batch.patch_w},
            {"augment", t.batch.augment}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j,
                                      RunConfig base = {}) {
  detail::reject_unknown_keys(
      j,
      {"network", "trainer", "synthetic", "dataset_path", "dataset_layout",
       "labeled_ratio", "out_dir"},
      "run config");
  if (j.contains("synthetic") && j.contains("dataset_path"))
    throw ConfigError(
        "run config sets both 'synthetic' and 'dataset_path'; pick one");
  if (j.contains("network"))
    base.network = network_config_from_json(j.at("network"), base.network);
  if (j.contains("trainer"))
    base.trainer = train_config_from_json(j.at("trainer"), base.trainer);
  if (j.contains("synthetic")) {
    base.synthetic = synthetic_spec_from_json(
        j.at("synthetic"), base.synthetic.value_or(SyntheticSpec{}));
    base.dataset_path.clear();
  }
  if (j.contains("dataset_path")) {
    detail::take(j, "dataset_path", base.dataset_path, "run config");
    base.synthetic.reset();
  }
  if (j.contains("dataset_layout")) {
    const std::string layout = j.at("dataset_layout").get<std::string>();
    if (layout == "synthetic_archive")
      base.dataset_layout = DatasetLayout::synthetic_archive;
    else if (layout == "acdc")
      base.dataset_layout = DatasetLayout::acdc_format;
    else
      throw ConfigError("run.dataset_layout must be 'synthetic_archive' or "
                        "'acdc', got '" + layout + "'");
  }
  detail::take(j, "labeled_ratio", base.labeled_ratio, "run config");
  detail::take(j, "out_dir", base.out_dir, "run config");
  return base;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j = {{"network", network_config_to_json(c.network)},
                      {"trainer", train_config_to_json(c.trainer)},
                      {"labeled_ratio", c.labeled_ratio},
                      {"out_dir", c.out_dir}};
  if (c.synthetic)
    j["synthetic"] = synthetic_spec_to_json(*c.synthetic);
  else {
    j["dataset_path"] = c.dataset_path;
    j["dataset_layout"] = c.dataset_layout == DatasetLayout::acdc_format
                              ? "acdc"
                              : "synthetic_archive";
  }
  return j;
}

// ---------------------------------------------------------------------------
// Profiles

// Full-scale settings: 256x256 crops, batch 12+12, 50k iterations over an
// ACDC-format directory that the user points at via dataset_path.
inline RunConfig paper_profile() {
  RunConfig c;
  c.network.input_h = c.network.input_w = 256;
  c.trainer.max_iterations = 50000;
  c.trainer.val_every = 200;
  c.trainer.seed = 1337;
  c.trainer.batch.labeled = 12;
  c.trainer.batch.unlabeled = 12;
  c.trainer.batch.patch_h = c.trainer.batch.patch_w = 256;
  c.trainer.optimizer.lr = 0.01;
  c.dataset_path = "data/acdc";
  c.dataset_layout = DatasetLayout::acdc_format;
  c.labeled_ratio = 0.1;
  c.out_dir = "runs/paper";
  return c;
}

// Desk-scale settings: the bundled synthetic task at 64x64 with batch 6+6.
// 2000 iterations finish in well under an hour on one CPU core; the higher
// poly-decayed learning rate and the shortened consistency ramp are what the
// shorter horizon needs (the default ramp would still be warming up at the
// end of the run).
inline RunConfig desk_profile() {
  RunConfig c;
  c.network.input_h = c.network.input_w = 64;
  c.trainer.max_iterations = 2000;
  c.trainer.val_every = 200;
  c.trainer.seed = 1337;
  c.trainer.batch.labeled = 6;
  c.trainer.batch.unlabeled = 6;
  c.trainer.batch.patch_h = c.trainer.batch.patch_w = 64;
  c.trainer.optimizer.lr = 0.05;
  c.trainer.lr_schedule.kind = "poly";
  c.trainer.loss_weights.ramp_step_iters = 5;
  SyntheticSpec spec;
  spec.num_volumes = 30;
  spec.slices_per_volume = 8;
  spec.image_h = spec.image_w = 80;
  spec.seed = 1337;
  c.synthetic = spec;
  c.labeled_ratio = 0.1;
  c.out_dir = "runs/desk";
  return c;
}

inline RunConfig profile_by_name(const std::string& name) {
  if (name == "paper") return paper_profile();
  if (name == "desk") return desk_profile();
  throw ConfigError("unknown profile '" + name + "', expected 'paper' or "
                    "'desk'");
}

struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> labeled_ratio;
  std::optional<std::string> out_dir;
};

// Profile defaults, then the config file, then explicit flags.
inline RunConfig load_run_config(const std::string& profile,
                                 const std::string& config_path,
                                 const CliOverrides& overrides) {
  RunConfig cfg = profile_by_name(profile);
  if (!config_path.empty())
    cfg = run_config_from_json(detail::read_json_file(config_path), cfg);
  if (overrides.seed) cfg.trainer.seed = *overrides.seed;
  if (overrides.labeled_ratio) cfg.labeled_ratio = *overrides.labeled_ratio;
  if (overrides.out_dir) cfg.out_dir = *overrides.out_dir;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Commands

inline std::vector<VolumeSample> open_dataset(const RunConfig& cfg) {
  if (cfg.synthetic) return generate_synthetic_dataset(*cfg.synthetic);
  return load_volume_dataset(cfg.dataset_path, cfg.dataset_layout);
}

inline SSLSplit split_for(const RunConfig& cfg,
                          const std::vector<VolumeSample>& dataset) {
  std::vector<std::string> train_ids;
  for (const VolumeSample& v : dataset)
    if (v.split_tag == SplitTag::train) train_ids.push_back(v.patient_id);
  return make_ssl_split(train_ids, cfg.labeled_ratio, cfg.trainer.seed);
}

inline int cmd_generate(const RunConfig& cfg, std::ostream& out = std::cout) {
  cfg.validate();
  if (!cfg.synthetic)
    throw ConfigError("generate needs a 'synthetic' section in the config");
  const std::vector<VolumeSample> dataset =
      generate_synthetic_dataset(*cfg.synthetic);
  save_synthetic_archive(dataset, cfg.out_dir);

  int tags[3] = {0, 0, 0};
  for (const VolumeSample& v : dataset) ++tags[static_cast<int>(v.split_tag)];
  out << "wrote " << dataset.size() << " volumes ("
      << dataset.front().slices() << "x" << dataset.front().height() << "x"
      << dataset.front().width() << ") to " << cfg.out_dir << "\n"
      << "splits: train=" << tags[0] << " val=" << tags[1]
      << " test=" << tags[2] << "\n";
  return 0;
}

inline int cmd_train(RunConfig cfg, const std::string& resume_from = "",
                     std::ostream& out = std::cout) {
  cfg.validate();
  const std::vector<VolumeSample> dataset = open_dataset(cfg);
  const SSLSplit split = split_for(cfg, dataset);
  if (split.unlabeled_ids.empty() && cfg.trainer.batch.unlabeled > 0) {
    out << "note: no unlabeled patients at labeled_ratio="
        << cfg.labeled_ratio << "; disabling the unlabeled stream\n";
    cfg.trainer.batch.unlabeled = 0;
  }
  out << "patients: " << split.labeled_ids.size() << " labeled / "
      << split.unlabeled_ids.size() << " unlabeled\n";

  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream cfg_out(std::filesystem::path(cfg.out_dir) / "config.json");
    cfg_out << run_config_to_json(cfg).dump(2) << "\n";
    if (!cfg_out)
      throw IoError("cannot write config.json under " + cfg.out_dir);
  }

  Trainer trainer(cfg.trainer, cfg.network, &dataset, split, cfg.out_dir);
  const TrainArtifacts art = trainer.run(resume_from);
  out << "finished " << art.iterations << " iterations, best val dice "
      << art.best_val_dice << "\n"
      << "artifacts: " << art.best_checkpoint.string() << ", "
      << art.last_checkpoint.string() << ", " << art.loss_log.string() << ", "
      << art.val_log.string() << "\n";
  return 0;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path,
                    const std::string& split_name, const std::string& branch,
                    bool oracle, std::ostream& out = std::cout) {
  cfg.validate();
  SplitTag tag;
  if (split_name == "val")
    tag = SplitTag::val;
  else if (split_name == "test")
    tag = SplitTag::test;
  else
    throw ArgumentError("eval split must be 'val' or 'test', got '" +
                        split_name + "'");

  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  DBPNet<float> net(ckpt.network, 0);
  restore_parameters(net, ckpt.parameters, "eval");

  const std::vector<VolumeSample> dataset = open_dataset(cfg);
  std::vector<LabelVolume> preds, gts;
  for (const VolumeSample& v : dataset) {
    if (v.split_tag != tag) continue;
    preds.push_back(predict_volume_with(net, v, ckpt.network.input_h,
                                        ckpt.network.input_w, branch));
    gts.push_back(volume_ground_truth(v));
  }
  if (gts.empty())
    throw DataError("eval: the dataset has no '" + split_name + "' volumes");

  const MetricsReport report = evaluate_volumes(
      preds, gts, ckpt.network.num_classes, DistanceRoute::transform);

  if (oracle) {
    const MetricsReport slow = evaluate_volumes(
        preds, gts, ckpt.network.num_classes, DistanceRoute::brute_force);
    auto close = [](double a, double b) {
      return (std::isnan(a) && std::isnan(b)) || std::abs(a - b) <= 1e-6;
    };
    for (const auto& [c, fast] : report.per_class) {
      const MetricValues& ref = slow.per_class.at(c);
      if (!close(fast.hd95, ref.hd95) || !close(fast.asd, ref.asd))
        throw Error("oracle disagreement on class " + std::to_string(c) +
                    ": hd95 " + std::to_string(fast.hd95) + " vs " +
                    std::to_string(ref.hd95) + ", asd " +
                    std::to_string(fast.asd) + " vs " +
                    std::to_string(ref.asd));
    }
    out << "oracle: distance-transform and brute-force routes agree\n";
  }

  std::filesystem::create_directories(cfg.out_dir);
  const std::filesystem::path base =
      std::filesystem::path(cfg.out_dir) / ("eval_" + split_name);
  {
    std::ofstream jout(base.string() + ".json");
    jout << report_to_json(report).dump(2) << "\n";
    std::ofstream cout_(base.string() + ".csv");
    cout_ << report_to_csv(report);
    if (!jout || !cout_)
      throw IoError("cannot write eval reports under " + cfg.out_dir);
  }

  auto print_row = [&out](const std::string& name, const MetricValues& v) {
    out << name << ": dsc=" << v.dsc << " iou=" << v.iou << " hd95=" << v.hd95
        << " asd=" << v.asd << "\n";
  };
  for (const auto& [c, v] : report.per_class)
    print_row("class " + std::to_string(c), v);
  print_row("mean", report.mean);
  out << "reports: " << base.string() << ".json, " << base.string()
      << ".csv\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Selftest: closed-form loss values and metric oracles, runnable anywhere.

struct SelfCheck {
  std::string name;
  bool ok = false;
  double got = 0.0;
  double want = 0.0;
};

inline std::vector<SelfCheck> run_selfchecks() {
  std::vector<SelfCheck> checks;
  auto expect = [&checks](const std::string& name, double got, double want,
                          double tol) {
    checks.push_back({name, std::abs(got - want) <= tol, got, want});
  };

  auto logits2 = [](float a, float b) {
    Tensor4<float> t(1, 2, 1, 1);
    t[0] = a;
    t[1] = b;
    return Var<float>::leaf(std::move(t), false);
  };
  auto probs2 = logits2;

  const TensorF p1 = softmax_t(logits2(1.0f, 0.0f), 1.0).value();
  expect("t_softmax([1,0], T=1)[0]", p1[0], 0.7311, 1e-4);
  expect("t_softmax([1,0], T=1)[1]", p1[1], 0.2689, 1e-4);
  const TensorF p10 = softmax_t(logits2(1.0f, 0.0f), 10.0).value();
  expect("t_softmax([1,0], T=10)[0]", p10[0], 0.5250, 1e-4);
  expect("t_softmax([1,0], T=10)[1]", p10[1], 0.4750, 1e-4);

  expect("kl_soft(p, p)",
         kl_soft(probs2(0.5f, 0.5f), probs2(0.5f, 0.5f)).value().scalar(), 0.0,
         1e-7);
  expect("kl_soft([.5,.5] || [.75,.25])",
         kl_soft(probs2(0.5f, 0.5f), probs2(0.75f, 0.25f)).value().scalar(),
         0.13081, 1e-4);

  Tensor4<float> uniform4(1, 4, 1, 1);
  uniform4.array().setConstant(0.25f);
  expect("entropy(uniform-4)",
         mean_entropy(Var<float>::leaf(std::move(uniform4), false))
             .value()
             .scalar(),
         std::log(4.0), 1e-4);

  const LossWeights w;
  expect("lambda(0)", ramp_up_weight(0, w), 6.738e-4, 1e-6);
  expect("lambda(100)", ramp_up_weight(100, w), 0.028650, 1e-5);
  expect("lambda(200)", ramp_up_weight(200, w), 0.1, 0.0);
  expect("lambda(300) clamps", ramp_up_weight(300, w), 0.1, 0.0);

  BinaryMask3D a({2, 8, 8}, {1.0, 1.0, 1.0});
  a.voxels[0 * 64 + 2 * 8 + 2] = 1;
  BinaryMask3D b = a;
  expect("identity dice", dice_coefficient(a, b), 1.0, 0.0);
  expect("identity jaccard", jaccard(a, b), 1.0, 0.0);
  expect("identity hd95", hd95(a, b), 0.0, 0.0);
  expect("identity asd", asd(a, b), 0.0, 0.0);

  BinaryMask3D c({2, 8, 8}, {1.0, 1.0, 1.0});
  c.voxels[0 * 64 + 5 * 8 + 6] = 1;  // offset (0, 3, 4) from a's voxel
  expect("offset (0,3,4) hd95", hd95(a, c), 5.0, 1e-12);
  expect("offset (0,3,4) asd", asd(a, c), 5.0, 1e-12);
  expect("offset brute-force hd95",
         hd95(a, c, DistanceRoute::brute_force), 5.0, 1e-12);
  expect("transform equals brute-force",
         hd95(a, c) - hd95(a, c, DistanceRoute::brute_force), 0.0, 1e-9);
  return checks;
}

inline int cmd_selftest(std::ostream& out = std::cout) {
  int failed = 0;
  for (const SelfCheck& c : run_selfchecks()) {
    if (c.ok) {
      out << "ok: " << c.name << "\n";
    } else {
      ++failed;
      out << "FAIL: " << c.name << " got " << c.got << " want " << c.want
          << "\n";
    }
  }
  if (failed) out << failed << " check(s) failed\n";
  return failed ? 1 : 0;
}

}  // namespace cpcr

#endif
