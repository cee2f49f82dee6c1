#ifndef CPCR_CHECKPOINT_HPP
#define CPCR_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpcr/common.hpp"
#include "cpcr/network.hpp"
#include "cpcr/tensor.hpp"

namespace cpcr {

// Checkpoints: a magic + version prefix, one canonical JSON header (sorted
// keys, shortest round-trip numbers, so save -> load -> save is
// byte-identical), then the raw float32 payloads in header order.
//
// kind "model" holds parameters and the network config; kind "train_state"
// adds optimizer momentum and the training counters needed to resume.

inline constexpr char kCheckpointMagic[8] = {'C', 'P', 'C', 'R',
                                             'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointParam {
  std::string name;
  Shape4 shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::string kind = "model";  // "model" or "train_state"
  NetworkConfig network;
  std::uint64_t seed = 0;
  std::int64_t iteration = 0;
  double best_val_dice = -1.0;
  std::vector<CheckpointParam> parameters;
  std::vector<CheckpointParam> momentum;  // empty unless kind=train_state
};

// ---------------------------------------------------------------------------
// NetworkConfig <-> JSON

inline nlohmann::json network_config_to_json(const NetworkConfig& cfg) {
  nlohmann::json perturb = nlohmann::json::object();
  for (const auto& [scale, kind] : cfg.aux_perturbation_by_scale)
    perturb[std::to_string(scale)] = to_string(kind);
  return {{"in_channels", cfg.in_channels},
          {"num_classes", cfg.num_classes},
          {"encoder_channels", cfg.encoder_channels},
          {"branch_dropout_rate", cfg.branch_dropout_rate},
          {"aux_perturbation_by_scale", perturb},
          {"feature_noise_range", cfg.feature_noise_range},
          {"feature_dropout_threshold_range", cfg.feature_dropout_threshold_range},
          {"input_h", cfg.input_h},
          {"input_w", cfg.input_w}};
}

// Applies the keys present in `j` on top of `base`; unknown keys are errors.
inline NetworkConfig network_config_from_json(const nlohmann::json& j,
                                              NetworkConfig base = {}) {
  if (!j.is_object()) throw ConfigError("network config must be a JSON object");
  static const std::set<std::string> known = {
      "in_channels",        "num_classes",
      "encoder_channels",   "branch_dropout_rate",
      "aux_perturbation_by_scale", "feature_noise_range",
      "feature_dropout_threshold_range", "input_h", "input_w"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!known.count(key))
      throw ConfigError("network config has unknown key '" + key + "'");
  }
  try {
    if (j.contains("in_channels")) base.in_channels = j.at("in_channels").get<int>();
    if (j.contains("num_classes")) base.num_classes = j.at("num_classes").get<int>();
    if (j.contains("encoder_channels")) {
      const auto& arr = j.at("encoder_channels");
      if (!arr.is_array() || arr.size() != base.encoder_channels.size())
        throw ConfigError("network.encoder_channels: needs exactly " +
                          std::to_string(base.encoder_channels.size()) +
                          " entries");
      for (size_t i = 0; i < base.encoder_channels.size(); ++i)
        base.encoder_channels[i] = arr.at(i).get<int>();
    }
    if (j.contains("branch_dropout_rate"))
      base.branch_dropout_rate = j.at("branch_dropout_rate").get<double>();
    if (j.contains("aux_perturbation_by_scale")) {
      base.aux_perturbation_by_scale.clear();
      for (const auto& [key, value] : j.at("aux_perturbation_by_scale").items())
        base.aux_perturbation_by_scale[std::stoi(key)] =
            perturbation_from_string(value.get<std::string>());
    }
    if (j.contains("feature_noise_range"))
      base.feature_noise_range = j.at("feature_noise_range").get<double>();
    if (j.contains("feature_dropout_threshold_range")) {
      const auto& arr = j.at("feature_dropout_threshold_range");
      if (!arr.is_array() || arr.size() != 2)
        throw ConfigError(
            "network.feature_dropout_threshold_range: needs 2 entries");
      base.feature_dropout_threshold_range = {arr.at(0).get<double>(),
                                              arr.at(1).get<double>()};
    }
    if (j.contains("input_h")) base.input_h = j.at("input_h").get<int>();
    if (j.contains("input_w")) base.input_w = j.at("input_w").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
  return base;
}

// ---------------------------------------------------------------------------
// Save / load

namespace detail {

inline nlohmann::json checkpoint_params_json(
    const std::vector<CheckpointParam>& params) {
  nlohmann::json arr = nlohmann::json::array();
  for (const CheckpointParam& p : params) {
    arr.push_back({{"name", p.name},
                   {"shape", {p.shape.n, p.shape.c, p.shape.h, p.shape.w}},
                   {"count", p.shape.count()}});
    if (static_cast<std::int64_t>(p.data.size()) != p.shape.count())
      throw ArgumentError("checkpoint: parameter '" + p.name +
                          "' data does not match its shape");
  }
  return arr;
}

inline std::vector<CheckpointParam> checkpoint_params_from_json(
    const nlohmann::json& arr, const std::string& path) {
  std::vector<CheckpointParam> out;
  for (const auto& e : arr) {
    CheckpointParam p;
    p.name = e.at("name").get<std::string>();
    const auto& sh = e.at("shape");
    if (!sh.is_array() || sh.size() != 4)
      throw DataError("checkpoint " + path + ": parameter '" + p.name +
                      "' has a malformed shape");
    p.shape = Shape4{sh.at(0).get<int>(), sh.at(1).get<int>(),
                     sh.at(2).get<int>(), sh.at(3).get<int>()};
    if (e.at("count").get<std::int64_t>() != p.shape.count())
      throw DataError("checkpoint " + path + ": parameter '" + p.name +
                      "' count disagrees with its shape");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  if (ckpt.kind != "model" && ckpt.kind != "train_state")
    throw ArgumentError("checkpoint: kind must be 'model' or 'train_state'");
  nlohmann::json header = {
      {"kind", ckpt.kind},
      {"dtype", "f32"},
      {"network", network_config_to_json(ckpt.network)},
      {"seed", ckpt.seed},
      {"iteration", ckpt.iteration},
      {"best_val_dice", ckpt.best_val_dice},
      {"parameters", detail::checkpoint_params_json(ckpt.parameters)}};
  if (ckpt.kind == "train_state")
    header["momentum"] = detail::checkpoint_params_json(ckpt.momentum);
  else if (!ckpt.momentum.empty())
    throw ArgumentError("checkpoint: momentum requires kind 'train_state'");
  const std::string hbytes = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path);
  out.write(kCheckpointMagic, 8);
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t hlen = hbytes.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hbytes.data(), static_cast<std::streamsize>(hbytes.size()));
  for (const auto* list : {&ckpt.parameters, &ckpt.momentum})
    for (const CheckpointParam& p : *list)
      out.write(reinterpret_cast<const char*>(p.data.data()),
                static_cast<std::streamsize>(p.data.size() * 4));
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("checkpoint: " + path + " is not a checkpoint file");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (!in || version != kCheckpointVersion)
    throw DataError("checkpoint: " + path + " has format version " +
                    std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string hbytes(hlen, '\0');
  in.read(hbytes.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DataError("checkpoint: truncated header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hbytes);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: corrupt header in " + path + ": " + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.kind = header.at("kind").get<std::string>();
    if (header.at("dtype").get<std::string>() != "f32")
      throw DataError("checkpoint: " + path + " stores unsupported dtype");
    ckpt.network = network_config_from_json(header.at("network"));
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.iteration = header.at("iteration").get<std::int64_t>();
    ckpt.best_val_dice = header.at("best_val_dice").get<double>();
    ckpt.parameters =
        detail::checkpoint_params_from_json(header.at("parameters"), path);
    if (ckpt.kind == "train_state")
      ckpt.momentum =
          detail::checkpoint_params_from_json(header.at("momentum"), path);
    else if (ckpt.kind != "model")
      throw DataError("checkpoint: " + path + " has unknown kind '" +
                      ckpt.kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: corrupt header in " + path + ": " + e.what());
  }

  for (auto* list : {&ckpt.parameters, &ckpt.momentum})
    for (CheckpointParam& p : *list) {
      p.data.resize(static_cast<size_t>(p.shape.count()));
      in.read(reinterpret_cast<char*>(p.data.data()),
              static_cast<std::streamsize>(p.data.size() * 4));
      if (!in)
        throw DataError("checkpoint: truncated payload in " + path +
                        " at parameter '" + p.name + "'");
    }
  in.peek();
  if (!in.eof())
    throw DataError("checkpoint: trailing bytes in " + path);
  return ckpt;
}

// ---------------------------------------------------------------------------
// Network binding

template <class S>
std::vector<CheckpointParam> snapshot_parameters(const DBPNet<S>& net) {
  std::vector<CheckpointParam> out;
  for (const Param<S>& p : net.parameters()) {
    CheckpointParam cp;
    cp.name = p.name;
    cp.shape = p.var.shape();
    const Tensor4<S>& v = p.var.value();
    cp.data.resize(static_cast<size_t>(v.size()));
    for (std::int64_t i = 0; i < v.size(); ++i)
      cp.data[static_cast<size_t>(i)] = static_cast<float>(v[i]);
    out.push_back(std::move(cp));
  }
  return out;
}

template <class S>
void restore_parameters(DBPNet<S>& net,
                        const std::vector<CheckpointParam>& params,
                        const std::string& context) {
  auto& live = net.parameters();
  if (live.size() != params.size())
    throw DataError(context + ": checkpoint holds " +
                    std::to_string(params.size()) + " parameters, network has " +
                    std::to_string(live.size()));
  std::map<std::string, const CheckpointParam*> by_name;
  for (const CheckpointParam& p : params) by_name[p.name] = &p;
  for (Param<S>& p : live) {
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw DataError(context + ": checkpoint lacks parameter '" + p.name + "'");
    const CheckpointParam& cp = *it->second;
    if (!(cp.shape == p.var.shape()))
      throw DataError(context + ": parameter '" + p.name + "' has shape " +
                      cp.shape.str() + " in the checkpoint but " +
                      p.var.shape().str() + " in the network");
    Tensor4<S>& v = p.var.node()->value;
    for (std::int64_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<S>(cp.data[static_cast<size_t>(i)]);
  }
}

}  // namespace cpcr

#endif
