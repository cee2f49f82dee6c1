#ifndef CPCR_TRAINER_HPP
#define CPCR_TRAINER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpcr/checkpoint.hpp"
#include "cpcr/data.hpp"
#include "cpcr/losses.hpp"
#include "cpcr/metrics.hpp"
#include "cpcr/network.hpp"
#include "cpcr/ops.hpp"

namespace cpcr {

// Training orchestration: two-stream batches through the dual-branch network,
// loss assembly with ramp-up weighting, SGD with momentum, periodic
// validation on the UP branch, and checkpointing with exact resume.
//
// Every stochastic draw is keyed by (seed, purpose, counter), so a run is a
// pure function of (dataset, config) and resuming from a checkpoint at
// iteration k replays the exact loss sequence of an uninterrupted run.

struct OptimizerConfig {
  std::string kind = "sgd";
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void validate() const {
    if (kind != "sgd")
      throw ConfigError("optimizer.kind: only 'sgd' is available");
    if (!(lr > 0)) throw ConfigError("optimizer.lr: must be > 0");
    if (momentum < 0 || momentum >= 1)
      throw ConfigError("optimizer.momentum: must be in [0, 1)");
    if (weight_decay < 0)
      throw ConfigError("optimizer.weight_decay: must be >= 0");
  }
};

struct LrSchedule {
  std::string kind = "constant";  // "constant" or "poly"
  double poly_power = 0.9;

  void validate() const {
    if (kind != "constant" && kind != "poly")
      throw ConfigError("lr_schedule.kind: must be 'constant' or 'poly'");
    if (kind == "poly" && !(poly_power > 0))
      throw ConfigError("lr_schedule.poly_power: must be > 0");
  }
};

struct TrainConfig {
  std::int64_t max_iterations = 2000;
  std::int64_t val_every = 200;
  std::uint64_t seed = 1337;
  double consistency_temperature = 10.0;
  std::string val_branch = "up";  // "tr" kept for ablation
  OptimizerConfig optimizer;
  LrSchedule lr_schedule;
  LossWeights loss_weights;
  BatchSpec batch;

  void validate() const {
    if (max_iterations < 1)
      throw ConfigError("trainer.max_iterations: must be >= 1");
    if (val_every < 1) throw ConfigError("trainer.val_every: must be >= 1");
    if (!(consistency_temperature > 0))
      throw ConfigError("trainer.consistency_temperature: must be > 0");
    if (val_branch != "up" && val_branch != "tr")
      throw ConfigError("trainer.val_branch: must be 'up' or 'tr'");
    if (loss_weights.fixed_weight < 0 || loss_weights.w_max < 0)
      throw ConfigError("trainer.loss_weights: weights must be >= 0");
    if (loss_weights.t_max < 1)
      throw ConfigError("trainer.loss_weights.t_max: must be >= 1");
    if (loss_weights.ramp_step_iters < 1)
      throw ConfigError("trainer.rampup_step_every: must be >= 1");
    optimizer.validate();
    lr_schedule.validate();
    batch.validate();
  }
};

// SGD with momentum: v = mu*v + (g + wd*theta); theta -= lr*v. Parameters
// that received no gradient in a step are left untouched entirely.
template <class S>
class Sgd {
 public:
  Sgd(OptimizerConfig cfg, std::vector<Param<S>>* params)
      : cfg_(cfg), params_(params) {
    cfg_.validate();
    velocity_.reserve(params->size());
    for (const Param<S>& p : *params) velocity_.emplace_back(p.var.shape());
  }

  void step(double lr) {
    for (size_t i = 0; i < params_->size(); ++i) {
      Param<S>& p = (*params_)[i];
      Node<S>& node = *p.var.node();
      if (!node.has_grad) continue;
      auto& v = velocity_[i].array();
      auto& theta = node.value.array();
      v = static_cast<S>(cfg_.momentum) * v +
          (node.grad.array() + static_cast<S>(cfg_.weight_decay) * theta);
      theta -= static_cast<S>(lr) * v;
    }
  }

  std::vector<CheckpointParam> snapshot() const {
    std::vector<CheckpointParam> out;
    for (size_t i = 0; i < params_->size(); ++i) {
      CheckpointParam cp;
      cp.name = (*params_)[i].name;
      cp.shape = velocity_[i].shape();
      cp.data.resize(static_cast<size_t>(velocity_[i].size()));
      for (std::int64_t k = 0; k < velocity_[i].size(); ++k)
        cp.data[static_cast<size_t>(k)] = static_cast<float>(velocity_[i][k]);
      out.push_back(std::move(cp));
    }
    return out;
  }

  void restore(const std::vector<CheckpointParam>& buffers,
               const std::string& context) {
    if (buffers.size() != params_->size())
      throw DataError(context + ": checkpoint holds " +
                      std::to_string(buffers.size()) +
                      " momentum buffers, optimizer has " +
                      std::to_string(params_->size()));
    std::map<std::string, const CheckpointParam*> by_name;
    for (const CheckpointParam& b : buffers) by_name[b.name] = &b;
    for (size_t i = 0; i < params_->size(); ++i) {
      auto it = by_name.find((*params_)[i].name);
      if (it == by_name.end())
        throw DataError(context + ": checkpoint lacks momentum for '" +
                        (*params_)[i].name + "'");
      const CheckpointParam& b = *it->second;
      if (!(b.shape == velocity_[i].shape()))
        throw DataError(context + ": momentum shape mismatch for '" +
                        (*params_)[i].name + "'");
      for (std::int64_t k = 0; k < velocity_[i].size(); ++k)
        velocity_[i][k] = static_cast<S>(b.data[static_cast<size_t>(k)]);
    }
  }

  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Param<S>>* params_;
  std::vector<Tensor4<S>> velocity_;
};

struct TrainArtifacts {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path loss_log;
  std::filesystem::path val_log;
  double best_val_dice = -1.0;
  std::int64_t iterations = 0;
};

namespace detail {

// Drops log lines past the resume point, plus any torn line a crash left
// behind, so an appended continuation matches an uninterrupted run byte for
// byte.
inline void truncate_jsonl_log(const std::filesystem::path& path,
                               std::int64_t max_iteration) {
  std::ifstream in(path);
  if (!in) return;
  std::string kept, line;
  while (std::getline(in, line)) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("iteration") ||
        j.at("iteration").get<std::int64_t>() > max_iteration)
      continue;
    kept += line;
    kept += '\n';
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
  if (!out)
    throw IoError("trainer: cannot rewrite log " + path.string());
}

}  // namespace detail

// Converts a sample's label volume into the metrics module's representation.
inline LabelVolume volume_ground_truth(const VolumeSample& v) {
  LabelVolume out;
  out.name = v.name;
  out.dims = v.dims;
  for (int i = 0; i < 3; ++i) out.spacing[i] = v.spacing[i];
  out.labels.assign(v.label.begin(), v.label.end());
  return out;
}

// Slice-wise inference over one volume: preprocess each slice to the patch
// size, take the argmax of the chosen branch at temperature 1, resize the
// label map back to the native slice size, and restack.
inline LabelVolume predict_volume_with(DBPNet<float>& net,
                                       const VolumeSample& v, int patch_h,
                                       int patch_w,
                                       const std::string& branch) {
  TensorF batch(Shape4{v.slices(), 1, patch_h, patch_w});
  for (int s = 0; s < v.slices(); ++s) {
    const std::vector<float> slice = preprocess_slice(
        v.image_slice(s), v.height(), v.width(), patch_h, patch_w);
    std::copy(slice.begin(), slice.end(), batch.channel(s, 0));
  }

  TensorF probs;
  if (branch == "up") {
    probs = net.forward_inference(batch);
  } else if (branch == "tr") {
    NoGrad guard;
    Rng unused(0);
    BranchPyramids<float> pyr = net.forward(batch, Mode::eval, unused);
    probs = softmax_t(pyr.tr[3], 1.0).value();
  } else {
    throw ArgumentError("predict_volume: branch must be 'up' or 'tr'");
  }

  LabelVolume pred;
  pred.name = v.name;
  pred.dims = v.dims;
  for (int i = 0; i < 3; ++i) pred.spacing[i] = v.spacing[i];
  pred.labels.resize(static_cast<size_t>(v.voxels()));
  const int classes = probs.shape().c;
  std::vector<std::uint8_t> patch_labels(static_cast<size_t>(patch_h) *
                                         patch_w);
  for (int s = 0; s < v.slices(); ++s) {
    for (int i = 0; i < patch_h * patch_w; ++i) {
      int best = 0;
      float best_p = probs.channel(s, 0)[i];
      for (int c = 1; c < classes; ++c) {
        const float p = probs.channel(s, c)[i];
        if (p > best_p) {
          best_p = p;
          best = c;
        }
      }
      patch_labels[static_cast<size_t>(i)] = static_cast<std::uint8_t>(best);
    }
    std::vector<std::uint8_t> native = resize_label_slice(
        patch_labels.data(), patch_h, patch_w, v.height(), v.width());
    std::copy(native.begin(), native.end(),
              pred.labels.begin() +
                  static_cast<std::int64_t>(s) * v.height() * v.width());
  }
  return pred;
}

class Trainer {
 public:
  Trainer(TrainConfig tcfg, NetworkConfig ncfg,
          const std::vector<VolumeSample>* dataset, SSLSplit split,
          std::filesystem::path out_dir)
      : tcfg_(std::move(tcfg)),
        ncfg_(std::move(ncfg)),
        dataset_(dataset),
        out_dir_(std::move(out_dir)),
        net_(ncfg_, tcfg_.seed),
        opt_(tcfg_.optimizer, &net_.parameters()),
        sampler_(dataset, split, tcfg_.batch, tcfg_.seed) {
    tcfg_.validate();
    for (const VolumeSample& v : *dataset)
      if (v.split_tag == SplitTag::val) val_volumes_.push_back(&v);
  }

  DBPNet<float>& network() { return net_; }
  Sgd<float>& optimizer() { return opt_; }
  const BatchSampler& sampler() const { return sampler_; }

  double learning_rate(std::int64_t step_index) const {
    if (tcfg_.lr_schedule.kind == "poly")
      return tcfg_.optimizer.lr *
             std::pow(1.0 - static_cast<double>(step_index) /
                                static_cast<double>(tcfg_.max_iterations),
                      tcfg_.lr_schedule.poly_power);
    return tcfg_.optimizer.lr;
  }

  LossBreakdown train_step(std::int64_t step_index) {
    return train_step_with(sampler_.batch(step_index), step_index);
  }

  // step_index is 0-based; logged iteration numbers and the ramp-up clock are
  // 1-based, so the ramp tick first advances at iteration ramp_step_iters.
  LossBreakdown train_step_with(const SliceBatch& batch,
                                std::int64_t step_index) {
    const LossWeights& w = tcfg_.loss_weights;
    const std::int64_t logged = step_index + 1;
    const std::int64_t t = ramp_tick(logged, w);

    const int bl = batch.labeled_images.shape().n;
    const int bu = batch.unlabeled_images.empty()
                       ? 0
                       : batch.unlabeled_images.shape().n;
    const int h = batch.labeled_images.shape().h;
    const int ww = batch.labeled_images.shape().w;
    TensorF images(Shape4{bl + bu, 1, h, ww});
    std::copy(batch.labeled_images.data(),
              batch.labeled_images.data() + batch.labeled_images.size(),
              images.data());
    if (bu > 0)
      std::copy(batch.unlabeled_images.data(),
                batch.unlabeled_images.data() + batch.unlabeled_images.size(),
                images.data() + batch.labeled_images.size());

    Rng step_rng(hash_combine(hash_combine(tcfg_.seed, "step"),
                              static_cast<std::uint64_t>(step_index)));
    BranchPyramids<float> pyr = net_.forward(images, Mode::train, step_rng);

    VarF sup = supervised_loss(narrow_batch(pyr.tr[3], 0, bl),
                               narrow_batch(pyr.up[3], 0, bl),
                               batch.labeled_labels);
    const double sup_v = sup.value().scalar();
    VarF total = sup;

    double con_main_v = 0.0, um_v = 0.0, con_aux_v = 0.0;
    // Terms with weight exactly zero are never built, so a zero-weight run
    // is the plain supervised loop rather than "supervised plus zero".
    if (w.fixed_weight != 0.0) {
      VarF con_main = main_consistency_loss(pyr.tr[3], pyr.up[3],
                                            tcfg_.consistency_temperature,
                                            w.kl_t2_rescale);
      VarF um = uncertainty_min_loss(softmax_t(pyr.tr[3], 1.0),
                                     softmax_t(pyr.up[3], 1.0));
      con_main_v = con_main.value().scalar();
      um_v = um.value().scalar();
      total = add(total, scale(add(con_main, um),
                               static_cast<float>(w.fixed_weight)));
    }
    if (w.w_max != 0.0) {
      VarF con_aux = aux_consistency_loss(pyr.tr_aux(), pyr.up_aux(),
                                          tcfg_.consistency_temperature,
                                          w.kl_t2_rescale);
      con_aux_v = con_aux.value().scalar();
      total = add(total, scale(con_aux,
                               static_cast<float>(ramp_up_weight(t, w))));
    }

    const LossBreakdown b =
        make_breakdown(sup_v, con_main_v, con_aux_v, um_v, t, w);
    if (!std::isfinite(b.total))
      throw Error("non-finite loss at iteration " + std::to_string(logged) +
                  ": sup=" + std::to_string(b.sup) +
                  " con_main=" + std::to_string(b.con_main) +
                  " con_aux=" + std::to_string(b.con_aux) +
                  " um=" + std::to_string(b.um) +
                  " lambda_t=" + std::to_string(b.lambda_t));

    net_.clear_grads();
    total.backward();
    opt_.step(learning_rate(step_index));
    net_.clear_grads();
    return b;
  }

  LabelVolume predict_volume(const VolumeSample& v) {
    return predict_volume_with(net_, v, tcfg_.batch.patch_h,
                               tcfg_.batch.patch_w, tcfg_.val_branch);
  }

  MetricsReport validate() {
    if (val_volumes_.empty())
      throw DataError("validate: the dataset has no val volumes");
    std::vector<LabelVolume> preds, gts;
    for (const VolumeSample* v : val_volumes_) {
      preds.push_back(predict_volume(*v));
      gts.push_back(volume_ground_truth(*v));
    }
    return evaluate_volumes(preds, gts, ncfg_.num_classes,
                            DistanceRoute::transform);
  }

  // Trains from scratch or from a train_state checkpoint. A positive
  // stop_after ends the session once that iteration completes (a clean
  // interruption: last.ckpt is saved so a later resume continues the exact
  // trajectory). On resume the logs are truncated back to the checkpoint
  // iteration before appending, so a finished run's logs match an
  // uninterrupted run's byte for byte even after a mid-interval crash.
  TrainArtifacts run(const std::string& resume_from = "",
                     std::int64_t stop_after = 0) {
    TrainArtifacts art;
    std::filesystem::create_directories(out_dir_);
    art.best_checkpoint = out_dir_ / "best.ckpt";
    art.last_checkpoint = out_dir_ / "last.ckpt";
    art.loss_log = out_dir_ / "loss_log.jsonl";
    art.val_log = out_dir_ / "val_log.jsonl";

    std::int64_t start = 0;
    if (!resume_from.empty()) {
      const Checkpoint ckpt = load_checkpoint(resume_from);
      if (ckpt.kind != "train_state")
        throw DataError("resume: " + resume_from +
                        " is a model checkpoint without optimizer state");
      if (!(ckpt.network == ncfg_))
        throw ConfigError("resume: checkpoint network config differs from "
                          "the run's network config");
      if (ckpt.seed != tcfg_.seed)
        throw ConfigError("resume: checkpoint seed " +
                          std::to_string(ckpt.seed) +
                          " differs from configured seed " +
                          std::to_string(tcfg_.seed));
      restore_parameters(net_, ckpt.parameters, "resume");
      opt_.restore(ckpt.momentum, "resume");
      start = ckpt.iteration;
      best_val_dice_ = ckpt.best_val_dice;
      if (start >= tcfg_.max_iterations)
        throw ArgumentError("resume: checkpoint is already at iteration " +
                            std::to_string(start));
      detail::truncate_jsonl_log(art.loss_log, start);
      detail::truncate_jsonl_log(art.val_log, start);
    }
    if (stop_after > 0 && stop_after <= start)
      throw ArgumentError("run: stop_after " + std::to_string(stop_after) +
                          " is not past the starting iteration " +
                          std::to_string(start));

    const auto mode = start > 0 ? std::ios::app : std::ios::trunc;
    std::ofstream loss_log(art.loss_log, mode);
    std::ofstream val_log(art.val_log, mode);
    if (!loss_log || !val_log)
      throw IoError("trainer: cannot write logs under " + out_dir_.string());

    const char* env = std::getenv("CPCR_NUM_WORKERS");
    const int workers = env ? std::atoi(env) : 0;
    std::future<SliceBatch> pending;
    auto fetch = [this](std::int64_t i) { return sampler_.batch(i); };
    if (workers > 0) pending = std::async(std::launch::async, fetch, start);

    for (std::int64_t it = start; it < tcfg_.max_iterations; ++it) {
      SliceBatch batch = workers > 0 ? pending.get() : fetch(it);
      if (workers > 0 && it + 1 < tcfg_.max_iterations)
        pending = std::async(std::launch::async, fetch, it + 1);

      LossBreakdown b;
      try {
        b = train_step_with(batch, it);
      } catch (...) {
        loss_log.flush();
        val_log.flush();
        throw;
      }
      const std::int64_t logged = it + 1;
      loss_log << nlohmann::json{{"iteration", logged},
                                 {"sup", b.sup},
                                 {"con_main", b.con_main},
                                 {"con_aux", b.con_aux},
                                 {"um", b.um},
                                 {"lambda_t", b.lambda_t},
                                 {"total", b.total}}
                      .dump()
               << "\n";
      loss_log.flush();

      if (logged % tcfg_.val_every == 0 || logged == tcfg_.max_iterations) {
        const MetricsReport report = validate();
        const double mean_dsc =
            std::isnan(report.mean.dsc) ? -1.0 : report.mean.dsc;
        nlohmann::json per_class = nlohmann::json::object();
        for (const auto& [c, mv] : report.per_class)
          per_class[std::to_string(c)] = metric_values_json(mv);
        val_log << nlohmann::json{{"iteration", logged},
                                  {"mean", metric_values_json(report.mean)},
                                  {"per_class", per_class},
                                  {"best_val_dice",
                                   std::max(best_val_dice_, mean_dsc)}}
                       .dump()
                << "\n";
        val_log.flush();
        if (mean_dsc > best_val_dice_) {
          best_val_dice_ = mean_dsc;
          save_checkpoint(make_checkpoint("model", logged),
                          art.best_checkpoint.string());
        }
        save_checkpoint(make_checkpoint("train_state", logged),
                        art.last_checkpoint.string());
      }

      if (stop_after > 0 && logged == stop_after &&
          logged < tcfg_.max_iterations) {
        save_checkpoint(make_checkpoint("train_state", logged),
                        art.last_checkpoint.string());
        art.best_val_dice = best_val_dice_;
        art.iterations = logged;
        return art;
      }
    }
    art.best_val_dice = best_val_dice_;
    art.iterations = tcfg_.max_iterations;
    return art;
  }

  Checkpoint make_checkpoint(const std::string& kind,
                             std::int64_t iteration) const {
    Checkpoint ckpt;
    ckpt.kind = kind;
    ckpt.network = ncfg_;
    ckpt.seed = tcfg_.seed;
    ckpt.iteration = iteration;
    ckpt.best_val_dice = best_val_dice_;
    ckpt.parameters = snapshot_parameters(net_);
    if (kind == "train_state") ckpt.momentum = opt_.snapshot();
    return ckpt;
  }

  double best_val_dice() const { return best_val_dice_; }
  const TrainConfig& config() const { return tcfg_; }
  const NetworkConfig& network_config() const { return ncfg_; }

 private:
  TrainConfig tcfg_;
  NetworkConfig ncfg_;
  const std::vector<VolumeSample>* dataset_;
  std::filesystem::path out_dir_;
  DBPNet<float> net_;
  Sgd<float> opt_;
  BatchSampler sampler_;
  std::vector<const VolumeSample*> val_volumes_;
  double best_val_dice_ = -1.0;
};

}  // namespace cpcr

#endif
