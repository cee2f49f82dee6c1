#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cpcr/cli.hpp"
#include "fd_check.hpp"

// Release acceptance checks. Each criterion prints exactly one PASS/FAIL
// line; failures also list what broke. Criteria 1-5 and 8 are cheap and run
// first; criteria 6 and 7 share four full desk-profile training runs (about
// 90 minutes on one CPU core) that start lazily when criterion 6 begins.

using namespace cpcr;
using cpcr_tests::max_rel_err;
using cpcr_tests::numeric_grad;
using cpcr_tests::random_tensor;
namespace fs = std::filesystem;
using SteadyClock = std::chrono::steady_clock;

namespace {

double seconds_since(SteadyClock::time_point t0) {
  return std::chrono::duration<double>(SteadyClock::now() - t0).count();
}

// Collects a criterion's failures and prints the one-line verdict.
struct Gate {
  int id;
  std::string title;
  std::vector<std::string> problems;
  std::string note;
  SteadyClock::time_point t0 = SteadyClock::now();

  Gate(int id_, std::string title_) : id(id_), title(std::move(title_)) {}

  void require(bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  }

  void finish() {
    const bool ok = problems.empty();
    std::ostringstream line;
    line << "criterion " << id << ": " << (ok ? "PASS" : "FAIL") << " - "
         << title;
    if (!note.empty()) line << " (" << note << ")";
    char secs[32];
    std::snprintf(secs, sizeof(secs), " [%.2fs]", seconds_since(t0));
    line << secs;
    std::printf("%s\n", line.str().c_str());
    for (const std::string& p : problems)
      std::printf("  failed: %s\n", p.c_str());
    std::fflush(stdout);
    std::string joined = "criterion " + std::to_string(id);
    for (const std::string& p : problems) joined += "; " + p;
    CHECK_MESSAGE(ok, joined);
  }
};

VarD probs_of(const TensorD& logits, double temp) {
  return softmax_t(VarD::leaf(logits, false), temp);
}

TensorF random_imagef(int n, int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  TensorF t(n, c, h, w);
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<float>(rng.uniform());
  return t;
}

bool bitwise_equal(const TensorF& a, const TensorF& b) {
  if (!a.same_shape(b)) return false;
  for (std::int64_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "<unreadable " + p.string() + ">";
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

SSLSplit split_of(const std::vector<VolumeSample>& dataset, double ratio,
                  std::uint64_t seed) {
  std::vector<std::string> train_ids;
  for (const VolumeSample& v : dataset)
    if (v.split_tag == SplitTag::train) train_ids.push_back(v.patient_id);
  return make_ssl_split(train_ids, ratio, seed);
}

// Small fixture for log-replay checks: full pipeline, toy sizes.
struct TinyRun {
  SyntheticSpec spec;
  NetworkConfig net;
  TrainConfig train;

  TinyRun(std::int64_t iterations, int ramp_step_iters) {
    spec.num_volumes = 6;
    spec.slices_per_volume = 3;
    spec.image_h = spec.image_w = 48;
    spec.seed = 99;
    net.encoder_channels = {2, 4, 8, 16, 32};
    net.input_h = net.input_w = 32;
    train.max_iterations = iterations;
    train.val_every = iterations;
    train.seed = 99;
    train.batch.labeled = 2;
    train.batch.unlabeled = 2;
    train.batch.patch_h = train.batch.patch_w = 32;
    train.loss_weights.ramp_step_iters = ramp_step_iters;
  }
};

BinaryMask3D random_mask3(std::array<int, 3> dims, double fill, Rng& rng,
                          std::array<double, 3> spacing) {
  BinaryMask3D m(dims, spacing);
  for (auto& v : m.voxels) v = rng.uniform() < fill ? 1 : 0;
  return m;
}

BinaryMask3D blob_mask3(std::array<int, 3> dims, int blobs, Rng& rng,
                        std::array<double, 3> spacing) {
  BinaryMask3D m(dims, spacing);
  for (int b = 0; b < blobs; ++b) {
    const int cz = rng.uniform_int(dims[0]);
    const int cy = rng.uniform_int(dims[1]);
    const int cx = rng.uniform_int(dims[2]);
    const double r = 1.0 + rng.uniform() * (dims[2] / 3.0);
    for (int z = 0; z < dims[0]; ++z)
      for (int y = 0; y < dims[1]; ++y)
        for (int x = 0; x < dims[2]; ++x) {
          const double d2 = (z - cz) * (z - cz) + (y - cy) * (y - cy) +
                            (x - cx) * (x - cx);
          if (d2 <= r * r) m.set(z, y, x, true);
        }
  }
  return m;
}

bool mask_empty(const BinaryMask3D& m) {
  for (auto v : m.voxels)
    if (v) return false;
  return true;
}

bool params_match(DBPNet<float>& a, DBPNet<float>& b) {
  if (a.parameters().size() != b.parameters().size()) return false;
  for (size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& x = a.parameters()[i].var.value();
    const auto& y = b.parameters()[i].var.value();
    if (!(x.shape() == y.shape())) return false;
    if (!(x.array() == y.array()).all()) return false;
  }
  return true;
}

// Four desk-profile runs shared by criteria 6 and 7: A and C are identical
// full runs (repeatability), B stops cleanly at the midpoint and resumes
// (resume fidelity), and base is the labeled-only reference with every
// regularizer weight at zero.
struct DeskRuns {
  fs::path root;
  RunConfig cfg;
  std::vector<VolumeSample> dataset;
  SSLSplit split;
  TrainArtifacts run_a, run_b, run_c, run_base;
  double secs_a = 0, secs_b = 0, secs_c = 0, secs_base = 0;
};

const DeskRuns& desk_runs() {
  static const DeskRuns runs = [] {
    DeskRuns r;
    r.cfg = desk_profile();
    r.root = fs::temp_directory_path() / "cpcr_acceptance_desk";
    fs::remove_all(r.root);
    fs::create_directories(r.root);
    r.dataset = generate_synthetic_dataset(*r.cfg.synthetic);
    r.split = split_for(r.cfg, r.dataset);
    std::printf("[desk] dataset: %d volumes, %zu labeled / %zu unlabeled "
                "train patients\n",
                r.cfg.synthetic->num_volumes, r.split.labeled_ids.size(),
                r.split.unlabeled_ids.size());
    std::fflush(stdout);

    auto timed_run = [&](const TrainConfig& t, const fs::path& out,
                         const char* tag, double* secs) {
      std::printf("[desk] %s: %lld iterations...\n", tag,
                  static_cast<long long>(t.max_iterations));
      std::fflush(stdout);
      const auto t0 = SteadyClock::now();
      Trainer trainer(t, r.cfg.network, &r.dataset, r.split, out);
      TrainArtifacts art = trainer.run();
      *secs = seconds_since(t0);
      std::printf("[desk] %s done: best val dice %.4f [%.0fs]\n", tag,
                  art.best_val_dice, *secs);
      std::fflush(stdout);
      return art;
    };

    r.run_a = timed_run(r.cfg.trainer, r.root / "a", "run A", &r.secs_a);

    {
      std::printf("[desk] run B: stop at 1000, then resume to 2000...\n");
      std::fflush(stdout);
      const auto t0 = SteadyClock::now();
      Trainer first(r.cfg.trainer, r.cfg.network, &r.dataset, r.split,
                    r.root / "b");
      TrainArtifacts half = first.run("", 1000);
      Trainer second(r.cfg.trainer, r.cfg.network, &r.dataset, r.split,
                     r.root / "b");
      r.run_b = second.run(half.last_checkpoint.string());
      r.secs_b = seconds_since(t0);
      std::printf("[desk] run B done: best val dice %.4f [%.0fs]\n",
                  r.run_b.best_val_dice, r.secs_b);
      std::fflush(stdout);
    }

    r.run_c = timed_run(r.cfg.trainer, r.root / "c", "run C", &r.secs_c);

    TrainConfig base = r.cfg.trainer;
    base.loss_weights.fixed_weight = 0.0;
    base.loss_weights.w_max = 0.0;
    base.batch.unlabeled = 0;
    r.run_base =
        timed_run(base, r.root / "base", "labeled-only baseline", &r.secs_base);
    return r;
  }();
  return runs;
}

}  // namespace

TEST_CASE("criterion 1: softmax, kl, and entropy analytics") {
  Gate g{1, "temperature softmax, KL, and entropy match hand values"};
  try {
    TensorD z = TensorD::from_list({1.0, 0.0});
    VarD p1 = probs_of(z, 1.0);
    g.require(std::abs(p1.value()[0] - 0.7311) <= 1e-4 &&
                  std::abs(p1.value()[1] - 0.2689) <= 1e-4,
              "softmax([1,0], T=1) != [0.7311, 0.2689] within 1e-4");
    VarD p10 = probs_of(z, 10.0);
    g.require(std::abs(p10.value()[0] - 0.5250) <= 1e-4 &&
                  std::abs(p10.value()[1] - 0.4750) <= 1e-4,
              "softmax([1,0], T=10) != [0.5250, 0.4750] within 1e-4");

    Rng rng(41);
    VarD pr = probs_of(random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0), 1.0);
    g.require(std::abs(kl_soft(pr, pr).value().scalar()) <= 1e-7,
              "KL(p, p) not zero within 1e-7");

    VarD s = VarD::leaf(TensorD::from_list({0.5, 0.5}), false);
    VarD t = VarD::leaf(TensorD::from_list({0.75, 0.25}), false);
    g.require(std::abs(kl_soft(s, t).value().scalar() - 0.13081) <= 1e-4,
              "KL([.5,.5] student, [.75,.25] teacher) != 0.13081 within 1e-4");

    TensorD u(1, 4, 2, 2);
    for (std::int64_t i = 0; i < u.size(); ++i) u[i] = 0.25;
    g.require(std::abs(mean_entropy(VarD::leaf(u, false)).value().scalar() -
                       1.3863) <= 1e-4,
              "entropy of uniform-4 != 1.3863 within 1e-4");

    g.require(seconds_since(g.t0) < 1.0, "runtime reached 1s");
  } catch (const std::exception& e) {
    g.problems.push_back(std::string("exception: ") + e.what());
  }
  g.finish();
}

TEST_CASE("criterion 2: consistency ramp schedule") {
  Gate g{2, "ramp-up weight values and trainer log replay"};
  try {
    const LossWeights w;
    g.require(std::abs(ramp_up_weight(0, w) - 6.738e-4) <= 1e-6,
              "lambda(0) != 6.738e-4 within 1e-6");
    g.require(std::abs(ramp_up_weight(100, w) - 0.028650) <= 1e-5,
              "lambda(100) != 0.028650 within 1e-5");
    g.require(ramp_up_weight(200, w) == 0.1, "lambda(200) != 0.1 exactly");
    g.require(ramp_up_weight(300, w) == 0.1, "lambda(300) does not clamp");

    bool ticks_ok = true;
    for (std::int64_t i : {0, 1, 149, 150, 151, 299, 300, 449, 2999, 100000})
      ticks_ok = ticks_ok && ramp_tick(i, w) == i / 150;
    g.require(ticks_ok, "ramp_tick != iteration/150 for default weights");

    // Replay two short training logs against the schedule: default tick
    // width, then a 2-iteration tick so nonzero ticks appear in the log.
    for (int step_iters : {150, 2}) {
      TinyRun tiny(6, step_iters);
      const auto dataset = generate_synthetic_dataset(tiny.spec);
      const SSLSplit split = split_of(dataset, 0.5, tiny.train.seed);
      const fs::path out = fs::temp_directory_path() /
                           ("cpcr_acceptance_ramp_" +
                            std::to_string(step_iters));
      fs::remove_all(out);
      Trainer trainer(tiny.train, tiny.net, &dataset, split, out);
      TrainArtifacts art = trainer.run();
      for (const nlohmann::json& j : read_jsonl(art.loss_log)) {
        const std::int64_t it = j.at("iteration").get<std::int64_t>();
        const double want =
            ramp_up_weight(ramp_tick(it, tiny.train.loss_weights),
                           tiny.train.loss_weights);
        if (j.at("lambda_t").get<double>() != want)
          g.problems.push_back(
              "logged lambda at iteration " + std::to_string(it) +
              " != ramp_up_weight(iteration/" + std::to_string(step_iters) +
              ")");
      }
    }
    g.require(seconds_since(g.t0) < 1.0, "runtime reached 1s");
  } catch (const std::exception& e) {
    g.problems.push_back(std::string("exception: ") + e.what());
  }
  g.finish();
}

TEST_CASE("criterion 3: teacher freezing and analytic gradients") {
  Gate g{3, "teacher-side gradients are zero; student gradients match FD"};
  try {
    Rng rng(2026);

    for (double T : {1.0, 10.0}) {
      TensorD zs = random_tensor({1, 3, 2, 2}, rng);
      TensorD zt = random_tensor({1, 3, 2, 2}, rng);
      VarD ls = VarD::leaf(zs, true);
      VarD lt = VarD::leaf(zt, true);
      kl_soft(softmax_t(ls, T), softmax_t(lt, T)).backward();
      bool teacher_zero = true, student_any = false;
      for (std::int64_t i = 0; i < zt.size(); ++i) {
        teacher_zero = teacher_zero && lt.grad()[i] == 0.0;
        student_any = student_any || ls.grad()[i] != 0.0;
      }
      g.require(teacher_zero, "teacher logits got gradient at T=" +
                                  std::to_string(T));
      g.require(student_any, "student logits got no gradient at T=" +
                                 std::to_string(T));
    }

    const double T = 10.0;

    {
      TensorD ztr = random_tensor({1, 3, 2, 2}, rng, -1.0, 1.0);
      TensorD zup = random_tensor({1, 3, 2, 2}, rng, -1.0, 1.0);
      const VarD teach_tr = probs_of(ztr, T);
      const VarD teach_up = probs_of(zup, T);
      // Each branch is differentiable only where it plays the student; the
      // FD value function holds the teacher roles at their base values.
      auto value_tr = [&]() {
        NoGrad ng;
        return kl_soft(probs_of(ztr, T), teach_up).value().scalar() +
               kl_soft(teach_up, teach_tr).value().scalar();
      };
      auto value_up = [&]() {
        NoGrad ng;
        return kl_soft(teach_tr, teach_up).value().scalar() +
               kl_soft(probs_of(zup, T), teach_tr).value().scalar();
      };
      TensorD fd_tr = numeric_grad(value_tr, ztr);
      TensorD fd_up = numeric_grad(value_up, zup);
      VarD ltr = VarD::leaf(ztr, true);
      VarD lup = VarD::leaf(zup, true);
      main_consistency_loss(ltr, lup, T).backward();
      g.require(max_rel_err(ltr.grad(), fd_tr) < 1e-4,
                "con_main TR-side gradient off by more than 1e-4 relative");
      g.require(max_rel_err(lup.grad(), fd_up) < 1e-4,
                "con_main UP-side gradient off by more than 1e-4 relative");
    }

    {
      std::array<TensorD, 3> za, zb;
      for (int s = 0; s < 3; ++s) {
        za[static_cast<size_t>(s)] = random_tensor({1, 3, 2, 2}, rng, -1.0, 1.0);
        zb[static_cast<size_t>(s)] = random_tensor({1, 3, 2, 2}, rng, -1.0, 1.0);
      }
      const VarD teach_tr0 = probs_of(za[0], T);
      const VarD teach_up0 = probs_of(zb[0], T);
      // Scales 1 and 2 are constants in ztr0, so central differences drop
      // them; the scale-0 term enters the mean with weight 1/3.
      auto value = [&]() {
        NoGrad ng;
        return (kl_soft(probs_of(za[0], T), teach_up0).value().scalar() +
                kl_soft(teach_up0, teach_tr0).value().scalar()) /
               3.0;
      };
      TensorD fd = numeric_grad(value, za[0]);
      std::array<VarD, 3> ltr, lup;
      for (int s = 0; s < 3; ++s) {
        ltr[static_cast<size_t>(s)] = VarD::leaf(za[static_cast<size_t>(s)], true);
        lup[static_cast<size_t>(s)] = VarD::leaf(zb[static_cast<size_t>(s)], true);
      }
      aux_consistency_loss(ltr, lup, T).backward();
      g.require(max_rel_err(ltr[0].grad(), fd) < 1e-4,
                "con_aux scale-0 gradient off by more than 1e-4 relative");
    }

    {
      TensorD z1 = random_tensor({1, 3, 2, 2}, rng, -1.0, 1.0);
      TensorD z2 = random_tensor({1, 3, 2, 2}, rng, -1.0, 1.0);
      auto value = [&]() {
        NoGrad ng;
        return uncertainty_min_loss(probs_of(z1, 1.0), probs_of(z2, 1.0))
            .value()
            .scalar();
      };
      TensorD fd1 = numeric_grad(value, z1);
      TensorD fd2 = numeric_grad(value, z2);
      VarD l1 = VarD::leaf(z1, true);
      VarD l2 = VarD::leaf(z2, true);
      uncertainty_min_loss(softmax_t(l1, 1.0), softmax_t(l2, 1.0)).backward();
      g.require(max_rel_err(l1.grad(), fd1) < 1e-4,
                "uncertainty-min TR-side gradient off by more than 1e-4");
      g.require(max_rel_err(l2.grad(), fd2) < 1e-4,
                "uncertainty-min UP-side gradient off by more than 1e-4");
    }

    {
      TensorD zd = random_tensor({1, 3, 2, 2}, rng, -1.0, 1.0);
      TensorI lab(1, 1, 2, 2);
      for (std::int64_t i = 0; i < lab.size(); ++i)
        lab[i] = rng.uniform_int(3);
      auto value = [&]() {
        NoGrad ng;
        return dice_loss(probs_of(zd, 1.0), lab).value().scalar();
      };
      TensorD fd = numeric_grad(value, zd);
      VarD ld = VarD::leaf(zd, true);
      dice_loss(softmax_t(ld, 1.0), lab).backward();
      g.require(max_rel_err(ld.grad(), fd) < 1e-4,
                "dice gradient off by more than 1e-4 relative");
    }

    g.require(seconds_since(g.t0) < 30.0, "runtime reached 30s");
  } catch (const std::exception& e) {
    g.problems.push_back(std::string("exception: ") + e.what());
  }
  g.finish();
}

TEST_CASE("criterion 4: parameter counts, pyramid outputs, eval determinism") {
  Gate g{4, "network size and forward behavior"};
  try {
    NetworkConfig nc;
    DBPNet<float> net(nc, 7);
    const std::int64_t backbone =
        net.count_parameters(ParameterScope::backbone_unet_equivalent);
    const std::int64_t deploy =
        net.count_parameters(ParameterScope::inference_up_branch);
    {
      std::ostringstream n;
      n << "backbone " << backbone << ", deploy " << deploy;
      g.note = n.str();
    }
    g.require(std::llabs(backbone - 1810000) <= 36200,
              "backbone parameter count outside 1.81M +/- 2%");
    g.require(std::llabs(deploy - 1830000) <= 36600,
              "inference UP-branch parameter count outside 1.83M +/- 2%");

    const TensorF img = random_imagef(2, 1, 64, 64, 11);
    Rng rng(5);
    BranchPyramids<float> pyr = net.forward(img, Mode::train, rng);
    const Shape4 want{2, 4, 64, 64};
    bool shapes_ok = true;
    for (int s = 0; s < 4; ++s) {
      shapes_ok = shapes_ok &&
                  pyr.tr[static_cast<size_t>(s)].value().shape() == want &&
                  pyr.up[static_cast<size_t>(s)].value().shape() == want;
    }
    g.require(shapes_ok,
              "forward did not emit 2x4 class maps at input resolution");

    NoGrad ng;
    Rng r1(1), r2(999);
    BranchPyramids<float> a = net.forward(img, Mode::eval, r1);
    BranchPyramids<float> b = net.forward(img, Mode::eval, r2);
    bool eval_same = true;
    for (int s = 0; s < 4; ++s) {
      eval_same = eval_same &&
                  bitwise_equal(a.tr[static_cast<size_t>(s)].value(),
                                b.tr[static_cast<size_t>(s)].value()) &&
                  bitwise_equal(a.up[static_cast<size_t>(s)].value(),
                                b.up[static_cast<size_t>(s)].value());
    }
    g.require(eval_same, "eval-mode forward is not bitwise deterministic");
    g.require(bitwise_equal(net.forward_inference(img),
                            net.forward_inference(img)),
              "forward_inference is not bitwise deterministic");
  } catch (const std::exception& e) {
    g.problems.push_back(std::string("exception: ") + e.what());
  }
  g.finish();
}

TEST_CASE("criterion 5: surface distance oracle agreement") {
  Gate g{5, "fast hd95/asd agree with brute force"};
  try {
    Rng rng(7);
    BinaryMask3D ident = blob_mask3({10, 12, 12}, 3, rng, {1, 1, 1});
    if (mask_empty(ident)) ident.set(0, 0, 0, true);
    g.require(dice_coefficient(ident, ident) == 1.0 &&
                  jaccard(ident, ident) == 1.0,
              "identity masks: overlap metrics not perfect");
    for (DistanceRoute route :
         {DistanceRoute::transform, DistanceRoute::brute_force})
      g.require(hd95(ident, ident, route) == 0.0 &&
                    asd(ident, ident, route) == 0.0,
                "identity masks: surface distances not zero");

    BinaryMask3D va({2, 8, 8}, {1, 1, 1});
    va.set(0, 1, 1, true);
    BinaryMask3D vb({2, 8, 8}, {1, 1, 1});
    vb.set(0, 4, 5, true);
    for (DistanceRoute route :
         {DistanceRoute::transform, DistanceRoute::brute_force})
      g.require(hd95(va, vb, route) == 5.0 && asd(va, vb, route) == 5.0,
                "single voxels offset by (0,3,4): hd95/asd != 5.0");

    for (int k = 0; k < 50; ++k) {
      const std::array<int, 3> dims{1 + rng.uniform_int(16),
                                    1 + rng.uniform_int(16),
                                    1 + rng.uniform_int(16)};
      std::array<double, 3> spacing{1, 1, 1};
      if (k % 2 == 1)
        spacing = {rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0),
                   rng.uniform(0.5, 2.0)};
      BinaryMask3D a = k % 3 == 0
                           ? random_mask3(dims, rng.uniform(0.05, 0.5), rng,
                                          spacing)
                           : blob_mask3(dims, 1 + rng.uniform_int(3), rng,
                                        spacing);
      BinaryMask3D b = k % 3 == 1
                           ? random_mask3(dims, rng.uniform(0.05, 0.5), rng,
                                          spacing)
                           : blob_mask3(dims, 1 + rng.uniform_int(3), rng,
                                        spacing);
      if (mask_empty(a)) a.set(0, 0, 0, true);
      if (mask_empty(b)) b.set(0, 0, 0, true);
      const double dh = std::abs(hd95(a, b, DistanceRoute::transform) -
                                 hd95(a, b, DistanceRoute::brute_force));
      const double da = std::abs(asd(a, b, DistanceRoute::transform) -
                                 asd(a, b, DistanceRoute::brute_force));
      if (dh >= 1e-6 || da >= 1e-6)
        g.problems.push_back("routes disagree on random pair " +
                             std::to_string(k));
    }
  } catch (const std::exception& e) {
    g.problems.push_back(std::string("exception: ") + e.what());
  }
  g.finish();
}

TEST_CASE("criterion 8: supervised path isolation") {
  Gate g{8, "unlabeled images cannot touch the supervised loss"};
  try {
    RunConfig cfg = desk_profile();
    std::vector<VolumeSample> dataset =
        generate_synthetic_dataset(*cfg.synthetic);

    {
      const SSLSplit split = split_for(cfg, dataset);
      const fs::path root = fs::temp_directory_path() / "cpcr_acceptance_c8";
      fs::remove_all(root);
      Trainer ta(cfg.trainer, cfg.network, &dataset, split, root / "a");
      Trainer tb(cfg.trainer, cfg.network, &dataset, split, root / "b");
      const SliceBatch batch = ta.sampler().batch(0);
      SliceBatch zeroed = batch;
      zeroed.unlabeled_images.array().setZero();
      const LossBreakdown la = ta.train_step_with(batch, 0);
      const LossBreakdown lb = tb.train_step_with(zeroed, 0);
      g.require(la.sup == lb.sup,
                "zeroing the unlabeled images changed L_sup");
      g.require(la.total != lb.total,
                "zeroing the unlabeled images left the total loss unchanged "
                "(consistency terms saw no unlabeled signal)");
    }

    // With every patient labeled and all regularizers off, the trainer must
    // reduce to plain dual-branch supervised training: its loss log must
    // exactly match an independent supervised loop.
    {
      cfg.labeled_ratio = 1.0;
      const SSLSplit split = split_for(cfg, dataset);
      TrainConfig t = cfg.trainer;
      t.max_iterations = 30;
      t.val_every = 30;
      t.batch.unlabeled = 0;
      t.loss_weights.fixed_weight = 0.0;
      t.loss_weights.w_max = 0.0;
      const fs::path out =
          fs::temp_directory_path() / "cpcr_acceptance_c8" / "sup";
      Trainer trainer(t, cfg.network, &dataset, split, out);
      TrainArtifacts art = trainer.run();

      DBPNet<float> ref(cfg.network, t.seed);
      Sgd<float> opt(t.optimizer, &ref.parameters());
      BatchSampler sampler(&dataset, split, t.batch, t.seed);
      std::vector<double> ref_sup;
      for (std::int64_t i = 0; i < t.max_iterations; ++i) {
        const SliceBatch batch = sampler.batch(i);
        Rng step_rng(hash_combine(hash_combine(t.seed, "step"),
                                  static_cast<std::uint64_t>(i)));
        BranchPyramids<float> pyr =
            ref.forward(batch.labeled_images, Mode::train, step_rng);
        VarF sup =
            supervised_loss(pyr.tr[3], pyr.up[3], batch.labeled_labels);
        ref_sup.push_back(static_cast<double>(sup.value().scalar()));
        ref.clear_grads();
        sup.backward();
        const double lr =
            t.optimizer.lr *
            std::pow(1.0 - static_cast<double>(i) /
                               static_cast<double>(t.max_iterations),
                     t.lr_schedule.poly_power);
        opt.step(lr);
        ref.clear_grads();
      }

      const auto lines = read_jsonl(art.loss_log);
      g.require(lines.size() == static_cast<size_t>(t.max_iterations),
                "supervised run logged the wrong number of iterations");
      for (size_t i = 0; i < lines.size() && i < ref_sup.size(); ++i) {
        const nlohmann::json& j = lines[i];
        if (j.at("iteration").get<std::int64_t>() !=
            static_cast<std::int64_t>(i) + 1)
          g.problems.push_back("loss log iterations are not consecutive");
        if (j.at("sup").get<double>() != ref_sup[i])
          g.problems.push_back("iteration " + std::to_string(i + 1) +
                               ": logged sup differs from the reference "
                               "supervised loop");
        if (j.at("total").get<double>() != ref_sup[i] ||
            j.at("con_main").get<double>() != 0.0 ||
            j.at("con_aux").get<double>() != 0.0 ||
            j.at("um").get<double>() != 0.0)
          g.problems.push_back("iteration " + std::to_string(i + 1) +
                               ": regularizer terms leaked into the total");
        if (g.problems.size() > 8) break;
      }
      g.require(params_match(trainer.network(), ref),
                "parameters diverged from the reference supervised loop");
    }
  } catch (const std::exception& e) {
    g.problems.push_back(std::string("exception: ") + e.what());
  }
  g.finish();
}

TEST_CASE("criterion 6: deterministic repeat and exact resume") {
  Gate g{6, "identical reruns and stop/resume reproduce logs byte for byte"};
  try {
    const DeskRuns& d = desk_runs();
    const std::string loss_a = file_bytes(d.run_a.loss_log);
    const std::string val_a = file_bytes(d.run_a.val_log);
    {
      std::ostringstream n;
      n << "loss log fnv1a " << std::hex << fnv1a(loss_a);
      g.note = n.str();
    }
    g.require(!loss_a.empty() && loss_a == file_bytes(d.run_c.loss_log),
              "repeat run produced a different loss log");
    g.require(val_a == file_bytes(d.run_c.val_log),
              "repeat run produced a different val log");
    g.require(file_bytes(d.run_a.best_checkpoint) ==
                  file_bytes(d.run_c.best_checkpoint),
              "repeat run produced a different best checkpoint");

    g.require(loss_a == file_bytes(d.run_b.loss_log),
              "stop/resume produced a different loss log");
    g.require(val_a == file_bytes(d.run_b.val_log),
              "stop/resume produced a different val log");
    g.require(file_bytes(d.run_a.best_checkpoint) ==
                  file_bytes(d.run_b.best_checkpoint),
              "stop/resume produced a different best checkpoint");
    g.require(file_bytes(d.run_a.last_checkpoint) ==
                  file_bytes(d.run_b.last_checkpoint),
              "stop/resume produced a different final checkpoint");
  } catch (const std::exception& e) {
    g.problems.push_back(std::string("exception: ") + e.what());
  }
  g.finish();
}

TEST_CASE("criterion 7: consistency training beats the labeled-only baseline") {
  Gate g{7, "desk-profile semi-supervised quality"};
  try {
    const DeskRuns& d = desk_runs();
    const double cpcr = d.run_a.best_val_dice;
    const double base = d.run_base.best_val_dice;
    {
      std::ostringstream n;
      n << "cpcr " << cpcr << ", labeled-only " << base << ", gap "
        << cpcr - base << "; runs took " << static_cast<int>(d.secs_a) << "s / "
        << static_cast<int>(d.secs_base) << "s";
      g.note = n.str();
    }
    g.require(cpcr >= 0.85, "best val mean DSC fell below 0.85");
    g.require(cpcr - base >= 0.02,
              "lead over the labeled-only baseline fell below 2 DSC points");
    g.require(d.secs_a <= 10800.0,
              "desk run exceeded the documented 3h CPU budget");
  } catch (const std::exception& e) {
    g.problems.push_back(std::string("exception: ") + e.what());
  }
  g.finish();
}
