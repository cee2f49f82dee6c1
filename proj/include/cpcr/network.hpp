#ifndef CPCR_NETWORK_HPP
#define CPCR_NETWORK_HPP

#include <array>
#include <map>
#include <string>
#include <vector>

#include "cpcr/losses.hpp"
#include "cpcr/ops.hpp"

// The dual-branch segmentation network: a five-level encoder shared by two
// decoders that differ only in how they upsample (transpose convolution vs
// 1x1 convolution + bilinear), each decoder carrying three perturbed
// pyramid heads and a main full-resolution classifier.

namespace cpcr {

enum class Mode { train, eval };

enum class PerturbationKind { dropout, feature_dropout, feature_noise };

inline const char* to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::dropout: return "dropout";
    case PerturbationKind::feature_dropout: return "feature_dropout";
    case PerturbationKind::feature_noise: return "feature_noise";
  }
  return "?";
}

inline PerturbationKind perturbation_from_string(const std::string& s) {
  if (s == "dropout") return PerturbationKind::dropout;
  if (s == "feature_dropout") return PerturbationKind::feature_dropout;
  if (s == "feature_noise") return PerturbationKind::feature_noise;
  throw ArgumentError("unknown perturbation kind: " + s);
}

// Which parameters a count covers: the whole training graph, the deployable
// UP branch, or the UP branch without its pyramid heads (a plain U-Net).
enum class ParameterScope {
  full_training,
  inference_up_branch,
  backbone_unet_equivalent
};

struct NetworkConfig {
  int in_channels = 1;
  int num_classes = 4;
  std::array<int, 5> encoder_channels{16, 32, 64, 128, 256};
  double branch_dropout_rate = 0.5;
  std::map<int, PerturbationKind> aux_perturbation_by_scale{
      {1, PerturbationKind::feature_noise},
      {2, PerturbationKind::feature_dropout},
      {3, PerturbationKind::dropout}};
  double feature_noise_range = 0.3;
  std::array<double, 2> feature_dropout_threshold_range{0.7, 0.9};
  int input_h = 256;
  int input_w = 256;

  bool operator==(const NetworkConfig&) const = default;

  void validate() const {
    if (in_channels < 1)
      throw ConfigError("network.in_channels: must be >= 1");
    if (num_classes < 2)
      throw ConfigError("network.num_classes: must be >= 2");
    for (size_t i = 0; i + 1 < encoder_channels.size(); ++i)
      if (encoder_channels[i] >= encoder_channels[i + 1])
        throw ConfigError(
            "network.encoder_channels: must be strictly increasing");
    if (encoder_channels[0] < 1)
      throw ConfigError("network.encoder_channels: must be positive");
    if (branch_dropout_rate < 0.0 || branch_dropout_rate >= 1.0)
      throw ConfigError("network.branch_dropout_rate: must be in [0, 1)");
    if (aux_perturbation_by_scale.size() != 3 ||
        !aux_perturbation_by_scale.count(1) ||
        !aux_perturbation_by_scale.count(2) ||
        !aux_perturbation_by_scale.count(3))
      throw ConfigError(
          "network.aux_perturbation_by_scale: needs exactly the keys 1, 2, 3");
    if (feature_noise_range < 0.0)
      throw ConfigError("network.feature_noise_range: must be >= 0");
    if (feature_dropout_threshold_range[0] > feature_dropout_threshold_range[1])
      throw ConfigError(
          "network.feature_dropout_threshold_range: lo must be <= hi");
    if (input_h % 16 != 0 || input_w % 16 != 0 || input_h <= 0 || input_w <= 0)
      throw ConfigError("network.input_size: must be divisible by 16");
  }
};

// Logit maps for both branches at pyramid scales 1..3 plus the main output
// (scale 4, index 3); every map is at input resolution.
template <class S>
struct BranchPyramids {
  std::array<Var<S>, 4> tr;
  std::array<Var<S>, 4> up;

  std::array<Var<S>, 3> tr_aux() const { return {tr[0], tr[1], tr[2]}; }
  std::array<Var<S>, 3> up_aux() const { return {up[0], up[1], up[2]}; }
};

template <class S>
struct Param {
  std::string name;
  Var<S> var;
};

template <class S>
class DBPNet {
 public:
  DBPNet(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(hash_combine(seed, "init"));
    const auto& ch = cfg_.encoder_channels;
    int prev = cfg_.in_channels;
    for (int l = 0; l < 5; ++l) {
      encoder_[static_cast<size_t>(l)] =
          make_block("encoder.block" + std::to_string(l), prev, ch[static_cast<size_t>(l)], rng);
      prev = ch[static_cast<size_t>(l)];
    }
    build_decoder("tr", tr_, rng, /*transpose=*/true);
    build_decoder("up", up_, rng, /*transpose=*/false);
  }

  const NetworkConfig& config() const { return cfg_; }
  std::vector<Param<S>>& parameters() { return params_; }
  const std::vector<Param<S>>& parameters() const { return params_; }

  // mode=train draws dropout masks and pyramid-head perturbations from rng;
  // mode=eval is a pure function of (parameters, images). One value is
  // consumed from rng per call in train mode; all internal sites derive
  // their own streams from it, so adding or removing one site never shifts
  // the draws of another.
  BranchPyramids<S> forward(const Tensor4<S>& images, Mode mode, Rng& rng) {
    const Shape4& is = images.shape();
    if (is.h % 16 != 0 || is.w % 16 != 0)
      throw ShapeError("forward: spatial dims must be divisible by 16, got " +
                       is.str());
    if (is.c != cfg_.in_channels)
      throw ShapeError("forward: expected " +
                       std::to_string(cfg_.in_channels) + " channels, got " +
                       is.str());
    const std::uint64_t draw_base =
        mode == Mode::train ? rng.next_u64() : 0;

    Var<S> x = Var<S>::leaf(images, false);
    std::array<Var<S>, 5> skips;
    for (int l = 0; l < 5; ++l) {
      if (l > 0) x = maxpool2x(x);
      x = run_block(encoder_[static_cast<size_t>(l)], x);
      skips[static_cast<size_t>(l)] = x;
    }

    BranchPyramids<S> out;
    out.tr = run_decoder(tr_, "tr", skips, is.h, is.w, mode, draw_base);
    out.up = run_decoder(up_, "up", skips, is.h, is.w, mode, draw_base);
    return out;
  }

  // Deployment path: softmax (T=1) over the UP branch main output.
  Tensor4<S> forward_inference(const Tensor4<S>& images) {
    NoGrad ng;
    Rng unused(0);
    BranchPyramids<S> pyr = forward(images, Mode::eval, unused);
    return softmax_t(pyr.up[3], 1.0).value();
  }

  std::int64_t count_parameters(ParameterScope scope) const {
    std::int64_t total = 0;
    for (const auto& p : params_) {
      if (!in_scope(p.name, scope)) continue;
      total += p.var.value().size();
    }
    return total;
  }

  void clear_grads() {
    for (auto& p : params_) p.var.clear_grad();
  }

  Var<S>* find_parameter(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p.var;
    return nullptr;
  }

 private:
  struct Conv {
    Var<S> w, b;
  };
  struct Norm {
    Var<S> g, b;
  };
  struct Block {
    Conv c1, c2;
    Norm n1, n2;
  };
  struct Stage {
    Conv up;
    Block block;
    bool transpose = false;
  };
  struct Decoder {
    std::array<Stage, 4> stages;
    std::array<Conv, 3> aux;
    Conv main;
  };

  static bool in_scope(const std::string& name, ParameterScope scope) {
    switch (scope) {
      case ParameterScope::full_training:
        return true;
      case ParameterScope::inference_up_branch:
        return name.rfind("encoder.", 0) == 0 || name.rfind("up.", 0) == 0;
      case ParameterScope::backbone_unet_equivalent:
        return name.rfind("encoder.", 0) == 0 ||
               (name.rfind("up.", 0) == 0 && name.rfind("up.aux", 0) != 0);
    }
    return false;
  }

  Var<S> make_param(const std::string& name, Tensor4<S> value) {
    Var<S> v = Var<S>::leaf(std::move(value), true);
    params_.push_back({name, v});
    return v;
  }

  // Uniform fan-in initialization matched to the leaky activation; drawn in
  // registration order from the run-seeded stream.
  Tensor4<S> kaiming_uniform(Shape4 s, int fan_in, double gain_scale,
                             Rng& rng) {
    const double a = 0.01;
    const double bound =
        gain_scale * std::sqrt(6.0 / ((1.0 + a * a) * fan_in));
    Tensor4<S> t(s);
    for (std::int64_t i = 0; i < t.size(); ++i)
      t[i] = static_cast<S>(rng.uniform(-bound, bound));
    return t;
  }

  Conv make_conv(const std::string& name, int cin, int cout, int k, Rng& rng,
                 double gain_scale = 1.0) {
    Conv c;
    c.w = make_param(name + ".w", kaiming_uniform({cout, cin, k, k},
                                                   cin * k * k, gain_scale,
                                                   rng));
    c.b = make_param(name + ".b", Tensor4<S>(1, cout, 1, 1));
    return c;
  }

  Conv make_tconv(const std::string& name, int cin, int cout, Rng& rng) {
    Conv c;
    c.w = make_param(name + ".w",
                     kaiming_uniform({cin, cout, 2, 2}, cout * 4, 1.0, rng));
    c.b = make_param(name + ".b", Tensor4<S>(1, cout, 1, 1));
    return c;
  }

  Norm make_norm(const std::string& name, int c) {
    Norm n;
    Tensor4<S> ones(1, c, 1, 1);
    for (std::int64_t i = 0; i < ones.size(); ++i) ones[i] = S(1);
    n.g = make_param(name + ".g", std::move(ones));
    n.b = make_param(name + ".b", Tensor4<S>(1, c, 1, 1));
    return n;
  }

  Block make_block(const std::string& name, int cin, int cout, Rng& rng) {
    Block b;
    b.c1 = make_conv(name + ".conv1", cin, cout, 3, rng);
    b.n1 = make_norm(name + ".norm1", cout);
    b.c2 = make_conv(name + ".conv2", cout, cout, 3, rng);
    b.n2 = make_norm(name + ".norm2", cout);
    return b;
  }

  void build_decoder(const std::string& prefix, Decoder& d, Rng& rng,
                     bool transpose) {
    const auto& ch = cfg_.encoder_channels;
    for (int s = 0; s < 4; ++s) {
      const int hi = ch[static_cast<size_t>(4 - s)];
      const int lo = ch[static_cast<size_t>(3 - s)];
      const std::string name = prefix + ".stage" + std::to_string(s + 1);
      Stage& st = d.stages[static_cast<size_t>(s)];
      st.transpose = transpose;
      st.up = transpose ? make_tconv(name + ".up", hi, lo, rng)
                        : make_conv(name + ".up", hi, lo, 1, rng);
      st.block = make_block(name + ".block", 2 * lo, lo, rng);
    }
    // Pyramid heads produce logits; a small gain keeps initial predictions
    // near uniform.
    for (int s = 0; s < 3; ++s)
      d.aux[static_cast<size_t>(s)] =
          make_conv(prefix + ".aux" + std::to_string(s + 1) + ".conv",
                    ch[static_cast<size_t>(3 - s)], cfg_.num_classes, 3, rng,
                    0.1);
    d.main = make_conv(prefix + ".main", ch[0], cfg_.num_classes, 1, rng, 0.1);
  }

  Var<S> run_block(const Block& b, const Var<S>& x) const {
    Var<S> h = conv2d(x, b.c1.w, b.c1.b, 1);
    h = instance_norm(h, b.n1.g, b.n1.b);
    h = leaky_relu(h, S(0.01));
    h = conv2d(h, b.c2.w, b.c2.b, 1);
    h = instance_norm(h, b.n2.g, b.n2.b);
    return leaky_relu(h, S(0.01));
  }

  Var<S> perturb(const Var<S>& f, PerturbationKind kind, Rng& rng) const {
    switch (kind) {
      case PerturbationKind::dropout:
        return dropout(f, 0.5, rng);
      case PerturbationKind::feature_dropout:
        return feature_dropout(f, cfg_.feature_dropout_threshold_range[0],
                               cfg_.feature_dropout_threshold_range[1], rng);
      case PerturbationKind::feature_noise:
        return feature_noise(f, cfg_.feature_noise_range, rng);
    }
    throw ArgumentError("unknown perturbation kind");
  }

  std::array<Var<S>, 4> run_decoder(const Decoder& d, const std::string& name,
                                    const std::array<Var<S>, 5>& skips,
                                    int out_h, int out_w, Mode mode,
                                    std::uint64_t draw_base) const {
    const bool train = mode == Mode::train;
    std::array<Var<S>, 4> maps;
    Var<S> f = skips[4];
    for (int s = 0; s < 4; ++s) {
      const Stage& st = d.stages[static_cast<size_t>(s)];
      const Shape4& fs = f.shape();
      Var<S> upsampled;
      if (st.transpose)
        upsampled = conv_transpose2x(f, st.up.w, st.up.b);
      else
        upsampled = upsample_bilinear(conv2d(f, st.up.w, st.up.b, 0),
                                      2 * fs.h, 2 * fs.w);
      f = run_block(st.block, concat_ch(upsampled, skips[static_cast<size_t>(3 - s)]));
      if (train && cfg_.branch_dropout_rate > 0.0) {
        Rng site(hash_combine(draw_base,
                              name + ".stage" + std::to_string(s + 1) + ".drop"));
        f = dropout(f, cfg_.branch_dropout_rate, site);
      }
      if (s < 3) {
        Var<S> g = f;
        if (train) {
          Rng site(hash_combine(draw_base,
                                name + ".aux" + std::to_string(s + 1) + ".perturb"));
          g = perturb(g, cfg_.aux_perturbation_by_scale.at(s + 1), site);
        }
        const Conv& head = d.aux[static_cast<size_t>(s)];
        maps[static_cast<size_t>(s)] =
            upsample_bilinear(conv2d(g, head.w, head.b, 1), out_h, out_w);
      }
    }
    maps[3] = conv2d(f, d.main.w, d.main.b, 0);
    return maps;
  }

  NetworkConfig cfg_;
  std::vector<Param<S>> params_;
  std::array<Block, 5> encoder_;
  Decoder tr_, up_;
};

}  // namespace cpcr

#endif  // CPCR_NETWORK_HPP
