#ifndef CPCR_OPS_HPP
#define CPCR_OPS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "cpcr/autodiff.hpp"
#include "cpcr/conv_kernels.hpp"
#include "cpcr/resize.hpp"
#include "cpcr/rng.hpp"

// Differentiable ops. Saved state needed by a backward pass (pool argmax,
// dropout masks, norm statistics) is captured by value in the closure;
// everything else is recomputed from the parents' stored values.

namespace cpcr {

template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int pad) {
  Tensor4<S> y = conv2d_forward(x.value(), w.value(), b.value(), pad);
  return make_op<S>(std::move(y), {x, w, b}, [pad](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    Node<S>& wn = *self.parents[1];
    Node<S>& bn = *self.parents[2];
    conv2d_backward(xn.value, wn.value, pad, self.grad,
                    xn.requires_grad ? &ensure_grad(xn) : nullptr,
                    wn.requires_grad ? &ensure_grad(wn) : nullptr,
                    bn.requires_grad && bn.value.size() > 0 ? &ensure_grad(bn)
                                                            : nullptr);
  });
}

template <class S>
Var<S> conv_transpose2x(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  Tensor4<S> y = conv_transpose2x_forward(x.value(), w.value(), b.value());
  return make_op<S>(std::move(y), {x, w, b}, [](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    Node<S>& wn = *self.parents[1];
    Node<S>& bn = *self.parents[2];
    conv_transpose2x_backward(xn.value, wn.value, self.grad,
                              xn.requires_grad ? &ensure_grad(xn) : nullptr,
                              wn.requires_grad ? &ensure_grad(wn) : nullptr,
                              bn.requires_grad && bn.value.size() > 0
                                  ? &ensure_grad(bn)
                                  : nullptr);
  });
}

template <class S>
Var<S> maxpool2x(const Var<S>& x) {
  const Shape4& xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0)
    throw ShapeError("maxpool2x: odd spatial size " + xs.str());
  Tensor4<S> y(xs.n, xs.c, xs.h / 2, xs.w / 2);
  std::vector<std::int64_t> argmax(static_cast<size_t>(y.size()));
  const S* src = x.value().data();
  std::int64_t k = 0;
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const std::int64_t base =
          (static_cast<std::int64_t>(n) * xs.c + c) * xs.h * xs.w;
      for (int oy = 0; oy < xs.h / 2; ++oy) {
        for (int ox = 0; ox < xs.w / 2; ++ox) {
          std::int64_t i00 = base + static_cast<std::int64_t>(2 * oy) * xs.w +
                             2 * ox;
          std::int64_t best = i00;
          if (src[i00 + 1] > src[best]) best = i00 + 1;
          if (src[i00 + xs.w] > src[best]) best = i00 + xs.w;
          if (src[i00 + xs.w + 1] > src[best]) best = i00 + xs.w + 1;
          y[k] = src[best];
          argmax[static_cast<size_t>(k)] = best;
          ++k;
        }
      }
    }
  }
  return make_op<S>(std::move(y), {x},
                    [idx = std::move(argmax)](Node<S>& self) {
                      Node<S>& xn = *self.parents[0];
                      if (!xn.requires_grad) return;
                      Tensor4<S>& dx = ensure_grad(xn);
                      const S* g = self.grad.data();
                      for (std::int64_t i = 0; i < self.grad.size(); ++i)
                        dx[idx[static_cast<size_t>(i)]] += g[i];
                    });
}

template <class S>
Var<S> upsample_bilinear(const Var<S>& x, int oh, int ow) {
  Tensor4<S> y = resize_bilinear(x.value(), oh, ow);
  return make_op<S>(std::move(y), {x}, [](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    resize_bilinear_backward(self.grad, &ensure_grad(xn));
  });
}

// Per-sample, per-channel normalization over the spatial extent, with an
// affine (gamma, beta) pair per channel; gamma and beta have shape
// (1, C, 1, 1). No cross-sample statistics are used, so losses on one
// sample are unaffected by the content of any other.
template <class S>
Var<S> instance_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                     S eps = S(1e-5)) {
  const Shape4& xs = x.shape();
  if (gamma.shape().c != xs.c || beta.shape().c != xs.c)
    throw ShapeError("instance_norm: affine channel mismatch");
  const int m = xs.h * xs.w;
  Tensor4<S> y(xs);
  std::vector<S> mean(static_cast<size_t>(xs.n) * xs.c);
  std::vector<S> inv_std(mean.size());
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      Eigen::Map<const ArrayX<S>> v(x.value().channel(n, c), m);
      const S mu = v.mean();
      const S var = (v - mu).square().mean();
      const S is = S(1) / std::sqrt(var + eps);
      mean[static_cast<size_t>(n) * xs.c + c] = mu;
      inv_std[static_cast<size_t>(n) * xs.c + c] = is;
      Eigen::Map<ArrayX<S>> out(y.channel(n, c), m);
      out = (v - mu) * is * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_op<S>(
      std::move(y), {x, gamma, beta},
      [mean = std::move(mean), inv_std = std::move(inv_std)](Node<S>& self) {
        Node<S>& xn = *self.parents[0];
        Node<S>& gn = *self.parents[1];
        Node<S>& bn = *self.parents[2];
        const Shape4& xs = xn.value.shape();
        const int m = xs.h * xs.w;
        for (int n = 0; n < xs.n; ++n) {
          for (int c = 0; c < xs.c; ++c) {
            const size_t nc = static_cast<size_t>(n) * xs.c + c;
            Eigen::Map<const ArrayX<S>> v(xn.value.channel(n, c), m);
            Eigen::Map<const ArrayX<S>> gy(self.grad.channel(n, c), m);
            ArrayX<S> xhat = (v - mean[nc]) * inv_std[nc];
            if (gn.requires_grad)
              ensure_grad(gn)[c] += (gy * xhat).sum();
            if (bn.requires_grad) ensure_grad(bn)[c] += gy.sum();
            if (xn.requires_grad) {
              const S g = gn.value[c];
              const S sum_gy = gy.sum();
              const S sum_gy_xhat = (gy * xhat).sum();
              Eigen::Map<ArrayX<S>> dx(ensure_grad(xn).channel(n, c), m);
              dx += (g * inv_std[nc] / S(m)) *
                    (S(m) * gy - sum_gy - xhat * sum_gy_xhat);
            }
          }
        }
      });
}

template <class S>
Var<S> leaky_relu(const Var<S>& x, S slope) {
  Tensor4<S> y(x.shape());
  const S* v = x.value().data();
  for (std::int64_t i = 0; i < y.size(); ++i)
    y[i] = v[i] >= S(0) ? v[i] : slope * v[i];
  return make_op<S>(std::move(y), {x}, [slope](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    Tensor4<S>& dx = ensure_grad(xn);
    const S* v = xn.value.data();
    const S* g = self.grad.data();
    for (std::int64_t i = 0; i < self.grad.size(); ++i)
      dx[i] += v[i] >= S(0) ? g[i] : slope * g[i];
  });
}

// Inverted dropout: kept entries are scaled by 1/(1-rate).
template <class S>
Var<S> dropout(const Var<S>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ArgumentError("dropout: rate must be < 1");
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  std::vector<S> mask(static_cast<size_t>(x.value().size()));
  for (auto& mk : mask)
    mk = rng.uniform() >= rate ? keep_scale : S(0);
  Tensor4<S> y(x.shape());
  const S* v = x.value().data();
  for (std::int64_t i = 0; i < y.size(); ++i)
    y[i] = v[i] * mask[static_cast<size_t>(i)];
  return make_op<S>(std::move(y), {x}, [mask = std::move(mask)](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    Tensor4<S>& dx = ensure_grad(xn);
    const S* g = self.grad.data();
    for (std::int64_t i = 0; i < self.grad.size(); ++i)
      dx[i] += g[i] * mask[static_cast<size_t>(i)];
  });
}

// Multiplies features by (1 + u), u uniform in [-range, range] per element.
template <class S>
Var<S> feature_noise(const Var<S>& x, double range, Rng& rng) {
  std::vector<S> factor(static_cast<size_t>(x.value().size()));
  for (auto& f : factor)
    f = static_cast<S>(1.0 + rng.uniform(-range, range));
  Tensor4<S> y(x.shape());
  const S* v = x.value().data();
  for (std::int64_t i = 0; i < y.size(); ++i)
    y[i] = v[i] * factor[static_cast<size_t>(i)];
  return make_op<S>(std::move(y), {x},
                    [factor = std::move(factor)](Node<S>& self) {
                      Node<S>& xn = *self.parents[0];
                      if (!xn.requires_grad) return;
                      Tensor4<S>& dx = ensure_grad(xn);
                      const S* g = self.grad.data();
                      for (std::int64_t i = 0; i < self.grad.size(); ++i)
                        dx[i] += g[i] * factor[static_cast<size_t>(i)];
                    });
}

// Zeroes the channels whose spatial-mean attention exceeds a per-sample
// threshold: uniform(threshold_lo, threshold_hi) times the sample's largest
// channel attention. The mask is treated as a constant in the backward pass.
template <class S>
Var<S> feature_dropout(const Var<S>& x, double threshold_lo,
                       double threshold_hi, Rng& rng) {
  const Shape4& xs = x.shape();
  const int m = xs.h * xs.w;
  std::vector<S> mask(static_cast<size_t>(xs.n) * xs.c, S(1));
  for (int n = 0; n < xs.n; ++n) {
    S max_att = std::numeric_limits<S>::lowest();
    std::vector<S> att(static_cast<size_t>(xs.c));
    for (int c = 0; c < xs.c; ++c) {
      Eigen::Map<const ArrayX<S>> v(x.value().channel(n, c), m);
      att[static_cast<size_t>(c)] = v.mean();
      max_att = std::max(max_att, att[static_cast<size_t>(c)]);
    }
    const S thr =
        static_cast<S>(rng.uniform(threshold_lo, threshold_hi)) * max_att;
    for (int c = 0; c < xs.c; ++c)
      if (att[static_cast<size_t>(c)] > thr)
        mask[static_cast<size_t>(n) * xs.c + c] = S(0);
  }
  Tensor4<S> y(xs);
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      Eigen::Map<const ArrayX<S>> v(x.value().channel(n, c), m);
      Eigen::Map<ArrayX<S>> out(y.channel(n, c), m);
      out = v * mask[static_cast<size_t>(n) * xs.c + c];
    }
  }
  return make_op<S>(std::move(y), {x}, [mask = std::move(mask)](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    const Shape4& xs = xn.value.shape();
    const int m = xs.h * xs.w;
    Tensor4<S>& dx = ensure_grad(xn);
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        Eigen::Map<const ArrayX<S>> g(self.grad.channel(n, c), m);
        Eigen::Map<ArrayX<S>> d(dx.channel(n, c), m);
        d += g * mask[static_cast<size_t>(n) * xs.c + c];
      }
    }
  });
}

template <class S>
Var<S> concat_ch(const Var<S>& a, const Var<S>& b) {
  const Shape4& as = a.shape();
  const Shape4& bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
    throw ShapeError("concat_ch: " + as.str() + " vs " + bs.str());
  Tensor4<S> y(as.n, as.c + bs.c, as.h, as.w);
  const std::int64_t pa = static_cast<std::int64_t>(as.c) * as.h * as.w;
  const std::int64_t pb = static_cast<std::int64_t>(bs.c) * bs.h * bs.w;
  for (int n = 0; n < as.n; ++n) {
    std::copy(a.value().sample(n), a.value().sample(n) + pa, y.sample(n));
    std::copy(b.value().sample(n), b.value().sample(n) + pb,
              y.sample(n) + pa);
  }
  return make_op<S>(std::move(y), {a, b}, [](Node<S>& self) {
    Node<S>& an = *self.parents[0];
    Node<S>& bn = *self.parents[1];
    const Shape4& as = an.value.shape();
    const Shape4& bs = bn.value.shape();
    const std::int64_t pa = static_cast<std::int64_t>(as.c) * as.h * as.w;
    const std::int64_t pb = static_cast<std::int64_t>(bs.c) * bs.h * bs.w;
    for (int n = 0; n < as.n; ++n) {
      const S* g = self.grad.sample(n);
      if (an.requires_grad) {
        S* d = ensure_grad(an).sample(n);
        for (std::int64_t i = 0; i < pa; ++i) d[i] += g[i];
      }
      if (bn.requires_grad) {
        S* d = ensure_grad(bn).sample(n);
        for (std::int64_t i = 0; i < pb; ++i) d[i] += g[pa + i];
      }
    }
  });
}

template <class S>
Var<S> narrow_batch(const Var<S>& x, int start, int count) {
  const Shape4& xs = x.shape();
  if (start < 0 || count <= 0 || start + count > xs.n)
    throw ShapeError("narrow_batch: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " +
                     std::to_string(xs.n));
  Tensor4<S> y(count, xs.c, xs.h, xs.w);
  const std::int64_t per = static_cast<std::int64_t>(xs.c) * xs.h * xs.w;
  std::copy(x.value().sample(start), x.value().sample(start) + count * per,
            y.data());
  return make_op<S>(std::move(y), {x}, [start, count](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    const Shape4& xs = xn.value.shape();
    const std::int64_t per = static_cast<std::int64_t>(xs.c) * xs.h * xs.w;
    S* d = ensure_grad(xn).sample(start);
    const S* g = self.grad.data();
    for (std::int64_t i = 0; i < count * per; ++i) d[i] += g[i];
  });
}

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor4<S> y(a.shape());
  y.array() = a.value().array() + b.value().array();
  return make_op<S>(std::move(y), {a, b}, [](Node<S>& self) {
    for (int k = 0; k < 2; ++k) {
      Node<S>& p = *self.parents[static_cast<size_t>(k)];
      if (p.requires_grad) ensure_grad(p).array() += self.grad.array();
    }
  });
}

template <class S>
Var<S> scale(const Var<S>& a, S k) {
  Tensor4<S> y(a.shape());
  y.array() = a.value().array() * k;
  return make_op<S>(std::move(y), {a}, [k](Node<S>& self) {
    Node<S>& p = *self.parents[0];
    if (p.requires_grad) ensure_grad(p).array() += self.grad.array() * k;
  });
}

// Softmax over the channel dimension with logits divided by T first.
template <class S>
Var<S> softmax_t(const Var<S>& x, double temperature) {
  if (!(temperature > 0.0))
    throw ArgumentError("softmax_t: temperature must be > 0");
  const Shape4& xs = x.shape();
  const S inv_t = static_cast<S>(1.0 / temperature);
  Tensor4<S> y(xs);
  const int hw = xs.h * xs.w;
  std::vector<S> z(static_cast<size_t>(xs.c));
  for (int n = 0; n < xs.n; ++n) {
    const S* v = x.value().sample(n);
    S* out = y.sample(n);
    for (int i = 0; i < hw; ++i) {
      S zmax = std::numeric_limits<S>::lowest();
      for (int c = 0; c < xs.c; ++c) {
        z[static_cast<size_t>(c)] = v[static_cast<std::int64_t>(c) * hw + i] * inv_t;
        zmax = std::max(zmax, z[static_cast<size_t>(c)]);
      }
      S sum = S(0);
      for (int c = 0; c < xs.c; ++c) {
        z[static_cast<size_t>(c)] = std::exp(z[static_cast<size_t>(c)] - zmax);
        sum += z[static_cast<size_t>(c)];
      }
      for (int c = 0; c < xs.c; ++c)
        out[static_cast<std::int64_t>(c) * hw + i] =
            z[static_cast<size_t>(c)] / sum;
    }
  }
  return make_op<S>(std::move(y), {x}, [inv_t](Node<S>& self) {
    Node<S>& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    const Shape4& xs = xn.value.shape();
    const int hw = xs.h * xs.w;
    Tensor4<S>& dx = ensure_grad(xn);
    for (int n = 0; n < xs.n; ++n) {
      const S* p = self.value.sample(n);
      const S* g = self.grad.sample(n);
      S* d = dx.sample(n);
      for (int i = 0; i < hw; ++i) {
        S dot = S(0);
        for (int c = 0; c < xs.c; ++c) {
          const std::int64_t j = static_cast<std::int64_t>(c) * hw + i;
          dot += g[j] * p[j];
        }
        for (int c = 0; c < xs.c; ++c) {
          const std::int64_t j = static_cast<std::int64_t>(c) * hw + i;
          d[j] += inv_t * p[j] * (g[j] - dot);
        }
      }
    }
  });
}

}  // namespace cpcr

#endif  // CPCR_OPS_HPP
