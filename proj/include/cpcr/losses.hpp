#ifndef CPCR_LOSSES_HPP
#define CPCR_LOSSES_HPP

#include <array>
#include <cmath>

#include "cpcr/ops.hpp"

// Training objective: tempered softmax consistency between the two decoder
// branches (main and pyramid scales), entropy minimization on the averaged
// main prediction, dice supervision on labeled samples, and the Gaussian
// ramp-up that schedules the pyramid term.

namespace cpcr {

inline constexpr double kLogClamp = 1e-8;

struct LossWeights {
  double fixed_weight = 0.1;  // applied to con_main + um
  double w_max = 0.1;
  int t_max = 200;
  int ramp_step_iters = 150;  // iterations per ramp-up tick
  bool kl_t2_rescale = false;  // multiply KL terms by T^2 to undo the 1/T^2
                               // gradient shrink from softening; off by default
};

struct LossBreakdown {
  double sup = 0.0;
  double con_main = 0.0;
  double con_aux = 0.0;
  double um = 0.0;
  double lambda_t = 0.0;
  double total = 0.0;
};

// lambda(t) = w_max * exp(-5 * (1 - min(t, t_max)/t_max)^2)
inline double ramp_up_weight(std::int64_t t, const LossWeights& w) {
  if (t < 0) throw ArgumentError("ramp_up_weight: t must be >= 0");
  if (w.t_max <= 0) return w.w_max;
  const double r = 1.0 - static_cast<double>(std::min<std::int64_t>(t, w.t_max)) / w.t_max;
  return w.w_max * std::exp(-5.0 * r * r);
}

inline std::int64_t ramp_tick(std::int64_t iteration, const LossWeights& w) {
  return iteration / std::max(1, w.ramp_step_iters);
}

// Mean over batch and pixels of sum_c teacher * log(teacher/student).
// The teacher is detached here: only the student receives gradient.
template <class S>
Var<S> kl_soft(const Var<S>& student, const Var<S>& teacher) {
  require_same_shape(student.value(), teacher.value(), "kl_soft");
  const Shape4& ps = student.shape();
  const double norm = 1.0 / (static_cast<double>(ps.n) * ps.h * ps.w);
  const S* s = student.value().data();
  const S* t = teacher.value().data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < student.value().size(); ++i) {
    const double ti = t[i];
    acc += ti * (std::log(std::max<double>(ti, kLogClamp)) -
                 std::log(std::max<double>(s[i], kLogClamp)));
  }
  Tensor4<S> y(1, 1, 1, 1);
  y[0] = static_cast<S>(acc * norm);
  // Teacher values are captured by the closure, not linked as a parent.
  Tensor4<S> teacher_copy = teacher.value();
  return make_op<S>(
      std::move(y), {student},
      [t = std::move(teacher_copy), norm](Node<S>& self) {
        Node<S>& sn = *self.parents[0];
        if (!sn.requires_grad) return;
        Tensor4<S>& dx = ensure_grad(sn);
        const S gy = self.grad[0];
        const S* s = sn.value.data();
        for (std::int64_t i = 0; i < sn.value.size(); ++i) {
          if (s[i] > static_cast<S>(kLogClamp))
            dx[i] -= gy * static_cast<S>(norm) * t[i] / s[i];
        }
      });
}

// Entropy of a probability map: -mean over batch and pixels of
// sum_c p * log(p), with the same log clamp as kl_soft.
template <class S>
Var<S> mean_entropy(const Var<S>& probs) {
  const Shape4& ps = probs.shape();
  const double norm = 1.0 / (static_cast<double>(ps.n) * ps.h * ps.w);
  const S* p = probs.value().data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < probs.value().size(); ++i)
    acc -= p[i] * std::log(std::max<double>(p[i], kLogClamp));
  Tensor4<S> y(1, 1, 1, 1);
  y[0] = static_cast<S>(acc * norm);
  return make_op<S>(std::move(y), {probs}, [norm](Node<S>& self) {
    Node<S>& pn = *self.parents[0];
    if (!pn.requires_grad) return;
    Tensor4<S>& dx = ensure_grad(pn);
    const S gy = self.grad[0];
    const S* p = pn.value.data();
    for (std::int64_t i = 0; i < pn.value.size(); ++i) {
      const S lp = std::log(std::max(p[i], static_cast<S>(kLogClamp)));
      const S ind = p[i] > static_cast<S>(kLogClamp) ? S(1) : S(0);
      dx[i] -= gy * static_cast<S>(norm) * (lp + ind);
    }
  });
}

// Soft dice over probabilities: mean over classes (background included) of
// 1 - (2*sum(p_c*g_c) + eps) / (sum(p_c) + sum(g_c) + eps), sums pooled
// over the whole batch. Labels are (B, 1, H, W) integers in [0, C).
template <class S>
Var<S> dice_loss(const Var<S>& probs, const TensorI& label,
                 double eps = 1e-5) {
  const Shape4& ps = probs.shape();
  if (label.shape().n != ps.n || label.shape().c != 1 ||
      label.shape().h != ps.h || label.shape().w != ps.w)
    throw ShapeError("dice_loss: label shape " + label.shape().str() +
                     " does not match probs " + ps.str());
  const int hw = ps.h * ps.w;
  for (std::int64_t i = 0; i < label.size(); ++i)
    if (label[i] < 0 || label[i] >= ps.c)
      throw DataError("dice_loss: label value " + std::to_string(label[i]) +
                      " outside [0, " + std::to_string(ps.c) + ")");
  std::vector<double> inter(static_cast<size_t>(ps.c), 0.0);
  std::vector<double> psum(static_cast<size_t>(ps.c), 0.0);
  std::vector<double> gsum(static_cast<size_t>(ps.c), 0.0);
  for (int n = 0; n < ps.n; ++n) {
    const std::int32_t* g = label.sample(n);
    for (int c = 0; c < ps.c; ++c) {
      const S* p = probs.value().channel(n, c);
      double in = 0.0, sp = 0.0;
      for (int i = 0; i < hw; ++i) {
        sp += p[i];
        if (g[i] == c) in += p[i];
      }
      inter[static_cast<size_t>(c)] += in;
      psum[static_cast<size_t>(c)] += sp;
    }
    for (int i = 0; i < hw; ++i) gsum[static_cast<size_t>(g[i])] += 1.0;
  }
  double loss = 0.0;
  std::vector<double> u(static_cast<size_t>(ps.c));
  std::vector<double> v(static_cast<size_t>(ps.c));
  for (int c = 0; c < ps.c; ++c) {
    u[static_cast<size_t>(c)] = 2.0 * inter[static_cast<size_t>(c)] + eps;
    v[static_cast<size_t>(c)] =
        psum[static_cast<size_t>(c)] + gsum[static_cast<size_t>(c)] + eps;
    loss += 1.0 - u[static_cast<size_t>(c)] / v[static_cast<size_t>(c)];
  }
  loss /= ps.c;
  Tensor4<S> y(1, 1, 1, 1);
  y[0] = static_cast<S>(loss);
  TensorI label_copy = label;
  return make_op<S>(
      std::move(y), {probs},
      [lab = std::move(label_copy), u = std::move(u), v = std::move(v)](
          Node<S>& self) {
        Node<S>& pn = *self.parents[0];
        if (!pn.requires_grad) return;
        const Shape4& ps = pn.value.shape();
        const int hw = ps.h * ps.w;
        Tensor4<S>& dx = ensure_grad(pn);
        const double gy = static_cast<double>(self.grad[0]) / ps.c;
        for (int n = 0; n < ps.n; ++n) {
          const std::int32_t* g = lab.sample(n);
          for (int c = 0; c < ps.c; ++c) {
            const size_t cc = static_cast<size_t>(c);
            // d/dp of (1 - u/v): (u - 2*g*v) / v^2
            const double d_miss = u[cc] / (v[cc] * v[cc]);
            const double d_hit = (u[cc] - 2.0 * v[cc]) / (v[cc] * v[cc]);
            S* d = dx.channel(n, c);
            for (int i = 0; i < hw; ++i)
              d[i] += static_cast<S>(gy * (g[i] == c ? d_hit : d_miss));
          }
        }
      });
}

// Bidirectional tempered-softmax KL between the two main outputs; each
// direction detaches the other branch as teacher.
template <class S>
Var<S> main_consistency_loss(const Var<S>& logits_tr4, const Var<S>& logits_up4,
                             double temperature,
                             bool kl_t2_rescale = false) {
  Var<S> p_tr = softmax_t(logits_tr4, temperature);
  Var<S> p_up = softmax_t(logits_up4, temperature);
  Var<S> loss = add(kl_soft(p_tr, p_up), kl_soft(p_up, p_tr));
  if (kl_t2_rescale)
    loss = scale(loss, static_cast<S>(temperature * temperature));
  return loss;
}

// Mean over pyramid scales 1..3 of the same-scale bidirectional KL.
template <class S>
Var<S> aux_consistency_loss(const std::array<Var<S>, 3>& tr_aux,
                            const std::array<Var<S>, 3>& up_aux,
                            double temperature, bool kl_t2_rescale = false) {
  Var<S> sum;
  for (int s = 0; s < 3; ++s) {
    Var<S> p_tr = softmax_t(tr_aux[static_cast<size_t>(s)], temperature);
    Var<S> p_up = softmax_t(up_aux[static_cast<size_t>(s)], temperature);
    Var<S> pair = add(kl_soft(p_tr, p_up), kl_soft(p_up, p_tr));
    sum = s == 0 ? pair : add(sum, pair);
  }
  Var<S> loss = scale(sum, S(1) / S(3));
  if (kl_t2_rescale)
    loss = scale(loss, static_cast<S>(temperature * temperature));
  return loss;
}

// Entropy of the averaged main-branch probability maps (both at T=1);
// gradient flows into both branches.
template <class S>
Var<S> uncertainty_min_loss(const Var<S>& probs_tr4, const Var<S>& probs_up4) {
  require_same_shape(probs_tr4.value(), probs_up4.value(),
                     "uncertainty_min_loss");
  return mean_entropy(scale(add(probs_tr4, probs_up4), S(0.5)));
}

// Dice on both branches' main outputs; pyramid heads get no direct
// supervision.
template <class S>
Var<S> supervised_loss(const Var<S>& logits_tr4, const Var<S>& logits_up4,
                       const TensorI& label) {
  return add(dice_loss(softmax_t(logits_tr4, 1.0), label),
             dice_loss(softmax_t(logits_up4, 1.0), label));
}

inline LossBreakdown make_breakdown(double sup, double con_main,
                                    double con_aux, double um, std::int64_t t,
                                    const LossWeights& w) {
  LossBreakdown b;
  b.sup = sup;
  b.con_main = con_main;
  b.con_aux = con_aux;
  b.um = um;
  b.lambda_t = ramp_up_weight(t, w);
  b.total = b.sup + w.fixed_weight * (b.con_main + b.um) + b.lambda_t * b.con_aux;
  return b;
}

}  // namespace cpcr

#endif  // CPCR_LOSSES_HPP
