#ifndef CPCR_TESTS_FD_CHECK_HPP
#define CPCR_TESTS_FD_CHECK_HPP

#include <cmath>
#include <functional>

#include "cpcr/rng.hpp"
#include "cpcr/tensor.hpp"

namespace cpcr_tests {

// Central finite differences of a scalar function over every entry of x.
// f() must read the current contents of x.
inline cpcr::TensorD numeric_grad(const std::function<double()>& f,
                                  cpcr::TensorD& x, double eps = 1e-5) {
  cpcr::TensorD g(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double hi = f();
    x[i] = saved - eps;
    const double lo = f();
    x[i] = saved;
    g[i] = (hi - lo) / (2.0 * eps);
  }
  return g;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_rel_err(const cpcr::TensorD& a, const cpcr::TensorD& b,
                          double floor = 1e-4) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline cpcr::TensorD random_tensor(cpcr::Shape4 s, cpcr::Rng& rng,
                                   double lo = -1.0, double hi = 1.0) {
  cpcr::TensorD t(s);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace cpcr_tests

#endif  // CPCR_TESTS_FD_CHECK_HPP
