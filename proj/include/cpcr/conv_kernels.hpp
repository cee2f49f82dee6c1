#ifndef CPCR_CONV_KERNELS_HPP
#define CPCR_CONV_KERNELS_HPP

#include <Eigen/Dense>
#include <vector>

#include "cpcr/tensor.hpp"

// Stride-1 convolution kernels in im2col + GEMM form, plus the 2x2/stride-2
// transpose convolution used for decoder upsampling. All loops are
// sequential so results are bitwise reproducible.

namespace cpcr {

inline Shape4 conv_out_shape(const Shape4& x, const Shape4& w, int pad) {
  return Shape4{x.n, w.n, x.h + 2 * pad - w.h + 1, x.w + 2 * pad - w.w + 1};
}

// col is (ci*kh*kw) x (oh*ow), row-major.
template <class S>
void im2col(const S* x, int ci, int h, int w, int kh, int kw, int pad,
            S* col) {
  const int oh = h + 2 * pad - kh + 1;
  const int ow = w + 2 * pad - kw + 1;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        S* dst = col + (static_cast<std::int64_t>(c) * kh * kw + ky * kw + kx) *
                           oh * ow;
        const S* src = x + static_cast<std::int64_t>(c) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy + ky - pad;
          S* drow = dst + static_cast<std::int64_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + ow, S(0));
            continue;
          }
          const S* srow = src + static_cast<std::int64_t>(iy) * w;
          const int shift = kx - pad;  // ix = ox + shift
          int ox0 = std::max(0, -shift);
          int ox1 = std::min(ow, w - shift);
          if (ox0 > 0) std::fill(drow, drow + ox0, S(0));
          if (ox1 > ox0)
            std::copy(srow + ox0 + shift, srow + ox1 + shift, drow + ox0);
          if (ox1 < ow) std::fill(drow + std::max(ox0, ox1), drow + ow, S(0));
        }
      }
    }
  }
}

// Scatter-add of a col matrix back onto an image gradient.
template <class S>
void col2im_add(const S* col, int ci, int h, int w, int kh, int kw, int pad,
                S* x) {
  const int oh = h + 2 * pad - kh + 1;
  const int ow = w + 2 * pad - kw + 1;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const S* src = col + (static_cast<std::int64_t>(c) * kh * kw + ky * kw + kx) *
                                 oh * ow;
        S* dst = x + static_cast<std::int64_t>(c) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const S* srow = src + static_cast<std::int64_t>(oy) * ow;
          S* drow = dst + static_cast<std::int64_t>(iy) * w;
          const int shift = kx - pad;
          const int ox0 = std::max(0, -shift);
          const int ox1 = std::min(ow, w - shift);
          for (int ox = ox0; ox < ox1; ++ox) drow[ox + shift] += srow[ox];
        }
      }
    }
  }
}

// y = w * x + b. w is (co, ci, kh, kw); b has co entries (may be empty).
template <class S>
Tensor4<S> conv2d_forward(const Tensor4<S>& x, const Tensor4<S>& w,
                          const Tensor4<S>& b, int pad) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  if (ws.c != xs.c)
    throw ShapeError("conv2d: input channels " + std::to_string(xs.c) +
                     " do not match weight " + std::to_string(ws.c));
  Shape4 os = conv_out_shape(xs, ws, pad);
  if (os.h <= 0 || os.w <= 0) throw ShapeError("conv2d: output would be empty");
  Tensor4<S> y(os);
  const int k = ws.c * ws.h * ws.w;
  const int ohw = os.h * os.w;
  Eigen::Map<const MatrixRM<S>> wm(w.data(), ws.n, k);
  const bool is_1x1 = (ws.h == 1 && ws.w == 1 && pad == 0);
  std::vector<S> col;
  if (!is_1x1) col.resize(static_cast<size_t>(k) * ohw);
  for (int n = 0; n < xs.n; ++n) {
    Eigen::Map<MatrixRM<S>> ym(y.sample(n), os.c, ohw);
    if (is_1x1) {
      Eigen::Map<const MatrixRM<S>> xm(x.sample(n), xs.c, ohw);
      ym.noalias() = wm * xm;
    } else {
      im2col(x.sample(n), xs.c, xs.h, xs.w, ws.h, ws.w, pad, col.data());
      Eigen::Map<const MatrixRM<S>> cm(col.data(), k, ohw);
      ym.noalias() = wm * cm;
    }
    if (b.size() > 0)
      for (int co = 0; co < os.c; ++co) ym.row(co).array() += b[co];
  }
  return y;
}

// Accumulates into dx/dw/db (any of them may be null to skip).
template <class S>
void conv2d_backward(const Tensor4<S>& x, const Tensor4<S>& w, int pad,
                     const Tensor4<S>& dy, Tensor4<S>* dx, Tensor4<S>* dw,
                     Tensor4<S>* db) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  const Shape4& os = dy.shape();
  const int k = ws.c * ws.h * ws.w;
  const int ohw = os.h * os.w;
  const bool is_1x1 = (ws.h == 1 && ws.w == 1 && pad == 0);
  Eigen::Map<const MatrixRM<S>> wm(w.data(), ws.n, k);
  std::vector<S> col;
  std::vector<S> dcol;
  if (!is_1x1) {
    if (dw) col.resize(static_cast<size_t>(k) * ohw);
    if (dx) dcol.resize(static_cast<size_t>(k) * ohw);
  }
  for (int n = 0; n < xs.n; ++n) {
    Eigen::Map<const MatrixRM<S>> dym(dy.sample(n), os.c, ohw);
    if (db) {
      Eigen::Map<MatrixRM<S>> dbm(db->data(), ws.n, 1);
      dbm.noalias() += dym.rowwise().sum();
    }
    if (dw) {
      Eigen::Map<MatrixRM<S>> dwm(dw->data(), ws.n, k);
      if (is_1x1) {
        Eigen::Map<const MatrixRM<S>> xm(x.sample(n), xs.c, ohw);
        dwm.noalias() += dym * xm.transpose();
      } else {
        im2col(x.sample(n), xs.c, xs.h, xs.w, ws.h, ws.w, pad, col.data());
        Eigen::Map<const MatrixRM<S>> cm(col.data(), k, ohw);
        dwm.noalias() += dym * cm.transpose();
      }
    }
    if (dx) {
      if (is_1x1) {
        Eigen::Map<MatrixRM<S>> dxm(dx->sample(n), xs.c, ohw);
        dxm.noalias() += wm.transpose() * dym;
      } else {
        Eigen::Map<MatrixRM<S>> dcm(dcol.data(), k, ohw);
        dcm.noalias() = wm.transpose() * dym;
        col2im_add(dcol.data(), xs.c, xs.h, xs.w, ws.h, ws.w, pad,
                   dx->sample(n));
      }
    }
  }
}

// Transpose convolution, kernel 2, stride 2 (blocks do not overlap).
// w is (ci, co, 2, 2); output is (n, co, 2h, 2w).
template <class S>
Tensor4<S> conv_transpose2x_forward(const Tensor4<S>& x, const Tensor4<S>& w,
                                    const Tensor4<S>& b) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  if (ws.n != xs.c)
    throw ShapeError("conv_transpose2x: input channels mismatch");
  const int co = ws.c;
  Tensor4<S> y(xs.n, co, 2 * xs.h, 2 * xs.w);
  const int hw = xs.h * xs.w;
  // Rearranged weight: (co*4) x ci, row = c*4 + (dy*2+dx).
  MatrixRM<S> w2(co * 4, xs.c);
  for (int ci = 0; ci < xs.c; ++ci)
    for (int c = 0; c < co; ++c)
      for (int t = 0; t < 4; ++t)
        w2(c * 4 + t, ci) = w(ci, c, t / 2, t % 2);
  MatrixRM<S> v(co * 4, hw);
  for (int n = 0; n < xs.n; ++n) {
    Eigen::Map<const MatrixRM<S>> xm(x.sample(n), xs.c, hw);
    v.noalias() = w2 * xm;
    for (int c = 0; c < co; ++c) {
      for (int iy = 0; iy < xs.h; ++iy) {
        const S* r0 = v.data() + (static_cast<std::int64_t>(c * 4 + 0) * hw) + iy * xs.w;
        const S* r1 = v.data() + (static_cast<std::int64_t>(c * 4 + 1) * hw) + iy * xs.w;
        const S* r2 = v.data() + (static_cast<std::int64_t>(c * 4 + 2) * hw) + iy * xs.w;
        const S* r3 = v.data() + (static_cast<std::int64_t>(c * 4 + 3) * hw) + iy * xs.w;
        S* o0 = y.channel(n, c) + static_cast<std::int64_t>(2 * iy) * 2 * xs.w;
        S* o1 = o0 + 2 * xs.w;
        const S bias = b.size() > 0 ? b[c] : S(0);
        for (int ix = 0; ix < xs.w; ++ix) {
          o0[2 * ix] = r0[ix] + bias;
          o0[2 * ix + 1] = r1[ix] + bias;
          o1[2 * ix] = r2[ix] + bias;
          o1[2 * ix + 1] = r3[ix] + bias;
        }
      }
    }
  }
  return y;
}

template <class S>
void conv_transpose2x_backward(const Tensor4<S>& x, const Tensor4<S>& w,
                               const Tensor4<S>& dy, Tensor4<S>* dx,
                               Tensor4<S>* dw, Tensor4<S>* db) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  const int co = ws.c;
  const int hw = xs.h * xs.w;
  MatrixRM<S> w2(co * 4, xs.c);
  for (int ci = 0; ci < xs.c; ++ci)
    for (int c = 0; c < co; ++c)
      for (int t = 0; t < 4; ++t)
        w2(c * 4 + t, ci) = w(ci, c, t / 2, t % 2);
  MatrixRM<S> g(co * 4, hw);
  MatrixRM<S> dw2 = MatrixRM<S>::Zero(co * 4, xs.c);
  for (int n = 0; n < xs.n; ++n) {
    // Gather dy into the (co*4) x hw layout.
    for (int c = 0; c < co; ++c) {
      for (int iy = 0; iy < xs.h; ++iy) {
        const S* i0 = dy.channel(n, c) + static_cast<std::int64_t>(2 * iy) * 2 * xs.w;
        const S* i1 = i0 + 2 * xs.w;
        S* r0 = g.data() + (static_cast<std::int64_t>(c * 4 + 0) * hw) + iy * xs.w;
        S* r1 = g.data() + (static_cast<std::int64_t>(c * 4 + 1) * hw) + iy * xs.w;
        S* r2 = g.data() + (static_cast<std::int64_t>(c * 4 + 2) * hw) + iy * xs.w;
        S* r3 = g.data() + (static_cast<std::int64_t>(c * 4 + 3) * hw) + iy * xs.w;
        for (int ix = 0; ix < xs.w; ++ix) {
          r0[ix] = i0[2 * ix];
          r1[ix] = i0[2 * ix + 1];
          r2[ix] = i1[2 * ix];
          r3[ix] = i1[2 * ix + 1];
        }
      }
    }
    if (dx) {
      Eigen::Map<MatrixRM<S>> dxm(dx->sample(n), xs.c, hw);
      dxm.noalias() += w2.transpose() * g;
    }
    if (dw) {
      Eigen::Map<const MatrixRM<S>> xm(x.sample(n), xs.c, hw);
      dw2.noalias() += g * xm.transpose();
    }
    if (db) {
      for (int c = 0; c < co; ++c)
        (*db)[c] += g.block(c * 4, 0, 4, hw).sum();
    }
  }
  if (dw) {
    for (int ci = 0; ci < xs.c; ++ci)
      for (int c = 0; c < co; ++c)
        for (int t = 0; t < 4; ++t)
          (*dw)(ci, c, t / 2, t % 2) += dw2(c * 4 + t, ci);
  }
}

}  // namespace cpcr

#endif  // CPCR_CONV_KERNELS_HPP
