#ifndef CPCR_RESIZE_HPP
#define CPCR_RESIZE_HPP

#include <cmath>
#include <vector>

#include "cpcr/tensor.hpp"

// Bilinear and nearest resampling with the half-pixel convention
// (source = (dst + 0.5) * in/out - 0.5, borders clamped). The same kernels
// back both the in-network upsampling ops and the data preprocessing path.

namespace cpcr {

struct ResizeTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;  // weight of hi
};

inline std::vector<ResizeTap> bilinear_taps(int in, int out) {
  std::vector<ResizeTap> taps(static_cast<size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    const int lo = std::min(static_cast<int>(src), in - 1);
    taps[static_cast<size_t>(i)] = {lo, std::min(lo + 1, in - 1),
                                    std::min(src - lo, 1.0)};
  }
  return taps;
}

// Plane-level kernel shared by tensors and raw slices.
template <class S>
void resize_bilinear_plane(const S* src, int iw, S* dst, int oh,
                           int ow, const std::vector<ResizeTap>& ty,
                           const std::vector<ResizeTap>& tx) {
  for (int y = 0; y < oh; ++y) {
    const S* r0 = src + static_cast<std::int64_t>(ty[y].lo) * iw;
    const S* r1 = src + static_cast<std::int64_t>(ty[y].hi) * iw;
    const S fy = static_cast<S>(ty[y].frac);
    S* out = dst + static_cast<std::int64_t>(y) * ow;
    for (int x = 0; x < ow; ++x) {
      const S fx = static_cast<S>(tx[x].frac);
      const S top = r0[tx[x].lo] + fx * (r0[tx[x].hi] - r0[tx[x].lo]);
      const S bot = r1[tx[x].lo] + fx * (r1[tx[x].hi] - r1[tx[x].lo]);
      out[x] = top + fy * (bot - top);
    }
  }
}

template <class S>
Tensor4<S> resize_bilinear(const Tensor4<S>& x, int oh, int ow) {
  const Shape4& xs = x.shape();
  if (oh <= 0 || ow <= 0) throw ShapeError("resize: empty output");
  Tensor4<S> y(xs.n, xs.c, oh, ow);
  const auto ty = bilinear_taps(xs.h, oh);
  const auto tx = bilinear_taps(xs.w, ow);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      resize_bilinear_plane(x.channel(n, c), xs.w, y.channel(n, c), oh, ow,
                            ty, tx);
  return y;
}

// Adjoint of resize_bilinear: scatters dy back through the same taps.
template <class S>
void resize_bilinear_backward(const Tensor4<S>& dy, Tensor4<S>* dx) {
  const Shape4& os = dy.shape();
  const Shape4& xs = dx->shape();
  const auto ty = bilinear_taps(xs.h, os.h);
  const auto tx = bilinear_taps(xs.w, os.w);
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      const S* g = dy.channel(n, c);
      S* d = dx->channel(n, c);
      for (int y = 0; y < os.h; ++y) {
        const S fy = static_cast<S>(ty[y].frac);
        S* d0 = d + static_cast<std::int64_t>(ty[y].lo) * xs.w;
        S* d1 = d + static_cast<std::int64_t>(ty[y].hi) * xs.w;
        const S* grow = g + static_cast<std::int64_t>(y) * os.w;
        for (int x = 0; x < os.w; ++x) {
          const S fx = static_cast<S>(tx[x].frac);
          const S gv = grow[x];
          d0[tx[x].lo] += (S(1) - fy) * (S(1) - fx) * gv;
          d0[tx[x].hi] += (S(1) - fy) * fx * gv;
          d1[tx[x].lo] += fy * (S(1) - fx) * gv;
          d1[tx[x].hi] += fy * fx * gv;
        }
      }
    }
  }
}

template <class S>
void resize_nearest_plane(const S* src, int ih, int iw, S* dst, int oh,
                          int ow) {
  const double sy = static_cast<double>(ih) / oh;
  const double sx = static_cast<double>(iw) / ow;
  for (int y = 0; y < oh; ++y) {
    int iy = static_cast<int>((y + 0.5) * sy);
    iy = std::min(std::max(iy, 0), ih - 1);
    const S* srow = src + static_cast<std::int64_t>(iy) * iw;
    S* drow = dst + static_cast<std::int64_t>(y) * ow;
    for (int x = 0; x < ow; ++x) {
      int ix = static_cast<int>((x + 0.5) * sx);
      ix = std::min(std::max(ix, 0), iw - 1);
      drow[x] = srow[ix];
    }
  }
}

}  // namespace cpcr

#endif  // CPCR_RESIZE_HPP
