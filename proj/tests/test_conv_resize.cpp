#include <doctest.h>

#include "cpcr/conv_kernels.hpp"
#include "cpcr/resize.hpp"
#include "cpcr/rng.hpp"
#include "fd_check.hpp"

using namespace cpcr;
using cpcr_tests::random_tensor;

namespace {

// Direct convolution loops, independent of the im2col path.
TensorD naive_conv2d(const TensorD& x, const TensorD& w, const TensorD& b,
                     int pad) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  Shape4 os = conv_out_shape(xs, ws, pad);
  TensorD y(os);
  for (int n = 0; n < os.n; ++n)
    for (int co = 0; co < os.c; ++co)
      for (int oy = 0; oy < os.h; ++oy)
        for (int ox = 0; ox < os.w; ++ox) {
          double acc = b.size() > 0 ? b[co] : 0.0;
          for (int ci = 0; ci < xs.c; ++ci)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int iy = oy + ky - pad;
                const int ix = ox + kx - pad;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += x(n, ci, iy, ix) * w(co, ci, ky, kx);
              }
          y(n, co, oy, ox) = acc;
        }
  return y;
}

// Direct transpose-convolution scatter, kernel 2 stride 2.
TensorD naive_tconv2x(const TensorD& x, const TensorD& w, const TensorD& b) {
  const Shape4& xs = x.shape();
  const int co = w.shape().c;
  TensorD y(xs.n, co, 2 * xs.h, 2 * xs.w);
  y.set_zero();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < co; ++c)
      for (int iy = 0; iy < xs.h; ++iy)
        for (int ix = 0; ix < xs.w; ++ix)
          for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx) {
              double acc = 0.0;
              for (int ci = 0; ci < xs.c; ++ci)
                acc += x(n, ci, iy, ix) * w(ci, c, ky, kx);
              y(n, c, 2 * iy + ky, 2 * ix + kx) = acc + (b.size() ? b[c] : 0.0);
            }
  return y;
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_SUITE("conv_kernels") {
  TEST_CASE("conv2d matches direct loops") {
    Rng rng(101);
    for (auto [kh, pad] : {std::pair{3, 1}, std::pair{1, 0}, std::pair{5, 2}}) {
      TensorD x = random_tensor({2, 3, 8, 7}, rng);
      TensorD w = random_tensor({4, 3, kh, kh}, rng);
      TensorD b = random_tensor({1, 4, 1, 1}, rng);
      TensorD got = conv2d_forward(x, w, b, pad);
      TensorD want = naive_conv2d(x, w, b, pad);
      CHECK(max_abs_diff(got, want) < 1e-12);
    }
  }

  TEST_CASE("conv2d rejects channel mismatch") {
    TensorD x(1, 3, 4, 4), w(2, 4, 3, 3), b;
    CHECK_THROWS_AS(conv2d_forward(x, w, b, 1), ShapeError);
  }

  TEST_CASE("conv2d without bias") {
    Rng rng(5);
    TensorD x = random_tensor({1, 2, 5, 5}, rng);
    TensorD w = random_tensor({3, 2, 3, 3}, rng);
    TensorD none;
    CHECK(max_abs_diff(conv2d_forward(x, w, none, 1),
                       naive_conv2d(x, w, none, 1)) < 1e-12);
  }

  TEST_CASE("transpose conv matches direct scatter") {
    Rng rng(77);
    TensorD x = random_tensor({2, 4, 3, 5}, rng);
    TensorD w = random_tensor({4, 3, 2, 2}, rng);  // (ci, co, 2, 2)
    TensorD b = random_tensor({1, 3, 1, 1}, rng);
    CHECK(max_abs_diff(conv_transpose2x_forward(x, w, b),
                       naive_tconv2x(x, w, b)) < 1e-12);
  }

  TEST_CASE("im2col/col2im are adjoint") {
    // <col2im(C), X> == <C, im2col(X)> for random C, X.
    Rng rng(13);
    const int ci = 2, h = 5, w = 6, k = 3, pad = 1;
    const int oh = h, ow = w;
    TensorD x = random_tensor({1, ci, h, w}, rng);
    std::vector<double> c(static_cast<size_t>(ci * k * k * oh * ow));
    for (auto& v : c) v = rng.uniform(-1, 1);
    std::vector<double> colx(c.size());
    im2col(x.data(), ci, h, w, k, k, pad, colx.data());
    TensorD back(1, ci, h, w);
    back.set_zero();
    col2im_add(c.data(), ci, h, w, k, k, pad, back.data());
    double lhs = 0.0, rhs = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) lhs += back[i] * x[i];
    for (size_t i = 0; i < c.size(); ++i) rhs += c[i] * colx[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_SUITE("resize") {
  TEST_CASE("bilinear identity at same size") {
    Rng rng(3);
    TensorD x = random_tensor({1, 2, 6, 5}, rng);
    TensorD y = resize_bilinear(x, 6, 5);
    CHECK(max_abs_diff(x, y) < 1e-15);
  }

  TEST_CASE("bilinear 2x of constant image is constant") {
    TensorD x(1, 1, 4, 4);
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = 3.25;
    TensorD y = resize_bilinear(x, 8, 8);
    for (std::int64_t i = 0; i < y.size(); ++i)
      CHECK(y[i] == doctest::Approx(3.25));
  }

  TEST_CASE("bilinear 2x interior values interpolate midpoints") {
    // Half-pixel convention: output (1,1) of a 2x upsample of [[0,1],[2,3]]
    // sits a quarter of the way between sources.
    TensorD x(1, 1, 2, 2);
    x[0] = 0.0; x[1] = 1.0; x[2] = 2.0; x[3] = 3.0;
    TensorD y = resize_bilinear(x, 4, 4);
    CHECK(y(0, 0, 0, 0) == doctest::Approx(0.0));       // clamped corner
    CHECK(y(0, 0, 1, 1) == doctest::Approx(0.75));      // (0.25, 0.25)
    CHECK(y(0, 0, 2, 2) == doctest::Approx(2.25));      // (0.75, 0.75)
    CHECK(y(0, 0, 3, 3) == doctest::Approx(3.0));       // clamped corner
  }

  TEST_CASE("bilinear downsample averages") {
    TensorD x(1, 1, 2, 2);
    x[0] = 0.0; x[1] = 1.0; x[2] = 2.0; x[3] = 3.0;
    TensorD y = resize_bilinear(x, 1, 1);
    CHECK(y[0] == doctest::Approx(1.5));
  }

  TEST_CASE("backward is the adjoint of forward") {
    Rng rng(21);
    TensorD x = random_tensor({1, 1, 5, 7}, rng);
    TensorD gy = random_tensor({1, 1, 11, 4}, rng);
    TensorD y = resize_bilinear(x, 11, 4);
    TensorD gx(x.shape());
    gx.set_zero();
    resize_bilinear_backward(gy, &gx);
    double lhs = 0.0, rhs = 0.0;
    for (std::int64_t i = 0; i < y.size(); ++i) lhs += y[i] * gy[i];
    for (std::int64_t i = 0; i < x.size(); ++i) rhs += x[i] * gx[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }

  TEST_CASE("nearest picks the covering source pixel") {
    TensorD x(1, 1, 2, 2);
    x[0] = 10.0; x[1] = 20.0; x[2] = 30.0; x[3] = 40.0;
    TensorD y(1, 1, 4, 4);
    resize_nearest_plane(x.data(), 2, 2, y.data(), 4, 4);
    CHECK(y(0, 0, 0, 0) == 10.0);
    CHECK(y(0, 0, 0, 3) == 20.0);
    CHECK(y(0, 0, 3, 0) == 30.0);
    CHECK(y(0, 0, 3, 3) == 40.0);
  }
}
