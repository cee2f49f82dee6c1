#ifndef CPCR_TENSOR_HPP
#define CPCR_TENSOR_HPP

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <initializer_list>
#include <string>

#include "cpcr/common.hpp"

namespace cpcr {

template <class S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

struct Shape4 {
  int n = 0, c = 0, h = 0, w = 0;

  std::int64_t count() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

// Dense NCHW tensor backed by a flat Eigen array, w fastest.
template <class S>
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 s) : shape_(s), data_(ArrayX<S>::Zero(s.count())) {}
  Tensor4(int n, int c, int h, int w) : Tensor4(Shape4{n, c, h, w}) {}
  Tensor4(Shape4 s, ArrayX<S> values) : shape_(s), data_(std::move(values)) {
    if (data_.size() != shape_.count())
      throw ShapeError("Tensor4: value count does not match shape " + s.str());
  }

  static Tensor4 scalar(S v) {
    Tensor4 t(1, 1, 1, 1);
    t.data_[0] = v;
    return t;
  }

  static Tensor4 from_list(Shape4 s, std::initializer_list<S> vals) {
    Tensor4 t(s);
    if (static_cast<std::int64_t>(vals.size()) != s.count())
      throw ShapeError("Tensor4::from_list: size mismatch");
    std::int64_t i = 0;
    for (S v : vals) t.data_[i++] = v;
    return t;
  }

  // One-pixel map with the given per-channel values: shape (1, |vals|, 1, 1).
  static Tensor4 from_list(std::initializer_list<S> vals) {
    return from_list(Shape4{1, static_cast<int>(vals.size()), 1, 1}, vals);
  }

  // Value of a single-element tensor (loss scalars).
  S scalar() const {
    if (size() != 1)
      throw ShapeError("Tensor4::scalar: tensor has shape " + shape_.str());
    return data_[0];
  }

  const Shape4& shape() const { return shape_; }
  std::int64_t size() const { return shape_.count(); }
  bool empty() const { return size() == 0; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  ArrayX<S>& array() { return data_; }
  const ArrayX<S>& array() const { return data_; }

  S& operator()(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  S operator()(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

  S& operator[](std::int64_t i) { return data_[i]; }
  S operator[](std::int64_t i) const { return data_[i]; }

  std::int64_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::int64_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w + w;
  }

  // Pointer to the start of sample n (or of channel c within sample n).
  S* sample(int n) { return data_.data() + index(n, 0, 0, 0); }
  const S* sample(int n) const { return data_.data() + index(n, 0, 0, 0); }
  S* channel(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const S* channel(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void set_zero() { data_.setZero(); }

  // Whole tensor viewed as a (rows x cols) row-major matrix.
  Eigen::Map<MatrixRM<S>> mat(int rows, int cols) {
    check_view(rows, cols);
    return Eigen::Map<MatrixRM<S>>(data_.data(), rows, cols);
  }
  Eigen::Map<const MatrixRM<S>> mat(int rows, int cols) const {
    check_view(rows, cols);
    return Eigen::Map<const MatrixRM<S>>(data_.data(), rows, cols);
  }

  template <class T>
  Tensor4<T> cast() const {
    Tensor4<T> out(shape_);
    out.array() = data_.template cast<T>();
    return out;
  }

  bool same_shape(const Tensor4& o) const { return shape_ == o.shape_; }

 private:
  void check_view(int rows, int cols) const {
    if (static_cast<std::int64_t>(rows) * cols != size())
      throw ShapeError("Tensor4::mat: view size mismatch");
  }

  Shape4 shape_;
  ArrayX<S> data_;
};

using TensorF = Tensor4<float>;
using TensorD = Tensor4<double>;
using TensorI = Tensor4<std::int32_t>;

template <class S>
void require_same_shape(const Tensor4<S>& a, const Tensor4<S>& b,
                        const char* where) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(where) + ": shape mismatch " +
                     a.shape().str() + " vs " + b.shape().str());
}

}  // namespace cpcr

#endif  // CPCR_TENSOR_HPP
