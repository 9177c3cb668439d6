#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mamat {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array. Video features use the N x C x T x H x W layout.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, T fill);
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }
  static Tensor zeros_like(const Tensor& t) { return zeros(t.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 5-D accessor for N x C x T x H x W tensors.
  T& at(std::size_t n, std::size_t c, std::size_t t, std::size_t y, std::size_t x) {
    return data_[offset5(n, c, t, y, x)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t t, std::size_t y, std::size_t x) const {
    return data_[offset5(n, c, t, y, x)];
  }

  // Scalar view of a tensor whose extents are all 1.
  T item() const;

  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset5(std::size_t n, std::size_t c, std::size_t t, std::size_t y,
                      std::size_t x) const {
    return (((n * shape_[1] + c) * shape_[2] + t) * shape_[3] + y) * shape_[4] + x;
  }

  Shape shape_;
  std::vector<T> data_;
};

// Extents of the canonical 5-D layout.
struct Dims5 {
  std::size_t n, c, t, h, w;
  std::size_t volume() const { return t * h * w; }
};

Dims5 dims5(const Shape& shape);

template <class T>
Dims5 dims5(const Tensor<T>& t) {
  return dims5(t.shape());
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tensor<long double>;
extern template class Tensor<std::uint8_t>;

}  // namespace mamat
