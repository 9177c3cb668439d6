#include "mamat/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mamat {

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  std::size_t n = 1;
  for (auto e : shape) {
    if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Dims5 dims5(const Shape& shape) {
  if (shape.size() != 5) throw ShapeError("expected N x C x T x H x W tensor, got " + shape_str(shape));
  return {shape[0], shape[1], shape[2], shape[3], shape[4]};
}

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("buffer of length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

template <class T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template <class T>
bool Tensor<T>::all_finite() const {
  if constexpr (std::is_floating_point_v<T>) {
    for (auto v : data_)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<long double>;
template class Tensor<std::uint8_t>;

}  // namespace mamat
