#pragma once

#include <array>
#include <cstddef>

#include "mamat/tape.hpp"

// Differentiable elementwise, reduction and layout primitives.
//
// Binary ops require identical shapes, except that either side may be a
// single-element tensor which is broadcast.
namespace mamat::ops {

template <class T> Var<T> add(Var<T> a, Var<T> b);
template <class T> Var<T> sub(Var<T> a, Var<T> b);
template <class T> Var<T> mul(Var<T> a, Var<T> b);
template <class T> Var<T> scale(Var<T> a, T s);
template <class T> Var<T> add_scalar(Var<T> a, T s);

template <class T> Var<T> relu(Var<T> a);
// Throws DomainError on negative input.
template <class T> Var<T> sqrt(Var<T> a);
template <class T> Var<T> square(Var<T> a);
template <class T> Var<T> exp(Var<T> a);
template <class T> Var<T> neg(Var<T> a);
template <class T> Var<T> softplus(Var<T> a);
// tanh approximation
template <class T> Var<T> gelu(Var<T> a);
// Gradient is passed only strictly inside (lo, hi).
template <class T> Var<T> clamp(Var<T> a, T lo, T hi);

template <class T> Var<T> sum(Var<T> a);
template <class T> Var<T> mean(Var<T> a);

template <class T> Var<T> reshape(Var<T> a, Shape shape);
// Concatenation along dimension 1 (channels).
template <class T> Var<T> concat_channels(Var<T> a, Var<T> b);
// N x C x T x H x W -> N x C x H x W at time index t.
template <class T> Var<T> select_time(Var<T> x, std::size_t t);
// Nearest-neighbour upsampling of an N x C x T x H x W tensor.
template <class T> Var<T> upsample_nearest(Var<T> x, std::array<std::size_t, 3> scale);

}  // namespace mamat::ops
