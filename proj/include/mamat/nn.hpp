#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include "mamat/tape.hpp"

namespace mamat::nn {

using Triple = std::array<std::size_t, 3>;

enum class Mode { train, infer };

// weight: Cout x Cin x kT x kH x kW. Padding defaults to "same" (k / 2) per axis.
template <class T>
struct Conv3dParams {
  Var<T> weight;
  std::optional<Var<T>> bias;
  Triple stride{1, 1, 1};
  std::optional<Triple> padding;
};

// Deformable convolution over the kT x kH x kW grid of `main`. `offset`
// produces 3 * |grid| channels, one (dt, dy, dx) triple per tap with taps in
// lexicographic (t, y, x) order: channel 3 * tap + axis.
template <class T>
struct DeformConv3dParams {
  Conv3dParams<T> main;
  Conv3dParams<T> offset;
};

template <class T>
struct NormParams {
  Var<T> gamma;
  Var<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
  // Identifies the running statistics in NormUpdates.
  std::string key;
};

// key -> (running mean, running variance) produced by train-mode passes.
template <class T>
using NormUpdates = std::map<std::string, std::pair<Tensor<T>, Tensor<T>>>;

template <class T>
struct ConvBlockParams {
  Conv3dParams<T> conv;
  NormParams<T> norm;
};

template <class T>
struct NormResult {
  Var<T> out;
  // Updated running statistics (train mode); copies of the inputs otherwise.
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <class T>
struct AttnBlockParams {
  Var<T> norm1_gamma, norm1_beta;
  // Keys carry no bias: a shared key offset cancels in the softmax.
  Var<T> q_weight, q_bias, k_weight, v_weight, v_bias;
  Var<T> proj_weight, proj_bias;
  Var<T> norm2_gamma, norm2_beta;
  Var<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  std::size_t heads = 2;
  std::size_t window = 8;
};

// Cross-correlation of an N x Cin x T x H x W input.
template <class T>
Var<T> conv3d(Var<T> x, const Conv3dParams<T>& p);

// Interpolated value of a single-channel T x H x W volume at a fractional
// coordinate. Voxels outside the volume read as zero.
template <class T>
struct TrilinearSample {
  T value;
  std::array<T, 3> grad;  // d value / d (t, y, x)
};

template <class T>
TrilinearSample<T> trilinear_sample(const Tensor<T>& volume, std::array<T, 3> q);

// y(p0) = sum_n w(p_n) x(p0 + p_n + dp_n) + b, with dp_n = offset(x).
template <class T>
Var<T> deform_conv3d(Var<T> x, const DeformConv3dParams<T>& p);

// Deformable convolution on a precomputed offset field (N x 3|G| x T x H x W).
template <class T>
Var<T> deform_conv3d_with_offsets(Var<T> x, Var<T> offsets, const Conv3dParams<T>& main);

// Nearest-neighbour upsample by `scale`, then deformable convolution.
template <class T>
Var<T> upconv3d(Var<T> x, const DeformConv3dParams<T>& p, Triple scale);

// Per-channel normalisation over every axis except channels (axis 1).
template <class T>
NormResult<T> batchnorm3d(Var<T> x, const NormParams<T>& p, Mode mode);

// conv3d -> batchnorm3d -> relu. Train-mode statistics go to `updates`.
template <class T>
Var<T> conv_block(Var<T> x, const ConvBlockParams<T>& p, Mode mode, NormUpdates<T>* updates = nullptr);

// Normalises the last axis.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

// x: (..., in), weight: out x in -> (..., out).
template <class T>
Var<T> linear(Var<T> x, Var<T> weight, std::optional<Var<T>> bias);

// N x C x H x W -> (N * windows) x window^2 x C, windows in raster order.
template <class T>
Var<T> window_partition(Var<T> x, std::size_t window);
template <class T>
Var<T> window_reverse(Var<T> tokens, Shape image_shape, std::size_t window);

// Scaled dot-product attention over B x L x d, split into `heads` heads.
template <class T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads);

// Softmax attention weights, B x heads x L x L (for inspection).
template <class T>
Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads);

// Pre-norm windowed transformer block on an N x C x H x W map.
template <class T>
Var<T> attn_block(Var<T> x, const AttnBlockParams<T>& p);

}  // namespace mamat::nn
