#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "mamat/nn.hpp"

namespace mamat::ssm {

// Below this |delta * a| the zero-order-hold input gain uses its first-order series.
inline constexpr double kSeriesThreshold = 1e-6;

struct Discretized {
  double abar;
  double bbar;
};

// Zero-order hold of the scalar system h' = a h + b x over a step of `delta`.
Discretized discretize(double a, double b, double delta);

// A: C x d, B: d, delta: C -> (Abar, Bbar), both C x d.
template <class T>
std::array<Tensor<T>, 2> discretize(const Tensor<T>& A, const Tensor<T>& B, const Tensor<T>& delta);

// h_t = abar_t * h_{t-1} + bbar_t * x_t, y_t = <c_t, h_t> + D x_t, h_0 = 0.
// abar, bbar, c: L x d; x: L.
template <class T>
Tensor<T> ssm_scan(const Tensor<T>& abar, const Tensor<T>& bbar, const Tensor<T>& c, const Tensor<T>& x,
                   T D = T(0));

enum class Direction { forward, backward, transposed, transposed_backward };

inline constexpr std::array<Direction, 4> kAllDirections = {Direction::forward, Direction::backward,
                                                            Direction::transposed,
                                                            Direction::transposed_backward};

// Visiting order of a T x H x W volume: entry s is the (t, y, x) raster index
// of the s-th token. Transposed orders walk (t, x, y).
std::vector<std::uint32_t> scan_order(Direction dir, std::size_t t, std::size_t h, std::size_t w);

// Fused discretize + scan over the volume of each channel.
//   x, delta: N x C x T x H x W; A, D: C x d, C; B, Cm: N x d x T x H x W.
// Tokens are visited in `order` and each output is written back at its own
// position.
template <class T>
Var<T> selective_scan(Var<T> x, Var<T> delta, Var<T> A, Var<T> B, Var<T> Cm, Var<T> D,
                      const std::vector<std::uint32_t>& order);

template <class T>
struct SsmParams {
  Var<T> a_log;      // C x d, A = -exp(a_log)
  Var<T> dt_weight;  // C x C x 1 x 1 x 1
  Var<T> dt_bias;    // C
  Var<T> b_weight;   // d x C x 1 x 1 x 1
  Var<T> c_weight;   // d x C x 1 x 1 x 1
  Var<T> d_skip;     // C
};

template <class T>
struct Selective {
  Var<T> delta;  // N x C x T x H x W
  Var<T> B;      // N x d x T x H x W
  Var<T> C;      // N x d x T x H x W
};

template <class T>
Selective<T> selective_params(Var<T> F, const SsmParams<T>& p);

// Mean of the selective scan over the four directions.
template <class T>
Var<T> multidirectional_ssm(Var<T> F, const SsmParams<T>& p);

// Scan along a single direction (the building block of multidirectional_ssm).
template <class T>
Var<T> directional_ssm(Var<T> F, const SsmParams<T>& p, Direction dir);

template <class T>
struct MambaBlockParams {
  nn::ConvBlockParams<T> residual;
  nn::ConvBlockParams<T> inner;
  nn::ConvBlockParams<T> outer;
  SsmParams<T> ssm;
};

// outer(SSM(inner(F))) + residual(F), each a 1x1x1 conv block.
template <class T>
Var<T> mamba_in_conv(Var<T> F, const MambaBlockParams<T>& p, nn::Mode mode,
                     nn::NormUpdates<T>* updates = nullptr);

template <class T>
struct ResMambaParams {
  nn::ConvBlockParams<T> conv1;
  nn::ConvBlockParams<T> conv2;
  MambaBlockParams<T> mamba;
  // 1x1x1 projection of the input; required when the block changes width.
  std::optional<Var<T>> skip_weight;
};

template <class T>
Var<T> res_mamba_block(Var<T> F, const ResMambaParams<T>& p, nn::Mode mode,
                       nn::NormUpdates<T>* updates = nullptr);

}  // namespace mamat::ssm
