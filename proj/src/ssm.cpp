#include "mamat/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "mamat/ops.hpp"

namespace mamat::ssm {
namespace {

// phi(z) = (exp(z) - 1) / z, the input gain of a unit-step hold.
template <class T>
T hold_gain(T z) {
  if (std::abs(z) < T(kSeriesThreshold)) return T(1) + z / T(2);
  return std::expm1(z) / z;
}

template <class T>
T hold_gain_derivative(T z, T abar, T phi) {
  if (std::abs(z) < T(1e-3)) return T(0.5) + z / T(3) + z * z / T(8);
  return (abar - phi) / z;
}

void check_positive_step(double delta) {
  if (!(delta > 0)) throw DomainError("discretize: step must be positive, got " + std::to_string(delta));
}

void check_stable(double a) {
  if (!(a < 0)) throw DomainError("discretize: state entries must be negative, got " + std::to_string(a));
}

}  // namespace

Discretized discretize(double a, double b, double delta) {
  check_stable(a);
  check_positive_step(delta);
  const double z = delta * a;
  return {std::exp(z), hold_gain(z) * delta * b};
}

template <class T>
std::array<Tensor<T>, 2> discretize(const Tensor<T>& A, const Tensor<T>& B, const Tensor<T>& delta) {
  if (A.rank() != 2 || B.rank() != 1 || delta.rank() != 1 || B.dim(0) != A.dim(1) || delta.dim(0) != A.dim(0)) {
    throw ShapeError("discretize: expected A (C, d), B (d), delta (C); got " + shape_str(A.shape()) + ", " +
                     shape_str(B.shape()) + ", " + shape_str(delta.shape()));
  }
  const std::size_t C = A.dim(0), d = A.dim(1);
  Tensor<T> abar(A.shape(), T(0)), bbar(A.shape(), T(0));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < d; ++k) {
      const auto r = discretize(double(A[c * d + k]), double(B[k]), double(delta[c]));
      abar[c * d + k] = T(r.abar);
      bbar[c * d + k] = T(r.bbar);
    }
  }
  return {std::move(abar), std::move(bbar)};
}

template <class T>
Tensor<T> ssm_scan(const Tensor<T>& abar, const Tensor<T>& bbar, const Tensor<T>& c, const Tensor<T>& x, T D) {
  if (abar.rank() != 2 || x.rank() != 1) throw ShapeError("ssm_scan: expected L x d coefficients and L inputs");
  const std::size_t L = abar.dim(0), d = abar.dim(1);
  if (bbar.shape() != abar.shape() || c.shape() != abar.shape() || x.dim(0) != L) {
    throw ShapeError("ssm_scan: length mismatch");
  }
  std::vector<T> h(d, T(0));
  Tensor<T> y({L}, T(0));
  for (std::size_t t = 0; t < L; ++t) {
    T acc = 0;
    for (std::size_t k = 0; k < d; ++k) {
      h[k] = abar[t * d + k] * h[k] + bbar[t * d + k] * x[t];
      acc += c[t * d + k] * h[k];
    }
    y[t] = acc + D * x[t];
  }
  return y;
}

std::vector<std::uint32_t> scan_order(Direction dir, std::size_t t, std::size_t h, std::size_t w) {
  std::vector<std::uint32_t> order;
  order.reserve(t * h * w);
  const bool transposed = dir == Direction::transposed || dir == Direction::transposed_backward;
  for (std::size_t it = 0; it < t; ++it) {
    if (transposed) {
      for (std::size_t ix = 0; ix < w; ++ix)
        for (std::size_t iy = 0; iy < h; ++iy) order.push_back(static_cast<std::uint32_t>((it * h + iy) * w + ix));
    } else {
      for (std::size_t i = 0; i < h * w; ++i) order.push_back(static_cast<std::uint32_t>(it * h * w + i));
    }
  }
  if (dir == Direction::backward || dir == Direction::transposed_backward) {
    std::reverse(order.begin(), order.end());
  }
  return order;
}

template <class T>
Var<T> selective_scan(Var<T> x, Var<T> delta, Var<T> A, Var<T> B, Var<T> Cm, Var<T> D,
                      const std::vector<std::uint32_t>& order) {
  const auto& xv = x.value();
  const auto& dv = delta.value();
  const auto& av = A.value();
  const auto& bv = B.value();
  const auto& cv = Cm.value();
  const auto& Dv = D.value();
  const auto xd = dims5(xv);
  if (av.rank() != 2 || av.dim(0) != xd.c) throw ShapeError("selective_scan: A must be C x d");
  const std::size_t N = xd.n, C = xd.c, L = xd.volume(), d = av.dim(1);
  const Shape proj{N, d, xd.t, xd.h, xd.w};
  if (dv.shape() != xv.shape() || bv.shape() != proj || cv.shape() != proj || Dv.shape() != Shape{C}) {
    throw ShapeError("selective_scan: inconsistent shapes x " + shape_str(xv.shape()) + ", delta " +
                     shape_str(dv.shape()) + ", B " + shape_str(bv.shape()) + ", C " + shape_str(cv.shape()) +
                     ", D " + shape_str(Dv.shape()));
  }
  if (order.size() != L) throw ShapeError("selective_scan: order length differs from token count");
  for (auto a : av.data()) check_stable(double(a));
  for (auto s : dv.data()) check_positive_step(double(s));

  Tensor<T> y(xv.shape(), T(0));
  const bool keep = x.tape().grad_enabled();
  // State after every step, laid out (n, c, step, k).
  auto hist = std::make_shared<std::vector<T>>(keep ? N * C * L * d : 0);
  std::vector<T> h(d);
  for (std::size_t n = 0; n < N; ++n) {
    const T* bn = bv.ptr() + n * d * L;
    const T* cn = cv.ptr() + n * d * L;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t nc = (n * C + c) * L;
      const T* a = av.ptr() + c * d;
      std::fill(h.begin(), h.end(), T(0));
      for (std::size_t s = 0; s < L; ++s) {
        const std::size_t i = order[s];
        const T dl = dv[nc + i], xi = xv[nc + i];
        T acc = 0;
        for (std::size_t k = 0; k < d; ++k) {
          const T z = dl * a[k];
          const T abar = std::exp(z);
          const T bbar = hold_gain(z) * dl * bn[k * L + i];
          h[k] = abar * h[k] + bbar * xi;
          acc += cn[k * L + i] * h[k];
        }
        y[nc + i] = acc + Dv[c] * xi;
        if (keep) std::copy(h.begin(), h.end(), hist->begin() + (nc + s) * d);
      }
    }
  }

  const auto ix = x.id(), idl = delta.id(), ia = A.id(), ib = B.id(), ic = Cm.id(), iD = D.id();
  auto ord = std::make_shared<const std::vector<std::uint32_t>>(order);
  return x.tape().record(
      "selective_scan", {ix, idl, ia, ib, ic, iD}, std::move(y),
      [=](Tape<T>& t, const Tensor<T>& gy) {
        const auto& xv = t.value(ix);
        const auto& dv = t.value(idl);
        const auto& av = t.value(ia);
        const auto& bv = t.value(ib);
        const auto& cv = t.value(ic);
        const auto& Dv = t.value(iD);
        Tensor<T> gx = Tensor<T>::zeros_like(xv), gd = Tensor<T>::zeros_like(dv), ga = Tensor<T>::zeros_like(av),
                  gb = Tensor<T>::zeros_like(bv), gc = Tensor<T>::zeros_like(cv), gD = Tensor<T>::zeros_like(Dv);
        std::vector<T> dh(d);
        for (std::size_t n = 0; n < N; ++n) {
          const T* bn = bv.ptr() + n * d * L;
          const T* cn = cv.ptr() + n * d * L;
          T* gbn = gb.ptr() + n * d * L;
          T* gcn = gc.ptr() + n * d * L;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t nc = (n * C + c) * L;
            const T* a = av.ptr() + c * d;
            T* gac = ga.ptr() + c * d;
            std::fill(dh.begin(), dh.end(), T(0));
            for (std::size_t s = L; s-- > 0;) {
              const std::size_t i = (*ord)[s];
              const T g = gy[nc + i], dl = dv[nc + i], xi = xv[nc + i];
              const T* hs = hist->data() + (nc + s) * d;
              gD[c] += g * xi;
              T gxi = g * Dv[c];
              T gdl = 0;
              for (std::size_t k = 0; k < d; ++k) {
                const T hp = s > 0 ? hist->data()[(nc + s - 1) * d + k] : T(0);
                const T z = dl * a[k];
                const T abar = std::exp(z);
                const T phi = hold_gain(z);
                const T bk = bn[k * L + i];
                const T bbar = phi * dl * bk;
                gcn[k * L + i] += g * hs[k];
                const T dhk = dh[k] + g * cn[k * L + i];
                const T dabar = dhk * hp;
                const T dbbar = dhk * xi;
                gxi += dhk * bbar;
                dh[k] = dhk * abar;
                const T dz = dabar * abar + dbbar * dl * bk * hold_gain_derivative(z, abar, phi);
                gdl += dbbar * phi * bk + dz * a[k];
                gbn[k * L + i] += dbbar * phi * dl;
                gac[k] += dz * dl;
              }
              gx[nc + i] += gxi;
              gd[nc + i] += gdl;
            }
          }
        }
        t.accumulate(ix, std::move(gx));
        t.accumulate(idl, std::move(gd));
        t.accumulate(ia, std::move(ga));
        t.accumulate(ib, std::move(gb));
        t.accumulate(ic, std::move(gc));
        t.accumulate(iD, std::move(gD));
      });
}

// Keeps underflowed softplus / exp results inside the domain of discretize.
template <class T>
Var<T> positive(Var<T> x) {
  return ops::clamp(x, std::numeric_limits<T>::min(), std::numeric_limits<T>::max());
}

template <class T>
Selective<T> selective_params(Var<T> F, const SsmParams<T>& p) {
  using nn::Conv3dParams;
  Selective<T> s;
  s.delta = positive(ops::softplus(nn::conv3d(F, Conv3dParams<T>{p.dt_weight, p.dt_bias, {1, 1, 1}, std::nullopt})));
  s.B = nn::conv3d(F, Conv3dParams<T>{p.b_weight, std::nullopt, {1, 1, 1}, std::nullopt});
  s.C = nn::conv3d(F, Conv3dParams<T>{p.c_weight, std::nullopt, {1, 1, 1}, std::nullopt});
  return s;
}

template <class T>
Var<T> directional_ssm(Var<T> F, const SsmParams<T>& p, Direction dir) {
  const auto s = selective_params(F, p);
  const auto A = ops::neg(positive(ops::exp(p.a_log)));
  const auto d = dims5(F.value());
  return selective_scan(F, s.delta, A, s.B, s.C, p.d_skip, scan_order(dir, d.t, d.h, d.w));
}

template <class T>
Var<T> multidirectional_ssm(Var<T> F, const SsmParams<T>& p) {
  const auto s = selective_params(F, p);
  const auto A = ops::neg(positive(ops::exp(p.a_log)));
  const auto d = dims5(F.value());
  Var<T> total;
  for (auto dir : kAllDirections) {
    auto y = selective_scan(F, s.delta, A, s.B, s.C, p.d_skip, scan_order(dir, d.t, d.h, d.w));
    total = total.valid() ? ops::add(total, y) : y;
  }
  return ops::scale(total, T(1) / T(kAllDirections.size()));
}

template <class T>
Var<T> mamba_in_conv(Var<T> F, const MambaBlockParams<T>& p, nn::Mode mode, nn::NormUpdates<T>* updates) {
  auto branch = nn::conv_block(F, p.inner, mode, updates);
  branch = nn::conv_block(multidirectional_ssm(branch, p.ssm), p.outer, mode, updates);
  auto residual = nn::conv_block(F, p.residual, mode, updates);
  if (branch.shape() != residual.shape()) {
    throw ShapeError("mamba_in_conv: branch " + shape_str(branch.shape()) + " vs residual " +
                     shape_str(residual.shape()));
  }
  return ops::add(branch, residual);
}

template <class T>
Var<T> res_mamba_block(Var<T> F, const ResMambaParams<T>& p, nn::Mode mode, nn::NormUpdates<T>* updates) {
  auto y = nn::conv_block(F, p.conv1, mode, updates);
  y = nn::conv_block(y, p.conv2, mode, updates);
  y = mamba_in_conv(y, p.mamba, mode, updates);
  Var<T> skip = F;
  if (p.skip_weight) {
    skip = nn::conv3d(F, nn::Conv3dParams<T>{*p.skip_weight, std::nullopt, {1, 1, 1}, std::nullopt});
  }
  if (skip.shape() != y.shape()) {
    throw ShapeError("res_mamba_block: skip " + shape_str(skip.shape()) + " vs body " + shape_str(y.shape()) +
                     " (a projection is needed when the width changes)");
  }
  return ops::add(y, skip);
}

#define MAMAT_INSTANTIATE(T)                                                                              \
  template std::array<Tensor<T>, 2> discretize(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> ssm_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
  template Var<T> selective_scan(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>,                          \
                                 const std::vector<std::uint32_t>&);                                      \
  template Selective<T> selective_params(Var<T>, const SsmParams<T>&);                                    \
  template Var<T> directional_ssm(Var<T>, const SsmParams<T>&, Direction);                                \
  template Var<T> multidirectional_ssm(Var<T>, const SsmParams<T>&);                                      \
  template Var<T> mamba_in_conv(Var<T>, const MambaBlockParams<T>&, nn::Mode, nn::NormUpdates<T>*);       \
  template Var<T> res_mamba_block(Var<T>, const ResMambaParams<T>&, nn::Mode, nn::NormUpdates<T>*);

MAMAT_INSTANTIATE(float)
MAMAT_INSTANTIATE(double)
MAMAT_INSTANTIATE(long double)

}  // namespace mamat::ssm
