#include "mamat/nn.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "mamat/ops.hpp"

namespace mamat::nn {
namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

struct ConvGeom {
  Dims5 in;
  std::size_t cout;
  Triple k, s, p;
  Dims5 out;

  std::size_t taps() const { return k[0] * k[1] * k[2]; }
  std::size_t rows() const { return in.c * taps(); }
  std::size_t cols() const { return out.volume(); }
  bool pointwise() const {
    return taps() == 1 && s == Triple{1, 1, 1} && p == Triple{0, 0, 0};
  }
};

template <class T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Conv3dParams<T>& params) {
  const auto in = dims5(x);
  const auto wd = dims5(w.shape());
  if (wd.c != in.c) {
    throw ShapeError("conv3d: weight expects " + std::to_string(wd.c) + " input channels, got " + std::to_string(in.c));
  }
  ConvGeom g{};
  g.in = in;
  g.cout = wd.n;
  g.k = {wd.t, wd.h, wd.w};
  g.s = params.stride;
  g.p = params.padding.value_or(Triple{g.k[0] / 2, g.k[1] / 2, g.k[2] / 2});
  const std::size_t ext[3] = {in.t, in.h, in.w};
  std::size_t o[3];
  for (int a = 0; a < 3; ++a) {
    if (g.s[a] == 0) throw ShapeError("conv3d: zero stride");
    if (ext[a] + 2 * g.p[a] < g.k[a]) throw ShapeError("conv3d: input extent smaller than kernel");
    o[a] = (ext[a] + 2 * g.p[a] - g.k[a]) / g.s[a] + 1;
  }
  g.out = {in.n, g.cout, o[0], o[1], o[2]};
  return g;
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t P = g.cols();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in.c; ++c) {
    const T* xc = x + c * g.in.volume();
    for (std::size_t kt = 0; kt < g.k[0]; ++kt)
      for (std::size_t ky = 0; ky < g.k[1]; ++ky)
        for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++row) {
          T* dst = cols + row * P;
          for (std::size_t ot = 0; ot < g.out.t; ++ot) {
            const auto it = static_cast<std::ptrdiff_t>(ot * g.s[0] + kt) - static_cast<std::ptrdiff_t>(g.p[0]);
            const bool t_ok = it >= 0 && it < static_cast<std::ptrdiff_t>(g.in.t);
            for (std::size_t oy = 0; oy < g.out.h; ++oy) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * g.s[1] + ky) - static_cast<std::ptrdiff_t>(g.p[1]);
              const bool y_ok = t_ok && iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.in.h);
              const T* src = y_ok ? xc + (it * g.in.h + iy) * g.in.w : nullptr;
              for (std::size_t ox = 0; ox < g.out.w; ++ox) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.s[2] + kx) - static_cast<std::ptrdiff_t>(g.p[2]);
                *dst++ = (y_ok && ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in.w)) ? src[ix] : T(0);
              }
            }
          }
        }
  }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t P = g.cols();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in.c; ++c) {
    T* dc = dx + c * g.in.volume();
    for (std::size_t kt = 0; kt < g.k[0]; ++kt)
      for (std::size_t ky = 0; ky < g.k[1]; ++ky)
        for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++row) {
          const T* src = cols + row * P;
          for (std::size_t ot = 0; ot < g.out.t; ++ot) {
            const auto it = static_cast<std::ptrdiff_t>(ot * g.s[0] + kt) - static_cast<std::ptrdiff_t>(g.p[0]);
            const bool t_ok = it >= 0 && it < static_cast<std::ptrdiff_t>(g.in.t);
            for (std::size_t oy = 0; oy < g.out.h; ++oy) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * g.s[1] + ky) - static_cast<std::ptrdiff_t>(g.p[1]);
              const bool y_ok = t_ok && iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.in.h);
              T* dst = y_ok ? dc + (it * g.in.h + iy) * g.in.w : nullptr;
              for (std::size_t ox = 0; ox < g.out.w; ++ox, ++src) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.s[2] + kx) - static_cast<std::ptrdiff_t>(g.p[2]);
                if (y_ok && ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in.w)) dst[ix] += *src;
              }
            }
          }
        }
  }
}

// Bias gradient and bias add share this layout: N x Cout x P.
template <class T>
void add_bias(Tensor<T>& out, const Tensor<T>& bias, std::size_t n, std::size_t cout, std::size_t P) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < cout; ++c) {
      T* o = out.ptr() + (i * cout + c) * P;
      const T b = bias[c];
      for (std::size_t j = 0; j < P; ++j) o[j] += b;
    }
}

template <class T>
Tensor<T> bias_grad(const Tensor<T>& g, std::size_t n, std::size_t cout, std::size_t P) {
  Tensor<T> gb({cout}, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < cout; ++c) {
      const T* src = g.ptr() + (i * cout + c) * P;
      T s = 0;
      for (std::size_t j = 0; j < P; ++j) s += src[j];
      gb[c] += s;
    }
  return gb;
}

template <class T>
void check_bias(const std::optional<Var<T>>& bias, std::size_t cout) {
  if (bias && (bias->value().size() != cout)) throw ShapeError("bias length does not match output channels");
}

// Sampling footprint of one fractional coordinate: eight corner offsets into
// the flattened volume (-1 when outside) with their interpolation weights.
template <class T>
struct Footprint {
  std::int64_t idx[8];
  T w[8];
  T frac[3];
  std::uint8_t live;  // bit a set when axis a was not clamped
};

template <class T>
Footprint<T> footprint(std::array<T, 3> q, const std::size_t ext[3]) {
  Footprint<T> f{};
  std::int64_t base[3];
  bool ok[3][2];
  f.live = 0;
  for (int a = 0; a < 3; ++a) {
    const T hi = static_cast<T>(ext[a]);
    T v = q[a];
    if (v < T(-1)) {
      v = T(-1);
    } else if (v > hi) {
      v = hi;
    } else {
      f.live |= static_cast<std::uint8_t>(1u << a);
    }
    const T fl = std::floor(v);
    base[a] = static_cast<std::int64_t>(fl);
    f.frac[a] = v - fl;
    ok[a][0] = base[a] >= 0 && base[a] < static_cast<std::int64_t>(ext[a]);
    ok[a][1] = base[a] + 1 >= 0 && base[a] + 1 < static_cast<std::int64_t>(ext[a]);
  }
  for (int corner = 0; corner < 8; ++corner) {
    const int ct = (corner >> 2) & 1, cy = (corner >> 1) & 1, cx = corner & 1;
    const T w = (ct ? f.frac[0] : T(1) - f.frac[0]) * (cy ? f.frac[1] : T(1) - f.frac[1]) *
                (cx ? f.frac[2] : T(1) - f.frac[2]);
    if (ok[0][ct] && ok[1][cy] && ok[2][cx]) {
      f.idx[corner] = ((base[0] + ct) * static_cast<std::int64_t>(ext[1]) + base[1] + cy) *
                          static_cast<std::int64_t>(ext[2]) +
                      base[2] + cx;
      f.w[corner] = w;
    } else {
      f.idx[corner] = -1;
      f.w[corner] = T(0);
    }
  }
  return f;
}

template <class T>
T gather(const Footprint<T>& f, const T* vol) {
  T v = 0;
  for (int c = 0; c < 8; ++c)
    if (f.idx[c] >= 0) v += f.w[c] * vol[f.idx[c]];
  return v;
}

// d sample / d q for the three axes, honouring the clamp.
template <class T>
std::array<T, 3> gather_grad(const Footprint<T>& f, const T* vol) {
  std::array<T, 3> g{0, 0, 0};
  for (int c = 0; c < 8; ++c) {
    if (f.idx[c] < 0) continue;
    const T v = vol[f.idx[c]];
    const int ct = (c >> 2) & 1, cy = (c >> 1) & 1, cx = c & 1;
    const T wt = ct ? f.frac[0] : T(1) - f.frac[0];
    const T wy = cy ? f.frac[1] : T(1) - f.frac[1];
    const T wx = cx ? f.frac[2] : T(1) - f.frac[2];
    g[0] += v * (ct ? T(1) : T(-1)) * wy * wx;
    g[1] += v * wt * (cy ? T(1) : T(-1)) * wx;
    g[2] += v * wt * wy * (cx ? T(1) : T(-1));
  }
  for (int a = 0; a < 3; ++a)
    if (!(f.live & (1u << a))) g[a] = T(0);
  return g;
}

}  // namespace

template <class T>
Var<T> conv3d(Var<T> x, const Conv3dParams<T>& p) {
  const auto& xv = x.value();
  const auto& wv = p.weight.value();
  const auto g = conv_geometry(xv, wv, p);
  check_bias(p.bias, g.cout);
  const std::size_t K = g.rows(), P = g.cols();

  Tensor<T> out({g.out.n, g.out.c, g.out.t, g.out.h, g.out.w}, T(0));
  std::vector<T> cols(g.pointwise() ? 0 : K * P);
  const CMapR<T> W(wv.ptr(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(K));
  for (std::size_t n = 0; n < g.in.n; ++n) {
    const T* xn = xv.ptr() + n * g.in.c * g.in.volume();
    const T* cp = xn;
    if (!g.pointwise()) {
      im2col(xn, g, cols.data());
      cp = cols.data();
    }
    MapR<T>(out.ptr() + n * g.cout * P, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(P)).noalias() =
        W * CMapR<T>(cp, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
  }
  if (p.bias) add_bias(out, p.bias->value(), g.in.n, g.cout, P);

  std::vector<std::size_t> inputs{x.id(), p.weight.id()};
  if (p.bias) inputs.push_back(p.bias->id());
  const auto ix = x.id(), iw = p.weight.id();
  const std::optional<std::size_t> ib = p.bias ? std::optional<std::size_t>(p.bias->id()) : std::nullopt;
  return x.tape().record("conv3d", std::move(inputs), std::move(out),
                         [g, ix, iw, ib](Tape<T>& t, const Tensor<T>& grad) {
                           const std::size_t K = g.rows(), P = g.cols();
                           const auto& xv = t.value(ix);
                           const auto& wv = t.value(iw);
                           const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
                           const auto Ki = static_cast<Eigen::Index>(K), Pi = static_cast<Eigen::Index>(P),
                                      Ci = static_cast<Eigen::Index>(g.cout);
                           Tensor<T> gx = need_x ? Tensor<T>::zeros_like(xv) : Tensor<T>();
                           Tensor<T> gw = need_w ? Tensor<T>::zeros_like(wv) : Tensor<T>();
                           std::vector<T> cols(g.pointwise() ? 0 : K * P);
                           std::vector<T> dcols(g.pointwise() || !need_x ? 0 : K * P);
                           const CMapR<T> W(wv.ptr(), Ci, Ki);
                           for (std::size_t n = 0; n < g.in.n; ++n) {
                             const CMapR<T> G(grad.ptr() + n * g.cout * P, Ci, Pi);
                             const T* xn = xv.ptr() + n * g.in.c * g.in.volume();
                             if (need_w) {
                               const T* cp = xn;
                               if (!g.pointwise()) {
                                 im2col(xn, g, cols.data());
                                 cp = cols.data();
                               }
                               MapR<T>(gw.ptr(), Ci, Ki).noalias() += G * CMapR<T>(cp, Ki, Pi).transpose();
                             }
                             if (need_x) {
                               T* gxn = gx.ptr() + n * g.in.c * g.in.volume();
                               if (g.pointwise()) {
                                 MapR<T>(gxn, Ki, Pi).noalias() = W.transpose() * G;
                               } else {
                                 MapR<T>(dcols.data(), Ki, Pi).noalias() = W.transpose() * G;
                                 col2im(dcols.data(), g, gxn);
                               }
                             }
                           }
                           if (need_x) t.accumulate(ix, std::move(gx));
                           if (need_w) t.accumulate(iw, std::move(gw));
                           if (ib) t.accumulate(*ib, bias_grad(grad, g.in.n, g.cout, P));
                         });
}

template <class T>
TrilinearSample<T> trilinear_sample(const Tensor<T>& volume, std::array<T, 3> q) {
  if (volume.rank() != 3) throw ShapeError("trilinear_sample expects a T x H x W volume");
  const std::size_t ext[3] = {volume.dim(0), volume.dim(1), volume.dim(2)};
  const auto f = footprint(q, ext);
  return {gather(f, volume.ptr()), gather_grad(f, volume.ptr())};
}

template <class T>
Var<T> deform_conv3d_with_offsets(Var<T> x, Var<T> offsets, const Conv3dParams<T>& main) {
  const auto& xv = x.value();
  const auto& wv = main.weight.value();
  const auto g = conv_geometry(xv, wv, main);
  check_bias(main.bias, g.cout);
  const Triple same{g.k[0] / 2, g.k[1] / 2, g.k[2] / 2};
  if (g.s != Triple{1, 1, 1} || g.p != same) throw ShapeError("deform_conv3d requires stride 1 and same padding");
  for (auto k : g.k)
    if (k % 2 == 0) throw ShapeError("deform_conv3d requires odd kernel extents");
  const std::size_t taps = g.taps();
  const auto od = dims5(offsets.value());
  if (od.n != g.in.n || od.c != 3 * taps || od.t != g.in.t || od.h != g.in.h || od.w != g.in.w) {
    throw ShapeError("deform_conv3d: offset field has shape " + shape_str(offsets.shape()) + ", expected " +
                     std::to_string(3 * taps) + " channels over the input grid");
  }

  const std::size_t P = g.in.volume(), K = g.rows();
  const std::size_t ext[3] = {g.in.t, g.in.h, g.in.w};
  using Fp = Footprint<T>;
  auto prints = std::make_shared<std::vector<Fp>>(g.in.n * taps * P);
  const auto& ov = offsets.value();
  for (std::size_t n = 0; n < g.in.n; ++n) {
    std::size_t tap = 0;
    for (std::size_t kt = 0; kt < g.k[0]; ++kt)
      for (std::size_t ky = 0; ky < g.k[1]; ++ky)
        for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++tap) {
          const T* dt = ov.ptr() + ((n * od.c) + 3 * tap + 0) * P;
          const T* dy = ov.ptr() + ((n * od.c) + 3 * tap + 1) * P;
          const T* dx = ov.ptr() + ((n * od.c) + 3 * tap + 2) * P;
          Fp* fp = prints->data() + (n * taps + tap) * P;
          std::size_t pidx = 0;
          for (std::size_t t = 0; t < g.in.t; ++t)
            for (std::size_t y = 0; y < g.in.h; ++y)
              for (std::size_t xx = 0; xx < g.in.w; ++xx, ++pidx) {
                const std::array<T, 3> q{
                    static_cast<T>(static_cast<std::ptrdiff_t>(t + kt) - static_cast<std::ptrdiff_t>(same[0])) + dt[pidx],
                    static_cast<T>(static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(same[1])) + dy[pidx],
                    static_cast<T>(static_cast<std::ptrdiff_t>(xx + kx) - static_cast<std::ptrdiff_t>(same[2])) + dx[pidx]};
                fp[pidx] = footprint(q, ext);
              }
        }
  }

  Tensor<T> out({g.out.n, g.out.c, g.out.t, g.out.h, g.out.w}, T(0));
  std::vector<T> cols(K * P);
  const auto Ki = static_cast<Eigen::Index>(K), Pi = static_cast<Eigen::Index>(P), Ci = static_cast<Eigen::Index>(g.cout);
  for (std::size_t n = 0; n < g.in.n; ++n) {
    for (std::size_t c = 0; c < g.in.c; ++c) {
      const T* vol = xv.ptr() + (n * g.in.c + c) * P;
      for (std::size_t tap = 0; tap < taps; ++tap) {
        const Fp* fp = prints->data() + (n * taps + tap) * P;
        T* dst = cols.data() + (c * taps + tap) * P;
        for (std::size_t j = 0; j < P; ++j) dst[j] = gather(fp[j], vol);
      }
    }
    MapR<T>(out.ptr() + n * g.cout * P, Ci, Pi).noalias() = CMapR<T>(wv.ptr(), Ci, Ki) * CMapR<T>(cols.data(), Ki, Pi);
  }
  if (main.bias) add_bias(out, main.bias->value(), g.in.n, g.cout, P);

  std::vector<std::size_t> inputs{x.id(), offsets.id(), main.weight.id()};
  if (main.bias) inputs.push_back(main.bias->id());
  const auto ix = x.id(), io = offsets.id(), iw = main.weight.id();
  const std::optional<std::size_t> ib = main.bias ? std::optional<std::size_t>(main.bias->id()) : std::nullopt;
  return x.tape().record(
      "deform_conv3d", std::move(inputs), std::move(out),
      [g, ix, io, iw, ib, prints, taps](Tape<T>& t, const Tensor<T>& grad) {
        const std::size_t P = g.in.volume(), K = g.rows();
        const auto Ki = static_cast<Eigen::Index>(K), Pi = static_cast<Eigen::Index>(P),
                   Ci = static_cast<Eigen::Index>(g.cout);
        const auto& xv = t.value(ix);
        const auto& wv = t.value(iw);
        const bool need_x = t.requires_grad(ix), need_o = t.requires_grad(io), need_w = t.requires_grad(iw);
        Tensor<T> gx = need_x ? Tensor<T>::zeros_like(xv) : Tensor<T>();
        Tensor<T> go = need_o ? Tensor<T>::zeros_like(t.value(io)) : Tensor<T>();
        Tensor<T> gw = need_w ? Tensor<T>::zeros_like(wv) : Tensor<T>();
        std::vector<T> cols(need_w ? K * P : 0);
        std::vector<T> dcols(K * P);
        for (std::size_t n = 0; n < g.in.n; ++n) {
          const CMapR<T> G(grad.ptr() + n * g.cout * P, Ci, Pi);
          if (need_w) {
            for (std::size_t c = 0; c < g.in.c; ++c) {
              const T* vol = xv.ptr() + (n * g.in.c + c) * P;
              for (std::size_t tap = 0; tap < taps; ++tap) {
                const auto* fp = prints->data() + (n * taps + tap) * P;
                T* dst = cols.data() + (c * taps + tap) * P;
                for (std::size_t j = 0; j < P; ++j) dst[j] = gather(fp[j], vol);
              }
            }
            MapR<T>(gw.ptr(), Ci, Ki).noalias() += G * CMapR<T>(cols.data(), Ki, Pi).transpose();
          }
          if (!need_x && !need_o) continue;
          MapR<T>(dcols.data(), Ki, Pi).noalias() = CMapR<T>(wv.ptr(), Ci, Ki).transpose() * G;
          for (std::size_t c = 0; c < g.in.c; ++c) {
            const std::size_t plane = (n * g.in.c + c) * P;
            const T* vol = xv.ptr() + plane;
            for (std::size_t tap = 0; tap < taps; ++tap) {
              const auto* fp = prints->data() + (n * taps + tap) * P;
              const T* dc = dcols.data() + (c * taps + tap) * P;
              for (std::size_t j = 0; j < P; ++j) {
                const T gj = dc[j];
                if (gj == T(0)) continue;
                if (need_x) {
                  T* gvol = gx.ptr() + plane;
                  for (int k = 0; k < 8; ++k)
                    if (fp[j].idx[k] >= 0) gvol[fp[j].idx[k]] += gj * fp[j].w[k];
                }
                if (need_o) {
                  const auto dq = gather_grad(fp[j], vol);
                  T* gof = go.ptr() + (n * 3 * taps + 3 * tap) * P + j;
                  gof[0] += gj * dq[0];
                  gof[P] += gj * dq[1];
                  gof[2 * P] += gj * dq[2];
                }
              }
            }
          }
        }
        if (need_x) t.accumulate(ix, std::move(gx));
        if (need_o) t.accumulate(io, std::move(go));
        if (need_w) t.accumulate(iw, std::move(gw));
        if (ib) t.accumulate(*ib, bias_grad(grad, g.in.n, g.cout, P));
      });
}

template <class T>
Var<T> deform_conv3d(Var<T> x, const DeformConv3dParams<T>& p) {
  const auto offsets = conv3d(x, p.offset);
  return deform_conv3d_with_offsets(x, offsets, p.main);
}

template <class T>
Var<T> upconv3d(Var<T> x, const DeformConv3dParams<T>& p, Triple scale) {
  for (auto s : scale)
    if (s != 1 && s != 2) throw std::invalid_argument("upconv3d: scale components must be 1 or 2");
  return deform_conv3d(ops::upsample_nearest(x, scale), p);
}

template <class T>
NormResult<T> batchnorm3d(Var<T> x, const NormParams<T>& p, Mode mode) {
  if (!(p.eps > T(0))) throw std::invalid_argument("batchnorm eps must be positive");
  const auto& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("batchnorm3d expects N x C x ...");
  const std::size_t N = xv.dim(0), C = xv.dim(1), S = xv.size() / (N * C);
  if (p.gamma.value().size() != C || p.beta.value().size() != C || p.running_mean.size() != C ||
      p.running_var.size() != C) {
    throw ShapeError("batchnorm3d: parameter length does not match channel count");
  }
  const auto& gv = p.gamma.value();
  const auto& bv = p.beta.value();
  const T count = static_cast<T>(N * S);

  auto mean = std::make_shared<std::vector<T>>(C);
  auto inv_std = std::make_shared<std::vector<T>>(C);
  NormResult<T> result{{}, p.running_mean, p.running_var};
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      T s = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = xv.ptr() + (n * C + c) * S;
        for (std::size_t j = 0; j < S; ++j) s += src[j];
      }
      const T m = s / count;
      T v = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = xv.ptr() + (n * C + c) * S;
        for (std::size_t j = 0; j < S; ++j) v += (src[j] - m) * (src[j] - m);
      }
      v /= count;
      (*mean)[c] = m;
      (*inv_std)[c] = T(1) / std::sqrt(v + p.eps);
      const T unbiased = count > T(1) ? v * count / (count - T(1)) : v;
      result.running_mean[c] = (T(1) - p.momentum) * p.running_mean[c] + p.momentum * m;
      result.running_var[c] = (T(1) - p.momentum) * p.running_var[c] + p.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      (*mean)[c] = p.running_mean[c];
      (*inv_std)[c] = T(1) / std::sqrt(p.running_var[c] + p.eps);
    }
  }

  Tensor<T> out(xv.shape(), T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = xv.ptr() + (n * C + c) * S;
      T* dst = out.ptr() + (n * C + c) * S;
      const T m = (*mean)[c], is = (*inv_std)[c], ga = gv[c], be = bv[c];
      for (std::size_t j = 0; j < S; ++j) dst[j] = ga * ((src[j] - m) * is) + be;
    }

  const auto ix = x.id(), ig = p.gamma.id(), ib = p.beta.id();
  const bool batch_stats = mode == Mode::train;
  result.out = x.tape().record(
      "batchnorm3d", {ix, ig, ib}, std::move(out),
      [=](Tape<T>& t, const Tensor<T>& grad) {
        const auto& xv = t.value(ix);
        const auto& gv = t.value(ig);
        Tensor<T> gx = Tensor<T>::zeros_like(xv);
        Tensor<T> ggamma({C}, T(0)), gbeta({C}, T(0));
        for (std::size_t c = 0; c < C; ++c) {
          const T m = (*mean)[c], is = (*inv_std)[c];
          T sum_g = 0, sum_gx = 0;
          for (std::size_t n = 0; n < N; ++n) {
            const T* src = xv.ptr() + (n * C + c) * S;
            const T* g = grad.ptr() + (n * C + c) * S;
            for (std::size_t j = 0; j < S; ++j) {
              sum_g += g[j];
              sum_gx += g[j] * (src[j] - m) * is;
            }
          }
          gbeta[c] = sum_g;
          ggamma[c] = sum_gx;
          const T ga = gv[c];
          for (std::size_t n = 0; n < N; ++n) {
            const T* src = xv.ptr() + (n * C + c) * S;
            const T* g = grad.ptr() + (n * C + c) * S;
            T* dst = gx.ptr() + (n * C + c) * S;
            if (batch_stats) {
              const T mg = sum_g / count, mgx = sum_gx / count;
              for (std::size_t j = 0; j < S; ++j) {
                const T xhat = (src[j] - m) * is;
                dst[j] = ga * is * (g[j] - mg - xhat * mgx);
              }
            } else {
              for (std::size_t j = 0; j < S; ++j) dst[j] = ga * is * g[j];
            }
          }
        }
        t.accumulate(ix, std::move(gx));
        t.accumulate(ig, std::move(ggamma));
        t.accumulate(ib, std::move(gbeta));
      });
  return result;
}

template <class T>
Var<T> conv_block(Var<T> x, const ConvBlockParams<T>& p, Mode mode, NormUpdates<T>* updates) {
  auto r = batchnorm3d(conv3d(x, p.conv), p.norm, mode);
  if (updates && mode == Mode::train) {
    (*updates)[p.norm.key] = {std::move(r.running_mean), std::move(r.running_var)};
  }
  return ops::relu(r.out);
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const auto& xv = x.value();
  const std::size_t d = xv.shape().back();
  if (gamma.value().size() != d || beta.value().size() != d) throw ShapeError("layer_norm: parameter length mismatch");
  const std::size_t rows = xv.size() / d;
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(xv.shape(), T(0));
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.ptr() + r * d;
    T m = 0;
    for (std::size_t j = 0; j < d; ++j) m += src[j];
    m /= static_cast<T>(d);
    T v = 0;
    for (std::size_t j = 0; j < d; ++j) v += (src[j] - m) * (src[j] - m);
    v /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(v + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (src[j] - m) * is;
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = gv[j] * xh + bv[j];
    }
  }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record("layer_norm", {ix, ig, ib}, std::move(out), [=](Tape<T>& t, const Tensor<T>& grad) {
    const auto& gv = t.value(ig);
    Tensor<T> gx = Tensor<T>::zeros_like(t.value(ix));
    Tensor<T> gg({d}, T(0)), gb({d}, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = grad.ptr() + r * d;
      const T* xh = xhat->data() + r * d;
      T mg = 0, mgx = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const T gy = g[j] * gv[j];
        mg += gy;
        mgx += gy * xh[j];
        gg[j] += g[j] * xh[j];
        gb[j] += g[j];
      }
      mg /= static_cast<T>(d);
      mgx /= static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] = (*inv_std)[r] * (g[j] * gv[j] - mg - xh[j] * mgx);
    }
    t.accumulate(ix, std::move(gx));
    t.accumulate(ig, std::move(gg));
    t.accumulate(ib, std::move(gb));
  });
}

template <class T>
Var<T> linear(Var<T> x, Var<T> weight, std::optional<Var<T>> bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  if (wv.rank() != 2 || wv.dim(1) != xv.shape().back()) {
    throw ShapeError("linear: weight " + shape_str(wv.shape()) + " incompatible with input " + shape_str(xv.shape()));
  }
  const std::size_t in = wv.dim(1), outd = wv.dim(0), rows = xv.size() / in;
  check_bias(bias, outd);
  Shape shape = xv.shape();
  shape.back() = outd;
  Tensor<T> out(shape, T(0));
  const auto R = static_cast<Eigen::Index>(rows), I = static_cast<Eigen::Index>(in), O = static_cast<Eigen::Index>(outd);
  MapR<T>(out.ptr(), R, O).noalias() = CMapR<T>(xv.ptr(), R, I) * CMapR<T>(wv.ptr(), O, I).transpose();
  if (bias) {
    const auto& bv = bias->value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < outd; ++j) out[r * outd + j] += bv[j];
  }
  std::vector<std::size_t> inputs{x.id(), weight.id()};
  if (bias) inputs.push_back(bias->id());
  const auto ix = x.id(), iw = weight.id();
  const std::optional<std::size_t> ib = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  return x.tape().record("linear", std::move(inputs), std::move(out), [=](Tape<T>& t, const Tensor<T>& grad) {
    const auto& xv = t.value(ix);
    const auto& wv = t.value(iw);
    const CMapR<T> G(grad.ptr(), R, O);
    if (t.requires_grad(ix)) {
      Tensor<T> gx = Tensor<T>::zeros_like(xv);
      MapR<T>(gx.ptr(), R, I).noalias() = G * CMapR<T>(wv.ptr(), O, I);
      t.accumulate(ix, std::move(gx));
    }
    if (t.requires_grad(iw)) {
      Tensor<T> gw = Tensor<T>::zeros_like(wv);
      MapR<T>(gw.ptr(), O, I).noalias() = G.transpose() * CMapR<T>(xv.ptr(), R, I);
      t.accumulate(iw, std::move(gw));
    }
    if (ib) {
      Tensor<T> gb({outd}, T(0));
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < outd; ++j) gb[j] += grad[r * outd + j];
      t.accumulate(*ib, std::move(gb));
    }
  });
}

namespace {

struct WindowLayout {
  std::size_t n, c, h, w, win, nwh, nww;
  std::size_t windows() const { return n * nwh * nww; }
  std::size_t tokens() const { return win * win; }
  // Image offset of (window b, token l, channel ch).
  std::size_t image_index(std::size_t b, std::size_t l, std::size_t ch) const {
    const std::size_t ni = b / (nwh * nww), rem = b % (nwh * nww);
    const std::size_t y = (rem / nww) * win + l / win, x = (rem % nww) * win + l % win;
    return ((ni * c + ch) * h + y) * w + x;
  }
};

WindowLayout window_layout(const Shape& image, std::size_t window) {
  if (image.size() != 4) throw ShapeError("window ops expect N x C x H x W, got " + shape_str(image));
  if (window == 0 || image[2] % window || image[3] % window) {
    throw ShapeError("window " + std::to_string(window) + " does not divide spatial extent " + shape_str(image));
  }
  return {image[0], image[1], image[2], image[3], window, image[2] / window, image[3] / window};
}

}  // namespace

template <class T>
Var<T> window_partition(Var<T> x, std::size_t window) {
  const auto L = window_layout(x.shape(), window);
  const auto& xv = x.value();
  Tensor<T> out({L.windows(), L.tokens(), L.c}, T(0));
  std::size_t k = 0;
  for (std::size_t b = 0; b < L.windows(); ++b)
    for (std::size_t l = 0; l < L.tokens(); ++l)
      for (std::size_t ch = 0; ch < L.c; ++ch) out[k++] = xv[L.image_index(b, l, ch)];
  const auto ix = x.id();
  return x.tape().record("window_partition", {ix}, std::move(out), [ix, L](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::zeros_like(t.value(ix));
    std::size_t k = 0;
    for (std::size_t b = 0; b < L.windows(); ++b)
      for (std::size_t l = 0; l < L.tokens(); ++l)
        for (std::size_t ch = 0; ch < L.c; ++ch) gx[L.image_index(b, l, ch)] = g[k++];
    t.accumulate(ix, std::move(gx));
  });
}

template <class T>
Var<T> window_reverse(Var<T> tokens, Shape image_shape, std::size_t window) {
  const auto L = window_layout(image_shape, window);
  const auto& tv = tokens.value();
  if (tv.shape() != Shape{L.windows(), L.tokens(), L.c}) throw ShapeError("window_reverse: token shape mismatch");
  Tensor<T> out(image_shape, T(0));
  std::size_t k = 0;
  for (std::size_t b = 0; b < L.windows(); ++b)
    for (std::size_t l = 0; l < L.tokens(); ++l)
      for (std::size_t ch = 0; ch < L.c; ++ch) out[L.image_index(b, l, ch)] = tv[k++];
  const auto it = tokens.id();
  return tokens.tape().record("window_reverse", {it}, std::move(out), [it, L](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gt = Tensor<T>::zeros_like(t.value(it));
    std::size_t k = 0;
    for (std::size_t b = 0; b < L.windows(); ++b)
      for (std::size_t l = 0; l < L.tokens(); ++l)
        for (std::size_t ch = 0; ch < L.c; ++ch) gt[k++] = g[L.image_index(b, l, ch)];
    t.accumulate(it, std::move(gt));
  });
}

namespace {

struct AttnGeom {
  std::size_t b, l, d, heads, dh;
};

template <class T>
AttnGeom attn_geometry(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads) {
  if (q.rank() != 3 || q.shape() != k.shape()) throw ShapeError("attention expects matching B x L x d inputs");
  const std::size_t d = q.dim(2);
  if (heads == 0 || d % heads) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  return {q.dim(0), q.dim(1), d, heads, d / heads};
}

// Copies head h of window b into an L x dh matrix.
template <class T>
MatR<T> head_slice(const Tensor<T>& x, const AttnGeom& g, std::size_t b, std::size_t h) {
  MatR<T> m(g.l, g.dh);
  for (std::size_t i = 0; i < g.l; ++i)
    for (std::size_t j = 0; j < g.dh; ++j) m(i, j) = x[(b * g.l + i) * g.d + h * g.dh + j];
  return m;
}

template <class T>
void head_store(Tensor<T>& x, const AttnGeom& g, std::size_t b, std::size_t h, const MatR<T>& m) {
  for (std::size_t i = 0; i < g.l; ++i)
    for (std::size_t j = 0; j < g.dh; ++j) x[(b * g.l + i) * g.d + h * g.dh + j] += m(i, j);
}

template <class T>
void softmax_rows(MatR<T>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const T mx = s.row(i).maxCoeff();
    T z = 0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      s(i, j) = std::exp(s(i, j) - mx);
      z += s(i, j);
    }
    s.row(i) /= z;
  }
}

}  // namespace

template <class T>
Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads) {
  const auto g = attn_geometry(q, k, heads);
  const T sc = T(1) / std::sqrt(static_cast<T>(g.dh));
  Tensor<T> out({g.b, g.heads, g.l, g.l}, T(0));
  for (std::size_t b = 0; b < g.b; ++b)
    for (std::size_t h = 0; h < g.heads; ++h) {
      MatR<T> s = (head_slice(q, g, b, h) * head_slice(k, g, b, h).transpose()) * sc;
      softmax_rows(s);
      std::copy_n(s.data(), g.l * g.l, out.ptr() + (b * g.heads + h) * g.l * g.l);
    }
  return out;
}

template <class T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads) {
  const auto g = attn_geometry(q.value(), k.value(), heads);
  if (v.shape() != q.shape()) throw ShapeError("attention: value shape mismatch");
  auto probs = std::make_shared<Tensor<T>>(attention_probs(q.value(), k.value(), heads));
  Tensor<T> out(q.shape(), T(0));
  for (std::size_t b = 0; b < g.b; ++b)
    for (std::size_t h = 0; h < g.heads; ++h) {
      const CMapR<T> P(probs->ptr() + (b * g.heads + h) * g.l * g.l, static_cast<Eigen::Index>(g.l),
                       static_cast<Eigen::Index>(g.l));
      head_store(out, g, b, h, MatR<T>(P * head_slice(v.value(), g, b, h)));
    }
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record("multi_head_attention", {iq, ik, iv}, std::move(out),
                         [=](Tape<T>& t, const Tensor<T>& grad) {
                           const auto& qv = t.value(iq);
                           const auto& kv = t.value(ik);
                           const auto& vv = t.value(iv);
                           const T sc = T(1) / std::sqrt(static_cast<T>(g.dh));
                           Tensor<T> gq = Tensor<T>::zeros_like(qv), gk = Tensor<T>::zeros_like(kv),
                                     gv = Tensor<T>::zeros_like(vv);
                           for (std::size_t b = 0; b < g.b; ++b)
                             for (std::size_t h = 0; h < g.heads; ++h) {
                               const CMapR<T> P(probs->ptr() + (b * g.heads + h) * g.l * g.l,
                                                static_cast<Eigen::Index>(g.l), static_cast<Eigen::Index>(g.l));
                               const MatR<T> dO = head_slice(grad, g, b, h);
                               const MatR<T> V = head_slice(vv, g, b, h);
                               head_store(gv, g, b, h, MatR<T>(P.transpose() * dO));
                               const MatR<T> dP = dO * V.transpose();
                               MatR<T> dS(g.l, g.l);
                               for (std::size_t i = 0; i < g.l; ++i) {
                                 T dot = 0;
                                 for (std::size_t j = 0; j < g.l; ++j) dot += dP(i, j) * P(i, j);
                                 for (std::size_t j = 0; j < g.l; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
                               }
                               head_store(gq, g, b, h, MatR<T>(dS * head_slice(kv, g, b, h)));
                               head_store(gk, g, b, h, MatR<T>(dS.transpose() * head_slice(qv, g, b, h)));
                             }
                           t.accumulate(iq, std::move(gq));
                           t.accumulate(ik, std::move(gk));
                           t.accumulate(iv, std::move(gv));
                         });
}

template <class T>
Var<T> attn_block(Var<T> x, const AttnBlockParams<T>& p) {
  const Shape image = x.shape();
  if (image.size() != 4) throw ShapeError("attn_block expects N x C x H x W");
  if (p.heads == 0 || image[1] % p.heads) throw ShapeError("attn_block: channels not divisible by heads");
  auto tokens = window_partition(x, p.window);
  auto h = layer_norm(tokens, p.norm1_gamma, p.norm1_beta);
  auto q = linear(h, p.q_weight, std::optional<Var<T>>(p.q_bias));
  auto k = linear(h, p.k_weight, std::optional<Var<T>>());
  auto v = linear(h, p.v_weight, std::optional<Var<T>>(p.v_bias));
  auto a = multi_head_attention(q, k, v, p.heads);
  tokens = ops::add(tokens, linear(a, p.proj_weight, std::optional<Var<T>>(p.proj_bias)));
  auto h2 = layer_norm(tokens, p.norm2_gamma, p.norm2_beta);
  auto m = linear(ops::gelu(linear(h2, p.fc1_weight, std::optional<Var<T>>(p.fc1_bias))), p.fc2_weight,
                  std::optional<Var<T>>(p.fc2_bias));
  tokens = ops::add(tokens, m);
  return window_reverse(tokens, image, p.window);
}

#define MAMAT_INSTANTIATE(T)                                                                       \
  template Var<T> conv3d(Var<T>, const Conv3dParams<T>&);                                          \
  template TrilinearSample<T> trilinear_sample(const Tensor<T>&, std::array<T, 3>);                \
  template Var<T> deform_conv3d(Var<T>, const DeformConv3dParams<T>&);                             \
  template Var<T> deform_conv3d_with_offsets(Var<T>, Var<T>, const Conv3dParams<T>&);              \
  template Var<T> upconv3d(Var<T>, const DeformConv3dParams<T>&, Triple);                          \
  template NormResult<T> batchnorm3d(Var<T>, const NormParams<T>&, Mode);                          \
  template Var<T> conv_block(Var<T>, const ConvBlockParams<T>&, Mode, NormUpdates<T>*);            \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                           \
  template Var<T> linear(Var<T>, Var<T>, std::optional<Var<T>>);                                   \
  template Var<T> window_partition(Var<T>, std::size_t);                                           \
  template Var<T> window_reverse(Var<T>, Shape, std::size_t);                                      \
  template Var<T> multi_head_attention(Var<T>, Var<T>, Var<T>, std::size_t);                       \
  template Tensor<T> attention_probs(const Tensor<T>&, const Tensor<T>&, std::size_t);             \
  template Var<T> attn_block(Var<T>, const AttnBlockParams<T>&);

MAMAT_INSTANTIATE(float)
MAMAT_INSTANTIATE(double)
MAMAT_INSTANTIATE(long double)
#undef MAMAT_INSTANTIATE

}  // namespace mamat::nn
