#include "mamat/ops.hpp"

#include <cmath>

namespace mamat::ops {
namespace {

template <class T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands recorded on different tapes");
  return a.tape();
}

enum class Bcast { none, a_scalar, b_scalar };

template <class T>
Bcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::none;
  if (b.size() == 1) return Bcast::b_scalar;
  if (a.size() == 1) return Bcast::a_scalar;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

template <class T>
Tensor<T> reduce_to(const Tensor<T>& g, const Tensor<T>& like) {
  if (g.shape() == like.shape()) return g;
  T s = 0;
  for (auto v : g.data()) s += v;
  return Tensor<T>(like.shape(), s);
}

// Shared driver for binary ops. `fwd(x, y)` computes the value, `dfa/dfb`
// return the partial derivatives at (x, y).
template <class T, class Fwd, class Da, class Db>
Var<T> binary(const char* name, Var<T> a, Var<T> b, Fwd fwd, Da dfa, Db dfb) {
  auto& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = broadcast_kind(av, bv, name);
  const Shape out_shape = kind == Bcast::a_scalar ? bv.shape() : av.shape();
  const std::size_t n = shape_numel(out_shape);
  auto ai = [&, kind](std::size_t i) { return kind == Bcast::a_scalar ? av[0] : av[i]; };
  auto bi = [&, kind](std::size_t i) { return kind == Bcast::b_scalar ? bv[0] : bv[i]; };
  Tensor<T> out(out_shape, T(0));
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ai(i), bi(i));

  const auto ia = a.id(), ib = b.id();
  return tape.record(name, {ia, ib}, std::move(out),
                     [ia, ib, kind, dfa, dfb, n](Tape<T>& t, const Tensor<T>& g) {
                       const auto& av = t.value(ia);
                       const auto& bv = t.value(ib);
                       auto x = [&](std::size_t i) { return kind == Bcast::a_scalar ? av[0] : av[i]; };
                       auto y = [&](std::size_t i) { return kind == Bcast::b_scalar ? bv[0] : bv[i]; };
                       if (t.requires_grad(ia)) {
                         Tensor<T> ga(g.shape(), T(0));
                         for (std::size_t i = 0; i < n; ++i) ga[i] = g[i] * dfa(x(i), y(i));
                         t.accumulate(ia, reduce_to(ga, av));
                       }
                       if (t.requires_grad(ib)) {
                         Tensor<T> gb(g.shape(), T(0));
                         for (std::size_t i = 0; i < n; ++i) gb[i] = g[i] * dfb(x(i), y(i));
                         t.accumulate(ib, reduce_to(gb, bv));
                       }
                     });
}

// `df(x, y)` receives the input and the forward output.
template <class T, class Fwd, class Df>
Var<T> unary(const char* name, Var<T> a, Fwd fwd, Df df) {
  const auto& av = a.value();
  Tensor<T> out(av.shape(), T(0));
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const auto ia = a.id();
  const auto io = a.tape().size();
  return a.tape().record(name, {ia}, std::move(out), [ia, io, df](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(ia);
    const auto& y = t.value(io);
    Tensor<T> gi(x.shape(), T(0));
    for (std::size_t i = 0; i < x.size(); ++i) gi[i] = g[i] * df(x[i], y[i]);
    t.accumulate(ia, std::move(gi));
  });
}

}  // namespace

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  return unary<T>("scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  return unary<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> relu(Var<T> a) {
  // Subgradient 0 at exactly 0.
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> sqrt(Var<T> a) {
  for (auto v : a.value().data())
    if (v < T(0)) throw DomainError("sqrt of negative input");
  return unary<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Var<T> square(Var<T> a) {
  return unary<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Var<T> exp(Var<T> a) {
  return unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> neg(Var<T> a) {
  return unary<T>(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Var<T> softplus(Var<T> a) {
  return unary<T>(
      "softplus", a,
      [](T x) { return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}

template <class T>
Var<T> gelu(Var<T> a) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return unary<T>(
      "gelu", a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x))); },
      [](T x, T) {
        const T u = k * (x + c * x * x * x);
        const T th = std::tanh(u);
        const T du = k * (T(1) + T(3) * c * x * x);
        return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
      });
}

template <class T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return unary<T>(
      "clamp", a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <class T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (auto v : a.value().data()) s += v;
  const auto ia = a.id();
  return a.tape().record("sum", {ia}, Tensor<T>::scalar(s), [ia](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, Tensor<T>(t.value(ia).shape(), g[0]));
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (shape_numel(shape) != a.value().size()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  const auto ia = a.id();
  return a.tape().record("reshape", {ia}, a.value().reshaped(std::move(shape)),
                         [ia](Tape<T>& t, const Tensor<T>& g) {
                           t.accumulate(ia, g.reshaped(t.value(ia).shape()));
                         });
}

template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  auto& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() < 2 || av.rank() != bv.rank() || av.dim(0) != bv.dim(0)) {
    throw ShapeError("concat_channels: incompatible " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  for (std::size_t i = 2; i < av.rank(); ++i)
    if (av.dim(i) != bv.dim(i)) throw ShapeError("concat_channels: trailing extents differ");
  const std::size_t n = av.dim(0);
  const std::size_t sa = av.size() / n, sb = bv.size() / n;
  Shape shape = av.shape();
  shape[1] += bv.dim(1);
  Tensor<T> out(shape, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.ptr() + i * sa, sa, out.ptr() + i * (sa + sb));
    std::copy_n(bv.ptr() + i * sb, sb, out.ptr() + i * (sa + sb) + sa);
  }
  const auto ia = a.id(), ib = b.id();
  return tape.record("concat_channels", {ia, ib}, std::move(out),
                     [ia, ib, n, sa, sb](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T> ga(t.value(ia).shape(), T(0));
                       Tensor<T> gb(t.value(ib).shape(), T(0));
                       for (std::size_t i = 0; i < n; ++i) {
                         std::copy_n(g.ptr() + i * (sa + sb), sa, ga.ptr() + i * sa);
                         std::copy_n(g.ptr() + i * (sa + sb) + sa, sb, gb.ptr() + i * sb);
                       }
                       t.accumulate(ia, std::move(ga));
                       t.accumulate(ib, std::move(gb));
                     });
}

template <class T>
Var<T> select_time(Var<T> x, std::size_t t_index) {
  const auto d = dims5(x.value());
  if (t_index >= d.t) throw ShapeError("select_time: index out of range");
  const std::size_t plane = d.h * d.w;
  Tensor<T> out({d.n, d.c, d.h, d.w}, T(0));
  const auto& xv = x.value();
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
    std::copy_n(xv.ptr() + (nc * d.t + t_index) * plane, plane, out.ptr() + nc * plane);
  const auto ix = x.id();
  return x.tape().record("select_time", {ix}, std::move(out),
                         [ix, d, t_index, plane](Tape<T>& t, const Tensor<T>& g) {
                           Tensor<T> gx(t.value(ix).shape(), T(0));
                           for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
                             std::copy_n(g.ptr() + nc * plane, plane, gx.ptr() + (nc * d.t + t_index) * plane);
                           t.accumulate(ix, std::move(gx));
                         });
}

template <class T>
Var<T> upsample_nearest(Var<T> x, std::array<std::size_t, 3> s) {
  for (auto v : s)
    if (v != 1 && v != 2) throw std::invalid_argument("upsample scale must be 1 or 2 per axis");
  const auto d = dims5(x.value());
  const Dims5 o{d.n, d.c, d.t * s[0], d.h * s[1], d.w * s[2]};
  const auto& xv = x.value();
  Tensor<T> out({o.n, o.c, o.t, o.h, o.w}, T(0));
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
    for (std::size_t t = 0; t < o.t; ++t)
      for (std::size_t y = 0; y < o.h; ++y)
        for (std::size_t xx = 0; xx < o.w; ++xx)
          out[((nc * o.t + t) * o.h + y) * o.w + xx] = xv[((nc * d.t + t / s[0]) * d.h + y / s[1]) * d.w + xx / s[2]];
  const auto ix = x.id();
  return x.tape().record("upsample_nearest", {ix}, std::move(out), [ix, d, o, s](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gx(t.value(ix).shape(), T(0));
    for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
      for (std::size_t tt = 0; tt < o.t; ++tt)
        for (std::size_t y = 0; y < o.h; ++y)
          for (std::size_t xx = 0; xx < o.w; ++xx)
            gx[((nc * d.t + tt / s[0]) * d.h + y / s[1]) * d.w + xx / s[2]] += g[((nc * o.t + tt) * o.h + y) * o.w + xx];
    t.accumulate(ix, std::move(gx));
  });
}

#define MAMAT_INSTANTIATE(T)                                                  \
  template Var<T> add(Var<T>, Var<T>);                                        \
  template Var<T> sub(Var<T>, Var<T>);                                        \
  template Var<T> mul(Var<T>, Var<T>);                                        \
  template Var<T> scale(Var<T>, T);                                           \
  template Var<T> add_scalar(Var<T>, T);                                      \
  template Var<T> relu(Var<T>);                                               \
  template Var<T> sqrt(Var<T>);                                               \
  template Var<T> square(Var<T>);                                             \
  template Var<T> exp(Var<T>);                                                \
  template Var<T> neg(Var<T>);                                                \
  template Var<T> softplus(Var<T>);                                           \
  template Var<T> gelu(Var<T>);                                               \
  template Var<T> clamp(Var<T>, T, T);                                        \
  template Var<T> sum(Var<T>);                                                \
  template Var<T> mean(Var<T>);                                               \
  template Var<T> reshape(Var<T>, Shape);                                     \
  template Var<T> concat_channels(Var<T>, Var<T>);                            \
  template Var<T> select_time(Var<T>, std::size_t);                           \
  template Var<T> upsample_nearest(Var<T>, std::array<std::size_t, 3>);

MAMAT_INSTANTIATE(float)
MAMAT_INSTANTIATE(double)
MAMAT_INSTANTIATE(long double)
#undef MAMAT_INSTANTIATE

}  // namespace mamat::ops
