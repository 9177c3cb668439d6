#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "mamat/tape.hpp"

namespace mamat {

struct GradCheckOptions {
  double eps = 1e-5;
  double threshold = 1e-4;
  // 0 checks every coordinate; otherwise at most this many per parameter,
  // chosen with a generator seeded by `seed`.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // Central differences cannot resolve gradients below
  // resolution_ulps * machine epsilon * max(1, |f|) / eps. Coordinates where both
  // the analytic and numeric values are under that bound count as unresolved.
  double resolution_ulps = 256;
};

struct GradReport {
  std::map<std::string, double> max_rel_error;
  double worst = 0.0;
  std::string worst_param;
  double eps = 0.0;
  double threshold = 0.0;
  std::size_t coords_checked = 0;
  std::size_t unresolved = 0;
  double resolution = 0.0;
  bool passed = false;
};

// Relative error |a - n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

template <typename T>
using ScalarFnT = std::function<Var<T>(Tape<T>&, const std::map<std::string, Var<T>>&)>;
using ScalarFn = ScalarFnT<double>;

// Compares backward() against central differences (f(p+eps) - f(p-eps)) / 2eps,
// evaluated in T (double or long double).
// Throws DomainError if f is non-finite at a perturbed point.
template <typename T>
GradReport finite_diff_check(const ScalarFnT<T>& f, const std::map<std::string, Tensor<T>>& params,
                             const GradCheckOptions& options = {});

extern template GradReport finite_diff_check(const ScalarFnT<double>&, const std::map<std::string, Tensor<double>>&,
                                             const GradCheckOptions&);
extern template GradReport finite_diff_check(const ScalarFnT<long double>&,
                                             const std::map<std::string, Tensor<long double>>&,
                                             const GradCheckOptions&);

}  // namespace mamat
