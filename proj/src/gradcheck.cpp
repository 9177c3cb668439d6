#include "mamat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace mamat {
namespace {

template <typename T>
T evaluate(const ScalarFnT<T>& f, const std::map<std::string, Tensor<T>>& params) {
  Tape<T> tape;
  tape.set_grad_enabled(false);
  std::map<std::string, Var<T>> vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.param(name, value));
  const auto loss = f(tape, vars);
  if (loss.value().size() != 1) throw ShapeError("gradient check needs a scalar function");
  return loss.value()[0];
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

template <typename T>
GradReport finite_diff_check(const ScalarFnT<T>& f, const std::map<std::string, Tensor<T>>& params,
                             const GradCheckOptions& options) {
  if (!(options.eps > 0)) throw std::invalid_argument("finite difference eps must be positive");

  Tape<T> tape;
  std::map<std::string, Var<T>> vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.param(name, value));
  const auto loss = f(tape, vars);
  const auto analytic = tape.backward(loss);

  GradReport report;
  const T eps = static_cast<T>(options.eps);
  const T resolution = static_cast<T>(options.resolution_ulps) * std::numeric_limits<T>::epsilon() *
                       std::max(T(1), std::abs(loss.value()[0])) / eps;
  report.resolution = static_cast<double>(resolution);
  report.eps = options.eps;
  report.threshold = options.threshold;

  std::mt19937_64 rng(options.seed);
  auto perturbed = params;
  for (const auto& [name, value] : params) {
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param && coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }

    auto& p = perturbed.at(name);
    const auto& g = analytic.at(name);
    double worst = 0.0;
    for (auto i : coords) {
      const T orig = p[i];
      p[i] = orig + eps;
      const T fp = evaluate(f, perturbed);
      p[i] = orig - eps;
      const T fm = evaluate(f, perturbed);
      p[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw DomainError("non-finite function value while perturbing " + name + "[" + std::to_string(i) + "]");
      }
      const T numeric = (fp - fm) / (2 * eps);
      if (std::max(std::abs(g[i]), std::abs(numeric)) < resolution) {
        ++report.unresolved;
        continue;
      }
      const T err = std::abs(g[i] - numeric) / std::max({std::abs(g[i]), std::abs(numeric), T(1e-8)});
      worst = std::max(worst, static_cast<double>(err));
    }
    report.coords_checked += coords.size();
    report.max_rel_error[name] = worst;
    if (worst >= report.worst) {
      report.worst = worst;
      report.worst_param = name;
    }
  }
  report.passed = report.worst < options.threshold;
  return report;
}

template GradReport finite_diff_check(const ScalarFnT<double>&, const std::map<std::string, Tensor<double>>&,
                                      const GradCheckOptions&);
template GradReport finite_diff_check(const ScalarFnT<long double>&, const std::map<std::string, Tensor<long double>>&,
                                      const GradCheckOptions&);

}  // namespace mamat
