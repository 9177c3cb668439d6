#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mamat/gradcheck.hpp"
#include "mamat/model.hpp"

namespace mamat {

// One finite-difference check: a scalar function of named 64-bit tensors.
struct GradCase {
  std::string name;
  ScalarFn fn;
  std::map<std::string, Tensor<double>> params;
  std::size_t max_coords_per_param = 0;  // 0 checks every coordinate
  // Replaces the default check of fn over params when set.
  std::function<GradReport(const GradCheckOptions&)> check;
};

enum class SuiteConfig { tiny, standard };

// Smallest configuration the full network accepts (8 x 8 inputs).
ModelConfig tiny_model_config();

// Every differentiable op, the composite blocks, the loss and the full
// network. The network case uses tiny_model_config() or the default config.
std::vector<GradCase> gradient_cases(SuiteConfig config);

struct CaseResult {
  std::string name;
  GradReport report;
  std::string error;  // non-empty when the check could not be evaluated
  double seconds = 0;
  bool passed = false;
};

struct SuiteReport {
  std::vector<CaseResult> cases;
  double seconds = 0;
  bool passed = false;

  std::vector<std::string> failures() const;
};

SuiteReport run_gradient_suite(SuiteConfig config, double eps = 1e-5, double threshold = 1e-4,
                               const std::function<void(const CaseResult&)>& on_case = {});

}  // namespace mamat
