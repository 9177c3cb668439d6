#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mamat/ssm.hpp"
#include "test_util.hpp"

namespace mamat::ssm::testing {

using mamat::testing::random_tensor;

struct ScanInputs {
  Tensor<double> x, delta, A, B, C, D;
};

inline ScanInputs random_scan_inputs(std::mt19937_64& rng, std::size_t n, std::size_t c, std::size_t d, Shape vol) {
  Shape xs{n, c, vol[0], vol[1], vol[2]}, ps{n, d, vol[0], vol[1], vol[2]};
  return {random_tensor(xs, rng),
          random_tensor(xs, rng, 0.001, 0.5),
          random_tensor({c, d}, rng, -3.0, -0.05),
          random_tensor(ps, rng),
          random_tensor(ps, rng),
          random_tensor({c}, rng)};
}

// Step-by-step recurrence with per-token discretization.
inline Tensor<double> literal_scan(const ScanInputs& in, const std::vector<std::uint32_t>& order) {
  const auto xd = dims5(in.x);
  const std::size_t L = xd.volume(), d = in.A.dim(1);
  Tensor<double> y(in.x.shape(), 0.0);
  for (std::size_t n = 0; n < xd.n; ++n)
    for (std::size_t c = 0; c < xd.c; ++c) {
      std::vector<double> h(d, 0.0);
      for (std::size_t s = 0; s < L; ++s) {
        const std::size_t i = order[s];
        const double xi = in.x[(n * xd.c + c) * L + i];
        const double dl = in.delta[(n * xd.c + c) * L + i];
        double acc = 0;
        for (std::size_t k = 0; k < d; ++k) {
          const auto r = discretize(in.A[c * d + k], in.B[(n * d + k) * L + i], dl);
          h[k] = r.abar * h[k] + r.bbar * xi;
          acc += in.C[(n * d + k) * L + i] * h[k];
        }
        y[(n * xd.c + c) * L + i] = acc + in.D[c] * xi;
      }
    }
  return y;
}

}  // namespace mamat::ssm::testing
