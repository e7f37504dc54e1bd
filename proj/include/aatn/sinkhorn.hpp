#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace aatn {

struct SinkhornOptions {
  double epsilon = 0.01;
  int max_iters = 200;
  double tol = 1e-6;
};

struct SinkhornResult {
  std::vector<double> plan;  // row-major rows x cols
  bool converged = false;
  int iterations = 0;
  /// Largest absolute deviation of a row or column sum from its marginal.
  double marginal_error = 0.0;
};

/// Entropy-regularized transport between uniform marginals (1/rows, 1/cols).
/// Runs scaling iterations on a kernel with periodically absorbed log
/// potentials, falling back to sinkhorn_log_domain if the kernel underflows.
/// Stops once the marginal error drops below `tol` or after `max_iters`;
/// `converged` reports which.
SinkhornResult sinkhorn(std::span<const double> cost, std::size_t rows, std::size_t cols,
                        const SinkhornOptions& options);

/// Same fixed point via log-sum-exp updates on the dual potentials only.
/// Slower, never overflows.
SinkhornResult sinkhorn_log_domain(std::span<const double> cost, std::size_t rows, std::size_t cols,
                                   const SinkhornOptions& options);

}  // namespace aatn
