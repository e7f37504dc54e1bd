#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aatn/params.hpp"

namespace aatn {

struct GradcheckOptions {
  std::size_t seeds = 20;
  std::uint64_t base_seed = 0;
  double step = 1e-3;       // central-difference half step
  double tolerance = 1e-4;  // on relative error
  /// Instances with an op input closer than this to a kink are redrawn.
  double kink_margin = 1e-2;
  std::size_t max_width = 4;
  std::size_t dim = 8;
};

struct GradcheckSuite {
  std::string name;
  double max_rel_error = 0.0;    // per tensor, L2
  double max_entry_error = 0.0;  // per entry, reported only
  std::string worst;             // "<param> seed <s>"
  std::size_t instances = 0;
  std::size_t redrawn = 0;
  std::size_t entries = 0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GradcheckSuite> suites;
  double seconds = 0.0;
  bool passed() const;
  std::string table() const;
};

/// |a - n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

using LossBuilder = std::function<Var<double>(const BoundParams<double>&)>;
/// Expected ratio of analytic gradient to the finite difference of the built
/// loss for a parameter: -1 for parameters behind gradient reversal.
using SignMap = std::function<double(const std::string&)>;

struct CheckOutcome {
  /// max over input tensors of |a - n|_2 / max(|a|_2, |n|_2, 1e-8).
  double max_rel_error = 0.0;
  double max_entry_error = 0.0;
  std::string worst;
  std::size_t entries = 0;
  bool rejected = false;  // too close to a kink
};

/// Compares one backward pass of `loss` against central differences of its
/// value for every entry of every input tensor.
CheckOutcome check_gradients(const ParamMap<double>& inputs, const LossBuilder& loss, const SignMap& sign,
                             const GradcheckOptions& options);

/// Attention stack, adversarial (GRL sign structure), OT (through the cost
/// with frozen plans) and CT (Q/K, navigator and reversed critic).
GradcheckReport run_gradcheck(const GradcheckOptions& options = {});

}  // namespace aatn
