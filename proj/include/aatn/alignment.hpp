#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aatn/attention.hpp"
#include "aatn/autodiff.hpp"
#include "aatn/params.hpp"
#include "aatn/sinkhorn.hpp"

namespace aatn {

enum class AlignMethod { none, adversarial, ot, ct };

std::string to_string(AlignMethod method);
/// Accepts none, adv, adversarial, ot, ct.
AlignMethod parse_align_method(const std::string& name);

struct AlignmentConfig {
  AlignMethod method = AlignMethod::none;
  float lambda = 0.01f;
  double epsilon = 0.01;
  int sinkhorn_max_iters = 200;
  double sinkhorn_tol = 1e-6;
  /// Hidden width of the alignment networks; 0 means the head width.
  std::size_t d_hid = 0;

  void validate() const;
  std::size_t hidden_width(std::size_t head_dim) const { return d_hid ? d_hid : head_dim; }
  SinkhornOptions sinkhorn_options() const { return {epsilon, sinkhorn_max_iters, sinkhorn_tol}; }
};

/// Adds the networks `config.method` needs (prefix "align.") to `params`.
/// One set is shared by every head and layer.
void init_alignment_params(ParamMap<float>& params, const AlignmentConfig& config, std::size_t head_dim,
                           std::mt19937_64& rng);

/// Gated residual block: t = sigmoid(x Wt + bt); t * relu(x Wh + bh) + (1 - t) * x.
template <typename T>
struct HighwayVars {
  Var<T> gate_w, gate_b, transform_w, transform_b;
};

template <typename T>
struct DiscriminatorVars {
  HighwayVars<T> highway;
  Var<T> hidden_w, hidden_b, out_w, out_b;

  static DiscriminatorVars bind(const BoundParams<T>& params);
  /// Same parameters routed through gradient reversal.
  DiscriminatorVars reversed() const;
};

/// Two-layer MLP d -> d_hid -> d with a ReLU in between.
template <typename T>
struct NavigatorVars {
  Var<T> l1_w, l1_b, l2_w, l2_b;

  static NavigatorVars bind(const BoundParams<T>& params);
};

/// Highway block followed by a d x d projection onto feature space.
template <typename T>
struct CriticVars {
  HighwayVars<T> highway;
  Var<T> proj_w, proj_b;

  static CriticVars bind(const BoundParams<T>& params);
  CriticVars reversed() const;
};

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T>
Var<T> highway(const Var<T>& x, const HighwayVars<T>& p);

/// D(X) = sigmoid(Phi_2(leaky_relu(Phi_1(highway(X))))). Input [..., d],
/// output [...] probabilities.
template <typename T>
Var<T> discriminator_forward(const Var<T>& x, const DiscriminatorVars<T>& p);
template <typename T>
Var<T> navigator_forward(const Var<T>& x, const NavigatorVars<T>& p);
template <typename T>
Var<T> critic_forward(const Var<T>& x, const CriticVars<T>& p);

inline constexpr double kProbabilityClamp = 1e-7;

/// Per-pair mean log D(q) + mean log(1 - D(k)) over unmasked tokens, shape [P].
/// The discriminator parameters enter through gradient reversal, so a
/// descent step on a loss containing this term raises it in D and lowers it
/// in whatever produced the queries and keys.
template <typename T>
Var<T> adversarial_alignment_losses(const PairSet<T>& pairs, const DiscriminatorVars<T>& disc);

enum class CostKind { sq_euclidean, cosine };

/// Cost matrices [P, w, w] with C[p, i, j] = cost(q_i, k_j).
/// sq_euclidean is |q - k|^2 / d; cosine is 1 - cos(q, k).
template <typename T>
Var<T> pairwise_cost(const Var<T>& queries, const Var<T>& keys, CostKind kind, std::span<const std::uint8_t> mask);

/// Transport plans computed for a batch; replaying a frozen cache holds the
/// plans fixed (finite-difference checks of the cost path).
struct OtPlanCache {
  std::vector<std::vector<double>> plans;
  bool frozen = false;
  std::size_t cursor = 0;
  std::size_t unconverged = 0;
};

/// Per-pair <C, plan> with squared-Euclidean cost and a Sinkhorn plan over
/// the unmasked tokens. The plan is a constant on the tape. Shape [P].
template <typename T>
Var<T> ot_alignment_losses(const PairSet<T>& pairs, const AlignmentConfig& config, OtPlanCache* cache = nullptr);

template <typename T>
struct Conditionals {
  Var<T> to_keys;     // [P, w, w]; row i is pi_K(. | q_i)
  Var<T> to_queries;  // [P, w, w]; column j is pi_Q(. | k_j)
};

template <typename T>
Conditionals<T> ct_navigator(const PairSet<T>& pairs, const NavigatorVars<T>& nav);

/// Bidirectional conditional transport cost, exact over the discrete
/// supports. The critic enters through gradient reversal. Shape [P].
template <typename T>
Var<T> ct_alignment_losses(const PairSet<T>& pairs, const NavigatorVars<T>& nav, const CriticVars<T>& critic);

// Single-pair forms; each returns a scalar.
template <typename T>
Var<T> adversarial_alignment_loss(const EmpiricalPair<T>& pair, const DiscriminatorVars<T>& disc);
template <typename T>
Var<T> ot_alignment_loss(const EmpiricalPair<T>& pair, const AlignmentConfig& config, OtPlanCache* cache = nullptr);
template <typename T>
Var<T> ct_alignment_loss(const EmpiricalPair<T>& pair, const NavigatorVars<T>& nav, const CriticVars<T>& critic);

template <typename T>
struct AlignmentLoss {
  std::optional<Var<T>> loss;  // empty for method none
  T value = T{0};
  std::size_t sinkhorn_unconverged = 0;
};

/// Mean over samples, sum over heads, mean over layers.
template <typename T>
AlignmentLoss<T> batch_alignment_loss(std::span<const PairSet<T>> layers, const AlignmentConfig& config,
                                      const BoundParams<T>& params, OtPlanCache* cache = nullptr);

}  // namespace aatn
