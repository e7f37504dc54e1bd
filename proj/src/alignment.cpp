#include "aatn/alignment.hpp"

#include <cmath>

namespace aatn {

std::string to_string(AlignMethod method) {
  switch (method) {
    case AlignMethod::none:
      return "none";
    case AlignMethod::adversarial:
      return "adv";
    case AlignMethod::ot:
      return "ot";
    case AlignMethod::ct:
      return "ct";
  }
  return "none";
}

AlignMethod parse_align_method(const std::string& name) {
  if (name == "none") return AlignMethod::none;
  if (name == "adv" || name == "adversarial") return AlignMethod::adversarial;
  if (name == "ot") return AlignMethod::ot;
  if (name == "ct") return AlignMethod::ct;
  throw ConfigError("unknown alignment method '" + name + "' (expected none, adv, ot or ct)");
}

void AlignmentConfig::validate() const {
  if (!(lambda >= 0.0f)) throw ConfigError("alignment weight lambda must be >= 0");
  if (!(epsilon > 0.0)) throw ConfigError("entropic regularizer epsilon must be > 0");
  if (sinkhorn_max_iters < 1) throw ConfigError("sinkhorn_max_iters must be >= 1");
  if (!(sinkhorn_tol > 0.0)) throw ConfigError("sinkhorn_tol must be > 0");
}

namespace {

void add_linear(ParamMap<float>& params, const std::string& name, std::size_t in, std::size_t out,
                std::mt19937_64& rng) {
  params.insert_or_assign(name + ".w", glorot_uniform(in, out, rng));
  params.insert_or_assign(name + ".b", Tensor<float>(Shape{out}, 0.0f));
}

void add_highway(ParamMap<float>& params, const std::string& prefix, std::size_t d, std::mt19937_64& rng) {
  add_linear(params, prefix + ".gate", d, d, rng);
  add_linear(params, prefix + ".transform", d, d, rng);
}

template <typename T>
HighwayVars<T> bind_highway(const BoundParams<T>& p, const std::string& prefix) {
  return {p[prefix + ".gate.w"], p[prefix + ".gate.b"], p[prefix + ".transform.w"], p[prefix + ".transform.b"]};
}

template <typename T>
HighwayVars<T> reverse_highway(const HighwayVars<T>& h) {
  return {gradient_reversal(h.gate_w), gradient_reversal(h.gate_b), gradient_reversal(h.transform_w),
          gradient_reversal(h.transform_b)};
}

// [P, w] weights 1/n_valid on unmasked tokens, 0 elsewhere.
template <typename T>
Tensor<T> mean_weights(std::span<const std::uint8_t> mask, std::size_t pairs, std::size_t width) {
  Tensor<T> w(Shape{pairs, width});
  for (std::size_t p = 0; p < pairs; ++p) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < width; ++i) n += mask[p * width + i] != 0;
    for (std::size_t i = 0; i < width; ++i) {
      w[p * width + i] = mask[p * width + i] ? T{1} / static_cast<T>(n) : T{0};
    }
  }
  return w;
}

template <typename T>
Var<T> to_scalar(const Var<T>& v) {
  return reshape(v, Shape{});
}

}  // namespace

void init_alignment_params(ParamMap<float>& params, const AlignmentConfig& config, std::size_t head_dim,
                           std::mt19937_64& rng) {
  const std::size_t d = head_dim;
  const std::size_t h = config.hidden_width(d);
  switch (config.method) {
    case AlignMethod::none:
    case AlignMethod::ot:
      break;
    case AlignMethod::adversarial:
      add_highway(params, "align.disc.highway", d, rng);
      add_linear(params, "align.disc.hidden", d, h, rng);
      add_linear(params, "align.disc.out", h, 1, rng);
      break;
    case AlignMethod::ct:
      add_linear(params, "align.nav.l1", d, h, rng);
      add_linear(params, "align.nav.l2", h, d, rng);
      add_highway(params, "align.critic.highway", d, rng);
      add_linear(params, "align.critic.proj", d, d, rng);
      break;
  }
}

template <typename T>
DiscriminatorVars<T> DiscriminatorVars<T>::bind(const BoundParams<T>& p) {
  return {bind_highway(p, "align.disc.highway"), p["align.disc.hidden.w"], p["align.disc.hidden.b"],
          p["align.disc.out.w"], p["align.disc.out.b"]};
}

template <typename T>
DiscriminatorVars<T> DiscriminatorVars<T>::reversed() const {
  return {reverse_highway(highway), gradient_reversal(hidden_w), gradient_reversal(hidden_b),
          gradient_reversal(out_w), gradient_reversal(out_b)};
}

template <typename T>
NavigatorVars<T> NavigatorVars<T>::bind(const BoundParams<T>& p) {
  return {p["align.nav.l1.w"], p["align.nav.l1.b"], p["align.nav.l2.w"], p["align.nav.l2.b"]};
}

template <typename T>
CriticVars<T> CriticVars<T>::bind(const BoundParams<T>& p) {
  return {bind_highway(p, "align.critic.highway"), p["align.critic.proj.w"], p["align.critic.proj.b"]};
}

template <typename T>
CriticVars<T> CriticVars<T>::reversed() const {
  return {reverse_highway(highway), gradient_reversal(proj_w), gradient_reversal(proj_b)};
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add(matmul(x, w), b);
}

template <typename T>
Var<T> highway(const Var<T>& x, const HighwayVars<T>& p) {
  auto gate = apply_unary(UnaryKind::sigmoid, linear(x, p.gate_w, p.gate_b));
  auto transformed = apply_unary(UnaryKind::relu, linear(x, p.transform_w, p.transform_b));
  auto carry = add_scalar(scale(gate, T{-1}), T{1});
  return add(mul(gate, transformed), mul(carry, x));
}

template <typename T>
Var<T> discriminator_forward(const Var<T>& x, const DiscriminatorVars<T>& p) {
  auto h = highway(x, p.highway);
  auto hidden = apply_unary(UnaryKind::leaky_relu, linear(h, p.hidden_w, p.hidden_b));
  auto prob = apply_unary(UnaryKind::sigmoid, linear(hidden, p.out_w, p.out_b));
  Shape s = x.shape();
  s.pop_back();
  return reshape(prob, s);
}

template <typename T>
Var<T> navigator_forward(const Var<T>& x, const NavigatorVars<T>& p) {
  return linear(apply_unary(UnaryKind::relu, linear(x, p.l1_w, p.l1_b)), p.l2_w, p.l2_b);
}

template <typename T>
Var<T> critic_forward(const Var<T>& x, const CriticVars<T>& p) {
  return linear(highway(x, p.highway), p.proj_w, p.proj_b);
}

template <typename T>
Var<T> adversarial_alignment_losses(const PairSet<T>& pairs, const DiscriminatorVars<T>& disc) {
  auto& tape = pairs.queries().tape();
  const auto d = disc.reversed();
  const T lo = static_cast<T>(kProbabilityClamp);
  const T hi = T{1} - lo;
  auto weights = tape.constant(mean_weights<T>(pairs.mask(), pairs.size(), pairs.width()));
  auto dq = clamp(discriminator_forward(pairs.queries(), d), lo, hi);
  auto dk = clamp(discriminator_forward(pairs.keys(), d), lo, hi);
  auto log_q = apply_unary(UnaryKind::log, dq);
  auto log_not_k = apply_unary(UnaryKind::log, add_scalar(scale(dk, T{-1}), T{1}));
  return add(sum(mul(log_q, weights), -1), sum(mul(log_not_k, weights), -1));
}

template <typename T>
Var<T> pairwise_cost(const Var<T>& queries, const Var<T>& keys, CostKind kind, std::span<const std::uint8_t> mask) {
  const Shape& s = queries.shape();
  if (s.size() != 3 || keys.shape() != s) {
    throw DimensionError("pairwise_cost expects matching [P, w, d], got " + to_string(s) + " and " +
                         to_string(keys.shape()));
  }
  const std::size_t pairs = s[0], width = s[1], d = s[2];
  if (mask.size() != pairs * width) throw DimensionError("pairwise_cost mask does not match " + to_string(s));
  auto& tape = queries.tape();
  if (kind == CostKind::sq_euclidean) {
    // Fused: C_pij = mean_k (q_pik - k_pjk)^2, dC/dq_pi = 2/d sum_j G_pij (q_pi - k_pj).
    const T inv_d = T{1} / static_cast<T>(d);
    const auto& qv = queries.value();
    const auto& kv = keys.value();
    Tensor<T> cost(Shape{pairs, width, width});
    for (std::size_t p = 0; p < pairs; ++p) {
      for (std::size_t i = 0; i < width; ++i) {
        const T* q = qv.data().data() + (p * width + i) * d;
        for (std::size_t j = 0; j < width; ++j) {
          const T* k = kv.data().data() + (p * width + j) * d;
          T acc{0};
          for (std::size_t c = 0; c < d; ++c) acc += (q[c] - k[c]) * (q[c] - k[c]);
          cost[(p * width + i) * width + j] = acc * inv_d;
        }
      }
    }
    const std::size_t qid = queries.id(), kid = keys.id();
    return tape.record(std::move(cost), {queries, keys}, [=](Tape<T>& t, const Tensor<T>& g) {
      const auto& qv = t.value(qid);
      const auto& kv = t.value(kid);
      const bool need_q = t.requires_grad(qid), need_k = t.requires_grad(kid);
      T* gq = need_q ? t.grad_buffer(qid).data().data() : nullptr;
      T* gk = need_k ? t.grad_buffer(kid).data().data() : nullptr;
      const T two_d = T{2} * inv_d;
      for (std::size_t p = 0; p < pairs; ++p) {
        for (std::size_t i = 0; i < width; ++i) {
          const T* q = qv.data().data() + (p * width + i) * d;
          for (std::size_t j = 0; j < width; ++j) {
            const T gij = g[(p * width + i) * width + j] * two_d;
            if (gij == T{0}) continue;
            const T* k = kv.data().data() + (p * width + j) * d;
            for (std::size_t c = 0; c < d; ++c) {
              const T diff = gij * (q[c] - k[c]);
              if (gq) gq[(p * width + i) * d + c] += diff;
              if (gk) gk[(p * width + j) * d + c] -= diff;
            }
          }
        }
      }
    });
  }
  // Masked rows get +1 on their squared norm so they never divide by zero.
  Tensor<T> pad(Shape{pairs, width, 1});
  for (std::size_t i = 0; i < pad.size(); ++i) pad[i] = mask[i] ? T{0} : T{1};
  auto pad_var = tape.constant(std::move(pad));
  auto normalize = [&](const Var<T>& x, const char* side) {
    auto sq = add(sum(apply_unary(UnaryKind::square, x), -1, true), pad_var);
    const auto& sv = sq.value();
    for (std::size_t i = 0; i < sv.size(); ++i) {
      if (sv[i] == T{0}) {
        throw NumericError(std::string("zero-norm ") + side + " vector at pair " + std::to_string(i / width) +
                           ", index " + std::to_string(i % width));
      }
    }
    return div(x, apply_unary(UnaryKind::sqrt, sq));
  };
  auto qn = normalize(queries, "query");
  auto kn = normalize(keys, "key");
  return add_scalar(scale(matmul(qn, transpose(kn)), T{-1}), T{1});
}

template <typename T>
Var<T> ot_alignment_losses(const PairSet<T>& pairs, const AlignmentConfig& config, OtPlanCache* cache) {
  auto cost = pairwise_cost(pairs.queries(), pairs.keys(), CostKind::sq_euclidean, pairs.mask());
  const std::size_t n_pairs = pairs.size(), width = pairs.width();
  const auto& cv = cost.value();
  Tensor<T> plan(Shape{n_pairs, width, width});
  std::vector<std::size_t> idx;
  std::vector<double> sub_cost;
  for (std::size_t p = 0; p < n_pairs; ++p) {
    idx.clear();
    for (std::size_t i = 0; i < width; ++i) {
      if (pairs.valid(p, i)) idx.push_back(i);
    }
    const std::size_t n = idx.size();
    std::vector<double> sub_plan;
    if (cache && cache->frozen) {
      if (cache->cursor >= cache->plans.size()) throw ContractError("frozen transport-plan cache exhausted");
      sub_plan = cache->plans[cache->cursor++];
      if (sub_plan.size() != n * n) throw ContractError("frozen transport plan has the wrong size");
    } else {
      sub_cost.resize(n * n);
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
          sub_cost[a * n + b] = static_cast<double>(cv[(p * width + idx[a]) * width + idx[b]]);
        }
      }
      auto res = sinkhorn(sub_cost, n, n, config.sinkhorn_options());
      if (cache) {
        cache->unconverged += res.converged ? 0 : 1;
        cache->plans.push_back(res.plan);
      }
      sub_plan = std::move(res.plan);
    }
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = 0; b < n; ++b) {
        plan[(p * width + idx[a]) * width + idx[b]] = static_cast<T>(sub_plan[a * n + b]);
      }
    }
  }
  auto weighted = mul(cost, cost.tape().constant(std::move(plan)));
  return sum(sum(weighted, -1), -1);
}

template <typename T>
Conditionals<T> ct_navigator(const PairSet<T>& pairs, const NavigatorVars<T>& nav) {
  auto& tape = pairs.queries().tape();
  const std::size_t n_pairs = pairs.size(), width = pairs.width();
  auto fq = navigator_forward(pairs.queries(), nav);
  auto fk = navigator_forward(pairs.keys(), nav);
  auto logits = matmul(fq, transpose(fk));  // [P, w(query), w(key)]
  Tensor<T> key_bias(Shape{n_pairs, 1, width});
  Tensor<T> query_bias(Shape{n_pairs, width, 1});
  for (std::size_t i = 0; i < n_pairs * width; ++i) {
    const T b = pairs.mask()[i] ? T{0} : static_cast<T>(kMaskedLogit);
    key_bias[i] = b;
    query_bias[i] = b;
  }
  auto to_keys = softmax(add(logits, tape.constant(std::move(key_bias))), -1);
  auto to_queries = softmax(add(logits, tape.constant(std::move(query_bias))), -2);
  return {to_keys, to_queries};
}

template <typename T>
Var<T> ct_alignment_losses(const PairSet<T>& pairs, const NavigatorVars<T>& nav, const CriticVars<T>& critic) {
  auto& tape = pairs.queries().tape();
  const std::size_t n_pairs = pairs.size(), width = pairs.width();
  const auto cond = ct_navigator(pairs, nav);
  const auto eta = critic.reversed();
  auto cost = pairwise_cost(critic_forward(pairs.queries(), eta), critic_forward(pairs.keys(), eta), CostKind::cosine,
                            pairs.mask());
  // Half of the uniform 1/n weight on each unmasked query row (forward
  // direction) and key column (backward direction).
  Tensor<T> row_w(Shape{n_pairs, width, 1});
  Tensor<T> col_w(Shape{n_pairs, 1, width});
  for (std::size_t p = 0; p < n_pairs; ++p) {
    const T half_mean = T{1} / (T{2} * static_cast<T>(pairs.valid_count(p)));
    for (std::size_t i = 0; i < width; ++i) {
      const T w = pairs.valid(p, i) ? half_mean : T{0};
      row_w[p * width + i] = w;
      col_w[p * width + i] = w;
    }
  }
  auto forward = mul(mul(cond.to_keys, cost), tape.constant(std::move(row_w)));
  auto backward = mul(mul(cond.to_queries, cost), tape.constant(std::move(col_w)));
  return sum(sum(add(forward, backward), -1), -1);
}

template <typename T>
Var<T> adversarial_alignment_loss(const EmpiricalPair<T>& pair, const DiscriminatorVars<T>& disc) {
  return to_scalar(adversarial_alignment_losses(PairSet<T>::from_pair(pair), disc));
}

template <typename T>
Var<T> ot_alignment_loss(const EmpiricalPair<T>& pair, const AlignmentConfig& config, OtPlanCache* cache) {
  return to_scalar(ot_alignment_losses(PairSet<T>::from_pair(pair), config, cache));
}

template <typename T>
Var<T> ct_alignment_loss(const EmpiricalPair<T>& pair, const NavigatorVars<T>& nav, const CriticVars<T>& critic) {
  return to_scalar(ct_alignment_losses(PairSet<T>::from_pair(pair), nav, critic));
}

template <typename T>
AlignmentLoss<T> batch_alignment_loss(std::span<const PairSet<T>> layers, const AlignmentConfig& config,
                                      const BoundParams<T>& params, OtPlanCache* cache) {
  AlignmentLoss<T> out;
  if (config.method == AlignMethod::none) return out;
  if (layers.empty()) throw ContractError("batch_alignment_loss needs at least one layer of pairs");

  std::optional<DiscriminatorVars<T>> disc;
  std::optional<NavigatorVars<T>> nav;
  std::optional<CriticVars<T>> critic;
  if (config.method == AlignMethod::adversarial) disc = DiscriminatorVars<T>::bind(params);
  if (config.method == AlignMethod::ct) {
    nav = NavigatorVars<T>::bind(params);
    critic = CriticVars<T>::bind(params);
  }
  OtPlanCache local_cache;
  OtPlanCache* plans = cache ? cache : &local_cache;
  const std::size_t unconverged_before = plans->unconverged;

  std::optional<Var<T>> total;
  for (const auto& pairs : layers) {
    Var<T> per_pair;
    switch (config.method) {
      case AlignMethod::adversarial:
        per_pair = adversarial_alignment_losses(pairs, *disc);
        break;
      case AlignMethod::ot:
        per_pair = ot_alignment_losses(pairs, config, plans);
        break;
      case AlignMethod::ct:
        per_pair = ct_alignment_losses(pairs, *nav, *critic);
        break;
      case AlignMethod::none:
        break;
    }
    const T norm = T{1} / static_cast<T>(pairs.samples() * layers.size());
    auto term = scale(sum(per_pair), norm);
    total = total ? add(*total, term) : term;
  }
  out.loss = total;
  out.value = total->value().item();
  out.sinkhorn_unconverged = plans->unconverged - unconverged_before;
  return out;
}

#define AATN_INSTANTIATE_ALIGNMENT(T)                                                                          \
  template struct DiscriminatorVars<T>;                                                                        \
  template struct NavigatorVars<T>;                                                                            \
  template struct CriticVars<T>;                                                                               \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                         \
  template Var<T> highway(const Var<T>&, const HighwayVars<T>&);                                               \
  template Var<T> discriminator_forward(const Var<T>&, const DiscriminatorVars<T>&);                           \
  template Var<T> navigator_forward(const Var<T>&, const NavigatorVars<T>&);                                   \
  template Var<T> critic_forward(const Var<T>&, const CriticVars<T>&);                                         \
  template Var<T> adversarial_alignment_losses(const PairSet<T>&, const DiscriminatorVars<T>&);                \
  template Var<T> pairwise_cost(const Var<T>&, const Var<T>&, CostKind, std::span<const std::uint8_t>);        \
  template Var<T> ot_alignment_losses(const PairSet<T>&, const AlignmentConfig&, OtPlanCache*);                \
  template Conditionals<T> ct_navigator(const PairSet<T>&, const NavigatorVars<T>&);                           \
  template Var<T> ct_alignment_losses(const PairSet<T>&, const NavigatorVars<T>&, const CriticVars<T>&);       \
  template Var<T> adversarial_alignment_loss(const EmpiricalPair<T>&, const DiscriminatorVars<T>&);            \
  template Var<T> ot_alignment_loss(const EmpiricalPair<T>&, const AlignmentConfig&, OtPlanCache*);            \
  template Var<T> ct_alignment_loss(const EmpiricalPair<T>&, const NavigatorVars<T>&, const CriticVars<T>&);   \
  template AlignmentLoss<T> batch_alignment_loss(std::span<const PairSet<T>>, const AlignmentConfig&,          \
                                                 const BoundParams<T>&, OtPlanCache*);

AATN_INSTANTIATE_ALIGNMENT(float)
AATN_INSTANTIATE_ALIGNMENT(double)

}  // namespace aatn
