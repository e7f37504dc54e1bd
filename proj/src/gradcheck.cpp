#include "aatn/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "aatn/alignment.hpp"
#include "aatn/data.hpp"
#include "aatn/model.hpp"

namespace aatn {

bool GradcheckReport::passed() const {
  return std::all_of(suites.begin(), suites.end(), [](const auto& s) { return s.passed; });
}

std::string GradcheckReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(14) << "suite" << std::setw(14) << "max_rel_err"
     << std::setw(14) << "max_entry_err" << std::setw(11) << "instances" << std::setw(9) << "redrawn"
     << std::setw(9) << "entries" << "result\n";
  for (const auto& s : suites) {
    os << std::setw(14) << s.name << std::setw(14) << std::setprecision(3) << std::scientific << s.max_rel_error
       << std::setw(14) << s.max_entry_error << std::defaultfloat << std::setw(11) << s.instances << std::setw(9) << s.redrawn << std::setw(9) << s.entries
       << (s.passed ? "ok" : "FAIL (" + s.worst + ")") << '\n';
  }
  os << "elapsed " << std::fixed << std::setprecision(2) << seconds << " s\n";
  return os.str();
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

CheckOutcome check_gradients(const ParamMap<double>& inputs, const LossBuilder& loss, const SignMap& sign,
                             const GradcheckOptions& options) {
  CheckOutcome out;
  ParamMap<double> grads;
  {
    Tape<double> tape;
    BoundParams<double> bound(tape, inputs, true);
    auto l = loss(bound);
    if (tape.kink_margin() < options.kink_margin) {
      out.rejected = true;
      return out;
    }
    tape.backward(l);
    grads = bound.grads();
  }
  auto value_at = [&](const ParamMap<double>& p) {
    Tape<double> tape;
    BoundParams<double> bound(tape, p, false);
    return loss(bound).value().item();
  };
  ParamMap<double> probe = inputs;
  for (auto& [name, tensor] : probe) {
    const double s = sign ? sign(name) : 1.0;
    const auto& g = grads.at(name);
    double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double orig = tensor[i];
      tensor[i] = orig + options.step;
      const double up = value_at(probe);
      tensor[i] = orig - options.step;
      const double down = value_at(probe);
      tensor[i] = orig;
      const double numeric = s * (up - down) / (2.0 * options.step);
      diff_sq += (g[i] - numeric) * (g[i] - numeric);
      analytic_sq += g[i] * g[i];
      numeric_sq += numeric * numeric;
      out.max_entry_error = std::max(out.max_entry_error, relative_error(g[i], numeric));
      ++out.entries;
    }
    const double err = std::sqrt(diff_sq) / std::max({std::sqrt(analytic_sq), std::sqrt(numeric_sq), 1e-8});
    if (!(err <= out.max_rel_error)) {
      out.max_rel_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
      out.worst = name;
    }
  }
  return out;
}

namespace {

Tensor<double> normal_tensor(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Random [P, w] mask with at least two valid tokens per pair, the rest
// valid with probability 3/4.
std::vector<std::uint8_t> random_pair_mask(std::size_t P, std::size_t w, std::mt19937_64& rng) {
  std::vector<std::uint8_t> mask(P * w, 1);
  std::bernoulli_distribution keep(0.75);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t i = 2; i < w; ++i) mask[p * w + i] = keep(rng) ? 1 : 0;
  }
  return mask;
}

struct PairInstance {
  ParamMap<double> inputs;
  std::vector<std::uint8_t> mask;
  std::size_t samples = 2, heads = 2;

  PairSet<double> pairs(const BoundParams<double>& b) const {
    return PairSet<double>(b["q"], b["k"], mask, samples, heads);
  }
};

PairInstance pair_instance(std::uint64_t seed, const GradcheckOptions& opt, const AlignmentConfig& align) {
  auto rng = make_stream(seed, Stream::data);
  std::uniform_int_distribution<std::size_t> width(2, std::max<std::size_t>(2, opt.max_width));
  PairInstance inst;
  const std::size_t w = width(rng), d = opt.dim, P = inst.samples * inst.heads;
  inst.inputs.emplace("q", normal_tensor(Shape{P, w, d}, rng));
  inst.inputs.emplace("k", normal_tensor(Shape{P, w, d}, rng));
  inst.mask = random_pair_mask(P, w, rng);
  ParamMap<float> nets;
  auto net_rng = make_stream(seed, Stream::align_init);
  init_alignment_params(nets, align, d, net_rng);
  // Nonzero biases so the check does not sit on the zero-bias special case.
  std::normal_distribution<float> bias(0.0f, 0.3f);
  for (auto& [name, t] : nets) {
    if (name.ends_with(".b")) {
      for (auto& v : t.data()) v = bias(net_rng);
    }
  }
  for (auto& [name, t] : cast_params<double>(nets)) inst.inputs.emplace(name, std::move(t));
  return inst;
}

double reversed_sign(const std::string& name) {
  return name.starts_with("align.disc.") || name.starts_with("align.critic.") ? -1.0 : 1.0;
}

template <typename Draw>
GradcheckSuite run_suite(const std::string& name, const GradcheckOptions& opt, Draw draw) {
  GradcheckSuite suite;
  suite.name = name;
  std::uint64_t sub = 0;
  while (suite.instances < opt.seeds) {
    const std::uint64_t seed = opt.base_seed * 1000003ULL + sub++;
    if (sub > opt.seeds * 50) throw NumericError("gradcheck suite " + name + " cannot draw kink-free instances");
    auto outcome = draw(seed);
    if (outcome.rejected) {
      ++suite.redrawn;
      continue;
    }
    ++suite.instances;
    suite.entries += outcome.entries;
    suite.max_entry_error = std::max(suite.max_entry_error, outcome.max_entry_error);
    if (outcome.max_rel_error >= suite.max_rel_error) {
      suite.max_rel_error = outcome.max_rel_error;
      suite.worst = outcome.worst + " seed " + std::to_string(seed);
    }
  }
  suite.passed = suite.max_rel_error < opt.tolerance;
  return suite;
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport report;

  report.suites.push_back(run_suite("attention", opt, [&](std::uint64_t seed) {
    ModelConfig mc;
    mc.vocab_size = 8;
    mc.d_model = opt.dim;
    mc.heads = 2;
    mc.n_layers = 1;
    mc.w_max = opt.max_width;
    mc.d_ff = opt.dim;
    mc.dropout_rate = 0.0f;
    auto rng = make_stream(seed, Stream::data);
    std::uniform_int_distribution<std::size_t> width(2, std::max<std::size_t>(2, opt.max_width));
    std::uniform_int_distribution<std::int32_t> id(1, static_cast<std::int32_t>(mc.vocab_size) - 1);
    Dataset data;
    for (std::size_t b = 0; b < 2; ++b) {
      Example ex;
      ex.tokens.resize(seed % 3 == 0 ? 2 : width(rng));
      for (auto& t : ex.tokens) t = id(rng);
      ex.label = static_cast<std::int32_t>(b);
      data.push_back(std::move(ex));
    }
    std::vector<std::size_t> idx{0, 1};
    auto batch = make_batch(data, idx);
    auto params = cast_params<double>(init_model_params(mc, seed));
    std::normal_distribution<double> jitter(0.0, 0.1);
    for (auto& [name, t] : params) {
      for (auto& v : t.data()) v += jitter(rng);
    }
    return check_gradients(
        params,
        [&](const BoundParams<double>& b) {
          auto fwd = encoder_forward(batch, b, mc, Mode::eval);
          return cross_entropy(fwd.logits, std::span<const std::int32_t>(batch.labels));
        },
        {}, opt);
  }));

  report.suites.push_back(run_suite("adversarial", opt, [&](std::uint64_t seed) {
    AlignmentConfig ac;
    ac.method = AlignMethod::adversarial;
    auto inst = pair_instance(seed, opt, ac);
    return check_gradients(
        inst.inputs,
        [&](const BoundParams<double>& b) {
          return sum(adversarial_alignment_losses(inst.pairs(b), DiscriminatorVars<double>::bind(b)));
        },
        reversed_sign, opt);
  }));

  report.suites.push_back(run_suite("ot", opt, [&](std::uint64_t seed) {
    AlignmentConfig ac;
    ac.method = AlignMethod::ot;
    ac.sinkhorn_max_iters = 2000;
    auto inst = pair_instance(seed, opt, ac);
    OtPlanCache cache;
    auto outcome = check_gradients(
        inst.inputs,
        [&](const BoundParams<double>& b) {
          cache.cursor = 0;
          auto l = sum(ot_alignment_losses(inst.pairs(b), ac, &cache));
          cache.frozen = true;
          return l;
        },
        {}, opt);
    return outcome;
  }));

  report.suites.push_back(run_suite("ct", opt, [&](std::uint64_t seed) {
    AlignmentConfig ac;
    ac.method = AlignMethod::ct;
    auto inst = pair_instance(seed, opt, ac);
    return check_gradients(
        inst.inputs,
        [&](const BoundParams<double>& b) {
          return sum(ct_alignment_losses(inst.pairs(b), NavigatorVars<double>::bind(b), CriticVars<double>::bind(b)));
        },
        reversed_sign, opt);
  }));

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace aatn
