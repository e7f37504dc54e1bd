#include "aatn/model.hpp"

#include <algorithm>
#include <cmath>

namespace aatn {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (heads == 0 || d_model == 0 || d_model % heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if (w_max < 1) throw ConfigError("w_max must be >= 1");
  if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (d_ff < 1) throw ConfigError("d_ff must be >= 1");
  if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f)) throw ConfigError("dropout_rate must be in [0, 1)");
  for (auto l : aligned_layers) {
    if (l >= n_layers) throw ConfigError("aligned layer " + std::to_string(l) + " does not exist");
  }
  align.validate();
}

bool ModelConfig::is_aligned(std::size_t layer) const {
  return aligned_layers.empty() || std::find(aligned_layers.begin(), aligned_layers.end(), layer) != aligned_layers.end();
}

namespace {

std::string layer_name(std::size_t l, const char* part) { return "layer" + std::to_string(l) + "." + part; }

template <typename T>
Var<T> dropout(const Var<T>& x, float rate, std::mt19937_64& rng) {
  Tensor<T> keep(x.shape());
  std::bernoulli_distribution draw(1.0 - rate);
  const T scale_kept = T{1} / (T{1} - static_cast<T>(rate));
  for (auto& v : keep.data()) v = draw(rng) ? scale_kept : T{0};
  return mul(x, x.tape().constant(std::move(keep)));
}

}  // namespace

ParamMap<float> init_model_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  auto rng = make_stream(seed, Stream::init);
  const std::size_t dm = config.d_model;
  ParamMap<float> p;
  p.emplace("embed.token", glorot_uniform(config.vocab_size, dm, rng));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (const char* m : {"attn.query", "attn.key", "attn.value", "attn.output"}) {
      p.emplace(layer_name(l, m), glorot_uniform(dm, dm, rng));
    }
    p.emplace(layer_name(l, "ln1.gain"), Tensor<float>(Shape{dm}, 1.0f));
    p.emplace(layer_name(l, "ln1.bias"), Tensor<float>(Shape{dm}, 0.0f));
    p.emplace(layer_name(l, "ln2.gain"), Tensor<float>(Shape{dm}, 1.0f));
    p.emplace(layer_name(l, "ln2.bias"), Tensor<float>(Shape{dm}, 0.0f));
    p.emplace(layer_name(l, "ff1.w"), glorot_uniform(dm, config.d_ff, rng));
    p.emplace(layer_name(l, "ff1.b"), Tensor<float>(Shape{config.d_ff}, 0.0f));
    p.emplace(layer_name(l, "ff2.w"), glorot_uniform(config.d_ff, dm, rng));
    p.emplace(layer_name(l, "ff2.b"), Tensor<float>(Shape{dm}, 0.0f));
  }
  p.emplace("head.w", glorot_uniform(dm, config.n_classes, rng));
  p.emplace("head.b", Tensor<float>(Shape{config.n_classes}, 0.0f));

  auto align_rng = make_stream(seed, Stream::align_init);
  init_alignment_params(p, config.align, config.head_dim(), align_rng);
  return p;
}

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t width, std::size_t d_model) {
  Tensor<T> pos(Shape{width, d_model});
  for (std::size_t i = 0; i < width; ++i) {
    for (std::size_t k = 0; k < d_model; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(k - k % 2) / static_cast<double>(d_model));
      const double angle = static_cast<double>(i) * freq;
      pos[i * d_model + k] = static_cast<T>(k % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pos;
}

template <typename T>
ForwardResult<T> encoder_forward(const Batch& batch, const BoundParams<T>& params, const ModelConfig& config, Mode mode,
                                 std::mt19937_64* dropout_rng, NoiseInjector* noise) {
  if (batch.width > config.w_max) {
    throw InputError("sequence width " + std::to_string(batch.width) + " exceeds w_max " +
                     std::to_string(config.w_max));
  }
  auto& tape = params.tape();
  const bool drop = mode == Mode::train && config.dropout_rate > 0.0f;
  if (drop && !dropout_rng) throw ContractError("train-mode dropout needs an RNG stream");
  if (noise && mode != Mode::eval) throw ContractError("noise injection is evaluation-only");
  const std::size_t B = batch.size, w = batch.width, dm = config.d_model;

  ForwardResult<T> out;
  auto x = scale(embedding(params["embed.token"], std::span<const std::int32_t>(batch.tokens), Shape{B, w}),
                 static_cast<T>(std::sqrt(static_cast<double>(dm))));
  if (noise && noise->sigma() > 0.0) {
    Tensor<T> eps(x.shape());
    noise->apply(eps);
    x = add(x, tape.constant(std::move(eps)));
  }
  x = add(x, tape.constant(sinusoidal_positions<T>(w, dm)));

  for (std::size_t l = 0; l < config.n_layers; ++l) {
    auto h = layer_norm(x, params[layer_name(l, "ln1.gain")], params[layer_name(l, "ln1.bias")]);
    AttentionLayerParams<T> ap{params[layer_name(l, "attn.query")], params[layer_name(l, "attn.key")],
                               params[layer_name(l, "attn.value")], params[layer_name(l, "attn.output")],
                               config.heads};
    auto proj = project_qkv(h, ap);
    auto weights = attention_weights(proj.q, proj.k, batch.mask);
    out.attention.push_back(weights);
    out.queries.push_back(proj.q);
    out.keys.push_back(proj.k);
    if (config.is_aligned(l)) out.pairs.push_back(empirical_pairs(proj.q, proj.k, batch.mask));
    if (drop) weights = dropout(weights, config.dropout_rate, *dropout_rng);
    x = add(x, attend_and_merge(weights, proj.v, ap.output));

    auto h2 = layer_norm(x, params[layer_name(l, "ln2.gain")], params[layer_name(l, "ln2.bias")]);
    auto f = apply_unary(UnaryKind::relu, linear(h2, params[layer_name(l, "ff1.w")], params[layer_name(l, "ff1.b")]));
    if (drop) f = dropout(f, config.dropout_rate, *dropout_rng);
    x = add(x, linear(f, params[layer_name(l, "ff2.w")], params[layer_name(l, "ff2.b")]));
  }

  Tensor<T> pool(Shape{B, 1, w});
  for (std::size_t b = 0; b < B; ++b) {
    const T inv = T{1} / static_cast<T>(batch.mask.count(b));
    for (std::size_t i = 0; i < w; ++i) pool[b * w + i] = batch.mask.valid(b, i) ? inv : T{0};
  }
  auto pooled = reshape(matmul(tape.constant(std::move(pool)), x), Shape{B, dm});
  out.logits = linear(pooled, params["head.w"], params["head.b"]);
  return out;
}

template <typename T>
LossParts<T> total_loss(const Var<T>& logits, std::span<const std::int32_t> labels, const AlignmentLoss<T>& align,
                        float lambda) {
  LossParts<T> parts;
  auto task = cross_entropy(logits, labels);
  parts.task = task.value().item();
  if (align.loss) {
    parts.align = align.value;
    parts.total = add(task, scale(*align.loss, static_cast<T>(lambda)));
  } else {
    parts.total = task;
  }
  return parts;
}

#define AATN_INSTANTIATE_MODEL(T)                                                                              \
  template Tensor<T> sinusoidal_positions(std::size_t, std::size_t);                                           \
  template ForwardResult<T> encoder_forward(const Batch&, const BoundParams<T>&, const ModelConfig&, Mode,      \
                                            std::mt19937_64*, NoiseInjector*);                                 \
  template LossParts<T> total_loss(const Var<T>&, std::span<const std::int32_t>, const AlignmentLoss<T>&, float);

AATN_INSTANTIATE_MODEL(float)
AATN_INSTANTIATE_MODEL(double)

}  // namespace aatn
