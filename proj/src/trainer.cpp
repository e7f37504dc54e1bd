#include "aatn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace aatn {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0f)) throw ConfigError("lr must be > 0");
  if (align_lr && !(*align_lr > 0.0f)) throw ConfigError("align_lr must be > 0");
  if (!(grad_clip_norm >= 0.0f)) throw ConfigError("grad_clip_norm must be >= 0");
  if (!(mmd_bandwidth > 0.0)) throw ConfigError("mmd_bandwidth must be > 0");
}

TrainState::TrainState(ParamMap<float> initial, const ModelConfig& model, const TrainConfig& train)
    : params(std::move(initial)), dropout_rng(make_stream(train.seed, Stream::dropout)) {
  model.validate();
  train.validate();
  adam.config.lr = train.lr;
  if (train.align_lr) adam.lr_overrides["align."] = *train.align_lr;
}

namespace {

bool params_finite(const ParamMap<float>& params, std::string* bad) {
  for (const auto& [name, t] : params) {
    if (!t.all_finite()) {
      if (bad) *bad = name;
      return false;
    }
  }
  return true;
}

}  // namespace

StepMetrics train_step(const Batch& batch, TrainState& state, const ModelConfig& model, const TrainConfig& train) {
  if (batch.size == 0) throw ContractError("train_step on an empty batch");
  StepMetrics m;
  m.step = state.step;

  Tape<float> tape;
  BoundParams<float> bound(tape, state.params, true);
  auto fwd = encoder_forward(batch, bound, model, Mode::train, &state.dropout_rng);
  auto align = batch_alignment_loss(std::span<const PairSet<float>>(fwd.pairs), model.align, bound);
  auto parts = total_loss(fwd.logits, std::span<const std::int32_t>(batch.labels), align, model.align.lambda);
  m.J = parts.total.value().item();
  m.task = parts.task;
  m.align = parts.align;
  m.sinkhorn_unconverged = align.sinkhorn_unconverged;
  if (!std::isfinite(m.J)) {
    throw NumericError("non-finite loss at step " + std::to_string(state.step) + " (task " + std::to_string(m.task) +
                       ", align " + std::to_string(m.align) + ")");
  }

  tape.backward(parts.total);
  auto grads = bound.grads();
  m.grad_norm = global_norm(grads);
  if (!std::isfinite(m.grad_norm)) {
    throw NumericError("non-finite gradient norm at step " + std::to_string(state.step));
  }
  if (train.grad_clip_norm > 0.0f) clip_global_norm(grads, train.grad_clip_norm);

  auto before = state.params;
  auto moments = std::make_pair(state.adam.first_moment, state.adam.second_moment);
  const auto count = state.adam.step_count;
  adam_step(state.params, grads, state.adam);
  std::string bad;
  if (!params_finite(state.params, &bad)) {
    state.params = std::move(before);
    state.adam.first_moment = std::move(moments.first);
    state.adam.second_moment = std::move(moments.second);
    state.adam.step_count = count;
    throw NumericError("parameter " + bad + " became non-finite at step " + std::to_string(state.step));
  }
  ++state.step;
  return m;
}

std::vector<PredictionRecord> predict(const ParamMap<float>& params, const ModelConfig& model, const Dataset& data,
                                      std::size_t batch_size, const std::optional<NoiseSpec>& noise) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::optional<NoiseInjector> injector;
  if (noise) injector.emplace(*noise);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<PredictionRecord> records;
  records.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    auto batch = make_batch(data, std::span<const std::size_t>(order).subspan(start, end - start));
    Tape<float> tape;
    BoundParams<float> bound(tape, params, false);
    auto fwd = encoder_forward(batch, bound, model, Mode::eval, nullptr, injector ? &*injector : nullptr);
    const auto& logits = fwd.logits.value();
    const std::size_t C = logits.dim(1);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const float* row = logits.data().data() + b * C;
      const auto best = static_cast<std::size_t>(std::max_element(row, row + C) - row);
      double denom = 0.0;
      for (std::size_t c = 0; c < C; ++c) denom += std::exp(static_cast<double>(row[c]) - row[best]);
      records.push_back({1.0 / denom, static_cast<std::int32_t>(best), batch.labels[b]});
    }
  }
  return records;
}

EvalMetrics evaluate(const ParamMap<float>& params, const ModelConfig& model, const Dataset& data,
                     std::size_t batch_size, const std::optional<NoiseSpec>& noise) {
  auto records = predict(params, model, data, batch_size, noise);
  return {accuracy(records), ece(records), records.size()};
}

FitResult fit(const Dataset& train_set, const Dataset& val_set, const ModelConfig& model, const TrainConfig& train,
              const std::optional<std::filesystem::path>& checkpoint) {
  return fit(init_model_params(model, train.seed), train_set, val_set, model, train, checkpoint);
}

FitResult fit(ParamMap<float> initial, const Dataset& train_set, const Dataset& val_set, const ModelConfig& model,
              const TrainConfig& train, const std::optional<std::filesystem::path>& checkpoint) {
  if (train_set.empty() || val_set.empty()) throw ContractError("fit needs non-empty train and validation sets");
  TrainState state(std::move(initial), model, train);
  FitResult out;
  out.report.model = model;
  out.report.train = train;
  if (checkpoint) out.report.checkpoint = checkpoint->string();

  bool have_best = false;
  auto validate = [&](std::size_t epoch) {
    EvalRecord rec;
    rec.step = state.step;
    rec.epoch = epoch;
    rec.metrics = evaluate(state.params, model, val_set, train.batch_size);
    if (train.mmd_tokens > 0 && model.n_layers > 0) {
      rec.mmd = qk_mmd_report(state.params, model, val_set, train.mmd_tokens, train.mmd_bandwidth, train.batch_size);
    }
    if (!have_best || rec.metrics.accuracy > out.report.best_val_accuracy) {
      have_best = true;
      out.report.best_val_accuracy = rec.metrics.accuracy;
      out.report.best_step = state.step;
      out.best_params = state.params;
      if (checkpoint) save_checkpoint(*checkpoint, state.params);
    }
    out.report.evals.push_back(std::move(rec));
  };

  validate(0);
  auto shuffle_rng = make_stream(train.seed, Stream::shuffle);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += train.batch_size) {
      const std::size_t end = std::min(order.size(), start + train.batch_size);
      auto batch = make_batch(train_set, std::span<const std::size_t>(order).subspan(start, end - start));
      StepMetrics m;
      try {
        m = train_step(batch, state, model, train);
      } catch (const NumericError& e) {
        std::filesystem::path last_good;
        if (checkpoint) {
          last_good = checkpoint->parent_path() / "last_good.aatn";
          save_checkpoint(last_good, state.params);
        }
        throw TrainingAborted(std::string(e.what()) +
                                  (last_good.empty() ? "" : "; last good parameters saved to " + last_good.string()),
                              last_good);
      }
      m.epoch = epoch;
      out.report.steps.push_back(m);
      if (train.eval_every > 0 && state.step % train.eval_every == 0) validate(epoch);
    }
    if (train.eval_every == 0) validate(epoch);
  }
  out.final_params = std::move(state.params);
  return out;
}

}  // namespace aatn
