#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "aatn/data.hpp"
#include "aatn/metrics.hpp"
#include "aatn/model.hpp"
#include "aatn/params.hpp"

namespace aatn {

struct TrainConfig {
  float lr = 1e-3f;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  float grad_clip_norm = 1.0f;
  /// Validate every this many steps; 0 validates once per epoch.
  std::size_t eval_every = 0;
  /// Learning rate for the alignment networks; unset shares `lr`.
  std::optional<float> align_lr;
  /// Tokens pooled per (layer, head) for the MMD summary; 0 disables it.
  std::size_t mmd_tokens = kDefaultMmdTokens;
  double mmd_bandwidth = 1.0;

  void validate() const;
};

/// Raised when a step produces a non-finite loss, gradient or parameter.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, std::filesystem::path last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const std::filesystem::path& last_good() const { return last_good_; }

 private:
  std::filesystem::path last_good_;
};

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  float J = 0.0f;
  float task = 0.0f;
  float align = 0.0f;
  double grad_norm = 0.0;
  std::size_t sinkhorn_unconverged = 0;
};

struct TrainState {
  ParamMap<float> params;
  AdamState adam;
  std::mt19937_64 dropout_rng;
  std::size_t step = 0;

  TrainState(ParamMap<float> initial, const ModelConfig& model, const TrainConfig& train);
};

/// Forward, backward, global-norm clipping and one Adam step over every
/// parameter. On a non-finite value the parameters are left as they were
/// before the step and NumericError is thrown.
StepMetrics train_step(const Batch& batch, TrainState& state, const ModelConfig& model, const TrainConfig& train);

struct EvalMetrics {
  double accuracy = 0.0;
  double ece = 0.0;
  std::size_t examples = 0;
};

std::vector<PredictionRecord> predict(const ParamMap<float>& params, const ModelConfig& model, const Dataset& data,
                                      std::size_t batch_size = 32, const std::optional<NoiseSpec>& noise = std::nullopt);

EvalMetrics evaluate(const ParamMap<float>& params, const ModelConfig& model, const Dataset& data,
                     std::size_t batch_size = 32, const std::optional<NoiseSpec>& noise = std::nullopt);

struct EvalRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  EvalMetrics metrics;
  std::optional<MmdReport> mmd;
};

struct RunReport {
  ModelConfig model;
  TrainConfig train;
  std::vector<StepMetrics> steps;
  std::vector<EvalRecord> evals;
  double best_val_accuracy = 0.0;
  std::size_t best_step = 0;
  std::string checkpoint;

  const EvalRecord& final_eval() const { return evals.back(); }
};

struct FitResult {
  RunReport report;
  ParamMap<float> final_params;
  ParamMap<float> best_params;
};

/// Epoch loop with seeded shuffling and periodic validation. The
/// best-validation-accuracy parameters are kept (first best wins on ties)
/// and written to `checkpoint` when a path is given.
FitResult fit(const Dataset& train_set, const Dataset& val_set, const ModelConfig& model, const TrainConfig& train,
              const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

/// Same, continuing from given parameters.
FitResult fit(ParamMap<float> initial, const Dataset& train_set, const Dataset& val_set, const ModelConfig& model,
              const TrainConfig& train, const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

}  // namespace aatn
