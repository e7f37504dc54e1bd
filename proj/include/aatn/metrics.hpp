#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "aatn/data.hpp"
#include "aatn/model.hpp"

namespace aatn {

struct PredictionRecord {
  double confidence = 1.0;  // max softmax probability
  std::int32_t predicted_class = 0;
  std::int32_t true_class = 0;
};

/// Fraction of records whose prediction is correct. Throws on empty input.
double accuracy(std::span<const PredictionRecord> records);

/// Expected calibration error over equal-width, right-inclusive bins of (0, 1].
double ece(std::span<const PredictionRecord> records, std::size_t n_bins = 10);

/// Biased (V-statistic) Gaussian-kernel MMD^2 between row sets X [m, d] and
/// Y [n, d] given as row-major buffers; floored at 0.
double mmd_gaussian(std::span<const double> x, std::size_t m, std::span<const double> y, std::size_t n, std::size_t d,
                    double bandwidth = 1.0);

struct MmdReport {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<double> values;  // [layer * heads + head]
  double total = 0.0;
  std::size_t tokens = 0;  // pooled tokens per (layer, head)

  double at(std::size_t layer, std::size_t head) const { return values[layer * heads + head]; }
};

inline constexpr std::size_t kDefaultMmdTokens = 512;

/// Eval-mode forwards over `data` in order, pooling up to `max_tokens`
/// unmasked query and key vectors per (layer, head), then one MMD per cell.
MmdReport qk_mmd_report(const ParamMap<float>& params, const ModelConfig& config, const Dataset& data,
                        std::size_t max_tokens = kDefaultMmdTokens, double bandwidth = 1.0,
                        std::size_t batch_size = 32);

/// Writes attention_s<b>_l<l>_h<h>.csv for every sample, layer and head of
/// the batch, plus queries.csv and keys.csv point clouds with columns
/// layer, head, token_index (flat batch position), f0..f<d-1>.
/// `token_text` renders a token id for the heatmap header row.
void export_diagnostics(const ParamMap<float>& params, const ModelConfig& config, const Batch& batch,
                        const std::filesystem::path& out_dir,
                        const std::function<std::string(std::int32_t)>& token_text = {});

}  // namespace aatn
