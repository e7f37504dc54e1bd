#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "aatn/alignment.hpp"
#include "aatn/attention.hpp"
#include "aatn/autodiff.hpp"
#include "aatn/data.hpp"
#include "aatn/params.hpp"

namespace aatn {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t n_layers = 2;
  std::size_t w_max = 16;
  std::size_t n_classes = 2;
  std::size_t d_ff = 128;
  float dropout_rate = 0.1f;
  AlignmentConfig align;
  /// Layers whose query/key pairs feed the alignment loss; empty = all.
  std::vector<std::size_t> aligned_layers;

  void validate() const;
  std::size_t head_dim() const { return d_model / heads; }
  bool is_aligned(std::size_t layer) const;
};

/// Task parameters from the init stream, alignment networks from their own.
ParamMap<float> init_model_params(const ModelConfig& config, std::uint64_t seed);

/// Fixed sinusoidal position table [width, d_model].
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t width, std::size_t d_model);

enum class Mode { train, eval };

template <typename T>
struct ForwardResult {
  Var<T> logits;                  // [B, n_classes]
  std::vector<PairSet<T>> pairs;  // one entry per aligned layer
  std::vector<Var<T>> attention;  // per layer [B, H, w, w]
  std::vector<Var<T>> queries;    // per layer [B, H, w, d]
  std::vector<Var<T>> keys;       // per layer [B, H, w, d]
};

/// Embedding + positions, then per layer a pre-norm self-attention block and
/// a pre-norm feed-forward block (each residual), then masked mean-pooling
/// and a linear classifier. Dropout needs `dropout_rng` in train mode;
/// `noise` is honored in eval mode only.
template <typename T>
ForwardResult<T> encoder_forward(const Batch& batch, const BoundParams<T>& params, const ModelConfig& config, Mode mode,
                                 std::mt19937_64* dropout_rng = nullptr, NoiseInjector* noise = nullptr);

template <typename T>
struct LossParts {
  Var<T> total;  // J = task + lambda * align
  T task = T{0};
  T align = T{0};
};

/// Mean cross-entropy plus lambda times the alignment loss.
template <typename T>
LossParts<T> total_loss(const Var<T>& logits, std::span<const std::int32_t> labels, const AlignmentLoss<T>& align,
                        float lambda);

}  // namespace aatn
