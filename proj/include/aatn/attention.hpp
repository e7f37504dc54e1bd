#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aatn/autodiff.hpp"

namespace aatn {

/// Per-sample token validity, row-major [batch, width]; 1 = real token.
class TokenMask {
 public:
  TokenMask() = default;
  TokenMask(std::size_t batch, std::size_t width, std::vector<std::uint8_t> valid);
  static TokenMask all(std::size_t batch, std::size_t width);

  std::size_t batch() const { return batch_; }
  std::size_t width() const { return width_; }
  bool valid(std::size_t b, std::size_t i) const { return valid_[b * width_ + i] != 0; }
  std::size_t count(std::size_t b) const;
  const std::vector<std::uint8_t>& flags() const { return valid_; }

 private:
  std::size_t batch_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> valid_;
};

/// Projection matrices of one attention layer, each d_model x d_model; head h
/// owns columns [h*d, (h+1)*d) of the Q/K/V projections.
template <typename T>
struct AttentionLayerParams {
  Var<T> query;
  Var<T> key;
  Var<T> value;
  Var<T> output;
  std::size_t heads = 1;
};

template <typename T>
struct Projections {
  Var<T> q, k, v;  // [B, H, w, d]
};

template <typename T>
Projections<T> project_qkv(const Var<T>& x, const AttentionLayerParams<T>& params);

/// softmax(Q K^T / sqrt(d)) with masked keys pushed to a large negative logit.
template <typename T>
Var<T> attention_weights(const Var<T>& q, const Var<T>& k, const TokenMask& mask);

/// Per-head W V, heads concatenated on the feature axis, then the output
/// projection. Returns [B, w, d_model].
template <typename T>
Var<T> attend_and_merge(const Var<T>& weights, const Var<T>& v, const Var<T>& output_proj);

/// Heads concatenated on the feature axis without the output projection.
template <typename T>
Var<T> merge_heads(const Var<T>& per_head);

/// Matched query/key point sets of one (sample, head).
template <typename T>
struct EmpiricalPair {
  Var<T> queries;  // [w, d]
  Var<T> keys;     // [w, d]
  std::vector<std::uint8_t> mask;
  std::size_t sample_index = 0;
  std::size_t head_index = 0;
};

/// All B*H empirical pairs of one layer stored as stacked [B*H, w, d]
/// tensors; pair p belongs to sample p / H and head p % H.
template <typename T>
class PairSet {
 public:
  PairSet(Var<T> queries, Var<T> keys, std::vector<std::uint8_t> mask, std::size_t samples, std::size_t heads);
  static PairSet from_pair(const EmpiricalPair<T>& pair);

  std::size_t size() const { return samples_ * heads_; }
  std::size_t samples() const { return samples_; }
  std::size_t heads() const { return heads_; }
  std::size_t width() const { return queries_.dim(1); }
  std::size_t dim() const { return queries_.dim(2); }

  const Var<T>& queries() const { return queries_; }
  const Var<T>& keys() const { return keys_; }
  /// Row-major [P, w] validity flags.
  const std::vector<std::uint8_t>& mask() const { return mask_; }
  bool valid(std::size_t p, std::size_t i) const { return mask_[p * width() + i] != 0; }
  std::size_t valid_count(std::size_t p) const;

  EmpiricalPair<T> pair(std::size_t p) const;

 private:
  Var<T> queries_, keys_;
  std::vector<std::uint8_t> mask_;
  std::size_t samples_, heads_;
};

template <typename T>
PairSet<T> empirical_pairs(const Var<T>& q, const Var<T>& k, const TokenMask& mask);

/// w x w attention grid with a header row of key token strings; row i is query i.
void write_attention_csv(const std::filesystem::path& path, const std::vector<double>& grid, std::size_t width,
                         const std::vector<std::string>& tokens);

}  // namespace aatn
