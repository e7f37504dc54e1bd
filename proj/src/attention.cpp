#include "aatn/attention.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

namespace aatn {

TokenMask::TokenMask(std::size_t batch, std::size_t width, std::vector<std::uint8_t> valid)
    : batch_(batch), width_(width), valid_(std::move(valid)) {
  if (valid_.size() != batch_ * width_) {
    throw DimensionError("mask of " + std::to_string(valid_.size()) + " flags for batch " + std::to_string(batch) +
                         " x width " + std::to_string(width));
  }
}

TokenMask TokenMask::all(std::size_t batch, std::size_t width) {
  return TokenMask(batch, width, std::vector<std::uint8_t>(batch * width, 1));
}

std::size_t TokenMask::count(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < width_; ++i) n += valid_[b * width_ + i] != 0;
  return n;
}

template <typename T>
Projections<T> project_qkv(const Var<T>& x, const AttentionLayerParams<T>& params) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("project_qkv expects [B, w, d_model], got " + to_string(s));
  const std::size_t batch = s[0], width = s[1], d_model = s[2];
  const std::size_t heads = params.heads;
  if (heads == 0 || d_model % heads != 0) {
    throw DimensionError("d_model " + std::to_string(d_model) + " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  for (const auto* m : {&params.query, &params.key, &params.value}) {
    if (m->shape() != Shape{d_model, d_model}) {
      throw DimensionError("projection " + to_string(m->shape()) + " does not match input " + to_string(s));
    }
  }
  const std::size_t d = d_model / heads;
  auto split = [&](const Var<T>& m) {
    auto y = reshape(matmul(x, m), Shape{batch, width, heads, d});
    return permute(y, {0, 2, 1, 3});
  };
  return {split(params.query), split(params.key), split(params.value)};
}

template <typename T>
Var<T> attention_weights(const Var<T>& q, const Var<T>& k, const TokenMask& mask) {
  const Shape& s = q.shape();
  if (s.size() != 4 || k.shape() != s) {
    throw DimensionError("attention_weights expects matching [B, H, w, d], got " + to_string(s) + " and " +
                         to_string(k.shape()));
  }
  const std::size_t batch = s[0], width = s[2], d = s[3];
  if (mask.batch() != batch || mask.width() != width) {
    throw DimensionError("mask [" + std::to_string(mask.batch()) + ", " + std::to_string(mask.width()) +
                         "] does not match " + to_string(s));
  }
  Tensor<T> bias(Shape{batch, 1, 1, width});
  for (std::size_t b = 0; b < batch; ++b) {
    if (mask.count(b) == 0) throw ContractError("sample " + std::to_string(b) + " has every key masked");
    for (std::size_t j = 0; j < width; ++j) {
      bias[b * width + j] = mask.valid(b, j) ? T{0} : static_cast<T>(kMaskedLogit);
    }
  }
  auto logits = scale(matmul(q, transpose(k)), T{1} / std::sqrt(static_cast<T>(d)));
  return softmax(add(logits, q.tape().constant(std::move(bias))), -1);
}

template <typename T>
Var<T> merge_heads(const Var<T>& per_head) {
  const Shape& s = per_head.shape();
  if (s.size() != 4) throw DimensionError("merge_heads expects [B, H, w, d], got " + to_string(s));
  return reshape(permute(per_head, {0, 2, 1, 3}), Shape{s[0], s[2], s[1] * s[3]});
}

template <typename T>
Var<T> attend_and_merge(const Var<T>& weights, const Var<T>& v, const Var<T>& output_proj) {
  const Shape& sw = weights.shape();
  const Shape& sv = v.shape();
  if (sw.size() != 4 || sv.size() != 4 || sw[0] != sv[0] || sw[1] != sv[1] || sw[3] != sv[2]) {
    throw DimensionError("attend_and_merge shape mismatch: weights " + to_string(sw) + ", values " + to_string(sv));
  }
  const std::size_t d_model = sv[1] * sv[3];
  if (output_proj.shape() != Shape{d_model, d_model}) {
    throw DimensionError("output projection " + to_string(output_proj.shape()) + " for concatenated width " +
                         std::to_string(d_model));
  }
  return matmul(merge_heads(matmul(weights, v)), output_proj);
}

template <typename T>
PairSet<T>::PairSet(Var<T> queries, Var<T> keys, std::vector<std::uint8_t> mask, std::size_t samples,
                    std::size_t heads)
    : queries_(std::move(queries)), keys_(std::move(keys)), mask_(std::move(mask)), samples_(samples), heads_(heads) {
  const Shape& s = queries_.shape();
  if (s.size() != 3 || keys_.shape() != s || s[0] != samples * heads) {
    throw DimensionError("pair set expects [B*H, w, d] queries and keys, got " + to_string(s) + " and " +
                         to_string(keys_.shape()));
  }
  if (mask_.size() != s[0] * s[1]) throw DimensionError("pair mask size does not match " + to_string(s));
  for (std::size_t p = 0; p < size(); ++p) {
    if (valid_count(p) == 0) throw ContractError("empirical pair " + std::to_string(p) + " has no unmasked token");
  }
}

template <typename T>
PairSet<T> PairSet<T>::from_pair(const EmpiricalPair<T>& pair) {
  const Shape& s = pair.queries.shape();
  if (s.size() != 2) throw DimensionError("empirical pair expects [w, d] point sets, got " + to_string(s));
  Shape stacked{1, s[0], s[1]};
  return PairSet(reshape(pair.queries, stacked), reshape(pair.keys, stacked), pair.mask, 1, 1);
}

template <typename T>
std::size_t PairSet<T>::valid_count(std::size_t p) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < width(); ++i) n += valid(p, i);
  return n;
}

template <typename T>
EmpiricalPair<T> PairSet<T>::pair(std::size_t p) const {
  const std::size_t w = width();
  return EmpiricalPair<T>{select(queries_, p), select(keys_, p),
                          std::vector<std::uint8_t>(mask_.begin() + p * w, mask_.begin() + (p + 1) * w),
                          p / heads_, p % heads_};
}

template <typename T>
PairSet<T> empirical_pairs(const Var<T>& q, const Var<T>& k, const TokenMask& mask) {
  const Shape& s = q.shape();
  if (s.size() != 4 || k.shape() != s) {
    throw DimensionError("empirical_pairs expects matching [B, H, w, d], got " + to_string(s) + " and " +
                         to_string(k.shape()));
  }
  const std::size_t batch = s[0], heads = s[1], width = s[2], d = s[3];
  if (mask.batch() != batch || mask.width() != width) throw DimensionError("mask does not match " + to_string(s));
  std::vector<std::uint8_t> flags(batch * heads * width);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < width; ++i) flags[(b * heads + h) * width + i] = mask.valid(b, i);
    }
  }
  const Shape stacked{batch * heads, width, d};
  return PairSet<T>(reshape(q, stacked), reshape(k, stacked), std::move(flags), batch, heads);
}

void write_attention_csv(const std::filesystem::path& path, const std::vector<double>& grid, std::size_t width,
                         const std::vector<std::string>& tokens) {
  if (grid.size() != width * width || tokens.size() != width) {
    throw DimensionError("attention grid does not match width " + std::to_string(width));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t j = 0; j < width; ++j) out << (j ? "," : "") << tokens[j];
  out << '\n' << std::setprecision(9);
  for (std::size_t i = 0; i < width; ++i) {
    for (std::size_t j = 0; j < width; ++j) out << (j ? "," : "") << grid[i * width + j];
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

#define AATN_INSTANTIATE_ATTENTION(T)                                                        \
  template Projections<T> project_qkv(const Var<T>&, const AttentionLayerParams<T>&);        \
  template Var<T> attention_weights(const Var<T>&, const Var<T>&, const TokenMask&);         \
  template Var<T> merge_heads(const Var<T>&);                                                \
  template Var<T> attend_and_merge(const Var<T>&, const Var<T>&, const Var<T>&);             \
  template class PairSet<T>;                                                                 \
  template PairSet<T> empirical_pairs(const Var<T>&, const Var<T>&, const TokenMask&);

AATN_INSTANTIATE_ATTENTION(float)
AATN_INSTANTIATE_ATTENTION(double)

}  // namespace aatn
