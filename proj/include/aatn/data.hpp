#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aatn/attention.hpp"
#include "aatn/tensor.hpp"

namespace aatn {

/// Independent RNG streams derived from one seed, so e.g. alignment-network
/// initialization never shifts the draws used for the task model.
enum class Stream : std::uint64_t { shuffle = 1, init = 2, dropout = 3, align_init = 4, noise = 5, data = 6 };

std::mt19937_64 make_stream(std::uint64_t seed, Stream stream);

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnknownId = 1;

struct Example {
  std::vector<std::int32_t> tokens;
  std::int32_t label = 0;
  std::optional<std::string> text;

  friend bool operator==(const Example&, const Example&) = default;
};

using Dataset = std::vector<Example>;

/// Whitespace-token vocabulary; ids 0 (pad) and 1 (unknown) are reserved.
class Vocab {
 public:
  /// Ids assigned by descending frequency, ties broken alphabetically.
  static Vocab build(std::span<const std::string> texts);
  static Vocab from_map(std::map<std::string, std::int32_t> ids);

  std::int32_t lookup(const std::string& word) const;
  std::size_t size() const;
  const std::map<std::string, std::int32_t>& ids() const { return ids_; }

 private:
  std::map<std::string, std::int32_t> ids_;
};

std::vector<std::string> split_whitespace(const std::string& text);

/// Balanced duplicate-detection task: label 1 iff some id occurs twice.
/// Positives carry exactly one planted duplicate; negatives are all
/// distinct. Ids are drawn from [1, vocab_size).
Dataset gen_pair_matching(std::uint64_t seed, std::size_t n_examples, std::size_t width, std::size_t vocab_size);

/// True iff some token id occurs at least twice.
bool has_duplicate(std::span<const std::int32_t> tokens);

/// One JSON object per line: {"tokens": [...]} or {"text": "..."}, plus
/// {"label": int}. Text is tokenized with `vocab` or, when absent, a
/// vocabulary built from the file. Sequences are truncated to `w_max`.
struct LoadedData {
  Dataset examples;
  std::optional<Vocab> vocab;
};
LoadedData load_jsonl(const std::filesystem::path& path, std::size_t w_max, const Vocab* vocab = nullptr);
void save_jsonl(const std::filesystem::path& path, const Dataset& data);

/// Padded mini-batch; padding positions are masked out.
struct Batch {
  std::size_t size = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> tokens;  // [size, width]
  std::vector<std::int32_t> labels;  // [size]
  TokenMask mask;
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

/// Gaussian noise added to token embeddings at evaluation time.
struct NoiseSpec {
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

/// Stateful noise source; successive calls continue one seeded stream.
class NoiseInjector {
 public:
  explicit NoiseInjector(const NoiseSpec& spec);
  double sigma() const { return spec_.sigma; }

  template <typename T>
  void apply(Tensor<T>& embeddings);

 private:
  NoiseSpec spec_;
  std::mt19937_64 rng_;
};

/// Embeddings plus i.i.d. N(0, sigma^2) draws; sigma = 0 is the identity.
Tensor<float> inject_noise(const Tensor<float>& embeddings, const NoiseSpec& spec);

}  // namespace aatn
