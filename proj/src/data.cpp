#include "aatn/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace aatn {

std::mt19937_64 make_stream(std::uint64_t seed, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x41415431u};
  return std::mt19937_64(seq);
}

std::vector<std::string> split_whitespace(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(std::move(w));
  return words;
}

Vocab Vocab::build(std::span<const std::string> texts) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts) {
    for (auto& w : split_whitespace(t)) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> order(counts.begin(), counts.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  std::int32_t next = 2;
  for (const auto& [word, count] : order) v.ids_.emplace(word, next++);
  return v;
}

Vocab Vocab::from_map(std::map<std::string, std::int32_t> ids) {
  Vocab v;
  v.ids_ = std::move(ids);
  return v;
}

std::int32_t Vocab::lookup(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnknownId : it->second;
}

std::size_t Vocab::size() const {
  std::int32_t mx = kUnknownId;
  for (const auto& [w, id] : ids_) mx = std::max(mx, id);
  return static_cast<std::size_t>(mx) + 1;
}

bool has_duplicate(std::span<const std::int32_t> tokens) {
  std::unordered_set<std::int32_t> seen;
  for (auto t : tokens) {
    if (!seen.insert(t).second) return true;
  }
  return false;
}

Dataset gen_pair_matching(std::uint64_t seed, std::size_t n_examples, std::size_t width, std::size_t vocab_size) {
  if (width < 4) throw ConfigError("pair-matching needs sequence width >= 4, got " + std::to_string(width));
  if (vocab_size <= width) {
    throw ConfigError("pair-matching needs vocab_size > width (" + std::to_string(vocab_size) +
                      " <= " + std::to_string(width) + ")");
  }
  auto rng = make_stream(seed, Stream::data);
  std::vector<std::int32_t> labels(n_examples, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_examples / 2), 1);
  std::shuffle(labels.begin(), labels.end(), rng);

  std::vector<std::int32_t> pool(vocab_size - 1);
  std::iota(pool.begin(), pool.end(), 1);
  Dataset data;
  data.reserve(n_examples);
  for (std::size_t n = 0; n < n_examples; ++n) {
    const bool positive = labels[n] == 1;
    const std::size_t distinct = positive ? width - 1 : width;
    // Partial Fisher-Yates: the first `distinct` pool entries become the sample.
    for (std::size_t i = 0; i < distinct; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    std::vector<std::int32_t> tokens(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(distinct));
    if (positive) {
      std::uniform_int_distribution<std::size_t> which(0, distinct - 1);
      std::uniform_int_distribution<std::size_t> where(0, distinct);
      const auto dup = tokens[which(rng)];
      tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(where(rng)), dup);
    }
    data.push_back(Example{std::move(tokens), labels[n], std::nullopt});
  }
  return data;
}

LoadedData load_jsonl(const std::filesystem::path& path, std::size_t w_max, const Vocab* vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path.string());
  struct Raw {
    std::vector<std::int32_t> tokens;
    std::optional<std::string> text;
    std::int32_t label;
  };
  std::vector<Raw> raws;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object() || !j.contains("label")) throw InputError("missing \"label\"");
      Raw r{{}, std::nullopt, j.at("label").get<std::int32_t>()};
      if (j.contains("tokens")) {
        r.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
      } else if (j.contains("text")) {
        r.text = j.at("text").get<std::string>();
      } else {
        throw InputError("needs \"tokens\" or \"text\"");
      }
      if (r.label < 0) throw InputError("negative label");
      raws.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": malformed line: " + e.what());
    }
  }
  if (raws.empty()) throw InputError("dataset is empty: " + path.string());

  LoadedData out;
  if (!vocab) {
    std::vector<std::string> texts;
    for (const auto& r : raws) {
      if (r.text) texts.push_back(*r.text);
    }
    if (!texts.empty()) out.vocab = Vocab::build(texts);
    vocab = out.vocab ? &*out.vocab : nullptr;
  }
  for (auto& r : raws) {
    Example ex{std::move(r.tokens), r.label, r.text};
    if (r.text) {
      for (const auto& w : split_whitespace(*r.text)) ex.tokens.push_back(vocab->lookup(w));
    }
    if (ex.tokens.empty()) throw InputError("example with no tokens in " + path.string());
    if (ex.tokens.size() > w_max) ex.tokens.resize(w_max);
    out.examples.push_back(std::move(ex));
  }
  return out;
}

void save_jsonl(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write dataset: " + path.string());
  for (const auto& ex : data) {
    nlohmann::json j{{"tokens", ex.tokens}, {"label", ex.label}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("failed writing dataset: " + path.string());
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("empty batch");
  Batch b;
  b.size = indices.size();
  for (auto i : indices) b.width = std::max(b.width, data.at(i).tokens.size());
  b.tokens.assign(b.size * b.width, kPadId);
  std::vector<std::uint8_t> valid(b.size * b.width, 0);
  for (std::size_t r = 0; r < b.size; ++r) {
    const auto& ex = data[indices[r]];
    std::copy(ex.tokens.begin(), ex.tokens.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(r * b.width));
    std::fill_n(valid.begin() + static_cast<std::ptrdiff_t>(r * b.width), ex.tokens.size(), 1);
    b.labels.push_back(ex.label);
  }
  b.mask = TokenMask(b.size, b.width, std::move(valid));
  return b;
}

NoiseInjector::NoiseInjector(const NoiseSpec& spec) : spec_(spec), rng_(make_stream(spec.seed, Stream::noise)) {
  if (!(spec.sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
}

template <typename T>
void NoiseInjector::apply(Tensor<T>& embeddings) {
  if (spec_.sigma == 0.0) return;
  std::normal_distribution<double> dist(0.0, spec_.sigma);
  for (auto& v : embeddings.data()) v += static_cast<T>(dist(rng_));
}

template void NoiseInjector::apply(Tensor<float>&);
template void NoiseInjector::apply(Tensor<double>&);

Tensor<float> inject_noise(const Tensor<float>& embeddings, const NoiseSpec& spec) {
  Tensor<float> out = embeddings;
  NoiseInjector(spec).apply(out);
  return out;
}

}  // namespace aatn
