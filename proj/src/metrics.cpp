#include "aatn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace aatn {

double accuracy(std::span<const PredictionRecord> records) {
  if (records.empty()) throw ContractError("accuracy of an empty record set");
  std::size_t correct = 0;
  for (const auto& r : records) correct += r.predicted_class == r.true_class;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

double ece(std::span<const PredictionRecord> records, std::size_t n_bins) {
  if (records.empty() || n_bins == 0) return 0.0;
  std::vector<double> conf(n_bins, 0.0), hits(n_bins, 0.0), count(n_bins, 0.0);
  for (const auto& r : records) {
    if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) {
      throw NumericError("confidence " + std::to_string(r.confidence) + " outside [0, 1]");
    }
    // Bin k covers (k/n, (k+1)/n]; the small offset keeps exact edges such
    // as 0.3 in the lower bin despite rounding in conf * n.
    const double scaled = std::ceil(r.confidence * static_cast<double>(n_bins) - 1e-9);
    const auto k = static_cast<std::size_t>(std::clamp(scaled - 1.0, 0.0, static_cast<double>(n_bins - 1)));
    conf[k] += r.confidence;
    hits[k] += r.predicted_class == r.true_class ? 1.0 : 0.0;
    count[k] += 1.0;
  }
  const auto n = static_cast<double>(records.size());
  double total = 0.0;
  for (std::size_t k = 0; k < n_bins; ++k) {
    if (count[k] == 0.0) continue;
    total += (count[k] / n) * std::abs(hits[k] / count[k] - conf[k] / count[k]);
  }
  return total;
}

double mmd_gaussian(std::span<const double> x, std::size_t m, std::span<const double> y, std::size_t n, std::size_t d,
                    double bandwidth) {
  if (m == 0 || n == 0) throw ContractError("mmd_gaussian needs non-empty samples");
  if (x.size() != m * d || y.size() != n * d) throw DimensionError("mmd_gaussian buffers do not match sizes");
  if (!(bandwidth > 0.0)) throw ConfigError("mmd bandwidth must be > 0");
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  auto kernel = [&](const double* p, const double* q) {
    double dist = 0.0;
    for (std::size_t k = 0; k < d; ++k) dist += (p[k] - q[k]) * (p[k] - q[k]);
    return std::exp(-dist * inv);
  };
  // Within one sample: diagonal terms are exactly 1, off-diagonal ones are
  // counted twice.
  auto self_mean = [&](std::span<const double> a, std::size_t na) {
    double off = 0.0;
    for (std::size_t i = 0; i < na; ++i) {
      for (std::size_t j = i + 1; j < na; ++j) off += kernel(&a[i * d], &a[j * d]);
    }
    return (static_cast<double>(na) + 2.0 * off) / (static_cast<double>(na) * static_cast<double>(na));
  };
  // Across samples, with rows and columns summed separately and averaged so
  // swapping X and Y gives the same value bit for bit.
  auto cross_mean = [&]() {
    std::vector<double> col(n, 0.0);
    double by_rows = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double k = kernel(&x[i * d], &y[j * d]);
        row += k;
        col[j] += k;
      }
      by_rows += row;
    }
    const double by_cols = std::accumulate(col.begin(), col.end(), 0.0);
    return 0.5 * (by_rows + by_cols) / (static_cast<double>(m) * static_cast<double>(n));
  };
  const double kxx = self_mean(x, m);
  const double kyy = self_mean(y, n);
  const double kxy = cross_mean();
  return std::max(0.0, kxx + kyy - 2.0 * kxy);
}

namespace {

// Appends the unmasked rows of one (layer, head) slice to `pool`, stopping
// at `limit` rows.
void collect_points(const Tensor<float>& qk, const TokenMask& mask, std::size_t head, std::size_t limit,
                    std::vector<double>& pool) {
  const std::size_t B = qk.dim(0), H = qk.dim(1), w = qk.dim(2), d = qk.dim(3);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < w; ++i) {
      if (!mask.valid(b, i) || pool.size() / d >= limit) continue;
      const float* row = qk.data().data() + ((b * H + head) * w + i) * d;
      pool.insert(pool.end(), row, row + d);
    }
  }
}

}  // namespace

MmdReport qk_mmd_report(const ParamMap<float>& params, const ModelConfig& config, const Dataset& data,
                        std::size_t max_tokens, double bandwidth, std::size_t batch_size) {
  if (data.empty()) throw ContractError("qk_mmd_report needs at least one example");
  const std::size_t L = config.n_layers, H = config.heads, d = config.head_dim();
  MmdReport rep;
  rep.layers = L;
  rep.heads = H;
  rep.values.assign(L * H, 0.0);
  if (L == 0) return rep;
  std::vector<std::vector<double>> qpool(L * H), kpool(L * H);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    if (qpool[0].size() / d >= max_tokens) break;
    const std::size_t end = std::min(data.size(), start + batch_size);
    auto batch = make_batch(data, std::span<const std::size_t>(order).subspan(start, end - start));
    Tape<float> tape;
    BoundParams<float> bound(tape, params, false);
    auto fwd = encoder_forward(batch, bound, config, Mode::eval);
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        collect_points(fwd.queries[l].value(), batch.mask, h, max_tokens, qpool[l * H + h]);
        collect_points(fwd.keys[l].value(), batch.mask, h, max_tokens, kpool[l * H + h]);
      }
    }
  }
  rep.tokens = qpool[0].size() / d;
  for (std::size_t c = 0; c < L * H; ++c) {
    rep.values[c] = mmd_gaussian(qpool[c], qpool[c].size() / d, kpool[c], kpool[c].size() / d, d, bandwidth);
  }
  rep.total = std::accumulate(rep.values.begin(), rep.values.end(), 0.0);
  return rep;
}

void export_diagnostics(const ParamMap<float>& params, const ModelConfig& config, const Batch& batch,
                        const std::filesystem::path& out_dir,
                        const std::function<std::string(std::int32_t)>& token_text) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  Tape<float> tape;
  BoundParams<float> bound(tape, params, false);
  auto fwd = encoder_forward(batch, bound, config, Mode::eval);
  const std::size_t B = batch.size, H = config.heads, w = batch.width, d = config.head_dim();
  auto text = [&](std::int32_t id) { return token_text ? token_text(id) : std::to_string(id); };

  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto& att = fwd.attention[l].value();
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<std::string> tokens;
      for (std::size_t i = 0; i < w; ++i) tokens.push_back(text(batch.tokens[b * w + i]));
      for (std::size_t h = 0; h < H; ++h) {
        const float* src = att.data().data() + (b * H + h) * w * w;
        std::vector<double> grid(src, src + w * w);
        write_attention_csv(out_dir / ("attention_s" + std::to_string(b) + "_l" + std::to_string(l) + "_h" +
                                       std::to_string(h) + ".csv"),
                            grid, w, tokens);
      }
    }
  }

  auto write_cloud = [&](const std::filesystem::path& path, const std::vector<Var<float>>& per_layer) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "layer,head,token_index";
    for (std::size_t k = 0; k < d; ++k) out << ",f" << k;
    out << '\n' << std::setprecision(9);
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
      const auto& t = per_layer[l].value();
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t i = 0; i < w; ++i) {
            if (!batch.mask.valid(b, i)) continue;
            out << l << ',' << h << ',' << b * w + i;
            const float* row = t.data().data() + ((b * H + h) * w + i) * d;
            for (std::size_t k = 0; k < d; ++k) out << ',' << row[k];
            out << '\n';
          }
        }
      }
    }
    if (!out) throw IoError("failed writing " + path.string());
  };
  write_cloud(out_dir / "queries.csv", fwd.queries);
  write_cloud(out_dir / "keys.csv", fwd.keys);
}

}  // namespace aatn
