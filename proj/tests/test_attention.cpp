#include <cmath>
#include <fstream>
#include <numeric>

#include "aatn/alignment.hpp"
#include "aatn/attention.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace aatn;
using namespace aatn::test;

namespace {

struct Layer {
  ParamMap<double> params;
  std::size_t heads;

  AttentionLayerParams<double> bind(const BoundParams<double>& b) const {
    return {b["query"], b["key"], b["value"], b["output"], heads};
  }
};

Layer random_layer(Rng& rng, std::size_t d_model, std::size_t heads) {
  Layer l{{}, heads};
  for (const char* name : {"query", "key", "value", "output"}) {
    l.params.emplace(name, tensor<double>(Shape{d_model, d_model}, normals(rng, d_model * d_model, 0.5)));
  }
  return l;
}

Var<double> self_attention(const Var<double>& x, const AttentionLayerParams<double>& p, const TokenMask& mask) {
  auto qkv = project_qkv(x, p);
  return attend_and_merge(attention_weights(qkv.q, qkv.k, mask), qkv.v, p.output);
}

// [B, H, w, w] weights by explicit loops over the stated formula.
std::vector<double> weights_oracle(const Tensor<double>& q, const Tensor<double>& k, const TokenMask& mask) {
  const auto& s = q.shape();
  const std::size_t B = s[0], H = s[1], w = s[2], d = s[3];
  std::vector<double> out(B * H * w * w);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < w; ++i) {
        std::vector<double> logits(w, -INFINITY);
        double top = -INFINITY;
        for (std::size_t j = 0; j < w; ++j) {
          if (!mask.valid(b, j)) continue;
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) dot += q[((b * H + h) * w + i) * d + c] * k[((b * H + h) * w + j) * d + c];
          logits[j] = dot / std::sqrt(static_cast<double>(d));
          top = std::max(top, logits[j]);
        }
        double z = 0.0;
        for (double l : logits) z += std::isinf(l) ? 0.0 : std::exp(l - top);
        for (std::size_t j = 0; j < w; ++j) {
          out[((b * H + h) * w + i) * w + j] = std::isinf(logits[j]) ? 0.0 : std::exp(logits[j] - top) / z;
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("identity query projection with one head passes X through") {
  Tape<float> tape;
  std::vector<float> eye(16, 0.0f);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0f;
  auto m = tape.constant(Tensor<float>(Shape{4, 4}, eye));
  Rng rng(1);
  auto x = tape.constant(tensor<float>(Shape{2, 3, 4}, normals(rng, 24)));
  auto qkv = project_qkv(x, AttentionLayerParams<float>{m, m, m, m, 1});
  CHECK(qkv.q.shape() == Shape{2, 1, 3, 4});
  CHECK(qkv.q.value().vec() == x.value().vec());
}

TEST_CASE("each head's projection equals X times its column block") {
  Rng rng(2);
  Tape<double> tape;
  auto x = tape.constant(tensor<double>(Shape{1, 3, 4}, normals(rng, 12)));
  auto mq = tape.constant(tensor<double>(Shape{4, 4}, normals(rng, 16)));
  auto qkv = project_qkv(x, AttentionLayerParams<double>{mq, mq, mq, mq, 2});
  REQUIRE(qkv.q.shape() == Shape{1, 2, 3, 2});
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t c = 0; c < 2; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) s += x.value()[i * 4 + k] * mq.value()[k * 4 + h * 2 + c];
        CHECK(qkv.q.value()[(h * 3 + i) * 2 + c] == doctest::Approx(s).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("projection shape errors") {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>(Shape{1, 3, 4}));
  auto m = tape.constant(Tensor<float>(Shape{5, 5}));
  CHECK_THROWS_AS(project_qkv(x, AttentionLayerParams<float>{m, m, m, m, 1}), DimensionError);
  auto m4 = tape.constant(Tensor<float>(Shape{4, 4}));
  CHECK_THROWS_AS(project_qkv(x, AttentionLayerParams<float>{m4, m4, m4, m4, 3}), DimensionError);
}

TEST_CASE("full attention layer matches finite differences") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto layer = random_layer(rng, 4, 2);
    layer.params.emplace("x", tensor<double>(Shape{2, 3, 4}, normals(rng, 24)));
    const TokenMask mask(2, 3, {1, 1, 1, 1, 1, 0});
    auto f = [&](const BoundParams<double>& b) {
      auto out = self_attention(b["x"], layer.bind(b), mask);
      return sum(mul(out, apply_unary(UnaryKind::sigmoid, out)));
    };
    CHECK(fd_rel_error(layer.params, f) < 1e-4);
  }
}

TEST_CASE("attention weights hand cases") {
  Tape<float> tape;
  auto zeros = tape.constant(Tensor<float>(Shape{1, 1, 3, 2}));
  auto w = attention_weights(zeros, zeros, TokenMask::all(1, 3));
  for (float v : w.value().data()) CHECK(v == doctest::Approx(1.0 / 3.0));

  auto q = tape.constant(Tensor<float>(Shape{1, 1, 2, 4}, {1, 0, 0, 0, 1, 0, 0, 0}));
  auto k = tape.constant(Tensor<float>(Shape{1, 1, 2, 4}, {1, 0, 0, 0, 0, 1, 0, 0}));
  auto w2 = attention_weights(q, k, TokenMask::all(1, 2));
  CHECK(std::abs(w2.value()[0] - 0.6225) < 1e-4);
  CHECK(std::abs(w2.value()[1] - 0.3775) < 1e-4);
}

TEST_CASE("masked keys get zero weight and rows renormalize") {
  Rng rng(4);
  Tape<double> tape;
  auto q = tape.constant(tensor<double>(Shape{1, 1, 3, 2}, normals(rng, 6)));
  auto k = tape.constant(tensor<double>(Shape{1, 1, 3, 2}, normals(rng, 6)));
  const TokenMask mask(1, 3, {1, 1, 0});
  auto w = attention_weights(q, k, mask);
  const auto full = attention_weights(q, k, TokenMask::all(1, 3)).value();
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(w.value()[i * 3 + 2] == 0.0);
    const double z = full[i * 3] + full[i * 3 + 1];
    CHECK(w.value()[i * 3] == doctest::Approx(full[i * 3] / z).epsilon(1e-12));
  }
}

TEST_CASE("a sample with every key masked is a contract error") {
  Tape<float> tape;
  auto q = tape.constant(Tensor<float>(Shape{2, 1, 2, 2}));
  CHECK_THROWS_AS(attention_weights(q, q, TokenMask(2, 2, {1, 1, 0, 0})), ContractError);
}

TEST_CASE("attention weights match a loop oracle and rows are stochastic") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = pick(rng, 1, 3), H = pick(rng, 1, 3), w = pick(rng, 1, 6), d = pick(rng, 1, 5);
    std::vector<std::uint8_t> flags(B * w);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t n = pick(rng, 1, w);
      for (std::size_t i = 0; i < n; ++i) flags[b * w + i] = 1;
    }
    const TokenMask mask(B, w, flags);
    Tape<double> tape;
    auto q = tape.constant(tensor<double>(Shape{B, H, w, d}, normals(rng, B * H * w * d, 2.0)));
    auto k = tape.constant(tensor<double>(Shape{B, H, w, d}, normals(rng, B * H * w * d, 2.0)));
    const auto& got = attention_weights(q, k, mask).value();
    const auto want = weights_oracle(q.value(), k.value(), mask);
    CHECK(max_abs_diff(as_doubles(got), want) < 1e-12);
    for (std::size_t r = 0; r < B * H * w; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < w; ++j) total += got[r * w + j];
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
    // Float path agrees too.
    Tape<float> ft;
    auto fw = attention_weights(ft.constant(q.value().cast<float>()), ft.constant(k.value().cast<float>()), mask);
    CHECK(max_abs_diff(as_doubles(fw.value()), want) < 1e-5);
  }
}

TEST_CASE("attend_and_merge hand cases") {
  Rng rng(6);
  Tape<double> tape;
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  auto out_proj = tape.constant(Tensor<double>(Shape{4, 4}, eye));
  auto v = tape.constant(tensor<double>(Shape{1, 2, 4, 2}, normals(rng, 16)));

  auto diag = tape.constant(tensor<double>(Shape{1, 2, 4, 4}, [] {
    std::vector<double> d(32, 0.0);
    for (int h = 0; h < 2; ++h)
      for (int i = 0; i < 4; ++i) d[(h * 4 + i) * 4 + i] = 1.0;
    return d;
  }()));
  auto o = attend_and_merge(diag, v, out_proj);
  REQUIRE(o.shape() == Shape{1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t c = 0; c < 2; ++c) CHECK(o.value()[i * 4 + h * 2 + c] == v.value()[(h * 4 + i) * 2 + c]);
    }
  }

  auto uniform = tape.constant(Tensor<double>(Shape{1, 2, 4, 4}, 0.25));
  auto u = attend_and_merge(uniform, v, out_proj);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0.0;
      for (std::size_t i = 0; i < 4; ++i) m += v.value()[(h * 4 + i) * 2 + c] / 4.0;
      for (std::size_t i = 0; i < 4; ++i) CHECK(u.value()[i * 4 + h * 2 + c] == doctest::Approx(m).epsilon(1e-12));
    }
  }
}

TEST_CASE("attend_and_merge matches a dense loop oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t B = pick(rng, 1, 3), H = pick(rng, 1, 4), w = pick(rng, 1, 5), d = pick(rng, 1, 4);
    const std::size_t D = H * d;
    Tape<float> tape;
    auto W = tape.constant(tensor<float>(Shape{B, H, w, w}, uniforms(rng, B * H * w * w, 0.0, 1.0)));
    auto V = tape.constant(tensor<float>(Shape{B, H, w, d}, normals(rng, B * H * w * d)));
    auto O = tape.constant(tensor<float>(Shape{D, D}, normals(rng, D * D)));
    const auto& got = attend_and_merge(W, V, O).value();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < w; ++i) {
        std::vector<double> concat(D, 0.0);
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t c = 0; c < d; ++c)
            for (std::size_t j = 0; j < w; ++j)
              concat[h * d + c] += double(W.value()[((b * H + h) * w + i) * w + j]) * V.value()[((b * H + h) * w + j) * d + c];
        for (std::size_t e = 0; e < D; ++e) {
          double s = 0.0;
          for (std::size_t f = 0; f < D; ++f) s += concat[f] * O.value()[f * D + e];
          CHECK(std::abs(got[(b * w + i) * D + e] - s) < 1e-5);
        }
      }
    }
  }
}

TEST_CASE("attend_and_merge shape errors") {
  Tape<float> tape;
  auto W = tape.constant(Tensor<float>(Shape{1, 2, 3, 3}));
  auto V = tape.constant(Tensor<float>(Shape{1, 2, 4, 2}));
  auto O = tape.constant(Tensor<float>(Shape{4, 4}));
  CHECK_THROWS_AS(attend_and_merge(W, V, O), DimensionError);
  auto V3 = tape.constant(Tensor<float>(Shape{1, 2, 3, 2}));
  CHECK_THROWS_AS(attend_and_merge(W, V3, tape.constant(Tensor<float>(Shape{3, 3}))), DimensionError);
}

TEST_CASE("empirical pairs enumerate every sample and head") {
  Rng rng(8);
  Tape<float> tape;
  auto q = tape.constant(tensor<float>(Shape{2, 3, 4, 2}, normals(rng, 48)));
  auto k = tape.constant(tensor<float>(Shape{2, 3, 4, 2}, normals(rng, 48)));
  const TokenMask mask(2, 4, {1, 1, 1, 1, 1, 1, 0, 0});
  auto pairs = empirical_pairs(q, k, mask);
  REQUIRE(pairs.size() == 6);
  for (std::size_t p = 0; p < 6; ++p) {
    const auto pair = pairs.pair(p);
    CHECK(pair.sample_index == p / 3);
    CHECK(pair.head_index == p % 3);
    CHECK(pair.queries.shape() == Shape{4, 2});
    CHECK(pair.mask == (p / 3 == 0 ? std::vector<std::uint8_t>{1, 1, 1, 1} : std::vector<std::uint8_t>{1, 1, 0, 0}));
    for (std::size_t i = 0; i < 8; ++i) CHECK(pair.queries.value()[i] == q.value()[p * 8 + i]);
  }
}

TEST_CASE("single-sample single-head pair equals the projections") {
  Rng rng(9);
  Tape<float> tape;
  auto x = tape.constant(tensor<float>(Shape{1, 3, 2}, normals(rng, 6)));
  auto mq = tape.constant(tensor<float>(Shape{2, 2}, normals(rng, 4)));
  auto mk = tape.constant(tensor<float>(Shape{2, 2}, normals(rng, 4)));
  auto qkv = project_qkv(x, AttentionLayerParams<float>{mq, mk, mq, mq, 1});
  auto pairs = empirical_pairs(qkv.q, qkv.k, TokenMask::all(1, 3));
  REQUIRE(pairs.size() == 1);
  CHECK(pairs.pair(0).queries.value().vec() == qkv.q.value().vec());
  CHECK(pairs.pair(0).keys.value().vec() == qkv.k.value().vec());
}

TEST_CASE("padded rows receive zero gradient from every alignment loss") {
  Rng rng(10);
  ParamMap<float> nets;
  for (auto method : {AlignMethod::adversarial, AlignMethod::ct}) {
    AlignmentConfig cfg;
    cfg.method = method;
    init_alignment_params(nets, cfg, 3, rng);
  }
  for (auto method : {AlignMethod::adversarial, AlignMethod::ot, AlignMethod::ct}) {
    CAPTURE(to_string(method));
    AlignmentConfig cfg;
    cfg.method = method;
    Tape<float> tape;
    BoundParams<float> bound(tape, nets, true);
    auto q = tape.variable(tensor<float>(Shape{2, 2, 4, 3}, normals(rng, 48)));
    auto k = tape.variable(tensor<float>(Shape{2, 2, 4, 3}, normals(rng, 48)));
    const TokenMask mask(2, 4, {1, 1, 1, 0, 1, 1, 0, 0});
    const std::vector<PairSet<float>> layers{empirical_pairs(q, k, mask)};
    auto loss = batch_alignment_loss<float>(layers, cfg, bound);
    REQUIRE(loss.loss);
    tape.backward(*loss.loss);
    const auto gq = tape.grad(q), gk = tape.grad(k);
    double live = 0.0;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t i = 0; i < 4; ++i) {
          for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t at = ((b * 2 + h) * 4 + i) * 3 + c;
            if (mask.valid(b, i)) {
              live += std::abs(gq[at]) + std::abs(gk[at]);
            } else {
              CHECK(gq[at] == 0.0f);
              CHECK(gk[at] == 0.0f);
            }
          }
        }
      }
    }
    CHECK(live > 0.0);
  }
}

TEST_CASE("permuting tokens permutes the attention output rows") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t w = pick(rng, 2, 6), heads = pick(rng, 1, 2), D = 2 * heads;
    auto layer = random_layer(rng, D, heads);
    const auto xs = normals(rng, w * D);
    std::vector<std::size_t> perm(w);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> xp(w * D);
    for (std::size_t i = 0; i < w; ++i)
      for (std::size_t c = 0; c < D; ++c) xp[i * D + c] = xs[perm[i] * D + c];

    auto run = [&](const std::vector<double>& input) {
      Tape<double> tape;
      BoundParams<double> b(tape, layer.params, false);
      auto x = tape.constant(tensor<double>(Shape{1, w, D}, input));
      return self_attention(x, layer.bind(b), TokenMask::all(1, w)).value().vec();
    };
    const auto base = run(xs), permuted = run(xp);
    for (std::size_t i = 0; i < w; ++i)
      for (std::size_t c = 0; c < D; ++c) CHECK(std::abs(permuted[i * D + c] - base[perm[i] * D + c]) < 1e-12);
  }
}

TEST_CASE("zeroing one head's values changes only that head's columns") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t H = pick(rng, 2, 4), d = pick(rng, 1, 3), w = pick(rng, 1, 5);
    const std::size_t zeroed = pick(rng, 0, H - 1);
    auto vs = normals(rng, H * w * d);
    const auto ws = uniforms(rng, H * w * w, 0.0, 1.0);
    auto run = [&](const std::vector<double>& values) {
      Tape<double> tape;
      auto W = tape.constant(tensor<double>(Shape{1, H, w, w}, ws));
      auto V = tape.constant(tensor<double>(Shape{1, H, w, d}, values));
      return merge_heads(matmul(W, V)).value().vec();
    };
    const auto base = run(vs);
    for (std::size_t i = 0; i < w * d; ++i) vs[zeroed * w * d + i] = 0.0;
    const auto cut = run(vs);
    for (std::size_t i = 0; i < w; ++i) {
      for (std::size_t col = 0; col < H * d; ++col) {
        const bool inside = col / d == zeroed;
        if (inside) {
          CHECK(cut[i * H * d + col] == 0.0);
        } else {
          CHECK(cut[i * H * d + col] == base[i * H * d + col]);
        }
      }
    }
  }
}

TEST_CASE("attention CSV has a token header and one row per query") {
  const auto path = std::filesystem::temp_directory_path() / "aatn_attention.csv";
  write_attention_csv(path, {0.25, 0.75, 1.0, 0.0}, 2, {"a", "b"});
  std::ifstream in(path);
  std::string header, row0, row1;
  std::getline(in, header);
  std::getline(in, row0);
  std::getline(in, row1);
  CHECK(header.find('a') != std::string::npos);
  CHECK(header.find('b') != std::string::npos);
  CHECK(row0.find("0.75") != std::string::npos);
  CHECK_THROWS_AS(write_attention_csv(path, {1.0, 0.0, 0.0}, 2, {"a", "b"}), DimensionError);
  std::filesystem::remove(path);
}

}  // TEST_SUITE
