#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "aatn/cli.hpp"
#include "aatn/config.hpp"
#include "aatn/data.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using namespace aatn;
using namespace aatn::test;

namespace fs = std::filesystem;

namespace {

bool duplicate_by_sorting(std::vector<std::int32_t> t) {
  std::sort(t.begin(), t.end());
  return std::adjacent_find(t.begin(), t.end()) != t.end();
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

const char* kTinyConfig = R"({
  "model": {"vocab_size": 12, "d_model": 8, "H": 2, "n_layers": 1, "w_max": 6, "d_ff": 16},
  "train": {"epochs": 1, "batch_size": 16, "mmd_tokens": 32},
  "data": {"n_train": 64, "n_val": 32, "width": 6, "seed": 1}
})";

}  // namespace

TEST_SUITE("data_cli") {

TEST_CASE("pair-matching hand cases") {
  const std::vector<std::int32_t> pos{5, 9, 5, 2}, neg{1, 2, 3, 4};
  CHECK(has_duplicate(pos));
  CHECK_FALSE(has_duplicate(neg));
}

TEST_CASE("pair-matching labels agree with an independent duplicate scan") {
  const auto data = gen_pair_matching(42, 10000, 16, 64);
  REQUIRE(data.size() == 10000);
  std::size_t positives = 0;
  for (const auto& ex : data) {
    CHECK(ex.tokens.size() == 16);
    CHECK((ex.label == 1) == duplicate_by_sorting(ex.tokens));
    for (auto t : ex.tokens) {
      CHECK(t >= 1);
      CHECK(t < 64);
    }
    if (ex.label == 1) {
      // Exactly one planted duplicate.
      CHECK(std::set<std::int32_t>(ex.tokens.begin(), ex.tokens.end()).size() == 15);
    }
    positives += ex.label;
  }
  CHECK(positives == 5000);
}

TEST_CASE("pair-matching is deterministic and rejects infeasible parameters") {
  CHECK(gen_pair_matching(3, 50, 8, 20) == gen_pair_matching(3, 50, 8, 20));
  CHECK(gen_pair_matching(3, 50, 8, 20) != gen_pair_matching(4, 50, 8, 20));
  CHECK_THROWS_AS(gen_pair_matching(0, 10, 3, 20), ConfigError);
  CHECK_THROWS_AS(gen_pair_matching(0, 10, 8, 8), ConfigError);
}

TEST_CASE("JSONL examples") {
  const auto dir = fresh_dir("aatn_jsonl");
  write_file(dir / "tokens.jsonl", "{\"tokens\": [3, 4], \"label\": 1}\n\n{\"tokens\": [5], \"label\": 0}\n");
  const auto tok = load_jsonl(dir / "tokens.jsonl", 8);
  REQUIRE(tok.examples.size() == 2);
  CHECK(tok.examples[0].tokens == std::vector<std::int32_t>{3, 4});
  CHECK(tok.examples[0].label == 1);
  CHECK_FALSE(tok.vocab.has_value());

  write_file(dir / "text.jsonl", "{\"text\": \"a b a\", \"label\": 1}\n");
  const auto vocab = Vocab::from_map({{"a", 2}, {"b", 3}});
  const auto txt = load_jsonl(dir / "text.jsonl", 8, &vocab);
  REQUIRE(txt.examples.size() == 1);
  CHECK(txt.examples[0].tokens == std::vector<std::int32_t>{2, 3, 2});
  CHECK(txt.examples[0].label == 1);
  CHECK(txt.examples[0].text == std::optional<std::string>("a b a"));

  // Built vocabulary: frequency order, unknown words map to 1.
  write_file(dir / "built.jsonl", "{\"text\": \"x y y\", \"label\": 0}\n{\"text\": \"y z\", \"label\": 1}\n");
  const auto built = load_jsonl(dir / "built.jsonl", 2);
  REQUIRE(built.vocab);
  CHECK(built.vocab->lookup("y") == 2);
  CHECK(built.vocab->lookup("never") == kUnknownId);
  CHECK(built.examples[0].tokens.size() == 2);  // truncated to w_max
  fs::remove_all(dir);
}

TEST_CASE("JSONL round trip") {
  const auto dir = fresh_dir("aatn_jsonl_rt");
  const auto data = gen_pair_matching(9, 200, 6, 30);
  save_jsonl(dir / "d.jsonl", data);
  CHECK(load_jsonl(dir / "d.jsonl", 6).examples == data);
  fs::remove_all(dir);
}

TEST_CASE("JSONL errors carry the line number") {
  const auto dir = fresh_dir("aatn_jsonl_bad");
  write_file(dir / "bad.jsonl", "{\"tokens\": [1], \"label\": 0}\n{\"tokens\": [1]}\n");
  try {
    load_jsonl(dir / "bad.jsonl", 4);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("bad.jsonl:2") != std::string::npos);
  }
  write_file(dir / "garbage.jsonl", "{\"tokens\": [1], \"label\": 0}\n{\"tokens\": [1], \n");
  CHECK_THROWS_WITH_AS(load_jsonl(dir / "garbage.jsonl", 4), doctest::Contains("garbage.jsonl:2"), InputError);
  write_file(dir / "empty.jsonl", "\n  \n");
  CHECK_THROWS_AS(load_jsonl(dir / "empty.jsonl", 4), InputError);
  CHECK_THROWS_AS(load_jsonl(dir / "missing.jsonl", 4), IoError);
  fs::remove_all(dir);
}

TEST_CASE("noise statistics over a million draws") {
  for (double sigma : {1.0, 0.5}) {
    const Tensor<float> zeros(Shape{1000, 1000}, 0.0f);
    const auto noisy = inject_noise(zeros, NoiseSpec{sigma, 17});
    double mean = 0.0;
    for (float v : noisy.data()) mean += v;
    mean /= 1e6;
    double var = 0.0;
    for (float v : noisy.data()) var += (v - mean) * (v - mean);
    var /= 1e6;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - sigma * sigma) < 0.02);
  }
}

TEST_CASE("noise identity and determinism") {
  Rng rng(5);
  const auto base = tensor<float>(Shape{4, 5}, normals(rng, 20));
  CHECK(inject_noise(base, NoiseSpec{0.0, 3}) == base);
  CHECK(inject_noise(base, NoiseSpec{0.7, 3}) == inject_noise(base, NoiseSpec{0.7, 3}));
  CHECK(inject_noise(base, NoiseSpec{0.7, 3}) != inject_noise(base, NoiseSpec{0.7, 4}));
  CHECK_THROWS_AS(inject_noise(base, NoiseSpec{-1.0, 0}), ConfigError);
}

TEST_CASE("RNG streams are independent of each other") {
  auto a = make_stream(7, Stream::init), b = make_stream(7, Stream::align_init), c = make_stream(7, Stream::init);
  const auto x = a(), y = b(), z = c();
  CHECK(x != y);
  CHECK(x == z);
}

TEST_CASE("config round trip and validation") {
  auto cfg = parse_run_config(kTinyConfig);
  CHECK(cfg.model.d_model == 8);
  CHECK(cfg.model.heads == 2);
  CHECK(cfg.data.n_train == 64);
  CHECK(cfg.model.align.lambda == 0.01f);

  cfg.model.align.method = AlignMethod::ct;
  cfg.model.align.lambda = 0.25f;
  cfg.train.align_lr = 5e-4f;
  cfg.model.aligned_layers = {0};
  const auto text = run_config_json(cfg);
  const auto back = parse_run_config(text);
  CHECK(run_config_json(back) == text);
  CHECK(back.model.align.method == AlignMethod::ct);
  CHECK(back.model.align.lambda == 0.25f);
  CHECK(back.train.align_lr == 5e-4f);

  // train.lambda is accepted as an alias of the alignment weight.
  CHECK(parse_run_config(R"({"train": {"lambda": 0.5}})").model.align.lambda == 0.5f);

  CHECK_THROWS_WITH_AS(parse_run_config(R"({"model": {"heads": 2}})"), doctest::Contains("model.heads"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"optim": {}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"d_model": 10, "H": 4}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"batch_size": -1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"data": {"width": 20}})"), ConfigError);
}

TEST_CASE("CLI usage errors exit 2") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"bogus"}).code == kExitUsage);
  auto missing = cli({"train"});
  CHECK(missing.code == kExitUsage);
  CHECK(missing.err.find("--config") != std::string::npos);
  CHECK(cli({"train", "--config", "/nonexistent/aatn.json"}).code == kExitUsage);
  CHECK(cli({"gradcheck", "--frobnicate"}).code == kExitUsage);
  CHECK(cli({"eval", "--checkpoint", "/nonexistent.aatn"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("CLI runtime errors exit 1 with a message") {
  const auto dir = fresh_dir("aatn_cli_bad");
  write_file(dir / "bad.json", R"({"model": {"typo": 1}})");
  auto run = cli({"train", "--config", (dir / "bad.json").string(), "--out", (dir / "run").string()});
  CHECK(run.code == kExitFailure);
  CHECK(run.err.find("model.typo") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("CLI train, eval and diagnose") {
  const auto dir = fresh_dir("aatn_cli_run");
  write_file(dir / "config.json", kTinyConfig);
  const auto run_dir = dir / "run";
  auto train = cli({"train", "--config", (dir / "config.json").string(), "--align", "ct", "--lambda", "0.5", "--seed",
                    "3", "--out", run_dir.string()});
  REQUIRE(train.code == kExitOk);
  for (const char* f : {"config.json", "report.json", "checkpoint.aatn", "diagnostics/mmd.json",
                        "diagnostics/queries.csv", "diagnostics/keys.csv", "diagnostics/attention_s0_l0_h0.csv"}) {
    CHECK(fs::exists(run_dir / f));
  }

  // Every override shows up in the echoed config.
  const auto report = nlohmann::json::parse(slurp(run_dir / "report.json"));
  CHECK(report["config"]["model"]["align"]["method"] == "ct");
  CHECK(report["config"]["model"]["align"]["lambda"].get<double>() == 0.5);
  CHECK(report["config"]["train"]["seed"] == 3);
  CHECK(report["steps"].size() == 4);
  CHECK(report["evals"].size() == 2);
  CHECK(report["evals"][1]["mmd"]["per_layer_head"].size() == 1);
  for (const auto& s : report["steps"]) {
    CHECK(s.contains("J"));
    CHECK(s.contains("task"));
    CHECK(s.contains("align"));
    CHECK(s.contains("grad_norm"));
  }

  const auto ckpt = (run_dir / "checkpoint.aatn").string();
  auto plain = cli({"eval", "--checkpoint", ckpt});
  auto zero_noise = cli({"eval", "--checkpoint", ckpt, "--noise-sigma", "0"});
  REQUIRE(plain.code == kExitOk);
  CHECK(zero_noise.out == plain.out);
  const auto metrics = nlohmann::json::parse(plain.out);
  CHECK(metrics["accuracy"].get<double>() == report["best_val_accuracy"].get<double>());
  CHECK(metrics["examples"] == 32);

  auto noisy = cli({"eval", "--checkpoint", ckpt, "--noise-sigma", "1", "--noise-seed", "2"});
  CHECK(noisy.code == kExitOk);
  CHECK(cli({"eval", "--checkpoint", ckpt, "--noise-sigma", "-1"}).code == kExitUsage);

  auto diag = cli({"diagnose", "--checkpoint", ckpt, "--out", (dir / "diag").string()});
  CHECK(diag.code == kExitOk);
  CHECK(slurp(dir / "diag" / "queries.csv") == slurp(run_dir / "diagnostics" / "queries.csv"));
  CHECK(slurp(dir / "diag" / "mmd.json") == slurp(run_dir / "diagnostics" / "mmd.json"));

  // JSONL evaluation data.
  save_jsonl(dir / "val.jsonl", gen_pair_matching(3, 10, 6, 12));
  auto file_eval = cli({"eval", "--checkpoint", ckpt, "--data", (dir / "val.jsonl").string()});
  CHECK(file_eval.code == kExitOk);
  CHECK(nlohmann::json::parse(file_eval.out)["examples"] == 10);

  // Rerunning the same command reproduces the checkpoint bit for bit.
  auto again = cli({"train", "--config", (dir / "config.json").string(), "--align", "ct", "--lambda", "0.5", "--seed",
                    "3", "--out", (dir / "run2").string()});
  REQUIRE(again.code == kExitOk);
  CHECK(slurp(dir / "run2" / "checkpoint.aatn") == slurp(run_dir / "checkpoint.aatn"));
  auto strip = [](nlohmann::json j) {
    j.erase("checkpoint");
    return j;
  };
  CHECK(strip(nlohmann::json::parse(slurp(dir / "run2" / "report.json"))) == strip(report));
  fs::remove_all(dir);
}

TEST_CASE("CLI train on text JSONL writes the vocabulary") {
  const auto dir = fresh_dir("aatn_cli_text");
  std::string train_lines, val_lines;
  const std::vector<std::string> words{"red", "green", "blue", "cyan", "pink", "gold"};
  Rng rng(3);
  for (int i = 0; i < 40; ++i) {
    std::string text;
    for (int k = 0; k < 4; ++k) text += words[pick(rng, 0, 5)] + " ";
    const std::string line = "{\"text\": \"" + text + "\", \"label\": " + std::to_string(i % 2) + "}\n";
    (i < 30 ? train_lines : val_lines) += line;
  }
  write_file(dir / "train.jsonl", train_lines);
  write_file(dir / "val.jsonl", val_lines);
  write_file(dir / "config.json", R"({
    "model": {"vocab_size": 12, "d_model": 8, "H": 2, "n_layers": 1, "w_max": 6, "d_ff": 8},
    "train": {"epochs": 1, "batch_size": 10, "mmd_tokens": 16},
    "data": {"train_path": ")" + (dir / "train.jsonl").string() + R"(", "val_path": ")" +
                                       (dir / "val.jsonl").string() + R"("}})");
  auto run = cli({"train", "--config", (dir / "config.json").string(), "--out", (dir / "run").string()});
  REQUIRE(run.code == kExitOk);
  const auto vocab = load_vocab(dir / "run" / "vocab.json");
  CHECK(vocab.ids().size() == 6);
  auto eval = cli({"eval", "--checkpoint", (dir / "run" / "checkpoint.aatn").string(), "--data",
                   (dir / "val.jsonl").string()});
  CHECK(eval.code == kExitOk);
  fs::remove_all(dir);
}

TEST_CASE("CLI gradcheck exits 0 and prints a table") {
  auto run = cli({"gradcheck", "--seed", "0"});
  CHECK(run.code == kExitOk);
  CHECK(run.out.find("adversarial") != std::string::npos);
  CHECK(run.out.find("ct") != std::string::npos);
}

}  // TEST_SUITE
