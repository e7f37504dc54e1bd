#include "aatn/cli.hpp"

#include <iomanip>
#include <ostream>

#include "CLI11.hpp"
#include "aatn/config.hpp"
#include "aatn/gradcheck.hpp"

namespace aatn {

namespace {

namespace fs = std::filesystem;

struct TrainArgs {
  std::string config;
  std::string align;
  std::optional<float> lambda;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::string out = "run";
};

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::string data = "synthetic";
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

struct DiagnoseArgs {
  std::string checkpoint;
  std::string config;
  std::string data = "synthetic";
  std::string out;
  std::size_t samples = 4;
};

// The config that produced a checkpoint: explicit path, else config.json
// beside it.
RunConfig config_for(const std::string& checkpoint, const std::string& config) {
  const fs::path path = config.empty() ? fs::path(checkpoint).parent_path() / "config.json" : fs::path(config);
  if (!fs::exists(path)) throw IoError("no config for checkpoint: " + path.string() + " does not exist");
  return load_run_config(path);
}

std::optional<Vocab> vocab_for(const std::string& checkpoint) {
  const auto path = fs::path(checkpoint).parent_path() / "vocab.json";
  if (!fs::exists(path)) return std::nullopt;
  return load_vocab(path);
}

Dataset eval_data(const RunConfig& config, const std::string& data, const std::string& checkpoint) {
  if (data == "synthetic") return load_splits(config).val;
  auto vocab = vocab_for(checkpoint);
  return load_jsonl(data, config.model.w_max, vocab ? &*vocab : nullptr).examples;
}

ParamMap<float> load_model(const std::string& checkpoint, const ModelConfig& model) {
  auto params = load_checkpoint(checkpoint);
  const auto expected = init_model_params(model, 0);
  for (const auto& [name, t] : expected) {
    auto it = params.find(name);
    if (it == params.end()) throw InputError("checkpoint " + checkpoint + " has no tensor " + name);
    if (it->second.shape() != t.shape()) {
      throw DimensionError("checkpoint tensor " + name + " has shape " + to_string(it->second.shape()) +
                           ", config expects " + to_string(t.shape()));
    }
  }
  return params;
}

std::function<std::string(std::int32_t)> token_renderer(const std::optional<Vocab>& vocab) {
  if (!vocab) return {};
  std::map<std::int32_t, std::string> words{{kPadId, "<pad>"}, {kUnknownId, "<unk>"}};
  for (const auto& [word, id] : vocab->ids()) words[id] = word;
  return [words](std::int32_t id) {
    auto it = words.find(id);
    return it == words.end() ? std::to_string(id) : it->second;
  };
}

void write_diagnostics(const ParamMap<float>& params, const RunConfig& config, const Dataset& data,
                       std::size_t samples, const fs::path& dir, const std::optional<Vocab>& vocab) {
  if (data.empty()) throw ContractError("diagnostics need at least one example");
  fs::create_directories(dir);
  const auto mmd = qk_mmd_report(params, config.model, data, config.train.mmd_tokens, config.train.mmd_bandwidth,
                                 config.train.batch_size);
  write_text_file(dir / "mmd.json", mmd_report_json(mmd));
  std::vector<std::size_t> idx(std::min(samples, data.size()));
  std::iota(idx.begin(), idx.end(), 0);
  export_diagnostics(params, config.model, make_batch(data, idx), dir, token_renderer(vocab));
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  auto config = load_run_config(a.config);
  if (!a.align.empty()) config.model.align.method = parse_align_method(a.align);
  if (a.lambda) config.model.align.lambda = *a.lambda;
  if (a.seed) config.train.seed = *a.seed;
  if (a.epochs) config.train.epochs = *a.epochs;
  config.validate();

  const fs::path dir = a.out;
  fs::create_directories(dir);
  save_run_config(dir / "config.json", config);
  auto splits = load_splits(config);
  if (splits.vocab) write_text_file(dir / "vocab.json", vocab_json(*splits.vocab));

  const auto checkpoint = dir / "checkpoint.aatn";
  auto result = fit(splits.train, splits.val, config.model, config.train, checkpoint);
  write_text_file(dir / "report.json", run_report_json(result.report, config.data));
  write_diagnostics(result.best_params, config, splits.val, 4, dir / "diagnostics", splits.vocab);

  const auto& last = result.report.final_eval();
  out << std::fixed << std::setprecision(4) << "method " << to_string(config.model.align.method) << "  steps "
      << result.report.steps.size() << "  final val acc " << last.metrics.accuracy << "  ece " << last.metrics.ece;
  if (last.mmd) out << "  qk mmd " << std::setprecision(5) << last.mmd->total;
  out << std::setprecision(4) << "\nbest val acc " << result.report.best_val_accuracy << " at step "
      << result.report.best_step << "\nwrote " << dir.string() << '\n';
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto config = config_for(a.checkpoint, a.config);
  const auto params = load_model(a.checkpoint, config.model);
  const auto data = eval_data(config, a.data, a.checkpoint);
  std::optional<NoiseSpec> noise;
  if (a.noise_sigma > 0.0) noise = NoiseSpec{a.noise_sigma, a.noise_seed};
  out << eval_metrics_json(evaluate(params, config.model, data, config.train.batch_size, noise));
  return kExitOk;
}

int cmd_diagnose(const DiagnoseArgs& a, std::ostream& out) {
  const auto config = config_for(a.checkpoint, a.config);
  const auto params = load_model(a.checkpoint, config.model);
  const auto data = eval_data(config, a.data, a.checkpoint);
  write_diagnostics(params, config, data, a.samples, a.out, vocab_for(a.checkpoint));
  out << "wrote " << a.out << '\n';
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, std::ostream& out) {
  GradcheckOptions opt;
  opt.base_seed = seed;
  const auto report = run_gradcheck(opt);
  out << report.table();
  return report.passed() ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Query/key alignment for self-attention: training, evaluation and diagnostics", "aatn"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model and write a run directory");
  train->add_option("--config", ta.config, "JSON config file")->required()->check(CLI::ExistingFile);
  train->add_option("--align", ta.align, "Alignment method")
      ->check(CLI::IsMember({"none", "adv", "adversarial", "ot", "ct"}));
  train->add_option("--lambda", ta.lambda, "Alignment weight");
  train->add_option("--seed", ta.seed, "Training seed");
  train->add_option("--epochs", ta.epochs, "Number of epochs");
  train->add_option("--out", ta.out, "Run directory")->capture_default_str();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Accuracy and ECE of a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--config", ea.config, "Config (default: config.json beside the checkpoint)");
  eval->add_option("--data", ea.data, "JSONL file or 'synthetic' for the configured validation split")
      ->capture_default_str();
  eval->add_option("--noise-sigma", ea.noise_sigma, "Std of Gaussian noise added to embeddings")
      ->check(CLI::NonNegativeNumber);
  eval->add_option("--noise-seed", ea.noise_seed, "Seed of the noise stream");

  DiagnoseArgs da;
  auto* diagnose = app.add_subcommand("diagnose", "Query/key MMD report and attention/point-cloud CSVs");
  diagnose->add_option("--checkpoint", da.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  diagnose->add_option("--out", da.out, "Output directory")->required();
  diagnose->add_option("--config", da.config, "Config (default: config.json beside the checkpoint)");
  diagnose->add_option("--data", da.data, "JSONL file or 'synthetic'")->capture_default_str();
  diagnose->add_option("--samples", da.samples, "Samples exported as heatmaps")->capture_default_str();

  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every gradient path");
  gradcheck->add_option("--seed", gc_seed, "Base seed")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(ta, out);
    if (*eval) return cmd_eval(ea, out);
    if (*diagnose) return cmd_diagnose(da, out);
    return cmd_gradcheck(gc_seed, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace aatn
