#include "aatn/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace aatn {

using nlohmann::json;

void DataConfig::validate() const {
  if (train_path.has_value() != val_path.has_value()) {
    throw ConfigError("data.train_path and data.val_path must be given together");
  }
  if (!train_path) {
    if (n_train == 0 || n_val == 0) throw ConfigError("data.n_train and data.n_val must be >= 1");
    if (width < 4) throw ConfigError("data.width must be >= 4 for pair matching");
  }
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (!data.train_path) {
    if (data.width > model.w_max) throw ConfigError("data.width exceeds model.w_max");
    if (model.vocab_size <= data.width) throw ConfigError("pair matching needs model.vocab_size > data.width");
  }
}

namespace {

// Shortest decimal that round-trips the float, so 1e-3f echoes as 0.001.
double echo(float f) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, f);
  return std::strtod(std::string(buf, res.ptr).c_str(), nullptr);
}

// Reads `obj` with a fixed key set; any other key is rejected so typos do
// not silently fall back to defaults.
class Section {
 public:
  Section(const json& obj, std::string name, std::set<std::string> keys) : obj_(obj), name_(std::move(name)) {
    if (!obj_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    for (const auto& [key, _] : obj_.items()) {
      if (!keys.contains(key)) throw ConfigError("unknown config key '" + name_ + "." + key + "'");
    }
  }

  template <typename T>
  void get(const char* key, T& out) const {
    if (!obj_.contains(key)) return;
    try {
      if constexpr (std::is_same_v<T, float>) {
        out = static_cast<float>(obj_.at(key).get<double>());
      } else if constexpr (std::is_unsigned_v<T>) {
        const auto& v = obj_.at(key);
        if (!v.is_number_unsigned()) throw ConfigError("must be a non-negative integer");
        out = v.get<T>();
      } else {
        out = obj_.at(key).get<T>();
      }
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + name_ + "." + key + "': " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + name_ + "." + key + "' " + e.what());
    }
  }

  bool has(const char* key) const { return obj_.contains(key); }
  const json& at(const char* key) const { return obj_.at(key); }

 private:
  const json& obj_;
  std::string name_;
};

void read_align(const json& obj, AlignmentConfig& a) {
  Section s(obj, "model.align", {"method", "lambda", "epsilon", "sinkhorn_max_iters", "sinkhorn_tol", "d_hid"});
  if (s.has("method")) {
    std::string method;
    s.get("method", method);
    a.method = parse_align_method(method);
  }
  s.get("lambda", a.lambda);
  s.get("epsilon", a.epsilon);
  s.get("sinkhorn_max_iters", a.sinkhorn_max_iters);
  s.get("sinkhorn_tol", a.sinkhorn_tol);
  s.get("d_hid", a.d_hid);
}

void read_model(const json& obj, ModelConfig& m) {
  Section s(obj, "model",
            {"vocab_size", "d_model", "H", "n_layers", "w_max", "n_classes", "d_ff", "dropout_rate", "aligned_layers",
             "align"});
  s.get("vocab_size", m.vocab_size);
  s.get("d_model", m.d_model);
  s.get("H", m.heads);
  s.get("n_layers", m.n_layers);
  s.get("w_max", m.w_max);
  s.get("n_classes", m.n_classes);
  s.get("d_ff", m.d_ff);
  s.get("dropout_rate", m.dropout_rate);
  s.get("aligned_layers", m.aligned_layers);
  if (s.has("align")) read_align(s.at("align"), m.align);
}

void read_train(const json& obj, TrainConfig& t, AlignmentConfig& align) {
  Section s(obj, "train",
            {"lambda", "lr", "batch_size", "epochs", "seed", "grad_clip_norm", "eval_every", "align_lr", "mmd_tokens",
             "mmd_bandwidth"});
  s.get("lambda", align.lambda);
  s.get("lr", t.lr);
  s.get("batch_size", t.batch_size);
  s.get("epochs", t.epochs);
  s.get("seed", t.seed);
  s.get("grad_clip_norm", t.grad_clip_norm);
  s.get("eval_every", t.eval_every);
  if (s.has("align_lr") && !s.at("align_lr").is_null()) {
    float lr = 0.0f;
    s.get("align_lr", lr);
    t.align_lr = lr;
  }
  s.get("mmd_tokens", t.mmd_tokens);
  s.get("mmd_bandwidth", t.mmd_bandwidth);
}

void read_data(const json& obj, DataConfig& d) {
  Section s(obj, "data", {"n_train", "n_val", "width", "seed", "train_path", "val_path"});
  s.get("n_train", d.n_train);
  s.get("n_val", d.n_val);
  s.get("width", d.width);
  s.get("seed", d.seed);
  for (auto [key, field] : {std::pair{"train_path", &d.train_path}, std::pair{"val_path", &d.val_path}}) {
    if (s.has(key) && !s.at(key).is_null()) {
      std::string path;
      s.get(key, path);
      *field = path;
    }
  }
}

json align_json(const AlignmentConfig& a) {
  return {{"method", to_string(a.method)},
          {"lambda", echo(a.lambda)},
          {"epsilon", a.epsilon},
          {"sinkhorn_max_iters", a.sinkhorn_max_iters},
          {"sinkhorn_tol", a.sinkhorn_tol},
          {"d_hid", a.d_hid}};
}

json config_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& d = c.data;
  json out;
  out["model"] = {{"vocab_size", m.vocab_size}, {"d_model", m.d_model},   {"H", m.heads},
                  {"n_layers", m.n_layers},     {"w_max", m.w_max},       {"n_classes", m.n_classes},
                  {"d_ff", m.d_ff},             {"dropout_rate", echo(m.dropout_rate)},
                  {"aligned_layers", m.aligned_layers}, {"align", align_json(m.align)}};
  out["train"] = {{"lr", echo(t.lr)},
                  {"batch_size", t.batch_size},
                  {"epochs", t.epochs},
                  {"seed", t.seed},
                  {"grad_clip_norm", echo(t.grad_clip_norm)},
                  {"eval_every", t.eval_every},
                  {"align_lr", t.align_lr ? json(echo(*t.align_lr)) : json(nullptr)},
                  {"mmd_tokens", t.mmd_tokens},
                  {"mmd_bandwidth", t.mmd_bandwidth}};
  out["data"] = {{"n_train", d.n_train},
                 {"n_val", d.n_val},
                 {"width", d.width},
                 {"seed", d.seed},
                 {"train_path", d.train_path ? json(d.train_path->string()) : json(nullptr)},
                 {"val_path", d.val_path ? json(d.val_path->string()) : json(nullptr)}};
  return out;
}

json mmd_json(const MmdReport& r) {
  json values = json::array();
  for (std::size_t l = 0; l < r.layers; ++l) {
    json row = json::array();
    for (std::size_t h = 0; h < r.heads; ++h) row.push_back(r.at(l, h));
    values.push_back(std::move(row));
  }
  return {{"total", r.total}, {"tokens", r.tokens}, {"per_layer_head", std::move(values)}};
}

json metrics_json(const EvalMetrics& m) {
  return {{"accuracy", m.accuracy}, {"ece", m.ece}, {"examples", m.examples}};
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "model" && key != "train" && key != "data") throw ConfigError("unknown config section '" + key + "'");
  }
  RunConfig c;
  if (doc.contains("model")) read_model(doc["model"], c.model);
  if (doc.contains("train")) read_train(doc["train"], c.train, c.model.align);
  if (doc.contains("data")) read_data(doc["data"], c.data);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return parse_run_config(read_text_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string run_config_json(const RunConfig& config) { return config_json(config).dump(2) + "\n"; }

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
  write_text_file(path, run_config_json(config));
}

Splits load_splits(const RunConfig& config) {
  const auto& d = config.data;
  Splits out;
  if (!d.train_path) {
    out.train = gen_pair_matching(2 * d.seed, d.n_train, d.width, config.model.vocab_size);
    out.val = gen_pair_matching(2 * d.seed + 1, d.n_val, d.width, config.model.vocab_size);
    return out;
  }
  auto train = load_jsonl(*d.train_path, config.model.w_max);
  auto val = load_jsonl(*d.val_path, config.model.w_max, train.vocab ? &*train.vocab : nullptr);
  out.train = std::move(train.examples);
  out.val = std::move(val.examples);
  out.vocab = std::move(train.vocab);
  return out;
}

std::string vocab_json(const Vocab& vocab) { return json(vocab.ids()).dump(2) + "\n"; }

Vocab load_vocab(const std::filesystem::path& path) {
  try {
    return Vocab::from_map(json::parse(read_text_file(path)).get<std::map<std::string, std::int32_t>>());
  } catch (const json::exception& e) {
    throw InputError("bad vocabulary file " + path.string() + ": " + e.what());
  }
}

std::string eval_metrics_json(const EvalMetrics& metrics) { return metrics_json(metrics).dump(2) + "\n"; }

std::string mmd_report_json(const MmdReport& report) { return mmd_json(report).dump(2) + "\n"; }

std::string run_report_json(const RunReport& report, const DataConfig& data) {
  json steps = json::array();
  for (const auto& s : report.steps) {
    steps.push_back({{"step", s.step},
                     {"epoch", s.epoch},
                     {"J", s.J},
                     {"task", s.task},
                     {"align", s.align},
                     {"grad_norm", s.grad_norm},
                     {"sinkhorn_unconverged", s.sinkhorn_unconverged}});
  }
  json evals = json::array();
  for (const auto& e : report.evals) {
    json rec = {{"step", e.step}, {"epoch", e.epoch}, {"accuracy", e.metrics.accuracy}, {"ece", e.metrics.ece}};
    rec["mmd"] = e.mmd ? mmd_json(*e.mmd) : json(nullptr);
    evals.push_back(std::move(rec));
  }
  json out;
  out["config"] = config_json(RunConfig{report.model, report.train, data});
  out["steps"] = std::move(steps);
  out["evals"] = std::move(evals);
  out["best_val_accuracy"] = report.best_val_accuracy;
  out["best_step"] = report.best_step;
  out["checkpoint"] = report.checkpoint.empty() ? json(nullptr) : json(report.checkpoint);
  return out.dump(2) + "\n";
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace aatn
