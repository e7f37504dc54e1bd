#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>

#include "aatn/data.hpp"
#include "aatn/trainer.hpp"

namespace aatn {

/// Where examples come from: the synthetic pair-matching task unless
/// JSONL paths are given.
struct DataConfig {
  std::size_t n_train = 8000;
  std::size_t n_val = 1000;
  std::size_t width = 16;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> train_path;
  std::optional<std::filesystem::path> val_path;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  void validate() const;
};

/// JSON layout: {"model": {..., "align": {...}}, "train": {...}, "data": {...}}.
/// Missing keys keep their defaults; unknown keys are a ConfigError.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_json(const RunConfig& config);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

/// Train and validation sets for a config. Synthetic splits draw from data
/// seeds 2s and 2s + 1. Text JSONL builds its vocabulary from the training
/// file and returns it.
struct Splits {
  Dataset train;
  Dataset val;
  std::optional<Vocab> vocab;
};
Splits load_splits(const RunConfig& config);

std::string vocab_json(const Vocab& vocab);
Vocab load_vocab(const std::filesystem::path& path);

std::string eval_metrics_json(const EvalMetrics& metrics);
std::string mmd_report_json(const MmdReport& report);
/// Config echo, per-step {J, task, align, grad_norm}, per-eval metrics with
/// the MMD summary, best step and checkpoint path.
std::string run_report_json(const RunReport& report, const DataConfig& data);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace aatn
