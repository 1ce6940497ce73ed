#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "hyperpeft/eval.hpp"
#include "hyperpeft/hyper.hpp"
#include "hyperpeft/model.hpp"
#include "hyperpeft/peft.hpp"
#include "hyperpeft/train.hpp"

namespace hyperpeft {

struct DataConfig {
  std::uint64_t corpus_seed = 0;
  std::size_t corpus_tokens = 200000;
  std::string task_file;  // JSONL; empty means the synthetic suite
  std::uint64_t synth_seed = 0;
  std::size_t examples_per_task = 64;
  std::size_t train_per_task = 48;
  bool operator==(const DataConfig&) const = default;
};

struct IoConfig {
  std::string out_dir = "runs/default";
  // Downstream checkpoint; empty means pretrain one and save it in out_dir.
  std::string downstream;
  // Hypermodel checkpoint to start from (mtf, eval, gen-adapter, finetune).
  std::string init_checkpoint;
  // Also restore step and optimizer state from init_checkpoint.
  bool resume = false;
  std::string adapter;  // adapter file for eval / Shared init
  bool operator==(const IoConfig&) const = default;
};

struct EvalConfig {
  std::string adapter = "hyper";  // none | shared_peft | hyper | finetuned
  int shots = 16;
  std::vector<std::uint64_t> seeds = {0};
  bool fewshot_input = false;
  bool regenerate_per_example = false;
  bool held_out_only = true;
  bool operator==(const EvalConfig&) const = default;
};

inline TrainConfig pretrain_defaults() {
  TrainConfig c;
  c.steps = 1500;
  c.mode = TrainMode::kFullMtf;
  return c;
}

struct RunConfig {
  ModelConfig model;  // downstream
  ModelConfig hyper_backbone = HyperModelConfig{}.backbone;
  PeftConfig peft;
  TrainConfig train;
  // Steps of plain pretraining for a fresh downstream model (0 to skip).
  TrainConfig pretrain = pretrain_defaults();
  FinetuneConfig finetune;
  std::string finetune_init = "rand";  // rand | shared | hyper
  EvalConfig eval;
  DataConfig data;
  IoConfig io;

  HyperModelConfig hyper() const { return {hyper_backbone, peft, model}; }
  // Throws ConfigError with the dotted path of the first bad field.
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& config);
// Strict: unknown keys and wrongly typed values raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);

// "a.b.c=value": value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Reads `path` (may be empty for defaults), applies overrides in order.
RunConfig load_run_config(const std::filesystem::path& path,
                          std::span<const std::string> overrides = {});

}  // namespace hyperpeft
