#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "hyperpeft/data.hpp"
#include "hyperpeft/hyper.hpp"
#include "hyperpeft/model.hpp"
#include "hyperpeft/peft.hpp"
#include "hyperpeft/train.hpp"

namespace hyperpeft {

// Mean token NLL of each option's tokens given `input` (EOS appended to the
// input, not scored on the option side). Empty options score +inf.
std::vector<double> option_scores(const Transformer& model, std::span<const TokenId> input,
                                  std::span<const std::string> options,
                                  const Injections* peft);
// argmin of option_scores; ties resolve to the lowest index.
std::size_t rank_classify(const Transformer& model, std::span<const TokenId> input,
                          std::span<const std::string> options, const Injections* peft);

// BOS-seeded argmax decoding; stops at EOS or after max_len tokens.
std::string generate_greedy(const Transformer& model, std::span<const TokenId> input,
                            const Injections* peft, int max_len);

// ROUGE-L F1 over whitespace tokens. Both empty: 1; one empty: 0.
double rouge_l(const std::string& pred, const std::string& ref);
// Unweighted mean of per-class F1 over classes in refs or preds.
double macro_f1(std::span<const std::string> preds, std::span<const std::string> refs);

enum class AdapterSource { kNone, kSharedPeft, kHyperGenerated, kFinetuned };

const char* to_string(AdapterSource source);
AdapterSource adapter_source_from_string(const std::string& name);

struct EvalContext {
  const Transformer* down = nullptr;
  const HyperModel* hyper = nullptr;  // kHyperGenerated
  const Adapter* adapter = nullptr;   // kSharedPeft, kFinetuned
};

struct EvalOptions {
  int shots = 16;            // K for kHyperGenerated (and few-shot inputs)
  std::uint64_t seed = 0;    // shot sampling
  bool fewshot_input = false;  // prepend formatted shots to every input
  // Regenerate the adapter for every test example instead of once per task.
  bool regenerate_per_example = false;
  int threads = 1;
  TrainConfig lengths;  // max_len_* truncation
};

struct ReportRow {
  std::string task;
  std::string metric;
  double value = 0.0;
  std::size_t n = 0;
  std::string adapter;
  std::uint64_t seed = 0;
};

// Per-example outputs as well as the aggregate, so callers can compare runs.
struct TaskEvaluation {
  ReportRow row;
  std::vector<std::string> predictions;
  double mean_loss = 0.0;  // mean seq_loss over test examples
};

// Shots for evaluation-time generation: drawn from task.train only.
FewShotSet eval_shots(const Task& task, int shots, std::uint64_t seed);

TaskEvaluation eval_task(const Task& task, AdapterSource source, const EvalContext& ctx,
                         const EvalOptions& options);

// Mean test-set seq_loss only (no decoding).
double eval_task_loss(const Task& task, AdapterSource source, const EvalContext& ctx,
                      const EvalOptions& options);

// CSV "task,metric,value,n,adapter,seed" plus an "AVG" row (unweighted mean
// of values) and a JSON sidecar at path + ".json".
void write_report(std::span<const ReportRow> rows, const std::filesystem::path& path,
                  const nlohmann::json& config = nlohmann::json::object());

}  // namespace hyperpeft
