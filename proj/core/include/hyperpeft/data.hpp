#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hyperpeft/rng.hpp"
#include "hyperpeft/vocab.hpp"

namespace hyperpeft {

std::vector<TokenId> tokenize(std::string_view text);
// Special ids are skipped.
std::string detokenize(std::span<const TokenId> tokens);

enum class Metric { kAccuracy, kRougeL, kMacroF1 };

const char* to_string(Metric metric);
Metric metric_from_string(const std::string& name);

struct TaskExample {
  std::string input;
  std::string target;
  std::optional<std::vector<std::string>> options;
  std::optional<std::string> definition;

  bool operator==(const TaskExample&) const = default;
};

struct Task {
  std::string name;
  std::vector<TaskExample> train;
  std::vector<TaskExample> test;
  Metric metric = Metric::kRougeL;
  // Suites split tasks into those seen in multi-task training and those
  // reserved for evaluation.
  bool held_out = false;

  // Definition shared by the task's examples, if any.
  std::optional<std::string> definition() const;
  // Throws DataError if an invariant is violated.
  void validate() const;
  bool operator==(const Task&) const = default;
};

struct FewShotSet {
  std::vector<TaskExample> examples;
  std::optional<std::string> definition;
};

// X input Y target per example, preceded by X definition when present. If the
// result exceeds `max_len`, trailing whole examples are dropped (keeping at
// least one) and what remains is right-truncated. Throws DataError for a set
// with neither examples nor a definition.
std::vector<TokenId> format_fewshot(const FewShotSet& set, std::size_t max_len);

struct CaclmLengths {
  std::size_t a = 44, b = 8, c = 32, d = 44;
  std::size_t total() const { return a + b + c + d; }
  bool operator==(const CaclmLengths&) const = default;
};
// 512-token windows with a 32-token downstream input.
inline constexpr CaclmLengths kFullCaclmLengths{176, 32, 128, 176};

struct CaclmExample {
  std::vector<TokenId> hyper_input;       // S0 A S1 D
  std::vector<TokenId> downstream_input;  // B
  std::vector<TokenId> target;            // C
  std::array<std::vector<TokenId>, 4> segments;  // A, B, C, D
};

CaclmExample caclm_split(std::span<const TokenId> window, const CaclmLengths& lens);

struct MtfSample {
  std::size_t task_index = 0;
  TaskExample target;
  FewShotSet shots;
};

// Uniform choice over tasks that can supply a target plus shots (or a
// definition), then a target and min(k_max, n-1) distinct other train
// examples. Throws DataError if no task is usable.
MtfSample sample_mtf_batch(std::span<const Task> pool, std::size_t k_max, Rng& rng);

// JSONL: {"task", "split": "train"|"test", "input", "target", "options"?,
// "definition"?, "metric"?, "held_out"?}. Unknown keys are ignored. Tasks keep
// first-appearance order.
std::vector<Task> load_tasks_jsonl(const std::filesystem::path& path);
void write_tasks_jsonl(std::span<const Task> tasks, const std::filesystem::path& path);

// Synthetic pretraining text: documents built around a few key words mixed
// with filler, so that context segments help predict a nearby span.
struct Corpus {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> doc_offsets;  // start of each document
  std::vector<std::vector<std::string>> doc_keys;

  std::size_t doc_count() const { return doc_offsets.size(); }
  std::span<const TokenId> doc(std::size_t i) const;
};

Corpus synth_corpus(std::uint64_t seed, std::size_t n_tokens);
// Window of `length` tokens lying inside one document.
std::vector<TokenId> sample_window(const Corpus& corpus, std::size_t length, Rng& rng);

// 12 held-in tasks (6 generation, 6 multiple choice) and 4 held-out multiple
// choice tasks whose label words never occur in the held-in tasks.
std::vector<Task> synth_tasks(std::uint64_t seed, std::size_t examples_per_task = 64,
                              std::size_t train_per_task = 48);

std::vector<Task> held_in(std::span<const Task> tasks);
std::vector<Task> held_out(std::span<const Task> tasks);

}  // namespace hyperpeft
