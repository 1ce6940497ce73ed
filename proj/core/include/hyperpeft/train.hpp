#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hyperpeft/data.hpp"
#include "hyperpeft/hyper.hpp"
#include "hyperpeft/model.hpp"
#include "hyperpeft/peft.hpp"

namespace hyperpeft {

enum class TrainMode {
  kHyperFrozen,  // hypermodel only, downstream frozen
  kHyperJoint,   // hypermodel and downstream
  kFullMtf,      // downstream on (x, y)
  kFewshotMtf,   // downstream on shots ++ X ++ x
  kSharedPeft,   // one adapter shared by all tasks
  kPeftOnly,     // one adapter for a single task
};

const char* to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& name);

enum class Precision { kF64, kF32 };

struct TrainConfig {
  int steps = 1000;
  int batch_size = 16;
  double lr = 3e-3;
  std::uint64_t seed = 0;
  int k_max = 16;
  int max_len_hyper = 256;
  int max_len_down = 128;
  int max_len_tgt = 64;
  TrainMode mode = TrainMode::kHyperFrozen;
  // kF32 rounds trainable parameters through single precision after every
  // update; arithmetic is always carried out in double.
  Precision precision = Precision::kF64;
  double clip_norm = 1.0;
  CaclmLengths caclm;
  std::vector<int> checkpoint_marks;

  void validate(const std::string& prefix = "train") const;
  bool operator==(const TrainConfig&) const = default;
};

// Linear decay from cfg.lr at step 0 to 0 at cfg.steps.
double lr_at(int step, const TrainConfig& cfg);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

// One Adam update with bias correction over the non-frozen parameters that
// hold a gradient. Frozen parameters are neither updated nor tracked.
void adam_step(ParameterSet& params, AdamState& state, double lr);

// Scales non-frozen gradients so their global L2 norm is at most max_norm;
// returns the norm before clipping.
double clip_grad_norm(ParameterSet& params, double max_norm);

struct TrainState {
  AdamState adam;
  int step = 0;
};

struct StepMetrics {
  int step = 0;
  std::string mode;
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct TrainLog {
  std::vector<StepMetrics> steps;

  // Columns: step,mode,loss,lr,wall_ms
  void write_csv(const std::filesystem::path& path) const;
  double mean_loss(std::size_t begin, std::size_t end) const;
};

struct RunHooks {
  // Stop once state.step reaches this value (< 0: run to cfg.steps).
  int stop_at = -1;
  // Called whenever state.step equals one of cfg.checkpoint_marks, including
  // 0 before the first update.
  std::function<void(int step)> on_checkpoint;
};

// Per-example loss for (step, example index); `rng` is the example's stream.
using ExampleLoss = std::function<Tensor(int step, int example, Rng& rng)>;

// Generic loop: for each step, sums per-example losses (each back-propagated
// as loss / batch), clips, and applies Adam to `trainable`. Throws
// NumericError naming the step and example on a non-finite loss.
TrainLog run_training(ParameterSet& trainable, TrainState& state,
                      const TrainConfig& cfg, const ExampleLoss& loss,
                      const RunHooks& hooks = {});

// CACLM: the hypermodel reads S0 A S1 D, the frozen downstream model is
// trained to predict C from B through the generated parameters.
TrainLog hyperpretrain(HyperModel& hyper, Transformer& down, const Corpus& corpus,
                       const TrainConfig& cfg, TrainState& state,
                       const RunHooks& hooks = {});

// Plain sequence-to-sequence pretraining of the downstream model on corpus
// windows: A ++ B as input, C as target.
TrainLog pretrain_downstream(Transformer& down, const Corpus& corpus,
                             const TrainConfig& cfg, TrainState& state,
                             const RunHooks& hooks = {});

struct MtfModels {
  Transformer* down = nullptr;
  HyperModel* hyper = nullptr;  // hyper modes
  Adapter* shared = nullptr;    // kSharedPeft
};

// Marks exactly the parameters the mode may update as trainable (others
// frozen) and returns them as one set.
ParameterSet mode_parameters(const MtfModels& models, TrainMode mode);

// Input tokens a model sees for a target example (truncated per cfg).
std::vector<TokenId> downstream_source(const TaskExample& ex, const FewShotSet* shots,
                                       const TrainConfig& cfg);
std::vector<TokenId> downstream_target(const TaskExample& ex, const TrainConfig& cfg);

TrainLog mtf_train(const MtfModels& models, std::span<const Task> tasks,
                   const TrainConfig& cfg, TrainState& state,
                   const RunHooks& hooks = {});

struct FinetuneConfig {
  PeftConfig peft;
  std::vector<double> lrs = {1e-3, 1e-4, 1e-5};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  int steps = 100;
  int batch_size = 8;
  int shots = 16;  // Hyper init: train examples fed to the hypermodel
  std::vector<int> eval_marks = {0, 25, 50, 100};
  TrainConfig base;  // max lengths, clipping, precision
  bool operator==(const FinetuneConfig&) const = default;
};

struct FinetuneResult {
  std::vector<double> lrs;
  std::vector<std::uint64_t> seeds;
  std::vector<int> marks;
  // metric[lr][seed][mark]
  std::vector<std::vector<std::vector<double>>> metric;

  double mean_at(std::size_t lr_index, std::size_t mark_index) const;
  // lr index with the best mean final metric (first on ties).
  std::size_t best_lr() const;
  double best_final_mean() const { return mean_at(best_lr(), marks.size() - 1); }
  double step0_mean() const { return mean_at(0, 0); }
};

// Trains a fresh adapter on task.train for every (lr, seed) cell and records
// the task metric on task.test at each eval mark.
FinetuneResult peft_finetune(const Transformer& down, const Task& task, InitScheme init,
                             const FinetuneConfig& cfg, const HyperModel* hyper = nullptr,
                             const Adapter* shared = nullptr);

// Hyper-init adapter for a task: `shots` train examples drawn with `seed`.
Adapter hyper_init_for_task(const HyperModel& hyper, const Task& task, int shots,
                            std::uint64_t seed, int max_len_hyper);

}  // namespace hyperpeft
