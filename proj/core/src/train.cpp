#include "hyperpeft/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "hyperpeft/error.hpp"
#include "hyperpeft/eval.hpp"
#include "hyperpeft/ops.hpp"

namespace hyperpeft {

namespace {

std::uint64_t name_key(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

void truncate(std::vector<TokenId>& v, int max_len) {
  if (max_len >= 0 && v.size() > static_cast<std::size_t>(max_len)) {
    v.resize(static_cast<std::size_t>(max_len));
  }
}

void zero_all(ParameterSet& params) { params.zero_grad(); }

}  // namespace

const char* to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kHyperFrozen: return "hyper_frozen";
    case TrainMode::kHyperJoint: return "hyper_joint";
    case TrainMode::kFullMtf: return "full_mtf";
    case TrainMode::kFewshotMtf: return "fewshot_mtf";
    case TrainMode::kSharedPeft: return "shared_peft";
    case TrainMode::kPeftOnly: return "peft_only";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& name) {
  for (TrainMode m : {TrainMode::kHyperFrozen, TrainMode::kHyperJoint, TrainMode::kFullMtf,
                      TrainMode::kFewshotMtf, TrainMode::kSharedPeft, TrainMode::kPeftOnly}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("train.mode", "unknown mode '" + name + "'");
}

void TrainConfig::validate(const std::string& prefix) const {
  if (steps < 1) throw ConfigError(prefix + ".steps", "must be >= 1");
  if (batch_size < 1) throw ConfigError(prefix + ".batch_size", "must be >= 1");
  if (!(lr > 0.0)) throw ConfigError(prefix + ".lr", "must be > 0");
  if (k_max < 0) throw ConfigError(prefix + ".k_max", "must be >= 0");
  if (max_len_hyper < 1) throw ConfigError(prefix + ".max_len_hyper", "must be >= 1");
  if (max_len_down < 2) throw ConfigError(prefix + ".max_len_down", "must be >= 2");
  if (max_len_tgt < 2) throw ConfigError(prefix + ".max_len_tgt", "must be >= 2");
  if (!(clip_norm > 0.0)) throw ConfigError(prefix + ".clip_norm", "must be > 0");
  for (int m : checkpoint_marks) {
    if (m < 0 || m > steps) {
      throw ConfigError(prefix + ".checkpoint_marks", "marks must lie in [0, steps]");
    }
  }
}

double lr_at(int step, const TrainConfig& cfg) {
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(cfg.steps);
  return cfg.lr * std::max(0.0, frac);
}

void adam_step(ParameterSet& params, AdamState& state, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (Parameter& p : params.items()) {
    if (p.frozen || !p.tensor.has_grad()) continue;
    auto g = p.tensor.grad();
    auto w = p.tensor.mutable_data();
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.empty()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= lr * mh / (std::sqrt(vh) + state.eps);
    }
  }
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter& p : params.items()) {
    if (p.frozen || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Parameter& p : params.items()) {
      if (p.frozen || !p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= s;
    }
  }
  return norm;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << "step,mode,loss,lr,wall_ms\n";
  out << std::setprecision(9);
  for (const auto& s : steps) {
    out << s.step << ',' << s.mode << ',' << s.loss << ',' << s.lr << ','
        << std::fixed << std::setprecision(3) << s.wall_ms << std::defaultfloat
        << std::setprecision(9) << '\n';
  }
}

double TrainLog::mean_loss(std::size_t begin, std::size_t end) const {
  end = std::min(end, steps.size());
  if (begin >= end) return 0.0;
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += steps[i].loss;
  return s / static_cast<double>(end - begin);
}

TrainLog run_training(ParameterSet& trainable, TrainState& state, const TrainConfig& cfg,
                      const ExampleLoss& loss, const RunHooks& hooks) {
  cfg.validate();
  auto is_mark = [&](int step) {
    return std::find(cfg.checkpoint_marks.begin(), cfg.checkpoint_marks.end(), step) !=
           cfg.checkpoint_marks.end();
  };
  const int stop = hooks.stop_at >= 0 ? std::min(hooks.stop_at, cfg.steps) : cfg.steps;
  TrainLog log;
  if (state.step == 0 && hooks.on_checkpoint && is_mark(0)) hooks.on_checkpoint(0);
  while (state.step < stop) {
    const auto t0 = std::chrono::steady_clock::now();
    const int step = state.step;
    zero_all(trainable);
    double total = 0.0;
    for (int i = 0; i < cfg.batch_size; ++i) {
      Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(step),
                            static_cast<std::uint64_t>(i));
      Tensor l = loss(step, i, rng);
      const double value = l.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) +
                           ", example " + std::to_string(i));
      }
      total += value;
      backward(scale(l, 1.0 / cfg.batch_size));
    }
    clip_grad_norm(trainable, cfg.clip_norm);
    const double lr = lr_at(step, cfg);
    adam_step(trainable, state.adam, lr);
    if (cfg.precision == Precision::kF32) {
      for (Parameter& p : trainable.items()) {
        if (!p.frozen) round_to_f32(p.tensor.mutable_data());
      }
    }
    zero_all(trainable);
    ++state.step;
    const double ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
    log.steps.push_back({step, to_string(cfg.mode), total / cfg.batch_size, lr, ms});
    if (hooks.on_checkpoint && is_mark(state.step)) hooks.on_checkpoint(state.step);
  }
  return log;
}

TrainLog hyperpretrain(HyperModel& hyper, Transformer& down, const Corpus& corpus,
                       const TrainConfig& cfg, TrainState& state, const RunHooks& hooks) {
  hyper.params().set_frozen(false);
  down.params().set_frozen(true);
  ParameterSet trainable = hyper.params();
  TrainConfig c = cfg;
  c.mode = TrainMode::kHyperFrozen;
  auto loss = [&](int, int, Rng& rng) {
    const auto window = sample_window(corpus, c.caclm.total(), rng);
    const CaclmExample ex = caclm_split(window, c.caclm);
    std::vector<TokenId> hyper_in = ex.hyper_input;
    truncate(hyper_in, c.max_len_hyper);
    std::vector<TokenId> src = ex.downstream_input;
    truncate(src, c.max_len_down - 1);
    std::vector<TokenId> tgt = ex.target;
    truncate(tgt, c.max_len_tgt - 1);
    const Adapter phi = hyper.generate(hyper_in);
    const Injections inj = to_injections(phi);
    return seq_loss(down, src, tgt, &inj);
  };
  return run_training(trainable, state, c, loss, hooks);
}

TrainLog pretrain_downstream(Transformer& down, const Corpus& corpus, const TrainConfig& cfg,
                             TrainState& state, const RunHooks& hooks) {
  down.params().set_frozen(false);
  ParameterSet trainable = down.params();
  TrainConfig c = cfg;
  c.mode = TrainMode::kFullMtf;
  auto loss = [&](int, int, Rng& rng) {
    const auto window = sample_window(corpus, c.caclm.total(), rng);
    const CaclmExample ex = caclm_split(window, c.caclm);
    std::vector<TokenId> src = ex.segments[0];
    src.insert(src.end(), ex.segments[1].begin(), ex.segments[1].end());
    truncate(src, c.max_len_down - 1);
    std::vector<TokenId> tgt = ex.target;
    truncate(tgt, c.max_len_tgt - 1);
    return seq_loss(down, src, tgt);
  };
  return run_training(trainable, state, c, loss, hooks);
}

ParameterSet mode_parameters(const MtfModels& models, TrainMode mode) {
  if (!models.down) throw ContractError("mtf: downstream model required");
  const bool hyper_mode = mode == TrainMode::kHyperFrozen || mode == TrainMode::kHyperJoint;
  const bool peft_mode = mode == TrainMode::kSharedPeft || mode == TrainMode::kPeftOnly;
  if (hyper_mode && !models.hyper) throw ContractError("mtf: hypermodel required");
  if (peft_mode && !models.shared) throw ContractError("mtf: adapter required");

  const bool down_trains = mode == TrainMode::kHyperJoint || mode == TrainMode::kFullMtf ||
                           mode == TrainMode::kFewshotMtf;
  models.down->params().set_frozen(!down_trains);
  ParameterSet set;
  if (models.hyper) {
    models.hyper->params().set_frozen(!hyper_mode);
    if (hyper_mode) set.append(models.hyper->params());
  }
  if (down_trains) set.append(models.down->params());
  if (peft_mode) set.append(adapter_parameters(*models.shared));
  return set;
}

std::vector<TokenId> downstream_source(const TaskExample& ex, const FewShotSet* shots,
                                       const TrainConfig& cfg) {
  std::vector<TokenId> x = tokenize(ex.input);
  if (!shots) {
    truncate(x, cfg.max_len_down - 1);
    return x;
  }
  x.insert(x.begin(), vocab::kX);
  truncate(x, cfg.max_len_down - 1);
  std::vector<TokenId> src;
  if (!shots->examples.empty() || shots->definition) {
    src = format_fewshot(*shots, static_cast<std::size_t>(cfg.max_len_hyper));
  }
  src.insert(src.end(), x.begin(), x.end());
  return src;
}

std::vector<TokenId> downstream_target(const TaskExample& ex, const TrainConfig& cfg) {
  std::vector<TokenId> y = tokenize(ex.target);
  truncate(y, cfg.max_len_tgt - 1);
  return y;
}

TrainLog mtf_train(const MtfModels& models, std::span<const Task> tasks,
                   const TrainConfig& cfg, TrainState& state, const RunHooks& hooks) {
  ParameterSet trainable = mode_parameters(models, cfg.mode);
  const TrainMode mode = cfg.mode;
  const Transformer& down = *models.down;
  auto loss = [&](int, int, Rng& rng) -> Tensor {
    const MtfSample s = sample_mtf_batch(tasks, static_cast<std::size_t>(cfg.k_max), rng);
    const auto tgt = downstream_target(s.target, cfg);
    switch (mode) {
      case TrainMode::kHyperFrozen:
      case TrainMode::kHyperJoint: {
        const auto shots =
            format_fewshot(s.shots, static_cast<std::size_t>(cfg.max_len_hyper));
        const Adapter phi = models.hyper->generate(shots);
        const Injections inj = to_injections(phi);
        return seq_loss(down, downstream_source(s.target, nullptr, cfg), tgt, &inj);
      }
      case TrainMode::kFullMtf:
        return seq_loss(down, downstream_source(s.target, nullptr, cfg), tgt);
      case TrainMode::kFewshotMtf:
        return seq_loss(down, downstream_source(s.target, &s.shots, cfg), tgt);
      case TrainMode::kSharedPeft:
      case TrainMode::kPeftOnly: {
        const Injections inj = to_injections(*models.shared);
        return seq_loss(down, downstream_source(s.target, nullptr, cfg), tgt, &inj);
      }
    }
    throw ContractError("mtf: unknown mode");
  };
  TrainLog log = run_training(trainable, state, cfg, loss, hooks);
  return log;
}

double FinetuneResult::mean_at(std::size_t lr_index, std::size_t mark_index) const {
  const auto& cells = metric.at(lr_index);
  double s = 0.0;
  for (const auto& curve : cells) s += curve.at(mark_index);
  return cells.empty() ? 0.0 : s / static_cast<double>(cells.size());
}

std::size_t FinetuneResult::best_lr() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < lrs.size(); ++i) {
    if (mean_at(i, marks.size() - 1) > mean_at(best, marks.size() - 1)) best = i;
  }
  return best;
}

Adapter hyper_init_for_task(const HyperModel& hyper, const Task& task, int shots,
                            std::uint64_t seed, int max_len_hyper) {
  const FewShotSet set = eval_shots(task, shots, seed);
  const auto tokens = format_fewshot(set, static_cast<std::size_t>(max_len_hyper));
  return hyper.init_adapter(tokens);
}

FinetuneResult peft_finetune(const Transformer& down, const Task& task, InitScheme init,
                             const FinetuneConfig& cfg, const HyperModel* hyper,
                             const Adapter* shared) {
  if (cfg.lrs.empty() || cfg.seeds.empty() || cfg.eval_marks.empty()) {
    throw ConfigError("finetune", "lrs, seeds and eval_marks must be non-empty");
  }
  if (init == InitScheme::kHyper && !hyper) {
    throw ConfigError("finetune.init", "hyper init requires a hypermodel");
  }
  if (init == InitScheme::kShared && !shared) {
    throw ConfigError("finetune.init", "shared init requires a shared adapter");
  }
  if (task.train.empty() || task.test.empty()) {
    throw DataError("finetune: task " + task.name + " needs train and test examples");
  }
  FinetuneResult result;
  result.lrs = cfg.lrs;
  result.seeds = cfg.seeds;
  result.marks = cfg.eval_marks;
  std::sort(result.marks.begin(), result.marks.end());

  // Private frozen copy: the caller's model may be trainable or shared.
  Transformer model = down.clone();
  model.params().set_frozen(true);
  for (double lr : cfg.lrs) {
    std::vector<std::vector<double>> per_seed;
    for (std::uint64_t seed : cfg.seeds) {
      Rng init_rng = Rng::stream(seed, name_key(task.name), 1);
      Adapter source;
      const Adapter* src = nullptr;
      if (init == InitScheme::kHyper) {
        source = hyper_init_for_task(*hyper, task, cfg.shots, seed, cfg.base.max_len_hyper);
        src = &source;
      } else if (init == InitScheme::kShared) {
        src = shared;
      }
      Adapter adapter = init_peft(cfg.peft, model.config(), init, init_rng, src);
      ParameterSet trainable = adapter_parameters(adapter);

      TrainConfig tc = cfg.base;
      tc.steps = std::max(1, result.marks.back());
      tc.batch_size = cfg.batch_size;
      tc.lr = lr;
      tc.seed = mix64(seed ^ name_key(task.name));
      tc.mode = TrainMode::kPeftOnly;
      tc.checkpoint_marks.clear();
      for (int m : result.marks) {
        if (m <= tc.steps) tc.checkpoint_marks.push_back(m);
      }

      EvalContext ctx{&model, nullptr, &adapter};
      EvalOptions eo;
      eo.lengths = cfg.base;
      eo.seed = seed;
      std::vector<double> curve;
      RunHooks hooks;
      hooks.on_checkpoint = [&](int) {
        curve.push_back(eval_task(task, AdapterSource::kFinetuned, ctx, eo).row.value);
      };
      TrainState state;
      auto loss = [&](int, int, Rng& rng) {
        const TaskExample& ex = task.train[rng.below(task.train.size())];
        const Injections inj = to_injections(adapter);
        return seq_loss(model, downstream_source(ex, nullptr, tc), downstream_target(ex, tc),
                        &inj);
      };
      run_training(trainable, state, tc, loss, hooks);
      per_seed.push_back(std::move(curve));
    }
    result.metric.push_back(std::move(per_seed));
  }
  return result;
}

}  // namespace hyperpeft
