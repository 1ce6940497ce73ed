#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include "hyperpeft/checkpoint.hpp"
#include "hyperpeft/error.hpp"
#include "hyperpeft/eval.hpp"
#include "hyperpeft/train.hpp"

namespace hyperpeft::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path out_dir(const RunConfig& c) {
  fs::path dir(c.io.out_dir);
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

void write_manifest(const Invocation& inv, const json& artifacts) {
  json m;
  m["command"] = inv.command;
  m["argv"] = inv.argv;
  m["config"] = to_json(inv.config);
  m["seeds"] = {{"train", inv.config.train.seed},
                {"pretrain", inv.config.pretrain.seed},
                {"corpus", inv.config.data.corpus_seed},
                {"synth", inv.config.data.synth_seed},
                {"eval", inv.config.eval.seeds},
                {"finetune", inv.config.finetune.seeds}};
  m["versions"] = {{"hyperpeft", HYPERPEFT_VERSION},
                   {"compiler", __VERSION__},
                   {"cplusplus", __cplusplus}};
  m["artifacts"] = artifacts;
  write_json(out_dir(inv.config) / "manifest.json", m);
}

std::vector<Task> load_tasks(const RunConfig& c) {
  if (!c.data.task_file.empty()) return load_tasks_jsonl(c.data.task_file);
  return synth_tasks(c.data.synth_seed, c.data.examples_per_task, c.data.train_per_task);
}

Corpus load_corpus(const RunConfig& c) {
  return synth_corpus(c.data.corpus_seed, c.data.corpus_tokens);
}

// Loads the downstream model named in the config, or pretrains one (and
// saves it to out_dir/downstream.hypt) when none is given.
Transformer downstream(const RunConfig& c, std::ostream& out, json& artifacts) {
  Rng rng = Rng::stream(c.pretrain.seed, 0x646f776eULL);
  Transformer down(c.model, rng, "down");
  fs::path path = c.io.downstream;
  if (path.empty()) path = out_dir(c) / "downstream.hypt";
  if (fs::exists(path)) {
    load_checkpoint(path).restore(down.params());
    out << "downstream: loaded " << path.string() << '\n';
  } else if (!c.io.downstream.empty()) {
    throw ConfigError("io.downstream", "no such file: " + path.string());
  } else {
    TrainState st;
    const auto t0 = std::chrono::steady_clock::now();
    const TrainLog log = pretrain_downstream(down, load_corpus(c), c.pretrain, st);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_checkpoint(path, down.params(), st, c.pretrain.seed, to_json(c));
    log.write_csv(out_dir(c) / "pretrain_log.csv");
    out << "downstream: pretrained " << c.pretrain.steps << " steps in " << secs
        << "s, final loss " << log.steps.back().loss << '\n';
  }
  artifacts["downstream"] = path.string();
  artifacts["downstream_hash"] = hash_hex(hash_parameters(down.params()));
  down.params().set_frozen(true);
  return down;
}

HyperModel hypermodel(const RunConfig& c, TrainState* state) {
  Rng rng = Rng::stream(c.train.seed, 0x6879706572ULL);
  HyperModel h(c.hyper(), rng);
  if (!c.io.init_checkpoint.empty()) {
    const Checkpoint ck = load_checkpoint(c.io.init_checkpoint);
    ck.restore(h.params());
    if (state && c.io.resume) ck.restore(*state);
  }
  return h;
}

std::vector<Task> eval_pool(const RunConfig& c, const std::vector<Task>& tasks) {
  return c.eval.held_out_only ? held_out(tasks) : tasks;
}

std::string step_name(const std::string& stem, int step) {
  return stem + "_step" + std::to_string(step) + ".hypt";
}

}  // namespace

int worker_threads() {
  const char* env = std::getenv("HYPERPEFT_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("HYPERPEFT_THREADS", "expected a positive integer");
  const long hw = std::max(1u, std::thread::hardware_concurrency());
  return static_cast<int>(std::min(n, hw));
}

int cmd_synth_data(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  const auto tasks = synth_tasks(c.data.synth_seed, c.data.examples_per_task,
                                 c.data.train_per_task);
  const fs::path path = out_dir(c) / "tasks.jsonl";
  write_tasks_jsonl(tasks, path);
  const Corpus corpus = load_corpus(c);
  out << "wrote " << tasks.size() << " tasks (" << held_out(tasks).size()
      << " held out) to " << path.string() << "; corpus has " << corpus.doc_count()
      << " documents, " << corpus.tokens.size() << " tokens\n";
  write_manifest(inv, {{"tasks", path.string()}});
  return 0;
}

int cmd_hyperpretrain(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  json artifacts;
  Transformer down = downstream(c, out, artifacts);
  TrainState state;
  HyperModel hyper = hypermodel(c, &state);
  const Corpus corpus = load_corpus(c);
  const fs::path dir = out_dir(c);
  json saved = json::array();
  json ck_config = to_json(c);
  ck_config["downstream_hash"] = artifacts["downstream_hash"];
  RunHooks hooks;
  hooks.on_checkpoint = [&](int step) {
    const fs::path p = dir / step_name("hyper", step);
    save_checkpoint(p, hyper.params(), state, c.train.seed, ck_config);
    saved.push_back(p.string());
  };
  TrainConfig tc = c.train;
  if (tc.checkpoint_marks.empty()) {
    tc.checkpoint_marks = {0, tc.steps / 4, tc.steps / 2, tc.steps};
  }
  const TrainLog log = hyperpretrain(hyper, down, corpus, tc, state, hooks);
  const fs::path final_path = dir / "hyper_final.hypt";
  save_checkpoint(final_path, hyper.params(), state, c.train.seed, ck_config);
  log.write_csv(dir / "hyperpretrain_log.csv");
  out << "hyperpretrain: " << log.steps.size() << " steps, loss " << log.mean_loss(0, 10)
      << " -> " << log.mean_loss(log.steps.size() - std::min<std::size_t>(10, log.steps.size()),
                                 log.steps.size())
      << "\ncheckpoint " << final_path.string() << " hash "
      << hash_hex(hash_parameters(hyper.params())) << '\n';
  artifacts["checkpoints"] = saved;
  artifacts["final"] = final_path.string();
  artifacts["final_hash"] = hash_hex(hash_parameters(hyper.params()));
  write_manifest(inv, artifacts);
  return 0;
}

int cmd_mtf(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  json artifacts;
  Transformer down = downstream(c, out, artifacts);
  const auto tasks = held_in(load_tasks(c));
  if (tasks.empty()) throw DataError("mtf: no held-in tasks");
  const TrainMode mode = c.train.mode;
  const bool hyper_mode = mode == TrainMode::kHyperFrozen || mode == TrainMode::kHyperJoint;
  TrainState state;
  std::optional<HyperModel> hyper;
  std::optional<Adapter> shared;
  if (hyper_mode) hyper.emplace(hypermodel(c, &state));
  if (mode == TrainMode::kSharedPeft || mode == TrainMode::kPeftOnly) {
    Rng rng = Rng::stream(c.train.seed, 0x736861726564ULL);
    shared = init_peft(c.peft, c.model, InitScheme::kRand, rng);
  }
  MtfModels models{&down, hyper ? &*hyper : nullptr, shared ? &*shared : nullptr};
  ParameterSet saved_set = mode_parameters(models, mode);
  const fs::path dir = out_dir(c);
  RunHooks hooks;
  hooks.on_checkpoint = [&](int step) {
    save_checkpoint(dir / step_name("mtf", step), saved_set, state, c.train.seed, to_json(c));
  };
  const TrainLog log = mtf_train(models, tasks, c.train, state, hooks);
  log.write_csv(dir / "mtf_log.csv");
  const fs::path final_path = dir / "mtf_final.hypt";
  save_checkpoint(final_path, saved_set, state, c.train.seed, to_json(c));
  artifacts["final"] = final_path.string();
  artifacts["final_hash"] = hash_hex(hash_parameters(saved_set));
  if (shared) {
    const fs::path ap = dir / "shared.hpft";
    save_peft(*shared, ap, Dtype::kF64);
    artifacts["adapter"] = ap.string();
  }
  out << "mtf (" << to_string(mode) << "): " << log.steps.size() << " steps, final loss "
      << (log.steps.empty() ? 0.0 : log.steps.back().loss) << "\ncheckpoint "
      << final_path.string() << " hash " << artifacts["final_hash"].get<std::string>() << '\n';
  write_manifest(inv, artifacts);
  return 0;
}

int cmd_peft_finetune(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  json artifacts;
  Transformer down = downstream(c, out, artifacts);
  const auto tasks = eval_pool(c, load_tasks(c));
  const InitScheme init = init_scheme_from_string(c.finetune_init);
  std::optional<HyperModel> hyper;
  std::optional<Adapter> shared;
  if (init == InitScheme::kHyper) {
    if (c.io.init_checkpoint.empty()) {
      throw ConfigError("io.init_checkpoint", "hyper init needs a hypermodel checkpoint");
    }
    hyper.emplace(hypermodel(c, nullptr));
  }
  if (init == InitScheme::kShared) {
    if (c.io.adapter.empty()) throw ConfigError("io.adapter", "shared init needs an adapter");
    shared = load_peft(c.io.adapter);
  }
  const fs::path path = out_dir(c) / "finetune_curves.csv";
  std::ofstream csv(path, std::ios::trunc);
  csv << "task,init,lr,seed,step,value\n";
  std::vector<ReportRow> rows;
  for (const Task& t : tasks) {
    const FinetuneResult r = peft_finetune(down, t, init, c.finetune, hyper ? &*hyper : nullptr,
                                           shared ? &*shared : nullptr);
    for (std::size_t li = 0; li < r.lrs.size(); ++li) {
      for (std::size_t si = 0; si < r.seeds.size(); ++si) {
        for (std::size_t mi = 0; mi < r.marks.size(); ++mi) {
          char buf[64];
          std::snprintf(buf, sizeof buf, "%g,%llu,%d,%.6f", r.lrs[li],
                        static_cast<unsigned long long>(r.seeds[si]), r.marks[mi],
                        r.metric[li][si][mi]);
          csv << t.name << ',' << c.finetune_init << ',' << buf << '\n';
        }
      }
    }
    rows.push_back({t.name, to_string(t.metric), r.best_final_mean(), t.test.size(),
                    std::string("finetuned_") + c.finetune_init, 0});
    out << t.name << ": step0 " << r.step0_mean() << ", best lr " << r.lrs[r.best_lr()]
        << " final " << r.best_final_mean() << '\n';
  }
  const fs::path report = out_dir(c) / "finetune_report.csv";
  write_report(rows, report, to_json(c));
  artifacts["curves"] = path.string();
  artifacts["report"] = report.string();
  write_manifest(inv, artifacts);
  return 0;
}

int cmd_eval(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  json artifacts;
  Transformer down = downstream(c, out, artifacts);
  const auto tasks = eval_pool(c, load_tasks(c));
  const AdapterSource source = adapter_source_from_string(c.eval.adapter);
  std::optional<HyperModel> hyper;
  std::optional<Adapter> adapter;
  if (source == AdapterSource::kHyperGenerated) {
    if (c.io.init_checkpoint.empty()) {
      throw ConfigError("io.init_checkpoint", "hyper evaluation needs a hypermodel checkpoint");
    }
    hyper.emplace(hypermodel(c, nullptr));
  }
  if (source == AdapterSource::kSharedPeft || source == AdapterSource::kFinetuned) {
    if (c.io.adapter.empty()) throw ConfigError("io.adapter", "adapter file required");
    adapter = load_peft(c.io.adapter, c.peft.kind);
  }
  EvalContext ctx{&down, hyper ? &*hyper : nullptr, adapter ? &*adapter : nullptr};
  EvalOptions o;
  o.shots = c.eval.shots;
  o.fewshot_input = c.eval.fewshot_input;
  o.regenerate_per_example = c.eval.regenerate_per_example;
  o.threads = worker_threads();
  o.lengths = c.train;
  std::vector<ReportRow> rows;
  for (std::uint64_t seed : c.eval.seeds) {
    o.seed = seed;
    for (const Task& t : tasks) {
      rows.push_back(eval_task(t, source, ctx, o).row);
      out << t.name << " seed " << seed << ": " << rows.back().metric << ' '
          << rows.back().value << '\n';
    }
  }
  const fs::path report = out_dir(c) / "eval.csv";
  write_report(rows, report, to_json(c));
  artifacts["report"] = report.string();
  write_manifest(inv, artifacts);
  return 0;
}

int cmd_gen_adapter(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  if (c.io.init_checkpoint.empty()) {
    throw ConfigError("io.init_checkpoint", "gen-adapter needs a hypermodel checkpoint");
  }
  HyperModel hyper = hypermodel(c, nullptr);
  const auto tasks = eval_pool(c, load_tasks(c));
  const fs::path dir = out_dir(c) / "adapters";
  fs::create_directories(dir);
  json files = json::array();
  for (const Task& t : tasks) {
    const Adapter a = hyper_init_for_task(hyper, t, c.eval.shots, c.eval.seeds.front(),
                                          c.train.max_len_hyper);
    const fs::path p = dir / (t.name + ".hpft");
    save_peft(a, p, Dtype::kF64);
    files.push_back(p.string());
    out << t.name << " -> " << p.string() << " (" << adapter_parameters(a).numel()
        << " parameters)\n";
  }
  write_manifest(inv, {{"adapters", files}});
  return 0;
}

int cmd_gradcheck(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng = Rng::stream(c.train.seed, 0x67726164ULL);
  Transformer down(c.model, rng, "down");
  down.params().set_frozen(true);
  HyperModel hyper(c.hyper(), rng);
  // Zero-initialised output layers would leave most of the hypermodel with
  // an exactly-zero gradient; check at a generic point instead.
  for (auto& p : hyper.params().items()) {
    for (double& x : p.tensor.mutable_data()) x += rng.normal(0.0, 0.05);
  }
  const auto tasks = synth_tasks(c.data.synth_seed, c.data.examples_per_task,
                                 c.data.train_per_task);
  Rng pick(c.train.seed);
  const MtfSample s = sample_mtf_batch(held_in(tasks), static_cast<std::size_t>(c.train.k_max),
                                       pick);
  const auto fewshot = format_fewshot(s.shots, static_cast<std::size_t>(c.train.max_len_hyper));
  const auto src = downstream_source(s.target, nullptr, c.train);
  const auto tgt = downstream_target(s.target, c.train);
  auto f = [&] {
    const Injections inj = to_injections(hyper.generate(fewshot));
    return seq_loss(down, src, tgt, &inj);
  };
  std::vector<Tensor> params;
  for (const auto& p : hyper.params().items()) params.push_back(p.tensor);
  GradCheckOptions opt;
  opt.max_coords = inv.gradcheck_coords;
  opt.seed = c.train.seed;
  const GradCheckResult r = grad_check(f, params, opt);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = r.max_rel_error < 1e-4 && r.coords_checked >= std::min(200, inv.gradcheck_coords);
  out << "gradcheck " << to_string(c.peft.kind) << ": coords " << r.coords_checked
      << " max_rel_err " << r.max_rel_error << " time " << secs << "s "
      << (ok ? "PASS" : "FAIL") << '\n';
  write_manifest(inv, {{"max_rel_error", r.max_rel_error}, {"coords", r.coords_checked}});
  return ok ? 0 : 1;
}

}  // namespace hyperpeft::cli
