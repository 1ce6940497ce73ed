#include "hyperpeft/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "hyperpeft/error.hpp"
#include "hyperpeft/ops.hpp"

namespace hyperpeft {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

std::vector<TokenId> with_eos(std::span<const TokenId> input) {
  std::vector<TokenId> src(input.begin(), input.end());
  src.push_back(vocab::kEos);
  return src;
}

// Runs fn(i) for i in [0, n) over `threads` workers, each without a tape.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), n));
  if (workers == 1) {
    NoGradGuard guard;
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        NoGradGuard guard;
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

std::vector<double> option_scores(const Transformer& model, std::span<const TokenId> input,
                                  std::span<const std::string> options,
                                  const Injections* peft) {
  NoGradGuard guard;
  const auto src = with_eos(input);
  const Tensor enc = model.encode(src, peft);
  std::vector<double> scores;
  scores.reserve(options.size());
  for (const std::string& opt : options) {
    const auto toks = tokenize(opt);
    if (toks.empty()) {
      scores.push_back(std::numeric_limits<double>::infinity());
      continue;
    }
    std::vector<TokenId> dec_in{vocab::kBos};
    dec_in.insert(dec_in.end(), toks.begin(), toks.end() - 1);
    const Tensor logits = model.decode(dec_in, enc, peft, true);
    scores.push_back(cross_entropy(logits, toks, vocab::kPad).item());
  }
  return scores;
}

std::size_t rank_classify(const Transformer& model, std::span<const TokenId> input,
                          std::span<const std::string> options, const Injections* peft) {
  if (options.empty()) throw ContractError("rank_classify: no options");
  const auto scores = option_scores(model, input, options, peft);
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] < scores[best]) best = i;
  }
  return best;
}

std::string generate_greedy(const Transformer& model, std::span<const TokenId> input,
                            const Injections* peft, int max_len) {
  NoGradGuard guard;
  const auto src = with_eos(input);
  const Tensor enc = model.encode(src, peft);
  std::vector<TokenId> dec{vocab::kBos};
  const int limit = std::min<int>(max_len, static_cast<int>(model.config().max_tgt_len) - 1);
  std::vector<TokenId> out;
  const auto vocab_size = model.config().vocab_size;
  for (int t = 0; t < limit; ++t) {
    const Tensor logits = model.decode(dec, enc, peft, true);
    const auto row = logits.data().subspan(
        static_cast<std::size_t>((static_cast<std::int64_t>(dec.size()) - 1) * vocab_size),
        static_cast<std::size_t>(vocab_size));
    const auto next = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    if (next == vocab::kEos) break;
    out.push_back(next);
    dec.push_back(next);
  }
  return detokenize(out);
}

double rouge_l(const std::string& pred, const std::string& ref) {
  const auto p = split_ws(pred);
  const auto r = split_ws(ref);
  if (p.empty() && r.empty()) return 1.0;
  if (p.empty() || r.empty()) return 0.0;
  std::vector<std::size_t> prev(r.size() + 1, 0), cur(r.size() + 1, 0);
  for (std::size_t i = 1; i <= p.size(); ++i) {
    for (std::size_t j = 1; j <= r.size(); ++j) {
      cur[j] = p[i - 1] == r[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[r.size()]);
  if (lcs == 0.0) return 0.0;
  const double precision = lcs / static_cast<double>(p.size());
  const double recall = lcs / static_cast<double>(r.size());
  return 2.0 * precision * recall / (precision + recall);
}

double macro_f1(std::span<const std::string> preds, std::span<const std::string> refs) {
  if (preds.size() != refs.size()) {
    throw ContractError("macro_f1: " + std::to_string(preds.size()) + " predictions for " +
                        std::to_string(refs.size()) + " references");
  }
  if (refs.empty()) return 0.0;
  std::set<std::string> classes(refs.begin(), refs.end());
  classes.insert(preds.begin(), preds.end());
  double total = 0.0;
  for (const std::string& c : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i] == c, r = refs[i] == c;
      tp += p && r;
      fp += p && !r;
      fn += !p && r;
    }
    total += 2 * tp / (2 * tp + fp + fn);
  }
  return total / static_cast<double>(classes.size());
}

const char* to_string(AdapterSource source) {
  switch (source) {
    case AdapterSource::kNone: return "none";
    case AdapterSource::kSharedPeft: return "shared_peft";
    case AdapterSource::kHyperGenerated: return "hyper";
    case AdapterSource::kFinetuned: return "finetuned";
  }
  return "?";
}

AdapterSource adapter_source_from_string(const std::string& name) {
  for (AdapterSource s : {AdapterSource::kNone, AdapterSource::kSharedPeft,
                          AdapterSource::kHyperGenerated, AdapterSource::kFinetuned}) {
    if (name == to_string(s)) return s;
  }
  throw ConfigError("eval.adapter", "unknown adapter source '" + name + "'");
}

FewShotSet eval_shots(const Task& task, int shots, std::uint64_t seed) {
  FewShotSet set;
  set.definition = task.definition();
  if (shots <= 0 || task.train.empty()) return set;
  Rng rng = Rng::stream(seed, fnv1a(task.name), 2);
  const std::size_t k = std::min(static_cast<std::size_t>(shots), task.train.size());
  for (std::size_t i : rng.sample_indices(task.train.size(), k)) {
    set.examples.push_back(task.train[i]);
  }
  return set;
}

namespace {

// Per-example inputs and adapters resolved once, shared by every evaluator.
struct Prepared {
  std::vector<std::vector<TokenId>> sources;
  std::vector<Injections> injections;  // one per task, or one per example
  bool per_example = false;

  const Injections* peft(std::size_t i) const {
    if (injections.empty()) return nullptr;
    return &injections[per_example ? i : 0];
  }
};

Prepared prepare(const Task& task, AdapterSource source, const EvalContext& ctx,
                 const EvalOptions& opt) {
  if (!ctx.down) throw ContractError("eval: downstream model required");
  if (task.test.empty()) throw DataError("eval: task " + task.name + " has no test examples");
  NoGradGuard guard;
  Prepared p;
  const FewShotSet shots = eval_shots(task, opt.shots, opt.seed);
  const bool shots_usable = !shots.examples.empty() || shots.definition.has_value();
  if (opt.fewshot_input && !shots_usable) {
    throw DataError("eval: task " + task.name + " cannot supply few-shot input");
  }
  for (const auto& ex : task.test) {
    p.sources.push_back(
        downstream_source(ex, opt.fewshot_input ? &shots : nullptr, opt.lengths));
  }
  switch (source) {
    case AdapterSource::kNone:
      break;
    case AdapterSource::kSharedPeft:
    case AdapterSource::kFinetuned:
      if (!ctx.adapter) throw ContractError("eval: adapter required");
      p.injections.push_back(to_injections(*ctx.adapter));
      break;
    case AdapterSource::kHyperGenerated: {
      if (!ctx.hyper) throw ContractError("eval: hypermodel required");
      if (!shots_usable) throw DataError("eval: task " + task.name + " has no shots");
      const auto max_len = static_cast<std::size_t>(opt.lengths.max_len_hyper);
      if (!opt.regenerate_per_example) {
        p.injections.push_back(to_injections(ctx.hyper->generate(format_fewshot(shots, max_len))));
      } else {
        // Same shots, fresh forward pass for every example.
        p.per_example = true;
        for (std::size_t i = 0; i < task.test.size(); ++i) {
          p.injections.push_back(to_injections(ctx.hyper->generate(format_fewshot(shots, max_len))));
        }
      }
      break;
    }
  }
  return p;
}

}  // namespace

TaskEvaluation eval_task(const Task& task, AdapterSource source, const EvalContext& ctx,
                         const EvalOptions& options) {
  const Prepared p = prepare(task, source, ctx, options);
  const Transformer& model = *ctx.down;
  const std::size_t n = task.test.size();
  std::vector<std::string> preds(n);
  std::vector<double> losses(n);
  parallel_for(n, options.threads, [&](std::size_t i) {
    const TaskExample& ex = task.test[i];
    const Injections* peft = p.peft(i);
    if (ex.options) {
      preds[i] = (*ex.options)[rank_classify(model, p.sources[i], *ex.options, peft)];
    } else {
      preds[i] = generate_greedy(model, p.sources[i], peft, options.lengths.max_len_tgt);
    }
    losses[i] = seq_loss(model, p.sources[i], downstream_target(ex, options.lengths), peft).item();
  });

  std::vector<std::string> refs;
  for (const auto& ex : task.test) refs.push_back(ex.target);
  double value = 0.0;
  switch (task.metric) {
    case Metric::kAccuracy:
      for (std::size_t i = 0; i < n; ++i) value += preds[i] == refs[i];
      value /= static_cast<double>(n);
      break;
    case Metric::kRougeL:
      for (std::size_t i = 0; i < n; ++i) value += rouge_l(preds[i], refs[i]);
      value /= static_cast<double>(n);
      break;
    case Metric::kMacroF1:
      value = macro_f1(preds, refs);
      break;
  }
  TaskEvaluation out;
  out.row = {task.name, to_string(task.metric), value, n, to_string(source), options.seed};
  out.predictions = std::move(preds);
  double total = 0.0;
  for (double l : losses) total += l;
  out.mean_loss = total / static_cast<double>(n);
  return out;
}

double eval_task_loss(const Task& task, AdapterSource source, const EvalContext& ctx,
                      const EvalOptions& options) {
  const Prepared p = prepare(task, source, ctx, options);
  const std::size_t n = task.test.size();
  std::vector<double> losses(n);
  parallel_for(n, options.threads, [&](std::size_t i) {
    losses[i] = seq_loss(*ctx.down, p.sources[i],
                         downstream_target(task.test[i], options.lengths), p.peft(i))
                    .item();
  });
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(n);
}

void write_report(std::span<const ReportRow> rows, const std::filesystem::path& path,
                  const nlohmann::json& config) {
  auto fmt = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  std::ostringstream csv;
  csv << "task,metric,value,n,adapter,seed\n";
  double sum = 0.0;
  std::size_t n_total = 0;
  for (const ReportRow& r : rows) {
    csv << r.task << ',' << r.metric << ',' << fmt(r.value) << ',' << r.n << ',' << r.adapter
        << ',' << r.seed << '\n';
    sum += r.value;
    n_total += r.n;
  }
  const double avg = rows.empty() ? 0.0 : sum / static_cast<double>(rows.size());
  csv << "AVG,mixed," << fmt(avg) << ',' << n_total << ','
      << (rows.empty() ? std::string() : rows.front().adapter) << ','
      << (rows.empty() ? 0 : rows.front().seed) << '\n';

  const std::string body = csv.str();
  {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out << body;
    if (!out) throw DataError("write failed: " + path.string());
  }
  nlohmann::ordered_json side;
  char id[17];
  std::snprintf(id, sizeof id, "%016llx",
                static_cast<unsigned long long>(fnv1a(config.dump() + body)));
  side["run_id"] = id;
  side["config"] = config;
  side["average"] = avg;
  side["rows"] = nlohmann::json::array();
  for (const ReportRow& r : rows) {
    side["rows"].push_back({{"task", r.task},
                            {"metric", r.metric},
                            {"value", r.value},
                            {"n", r.n},
                            {"adapter", r.adapter},
                            {"seed", r.seed}});
  }
  std::ofstream js(path.string() + ".json", std::ios::trunc);
  if (!js) throw DataError("cannot open " + path.string() + ".json for writing");
  js << side.dump(2) << '\n';
}

}  // namespace hyperpeft
