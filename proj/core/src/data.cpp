#include "hyperpeft/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>

#include "hyperpeft/error.hpp"

namespace hyperpeft {

std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
  return out;
}

std::string detokenize(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

const char* to_string(Metric metric) {
  switch (metric) {
    case Metric::kAccuracy: return "accuracy";
    case Metric::kRougeL: return "rouge_l";
    case Metric::kMacroF1: return "macro_f1";
  }
  return "?";
}

Metric metric_from_string(const std::string& name) {
  if (name == "accuracy") return Metric::kAccuracy;
  if (name == "rouge_l") return Metric::kRougeL;
  if (name == "macro_f1") return Metric::kMacroF1;
  throw DataError("unknown metric '" + name + "'");
}

std::optional<std::string> Task::definition() const {
  for (const auto* split : {&train, &test}) {
    for (const auto& ex : *split) {
      if (ex.definition) return ex.definition;
    }
  }
  return std::nullopt;
}

void Task::validate() const {
  if (name.empty()) throw DataError("task with empty name");
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& ex : train) seen.emplace(ex.input, ex.target);
  for (const auto* split : {&train, &test}) {
    for (const auto& ex : *split) {
      if (ex.target.empty()) throw DataError(name + ": empty target");
      if (ex.options) {
        const auto& o = *ex.options;
        if (std::find(o.begin(), o.end(), ex.target) == o.end()) {
          throw DataError(name + ": target '" + ex.target + "' not among options");
        }
        if (metric != Metric::kAccuracy) {
          throw DataError(name + ": examples with options require the accuracy metric");
        }
      }
    }
  }
  for (const auto& ex : test) {
    if (seen.count({ex.input, ex.target})) {
      throw DataError(name + ": example '" + ex.input + "' is in both train and test");
    }
  }
}

std::vector<TokenId> format_fewshot(const FewShotSet& set, std::size_t max_len) {
  if (set.examples.empty() && !set.definition) {
    throw DataError("format_fewshot: no examples and no definition");
  }
  std::vector<TokenId> head;
  if (set.definition) {
    head.push_back(vocab::kX);
    const auto d = tokenize(*set.definition);
    head.insert(head.end(), d.begin(), d.end());
  }
  std::vector<std::vector<TokenId>> segments;
  segments.reserve(set.examples.size());
  for (const auto& ex : set.examples) {
    std::vector<TokenId> seg{vocab::kX};
    const auto x = tokenize(ex.input);
    seg.insert(seg.end(), x.begin(), x.end());
    seg.push_back(vocab::kY);
    const auto y = tokenize(ex.target);
    seg.insert(seg.end(), y.begin(), y.end());
    segments.push_back(std::move(seg));
  }
  std::size_t total = head.size();
  for (const auto& s : segments) total += s.size();
  while (total > max_len && segments.size() > 1) {
    total -= segments.back().size();
    segments.pop_back();
  }
  std::vector<TokenId> out = std::move(head);
  out.reserve(total);
  for (const auto& s : segments) out.insert(out.end(), s.begin(), s.end());
  if (out.size() > max_len) out.resize(max_len);
  return out;
}

CaclmExample caclm_split(std::span<const TokenId> window, const CaclmLengths& lens) {
  if (window.size() != lens.total()) {
    throw DataError("caclm_split: window of " + std::to_string(window.size()) +
                    " tokens, lengths sum to " + std::to_string(lens.total()));
  }
  CaclmExample ex;
  const std::size_t bounds[5] = {0, lens.a, lens.a + lens.b, lens.a + lens.b + lens.c,
                                 lens.total()};
  for (std::size_t i = 0; i < 4; ++i) {
    ex.segments[i].assign(window.begin() + static_cast<std::ptrdiff_t>(bounds[i]),
                          window.begin() + static_cast<std::ptrdiff_t>(bounds[i + 1]));
  }
  ex.hyper_input.reserve(lens.a + lens.d + 2);
  ex.hyper_input.push_back(vocab::kS0);
  ex.hyper_input.insert(ex.hyper_input.end(), ex.segments[0].begin(), ex.segments[0].end());
  ex.hyper_input.push_back(vocab::kS1);
  ex.hyper_input.insert(ex.hyper_input.end(), ex.segments[3].begin(), ex.segments[3].end());
  ex.downstream_input = ex.segments[1];
  ex.target = ex.segments[2];
  return ex;
}

MtfSample sample_mtf_batch(std::span<const Task> pool, std::size_t k_max, Rng& rng) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Task& t = pool[i];
    if (t.train.size() >= 2 || (t.train.size() == 1 && t.definition())) {
      usable.push_back(i);
    }
  }
  if (usable.empty()) throw DataError("sample_mtf_batch: no task can supply shots");
  MtfSample s;
  s.task_index = usable[rng.below(usable.size())];
  const Task& task = pool[s.task_index];
  const std::size_t n = task.train.size();
  const std::size_t target = rng.below(n);
  s.target = task.train[target];
  std::vector<std::size_t> rest;
  rest.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (i != target) rest.push_back(i);
  }
  const std::size_t k = std::min(k_max, rest.size());
  for (std::size_t j : rng.sample_indices(rest.size(), k)) {
    s.shots.examples.push_back(task.train[rest[j]]);
  }
  s.shots.definition = task.definition();
  return s;
}

std::vector<Task> load_tasks_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Task> tasks;
  std::map<std::string, std::size_t> index;
  std::map<std::string, bool> explicit_metric;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + "invalid JSON: " + e.what());
    }
    auto field = [&](const char* key) -> std::string {
      if (!rec.contains(key)) throw DataError(where + "missing \"" + key + "\"");
      if (!rec[key].is_string()) throw DataError(where + "\"" + key + "\" must be a string");
      return rec[key].get<std::string>();
    };
    const std::string name = field("task");
    const std::string split = field("split");
    TaskExample ex;
    ex.input = field("input");
    ex.target = field("target");
    if (ex.target.empty()) throw DataError(where + "empty target");
    if (rec.contains("options")) {
      try {
        ex.options = rec["options"].get<std::vector<std::string>>();
      } catch (const nlohmann::json::exception&) {
        throw DataError(where + "\"options\" must be a list of strings");
      }
      if (std::find(ex.options->begin(), ex.options->end(), ex.target) ==
          ex.options->end()) {
        throw DataError(where + "target not among options");
      }
    }
    if (rec.contains("definition")) ex.definition = field("definition");

    auto [it, inserted] = index.emplace(name, tasks.size());
    if (inserted) {
      tasks.push_back(Task{name, {}, {}, Metric::kRougeL, false});
    }
    Task& task = tasks[it->second];
    if (rec.contains("metric")) {
      Metric m;
      try {
        m = metric_from_string(field("metric"));
      } catch (const DataError& e) {
        throw DataError(where + e.what());
      }
      if (explicit_metric[name] && m != task.metric) {
        throw DataError(where + "conflicting metric for task " + name);
      }
      task.metric = m;
      explicit_metric[name] = true;
    }
    if (ex.options) {
      if (explicit_metric[name] && task.metric != Metric::kAccuracy) {
        throw DataError(where + "options require the accuracy metric");
      }
      task.metric = Metric::kAccuracy;
    }
    if (rec.contains("held_out")) {
      if (!rec["held_out"].is_boolean()) throw DataError(where + "\"held_out\" must be a boolean");
      task.held_out = rec["held_out"].get<bool>();
    }
    if (split == "train") {
      task.train.push_back(std::move(ex));
    } else if (split == "test") {
      task.test.push_back(std::move(ex));
    } else {
      throw DataError(where + "split must be \"train\" or \"test\"");
    }
  }
  for (const Task& t : tasks) t.validate();
  return tasks;
}

void write_tasks_jsonl(std::span<const Task> tasks, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  for (const Task& t : tasks) {
    for (const auto* split : {&t.train, &t.test}) {
      const char* split_name = split == &t.train ? "train" : "test";
      for (const TaskExample& ex : *split) {
        nlohmann::ordered_json rec;
        rec["task"] = t.name;
        rec["split"] = split_name;
        rec["input"] = ex.input;
        rec["target"] = ex.target;
        if (ex.options) rec["options"] = *ex.options;
        if (ex.definition) rec["definition"] = *ex.definition;
        rec["metric"] = to_string(t.metric);
        if (t.held_out) rec["held_out"] = true;
        out << rec.dump() << '\n';
      }
    }
  }
  if (!out) throw DataError("write failed: " + path.string());
}

std::vector<Task> held_in(std::span<const Task> tasks) {
  std::vector<Task> out;
  for (const Task& t : tasks) {
    if (!t.held_out) out.push_back(t);
  }
  return out;
}

std::vector<Task> held_out(std::span<const Task> tasks) {
  std::vector<Task> out;
  for (const Task& t : tasks) {
    if (t.held_out) out.push_back(t);
  }
  return out;
}

}  // namespace hyperpeft
