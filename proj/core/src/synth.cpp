#include <algorithm>
#include <cctype>
#include <functional>
#include <set>

#include "hyperpeft/data.hpp"
#include "hyperpeft/error.hpp"

namespace hyperpeft {

namespace {

constexpr std::string_view kLetters = "abcdefghijklmnopqrstuvwxyz";
const std::vector<std::string> kFiller = {"the", "of", "and", "to", "in", "is",
                                          "it",  "was", "for", "on", "with", "as",
                                          "at",  "by",  "one", "all"};

std::string random_word(Rng& rng, int lo, int hi) {
  const auto n = rng.range(lo, hi);
  std::string w;
  for (std::int64_t i = 0; i < n; ++i) w.push_back(kLetters[rng.below(kLetters.size())]);
  return w;
}

std::string random_input(Rng& rng) {
  std::string s = random_word(rng, 3, 5);
  if (rng.below(2) == 1) s += " " + random_word(rng, 3, 5);
  return s;
}

std::string first_word(const std::string& s) { return s.substr(0, s.find(' ')); }

std::string reverse_words(const std::string& s) {
  const auto sp = s.find(' ');
  if (sp == std::string::npos) return s;
  return s.substr(sp + 1) + " " + s.substr(0, sp);
}

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

struct Feature {
  const char* name;
  std::function<bool(const std::string&)> fn;
};

const std::vector<Feature>& features() {
  static const std::vector<Feature> f = {
      {"first_am", [](const std::string& s) { return s.front() <= 'm'; }},
      {"two_words", [](const std::string& s) { return s.find(' ') != std::string::npos; }},
      {"last_am", [](const std::string& s) { return s.back() <= 'm'; }},
      {"even_len", [](const std::string& s) { return first_word(s).size() % 2 == 0; }},
  };
  return f;
}

// Distinct inputs for one task.
std::vector<std::string> task_inputs(Rng& rng, std::size_t n) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  while (out.size() < n) {
    std::string x = random_input(rng);
    if (seen.insert(x).second) out.push_back(std::move(x));
  }
  return out;
}

Task split_task(std::string name, std::vector<TaskExample> examples, std::size_t n_train,
                Metric metric, bool is_held_out) {
  Task t;
  t.name = std::move(name);
  t.metric = metric;
  t.held_out = is_held_out;
  t.train.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(n_train));
  t.test.assign(examples.begin() + static_cast<std::ptrdiff_t>(n_train), examples.end());
  return t;
}

}  // namespace

std::span<const TokenId> Corpus::doc(std::size_t i) const {
  const std::size_t begin = doc_offsets.at(i);
  const std::size_t end = i + 1 < doc_offsets.size() ? doc_offsets[i + 1] : tokens.size();
  return std::span<const TokenId>(tokens).subspan(begin, end - begin);
}

Corpus synth_corpus(std::uint64_t seed, std::size_t n_tokens) {
  Rng rng = Rng::stream(seed, 0x636f72707573ULL);
  Corpus c;
  while (c.tokens.size() < n_tokens) {
    std::vector<std::string> keys;
    for (int i = 0; i < 3; ++i) keys.push_back(random_word(rng, 3, 6));
    const auto length = static_cast<std::size_t>(rng.range(160, 256));
    std::string text;
    while (text.size() < length) {
      if (!text.empty()) text.push_back(' ');
      text += rng.below(2) == 0 ? keys[rng.below(keys.size())]
                                : kFiller[rng.below(kFiller.size())];
    }
    text.resize(length);
    c.doc_offsets.push_back(c.tokens.size());
    c.doc_keys.push_back(keys);
    const auto toks = tokenize(text);
    c.tokens.insert(c.tokens.end(), toks.begin(), toks.end());
  }
  return c;
}

std::vector<TokenId> sample_window(const Corpus& corpus, std::size_t length, Rng& rng) {
  std::vector<std::size_t> fits;
  for (std::size_t i = 0; i < corpus.doc_count(); ++i) {
    if (corpus.doc(i).size() >= length) fits.push_back(i);
  }
  if (fits.empty()) {
    throw DataError("sample_window: no document holds " + std::to_string(length) + " tokens");
  }
  const auto doc = corpus.doc(fits[rng.below(fits.size())]);
  const std::size_t start = rng.below(doc.size() - length + 1);
  return {doc.begin() + static_cast<std::ptrdiff_t>(start),
          doc.begin() + static_cast<std::ptrdiff_t>(start + length)};
}

std::vector<Task> synth_tasks(std::uint64_t seed, std::size_t examples_per_task,
                              std::size_t train_per_task) {
  if (train_per_task >= examples_per_task || train_per_task < 2) {
    throw DataError("synth_tasks: need 2 <= train < examples per task");
  }
  Rng rng = Rng::stream(seed, 0x7461736b73ULL);
  std::vector<Task> tasks;

  using Gen = std::pair<const char*, std::function<std::string(const std::string&)>>;
  const std::vector<Gen> generators = {
      {"copy", [](const std::string& s) { return s; }},
      {"reverse_words", reverse_words},
      {"upper", [](const std::string& s) { return upper(s); }},
      {"first_word", first_word},
      {"last_char", [](const std::string& s) { return std::string(1, s.back()); }},
      {"first_char", [](const std::string& s) { return std::string(1, s.front()); }},
  };
  for (const auto& [name, fn] : generators) {
    std::vector<TaskExample> ex;
    for (auto& x : task_inputs(rng, examples_per_task)) {
      std::string y = fn(x);
      ex.push_back({std::move(x), std::move(y), std::nullopt, std::nullopt});
    }
    tasks.push_back(split_task(name, std::move(ex), train_per_task, Metric::kRougeL, false));
  }

  // Label words are unique across the whole suite, so held-out labels can
  // only be learned from the shots.
  std::set<std::string> used;
  auto label_word = [&](const std::set<char>& taken_initials) {
    while (true) {
      std::string w = random_word(rng, 3, 4);
      if (!taken_initials.count(w.front()) && used.insert(w).second) return w;
    }
  };
  const auto& feats = features();
  for (int i = 0; i < 10; ++i) {
    const bool is_held_out = i >= 6;
    const Feature& f = feats[static_cast<std::size_t>(is_held_out ? i - 6 : i) % feats.size()];
    std::set<char> initials;
    std::vector<std::string> options;
    for (int k = 0; k < 4; ++k) {
      options.push_back(label_word(initials));
      initials.insert(options.back().front());
    }
    const std::string yes = options[0], no = options[1];
    rng.shuffle(options);
    std::vector<TaskExample> ex;
    for (auto& x : task_inputs(rng, examples_per_task)) {
      std::string y = f.fn(x) ? yes : no;
      ex.push_back({std::move(x), std::move(y), options, std::nullopt});
    }
    tasks.push_back(split_task("cls" + std::to_string(i) + "_" + f.name, std::move(ex),
                               train_per_task, Metric::kAccuracy, is_held_out));
  }
  return tasks;
}

}  // namespace hyperpeft
