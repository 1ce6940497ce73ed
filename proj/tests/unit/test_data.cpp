#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "hyperpeft/data.hpp"
#include "hyperpeft/error.hpp"

namespace hyperpeft {
namespace {

namespace fs = std::filesystem;

TEST(Tokenize, BytesRoundTripAndSpecialsAreDropped) {
  const std::string s = "h\xc3\xa9llo";
  auto t = tokenize(s);
  EXPECT_EQ(t.size(), s.size());
  EXPECT_EQ(detokenize(t), s);
  t.push_back(vocab::kEos);
  EXPECT_EQ(detokenize(t), s);
}

TEST(Caclm, PartitionPropertyAtBothScales) {
  Corpus corpus = synth_corpus(1, 40000);
  Rng rng(2);
  for (const CaclmLengths& lens : {CaclmLengths{}, kFullCaclmLengths}) {
    for (int i = 0; i < 200; ++i) {
      std::vector<TokenId> window;
      if (lens.total() <= 256) {
        window = sample_window(corpus, lens.total(), rng);
      } else {
        window.resize(lens.total());
        for (auto& t : window) t = static_cast<TokenId>(rng.below(256));
      }
      const CaclmExample ex = caclm_split(window, lens);
      std::vector<TokenId> joined;
      for (const auto& s : ex.segments) joined.insert(joined.end(), s.begin(), s.end());
      EXPECT_EQ(joined, window);
      EXPECT_EQ(ex.segments[1].size(), lens.b);
      EXPECT_EQ(ex.segments[2].size(), lens.c);
      std::vector<TokenId> hyper = {vocab::kS0};
      hyper.insert(hyper.end(), ex.segments[0].begin(), ex.segments[0].end());
      hyper.push_back(vocab::kS1);
      hyper.insert(hyper.end(), ex.segments[3].begin(), ex.segments[3].end());
      EXPECT_EQ(ex.hyper_input, hyper);
      EXPECT_EQ(ex.downstream_input, ex.segments[1]);
      EXPECT_EQ(ex.target, ex.segments[2]);
    }
  }
  std::vector<TokenId> wrong(10);
  EXPECT_THROW(caclm_split(wrong, CaclmLengths{}), DataError);
}

TEST(SampleWindow, StaysInsideOneDocument) {
  Corpus c = synth_corpus(4, 20000);
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto w = sample_window(c, 128, rng);
    bool found = false;
    for (std::size_t d = 0; d < c.doc_count() && !found; ++d) {
      const auto doc = c.doc(d);
      found = std::search(doc.begin(), doc.end(), w.begin(), w.end()) != doc.end();
    }
    EXPECT_TRUE(found);
  }
  EXPECT_THROW(sample_window(c, 100000, rng), DataError);
}

TEST(FormatFewshot, LayoutAndTruncation) {
  FewShotSet set;
  set.examples = {{"ab", "c", {}, {}}, {"de", "f", {}, {}}, {"gh", "i", {}, {}}};
  auto t = format_fewshot(set, 100);
  std::vector<TokenId> expect = {vocab::kX, 'a', 'b', vocab::kY, 'c', vocab::kX, 'd', 'e',
                                 vocab::kY, 'f', vocab::kX, 'g', 'h', vocab::kY, 'i'};
  EXPECT_EQ(t, expect);
  // Whole trailing examples go first.
  t = format_fewshot(set, 11);
  EXPECT_EQ(t.size(), 10u);
  // A single oversized example is cut on the right.
  t = format_fewshot(set, 3);
  EXPECT_EQ(t, (std::vector<TokenId>{vocab::kX, 'a', 'b'}));
  set.definition = "do";
  t = format_fewshot(set, 100);
  EXPECT_EQ(t[0], vocab::kX);
  EXPECT_EQ(t[1], 'd');
  EXPECT_THROW(format_fewshot(FewShotSet{}, 10), DataError);
}

TEST(SampleMtfBatch, ShotsComeFromTheSameTaskAndExcludeTarget) {
  auto tasks = synth_tasks(6, 20, 12);
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const MtfSample s = sample_mtf_batch(tasks, 8, rng);
    const Task& t = tasks[s.task_index];
    EXPECT_EQ(s.shots.examples.size(), 8u);
    for (const auto& e : s.shots.examples) {
      EXPECT_NE(std::find(t.train.begin(), t.train.end(), e), t.train.end());
      EXPECT_FALSE(e == s.target);
    }
    std::set<std::string> inputs;
    for (const auto& e : s.shots.examples) inputs.insert(e.input);
    EXPECT_EQ(inputs.size(), 8u);
  }
}

TEST(SynthTasks, SuiteShapeAndLabelNovelty) {
  auto tasks = synth_tasks(0, 64, 48);
  EXPECT_EQ(held_in(tasks).size(), 12u);
  EXPECT_EQ(held_out(tasks).size(), 4u);
  std::set<std::string> in_labels;
  for (const Task& t : held_in(tasks)) {
    t.validate();
    EXPECT_EQ(t.train.size(), 48u);
    EXPECT_EQ(t.test.size(), 16u);
    if (t.train[0].options) in_labels.insert(t.train[0].options->begin(), t.train[0].options->end());
  }
  for (const Task& t : held_out(tasks)) {
    EXPECT_EQ(t.metric, Metric::kAccuracy);
    for (const auto& o : *t.train[0].options) EXPECT_FALSE(in_labels.count(o)) << o;
  }
  EXPECT_EQ(synth_tasks(0, 64, 48), tasks);
  EXPECT_NE(synth_tasks(1, 64, 48), tasks);
}

TEST(SynthCorpus, Deterministic) {
  EXPECT_EQ(synth_corpus(3, 5000).tokens, synth_corpus(3, 5000).tokens);
  EXPECT_NE(synth_corpus(3, 5000).tokens, synth_corpus(4, 5000).tokens);
}

class Jsonl : public ::testing::Test {
 protected:
  fs::path path_ = fs::temp_directory_path() / "hyperpeft_test_tasks.jsonl";
  void write(const std::string& text) {
    std::ofstream out(path_, std::ios::trunc);
    out << text;
  }
  void TearDown() override { fs::remove(path_); }
};

TEST_F(Jsonl, RoundTrip) {
  auto tasks = synth_tasks(2, 10, 6);
  write_tasks_jsonl(tasks, path_);
  EXPECT_EQ(load_tasks_jsonl(path_), tasks);
}

TEST_F(Jsonl, ErrorsNameTheLine) {
  write(R"({"task":"t","split":"train","input":"a","target":"b"})"
        "\n"
        R"({"task":"t","split":"dev","input":"a","target":"b"})"
        "\n");
  try {
    load_tasks_jsonl(path_);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  write(R"({"task":"t","split":"train","input":"a","target":"b","options":["c","d"]})" "\n");
  EXPECT_THROW(load_tasks_jsonl(path_), DataError);
  write(R"({"task":"t","split":"train","input":"a"})" "\n");
  EXPECT_THROW(load_tasks_jsonl(path_), DataError);
  write("{not json\n");
  EXPECT_THROW(load_tasks_jsonl(path_), DataError);
  write(R"({"task":"t","split":"train","input":"a","target":"b"})"
        "\n"
        R"({"task":"t","split":"test","input":"a","target":"b"})"
        "\n");
  EXPECT_THROW(load_tasks_jsonl(path_), DataError);
}

TEST_F(Jsonl, OptionsImplyAccuracy) {
  write(R"({"task":"t","split":"train","input":"a","target":"c","options":["c","d"]})"
        "\n"
        R"({"task":"t","split":"test","input":"b","target":"d","options":["c","d"]})"
        "\n");
  const auto tasks = load_tasks_jsonl(path_);
  ASSERT_EQ(tasks.size(), 1u);
  EXPECT_EQ(tasks[0].metric, Metric::kAccuracy);
}

}  // namespace
}  // namespace hyperpeft
