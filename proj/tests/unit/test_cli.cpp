#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(HYPERPEFT_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[512];
  while (fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("hyperpeft_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    const nlohmann::json tiny = {
        {"model", {{"d_model", 8}, {"d_ff", 16}, {"max_src_len", 96}, {"max_tgt_len", 16}}},
        {"hyper_backbone", {{"d_model", 8}, {"d_ff", 16}, {"max_src_len", 64}}},
        {"peft", {{"kind", "prefix_flat"}, {"prefix_len", 2}}},
        {"train",
         {{"steps", 2}, {"batch_size", 2}, {"k_max", 2}, {"max_len_hyper", 64},
          {"max_len_down", 48}, {"max_len_tgt", 12}}},
        {"pretrain", {{"steps", 2}, {"batch_size", 2}, {"max_len_down", 48}, {"max_len_tgt", 12}}},
        {"data", {{"corpus_tokens", 4000}, {"examples_per_task", 12}, {"train_per_task", 8}}},
        {"eval", {{"shots", 2}}},
        {"io", {{"out_dir", dir_.string()}}}};
    std::ofstream(dir_ / "tiny.json") << tiny.dump();
    cfg_ = "-c " + (dir_ / "tiny.json").string();
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
  std::string cfg_;
};

TEST_F(Cli, ConfigErrorsExitTwoWithPath) {
  auto r = run("mtf " + cfg_ + " --train.steps=0");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("train.steps"), std::string::npos) << r.output;
  r = run("eval " + cfg_ + " --train.stepz=4");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("train.stepz"), std::string::npos) << r.output;
  r = run("eval " + cfg_ + " stray");
  EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, NonFiniteLossExitsThreeWithStep) {
  const auto r = run("mtf " + cfg_ + " --train.mode=full_mtf --train.steps=6 --train.lr=1e300");
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("step"), std::string::npos) << r.output;
}

TEST_F(Cli, PipelineWritesManifestsAndEvalIsByteIdentical) {
  ASSERT_EQ(run("synth-data " + cfg_).code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "tasks.jsonl"));
  auto r = run("hyperpretrain " + cfg_ + " --train.steps=4");
  ASSERT_EQ(r.code, 0) << r.output;
  for (int s : {0, 1, 2, 4}) EXPECT_TRUE(fs::exists(dir_ / ("hyper_step" + std::to_string(s) + ".hypt")));
  const auto manifest = nlohmann::json::parse(slurp(dir_ / "manifest.json"));
  EXPECT_EQ(manifest.at("command"), "hyperpretrain");
  EXPECT_EQ(manifest.at("config").at("train").at("steps"), 4);
  EXPECT_TRUE(manifest.at("versions").contains("hyperpeft"));

  const std::string ck = (dir_ / "hyper_final.hypt").string();
  r = run("mtf " + cfg_ + " --train.mode=hyper_frozen --io.init_checkpoint=" + ck);
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string mtf_ck = (dir_ / "mtf_final.hypt").string();
  ASSERT_EQ(run("eval " + cfg_ + " --io.init_checkpoint=" + mtf_ck).code, 0);
  const std::string first = slurp(dir_ / "eval.csv");
  ASSERT_EQ(run("eval " + cfg_ + " --io.init_checkpoint=" + mtf_ck).code, 0);
  EXPECT_EQ(slurp(dir_ / "eval.csv"), first);
  EXPECT_NE(first.find("AVG"), std::string::npos);

  r = run("gen-adapter " + cfg_ + " --io.init_checkpoint=" + mtf_ck);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_FALSE(fs::is_empty(dir_ / "adapters"));
}

TEST_F(Cli, GradcheckPassesOnTinyConfig) {
  const auto r = run("gradcheck " + cfg_ + " --coords 60");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("PASS"), std::string::npos);
}

}  // namespace
