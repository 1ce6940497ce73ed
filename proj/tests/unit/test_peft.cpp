#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "hyperpeft/error.hpp"
#include "hyperpeft/peft.hpp"
#include "oracles.hpp"

namespace hyperpeft {
namespace {

namespace fs = std::filesystem;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("hyperpeft_test_" + name);
}

TEST(PeftConfig, Validate) {
  EXPECT_THROW((PeftConfig{PeftKind::kPrefixFlat, 0, 4, 0}.validate()), ConfigError);
  EXPECT_THROW((PeftConfig{PeftKind::kLora, 8, 0, 0}.validate()), ConfigError);
  EXPECT_NO_THROW((PeftConfig{PeftKind::kLora, 0, 2, 0}.validate()));
  EXPECT_EQ(peft_kind_from_string("prefix_mlp"), PeftKind::kPrefixMlp);
  EXPECT_THROW(peft_kind_from_string("adapter"), ConfigError);
}

class PeftKinds : public ::testing::TestWithParam<PeftKind> {};

TEST_P(PeftKinds, ParameterCountMatchesAllocatedTensors) {
  ModelConfig mc = testing::tiny_model();
  for (int size : {1, 3}) {
    PeftConfig pc{GetParam(), size, size, size == 1 ? 0 : 5};
    Rng rng(1);
    Adapter a = init_peft(pc, mc, InitScheme::kRand, rng);
    EXPECT_EQ(adapter_kind(a), GetParam());
    EXPECT_EQ(adapter_parameters(a).numel(), peft_param_count(pc, mc));
  }
}

TEST_P(PeftKinds, SaveLoadF64IsExact) {
  ModelConfig mc = testing::tiny_model();
  PeftConfig pc{GetParam(), 3, 2, 0};
  Rng rng(2);
  Adapter a = init_peft(pc, mc, InitScheme::kRand, rng);
  for (auto& p : adapter_parameters(a).items()) {
    for (double& x : p.tensor.mutable_data()) x = rng.normal();
  }
  const auto path = temp_file(std::string("rt_") + to_string(GetParam()) + ".hpft");
  save_peft(a, path, Dtype::kF64);
  Adapter b = load_peft(path, GetParam());
  auto pa = adapter_parameters(a), pb = adapter_parameters(b);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa.items()[i].name, pb.items()[i].name);
    EXPECT_EQ(pa.items()[i].tensor.shape(), pb.items()[i].tensor.shape());
    EXPECT_EQ(values(pa.items()[i].tensor), values(pb.items()[i].tensor));
  }
  // f32 round trip equals rounding through float.
  save_peft(a, path, Dtype::kF32);
  Adapter c = load_peft(path);
  auto pc32 = adapter_parameters(c);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto expect = values(pa.items()[i].tensor);
    round_to_f32(expect);
    EXPECT_EQ(values(pc32.items()[i].tensor), expect);
  }
  const PeftKind other = GetParam() == PeftKind::kLora ? PeftKind::kPrefixFlat : PeftKind::kLora;
  EXPECT_THROW(load_peft(path, other), FormatError);
  fs::remove(path);
}

INSTANTIATE_TEST_SUITE_P(AllKinds, PeftKinds,
                         ::testing::Values(PeftKind::kPrefixFlat, PeftKind::kPrefixMlp,
                                           PeftKind::kLora),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(PeftFile, RejectsCorruptFiles) {
  ModelConfig mc = testing::tiny_model();
  Rng rng(3);
  Adapter a = init_peft({PeftKind::kPrefixFlat, 2, 0, 0}, mc, InitScheme::kRand, rng);
  const auto path = temp_file("corrupt.hpft");
  save_peft(a, path, Dtype::kF64);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << b;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write(bad_magic);
  EXPECT_THROW(load_peft(path), FormatError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  write(bad_version);
  EXPECT_THROW(load_peft(path), FormatError);
  write(bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(load_peft(path), FormatError);
  write(bytes.substr(0, 10));
  EXPECT_THROW(load_peft(path), FormatError);
  EXPECT_THROW(load_peft(temp_file("missing.hpft")), FormatError);
  fs::remove(path);
}

TEST(PeftFile, LayoutIsMagicVersionHeaderPayload) {
  ModelConfig mc = testing::tiny_model();
  Rng rng(4);
  Adapter a = init_peft({PeftKind::kPrefixFlat, 2, 0, 0}, mc, InitScheme::kRand, rng);
  const auto path = temp_file("layout.hpft");
  save_peft(a, path, Dtype::kF32);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(bytes.substr(0, 4), "HPFT");
  const auto u32 = [&](std::size_t at) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at])) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 1])) << 8 |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 2])) << 16 |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 3])) << 24;
  };
  EXPECT_EQ(u32(4), 1u);
  const auto header_len = u32(8);
  const auto header = nlohmann::json::parse(bytes.substr(12, header_len));
  EXPECT_EQ(header.at("kind"), "prefix_flat");
  EXPECT_EQ(header.at("dtype"), "f32");
  const auto numel = static_cast<std::size_t>(2 * 2 * 2 * 2 * mc.d_model);
  EXPECT_EQ(bytes.size(), 12 + header_len + 4 * numel);
  fs::remove(path);
}

TEST(InitPeft, SharedAndHyperCopySource) {
  ModelConfig mc = testing::tiny_model();
  Rng rng(5);
  PeftConfig mlp{PeftKind::kPrefixMlp, 3, 0, 0};
  Adapter src = init_peft(mlp, mc, InitScheme::kRand, rng);
  auto& reparam = std::get<PrefixMlpReparam>(src);
  for (auto& h : reparam.heads) {
    for (double& x : h.w2.mutable_data()) x = rng.normal(0.0, 0.1);
  }
  Adapter copy = init_peft(mlp, mc, InitScheme::kShared, rng, &src);
  auto ps = adapter_parameters(src), pc = adapter_parameters(copy);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(values(ps.items()[i].tensor), values(pc.items()[i].tensor));
    EXPECT_FALSE(ps.items()[i].tensor.same(pc.items()[i].tensor));
  }
  // Prefix-Flat from a Prefix-MLP source flattens to the same prefixes.
  Adapter flat = init_peft({PeftKind::kPrefixFlat, 3, 0, 0}, mc, InitScheme::kHyper, rng, &src);
  EXPECT_EQ(values(std::get<PrefixParams>(flat).prefix),
            values(prefix_mlp_forward(reparam).prefix));
  EXPECT_THROW(init_peft({PeftKind::kLora, 3, 2, 0}, mc, InitScheme::kHyper, rng, &src),
               ConfigError);
  EXPECT_THROW(init_peft(mlp, mc, InitScheme::kShared, rng, nullptr), ConfigError);
}

TEST(InitPeft, RandStartsAsNoOpForMlpAndLora) {
  ModelConfig mc = testing::tiny_model();
  Rng rng(6);
  Transformer m(mc, rng);
  const std::vector<TokenId> src = {1, 2, 3}, tgt = {4, 5};
  const double base = seq_loss(m, src, tgt).item();
  for (PeftKind k : {PeftKind::kPrefixMlp, PeftKind::kLora}) {
    Adapter a = init_peft({k, 4, 2, 0}, mc, InitScheme::kRand, rng);
    const Injections inj = to_injections(a);
    if (k == PeftKind::kLora) {
      EXPECT_EQ(seq_loss(m, src, tgt, &inj).item(), base);
    } else {
      // Zero prefixes still take attention mass, so only finiteness holds.
      EXPECT_TRUE(std::isfinite(seq_loss(m, src, tgt, &inj).item()));
    }
  }
}

TEST(MlpHead, ZeroFinalLayerOutputsZero) {
  Rng rng(7);
  MlpHead h = make_head(4, 6, 5, rng);
  Tensor x = testing::random_tensor({3, 4}, rng);
  Tensor y = head_forward(x, h);
  EXPECT_EQ(y.shape(), (Shape{3, 5}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

}  // namespace
}  // namespace hyperpeft
