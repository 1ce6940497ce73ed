#include <gtest/gtest.h>

#include "hyperpeft/error.hpp"
#include "hyperpeft/peft.hpp"
#include "oracles.hpp"

namespace hyperpeft {
namespace {

using testing::finite_difference;
using testing::random_tokens;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor logits_of(const Transformer& m, std::span<const TokenId> src,
                 std::span<const TokenId> dec, const Injections* inj) {
  return m.decode(dec, m.encode(src, inj), inj, true);
}

TEST(ModelConfig, ValidateNamesTheField) {
  ModelConfig c;
  c.n_heads = 3;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "model.n_heads");
  }
  c = ModelConfig{};
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Transformer, ShapesAndParameterNames) {
  Rng rng(0);
  const ModelConfig c = testing::tiny_model();
  Transformer m(c, rng, "down");
  const std::vector<TokenId> src = {1, 2, 3, 4}, dec = {vocab::kBos, 5, 6};
  Tensor enc = m.encode(src);
  EXPECT_EQ(enc.shape(), (Shape{4, c.d_model}));
  EXPECT_EQ(m.decode(dec, enc, nullptr, true).shape(), (Shape{3, c.vocab_size}));
  EXPECT_NE(m.params().find("down.embed"), nullptr);
  EXPECT_NE(m.params().find("down.dec.1.cross.wv"), nullptr);
  EXPECT_NE(m.params().find("down.lm_head"), nullptr);
  // Empty input is read as a single PAD.
  EXPECT_EQ(m.encode(std::vector<TokenId>{}).shape(), (Shape{1, c.d_model}));
  const std::vector<TokenId> bad = {static_cast<TokenId>(c.vocab_size)};
  EXPECT_THROW(m.encode(bad), ContractError);
  const std::vector<TokenId> too_long(static_cast<std::size_t>(c.max_src_len) + 1, 1);
  EXPECT_THROW(m.encode(too_long), ContractError);
}

TEST(Transformer, DecoderIsCausal) {
  Rng rng(1);
  Transformer m(testing::tiny_model(), rng);
  const std::vector<TokenId> src = {10, 11, 12};
  std::vector<TokenId> a = {vocab::kBos, 1, 2, 3}, b = a;
  b[3] = 99;
  Tensor la = logits_of(m, src, a, nullptr), lb = logits_of(m, src, b, nullptr);
  const auto v = m.config().vocab_size;
  for (std::int64_t i = 0; i < 3 * v; ++i) EXPECT_EQ(la.data()[i], lb.data()[i]);
  bool differs = false;
  for (std::int64_t i = 3 * v; i < 4 * v; ++i) differs |= la.data()[i] != lb.data()[i];
  EXPECT_TRUE(differs);
}

TEST(Transformer, CloneIsIndependent) {
  Rng rng(2);
  Transformer m(testing::tiny_model(), rng, "m");
  m.params().find("m.lm_head")->frozen = true;
  Transformer c = m.clone();
  EXPECT_TRUE(c.params().find("m.lm_head")->frozen);
  c.params().items()[0].tensor.mutable_data()[0] += 1.0;
  EXPECT_NE(c.params().items()[0].tensor.data()[0], m.params().items()[0].tensor.data()[0]);
}

TEST(Transformer, FullModelGradcheckDeskConfig) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 2;
  Rng rng(3);
  Transformer m(c, rng);
  const auto src = random_tokens(rng, 7, c.vocab_size);
  const auto dec = random_tokens(rng, 5, c.vocab_size);
  const auto tgt = random_tokens(rng, 5, c.vocab_size);
  auto f = [&] { return cross_entropy(logits_of(m, src, dec, nullptr), tgt, -1); };
  std::vector<Tensor> params;
  for (const auto& p : m.params().items()) params.push_back(p.tensor);
  const auto r = finite_difference(f, params, 12, 4);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GE(r.coords, 200);
}

TEST(Transformer, SeqLossTeacherForcing) {
  Rng rng(4);
  Transformer m(testing::tiny_model(), rng);
  const std::vector<TokenId> src = {1, 2}, tgt = {7, 8, 9};
  std::vector<TokenId> s = src;
  s.push_back(vocab::kEos);
  const std::vector<TokenId> dec = {vocab::kBos, 7, 8, 9}, labels = {7, 8, 9, vocab::kEos};
  const double expect = cross_entropy(logits_of(m, s, dec, nullptr), labels, vocab::kPad).item();
  EXPECT_EQ(seq_loss(m, src, tgt).item(), expect);
}

class NoOpInjection : public ::testing::Test {
 protected:
  NoOpInjection() : rng_(5), model_(testing::tiny_model(), rng_) {}

  void expect_identical(const Injections& inj) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto src = random_tokens(rng_, 1 + rng_.below(10));
      auto dec = random_tokens(rng_, 1 + rng_.below(6));
      dec[0] = vocab::kBos;
      EXPECT_EQ(values(logits_of(model_, src, dec, nullptr)),
                values(logits_of(model_, src, dec, &inj)));
    }
  }

  Rng rng_;
  Transformer model_;
};

TEST_F(NoOpInjection, LoraWithZeroUp) {
  PeftConfig pc{PeftKind::kLora, 8, 3, 0};
  Adapter a = init_peft(pc, model_.config(), InitScheme::kRand, rng_);
  auto& lora = std::get<LoraParams>(a);
  for (auto& site : lora.down) {
    for (auto& t : site) {
      for (double& x : t.mutable_data()) x = rng_.normal();
    }
  }
  for (auto& site : lora.up) {
    for (auto& t : site) {
      for (double& x : t.mutable_data()) x = 0.0;
    }
  }
  expect_identical(to_injections(a));
}

TEST_F(NoOpInjection, LoraWithZeroGates) {
  PeftConfig pc{PeftKind::kLora, 8, 3, 0};
  Adapter a = init_peft(pc, model_.config(), InitScheme::kRand, rng_);
  auto& lora = std::get<LoraParams>(a);
  for (int s = 0; s < 3; ++s) {
    for (int m = 0; m < 2; ++m) {
      for (double& x : lora.up[s][m].mutable_data()) x = rng_.normal();
      for (double& x : lora.raw_gate[s][m].mutable_data()) x = 0.0;
    }
  }
  expect_identical(to_injections(a));
}

TEST_F(NoOpInjection, EmptyPrefix) {
  const auto& c = model_.config();
  PrefixParams p{Tensor::zeros({c.n_layers, 2, 2, 0, c.d_model})};
  expect_identical(to_injections(p));
}

TEST_F(NoOpInjection, NonTrivialAdaptersDoChangeLogits) {
  PeftConfig pc{PeftKind::kPrefixFlat, 4, 0, 0};
  Adapter a = init_peft(pc, model_.config(), InitScheme::kRand, rng_);
  for (double& x : std::get<PrefixParams>(a).prefix.mutable_data()) x = rng_.normal();
  const Injections inj = to_injections(a);
  const std::vector<TokenId> src = {3, 4, 5}, dec = {vocab::kBos, 1};
  EXPECT_NE(values(logits_of(model_, src, dec, nullptr)),
            values(logits_of(model_, src, dec, &inj)));
}

TEST(Transformer, PrefixAndLoraGradcheck) {
  Rng rng(6);
  Transformer m(testing::tiny_model(), rng);
  m.params().set_frozen(true);
  for (PeftKind kind : {PeftKind::kPrefixFlat, PeftKind::kPrefixMlp, PeftKind::kLora}) {
    PeftConfig pc{kind, 3, 2, 6};
    Adapter a = init_peft(pc, m.config(), InitScheme::kRand, rng);
    ParameterSet ps = adapter_parameters(a);
    // Move away from the zero-initialised blocks so every path is exercised.
    for (auto& p : ps.items()) {
      for (double& x : p.tensor.mutable_data()) x += rng.normal(0.0, 0.3);
    }
    std::vector<Tensor> params;
    for (auto& p : ps.items()) params.push_back(p.tensor);
    const std::vector<TokenId> src = {5, 6, 7, 8}, tgt = {9, 10};
    auto f = [&] {
      const Injections inj = to_injections(a);
      return seq_loss(m, src, tgt, &inj);
    };
    EXPECT_LT(finite_difference(f, params, 10, 7).max_rel_error, 1e-4) << to_string(kind);
  }
}

}  // namespace
}  // namespace hyperpeft
