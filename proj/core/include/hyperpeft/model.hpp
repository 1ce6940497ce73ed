#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "hyperpeft/ops.hpp"
#include "hyperpeft/rng.hpp"
#include "hyperpeft/tensor.hpp"
#include "hyperpeft/vocab.hpp"

namespace hyperpeft {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 32;
  int n_heads = 2;
  int d_ff = 64;
  int vocab_size = vocab::kSize;
  int max_src_len = 384;
  int max_tgt_len = 64;
  bool decoder_causal = true;
  // The hypermodel backbone reads decoder hidden states, not logits.
  bool lm_head = true;

  // Throws ConfigError naming the first offending field under `prefix`.
  void validate(const std::string& prefix = "model") const;
  bool operator==(const ModelConfig&) const = default;
};

// Low-rank additive delta on one projection: gate * (x down^T) up.
struct LoraDelta {
  Tensor down;  // [R,H]
  Tensor up;    // [R,H]
  Tensor gate;  // single element, already squashed into (-1, 1)
};

// Per-attention-layer PEFT inputs. Key and value prefixes come as a pair.
struct AttentionInjection {
  Tensor key_prefix;    // [P,H] or undefined
  Tensor value_prefix;  // [P,H] or undefined
  std::optional<LoraDelta> lora_q;
  std::optional<LoraDelta> lora_v;

  bool empty() const {
    return !key_prefix.defined() && !lora_q && !lora_v;
  }
};

enum class AttnSite { kEncoderSelf = 0, kDecoderSelf = 1, kCross = 2 };

// Injections for every attention layer of a model, indexed by site and layer.
struct Injections {
  std::array<std::vector<AttentionInjection>, 3> sites;

  explicit Injections(int n_layers = 0) {
    for (auto& s : sites) s.resize(static_cast<std::size_t>(n_layers));
  }
  AttentionInjection& at(AttnSite site, int layer) {
    return sites[static_cast<int>(site)].at(static_cast<std::size_t>(layer));
  }
  const AttentionInjection* find(AttnSite site, int layer) const;
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;  // [H,H] each, applied as x @ w
};

// T5-style encoder-decoder: pre-norm RMS blocks with residuals, ReLU FFN,
// learned absolute positions, no biases, untied LM head.
class Transformer {
 public:
  Transformer(const ModelConfig& config, Rng& rng, const std::string& name = "");
  // Copies would alias parameter storage; use clone() for an independent one.
  Transformer(const Transformer&) = delete;
  Transformer& operator=(const Transformer&) = delete;
  Transformer(Transformer&&) = default;
  Transformer& operator=(Transformer&&) = default;

  Transformer clone() const;

  const ModelConfig& config() const noexcept { return config_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

  Tensor attention(const Tensor& x_q, const Tensor& x_kv,
                   const AttentionInjection* inj, bool causal,
                   const AttentionWeights& w) const;

  // An empty token list is encoded as a single PAD token.
  Tensor encode(std::span<const TokenId> tokens,
                const Injections* peft = nullptr) const;
  // Decoder stack over already-embedded inputs `x` [T,H]; returns final-norm
  // hidden states [T,H].
  Tensor decode_hidden(const Tensor& x, const Tensor& enc_out,
                       const Injections* peft, bool causal) const;
  // Token embeddings plus decoder positions, then decode_hidden and LM head.
  Tensor decode(std::span<const TokenId> tokens, const Tensor& enc_out,
                const Injections* peft, bool causal) const;

 private:
  struct EncoderLayer {
    Tensor norm1, norm2;
    AttentionWeights self;
    Tensor ff_in, ff_out;
  };
  struct DecoderLayer {
    Tensor norm1, norm2, norm3;
    AttentionWeights self, cross;
    Tensor ff_in, ff_out;
  };

  Tensor ffn(const Tensor& x, const Tensor& w_in, const Tensor& w_out) const;

  ModelConfig config_;
  std::string name_;
  ParameterSet params_;
  Tensor embed_, enc_pos_, dec_pos_, enc_final_norm_, dec_final_norm_,
      lm_head_;
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
};

inline constexpr double kNormEps = 1e-6;

// Teacher-forced mean token NLL: source tok+EOS, decoder input BOS+tgt,
// labels tgt+EOS.
Tensor seq_loss(const Transformer& model, std::span<const TokenId> src,
                std::span<const TokenId> tgt, const Injections* peft = nullptr);

}  // namespace hyperpeft
