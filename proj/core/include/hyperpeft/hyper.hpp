#pragma once

#include <array>
#include <span>
#include <vector>

#include "hyperpeft/model.hpp"
#include "hyperpeft/peft.hpp"
#include "hyperpeft/rng.hpp"

namespace hyperpeft {

struct HyperModelConfig {
  ModelConfig backbone{.max_src_len = 256, .decoder_causal = false, .lm_head = false};
  PeftConfig target;
  ModelConfig downstream;

  void validate(const std::string& prefix = "hyper") const;
  // Number of learned decoder queries: 2P for prefix targets, 3L for LoRA.
  int query_count() const;
  bool operator==(const HyperModelConfig&) const = default;
};

// Encoder over few-shot tokens, a non-causal decoder over fixed learned
// queries, and MLP heads that turn decoder states into PEFT parameters for
// the downstream model.
class HyperModel {
 public:
  HyperModel(const HyperModelConfig& config, Rng& rng);
  HyperModel(const HyperModel&) = delete;
  HyperModel& operator=(const HyperModel&) = delete;
  HyperModel(HyperModel&&) = default;
  HyperModel& operator=(HyperModel&&) = default;

  HyperModel clone() const;

  const HyperModelConfig& config() const noexcept { return config_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  const Transformer& backbone() const noexcept { return backbone_; }

  // [Q,H_backbone]; throws ContractError on empty input.
  Tensor hyper_encode(std::span<const TokenId> fewshot) const;
  PrefixParams generate_prefix(std::span<const TokenId> fewshot) const;
  LoraParams generate_lora(std::span<const TokenId> fewshot) const;
  // generate_prefix or generate_lora according to the target kind. The result
  // stays connected to the hypermodel's graph.
  Adapter generate(std::span<const TokenId> fewshot) const;
  // Detached, trainable copy for Hyper initialization of downstream PEFT.
  // A Prefix-MLP target gets the decoder states as embeddings and copies of
  // the heads as its reparameterization.
  Adapter init_adapter(std::span<const TokenId> fewshot) const;

 private:
  HyperModelConfig config_;
  Transformer backbone_;
  ParameterSet params_;
  Tensor queries_;
  // Prefix: enc_k, enc_v, dec_k, dec_v. LoRA: index site*2 + map.
  std::vector<MlpHead> heads_;
  // LoRA only, [site][map] raw gates of length L.
  std::array<std::array<Tensor, 2>, 3> raw_gates_;
};

}  // namespace hyperpeft
