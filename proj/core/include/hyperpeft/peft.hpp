#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "hyperpeft/model.hpp"
#include "hyperpeft/rng.hpp"
#include "hyperpeft/tensor.hpp"

namespace hyperpeft {

enum class PeftKind { kPrefixFlat, kPrefixMlp, kLora };

const char* to_string(PeftKind kind);
// Throws ConfigError for unknown names.
PeftKind peft_kind_from_string(const std::string& name);
inline bool is_prefix(PeftKind kind) { return kind != PeftKind::kLora; }

struct PeftConfig {
  PeftKind kind = PeftKind::kPrefixFlat;
  int prefix_len = 8;      // P, prefix kinds
  int rank = 4;            // R, LoRA
  int reparam_hidden = 0;  // Prefix-MLP head width; 0 means d_model

  void validate(const std::string& prefix = "peft") const;
  bool operator==(const PeftConfig&) const = default;
};

// Small MLP: rms_norm -> linear(in, hidden) + b -> tanh -> linear(hidden, out) + b.
struct MlpHead {
  Tensor gain, w1, b1, w2, b2;

  std::int64_t in_dim() const { return w1.dim(0); }
  std::int64_t out_dim() const { return w2.dim(1); }
  MlpHead clone() const;
};

// Fresh head; the final linear is zero, so the head initially outputs 0.
MlpHead make_head(std::int64_t in, std::int64_t hidden, std::int64_t out,
                  Rng& rng);

// h: [..., in] -> [..., out]
Tensor head_forward(const Tensor& h, const MlpHead& head);

struct PrefixParams {
  Tensor prefix;  // [L, 2 (enc/dec), 2 (key/value), P, H]

  std::int64_t n_layers() const { return prefix.dim(0); }
  std::int64_t prefix_len() const { return prefix.dim(3); }
  std::int64_t d_model() const { return prefix.dim(4); }
};

inline constexpr std::array<const char*, 3> kLoraSites = {"enc", "dec", "cross"};
inline constexpr std::array<const char*, 2> kLoraMaps = {"q", "v"};

struct LoraParams {
  // Indexed [site][map] with site in {enc, dec, cross} and map in {q, v}.
  // down/up are [L,R,H] (one [R,H] block per layer); raw_gate is [L] and the
  // effective gate is tanh(raw_gate).
  std::array<std::array<Tensor, 2>, 3> down, up, raw_gate;

  std::int64_t n_layers() const { return down[0][0].dim(0); }
  std::int64_t rank() const { return down[0][0].dim(1); }
  std::int64_t d_model() const { return down[0][0].dim(2); }
};

// Trainable embeddings [2P,H] pushed through four heads (enc_k, enc_v,
// dec_k, dec_v), each H -> L*H.
struct PrefixMlpReparam {
  Tensor embeddings;
  std::array<MlpHead, 4> heads;
  std::int64_t n_layers = 0;
};

inline constexpr std::array<const char*, 4> kPrefixHeadNames = {
    "enc_k", "enc_v", "dec_k", "dec_v"};

using Adapter = std::variant<PrefixParams, PrefixMlpReparam, LoraParams>;

PeftKind adapter_kind(const Adapter& adapter);

// Every tensor of the adapter under a stable name, in a fixed order. The
// handles alias the adapter, so this doubles as its trainable parameter set.
ParameterSet adapter_parameters(const Adapter& adapter);
Adapter clone_adapter(const Adapter& adapter);

// Injection view for a downstream model. Prefix-MLP adapters are run through
// their reparameterization first (keeping the graph).
Injections to_injections(const PrefixParams& prefix);
Injections to_injections(const LoraParams& lora);
Injections to_injections(const Adapter& adapter);

PrefixParams prefix_mlp_forward(const PrefixMlpReparam& reparam);
// Same values as prefix_mlp_forward, as a standalone trainable leaf.
PrefixParams flatten_reparam(const PrefixMlpReparam& reparam);

std::int64_t peft_param_count(const PeftConfig& config,
                              const ModelConfig& model);

enum class InitScheme { kRand, kShared, kHyper };

const char* to_string(InitScheme scheme);
InitScheme init_scheme_from_string(const std::string& name);

// Rand draws fresh parameters. Shared and Hyper deep-copy `source` (a shared
// multi-task adapter, or one generated by a hypermodel); a Prefix-MLP source
// requested as Prefix-Flat is flattened. Scheme/kind mismatches raise
// ConfigError.
Adapter init_peft(const PeftConfig& config, const ModelConfig& model,
                  InitScheme scheme, Rng& rng, const Adapter* source = nullptr);

enum class Dtype { kF32, kF64 };

// HPFT container: "HPFT", u32 version, u32 header length, JSON header, then
// little-endian payloads in index order.
void save_peft(const Adapter& adapter, const std::filesystem::path& path,
               Dtype dtype = Dtype::kF32);
Adapter load_peft(const std::filesystem::path& path);
// Loads and checks the stored kind; a mismatch raises FormatError.
Adapter load_peft(const std::filesystem::path& path, PeftKind expected);

}  // namespace hyperpeft
