#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "hyperpeft/peft.hpp"
#include "hyperpeft/tensor.hpp"
#include "hyperpeft/train.hpp"

namespace hyperpeft {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// HYPT container holding named parameters, Adam moments ("adam.m.<name>",
// "adam.v.<name>") and a header with the step, seed and config snapshot.
// Batch randomness is keyed by (seed, step, example), so the seed and step
// are the whole RNG state.
struct Checkpoint {
  int step = 0;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> params;
  AdamState adam;

  // Copies stored values into `target` by name; every target parameter must
  // be present with a matching shape (FormatError otherwise).
  void restore(ParameterSet& target) const;
  // Restores adam moments and step into `state`.
  void restore(TrainState& state) const;
};

// f64 keeps the round trip exact; f32 halves the file.
void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const TrainState& state, std::uint64_t seed,
                     const nlohmann::json& config = nlohmann::json::object(),
                     Dtype dtype = Dtype::kF64);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a over names, shapes and raw bytes of every parameter, in order.
std::uint64_t hash_parameters(const ParameterSet& params);
std::string hash_hex(std::uint64_t hash);

}  // namespace hyperpeft
