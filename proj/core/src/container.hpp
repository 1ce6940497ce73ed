#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "hyperpeft/peft.hpp"
#include "hyperpeft/tensor.hpp"

// Binary container shared by adapter files and checkpoints:
//   magic[4] | u32 version | u32 header_len | JSON header | payloads
// The header carries "dtype" ("f32" or "f64") and "tensors", an ordered list
// of {name, shape, offset} with offsets relative to the payload start.
namespace hyperpeft::detail {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_container(const std::filesystem::path& path, const char magic[4],
                     std::uint32_t version, nlohmann::json header,
                     const NamedTensors& tensors, Dtype dtype);

struct Container {
  nlohmann::json header;
  NamedTensors tensors;

  // Throws FormatError when absent.
  const Tensor& get(const std::string& name) const;
};

// Validates everything before returning; throws FormatError on bad magic,
// version mismatch, truncation or inconsistent index entries.
Container read_container(const std::filesystem::path& path, const char magic[4],
                         std::uint32_t version);

std::string dtype_name(Dtype dtype);

}  // namespace hyperpeft::detail
