#include "container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "hyperpeft/error.hpp"

namespace hyperpeft::detail {

namespace {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian hosts are not supported");

template <typename T>
void put_le(std::string& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(bytes), std::end(bytes));
  }
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const char* src) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, src, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(bytes), std::end(bytes));
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

std::string dtype_name(Dtype dtype) { return dtype == Dtype::kF64 ? "f64" : "f32"; }

void write_container(const std::filesystem::path& path, const char magic[4],
                     std::uint32_t version, nlohmann::json header,
                     const NamedTensors& tensors, Dtype dtype) {
  const std::size_t width = dtype == Dtype::kF64 ? 8 : 4;
  nlohmann::json index = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, t] : tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    payload.reserve(payload.size() + static_cast<std::size_t>(t.numel()) * width);
    for (double v : t.data()) {
      if (dtype == Dtype::kF64) {
        put_le<double>(payload, v);
      } else {
        put_le<float>(payload, static_cast<float>(v));
      }
    }
  }
  header["dtype"] = dtype_name(dtype);
  header["tensors"] = std::move(index);
  const std::string text = header.dump();

  std::string blob(magic, 4);
  put_le<std::uint32_t>(blob, version);
  put_le<std::uint32_t>(blob, static_cast<std::uint32_t>(text.size()));
  blob += text;
  blob += payload;

  // Write to a sibling file first so a failed write never leaves a torn file.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw FormatError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

const Tensor& Container::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("missing tensor '" + name + "'");
}

Container read_container(const std::filesystem::path& path, const char magic[4],
                         std::uint32_t version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::string blob((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (blob.size() < 12 || std::memcmp(blob.data(), magic, 4) != 0) {
    throw FormatError(where + "bad magic, expected " + std::string(magic, 4));
  }
  const auto file_version = get_le<std::uint32_t>(blob.data() + 4);
  if (file_version != version) {
    throw FormatError(where + "unsupported version " + std::to_string(file_version) +
                      " (expected " + std::to_string(version) + ")");
  }
  const auto header_len = get_le<std::uint32_t>(blob.data() + 8);
  if (blob.size() < 12 + static_cast<std::size_t>(header_len)) {
    throw FormatError(where + "truncated header");
  }
  Container c;
  try {
    c.header = nlohmann::json::parse(blob.begin() + 12,
                                     blob.begin() + 12 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + "malformed header: " + e.what());
  }
  const char* payload = blob.data() + 12 + header_len;
  const std::size_t payload_size = blob.size() - 12 - header_len;

  try {
    const std::string dtype = c.header.value("dtype", std::string("f32"));
    if (dtype != "f32" && dtype != "f64") {
      throw FormatError(where + "unknown dtype " + dtype);
    }
    const std::size_t width = dtype == "f64" ? 8 : 4;
    for (const auto& entry : c.header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto n = static_cast<std::size_t>(shape_numel(shape));
      if (offset > payload_size || n * width > payload_size - offset) {
        throw FormatError(where + "tensor '" + name + "' exceeds payload");
      }
      std::vector<double> values(n);
      const char* src = payload + offset;
      for (std::size_t i = 0; i < n; ++i) {
        values[i] = width == 8 ? get_le<double>(src + 8 * i)
                               : static_cast<double>(get_le<float>(src + 4 * i));
      }
      c.tensors.emplace_back(name, Tensor::from_data(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + "bad tensor index: " + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(where + e.what());
  }
  return c;
}

}  // namespace hyperpeft::detail
