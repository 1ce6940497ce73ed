#include "hyperpeft/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <map>

#include "container.hpp"
#include "hyperpeft/error.hpp"

namespace hyperpeft {

namespace {

constexpr char kMagic[4] = {'H', 'Y', 'P', 'T'};

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ULL;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const TrainState& state, std::uint64_t seed,
                     const nlohmann::json& config, Dtype dtype) {
  detail::NamedTensors tensors;
  for (const Parameter& p : params.items()) tensors.emplace_back(p.name, p.tensor);
  for (const auto* moments : {&state.adam.m, &state.adam.v}) {
    const std::string prefix = moments == &state.adam.m ? "adam.m." : "adam.v.";
    for (const auto& [name, values] : *moments) {
      tensors.emplace_back(prefix + name,
                           Tensor::from_data({static_cast<std::int64_t>(values.size())}, values));
    }
  }
  nlohmann::json header;
  header["step"] = state.step;
  header["seed"] = seed;
  header["config"] = config;
  header["n_params"] = params.size();
  header["adam"] = {{"beta1", state.adam.beta1},
                    {"beta2", state.adam.beta2},
                    {"eps", state.adam.eps},
                    {"step", state.adam.step}};
  detail::write_container(path, kMagic, kCheckpointVersion, std::move(header), tensors, dtype);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  detail::Container c = detail::read_container(path, kMagic, kCheckpointVersion);
  Checkpoint ck;
  try {
    ck.step = c.header.at("step").get<int>();
    ck.seed = c.header.at("seed").get<std::uint64_t>();
    ck.config = c.header.at("config");
    const auto n_params = c.header.at("n_params").get<std::size_t>();
    const auto& adam = c.header.at("adam");
    ck.adam.beta1 = adam.at("beta1").get<double>();
    ck.adam.beta2 = adam.at("beta2").get<double>();
    ck.adam.eps = adam.at("eps").get<double>();
    ck.adam.step = adam.at("step").get<std::int64_t>();
    if (n_params > c.tensors.size()) throw FormatError("parameter count exceeds index");
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
      auto& [name, t] = c.tensors[i];
      if (i < n_params) {
        ck.params.emplace_back(name, t);
      } else if (name.rfind("adam.m.", 0) == 0) {
        ck.adam.m[name.substr(7)].assign(t.data().begin(), t.data().end());
      } else if (name.rfind("adam.v.", 0) == 0) {
        ck.adam.v[name.substr(7)].assign(t.data().begin(), t.data().end());
      } else {
        throw FormatError("unexpected tensor '" + name + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (ck.adam.m.size() != ck.adam.v.size()) {
    throw FormatError(path.string() + ": unpaired adam moments");
  }
  return ck;
}

void Checkpoint::restore(ParameterSet& target) const {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : params) by_name[name] = &t;
  for (Parameter& p : target.items()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks parameter '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw FormatError("checkpoint shape " + shape_str(it->second->shape()) + " for '" +
                        p.name + "', expected " + shape_str(p.tensor.shape()));
    }
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
  }
}

void Checkpoint::restore(TrainState& state) const {
  state.adam = adam;
  state.step = step;
}

std::uint64_t hash_parameters(const ParameterSet& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Parameter& p : params.items()) {
    fnv(h, p.name.data(), p.name.size());
    for (std::int64_t d : p.tensor.shape()) fnv(h, &d, sizeof d);
    const auto data = p.tensor.data();
    fnv(h, data.data(), data.size_bytes());
  }
  return h;
}

std::string hash_hex(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

}  // namespace hyperpeft
