#include "hyperpeft/peft.hpp"

#include <cmath>

#include "container.hpp"
#include "hyperpeft/error.hpp"
#include "hyperpeft/ops.hpp"

namespace hyperpeft {

namespace {

constexpr char kMagic[4] = {'H', 'P', 'F', 'T'};
constexpr std::uint32_t kVersion = 1;

constexpr double kInitStd = 0.02;
// Initial LoRA raw gate; see make_lora.
constexpr double kLoraRawGateInit = 1.0;

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

template <typename... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <typename... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

detail::NamedTensors named_tensors(const Adapter& adapter) {
  detail::NamedTensors out;
  std::visit(Overloaded{
                 [&](const PrefixParams& p) { out.emplace_back("prefix", p.prefix); },
                 [&](const PrefixMlpReparam& r) {
                   out.emplace_back("embeddings", r.embeddings);
                   for (std::size_t i = 0; i < r.heads.size(); ++i) {
                     const std::string base = kPrefixHeadNames[i];
                     const MlpHead& h = r.heads[i];
                     out.emplace_back(base + ".gain", h.gain);
                     out.emplace_back(base + ".w1", h.w1);
                     out.emplace_back(base + ".b1", h.b1);
                     out.emplace_back(base + ".w2", h.w2);
                     out.emplace_back(base + ".b2", h.b2);
                   }
                 },
                 [&](const LoraParams& l) {
                   for (int t = 0; t < 3; ++t) {
                     for (int m = 0; m < 2; ++m) {
                       const std::string base =
                           std::string(kLoraSites[t]) + "." + kLoraMaps[m];
                       out.emplace_back(base + ".down", l.down[t][m]);
                       out.emplace_back(base + ".up", l.up[t][m]);
                       out.emplace_back(base + ".raw_gate", l.raw_gate[t][m]);
                     }
                   }
                 },
             },
             adapter);
  return out;
}

void check_lora_shapes(const LoraParams& l) {
  const Shape want = l.down[0][0].shape();
  if (want.size() != 3) throw ShapeError("lora down must be [L,R,H]");
  for (int t = 0; t < 3; ++t) {
    for (int m = 0; m < 2; ++m) {
      if (l.down[t][m].shape() != want || l.up[t][m].shape() != want) {
        throw ShapeError("lora tensors for " + std::string(kLoraSites[t]) + "." +
                         kLoraMaps[m] + " do not share shape " + shape_str(want));
      }
      if (l.raw_gate[t][m].shape() != Shape{want[0]}) {
        throw ShapeError("lora gate must be [L]");
      }
    }
  }
}

LoraParams make_lora(std::int64_t layers, std::int64_t rank, std::int64_t h,
                     Rng& rng) {
  LoraParams l;
  for (int t = 0; t < 3; ++t) {
    for (int m = 0; m < 2; ++m) {
      l.down[t][m] = normal_tensor({layers, rank, h}, kInitStd, rng);
      l.up[t][m] = Tensor::zeros({layers, rank, h}, true);
      // A zero gate together with zero `up` is a stationary point: neither
      // receives gradient. A nonzero gate keeps the no-op start trainable.
      l.raw_gate[t][m] = Tensor::full({layers}, kLoraRawGateInit, true);
    }
  }
  return l;
}

}  // namespace

const char* to_string(PeftKind kind) {
  switch (kind) {
    case PeftKind::kPrefixFlat: return "prefix_flat";
    case PeftKind::kPrefixMlp: return "prefix_mlp";
    case PeftKind::kLora: return "lora";
  }
  return "?";
}

PeftKind peft_kind_from_string(const std::string& name) {
  if (name == "prefix_flat") return PeftKind::kPrefixFlat;
  if (name == "prefix_mlp") return PeftKind::kPrefixMlp;
  if (name == "lora") return PeftKind::kLora;
  throw ConfigError("peft.kind", "unknown kind '" + name +
                                     "' (expected prefix_flat, prefix_mlp or lora)");
}

void PeftConfig::validate(const std::string& prefix) const {
  if (is_prefix(kind) && prefix_len < 1) {
    throw ConfigError(prefix + ".prefix_len", "must be >= 1 for prefix kinds");
  }
  if (kind == PeftKind::kLora && rank < 1) {
    throw ConfigError(prefix + ".rank", "must be >= 1 for lora");
  }
  if (reparam_hidden < 0) {
    throw ConfigError(prefix + ".reparam_hidden", "must be >= 0");
  }
}

MlpHead MlpHead::clone() const {
  return {gain.clone_leaf(), w1.clone_leaf(), b1.clone_leaf(), w2.clone_leaf(),
          b2.clone_leaf()};
}

MlpHead make_head(std::int64_t in, std::int64_t hidden, std::int64_t out,
                  Rng& rng) {
  MlpHead h;
  h.gain = Tensor::full({in}, 1.0, true);
  h.w1 = normal_tensor({in, hidden}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  h.b1 = Tensor::zeros({hidden}, true);
  h.w2 = Tensor::zeros({hidden, out}, true);
  h.b2 = Tensor::zeros({out}, true);
  return h;
}

Tensor head_forward(const Tensor& h, const MlpHead& head) {
  Tensor z = tanh(linear(rms_norm(h, head.gain, kNormEps), head.w1, head.b1));
  return linear(z, head.w2, head.b2);
}

PeftKind adapter_kind(const Adapter& adapter) {
  switch (adapter.index()) {
    case 0: return PeftKind::kPrefixFlat;
    case 1: return PeftKind::kPrefixMlp;
    default: return PeftKind::kLora;
  }
}

ParameterSet adapter_parameters(const Adapter& adapter) {
  ParameterSet set;
  for (auto& [name, t] : named_tensors(adapter)) set.add("peft." + name, t);
  return set;
}

Adapter clone_adapter(const Adapter& adapter) {
  return std::visit(
      Overloaded{
          [](const PrefixParams& p) -> Adapter {
            return PrefixParams{p.prefix.clone_leaf()};
          },
          [](const PrefixMlpReparam& r) -> Adapter {
            PrefixMlpReparam out;
            out.embeddings = r.embeddings.clone_leaf();
            for (std::size_t i = 0; i < r.heads.size(); ++i) {
              out.heads[i] = r.heads[i].clone();
            }
            out.n_layers = r.n_layers;
            return out;
          },
          [](const LoraParams& l) -> Adapter {
            LoraParams out;
            for (int t = 0; t < 3; ++t) {
              for (int m = 0; m < 2; ++m) {
                out.down[t][m] = l.down[t][m].clone_leaf();
                out.up[t][m] = l.up[t][m].clone_leaf();
                out.raw_gate[t][m] = l.raw_gate[t][m].clone_leaf();
              }
            }
            return out;
          },
      },
      adapter);
}

Injections to_injections(const PrefixParams& p) {
  const Tensor& t = p.prefix;
  if (t.ndim() != 5 || t.dim(1) != 2 || t.dim(2) != 2) {
    throw ShapeError("prefix must be [L,2,2,P,H], got " + shape_str(t.shape()));
  }
  const auto layers = static_cast<int>(t.dim(0));
  Injections inj(layers);
  for (int l = 0; l < layers; ++l) {
    for (int s = 0; s < 2; ++s) {
      auto& a = inj.at(s == 0 ? AttnSite::kEncoderSelf : AttnSite::kDecoderSelf, l);
      a.key_prefix = select(t, {l, s, 0});
      a.value_prefix = select(t, {l, s, 1});
    }
  }
  return inj;
}

Injections to_injections(const LoraParams& lora) {
  check_lora_shapes(lora);
  const auto layers = static_cast<int>(lora.n_layers());
  Injections inj(layers);
  for (int t = 0; t < 3; ++t) {
    for (int m = 0; m < 2; ++m) {
      const Tensor gates = tanh(lora.raw_gate[t][m]);
      for (int l = 0; l < layers; ++l) {
        LoraDelta d{select(lora.down[t][m], {l}), select(lora.up[t][m], {l}),
                    element(gates, l)};
        auto& a = inj.at(static_cast<AttnSite>(t), l);
        (m == 0 ? a.lora_q : a.lora_v) = std::move(d);
      }
    }
  }
  return inj;
}

Injections to_injections(const Adapter& adapter) {
  return std::visit(
      Overloaded{
          [](const PrefixParams& p) { return to_injections(p); },
          [](const PrefixMlpReparam& r) { return to_injections(prefix_mlp_forward(r)); },
          [](const LoraParams& l) { return to_injections(l); },
      },
      adapter);
}

PrefixParams prefix_mlp_forward(const PrefixMlpReparam& r) {
  const std::int64_t two_p = r.embeddings.dim(0);
  if (two_p % 2 != 0) throw ShapeError("prefix embeddings must have 2P rows");
  const std::int64_t p = two_p / 2;
  const std::int64_t layers = r.n_layers;
  if (layers < 1) throw ShapeError("reparam has no layer count");
  Tensor enc_rows = slice(r.embeddings, 0, 0, p);
  Tensor dec_rows = slice(r.embeddings, 0, p, two_p);
  std::array<Tensor, 4> parts;
  for (std::size_t i = 0; i < 4; ++i) {
    const MlpHead& head = r.heads[i];
    if (head.out_dim() % layers != 0) {
      throw ShapeError("prefix head output not divisible by L");
    }
    const std::int64_t hd = head.out_dim() / layers;
    Tensor out = head_forward(i < 2 ? enc_rows : dec_rows, head);  // [P, L*H]
    // [P,L,H] -> [L,P,H] -> [L,1,1,P,H]
    parts[i] = reshape(permute(reshape(out, {p, layers, hd}), {1, 0, 2}),
                       {layers, 1, 1, p, hd});
  }
  Tensor enc = concat({parts[0], parts[1]}, 2);
  Tensor dec = concat({parts[2], parts[3]}, 2);
  return PrefixParams{concat({enc, dec}, 1)};
}

PrefixParams flatten_reparam(const PrefixMlpReparam& reparam) {
  NoGradGuard no_grad;
  Tensor flat = prefix_mlp_forward(reparam).prefix.clone();
  flat.set_requires_grad(true);
  return PrefixParams{flat};
}

std::int64_t peft_param_count(const PeftConfig& c, const ModelConfig& m) {
  const std::int64_t layers = m.n_layers, h = m.d_model;
  switch (c.kind) {
    case PeftKind::kPrefixFlat:
      return layers * 2 * 2 * c.prefix_len * h;
    case PeftKind::kPrefixMlp: {
      if (c.prefix_len == 0) return 0;
      const std::int64_t hid = c.reparam_hidden > 0 ? c.reparam_hidden : h;
      const std::int64_t out = layers * h;
      const std::int64_t head = h + h * hid + hid + hid * out + out;
      return 2 * c.prefix_len * h + 4 * head;
    }
    case PeftKind::kLora:
      return 6 * layers * 2 * c.rank * h + 6 * layers;
  }
  return 0;
}

const char* to_string(InitScheme scheme) {
  switch (scheme) {
    case InitScheme::kRand: return "rand";
    case InitScheme::kShared: return "shared";
    case InitScheme::kHyper: return "hyper";
  }
  return "?";
}

InitScheme init_scheme_from_string(const std::string& name) {
  if (name == "rand") return InitScheme::kRand;
  if (name == "shared") return InitScheme::kShared;
  if (name == "hyper") return InitScheme::kHyper;
  throw ConfigError("init", "unknown scheme '" + name + "' (expected rand, shared or hyper)");
}

Adapter init_peft(const PeftConfig& config, const ModelConfig& model,
                  InitScheme scheme, Rng& rng, const Adapter* source) {
  config.validate();
  const std::int64_t layers = model.n_layers, h = model.d_model;
  if (scheme == InitScheme::kRand) {
    switch (config.kind) {
      case PeftKind::kPrefixFlat:
        return PrefixParams{
            normal_tensor({layers, 2, 2, config.prefix_len, h}, kInitStd, rng)};
      case PeftKind::kPrefixMlp: {
        PrefixMlpReparam r;
        r.n_layers = layers;
        r.embeddings = normal_tensor({2 * config.prefix_len, h}, kInitStd, rng);
        const std::int64_t hid = config.reparam_hidden > 0 ? config.reparam_hidden : h;
        for (auto& head : r.heads) head = make_head(h, hid, layers * h, rng);
        return r;
      }
      case PeftKind::kLora:
        return make_lora(layers, config.rank, h, rng);
    }
  }

  const std::string field = "init";
  if (!source) {
    throw ConfigError(field, std::string(to_string(scheme)) +
                                 " init requires a source adapter");
  }
  const PeftKind have = adapter_kind(*source);
  Adapter out;
  if (config.kind == PeftKind::kPrefixFlat && have == PeftKind::kPrefixMlp) {
    out = flatten_reparam(std::get<PrefixMlpReparam>(*source));
  } else if (config.kind == have) {
    out = clone_adapter(*source);
  } else {
    throw ConfigError(field, std::string(to_string(scheme)) + " source is " +
                                 to_string(have) + " but " +
                                 to_string(config.kind) + " was requested");
  }
  // Shape agreement with the requested configuration.
  if (const auto* p = std::get_if<PrefixParams>(&out)) {
    const Shape want{layers, 2, 2, config.prefix_len, h};
    if (p->prefix.shape() != want) {
      throw ConfigError(field, "source prefix " + shape_str(p->prefix.shape()) +
                                   " does not match " + shape_str(want));
    }
  } else if (const auto* l = std::get_if<LoraParams>(&out)) {
    const Shape want{layers, config.rank, h};
    if (l->down[0][0].shape() != want) {
      throw ConfigError(field, "source lora " + shape_str(l->down[0][0].shape()) +
                                   " does not match " + shape_str(want));
    }
  } else if (const auto* r = std::get_if<PrefixMlpReparam>(&out)) {
    if (r->embeddings.dim(0) != 2 * config.prefix_len || r->n_layers != layers) {
      throw ConfigError(field, "source prefix reparameterization does not match");
    }
  }
  return out;
}

void save_peft(const Adapter& adapter, const std::filesystem::path& path,
               Dtype dtype) {
  nlohmann::json header;
  header["kind"] = to_string(adapter_kind(adapter));
  std::visit(Overloaded{
                 [&](const PrefixParams& p) {
                   header["L"] = p.n_layers();
                   header["H"] = p.d_model();
                   header["P"] = p.prefix_len();
                 },
                 [&](const PrefixMlpReparam& r) {
                   header["L"] = r.n_layers;
                   header["H"] = r.embeddings.dim(1);
                   header["P"] = r.embeddings.dim(0) / 2;
                   header["reparam_hidden"] = r.heads[0].w1.dim(1);
                 },
                 [&](const LoraParams& l) {
                   header["L"] = l.n_layers();
                   header["H"] = l.d_model();
                   header["R"] = l.rank();
                 },
             },
             adapter);
  detail::NamedTensors tensors = named_tensors(adapter);
  detail::write_container(path, kMagic, kVersion, std::move(header), tensors, dtype);
}

Adapter load_peft(const std::filesystem::path& path) {
  const detail::Container c = detail::read_container(path, kMagic, kVersion);
  const std::string where = path.string() + ": ";
  auto leaf = [&](const std::string& name) {
    Tensor t = c.get(name);
    t.set_requires_grad(true);
    return t;
  };
  try {
    const PeftKind kind = peft_kind_from_string(c.header.at("kind").get<std::string>());
    const auto layers = c.header.at("L").get<std::int64_t>();
    const auto h = c.header.at("H").get<std::int64_t>();
    Adapter out;
    switch (kind) {
      case PeftKind::kPrefixFlat: {
        const auto p = c.header.at("P").get<std::int64_t>();
        PrefixParams pp{leaf("prefix")};
        if (pp.prefix.shape() != Shape{layers, 2, 2, p, h}) {
          throw FormatError(where + "prefix shape disagrees with header");
        }
        out = pp;
        break;
      }
      case PeftKind::kPrefixMlp: {
        PrefixMlpReparam r;
        r.n_layers = layers;
        r.embeddings = leaf("embeddings");
        for (std::size_t i = 0; i < 4; ++i) {
          const std::string base = kPrefixHeadNames[i];
          r.heads[i] = {leaf(base + ".gain"), leaf(base + ".w1"), leaf(base + ".b1"),
                        leaf(base + ".w2"), leaf(base + ".b2")};
        }
        if (r.embeddings.shape() !=
            Shape{2 * c.header.at("P").get<std::int64_t>(), h}) {
          throw FormatError(where + "embedding shape disagrees with header");
        }
        out = r;
        break;
      }
      case PeftKind::kLora: {
        const auto rank = c.header.at("R").get<std::int64_t>();
        LoraParams l;
        for (int t = 0; t < 3; ++t) {
          for (int m = 0; m < 2; ++m) {
            const std::string base = std::string(kLoraSites[t]) + "." + kLoraMaps[m];
            l.down[t][m] = leaf(base + ".down");
            l.up[t][m] = leaf(base + ".up");
            l.raw_gate[t][m] = leaf(base + ".raw_gate");
          }
        }
        check_lora_shapes(l);
        if (l.down[0][0].shape() != Shape{layers, rank, h}) {
          throw FormatError(where + "lora shape disagrees with header");
        }
        out = l;
        break;
      }
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + "bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(where + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(where + e.what());
  }
}

Adapter load_peft(const std::filesystem::path& path, PeftKind expected) {
  Adapter a = load_peft(path);
  if (adapter_kind(a) != expected) {
    throw FormatError(path.string() + ": file holds " + to_string(adapter_kind(a)) +
                      " parameters, expected " + to_string(expected));
  }
  return a;
}

}  // namespace hyperpeft
