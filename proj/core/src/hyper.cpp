#include "hyperpeft/hyper.hpp"

#include "hyperpeft/error.hpp"
#include "hyperpeft/ops.hpp"

namespace hyperpeft {

namespace {

constexpr double kQueryStd = 0.02;
constexpr double kLoraDownStd = 0.02;
constexpr double kRawGateInit = 1.0;

HyperModelConfig checked(HyperModelConfig config) {
  config.validate();
  config.backbone.lm_head = false;
  return config;
}

void register_head(ParameterSet& params, const std::string& base,
                   const MlpHead& h) {
  params.add(base + ".gain", h.gain);
  params.add(base + ".w1", h.w1);
  params.add(base + ".b1", h.b1);
  params.add(base + ".w2", h.w2);
  params.add(base + ".b2", h.b2);
}

}  // namespace

void HyperModelConfig::validate(const std::string& prefix) const {
  backbone.validate(prefix + ".backbone");
  downstream.validate("model");
  target.validate("peft");
  if (backbone.decoder_causal) {
    throw ConfigError(prefix + ".backbone.decoder_causal",
                      "the hypermodel decoder must be non-causal");
  }
}

int HyperModelConfig::query_count() const {
  return is_prefix(target.kind) ? 2 * target.prefix_len
                                : 3 * downstream.n_layers;
}

HyperModel::HyperModel(const HyperModelConfig& config, Rng& rng)
    : config_(checked(config)),
      backbone_(config_.backbone, rng, "hyper.backbone") {
  params_.append(backbone_.params());
  const std::int64_t hb = config_.backbone.d_model;
  const std::int64_t layers = config_.downstream.n_layers;
  const std::int64_t hd = config_.downstream.d_model;
  const int q = config_.query_count();

  std::vector<double> qv(static_cast<std::size_t>(q * hb));
  for (double& x : qv) x = rng.normal(0.0, kQueryStd);
  queries_ = params_.add("hyper.queries", Tensor::from_data({q, hb}, std::move(qv)));

  if (is_prefix(config_.target.kind)) {
    for (const char* name : kPrefixHeadNames) {
      heads_.push_back(make_head(hb, hb, layers * hd, rng));
      register_head(params_, std::string("hyper.head.") + name, heads_.back());
    }
  } else {
    const std::int64_t rh = config_.target.rank * hd;
    for (int t = 0; t < 3; ++t) {
      for (int m = 0; m < 2; ++m) {
        MlpHead h = make_head(hb, hb, 2 * rh, rng);
        // Output layout is [up | down]. `up` starts at zero so the generated
        // adapter is a no-op; `down` starts random so `up` gets gradient.
        auto w2 = h.w2.mutable_data();
        for (std::int64_t r = 0; r < hb; ++r) {
          for (std::int64_t c = rh; c < 2 * rh; ++c) {
            w2[static_cast<std::size_t>(r * 2 * rh + c)] = rng.normal(0.0, kLoraDownStd);
          }
        }
        const std::string base = std::string(kLoraSites[t]) + "_" + kLoraMaps[m];
        register_head(params_, "hyper.head." + base, h);
        heads_.push_back(h);
        raw_gates_[t][m] = params_.add("hyper.gate." + base,
                                       Tensor::full({layers}, kRawGateInit));
      }
    }
  }
}

HyperModel HyperModel::clone() const {
  Rng scratch(0);
  HyperModel out(config_, scratch);
  out.params_.copy_values_from(params_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.params_.items()[i].frozen = params_.items()[i].frozen;
  }
  return out;
}

Tensor HyperModel::hyper_encode(std::span<const TokenId> fewshot) const {
  if (fewshot.empty()) {
    throw ContractError("hyper_encode: empty few-shot input");
  }
  Tensor enc = backbone_.encode(fewshot);
  return backbone_.decode_hidden(queries_, enc, nullptr, false);
}

PrefixParams HyperModel::generate_prefix(std::span<const TokenId> fewshot) const {
  if (!is_prefix(config_.target.kind)) {
    throw ContractError("generate_prefix: hypermodel targets lora");
  }
  PrefixMlpReparam view;
  view.embeddings = hyper_encode(fewshot);
  view.n_layers = config_.downstream.n_layers;
  for (std::size_t i = 0; i < 4; ++i) view.heads[i] = heads_[i];
  return prefix_mlp_forward(view);
}

LoraParams HyperModel::generate_lora(std::span<const TokenId> fewshot) const {
  if (config_.target.kind != PeftKind::kLora) {
    throw ContractError("generate_lora: hypermodel targets prefixes");
  }
  const std::int64_t layers = config_.downstream.n_layers;
  const std::int64_t r = config_.target.rank;
  const std::int64_t hd = config_.downstream.d_model;
  Tensor states = hyper_encode(fewshot);  // [3L, H]
  LoraParams out;
  for (int t = 0; t < 3; ++t) {
    Tensor rows = slice(states, 0, t * layers, (t + 1) * layers);
    for (int m = 0; m < 2; ++m) {
      Tensor o = head_forward(rows, heads_[static_cast<std::size_t>(t * 2 + m)]);
      // [L, 2RH] -> [L,2,R,H] -> [2,L,R,H]
      Tensor parts = permute(reshape(o, {layers, 2, r, hd}), {1, 0, 2, 3});
      out.up[t][m] = select(parts, {0});
      out.down[t][m] = select(parts, {1});
      out.raw_gate[t][m] = raw_gates_[t][m];
    }
  }
  return out;
}

Adapter HyperModel::generate(std::span<const TokenId> fewshot) const {
  if (is_prefix(config_.target.kind)) return generate_prefix(fewshot);
  return generate_lora(fewshot);
}

Adapter HyperModel::init_adapter(std::span<const TokenId> fewshot) const {
  NoGradGuard no_grad;
  switch (config_.target.kind) {
    case PeftKind::kPrefixFlat:
      return PrefixParams{generate_prefix(fewshot).prefix.clone().set_requires_grad(true)};
    case PeftKind::kPrefixMlp: {
      PrefixMlpReparam r;
      r.embeddings = hyper_encode(fewshot).clone().set_requires_grad(true);
      r.n_layers = config_.downstream.n_layers;
      for (std::size_t i = 0; i < 4; ++i) r.heads[i] = heads_[i].clone();
      return r;
    }
    case PeftKind::kLora:
      return clone_adapter(generate_lora(fewshot));
  }
  throw ContractError("init_adapter: unknown target kind");
}

}  // namespace hyperpeft
