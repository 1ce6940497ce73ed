#include "hyperpeft/model.hpp"

#include <cmath>
#include <string>

#include "hyperpeft/error.hpp"

namespace hyperpeft {

namespace {

Tensor random_matrix(Rng& rng, std::int64_t rows, std::int64_t cols,
                     double stddev) {
  std::vector<double> v(static_cast<std::size_t>(rows * cols));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from_data({rows, cols}, std::move(v));
}

// Fan-in scaled init for weights applied as x @ w.
Tensor projection(Rng& rng, std::int64_t in, std::int64_t out) {
  return random_matrix(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in)));
}

Tensor lora_delta(const Tensor& x, const LoraDelta& d) {
  return mul_scalar(matmul(matmul_bt(x, d.down), d.up), d.gate);
}

}  // namespace

void ModelConfig::validate(const std::string& prefix) const {
  if (n_layers < 1) throw ConfigError(prefix + ".n_layers", "must be >= 1");
  if (d_model < 1) throw ConfigError(prefix + ".d_model", "must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw ConfigError(prefix + ".n_heads", "must divide d_model");
  }
  if (d_ff < 1) throw ConfigError(prefix + ".d_ff", "must be >= 1");
  if (vocab_size < vocab::kSize) {
    throw ConfigError(prefix + ".vocab_size",
                      "must cover the byte vocabulary and specials (263)");
  }
  if (max_src_len < 1) throw ConfigError(prefix + ".max_src_len", "must be >= 1");
  if (max_tgt_len < 1) throw ConfigError(prefix + ".max_tgt_len", "must be >= 1");
}

const AttentionInjection* Injections::find(AttnSite site, int layer) const {
  const auto& v = sites[static_cast<int>(site)];
  if (layer < 0 || static_cast<std::size_t>(layer) >= v.size()) return nullptr;
  const AttentionInjection& inj = v[static_cast<std::size_t>(layer)];
  return inj.empty() ? nullptr : &inj;
}

Transformer::Transformer(const ModelConfig& config, Rng& rng,
                         const std::string& name)
    : config_(config), name_(name) {
  config_.validate();
  const std::int64_t h = config_.d_model, ff = config_.d_ff,
                     v = config_.vocab_size;
  const std::string p = name.empty() ? "" : name + ".";
  auto ones = [h] { return Tensor::full({h}, 1.0); };
  auto attn = [&](const std::string& base) {
    AttentionWeights w;
    w.wq = params_.add(base + ".wq", projection(rng, h, h));
    w.wk = params_.add(base + ".wk", projection(rng, h, h));
    w.wv = params_.add(base + ".wv", projection(rng, h, h));
    w.wo = params_.add(base + ".wo", projection(rng, h, h));
    return w;
  };

  embed_ = params_.add(p + "embed", random_matrix(rng, v, h, 1.0));
  enc_pos_ = params_.add(p + "enc_pos", random_matrix(rng, config_.max_src_len, h, 0.1));
  dec_pos_ = params_.add(p + "dec_pos", random_matrix(rng, config_.max_tgt_len, h, 0.1));
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string base = p + "enc." + std::to_string(l);
    EncoderLayer layer;
    layer.norm1 = params_.add(base + ".norm1", ones());
    layer.self = attn(base + ".self");
    layer.norm2 = params_.add(base + ".norm2", ones());
    layer.ff_in = params_.add(base + ".ff_in", projection(rng, h, ff));
    layer.ff_out = params_.add(base + ".ff_out", projection(rng, ff, h));
    enc_.push_back(std::move(layer));
  }
  enc_final_norm_ = params_.add(p + "enc.final_norm", ones());
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string base = p + "dec." + std::to_string(l);
    DecoderLayer layer;
    layer.norm1 = params_.add(base + ".norm1", ones());
    layer.self = attn(base + ".self");
    layer.norm2 = params_.add(base + ".norm2", ones());
    layer.cross = attn(base + ".cross");
    layer.norm3 = params_.add(base + ".norm3", ones());
    layer.ff_in = params_.add(base + ".ff_in", projection(rng, h, ff));
    layer.ff_out = params_.add(base + ".ff_out", projection(rng, ff, h));
    dec_.push_back(std::move(layer));
  }
  dec_final_norm_ = params_.add(p + "dec.final_norm", ones());
  if (config_.lm_head) {
    lm_head_ = params_.add(p + "lm_head", projection(rng, h, v));
  }
}

Transformer Transformer::clone() const {
  Rng scratch(0);
  Transformer out(config_, scratch, name_);
  out.params_.copy_values_from(params_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.params_.items()[i].frozen = params_.items()[i].frozen;
  }
  return out;
}

Tensor Transformer::attention(const Tensor& x_q, const Tensor& x_kv,
                              const AttentionInjection* inj, bool causal,
                              const AttentionWeights& w) const {
  const std::int64_t h = config_.d_model;
  if (x_q.ndim() != 2 || x_q.dim(1) != h || x_kv.ndim() != 2 ||
      x_kv.dim(1) != h) {
    throw ShapeError("attention: inputs must be [T," + std::to_string(h) +
                     "], got " + shape_str(x_q.shape()) + " and " +
                     shape_str(x_kv.shape()));
  }
  Tensor q = matmul(x_q, w.wq);
  Tensor k = matmul(x_kv, w.wk);
  Tensor v = matmul(x_kv, w.wv);
  std::int64_t n_prefix = 0;
  if (inj) {
    if (inj->lora_q) q = add(q, lora_delta(x_q, *inj->lora_q));
    if (inj->lora_v) v = add(v, lora_delta(x_kv, *inj->lora_v));
    if (inj->key_prefix.defined() != inj->value_prefix.defined()) {
      throw ContractError("attention: key and value prefixes must come together");
    }
    if (inj->key_prefix.defined()) {
      const Tensor& pk = inj->key_prefix;
      const Tensor& pv = inj->value_prefix;
      if (pk.ndim() != 2 || pk.dim(1) != h || pv.shape() != pk.shape()) {
        throw ShapeError("attention: prefix must be [P," + std::to_string(h) +
                         "], got " + shape_str(pk.shape()) + " and " +
                         shape_str(pv.shape()));
      }
      n_prefix = pk.dim(0);
      if (n_prefix > 0) {
        k = concat({pk, k}, 0);
        v = concat({pv, v}, 0);
      }
    }
  }
  const int heads = config_.n_heads;
  const std::int64_t dh = h / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int hd = 0; hd < heads; ++hd) {
    Tensor qh = heads == 1 ? q : slice(q, 1, hd * dh, (hd + 1) * dh);
    Tensor kh = heads == 1 ? k : slice(k, 1, hd * dh, (hd + 1) * dh);
    Tensor vh = heads == 1 ? v : slice(v, 1, hd * dh, (hd + 1) * dh);
    Tensor scores = scale(matmul_bt(qh, kh), inv_sqrt);
    if (causal) scores = causal_mask(scores, n_prefix);
    outs.push_back(matmul(softmax(scores, -1), vh));
  }
  Tensor merged = heads == 1 ? outs[0] : concat(outs, 1);
  return matmul(merged, w.wo);
}

Tensor Transformer::ffn(const Tensor& x, const Tensor& w_in,
                        const Tensor& w_out) const {
  return matmul(relu(matmul(x, w_in)), w_out);
}

Tensor Transformer::encode(std::span<const TokenId> tokens,
                           const Injections* peft) const {
  static constexpr TokenId kPadOnly[] = {vocab::kPad};
  if (tokens.empty()) tokens = kPadOnly;
  if (static_cast<int>(tokens.size()) > config_.max_src_len) {
    throw ContractError("encode: " + std::to_string(tokens.size()) +
                        " tokens exceed max_src_len " +
                        std::to_string(config_.max_src_len));
  }
  const auto t = static_cast<std::int64_t>(tokens.size());
  Tensor x = add(embedding(embed_, tokens), slice(enc_pos_, 0, 0, t));
  for (int l = 0; l < config_.n_layers; ++l) {
    const EncoderLayer& layer = enc_[static_cast<std::size_t>(l)];
    const AttentionInjection* inj =
        peft ? peft->find(AttnSite::kEncoderSelf, l) : nullptr;
    Tensor hn = rms_norm(x, layer.norm1, kNormEps);
    x = add(x, attention(hn, hn, inj, false, layer.self));
    x = add(x, ffn(rms_norm(x, layer.norm2, kNormEps), layer.ff_in, layer.ff_out));
  }
  return rms_norm(x, enc_final_norm_, kNormEps);
}

Tensor Transformer::decode_hidden(const Tensor& x_in, const Tensor& enc_out,
                                  const Injections* peft, bool causal) const {
  Tensor x = x_in;
  for (int l = 0; l < config_.n_layers; ++l) {
    const DecoderLayer& layer = dec_[static_cast<std::size_t>(l)];
    const AttentionInjection* self_inj =
        peft ? peft->find(AttnSite::kDecoderSelf, l) : nullptr;
    const AttentionInjection* cross_inj =
        peft ? peft->find(AttnSite::kCross, l) : nullptr;
    if (cross_inj && cross_inj->key_prefix.defined()) {
      throw ContractError("decode: cross-attention takes no prefixes");
    }
    Tensor hn = rms_norm(x, layer.norm1, kNormEps);
    x = add(x, attention(hn, hn, self_inj, causal, layer.self));
    hn = rms_norm(x, layer.norm2, kNormEps);
    x = add(x, attention(hn, enc_out, cross_inj, false, layer.cross));
    x = add(x, ffn(rms_norm(x, layer.norm3, kNormEps), layer.ff_in, layer.ff_out));
  }
  return rms_norm(x, dec_final_norm_, kNormEps);
}

Tensor Transformer::decode(std::span<const TokenId> tokens,
                           const Tensor& enc_out, const Injections* peft,
                           bool causal) const {
  if (!config_.lm_head) throw ContractError("decode: model has no LM head");
  if (tokens.empty()) throw ContractError("decode: empty decoder input");
  if (static_cast<int>(tokens.size()) > config_.max_tgt_len) {
    throw ContractError("decode: " + std::to_string(tokens.size()) +
                        " tokens exceed max_tgt_len " +
                        std::to_string(config_.max_tgt_len));
  }
  const auto t = static_cast<std::int64_t>(tokens.size());
  Tensor x = add(embedding(embed_, tokens), slice(dec_pos_, 0, 0, t));
  return matmul(decode_hidden(x, enc_out, peft, causal), lm_head_);
}

Tensor seq_loss(const Transformer& model, std::span<const TokenId> src,
                std::span<const TokenId> tgt, const Injections* peft) {
  std::vector<TokenId> source(src.begin(), src.end());
  source.push_back(vocab::kEos);
  std::vector<TokenId> dec_in;
  dec_in.reserve(tgt.size() + 1);
  dec_in.push_back(vocab::kBos);
  dec_in.insert(dec_in.end(), tgt.begin(), tgt.end());
  std::vector<TokenId> labels(tgt.begin(), tgt.end());
  labels.push_back(vocab::kEos);
  Tensor enc = model.encode(source, peft);
  Tensor logits = model.decode(dec_in, enc, peft, model.config().decoder_causal);
  return cross_entropy(logits, labels, vocab::kPad);
}

}  // namespace hyperpeft
