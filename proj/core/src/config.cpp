#include "hyperpeft/config.hpp"

#include <fstream>
#include <set>

#include "hyperpeft/error.hpp"

namespace hyperpeft {

namespace {

using nlohmann::json;

// Reads the fields of one JSON object into a struct, remembering which keys
// were consumed so leftovers can be reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(at(key), "expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(at(key), "expected an integer");
      if (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0 && !v.is_number_unsigned()) {
        throw ConfigError(at(key), "expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(at(key), "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(at(key), "expected a string");
    }
    try {
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(at(key), e.what());
    }
  }

  // Sub-object handled by `fn(const json&, path)`.
  template <typename Fn>
  void object(const char* key, Fn fn) {
    used_.insert(key);
    if (j_.contains(key)) fn(j_.at(key), at(key));
  }

  template <typename E>
  void enumeration(const char* key, E& out, E (*parse)(const std::string&)) {
    std::string name;
    get(key, name);
    if (!j_.contains(key)) return;
    try {
      out = parse(name);
    } catch (const std::exception& e) {
      throw ConfigError(at(key), "unknown value '" + name + "'");
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw ConfigError(at(k.c_str()), "unknown key");
    }
  }

  std::string at(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

json model_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},       {"d_model", c.d_model},
          {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size},   {"max_src_len", c.max_src_len},
          {"max_tgt_len", c.max_tgt_len}, {"decoder_causal", c.decoder_causal},
          {"lm_head", c.lm_head}};
}

void read_model(const json& j, const std::string& path, ModelConfig& c) {
  Fields f(j, path);
  f.get("n_layers", c.n_layers);
  f.get("d_model", c.d_model);
  f.get("n_heads", c.n_heads);
  f.get("d_ff", c.d_ff);
  f.get("vocab_size", c.vocab_size);
  f.get("max_src_len", c.max_src_len);
  f.get("max_tgt_len", c.max_tgt_len);
  f.get("decoder_causal", c.decoder_causal);
  f.get("lm_head", c.lm_head);
  f.finish();
}

json peft_json(const PeftConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"prefix_len", c.prefix_len},
          {"rank", c.rank},
          {"reparam_hidden", c.reparam_hidden}};
}

void read_peft(const json& j, const std::string& path, PeftConfig& c) {
  Fields f(j, path);
  f.enumeration("kind", c.kind, &peft_kind_from_string);
  f.get("prefix_len", c.prefix_len);
  f.get("rank", c.rank);
  f.get("reparam_hidden", c.reparam_hidden);
  f.finish();
}

Precision precision_from_string(const std::string& s) {
  if (s == "f64") return Precision::kF64;
  if (s == "f32") return Precision::kF32;
  throw ConfigError("precision", "expected f32 or f64");
}

json train_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"seed", c.seed},
          {"k_max", c.k_max},
          {"max_len_hyper", c.max_len_hyper},
          {"max_len_down", c.max_len_down},
          {"max_len_tgt", c.max_len_tgt},
          {"mode", to_string(c.mode)},
          {"precision", c.precision == Precision::kF64 ? "f64" : "f32"},
          {"clip_norm", c.clip_norm},
          {"caclm", {{"a", c.caclm.a}, {"b", c.caclm.b}, {"c", c.caclm.c}, {"d", c.caclm.d}}},
          {"checkpoint_marks", c.checkpoint_marks}};
}

void read_train(const json& j, const std::string& path, TrainConfig& c) {
  Fields f(j, path);
  f.get("steps", c.steps);
  f.get("batch_size", c.batch_size);
  f.get("lr", c.lr);
  f.get("seed", c.seed);
  f.get("k_max", c.k_max);
  f.get("max_len_hyper", c.max_len_hyper);
  f.get("max_len_down", c.max_len_down);
  f.get("max_len_tgt", c.max_len_tgt);
  f.enumeration("mode", c.mode, &train_mode_from_string);
  f.enumeration("precision", c.precision, &precision_from_string);
  f.get("clip_norm", c.clip_norm);
  f.object("caclm", [&](const json& sub, const std::string& p) {
    Fields g(sub, p);
    g.get("a", c.caclm.a);
    g.get("b", c.caclm.b);
    g.get("c", c.caclm.c);
    g.get("d", c.caclm.d);
    g.finish();
  });
  f.get("checkpoint_marks", c.checkpoint_marks);
  f.finish();
}

}  // namespace

void RunConfig::validate() const {
  model.validate("model");
  peft.validate("peft");
  hyper_backbone.validate("hyper_backbone");
  if (hyper_backbone.decoder_causal) {
    throw ConfigError("hyper_backbone.decoder_causal", "the hypermodel decoder must be non-causal");
  }
  hyper().validate("hyper");
  train.validate("train");
  pretrain.validate("pretrain");
  finetune.peft.validate("finetune.peft");
  finetune.base.validate("finetune.base");
  if (train.max_len_down > model.max_src_len) {
    throw ConfigError("train.max_len_down", "exceeds model.max_src_len");
  }
  if (train.max_len_tgt > model.max_tgt_len) {
    throw ConfigError("train.max_len_tgt", "exceeds model.max_tgt_len");
  }
  if (train.max_len_hyper > hyper_backbone.max_src_len) {
    throw ConfigError("train.max_len_hyper", "exceeds hyper_backbone.max_src_len");
  }
  if (train.caclm.total() == 0) throw ConfigError("train.caclm", "empty window");
  if (finetune.steps < 1) throw ConfigError("finetune.steps", "must be >= 1");
  if (finetune.batch_size < 1) throw ConfigError("finetune.batch_size", "must be >= 1");
  if (finetune.lrs.empty()) throw ConfigError("finetune.lrs", "must be non-empty");
  if (finetune.seeds.empty()) throw ConfigError("finetune.seeds", "must be non-empty");
  for (int m : finetune.eval_marks) {
    if (m < 0 || m > finetune.steps) {
      throw ConfigError("finetune.eval_marks", "marks must lie in [0, finetune.steps]");
    }
  }
  try {
    adapter_source_from_string(eval.adapter);
  } catch (const ConfigError&) {
    throw ConfigError("eval.adapter", "unknown adapter source '" + eval.adapter + "'");
  }
  try {
    init_scheme_from_string(finetune_init);
  } catch (const ConfigError&) {
    throw ConfigError("finetune_init", "unknown init scheme '" + finetune_init + "'");
  }
  if (io.resume && io.init_checkpoint.empty()) {
    throw ConfigError("io.resume", "needs io.init_checkpoint");
  }
  if (eval.shots < 0) throw ConfigError("eval.shots", "must be >= 0");
  if (eval.seeds.empty()) throw ConfigError("eval.seeds", "must be non-empty");
  if (data.train_per_task < 2 || data.train_per_task >= data.examples_per_task) {
    throw ConfigError("data.train_per_task", "need 2 <= train_per_task < examples_per_task");
  }
  if (io.out_dir.empty()) throw ConfigError("io.out_dir", "must be non-empty");
}

nlohmann::json to_json(const RunConfig& c) {
  json j;
  j["model"] = model_json(c.model);
  j["hyper_backbone"] = model_json(c.hyper_backbone);
  j["peft"] = peft_json(c.peft);
  j["train"] = train_json(c.train);
  j["pretrain"] = train_json(c.pretrain);
  j["finetune"] = {{"peft", peft_json(c.finetune.peft)},
                   {"lrs", c.finetune.lrs},
                   {"seeds", c.finetune.seeds},
                   {"steps", c.finetune.steps},
                   {"batch_size", c.finetune.batch_size},
                   {"shots", c.finetune.shots},
                   {"eval_marks", c.finetune.eval_marks},
                   {"base", train_json(c.finetune.base)}};
  j["finetune_init"] = c.finetune_init;
  j["eval"] = {{"adapter", c.eval.adapter},
               {"shots", c.eval.shots},
               {"seeds", c.eval.seeds},
               {"fewshot_input", c.eval.fewshot_input},
               {"regenerate_per_example", c.eval.regenerate_per_example},
               {"held_out_only", c.eval.held_out_only}};
  j["data"] = {{"corpus_seed", c.data.corpus_seed},
               {"corpus_tokens", c.data.corpus_tokens},
               {"task_file", c.data.task_file},
               {"synth_seed", c.data.synth_seed},
               {"examples_per_task", c.data.examples_per_task},
               {"train_per_task", c.data.train_per_task}};
  j["io"] = {{"out_dir", c.io.out_dir},
             {"downstream", c.io.downstream},
             {"init_checkpoint", c.io.init_checkpoint},
             {"resume", c.io.resume},
             {"adapter", c.io.adapter}};
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  Fields f(j, "");
  f.object("model", [&](const json& s, const std::string& p) { read_model(s, p, c.model); });
  f.object("hyper_backbone",
           [&](const json& s, const std::string& p) { read_model(s, p, c.hyper_backbone); });
  f.object("peft", [&](const json& s, const std::string& p) { read_peft(s, p, c.peft); });
  f.object("train", [&](const json& s, const std::string& p) { read_train(s, p, c.train); });
  f.object("pretrain",
           [&](const json& s, const std::string& p) { read_train(s, p, c.pretrain); });
  f.object("finetune", [&](const json& s, const std::string& p) {
    Fields g(s, p);
    g.object("peft",
             [&](const json& t, const std::string& q) { read_peft(t, q, c.finetune.peft); });
    g.get("lrs", c.finetune.lrs);
    g.get("seeds", c.finetune.seeds);
    g.get("steps", c.finetune.steps);
    g.get("batch_size", c.finetune.batch_size);
    g.get("shots", c.finetune.shots);
    g.get("eval_marks", c.finetune.eval_marks);
    g.object("base",
             [&](const json& t, const std::string& q) { read_train(t, q, c.finetune.base); });
    g.finish();
  });
  f.get("finetune_init", c.finetune_init);
  f.object("eval", [&](const json& s, const std::string& p) {
    Fields g(s, p);
    g.get("adapter", c.eval.adapter);
    g.get("shots", c.eval.shots);
    g.get("seeds", c.eval.seeds);
    g.get("fewshot_input", c.eval.fewshot_input);
    g.get("regenerate_per_example", c.eval.regenerate_per_example);
    g.get("held_out_only", c.eval.held_out_only);
    g.finish();
  });
  f.object("data", [&](const json& s, const std::string& p) {
    Fields g(s, p);
    g.get("corpus_seed", c.data.corpus_seed);
    g.get("corpus_tokens", c.data.corpus_tokens);
    g.get("task_file", c.data.task_file);
    g.get("synth_seed", c.data.synth_seed);
    g.get("examples_per_task", c.data.examples_per_task);
    g.get("train_per_task", c.data.train_per_task);
    g.finish();
  });
  f.object("io", [&](const json& s, const std::string& p) {
    Fields g(s, p);
    g.get("out_dir", c.io.out_dir);
    g.get("downstream", c.io.downstream);
    g.get("init_checkpoint", c.io.init_checkpoint);
    g.get("resume", c.io.resume);
    g.get("adapter", c.io.adapter);
    g.finish();
  });
  f.finish();
  return c;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError(path, "empty path component");
    if (!node->is_object()) throw ConfigError(path, "'" + key + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::filesystem::path& path,
                          std::span<const std::string> overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open " + path.string());
    j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config", path.string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

}  // namespace hyperpeft
