// Experiment configuration: strict JSON parsing (unknown keys are errors),
// default resolution and conversion to trainer settings.
#pragma once

#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccfa/data.hpp"
#include "ccfa/serialize.hpp"
#include "ccfa/trainer.hpp"

namespace ccfa {

/// Invalid configuration. `field` is the dotted path of the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& msg)
      : std::runtime_error(field.empty() ? msg : field + ": " + msg), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

enum class Method { baseline, ccfa, ccfa_gt, ccfa_random, ccfa_farthest, gaussian_noise };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::baseline: return "baseline";
    case Method::ccfa: return "ccfa";
    case Method::ccfa_gt: return "ccfa_gt";
    case Method::ccfa_random: return "ccfa_random";
    case Method::ccfa_farthest: return "ccfa_farthest";
    case Method::gaussian_noise: return "gaussian_noise";
  }
  return "?";
}

inline std::optional<Method> method_from(const std::string& s) {
  for (Method m : {Method::baseline, Method::ccfa, Method::ccfa_gt, Method::ccfa_random,
                   Method::ccfa_farthest, Method::gaussian_noise})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

struct FileSource {
  std::string train;
  std::string test;
};

struct ExperimentConfig {
  Method method = Method::baseline;
  std::uint64_t seed = 0;
  std::size_t memory = 20;
  std::optional<SyntheticSpec> synthetic;  // seed left unset follows `seed`
  bool synthetic_seed_set = false;
  std::optional<FileSource> files;
  std::size_t initial = 5;
  std::size_t increment = 1;
  std::optional<std::uint64_t> order_seed;  // unset follows `seed`
  Labels order;                             // explicit permutation, overrides order_seed
  ModelConfig model;
  StageConfig stage;
  std::string output = "out";
  std::string run_id;  // empty: derived from method, seed and hash
  bool dump_points = true;
  bool checkpoint = false;
  bool attack_trace = false;
  std::vector<std::uint64_t> sweep_seeds;
  std::vector<Method> sweep_methods;
};

namespace detail {

/// Object view that remembers which keys were read, so leftovers can be
/// reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }
  const json& at(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path(key), "wrong type");
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError(path(k), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <class E>
E enum_field(Fields& f, const std::string& key, E current, std::initializer_list<E> values) {
  if (!f.has(key)) return current;
  const json& v = f.at(key);
  if (!v.is_string()) throw ConfigError(f.path(key), "expected a string");
  for (E e : values)
    if (v.get<std::string>() == to_string(e)) return e;
  std::string allowed;
  for (E e : values) allowed += std::string(allowed.empty() ? "" : ", ") + to_string(e);
  throw ConfigError(f.path(key), "'" + v.get<std::string>() + "' is not one of " + allowed);
}

inline void parse_schedule(const json& j, const std::string& path, LrSchedule& s) {
  Fields f(j, path);
  f.get("initial", s.initial);
  f.get("milestones", s.milestones);
  f.get("factor", s.factor);
  f.finish();
  if (!(s.initial >= 0.0)) throw ConfigError(f.path("initial"), "must be >= 0");
}

inline void parse_loss(const json& j, const std::string& path, LossConfig& l) {
  Fields f(j, path);
  f.get("lambda", l.lambda);
  l.cls = enum_field(f, "cls", l.cls, {ClsKind::cross_entropy, ClsKind::nca});
  l.alg = enum_field(f, "alg", l.alg,
                     {AlgKind::none, AlgKind::ucir_lessforget, AlgKind::pod_flat, AlgKind::afc_disc});
  f.get("lambda_dis", l.lambda_dis);
  f.get("lambda_mr", l.lambda_mr);
  f.get("lambda_f", l.lambda_f);
  f.get("lambda_disc", l.lambda_disc);
  f.get("adaptive_stage_weight", l.adaptive_stage_weight);
  f.get("margin", l.margin);
  f.get("top_m", l.top_m);
  f.finish();
}

inline void parse_attack(const json& j, const std::string& path, AttackConfig& a) {
  Fields f(j, path);
  f.get("steps", a.steps);
  f.get("alpha_lo", a.alpha_lo);
  f.get("alpha_hi", a.alpha_hi);
  a.init = enum_field(f, "init", a.init, {AttackInit::feature, AttackInit::gaussian_noise});
  f.get("multiplier", a.multiplier);
  a.strategy = enum_field(f, "strategy", a.strategy,
                          {TargetStrategy::nearest, TargetStrategy::relaxed_lp, TargetStrategy::random,
                           TargetStrategy::farthest, TargetStrategy::ground_truth});
  f.get("top_k", a.top_k);
  f.get("raw_confidence", a.raw_confidence);
  f.finish();
  if (!(a.alpha_lo >= 0.0 && a.alpha_lo <= a.alpha_hi))
    throw ConfigError(path + ".alpha_lo", "need 0 <= alpha_lo <= alpha_hi");
  if (a.top_k < 1) throw ConfigError(path + ".top_k", "must be >= 1");
}

inline void parse_stage(const json& j, const std::string& path, StageConfig& s) {
  Fields f(j, path);
  f.get("epochs", s.epochs);
  f.get("batch_size", s.batch_size);
  if (f.has("lr")) parse_schedule(f.at("lr"), f.path("lr"), s.lr);
  f.get("momentum", s.momentum);
  if (f.has("loss")) parse_loss(f.at("loss"), f.path("loss"), s.loss);
  if (f.has("attack")) parse_attack(f.at("attack"), f.path("attack"), s.attack);
  f.get("noise_sigma", s.noise_sigma);
  f.get("finetune_epochs", s.finetune_epochs);
  if (f.has("finetune_lr")) parse_schedule(f.at("finetune_lr"), f.path("finetune_lr"), s.finetune_lr);
  f.get("finetune_batch_size", s.finetune_batch_size);
  f.get("finetune_attack_current", s.finetune_attack_current);
  f.get("oversample_memory", s.oversample_memory);
  f.finish();
  if (s.batch_size < 1) throw ConfigError(f.path("batch_size"), "must be >= 1");
  if (s.finetune_batch_size < 1) throw ConfigError(f.path("finetune_batch_size"), "must be >= 1");
  if (!(s.momentum >= 0.0 && s.momentum < 1.0)) throw ConfigError(f.path("momentum"), "must be in [0, 1)");
  if (!(s.noise_sigma >= 0.0)) throw ConfigError(f.path("noise_sigma"), "must be >= 0");
  try {
    s.loss.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(f.path("loss"), e.what());
  }
}

inline void parse_model(const json& j, const std::string& path, ModelConfig& m) {
  Fields f(j, path);
  m.extractor = enum_field(f, "extractor", m.extractor,
                           {ExtractorKind::identity, ExtractorKind::linear, ExtractorKind::mlp});
  f.get("hidden", m.hidden);
  f.get("feature_dim", m.feature_dim);
  m.classifier = enum_field(f, "classifier", m.classifier, {ClassifierKind::cosine, ClassifierKind::lsc});
  f.get("eta", m.eta);
  f.get("proxies", m.proxies);
  f.get("nca_margin", m.nca_margin);
  f.finish();
  if (m.extractor == ExtractorKind::mlp && m.hidden.empty())
    throw ConfigError(f.path("hidden"), "mlp extractor needs at least one hidden width");
  if (!(m.eta > 0.0)) throw ConfigError(f.path("eta"), "must be > 0");
  if (m.proxies < 1) throw ConfigError(f.path("proxies"), "must be >= 1");
}

inline std::vector<Method> parse_methods(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path, "expected a list of methods");
  std::vector<Method> out;
  for (const auto& v : j) {
    const auto m = v.is_string() ? method_from(v.get<std::string>()) : std::nullopt;
    if (!m) throw ConfigError(path, "unknown method " + v.dump());
    out.push_back(*m);
  }
  return out;
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  detail::Fields f(j, "");
  if (f.has("method")) {
    const auto& v = f.at("method");
    const auto m = v.is_string() ? method_from(v.get<std::string>()) : std::nullopt;
    if (!m) throw ConfigError("method", "unknown method " + v.dump());
    c.method = *m;
  }
  f.get("seed", c.seed);
  f.get("memory", c.memory);
  if (c.memory < 1) throw ConfigError("memory", "must be >= 1");

  if (!f.has("data")) throw ConfigError("data", "missing data source");
  {
    detail::Fields d(f.at("data"), "data");
    const bool syn = d.has("synthetic"), file = d.has("file");
    if (syn == file) throw ConfigError("data", "give exactly one of 'synthetic' or 'file'");
    if (syn) {
      detail::Fields s(d.at("synthetic"), "data.synthetic");
      SyntheticSpec sp;
      s.get("dim", sp.dim);
      s.get("classes", sp.classes);
      s.get("train_per_class", sp.train_per_class);
      s.get("test_per_class", sp.test_per_class);
      s.get("kappa", sp.kappa);
      c.synthetic_seed_set = s.has("seed");
      s.get("seed", sp.seed);
      s.finish();
      try {
        sp.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError("data.synthetic", e.what());
      }
      c.synthetic = sp;
    } else {
      detail::Fields s(d.at("file"), "data.file");
      FileSource fs;
      s.get("train", fs.train);
      s.get("test", fs.test);
      s.finish();
      if (fs.train.empty()) throw ConfigError("data.file.train", "missing path");
      if (fs.test.empty()) throw ConfigError("data.file.test", "missing path");
      c.files = fs;
    }
    d.finish();
  }

  if (f.has("stream")) {
    detail::Fields s(f.at("stream"), "stream");
    s.get("initial", c.initial);
    s.get("increment", c.increment);
    if (s.has("order_seed")) {
      std::uint64_t v = 0;
      s.get("order_seed", v);
      c.order_seed = v;
    }
    s.get("order", c.order);
    s.finish();
    if (c.initial < 1) throw ConfigError("stream.initial", "must be >= 1");
    if (c.increment < 1) throw ConfigError("stream.increment", "must be >= 1");
  }
  if (f.has("model")) detail::parse_model(f.at("model"), "model", c.model);
  if (f.has("train")) detail::parse_stage(f.at("train"), "train", c.stage);

  // The ablation methods fix the target strategy.
  const auto fixed = [&]() -> std::optional<TargetStrategy> {
    switch (c.method) {
      case Method::ccfa_gt: return TargetStrategy::ground_truth;
      case Method::ccfa_random: return TargetStrategy::random;
      case Method::ccfa_farthest: return TargetStrategy::farthest;
      default: return std::nullopt;
    }
  }();
  const bool strategy_given = j.contains("train") && j["train"].contains("attack") &&
                              j["train"]["attack"].contains("strategy");
  if (fixed) {
    if (strategy_given && c.stage.attack.strategy != *fixed)
      throw ConfigError("train.attack.strategy", std::string("method ") + to_string(c.method) + " implies " +
                                                     to_string(*fixed));
    c.stage.attack.strategy = *fixed;
  } else if (c.method == Method::ccfa && c.stage.attack.strategy != TargetStrategy::nearest &&
             c.stage.attack.strategy != TargetStrategy::relaxed_lp) {
    throw ConfigError("train.attack.strategy", "method ccfa takes nearest or relaxed_lp");
  }

  f.get("output", c.output);
  f.get("run_id", c.run_id);
  f.get("dump_points", c.dump_points);
  f.get("checkpoint", c.checkpoint);
  f.get("attack_trace", c.attack_trace);
  if (f.has("sweep")) {
    detail::Fields s(f.at("sweep"), "sweep");
    s.get("seeds", c.sweep_seeds);
    if (s.has("methods")) c.sweep_methods = detail::parse_methods(s.at("methods"), "sweep.methods");
    s.finish();
  }
  f.finish();
  if (c.model.classifier == ClassifierKind::lsc && c.stage.loss.cls != ClsKind::nca)
    throw ConfigError("train.loss.cls", "lsc classifier is trained with nca");
  if (c.model.classifier == ClassifierKind::cosine && c.stage.loss.cls != ClsKind::cross_entropy)
    throw ConfigError("train.loss.cls", "cosine classifier is trained with cross_entropy");
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", std::string("not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError("", e.what());
  }
  return parse_config_text(text);
}

/// Same config with `seed` replaced; unset data and order seeds follow it.
inline ExperimentConfig with_seed(ExperimentConfig c, std::uint64_t seed) {
  c.seed = seed;
  return c;
}

inline ExperimentConfig with_method(ExperimentConfig c, Method m) {
  const bool was_ablation = c.method == Method::ccfa_gt || c.method == Method::ccfa_random ||
                            c.method == Method::ccfa_farthest;
  c.method = m;
  switch (m) {
    case Method::ccfa_gt: c.stage.attack.strategy = TargetStrategy::ground_truth; break;
    case Method::ccfa_random: c.stage.attack.strategy = TargetStrategy::random; break;
    case Method::ccfa_farthest: c.stage.attack.strategy = TargetStrategy::farthest; break;
    default:
      if (was_ablation) c.stage.attack.strategy = TargetStrategy::nearest;
  }
  return c;
}

inline std::uint64_t data_seed(const ExperimentConfig& c) {
  return c.synthetic_seed_set ? c.synthetic->seed : c.seed;
}
inline std::uint64_t stream_order_seed(const ExperimentConfig& c) { return c.order_seed.value_or(c.seed); }

// ---------------------------------------------------------------------------
// Resolved form

inline json schedule_json(const LrSchedule& s) {
  return json{{"initial", s.initial}, {"milestones", s.milestones}, {"factor", s.factor}};
}

/// Every experiment-relevant field with defaults filled in and seeds made
/// explicit. Output-only settings live under their own keys.
inline json resolved_json(const ExperimentConfig& c) {
  json j;
  j["method"] = to_string(c.method);
  j["seed"] = c.seed;
  j["memory"] = c.memory;
  if (c.synthetic) {
    const auto& s = *c.synthetic;
    j["data"] = {{"synthetic",
                  {{"dim", s.dim},
                   {"classes", s.classes},
                   {"train_per_class", s.train_per_class},
                   {"test_per_class", s.test_per_class},
                   {"kappa", s.kappa},
                   {"seed", data_seed(c)}}}};
  } else {
    j["data"] = {{"file", {{"train", c.files->train}, {"test", c.files->test}}}};
  }
  j["stream"] = {{"initial", c.initial}, {"increment", c.increment}};
  if (c.order.empty())
    j["stream"]["order_seed"] = stream_order_seed(c);
  else
    j["stream"]["order"] = c.order;
  const auto& m = c.model;
  j["model"] = {{"extractor", to_string(m.extractor)}, {"hidden", m.hidden},  {"feature_dim", m.feature_dim},
                {"classifier", to_string(m.classifier)}, {"eta", m.eta},     {"proxies", m.proxies},
                {"nca_margin", m.nca_margin}};
  const auto& s = c.stage;
  const auto& l = s.loss;
  const auto& a = s.attack;
  j["train"] = {{"epochs", s.epochs},
                {"batch_size", s.batch_size},
                {"lr", schedule_json(s.lr)},
                {"momentum", s.momentum},
                {"loss",
                 {{"lambda", l.lambda},
                  {"cls", to_string(l.cls)},
                  {"alg", to_string(l.alg)},
                  {"lambda_dis", l.lambda_dis},
                  {"lambda_mr", l.lambda_mr},
                  {"lambda_f", l.lambda_f},
                  {"lambda_disc", l.lambda_disc},
                  {"adaptive_stage_weight", l.adaptive_stage_weight},
                  {"margin", l.margin},
                  {"top_m", l.top_m}}},
                {"attack",
                 {{"steps", a.steps},
                  {"alpha_lo", a.alpha_lo},
                  {"alpha_hi", a.alpha_hi},
                  {"init", to_string(a.init)},
                  {"multiplier", a.multiplier},
                  {"strategy", to_string(a.strategy)},
                  {"top_k", a.top_k},
                  {"raw_confidence", a.raw_confidence}}},
                {"noise_sigma", s.noise_sigma},
                {"finetune_epochs", s.finetune_epochs},
                {"finetune_lr", schedule_json(s.finetune_lr)},
                {"finetune_batch_size", s.finetune_batch_size},
                {"finetune_attack_current", s.finetune_attack_current},
                {"oversample_memory", s.oversample_memory}};
  j["output"] = c.output;
  j["run_id"] = c.run_id;
  j["dump_points"] = c.dump_points;
  j["checkpoint"] = c.checkpoint;
  j["attack_trace"] = c.attack_trace;
  return j;
}

/// Hash of the experiment-relevant part of the resolved config.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = resolved_json(c);
  for (const char* k : {"output", "run_id", "dump_points", "checkpoint", "attack_trace"}) j.erase(k);
  const std::string text = j.dump();
  return hex64(fnv1a(text.data(), text.size()));
}

inline std::string run_id(const ExperimentConfig& c) {
  if (!c.run_id.empty()) return c.run_id;
  return std::string(to_string(c.method)) + "-s" + std::to_string(c.seed) + "-" + config_hash(c).substr(0, 8);
}

/// Trainer settings for the config. A multiplier of 0 turns augmentation off.
inline ExperimentSettings settings_for(const ExperimentConfig& c) {
  ExperimentSettings s;
  s.model = c.model;
  s.stage = c.stage;
  s.memory_budget = c.memory;
  s.seed = c.seed;
  s.config_hash = config_hash(c);
  switch (c.method) {
    case Method::baseline: s.stage.augmentation = Augmentation::none; break;
    case Method::gaussian_noise: s.stage.augmentation = Augmentation::gaussian_noise; break;
    default: s.stage.augmentation = Augmentation::ccfa; break;
  }
  if (s.stage.attack.multiplier == 0) s.stage.augmentation = Augmentation::none;
  s.stage.trace_attacks = c.attack_trace;
  return s;
}

/// Builds the task stream: synthetic data or feature files, then the class
/// order and split.
inline TaskStream build_stream(const ExperimentConfig& c) {
  Dataset train, test;
  if (c.synthetic) {
    SyntheticSpec sp = *c.synthetic;
    sp.seed = data_seed(c);
    auto d = generate_synthetic(sp);
    train = std::move(d.train);
    test = std::move(d.test);
  } else {
    train = load_feature_file(c.files->train);
    test = load_feature_file(c.files->test);
    const std::size_t n = std::max(train.num_classes, test.num_classes);
    train.num_classes = test.num_classes = n;
  }
  const Labels order = c.order.empty() ? class_order_from_seed(train.num_classes, stream_order_seed(c)) : c.order;
  return split_stream(train, test, c.initial, c.increment, order);
}

}  // namespace ccfa
