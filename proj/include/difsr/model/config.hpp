#pragma once

// Run configuration: one JSON document holding model and training
// hyperparameters. Unknown keys are rejected.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "difsr/errors.hpp"

namespace difsr {

enum class Variant { sasrec, sasrec_f, nova, dif };
enum class Fusion { add, concat, gate };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::sasrec: return "sasrec";
    case Variant::sasrec_f: return "sasrec_f";
    case Variant::nova: return "nova";
    case Variant::dif: return "dif";
  }
  return "?";
}

inline std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::add: return "add";
    case Fusion::concat: return "concat";
    case Fusion::gate: return "gate";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "sasrec") return Variant::sasrec;
  if (s == "sasrec_f") return Variant::sasrec_f;
  if (s == "nova") return Variant::nova;
  if (s == "dif") return Variant::dif;
  throw ValidationError("unknown variant '" + s + "' (expected sasrec, sasrec_f, nova or dif)");
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "add") return Fusion::add;
  if (s == "concat") return Fusion::concat;
  if (s == "gate") return Fusion::gate;
  throw ValidationError("unknown fusion '" + s + "' (expected add, concat or gate)");
}

struct AttributeSpec {
  std::string name;
  std::size_t dim = 0;
};

struct ModelConfig {
  Variant variant = Variant::dif;
  std::size_t d = 64;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t max_len = 50;
  std::vector<AttributeSpec> attributes;
  Fusion fusion = Fusion::add;
  double dropout = 0.1;
  bool aap = true;
  double lambda = 10.0;
  double layer_norm_eps = 1e-12;

  bool uses_attribute_inputs() const { return variant != Variant::sasrec; }

  /// Throws ValidationError when an invariant is broken.
  void validate() const {
    if (d == 0 || heads == 0) throw ValidationError("d and heads must be positive");
    if (d % heads != 0) throw ValidationError("d (" + std::to_string(d) + ") must be divisible by heads (" + std::to_string(heads) + ")");
    if (max_len == 0) throw ValidationError("max_len must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
    if (!(lambda >= 0.0)) throw ValidationError("lambda must be non-negative");
    std::set<std::string> seen;
    for (const auto& a : attributes) {
      if (a.name.empty()) throw ValidationError("attribute name must not be empty");
      if (!seen.insert(a.name).second) throw ValidationError("duplicate attribute '" + a.name + "'");
      if (a.dim == 0 || a.dim % heads != 0) {
        throw ValidationError("attribute '" + a.name + "' dim must be a positive multiple of heads");
      }
      if (a.dim > d) throw ValidationError("attribute '" + a.name + "' dim exceeds d");
    }
  }
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 256;
  std::size_t epochs = 50;
  std::uint64_t seed = 42;
  std::vector<std::size_t> eval_ks = {10, 20};
  bool exclude_seen = true;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // 0 disables global-norm clipping

  void validate() const {
    if (!(lr > 0.0)) throw ValidationError("lr must be positive");
    if (batch_size == 0) throw ValidationError("batch_size must be positive");
    if (eval_ks.empty()) throw ValidationError("eval_ks must not be empty");
    for (auto k : eval_ks) {
      if (k == 0) throw ValidationError("eval_ks entries must be positive");
    }
    if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be non-negative");
    if (!(grad_clip >= 0.0)) throw ValidationError("grad_clip must be non-negative");
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const {
    model.validate();
    train.validate();
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : c.model.attributes) attrs.push_back({{"name", a.name}, {"dim", a.dim}});
  return {
      {"variant", to_string(c.model.variant)},
      {"d", c.model.d},
      {"heads", c.model.heads},
      {"layers", c.model.layers},
      {"max_len", c.model.max_len},
      {"attributes", attrs},
      {"fusion", to_string(c.model.fusion)},
      {"dropout", c.model.dropout},
      {"aap", c.model.aap},
      {"lambda", c.model.lambda},
      {"lr", c.train.lr},
      {"batch_size", c.train.batch_size},
      {"epochs", c.train.epochs},
      {"seed", c.train.seed},
      {"eval_ks", c.train.eval_ks},
      {"exclude_seen", c.train.exclude_seen},
      {"weight_decay", c.train.weight_decay},
      {"grad_clip", c.train.grad_clip},
  };
}

namespace detail {

template <class T>
T read_field(const nlohmann::json& doc, const std::string& key) {
  try {
    return doc.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("config key '" + key + "' has the wrong type");
  }
}

inline std::size_t read_count(const nlohmann::json& doc, const std::string& key) {
  const auto& v = doc.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ValidationError("config key '" + key + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

inline double read_number(const nlohmann::json& doc, const std::string& key) {
  const auto& v = doc.at(key);
  if (!v.is_number()) throw ValidationError("config key '" + key + "' must be a number");
  return v.get<double>();
}

}  // namespace detail

/// Parses and validates a config document. Missing keys take defaults.
inline RunConfig parse_config(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("config must be a JSON object");
  static const std::set<std::string> known = {
      "variant", "d",     "heads",      "layers", "max_len", "attributes", "fusion",       "dropout",      "aap",
      "lambda",  "lr",    "batch_size", "epochs", "seed",    "eval_ks",    "exclude_seen", "weight_decay", "grad_clip",
      "format_version"};
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ValidationError("unknown config key '" + key + "'");
  }
  RunConfig c;
  if (doc.contains("format_version") && doc.at("format_version") != 1) {
    throw ValidationError("unsupported config format_version");
  }
  if (doc.contains("variant")) c.model.variant = parse_variant(detail::read_field<std::string>(doc, "variant"));
  if (doc.contains("d")) c.model.d = detail::read_count(doc, "d");
  if (doc.contains("heads")) c.model.heads = detail::read_count(doc, "heads");
  if (doc.contains("layers")) c.model.layers = detail::read_count(doc, "layers");
  if (doc.contains("max_len")) c.model.max_len = detail::read_count(doc, "max_len");
  if (doc.contains("attributes")) {
    const auto& list = doc.at("attributes");
    if (!list.is_array()) throw ValidationError("config key 'attributes' must be a list");
    for (const auto& entry : list) {
      if (!entry.is_object()) throw ValidationError("each attribute must be an object {name, dim}");
      for (const auto& [key, value] : entry.items()) {
        if (key != "name" && key != "dim") throw ValidationError("unknown config key 'attributes[]." + key + "'");
      }
      if (!entry.contains("name") || !entry.contains("dim")) {
        throw ValidationError("each attribute needs 'name' and 'dim'");
      }
      c.model.attributes.push_back({detail::read_field<std::string>(entry, "name"), detail::read_count(entry, "dim")});
    }
  }
  if (doc.contains("fusion")) c.model.fusion = parse_fusion(detail::read_field<std::string>(doc, "fusion"));
  if (doc.contains("dropout")) c.model.dropout = detail::read_number(doc, "dropout");
  if (doc.contains("aap")) c.model.aap = detail::read_field<bool>(doc, "aap");
  if (doc.contains("lambda")) c.model.lambda = detail::read_number(doc, "lambda");
  if (doc.contains("lr")) c.train.lr = detail::read_number(doc, "lr");
  if (doc.contains("batch_size")) c.train.batch_size = detail::read_count(doc, "batch_size");
  if (doc.contains("epochs")) c.train.epochs = detail::read_count(doc, "epochs");
  if (doc.contains("seed")) c.train.seed = detail::read_count(doc, "seed");
  if (doc.contains("eval_ks")) {
    const auto& ks = doc.at("eval_ks");
    if (!ks.is_array()) throw ValidationError("config key 'eval_ks' must be a list");
    c.train.eval_ks.clear();
    for (const auto& k : ks) {
      if (!k.is_number_integer() || k.get<long long>() <= 0) throw ValidationError("eval_ks entries must be positive integers");
      c.train.eval_ks.push_back(k.get<std::size_t>());
    }
  }
  if (doc.contains("exclude_seen")) c.train.exclude_seen = detail::read_field<bool>(doc, "exclude_seen");
  if (doc.contains("weight_decay")) c.train.weight_decay = detail::read_number(doc, "weight_decay");
  if (doc.contains("grad_clip")) c.train.grad_clip = detail::read_number(doc, "grad_clip");
  c.validate();
  return c;
}

}  // namespace difsr
