#pragma once

// Embedding tables, the stacked attention/feed-forward blocks and the
// prediction heads, configurable into the sasrec / sasrec_f / nova / dif
// variants.
//
// Input representation per variant:
//   sasrec    R1 = E_ID + P
//   sasrec_f  R1 = E_ID + P + sum_j E_fj A_j          (A_j: d_fj -> d, no bias)
//   nova      R1 = E_ID + P; every layer uses R + sum_j E_fj A_j for Q/K, R for V
//   dif       R1 = E_ID; position and attributes are separate attention streams
// Each block: A = LN(R + Drop(Attn(R))), R' = LN(A + Drop(FFN(A))).

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "difsr/attention/attention.hpp"
#include "difsr/dataset/dataset.hpp"
#include "difsr/errors.hpp"
#include "difsr/model/config.hpp"
#include "difsr/numcore/ops.hpp"
#include "difsr/numcore/random.hpp"

namespace difsr::model {

using numcore::Shape;
using numcore::Value;

inline constexpr double kProbabilityEps = 1e-7;

/// Vocabulary sizes the parameters depend on. Sizes include the reserved index 0.
struct Schema {
  std::size_t item_vocab = 1;
  std::vector<std::string> attribute_names;   // aligned with ModelConfig::attributes
  std::vector<std::size_t> attribute_vocab;

  /// Resolves the configured attributes against a dataset. Returns the schema and
  /// the dataset catalog slot of each configured attribute.
  static std::pair<Schema, std::vector<std::size_t>> resolve(const data::InteractionDataset& ds,
                                                             const ModelConfig& config) {
    Schema s;
    s.item_vocab = ds.items.size();
    std::vector<std::size_t> slots;
    for (const auto& a : config.attributes) {
      auto slot = ds.find_attribute(a.name);
      if (!slot) throw ValidationError("attribute '" + a.name + "' is not present in the dataset");
      slots.push_back(*slot);
      s.attribute_names.push_back(a.name);
      s.attribute_vocab.push_back(ds.attributes[*slot].vocab.size());
    }
    return {s, slots};
  }
};

struct LayerParams {
  attention::AttentionParams attention;
  Value ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Value ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

struct ModelParams {
  Value item_table;                        // (|I|+1) x d, row 0 = padding
  Value position_table;                    // n x d
  std::vector<Value> attribute_tables;     // (|f_j|+1) x d_fj, row 0 = no value
  std::vector<Value> attribute_to_hidden;  // d_fj x d (sasrec_f, nova)
  std::vector<LayerParams> layers;
  std::vector<Value> aap_weight;  // |f_j| x d
  std::vector<Value> aap_bias;    // |f_j|

  /// Visits every parameter in a fixed order: f(name, value, has_padding_row).
  template <class F>
  void visit(F&& f) {
    f("item_table", item_table, true);
    f("position_table", position_table, false);
    for (std::size_t j = 0; j < attribute_tables.size(); ++j) {
      f("attribute" + std::to_string(j) + ".table", attribute_tables[j], true);
    }
    for (std::size_t j = 0; j < attribute_to_hidden.size(); ++j) {
      f("attribute" + std::to_string(j) + ".to_hidden", attribute_to_hidden[j], false);
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& layer = layers[l];
      const std::string prefix = "layer" + std::to_string(l) + ".";
      auto& a = layer.attention;
      f(prefix + "attn.w_q", a.w_q, false);
      f(prefix + "attn.w_k", a.w_k, false);
      f(prefix + "attn.w_v", a.w_v, false);
      f(prefix + "attn.w_o", a.w_o, false);
      f(prefix + "attn.b_o", a.b_o, false);
      for (std::size_t s = 0; s < a.streams.size(); ++s) {
        f(prefix + "attn.stream" + std::to_string(s) + ".w_q", a.streams[s].w_q, false);
        f(prefix + "attn.stream" + std::to_string(s) + ".w_k", a.streams[s].w_k, false);
      }
      for (std::size_t h = 0; h < a.fusion_heads.size(); ++h) {
        f(prefix + "attn.fusion.head" + std::to_string(h) + ".coeffs", a.fusion_heads[h].coeffs, false);
        if (a.fusion_heads[h].bias.defined()) {
          f(prefix + "attn.fusion.head" + std::to_string(h) + ".bias", a.fusion_heads[h].bias, false);
        }
      }
      f(prefix + "ffn.w1", layer.ffn_w1, false);
      f(prefix + "ffn.b1", layer.ffn_b1, false);
      f(prefix + "ffn.w2", layer.ffn_w2, false);
      f(prefix + "ffn.b2", layer.ffn_b2, false);
      f(prefix + "ln1.gain", layer.ln1_gain, false);
      f(prefix + "ln1.bias", layer.ln1_bias, false);
      f(prefix + "ln2.gain", layer.ln2_gain, false);
      f(prefix + "ln2.bias", layer.ln2_bias, false);
    }
    for (std::size_t j = 0; j < aap_weight.size(); ++j) {
      f("aap" + std::to_string(j) + ".weight", aap_weight[j], false);
      f("aap" + std::to_string(j) + ".bias", aap_bias[j], false);
    }
  }

  struct Named {
    std::string name;
    Value value;
    bool has_padding_row = false;
  };

  std::vector<Named> named() const {
    std::vector<Named> out;
    const_cast<ModelParams*>(this)->visit(
        [&](const std::string& name, Value& v, bool pad) { out.push_back({name, v, pad}); });
    return out;
  }

  /// Deep copy with independent storage and zeroed gradients.
  ModelParams clone() const {
    ModelParams copy = *this;
    copy.visit([](const std::string&, Value& v, bool) {
      v = Value::parameter(v.shape(), std::vector<double>(v.data().begin(), v.data().end()));
    });
    return copy;
  }

  void zero_grad() {
    visit([](const std::string&, Value& v, bool) { v.zero_grad(); });
  }
};

inline ModelParams init_params(const ModelConfig& config, const Schema& schema, numcore::Rng& rng) {
  config.validate();
  if (schema.attribute_vocab.size() != config.attributes.size()) {
    throw ContractError("schema does not match the configured attributes");
  }
  const std::size_t d = config.d;
  ModelParams p;
  p.item_table = attention::weight({schema.item_vocab, d}, rng);
  p.position_table = attention::weight({config.max_len, d}, rng);
  if (config.uses_attribute_inputs()) {
    for (std::size_t j = 0; j < config.attributes.size(); ++j) {
      p.attribute_tables.push_back(attention::weight({schema.attribute_vocab[j], config.attributes[j].dim}, rng));
    }
    if (config.variant == Variant::sasrec_f || config.variant == Variant::nova) {
      for (const auto& a : config.attributes) p.attribute_to_hidden.push_back(attention::weight({a.dim, d}, rng));
    }
  }
  std::vector<std::size_t> stream_dims;
  if (config.variant == Variant::dif) {
    stream_dims.push_back(d);  // position stream
    for (const auto& a : config.attributes) stream_dims.push_back(a.dim);
  }
  const Fusion fusion = config.variant == Variant::dif ? config.fusion : Fusion::add;
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerParams layer;
    layer.attention = attention::init_attention(d, config.heads, stream_dims, fusion, rng);
    layer.ffn_w1 = attention::weight({d, 4 * d}, rng);
    layer.ffn_b1 = attention::zeros_param({4 * d});
    layer.ffn_w2 = attention::weight({4 * d, d}, rng);
    layer.ffn_b2 = attention::zeros_param({d});
    layer.ln1_gain = Value::parameter({d}, std::vector<double>(d, 1.0));
    layer.ln1_bias = attention::zeros_param({d});
    layer.ln2_gain = Value::parameter({d}, std::vector<double>(d, 1.0));
    layer.ln2_bias = attention::zeros_param({d});
    p.layers.push_back(std::move(layer));
  }
  if (config.aap) {
    for (std::size_t j = 0; j < config.attributes.size(); ++j) {
      const std::size_t classes = schema.attribute_vocab[j] - 1;
      p.aap_weight.push_back(attention::weight({classes, d}, rng));
      p.aap_bias.push_back(attention::zeros_param({classes}));
    }
  }
  return p;
}

struct Embeddings {
  Value items;                   // [B, n, d]
  std::vector<Value> attributes;  // [B, n, d_fj]
};

/// Item lookup plus mean-pooled attribute lookups (padding values excluded).
inline Embeddings embed(const data::Batch& batch, const ModelConfig& config, const ModelParams& params) {
  Embeddings e;
  const std::size_t b = batch.size, n = batch.max_len;
  e.items = numcore::gather_rows(params.item_table, batch.items, {b, n});
  if (config.uses_attribute_inputs()) {
    if (batch.attributes.size() != params.attribute_tables.size()) {
      throw ContractError("batch carries " + std::to_string(batch.attributes.size()) + " attributes, model expects " +
                          std::to_string(params.attribute_tables.size()));
    }
    for (std::size_t j = 0; j < params.attribute_tables.size(); ++j) {
      e.attributes.push_back(
          numcore::bag_mean(params.attribute_tables[j], batch.attributes[j], {b, n, batch.attribute_widths[j]}));
    }
  }
  return e;
}

struct ForwardOptions {
  bool capture_traces = false;
  /// Dropout is applied only when a generator is supplied and the rate is positive.
  numcore::Rng* dropout_rng = nullptr;
};

/// Intermediate nodes exposed for gradient inspection.
struct Probes {
  Value item_embedding;                  // E_ID
  std::vector<Value> attribute_embeddings;  // E_fj (pooled, before any projection)
  std::vector<Value> fusion_summands;       // E_fj A_j as added into the fused input (sasrec_f, nova)
  Value attribute_sum;                      // nova: sum_j E_fj A_j
};

struct ForwardResult {
  Value output;  // R_L, [B, n, d]
  std::vector<attention::AttentionTrace> traces;
  Probes probes;
};

namespace detail {

inline Value maybe_dropout(const Value& x, double rate, numcore::Rng* rng) {
  if (!rng || rate == 0.0) return x;
  return numcore::dropout(x, rate, *rng);
}

inline Value position_stream(const ModelParams& params, std::size_t batch, std::size_t n) {
  std::vector<std::int32_t> idx(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < n; ++t) idx[b * n + t] = static_cast<std::int32_t>(t);
  }
  return numcore::gather_rows(params.position_table, idx, {batch, n});
}

}  // namespace detail

inline ForwardResult forward(const data::Batch& batch, const ModelConfig& config, const ModelParams& params,
                             const ForwardOptions& options = {}) {
  if (batch.max_len != config.max_len) throw ContractError("batch max_len differs from the model's max_len");
  if (params.layers.size() != config.layers) throw ContractError("parameters do not match the configured depth");
  ForwardResult result;
  const std::size_t bsz = batch.size, n = batch.max_len;
  Embeddings emb = embed(batch, config, params);
  result.probes.item_embedding = emb.items;
  result.probes.attribute_embeddings = emb.attributes;
  const numcore::Mask mask = attention::causal_mask(batch.lengths, n);

  Value r;
  Value attribute_sum;
  std::vector<Value> streams;
  switch (config.variant) {
    case Variant::sasrec:
      r = numcore::add(emb.items, params.position_table);
      break;
    case Variant::sasrec_f:
    case Variant::nova: {
      r = numcore::add(emb.items, params.position_table);
      for (std::size_t j = 0; j < emb.attributes.size(); ++j) {
        Value projected = numcore::matmul(emb.attributes[j], params.attribute_to_hidden[j]);
        result.probes.fusion_summands.push_back(projected);
        if (config.variant == Variant::sasrec_f) {
          r = numcore::add(r, projected);
        } else {
          attribute_sum = attribute_sum.defined() ? numcore::add(attribute_sum, projected) : projected;
        }
      }
      result.probes.attribute_sum = attribute_sum;
      break;
    }
    case Variant::dif:
      r = emb.items;
      streams.push_back(detail::position_stream(params, bsz, n));
      for (const auto& a : emb.attributes) streams.push_back(a);
      break;
  }
  r = detail::maybe_dropout(r, config.dropout, options.dropout_rng);

  auto* traces = options.capture_traces ? &result.traces : nullptr;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    Value attn;
    switch (config.variant) {
      case Variant::sasrec:
      case Variant::sasrec_f:
        attn = attention::sas_attention(r, layer.attention, mask, traces, l);
        break;
      case Variant::nova: {
        const Value fused = attribute_sum.defined() ? numcore::add(r, attribute_sum) : r;
        attn = attention::nova_attention(fused, r, layer.attention, mask, traces, l);
        break;
      }
      case Variant::dif:
        attn = attention::dif_attention(r, streams, layer.attention, mask, traces, l);
        break;
    }
    const Value a = numcore::layer_norm(numcore::add(r, detail::maybe_dropout(attn, config.dropout, options.dropout_rng)),
                                        layer.ln1_gain, layer.ln1_bias, config.layer_norm_eps);
    const Value hidden = numcore::gelu(numcore::add(numcore::matmul(a, layer.ffn_w1), layer.ffn_b1));
    const Value ffn = numcore::add(numcore::matmul(hidden, layer.ffn_w2), layer.ffn_b2);
    r = numcore::layer_norm(numcore::add(a, detail::maybe_dropout(ffn, config.dropout, options.dropout_rng)),
                            layer.ln2_gain, layer.ln2_bias, config.layer_norm_eps);
  }
  result.output = r;
  return result;
}

/// Representation at the last real position. Sequences are left-padded, so
/// that is always position n-1.
inline Value last_position(const Value& r, std::span<const std::size_t> lengths) {
  if (r.rank() != 3 || lengths.size() != r.dim(0)) throw DimensionError("last_position: expected [B, n, d] and B lengths");
  for (auto len : lengths) {
    if (len == 0 || len > r.dim(1)) throw ContractError("last_position: sequence length must lie in [1, n]");
  }
  return numcore::take_position(r, r.dim(1) - 1);
}

/// Item scores M_id r_last^T per sequence, [B, |I|+1]; the padding column is -inf.
inline Value predict_items(const Value& r, std::span<const std::size_t> lengths, const ModelParams& params) {
  const Value last = last_position(r, lengths);
  return numcore::mask_columns(numcore::matmul_bt(last, params.item_table), {0},
                               -std::numeric_limits<double>::infinity());
}

/// sigmoid(W_fj r_last^T + b_fj) per attribute j, each [B, |f_j|], clamped to [eps, 1-eps].
inline std::vector<Value> predict_attributes(const Value& r, std::span<const std::size_t> lengths,
                                             const ModelConfig& config, const ModelParams& params) {
  if (!config.aap) throw ContractError("predict_attributes: auxiliary attribute predictors are disabled");
  const Value last = last_position(r, lengths);
  std::vector<Value> out;
  for (std::size_t j = 0; j < params.aap_weight.size(); ++j) {
    out.push_back(numcore::sigmoid(numcore::add(numcore::matmul_bt(last, params.aap_weight[j]), params.aap_bias[j]),
                                   kProbabilityEps));
  }
  return out;
}

}  // namespace difsr::model
