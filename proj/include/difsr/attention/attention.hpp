#pragma once

// Multi-head causal attention in three flavours:
//   sas_attention   Q, K and V from one (possibly early-fused) representation.
//   nova_attention  Q, K from the fused representation, V from the item stream.
//   dif_attention   separate logit matrices per stream (item, position,
//                   attributes), fused at the logit level, V from the item stream.
//
// Logits are (X W_Q^i)(X W_K^i)^T with no bias; the fused logits are scaled by
// 1/sqrt(d), d being the item hidden size, before the masked softmax.

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "difsr/errors.hpp"
#include "difsr/model/config.hpp"
#include "difsr/numcore/ops.hpp"
#include "difsr/numcore/random.hpp"

namespace difsr::attention {

using numcore::Mask;
using numcore::Shape;
using numcore::Value;

inline constexpr double kInitStd = 0.02;

/// Query/key projections of one side-information stream (d_s x d_s; head i owns
/// columns [i*d_s/h, (i+1)*d_s/h)).
struct StreamProjection {
  Value w_q;
  Value w_k;
};

/// Per-head fusion parameters. concat: coeffs [S] and bias [1]; gate: coeffs are
/// the pre-softmax gate scalars [S]; add: unused.
struct FusionHead {
  Value coeffs;
  Value bias;
};

struct AttentionParams {
  std::size_t heads = 1;
  Value w_q, w_k, w_v;  // d x d; head i owns columns [i*d/h, (i+1)*d/h)
  Value w_o, b_o;       // output projection d x d, bias d
  std::vector<StreamProjection> streams;
  Fusion fusion = Fusion::add;
  std::vector<FusionHead> fusion_heads;  // one per head when fusion != add

  std::size_t hidden() const { return w_q.dim(0); }
  std::size_t head_width() const { return hidden() / heads; }

  std::vector<std::pair<std::string, Value>> named(const std::string& prefix) const {
    std::vector<std::pair<std::string, Value>> out = {
        {prefix + "w_q", w_q}, {prefix + "w_k", w_k}, {prefix + "w_v", w_v}, {prefix + "w_o", w_o}, {prefix + "b_o", b_o}};
    for (std::size_t s = 0; s < streams.size(); ++s) {
      out.emplace_back(prefix + "stream" + std::to_string(s) + ".w_q", streams[s].w_q);
      out.emplace_back(prefix + "stream" + std::to_string(s) + ".w_k", streams[s].w_k);
    }
    for (std::size_t h = 0; h < fusion_heads.size(); ++h) {
      out.emplace_back(prefix + "fusion.head" + std::to_string(h) + ".coeffs", fusion_heads[h].coeffs);
      if (fusion_heads[h].bias.defined()) {
        out.emplace_back(prefix + "fusion.head" + std::to_string(h) + ".bias", fusion_heads[h].bias);
      }
    }
    return out;
  }
};

/// Logit matrices of one (layer, head), each [B, n, n] (or [n, n] for unbatched input).
struct AttentionTrace {
  std::size_t layer = 0;
  std::size_t head = 0;
  Value item_logits;
  std::vector<Value> stream_logits;
  Value fused_logits;  // before the 1/sqrt(d) scale
  Value weights;       // post-softmax
};

inline Value weight(Shape shape, numcore::Rng& rng) {
  const auto n = numcore::element_count(shape);
  return Value::parameter(std::move(shape), numcore::truncated_normal(n, kInitStd, rng));
}

inline Value zeros_param(Shape shape) {
  const auto n = numcore::element_count(shape);
  return Value::parameter(std::move(shape), std::vector<double>(n, 0.0));
}

/// Fresh parameters: truncated-normal projections, fusion initialised to plain
/// addition (concat) or equal gates (gate).
inline AttentionParams init_attention(std::size_t d, std::size_t heads, std::span<const std::size_t> stream_dims,
                                      Fusion fusion, numcore::Rng& rng) {
  if (heads == 0 || d % heads != 0) throw ContractError("attention: d must be divisible by heads");
  AttentionParams p;
  p.heads = heads;
  p.w_q = weight({d, d}, rng);
  p.w_k = weight({d, d}, rng);
  p.w_v = weight({d, d}, rng);
  p.w_o = weight({d, d}, rng);
  p.b_o = zeros_param({d});
  for (auto ds : stream_dims) {
    if (ds % heads != 0) throw ContractError("attention: stream width must be divisible by heads");
    p.streams.push_back({weight({ds, ds}, rng), weight({ds, ds}, rng)});
  }
  p.fusion = fusion;
  const std::size_t sources = 1 + stream_dims.size();
  if (fusion != Fusion::add) {
    for (std::size_t h = 0; h < heads; ++h) {
      FusionHead fh;
      if (fusion == Fusion::concat) {
        fh.coeffs = Value::parameter({sources}, std::vector<double>(sources, 1.0));
        fh.bias = zeros_param({1});
      } else {
        fh.coeffs = zeros_param({sources});
      }
      p.fusion_heads.push_back(std::move(fh));
    }
  }
  return p;
}

/// Allowed-entry pattern for left-padded sequences: real query t attends to
/// real keys s <= t. Padding query rows attend only to themselves, which keeps
/// every row non-degenerate without letting padding reach real positions.
inline Mask causal_mask(std::span<const std::size_t> lengths, std::size_t n) {
  Mask mask;
  mask.shape = {lengths.size(), n, n};
  mask.allowed.assign(lengths.size() * n * n, 0);
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    if (lengths[b] > n) throw ContractError("causal_mask: length exceeds max_len");
    const std::size_t first_real = n - lengths[b];
    for (std::size_t t = 0; t < n; ++t) {
      auto* row = mask.allowed.data() + (b * n + t) * n;
      if (t < first_real) {
        row[t] = 1;
        continue;
      }
      for (std::size_t s = first_real; s <= t; ++s) row[s] = 1;
    }
  }
  return mask;
}

inline Mask causal_mask(std::size_t n) {
  Mask mask;
  mask.shape = {n, n};
  mask.allowed.assign(n * n, 0);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t s = 0; s <= t; ++s) mask.allowed[t * n + s] = 1;
  }
  return mask;
}

namespace detail {

inline void check_input(const Value& x, std::size_t width, const char* what) {
  if (x.rank() < 2 || x.shape().back() != width) {
    throw DimensionError(std::string(what) + ": input " + numcore::shape_string(x.shape()) +
                         " does not match projection width " + std::to_string(width));
  }
}

inline Value head_logits(const Value& x, const Value& w_q, const Value& w_k, std::size_t head, std::size_t heads) {
  const std::size_t width = w_q.dim(1) / heads;
  const Value q = numcore::matmul(x, numcore::slice_last(w_q, head * width, width));
  const Value k = numcore::matmul(x, numcore::slice_last(w_k, head * width, width));
  return numcore::matmul_bt(q, k);
}

}  // namespace detail

/// (R W_Q^i)(R W_K^i)^T for the item stream; [.., n, d] -> [.., n, n].
inline Value item_logits(const Value& r, std::size_t head, const AttentionParams& p) {
  detail::check_input(r, p.hidden(), "item_logits");
  if (head >= p.heads) throw ContractError("item_logits: head index out of range");
  return detail::head_logits(r, p.w_q, p.w_k, head, p.heads);
}

/// (E W_Q^(s)i)(E W_K^(s)i)^T for side-information stream `stream`.
inline Value attribute_logits(const Value& e, std::size_t stream, std::size_t head, const AttentionParams& p) {
  if (stream >= p.streams.size()) throw ContractError("attribute_logits: stream index out of range");
  if (head >= p.heads) throw ContractError("attribute_logits: head index out of range");
  const auto& proj = p.streams[stream];
  detail::check_input(e, proj.w_q.dim(0), "attribute_logits");
  return detail::head_logits(e, proj.w_q, proj.w_k, head, p.heads);
}

/// Combines the item logits with the stream logits.
///   add:    item + sum(attrs)
///   gate:   sum_k softmax(g)_k * M_k
///   concat: sum_k c_k * M_k + b  (learned 1x1 map across the source axis)
inline Value fuse_logits(const Value& item, const std::vector<Value>& attrs, Fusion fusion,
                         const FusionHead* head_params = nullptr) {
  if (!item.defined()) throw ContractError("fuse_logits: empty source list");
  for (const auto& a : attrs) {
    if (a.shape() != item.shape()) {
      throw DimensionError("fuse_logits: " + numcore::shape_string(a.shape()) + " vs " +
                           numcore::shape_string(item.shape()));
    }
  }
  if (fusion == Fusion::add) {
    Value fused = item;
    for (const auto& a : attrs) fused = numcore::add(fused, a);
    return fused;
  }
  if (!head_params) throw ContractError("fuse_logits: gate/concat fusion needs per-head parameters");
  std::vector<Value> sources;
  sources.reserve(attrs.size() + 1);
  sources.push_back(item);
  sources.insert(sources.end(), attrs.begin(), attrs.end());
  if (fusion == Fusion::gate) return numcore::mix(sources, numcore::softmax(head_params->coeffs));
  return numcore::mix(sources, head_params->coeffs, &head_params->bias);
}

/// Shared body: logits from `query_source` (plus side streams), values from `value_source`.
inline Value attend(const Value& query_source, const Value& value_source, const std::vector<Value>& streams,
                    const AttentionParams& p, const Mask& mask, std::vector<AttentionTrace>* traces = nullptr,
                    std::size_t layer = 0) {
  if (query_source.shape() != value_source.shape()) {
    throw DimensionError("attention: query source " + numcore::shape_string(query_source.shape()) +
                         " vs value source " + numcore::shape_string(value_source.shape()));
  }
  if (streams.size() != p.streams.size() && !streams.empty()) {
    throw ContractError("attention: " + std::to_string(streams.size()) + " streams supplied, parameters hold " +
                        std::to_string(p.streams.size()));
  }
  detail::check_input(query_source, p.hidden(), "attention");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.hidden()));
  const std::size_t width = p.head_width();
  const Value values = numcore::matmul(value_source, p.w_v);
  std::vector<Value> head_outputs;
  head_outputs.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const Value item = item_logits(query_source, h, p);
    std::vector<Value> side;
    side.reserve(streams.size());
    for (std::size_t s = 0; s < streams.size(); ++s) side.push_back(attribute_logits(streams[s], s, h, p));
    const FusionHead* fh = p.fusion_heads.empty() ? nullptr : &p.fusion_heads[h];
    const Value fused = streams.empty() ? item : fuse_logits(item, side, p.fusion, fh);
    const Value weights = numcore::masked_softmax(numcore::scale(fused, inv_sqrt_d), &mask);
    head_outputs.push_back(numcore::matmul(weights, numcore::slice_last(values, h * width, width)));
    if (traces) traces->push_back({layer, h, item, side, fused, weights});
  }
  const Value joined = p.heads == 1 ? head_outputs.front() : numcore::concat_last(head_outputs);
  return numcore::add(numcore::matmul(joined, p.w_o), p.b_o);
}

inline Value sas_attention(const Value& r, const AttentionParams& p, const Mask& mask,
                           std::vector<AttentionTrace>* traces = nullptr, std::size_t layer = 0) {
  return attend(r, r, {}, p, mask, traces, layer);
}

inline Value nova_attention(const Value& r_fused, const Value& r_id, const AttentionParams& p, const Mask& mask,
                            std::vector<AttentionTrace>* traces = nullptr, std::size_t layer = 0) {
  return attend(r_fused, r_id, {}, p, mask, traces, layer);
}

inline Value dif_attention(const Value& r_id, const std::vector<Value>& streams, const AttentionParams& p,
                           const Mask& mask, std::vector<AttentionTrace>* traces = nullptr, std::size_t layer = 0) {
  if (streams.size() != p.streams.size()) {
    throw ContractError("dif_attention: " + std::to_string(streams.size()) + " streams supplied, parameters hold " +
                        std::to_string(p.streams.size()));
  }
  return attend(r_id, r_id, streams, p, mask, traces, layer);
}

}  // namespace difsr::attention
