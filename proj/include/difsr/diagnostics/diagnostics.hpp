#pragma once

// Executable checks of the attention rank bottleneck and of gradient
// rigidity under additive early fusion, plus attention-matrix export.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <tuple>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "difsr/attention/attention.hpp"
#include "difsr/dataset/dataset.hpp"
#include "difsr/errors.hpp"
#include "difsr/model/checkpoint.hpp"
#include "difsr/model/config.hpp"
#include "difsr/model/model.hpp"
#include "difsr/numcore/linalg.hpp"
#include "difsr/numcore/ops.hpp"
#include "difsr/numcore/random.hpp"
#include "difsr/train/losses.hpp"

namespace difsr::diagnostics {

using numcore::Value;

// ---------------------------------------------------------------------------
// Rank profile

struct RankProfileOptions {
  std::size_t n = 64;
  std::size_t d = 32;
  std::size_t heads = 2;
  std::vector<std::size_t> attribute_dims = {16};
  std::size_t trials = 100;
  double rel_tol = numcore::kDefaultRankTolerance;
  std::uint64_t seed = 0;
  std::vector<Variant> variants = {Variant::sasrec_f, Variant::nova, Variant::dif};
};

struct RankRow {
  Variant variant = Variant::dif;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t trial = 0;
  std::size_t rank = 0;
  double tol = 0.0;
};

struct RankSummary {
  Variant variant = Variant::dif;
  std::size_t layer = 0;
  std::size_t head = 0;
  double mean_rank = 0.0;
  std::size_t max_rank = 0;
  std::size_t min_rank = 0;
  std::size_t trials = 0;
};

namespace detail {

inline Value random_matrix(std::size_t rows, std::size_t cols, numcore::Rng& rng) {
  return Value::constant({rows, cols}, numcore::standard_normal(rows * cols, rng));
}

}  // namespace detail

/// Per-head pre-softmax logit ranks at random initialisation. Each trial draws
/// fresh Gaussian inputs (E_ID, E_fj) and a fresh attention layer; the early
/// fusion variants see R = E_ID + sum_j E_fj A_j, DIF sees the streams separately
/// and fuses by addition.
inline std::vector<RankRow> rank_profile(const RankProfileOptions& opt) {
  if (opt.trials == 0) throw ContractError("rank_profile: trials must be >= 1");
  std::vector<RankRow> rows;
  for (std::size_t trial = 0; trial < opt.trials; ++trial) {
    numcore::Rng rng(numcore::mix_seed(opt.seed, trial));
    const Value e_id = detail::random_matrix(opt.n, opt.d, rng);
    std::vector<Value> e_attr;
    for (auto dim : opt.attribute_dims) e_attr.push_back(detail::random_matrix(opt.n, dim, rng));
    const auto params = attention::init_attention(opt.d, opt.heads, opt.attribute_dims, Fusion::add, rng);
    Value fused_input = e_id;
    for (std::size_t j = 0; j < e_attr.size(); ++j) {
      const auto to_hidden = attention::weight({opt.attribute_dims[j], opt.d}, rng);
      fused_input = numcore::add(fused_input, numcore::matmul(e_attr[j], to_hidden));
    }
    for (auto variant : opt.variants) {
      for (std::size_t h = 0; h < opt.heads; ++h) {
        Value logits;
        if (variant == Variant::dif) {
          std::vector<Value> side;
          for (std::size_t j = 0; j < e_attr.size(); ++j) side.push_back(attention::attribute_logits(e_attr[j], j, h, params));
          logits = attention::fuse_logits(attention::item_logits(e_id, h, params), side, Fusion::add);
        } else if (variant == Variant::sasrec) {
          logits = attention::item_logits(e_id, h, params);
        } else {
          logits = attention::item_logits(fused_input, h, params);
        }
        rows.push_back({variant, 0, h, trial, numcore::numeric_rank(logits, opt.rel_tol).rank, opt.rel_tol});
      }
    }
  }
  return rows;
}

/// Ranks of the fused logit matrices of a trained model, restricted to each
/// sample's real positions. `trial` is the sample index.
inline std::vector<RankRow> rank_profile_trained(const model::Checkpoint& ck, const data::InteractionDataset& ds,
                                                 std::size_t samples, double rel_tol) {
  auto [schema, slots] = model::Schema::resolve(ds, ck.config.model);
  const auto split = data::split_leave_one_out(ds);
  std::vector<RankRow> rows;
  const std::size_t count = std::min(samples, split.test.size());
  for (std::size_t s = 0; s < count; ++s) {
    const auto batch = data::make_batch(ds, std::span(split.test).subspan(s, 1), ck.config.model.max_len, slots);
    model::ForwardOptions options;
    options.capture_traces = true;
    const auto fwd = model::forward(batch, ck.config.model, ck.params, options);
    const std::size_t n = batch.max_len, len = batch.lengths[0], off = n - len;
    for (const auto& t : fwd.traces) {
      std::vector<double> sub(len * len);
      for (std::size_t r = 0; r < len; ++r) {
        for (std::size_t c = 0; c < len; ++c) sub[r * len + c] = t.fused_logits.data()[(off + r) * n + off + c];
      }
      rows.push_back({ck.config.model.variant, t.layer, t.head, s, numcore::numeric_rank(sub, len, len, rel_tol).rank, rel_tol});
    }
  }
  return rows;
}

inline std::vector<RankSummary> summarize(const std::vector<RankRow>& rows) {
  std::map<std::tuple<int, std::size_t, std::size_t>, RankSummary> groups;
  for (const auto& r : rows) {
    auto& g = groups[{static_cast<int>(r.variant), r.layer, r.head}];
    if (g.trials == 0) {
      g.variant = r.variant;
      g.layer = r.layer;
      g.head = r.head;
      g.min_rank = r.rank;
    }
    g.mean_rank += static_cast<double>(r.rank);
    g.max_rank = std::max(g.max_rank, r.rank);
    g.min_rank = std::min(g.min_rank, r.rank);
    ++g.trials;
  }
  std::vector<RankSummary> out;
  for (auto& [key, g] : groups) {
    g.mean_rank /= static_cast<double>(g.trials);
    out.push_back(g);
  }
  return out;
}

inline std::string rank_csv(const std::vector<RankRow>& rows) {
  std::ostringstream out;
  out << "variant,layer,head,trial,rank,tol\n";
  for (const auto& r : rows) {
    out << to_string(r.variant) << ',' << r.layer << ',' << r.head << ',' << r.trial << ',' << r.rank << ','
        << std::setprecision(6) << r.tol << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Rank witness

struct WitnessResult {
  Value fused;  // n x n, head 0
  std::size_t rank = 0;
  std::size_t expected_rank = 0;
  bool block_identity = false;  // fused == I_{d_h} (+) I_{d_h1} (+) ... (+) 0
};

/// Explicit parameters whose decoupled, additively fused logits reach rank
/// d_h + sum_j d_hj. Head 0's query/key columns select the first d_h input
/// coordinates of R_id = [I_d; 0]; attribute j's columns select its first d_hj
/// coordinates, and E_fj places an identity block at rows starting at
/// d_h + sum_{i<j} d_hi, so every stream fills its own diagonal block.
inline WitnessResult rank_witness(std::size_t n, std::size_t d, std::size_t heads,
                                  const std::vector<std::size_t>& attribute_dims,
                                  double rel_tol = numcore::kDefaultRankTolerance) {
  if (heads == 0 || d % heads != 0) throw ContractError("rank_witness: d must be divisible by heads");
  const std::size_t dh = d / heads;
  std::size_t expected = dh;
  for (auto dim : attribute_dims) {
    if (dim % heads != 0 || dim > d) throw ContractError("rank_witness: invalid attribute width");
    expected += dim / heads;
  }
  if (n < expected || n < d) throw ContractError("rank_witness: n must be at least d and d_h + sum d_hj");

  numcore::Rng rng(0);
  auto params = attention::init_attention(d, heads, attribute_dims, Fusion::add, rng);
  auto selector = [](Value& w, std::size_t width) {
    auto data = w.mutable_data();
    std::fill(data.begin(), data.end(), 0.0);
    const std::size_t cols = w.dim(1);
    for (std::size_t k = 0; k < width; ++k) data[k * cols + k] = 1.0;
  };
  selector(params.w_q, dh);
  selector(params.w_k, dh);
  std::vector<Value> streams;
  std::size_t offset = dh;
  for (std::size_t j = 0; j < attribute_dims.size(); ++j) {
    const std::size_t dim = attribute_dims[j], dhj = dim / heads;
    selector(params.streams[j].w_q, dhj);
    selector(params.streams[j].w_k, dhj);
    std::vector<double> e(n * dim, 0.0);
    for (std::size_t k = 0; k < dhj; ++k) e[(offset + k) * dim + k] = 1.0;
    streams.push_back(Value::constant({n, dim}, std::move(e)));
    offset += dhj;
  }
  std::vector<double> r(n * d, 0.0);
  for (std::size_t k = 0; k < d; ++k) r[k * d + k] = 1.0;
  const Value r_id = Value::constant({n, d}, std::move(r));

  std::vector<Value> side;
  for (std::size_t j = 0; j < streams.size(); ++j) side.push_back(attention::attribute_logits(streams[j], j, 0, params));
  WitnessResult result;
  result.fused = attention::fuse_logits(attention::item_logits(r_id, 0, params), side, Fusion::add);
  result.expected_rank = expected;
  result.rank = numcore::numeric_rank(result.fused, rel_tol).rank;
  result.block_identity = true;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < n; ++c) {
      const double want = (i == c && i < expected) ? 1.0 : 0.0;
      if (result.fused.data()[i * n + c] != want) result.block_identity = false;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient rigidity

struct GradientPair {
  std::string first;
  std::string second;
  bool theorem_pair = false;  // pair the rigidity argument says must match
  bool comparable = true;     // same shape
  bool bitwise_equal = false;
  double max_abs_diff = 0.0;
  std::string first_difference;
};

struct GradientVerdict {
  Variant variant = Variant::dif;
  std::uint64_t seed = 0;
  std::vector<GradientPair> pairs;
  /// All theorem pairs matched (bitwise, or within 1e-15 with `reorder_warning`).
  bool equal = false;
  bool reorder_warning = false;
  /// nova: the item gradient differs from the attribute gradients.
  bool item_differs = false;
};

inline constexpr double kReorderTolerance = 1e-15;

namespace detail {

inline GradientPair compare_grads(const std::string& a_name, const Value& a, const std::string& b_name, const Value& b,
                                  bool theorem_pair) {
  GradientPair p;
  p.first = a_name;
  p.second = b_name;
  p.theorem_pair = theorem_pair;
  if (a.shape() != b.shape()) {
    p.comparable = false;
    p.max_abs_diff = std::numeric_limits<double>::infinity();
    p.first_difference = "shapes differ: " + numcore::shape_string(a.shape()) + " vs " + numcore::shape_string(b.shape());
    return p;
  }
  p.bitwise_equal = true;
  const auto ga = a.grad(), gb = b.grad();
  for (std::size_t i = 0; i < ga.size(); ++i) {
    const double diff = std::abs(ga[i] - gb[i]);
    if (ga[i] != gb[i]) {
      if (p.bitwise_equal) {
        std::ostringstream msg;
        msg << std::setprecision(17) << "element " << i << ": " << ga[i] << " vs " << gb[i];
        p.first_difference = msg.str();
      }
      p.bitwise_equal = false;
    }
    p.max_abs_diff = std::max(p.max_abs_diff, diff);
  }
  return p;
}

/// Small random schema and batch for gradient inspection.
inline std::pair<model::Schema, data::Batch> synthetic_batch(const ModelConfig& config, std::uint64_t seed,
                                                             std::size_t batch_size = 4, std::size_t items = 40,
                                                             std::size_t values = 12, std::size_t width = 2) {
  numcore::Rng rng(numcore::mix_seed(seed, 17));
  model::Schema schema;
  schema.item_vocab = items + 1;
  for (const auto& a : config.attributes) {
    schema.attribute_names.push_back(a.name);
    schema.attribute_vocab.push_back(values + 1);
  }
  const std::size_t n = config.max_len;
  data::Batch batch;
  batch.size = batch_size;
  batch.max_len = n;
  batch.items.assign(batch_size * n, 0);
  batch.lengths.resize(batch_size);
  batch.targets.resize(batch_size);
  batch.users.resize(batch_size);
  std::uniform_int_distribution<std::int32_t> item_dist(1, static_cast<std::int32_t>(items));
  std::uniform_int_distribution<std::int32_t> value_dist(0, static_cast<std::int32_t>(values));
  std::uniform_int_distribution<std::size_t> len_dist(std::max<std::size_t>(1, n / 2), n);
  for (std::size_t j = 0; j < config.attributes.size(); ++j) {
    batch.attribute_widths.push_back(width);
    batch.attributes.emplace_back(batch_size * n * width, 0);
    batch.target_attributes.emplace_back(batch_size * values, 0.0);
  }
  for (std::size_t b = 0; b < batch_size; ++b) {
    batch.users[b] = static_cast<std::uint32_t>(b);
    batch.lengths[b] = len_dist(rng);
    batch.targets[b] = item_dist(rng);
    for (std::size_t t = n - batch.lengths[b]; t < n; ++t) {
      batch.items[b * n + t] = item_dist(rng);
      for (std::size_t j = 0; j < config.attributes.size(); ++j) {
        for (std::size_t k = 0; k < width; ++k) batch.attributes[j][(b * n + t) * width + k] = value_dist(rng);
      }
    }
    for (std::size_t j = 0; j < config.attributes.size(); ++j) {
      batch.target_attributes[j][b * values + static_cast<std::size_t>(value_dist(rng) % values)] = 1.0;
    }
  }
  return {schema, batch};
}

}  // namespace detail

/// One forward/backward on a random batch, then compares the gradients that
/// reach the item and attribute embeddings where the streams meet.
///   sasrec_f: E_ID vs each projected E_fj at the input sum (must match).
///   nova:     projected E_fj vs E_fk (must match); E_ID vs E_fj reported.
///   dif:      E_fj vs E_fk (expected to differ); E_ID vs E_fj when widths agree.
inline GradientVerdict gradient_rigidity_check(Variant variant, ModelConfig config, std::uint64_t seed) {
  if (variant == Variant::sasrec) throw ContractError("gradient_rigidity_check: sasrec has no side information");
  if (config.fusion != Fusion::add) throw ContractError("gradient_rigidity_check: requires addition fusion");
  config.variant = variant;
  config.dropout = 0.0;
  config.validate();
  auto [schema, batch] = detail::synthetic_batch(config, seed);
  numcore::Rng rng(numcore::mix_seed(seed, 5));
  auto params = model::init_params(config, schema, rng);
  auto parts = train::compute_loss(batch, config, params);
  numcore::backward(parts.total);
  const auto& probes = parts.forward.probes;

  GradientVerdict v;
  v.variant = variant;
  v.seed = seed;
  auto attr_name = [&](std::size_t j) { return "attribute:" + config.attributes[j].name; };
  if (variant == Variant::sasrec_f) {
    for (std::size_t j = 0; j < probes.fusion_summands.size(); ++j) {
      v.pairs.push_back(detail::compare_grads("item", probes.item_embedding, attr_name(j), probes.fusion_summands[j], true));
    }
  } else if (variant == Variant::nova) {
    const auto& s = probes.fusion_summands;
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (std::size_t j = i + 1; j < s.size(); ++j) {
        v.pairs.push_back(detail::compare_grads(attr_name(i), s[i], attr_name(j), s[j], true));
      }
    }
    for (std::size_t j = 0; j < s.size(); ++j) {
      auto p = detail::compare_grads("item", probes.item_embedding, attr_name(j), s[j], false);
      if (!p.bitwise_equal) v.item_differs = true;
      v.pairs.push_back(std::move(p));
    }
  } else {
    const auto& e = probes.attribute_embeddings;
    for (std::size_t i = 0; i < e.size(); ++i) {
      for (std::size_t j = i + 1; j < e.size(); ++j) {
        v.pairs.push_back(detail::compare_grads(attr_name(i), e[i], attr_name(j), e[j], true));
      }
    }
    for (std::size_t j = 0; j < e.size(); ++j) {
      if (e[j].shape() == probes.item_embedding.shape()) {
        v.pairs.push_back(detail::compare_grads("item", probes.item_embedding, attr_name(j), e[j], false));
      }
    }
  }
  bool any = false;
  v.equal = true;
  for (const auto& p : v.pairs) {
    if (!p.theorem_pair) continue;
    any = true;
    if (p.bitwise_equal) continue;
    if (p.comparable && p.max_abs_diff <= kReorderTolerance) {
      v.reorder_warning = true;
    } else {
      v.equal = false;
    }
  }
  v.equal = v.equal && any;
  return v;
}

inline nlohmann::json to_json(const GradientVerdict& v) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : v.pairs) {
    nlohmann::json j = {{"first", p.first},
                        {"second", p.second},
                        {"theorem_pair", p.theorem_pair},
                        {"bitwise_equal", p.bitwise_equal}};
    j["max_abs_diff"] = p.comparable ? nlohmann::json(p.max_abs_diff) : nlohmann::json(nullptr);
    if (!p.first_difference.empty()) j["first_difference"] = p.first_difference;
    pairs.push_back(std::move(j));
  }
  return {{"format_version", 1}, {"variant", to_string(v.variant)}, {"seed", v.seed},          {"equal", v.equal},
          {"reorder_warning", v.reorder_warning}, {"item_differs", v.item_differs}, {"pairs", pairs}};
}

// ---------------------------------------------------------------------------
// Attention export

/// Writes one JSON line per (layer, head, source) for the user's test sequence:
/// item logits, each side stream's logits, the fused logits and the softmax weights.
inline std::size_t export_attention(const model::Checkpoint& ck, const data::InteractionDataset& ds,
                                    const std::string& user_id, const std::filesystem::path& out_path) {
  const auto user = ds.find_user(user_id);
  if (!user) throw LookupError("unknown user '" + user_id + "'");
  const auto split = data::split_leave_one_out(ds);
  auto it = std::find_if(split.test.begin(), split.test.end(),
                         [&](const data::SampleRef& s) { return s.user == *user; });
  if (it == split.test.end()) throw LookupError("user '" + user_id + "' has no test sample");
  auto [schema, slots] = model::Schema::resolve(ds, ck.config.model);
  const auto batch = data::make_batch(ds, std::span(&*it, 1), ck.config.model.max_len, slots);
  model::ForwardOptions options;
  options.capture_traces = true;
  const auto fwd = model::forward(batch, ck.config.model, ck.params, options);

  std::vector<std::string> stream_names;
  if (ck.config.model.variant == Variant::dif) {
    stream_names.push_back("position");
    for (const auto& a : ck.config.model.attributes) stream_names.push_back(a.name);
  }
  if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + out_path.string());
  const std::size_t n = batch.max_len;
  std::size_t lines = 0;
  auto emit = [&](const attention::AttentionTrace& t, const std::string& source, const Value& m) {
    const auto data = m.data().subspan(0, n * n);
    nlohmann::json j = {{"format_version", 1},
                        {"user", user_id},
                        {"variant", to_string(ck.config.model.variant)},
                        {"layer", t.layer},
                        {"head", t.head},
                        {"source", source},
                        {"n", n},
                        {"length", batch.lengths[0]},
                        {"data", std::vector<double>(data.begin(), data.end())}};
    out << j.dump() << '\n';
    ++lines;
  };
  for (const auto& t : fwd.traces) {
    emit(t, "item", t.item_logits);
    for (std::size_t s = 0; s < t.stream_logits.size(); ++s) emit(t, stream_names.at(s), t.stream_logits[s]);
    emit(t, "fused", t.fused_logits);
    emit(t, "softmax", t.weights);
  }
  return lines;
}

}  // namespace difsr::diagnostics
