#pragma once

// Full-ranking Recall@K / NDCG@K under leave-one-out.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "difsr/dataset/dataset.hpp"
#include "difsr/errors.hpp"
#include "difsr/model/config.hpp"
#include "difsr/model/model.hpp"

namespace difsr::eval {

/// 1-based rank of `target` among all non-padding items not in `seen`.
/// Ties go to the smaller item index.
inline std::size_t rank_of_target(std::span<const double> scores, std::int32_t target,
                                  const std::unordered_set<std::int32_t>& seen = {}) {
  if (target == data::kPadding) throw ContractError("rank_of_target: target is the padding index");
  if (target < 0 || static_cast<std::size_t>(target) >= scores.size()) {
    throw IndexError("rank_of_target: target " + std::to_string(target) + " outside " + std::to_string(scores.size()) +
                     " scores");
  }
  if (seen.contains(target)) throw ContractError("rank_of_target: target is among the excluded items");
  const double target_score = scores[static_cast<std::size_t>(target)];
  std::size_t rank = 1;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const auto item = static_cast<std::int32_t>(i);
    if (item == target || seen.contains(item)) continue;
    if (scores[i] > target_score || (scores[i] == target_score && item < target)) ++rank;
  }
  return rank;
}

inline double recall_at_k(std::size_t rank, std::size_t k) { return rank <= k ? 1.0 : 0.0; }

/// Single-relevant-item NDCG: 1 / log2(rank + 1) inside the cutoff.
inline double ndcg_at_k(std::size_t rank, std::size_t k) {
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

struct EvalReport {
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> ndcg;
  std::size_t users = 0;
  std::string variant;
  double wall_clock_s = 0.0;
};

/// `{"recall@10": .., "ndcg@10": .., "users": .., "variant": ..}`; the timing field is optional
/// so that reports of identical runs compare byte for byte.
inline nlohmann::json to_json(const EvalReport& r, bool include_timing = false) {
  nlohmann::json j = nlohmann::json::object();
  j["format_version"] = 1;
  for (const auto& [k, v] : r.recall) j["recall@" + std::to_string(k)] = v;
  for (const auto& [k, v] : r.ndcg) j["ndcg@" + std::to_string(k)] = v;
  j["users"] = r.users;
  j["variant"] = r.variant;
  if (include_timing) j["wall_clock_s"] = r.wall_clock_s;
  return j;
}

/// Accumulates per-sample ranks in sample order.
inline EvalReport summarize(std::span<const std::size_t> ranks, std::span<const std::size_t> ks, std::string variant) {
  EvalReport report;
  report.users = ranks.size();
  report.variant = std::move(variant);
  for (auto k : ks) {
    double recall = 0.0, ndcg = 0.0;
    for (auto rank : ranks) {
      recall += recall_at_k(rank, k);
      ndcg += ndcg_at_k(rank, k);
    }
    const double n = ranks.empty() ? 1.0 : static_cast<double>(ranks.size());
    report.recall[k] = recall / n;
    report.ndcg[k] = ndcg / n;
  }
  return report;
}

struct EvalOptions {
  std::vector<std::size_t> ks = {10, 20};
  bool exclude_seen = true;
  std::size_t batch_size = 256;
};

/// Scores every sample of the view (no dropout) and returns 1-based target ranks.
inline std::vector<std::size_t> rank_view(const model::ModelParams& params, const ModelConfig& config,
                                          const data::InteractionDataset& ds, std::span<const data::SampleRef> view,
                                          std::span<const std::size_t> attribute_slots, const EvalOptions& options) {
  std::vector<std::size_t> ranks;
  ranks.reserve(view.size());
  for (std::size_t start = 0; start < view.size(); start += options.batch_size) {
    const auto chunk = view.subspan(start, std::min(options.batch_size, view.size() - start));
    const auto batch = data::make_batch(ds, chunk, config.max_len, attribute_slots);
    const auto fwd = model::forward(batch, config, params);
    const auto scores = model::predict_items(fwd.output, batch.lengths, params);
    const std::size_t classes = scores.dim(1);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::unordered_set<std::int32_t> seen;
      if (options.exclude_seen) {
        const auto& seq = ds.sequences[chunk[b].user];
        seen.insert(seq.begin(), seq.begin() + chunk[b].end);
        seen.erase(batch.targets[b]);
      }
      ranks.push_back(rank_of_target(scores.data().subspan(b * classes, classes), batch.targets[b], seen));
    }
  }
  return ranks;
}

inline EvalReport evaluate(const model::ModelParams& params, const ModelConfig& config,
                           const data::InteractionDataset& ds, std::span<const data::SampleRef> view,
                           std::span<const std::size_t> attribute_slots, const EvalOptions& options = {}) {
  if (view.empty()) throw ContractError("evaluate: empty view");
  const auto started = std::chrono::steady_clock::now();
  const auto ranks = rank_view(params, config, ds, view, attribute_slots, options);
  auto report = summarize(ranks, options.ks, to_string(config.variant));
  report.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

/// Fraction of samples whose highest-scoring item is the target (no exclusions).
inline double next_item_accuracy(const model::ModelParams& params, const ModelConfig& config,
                                 const data::InteractionDataset& ds, std::span<const data::SampleRef> view,
                                 std::span<const std::size_t> attribute_slots, std::size_t batch_size = 256) {
  if (view.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < view.size(); start += batch_size) {
    const auto chunk = view.subspan(start, std::min(batch_size, view.size() - start));
    const auto batch = data::make_batch(ds, chunk, config.max_len, attribute_slots);
    const auto scores = model::predict_items(model::forward(batch, config, params).output, batch.lengths, params);
    const std::size_t classes = scores.dim(1);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto row = scores.data().subspan(b * classes, classes);
      const auto best = std::max_element(row.begin() + 1, row.end()) - row.begin();
      if (best == batch.targets[b]) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(view.size());
}

}  // namespace difsr::eval
