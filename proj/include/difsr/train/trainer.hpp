#pragma once

// Training loop: prefix samples from the leave-one-out split, Adam, one
// validation pass per epoch, best checkpoint by validation Recall@10
// (ties: NDCG@10, then the earlier epoch).

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "difsr/dataset/dataset.hpp"
#include "difsr/errors.hpp"
#include "difsr/evaluation/evaluate.hpp"
#include "difsr/model/config.hpp"
#include "difsr/model/model.hpp"
#include "difsr/numcore/random.hpp"
#include "difsr/train/adam.hpp"
#include "difsr/train/losses.hpp"

namespace difsr::train {

namespace seed_stream {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t dropout = 2;
inline constexpr std::uint64_t shuffle = 3;
}  // namespace seed_stream

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double l_id = 0.0;
  std::vector<double> l_f;
  double l_total = 0.0;
  double lr = 0.0;
};

inline nlohmann::json to_json(const LossRecord& r) {
  return {{"step", r.step}, {"epoch", r.epoch}, {"L_id", r.l_id}, {"L_f", r.l_f}, {"L_total", r.l_total}, {"lr", r.lr}};
}

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  AdamState adam;
  numcore::Rng rng;  // dropout masks
  std::optional<std::size_t> best_epoch;
  std::vector<LossRecord> history;
};

inline AdamOptions adam_options(const TrainConfig& c) {
  AdamOptions o;
  o.lr = c.lr;
  o.weight_decay = c.weight_decay;
  o.grad_clip = c.grad_clip;
  return o;
}

inline model::ModelParams initial_params(const RunConfig& config, const model::Schema& schema) {
  numcore::Rng rng(numcore::mix_seed(config.train.seed, seed_stream::init));
  return model::init_params(config.model, schema, rng);
}

inline TrainState initial_state(const RunConfig& config, const model::ModelParams& params) {
  TrainState s;
  const auto named = params.named();
  s.adam = make_adam_state(named);
  s.rng.seed(numcore::mix_seed(config.train.seed, seed_stream::dropout));
  return s;
}

/// Forward, backward and one Adam update on `batch`.
inline LossRecord train_step(const data::Batch& batch, const RunConfig& config, model::ModelParams& params,
                             TrainState& state) {
  params.zero_grad();
  auto parts = compute_loss(batch, config.model, params, &state.rng);
  if (!std::isfinite(parts.total.item())) {
    throw NonFiniteError("non-finite loss at step " + std::to_string(state.step));
  }
  numcore::backward(parts.total);
  const auto named = params.named();
  adam_step(named, state.adam, adam_options(config.train));
  LossRecord record;
  record.step = state.step++;
  record.epoch = state.epoch;
  record.l_id = parts.item.item();
  for (const auto& a : parts.attributes) record.l_f.push_back(a.item());
  record.l_total = parts.total.item();
  record.lr = config.train.lr;
  state.history.push_back(record);
  return record;
}

struct FitHooks {
  std::function<void(const LossRecord&)> on_step;
  std::function<void(std::size_t epoch, const eval::EvalReport&)> on_epoch;
};

struct FitResult {
  model::Schema schema;
  std::vector<std::size_t> attribute_slots;
  model::ModelParams best;
  model::ModelParams last;
  TrainState state;
  std::vector<eval::EvalReport> epoch_reports;
};

inline eval::EvalOptions eval_options(const TrainConfig& c) {
  eval::EvalOptions o;
  o.ks = c.eval_ks;
  o.exclude_seen = c.exclude_seen;
  o.batch_size = c.batch_size;
  return o;
}

namespace detail {

/// True when `candidate` beats `incumbent` on Recall@10, then NDCG@10.
inline bool better(const eval::EvalReport& candidate, const eval::EvalReport& incumbent, std::size_t k) {
  const double rc = candidate.recall.at(k), ri = incumbent.recall.at(k);
  if (rc != ri) return rc > ri;
  return candidate.ndcg.at(k) > incumbent.ndcg.at(k);
}

}  // namespace detail

inline FitResult fit(const data::InteractionDataset& ds, const RunConfig& config, const FitHooks& hooks = {}) {
  config.validate();
  FitResult result;
  std::tie(result.schema, result.attribute_slots) = model::Schema::resolve(ds, config.model);
  model::ModelParams params = initial_params(config, result.schema);
  result.state = initial_state(config, params);
  result.best = params.clone();

  const auto split = data::split_leave_one_out(ds);
  const auto options = eval_options(config.train);
  const std::size_t select_k = std::find(options.ks.begin(), options.ks.end(), 10) != options.ks.end()
                                   ? std::size_t{10}
                                   : options.ks.front();
  std::optional<eval::EvalReport> best_report;
  for (std::size_t epoch = 0; epoch < config.train.epochs; ++epoch) {
    result.state.epoch = epoch;
    data::BatchStream stream(ds, split.train, config.model.max_len, config.train.batch_size, result.attribute_slots,
                             true, numcore::mix_seed(config.train.seed, seed_stream::shuffle), epoch);
    while (auto batch = stream.next()) {
      const auto record = train_step(*batch, config, params, result.state);
      if (hooks.on_step) hooks.on_step(record);
    }
    if (split.valid.empty()) {
      result.best = params.clone();
      continue;
    }
    auto report = eval::evaluate(params, config.model, ds, split.valid, result.attribute_slots, options);
    if (hooks.on_epoch) hooks.on_epoch(epoch, report);
    if (!best_report || detail::better(report, *best_report, select_k)) {
      best_report = report;
      result.best = params.clone();
      result.state.best_epoch = epoch;
    }
    result.epoch_reports.push_back(std::move(report));
  }
  params.zero_grad();
  result.last = std::move(params);
  return result;
}

}  // namespace difsr::train
