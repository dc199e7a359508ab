#pragma once

#include <span>
#include <vector>

#include "difsr/dataset/dataset.hpp"
#include "difsr/errors.hpp"
#include "difsr/model/config.hpp"
#include "difsr/model/model.hpp"
#include "difsr/numcore/ops.hpp"

namespace difsr::train {

using numcore::Value;

/// Cross-entropy of the next item, averaged over the batch.
inline Value item_loss(const Value& logits, std::span<const std::int32_t> targets) {
  return numcore::cross_entropy(logits, targets);
}

/// Multi-label binary cross-entropy summed over classes, averaged over the batch.
inline Value attribute_loss(const Value& probs, std::span<const double> multi_hot) {
  return numcore::binary_cross_entropy(probs, multi_hot, model::kProbabilityEps);
}

/// L = L_id + lambda * sum_j L_fj
inline Value total_loss(const Value& item, const std::vector<Value>& attributes, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("total_loss: lambda must be non-negative");
  if (attributes.empty()) return item;
  Value side = attributes.front();
  for (std::size_t j = 1; j < attributes.size(); ++j) side = numcore::add(side, attributes[j]);
  return numcore::add(item, numcore::scale(side, lambda));
}

struct LossParts {
  Value total;
  Value item;
  std::vector<Value> attributes;
  model::ForwardResult forward;
};

/// Forward pass plus every loss term for one batch.
inline LossParts compute_loss(const data::Batch& batch, const ModelConfig& config, const model::ModelParams& params,
                              numcore::Rng* dropout_rng = nullptr) {
  LossParts parts;
  model::ForwardOptions options;
  options.dropout_rng = dropout_rng;
  parts.forward = model::forward(batch, config, params, options);
  parts.item = item_loss(model::predict_items(parts.forward.output, batch.lengths, params), batch.targets);
  if (config.aap && !config.attributes.empty()) {
    const auto probs = model::predict_attributes(parts.forward.output, batch.lengths, config, params);
    for (std::size_t j = 0; j < probs.size(); ++j) {
      parts.attributes.push_back(attribute_loss(probs[j], batch.target_attributes.at(j)));
    }
  }
  parts.total = total_loss(parts.item, parts.attributes, config.lambda);
  return parts;
}

}  // namespace difsr::train
