#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "difsr/errors.hpp"
#include "difsr/model/model.hpp"

namespace difsr::train {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 term added to the gradient; padding rows exempt
  double grad_clip = 0.0;     // global-norm clip, 0 = off
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

inline AdamState make_adam_state(std::span<const model::ModelParams::Named> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.size(), 0.0);
    s.v.emplace_back(p.value.size(), 0.0);
  }
  return s;
}

/// One bias-corrected Adam update from the gradients held by `params`.
/// A non-finite gradient aborts before anything is modified.
inline void adam_step(std::span<const model::ModelParams::Named> params, AdamState& state, const AdamOptions& opt) {
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  double sq_norm = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].value.grad();
    if (g.size() != state.m[i].size()) throw DimensionError("adam_step: gradient shape differs for " + params[i].name);
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!std::isfinite(g[k])) {
        throw NonFiniteError("non-finite gradient in parameter '" + params[i].name + "' at element " +
                             std::to_string(k));
      }
      sq_norm += g[k] * g[k];
    }
  }
  const double norm = std::sqrt(sq_norm);
  const double clip = (opt.grad_clip > 0.0 && norm > opt.grad_clip) ? opt.grad_clip / norm : 1.0;

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(opt.beta1, t);
  const double correction2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i].value;
    auto theta = value.mutable_data();
    const auto g = value.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const std::size_t row_width = value.rank() == 2 ? value.dim(1) : 0;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      double grad = g[k] * clip;
      const bool padding = params[i].has_padding_row && k < row_width;
      if (opt.weight_decay > 0.0 && !padding) grad += opt.weight_decay * theta[k];
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * grad;
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * grad * grad;
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      theta[k] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
    }
  }
}

}  // namespace difsr::train
