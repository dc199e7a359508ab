#pragma once

// Independent reference computations used as test oracles.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "difsr/dataset/dataset.hpp"
#include "difsr/numcore/value.hpp"

namespace oracle {

using difsr::numcore::Value;

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
  return c;
}

inline std::vector<double> transpose(const std::vector<double>& a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(a.size());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  }
  return t;
}

inline std::vector<double> softmax_row(const std::vector<double>& x) {
  std::vector<double> e(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += (e[i] = std::exp(x[i]));
  for (auto& v : e) v /= total;
  return e;
}

/// Rank by sorting all candidates: score descending, item index ascending.
inline std::size_t sorted_rank(const std::vector<double>& scores, std::int32_t target,
                               const std::unordered_set<std::int32_t>& seen) {
  std::vector<std::pair<double, std::int32_t>> candidates;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const auto item = static_cast<std::int32_t>(i);
    if (item != target && seen.contains(item)) continue;
    candidates.emplace_back(scores[i], item);
  }
  std::sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i].second == target) return i + 1;
  }
  return 0;
}

/// Removes one under-threshold user or item at a time until none remain.
inline std::vector<difsr::data::RawInteraction> kcore_one_at_a_time(std::vector<difsr::data::RawInteraction> rows,
                                                                    std::size_t k) {
  while (true) {
    std::map<std::string, std::size_t> users, items;
    for (const auto& r : rows) {
      ++users[r.user];
      ++items[r.item];
    }
    std::string victim;
    bool is_user = false;
    for (const auto& [u, c] : users) {
      if (c < k) {
        victim = u;
        is_user = true;
        break;
      }
    }
    if (victim.empty()) {
      for (const auto& [i, c] : items) {
        if (c < k) {
          victim = i;
          break;
        }
      }
    }
    if (victim.empty()) return rows;
    std::erase_if(rows, [&](const auto& r) { return is_user ? r.user == victim : r.item == victim; });
  }
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

inline constexpr double kFiniteDifferenceStep = 1e-3;
inline constexpr double kGradientTolerance = 1e-4;
/// Denominator floor for the relative error of near-zero gradients.
inline constexpr double kRelativeFloor = 1e-6;

/// Richardson-extrapolated central differences (steps h and h/2, error
/// O(h^4)) against reverse-mode gradients. `loss` must rebuild the graph from
/// the current parameter data on every call.
inline GradCheck finite_difference(const std::function<Value()>& loss, std::vector<std::pair<std::string, Value>> params,
                                   double h = kFiniteDifferenceStep, std::size_t max_per_param = 0) {
  for (auto& [name, p] : params) p.zero_grad();
  Value root = loss();
  difsr::numcore::backward(root);
  std::vector<std::vector<double>> analytic;
  for (auto& [name, p] : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
  GradCheck result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, p] = params[k];
    auto data = p.mutable_data();
    const std::size_t count = max_per_param == 0 ? data.size() : std::min(max_per_param, data.size());
    const std::size_t stride = std::max<std::size_t>(1, data.size() / std::max<std::size_t>(1, count));
    for (std::size_t i = 0; i < data.size(); i += stride) {
      const double saved = data[i];
      auto central = [&](double step) {
        data[i] = saved + step;
        const double up = loss().item();
        data[i] = saved - step;
        const double down = loss().item();
        data[i] = saved;
        return (up - down) / (2.0 * step);
      };
      const double numeric = (4.0 * central(h / 2.0) - central(h)) / 3.0;
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kRelativeFloor});
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  return result;
}

}  // namespace oracle
