#pragma once

// Differentiable operations on Value. Every op validates shapes, computes the
// forward result eagerly and registers a backward rule that accumulates into
// operand gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "difsr/errors.hpp"
#include "difsr/numcore/kernels.hpp"
#include "difsr/numcore/value.hpp"

namespace difsr::numcore {

namespace detail {

inline Node& parent(const Node& self, std::size_t i) { return *self.parents[i]; }

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                       shape_string(b));
}

inline bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

inline std::size_t last_dim(const Value& v, const char* op) {
  if (v.rank() == 0) throw DimensionError(std::string(op) + ": scalar input has no last axis");
  return v.shape().back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Products

/// a[..., k] * b[k, n] -> [..., n], or batched a[B, m, k] * b[B, k, n] -> [B, m, n].
inline Value matmul(const Value& a, const Value& b) {
  if (b.rank() == 2 && a.rank() >= 1 && a.shape().back() == b.dim(0)) {
    const std::size_t k = b.dim(0), n = b.dim(1), rows = a.size() / std::max<std::size_t>(k, 1);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(rows * n, 0.0);
    kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), rows, k, n);
    Value result = Value::from_op("matmul", std::move(out_shape), std::move(out), {a, b});
    result.set_backward([rows, k, n](const Node& self) {
      Node& pa = detail::parent(self, 0);
      Node& pb = detail::parent(self, 1);
      if (pa.requires_grad) kernels::gemm_nt(self.grad.data(), pb.data.data(), pa.grad.data(), rows, n, k);
      if (pb.requires_grad) kernels::gemm_tn(pa.data.data(), self.grad.data(), pb.grad.data(), k, rows, n);
    });
    return result;
  }
  if (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1)) {
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
      kernels::gemm_nn(a.data().data() + s * m * k, b.data().data() + s * k * n,
                       out.data() + s * m * n, m, k, n);
    }
    Value result = Value::from_op("bmm", {batch, m, n}, std::move(out), {a, b});
    result.set_backward([batch, m, k, n](const Node& self) {
      Node& pa = detail::parent(self, 0);
      Node& pb = detail::parent(self, 1);
      for (std::size_t s = 0; s < batch; ++s) {
        const double* g = self.grad.data() + s * m * n;
        if (pa.requires_grad) kernels::gemm_nt(g, pb.data.data() + s * k * n, pa.grad.data() + s * m * k, m, n, k);
        if (pb.requires_grad) kernels::gemm_tn(pa.data.data() + s * m * k, g, pb.grad.data() + s * k * n, k, m, n);
      }
    });
    return result;
  }
  detail::shape_mismatch("matmul", a.shape(), b.shape());
}

/// a[..., k] * b[n, k]^T -> [..., n], or batched a[B, m, k] * b[B, n, k]^T -> [B, m, n].
inline Value matmul_bt(const Value& a, const Value& b) {
  if (b.rank() == 2 && a.rank() >= 1 && a.shape().back() == b.dim(1)) {
    const std::size_t k = b.dim(1), n = b.dim(0), rows = a.size() / std::max<std::size_t>(k, 1);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(rows * n, 0.0);
    kernels::gemm_nt(a.data().data(), b.data().data(), out.data(), rows, k, n);
    Value result = Value::from_op("matmul_bt", std::move(out_shape), std::move(out), {a, b});
    result.set_backward([rows, k, n](const Node& self) {
      Node& pa = detail::parent(self, 0);
      Node& pb = detail::parent(self, 1);
      if (pa.requires_grad) kernels::gemm_nn(self.grad.data(), pb.data.data(), pa.grad.data(), rows, n, k);
      if (pb.requires_grad) kernels::gemm_tn(self.grad.data(), pa.data.data(), pb.grad.data(), n, rows, k);
    });
    return result;
  }
  if (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2)) {
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
      kernels::gemm_nt(a.data().data() + s * m * k, b.data().data() + s * n * k,
                       out.data() + s * m * n, m, k, n);
    }
    Value result = Value::from_op("bmm_bt", {batch, m, n}, std::move(out), {a, b});
    result.set_backward([batch, m, k, n](const Node& self) {
      Node& pa = detail::parent(self, 0);
      Node& pb = detail::parent(self, 1);
      for (std::size_t s = 0; s < batch; ++s) {
        const double* g = self.grad.data() + s * m * n;
        if (pa.requires_grad) kernels::gemm_nn(g, pb.data.data() + s * n * k, pa.grad.data() + s * m * k, m, n, k);
        if (pb.requires_grad) kernels::gemm_tn(g, pa.data.data() + s * m * k, pb.grad.data() + s * n * k, n, m, k);
      }
    });
    return result;
  }
  detail::shape_mismatch("matmul_bt", a.shape(), b.shape());
}

// ---------------------------------------------------------------------------
// Element-wise

/// a + b. `b` may also have a suffix of a's shape and is then broadcast
/// over the leading axes (bias vectors, position tables).
inline Value add(const Value& a, const Value& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) detail::shape_mismatch("add", a.shape(), b.shape());
  const std::size_t total = a.size(), period = std::max<std::size_t>(b.size(), 1);
  std::vector<double> out(total);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < total; ++i) out[i] = ad[i] + bd[i % period];
  Value result = Value::from_op("add", a.shape(), std::move(out), {a, b});
  result.set_backward([total, period](const Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < total; ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < total; ++i) pb.grad[i % period] += self.grad[i];
    }
  });
  return result;
}

inline Value mul(const Value& a, const Value& b) {
  if (a.shape() != b.shape()) detail::shape_mismatch("mul", a.shape(), b.shape());
  const std::size_t total = a.size();
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = a.data()[i] * b.data()[i];
  Value result = Value::from_op("mul", a.shape(), std::move(out), {a, b});
  result.set_backward([total](const Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    for (std::size_t i = 0; i < total; ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
  return result;
}

inline Value scale(const Value& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= factor;
  Value result = Value::from_op("scale", x.shape(), std::move(out), {x});
  result.set_backward([factor](const Node& self) {
    Node& px = detail::parent(self, 0);
    for (std::size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += factor * self.grad[i];
  });
  return result;
}

inline Value sum(const Value& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Value result = Value::from_op("sum", {}, {total}, {x});
  result.set_backward([](const Node& self) {
    Node& px = detail::parent(self, 0);
    for (double& g : px.grad) g += self.grad[0];
  });
  return result;
}

inline Value mean(const Value& x) {
  if (x.size() == 0) throw ContractError("mean of an empty value");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline Value gelu(const Value& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  }
  Value result = Value::from_op("gelu", x.shape(), std::move(out), {x});
  result.set_backward([](const Node& self) {
    Node& px = detail::parent(self, 0);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < px.grad.size(); ++i) {
      const double v = px.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      px.grad[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
  return result;
}

/// Overflow-free logistic function. With clamp_eps > 0 the output is clamped
/// to [eps, 1 - eps]; clamped entries pass no gradient.
inline Value sigmoid(const Value& x, double clamp_eps = 0.0) {
  std::vector<double> out(x.size());
  std::vector<std::uint8_t> clamped(x.size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    double s;
    if (v >= 0.0) {
      s = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      s = e / (1.0 + e);
    }
    if (clamp_eps > 0.0) {
      if (s < clamp_eps) {
        s = clamp_eps;
        clamped[i] = 1;
      } else if (s > 1.0 - clamp_eps) {
        s = 1.0 - clamp_eps;
        clamped[i] = 1;
      }
    }
    out[i] = s;
  }
  Value result = Value::from_op("sigmoid", x.shape(), std::move(out), {x});
  result.set_backward([clamped = std::move(clamped)](const Node& self) {
    Node& px = detail::parent(self, 0);
    for (std::size_t i = 0; i < px.grad.size(); ++i) {
      if (clamped[i]) continue;
      const double s = self.data[i];
      px.grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
  return result;
}

/// Inverted dropout with a caller-owned generator. rate == 0 returns x itself.
template <class Rng>
Value dropout(const Value& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const double factor = 1.0 / (1.0 - rate);
  std::vector<double> multiplier(x.size());
  for (double& m : multiplier) m = keep(rng) ? factor : 0.0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * multiplier[i];
  Value result = Value::from_op("dropout", x.shape(), std::move(out), {x});
  result.set_backward([multiplier = std::move(multiplier)](const Node& self) {
    Node& px = detail::parent(self, 0);
    for (std::size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += self.grad[i] * multiplier[i];
  });
  return result;
}

// ---------------------------------------------------------------------------
// Layout

inline Value reshape(const Value& x, Shape shape) {
  if (element_count(shape) != x.size()) detail::shape_mismatch("reshape", x.shape(), shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  Value result = Value::from_op("reshape", std::move(shape), std::move(out), {x});
  result.set_backward([](const Node& self) {
    Node& px = detail::parent(self, 0);
    for (std::size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += self.grad[i];
  });
  return result;
}

/// Columns [start, start + width) of the last axis.
inline Value slice_last(const Value& x, std::size_t start, std::size_t width) {
  const std::size_t cols = detail::last_dim(x, "slice_last");
  if (start + width > cols) {
    throw DimensionError("slice_last: range [" + std::to_string(start) + ", " +
                         std::to_string(start + width) + ") exceeds " + shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / std::max<std::size_t>(cols, 1);
  Shape out_shape = x.shape();
  out_shape.back() = width;
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data().data() + r * cols + start, width, out.data() + r * width);
  }
  Value result = Value::from_op("slice_last", std::move(out_shape), std::move(out), {x});
  result.set_backward([rows, cols, start, width](const Node& self) {
    Node& px = detail::parent(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < width; ++c) px.grad[r * cols + start + c] += self.grad[r * width + c];
    }
  });
  return result;
}

/// Concatenates along the last axis; all leading extents must agree.
inline Value concat_last(const std::vector<Value>& parts) {
  if (parts.empty()) throw ContractError("concat_last: no inputs");
  Shape lead = parts.front().shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total_width = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    const std::size_t w = detail::last_dim(p, "concat_last");
    l.pop_back();
    if (l != lead) detail::shape_mismatch("concat_last", parts.front().shape(), p.shape());
    widths.push_back(w);
    total_width += w;
  }
  const std::size_t rows = element_count(lead);
  std::vector<double> out(rows * total_width);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(parts[k].data().data() + r * widths[k], widths[k],
                  out.data() + r * total_width + offset);
    }
    offset += widths[k];
  }
  Shape out_shape = lead;
  out_shape.push_back(total_width);
  Value result = Value::from_op("concat_last", std::move(out_shape), std::move(out), parts);
  result.set_backward([rows, total_width, widths](const Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& pk = detail::parent(self, k);
      if (pk.requires_grad) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < widths[k]; ++c) {
            pk.grad[r * widths[k] + c] += self.grad[r * total_width + off + c];
          }
        }
      }
      off += widths[k];
    }
  });
  return result;
}

/// x[B, n, d] -> x[:, position, :] of shape [B, d].
inline Value take_position(const Value& x, std::size_t position) {
  if (x.rank() != 3 || position >= x.dim(1)) {
    throw DimensionError("take_position: position " + std::to_string(position) + " invalid for " +
                         shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  std::vector<double> out(batch * d);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(x.data().data() + (b * n + position) * d, d, out.data() + b * d);
  }
  Value result = Value::from_op("take_position", {batch, d}, std::move(out), {x});
  result.set_backward([batch, n, d, position](const Node& self) {
    Node& px = detail::parent(self, 0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < d; ++c) px.grad[(b * n + position) * d + c] += self.grad[b * d + c];
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Lookups

/// Rows of `table[V, d]` selected by `indices`; output shape is index_shape + [d].
/// Backward scatter-adds, so repeated indices accumulate.
inline Value gather_rows(const Value& table, std::span<const std::int32_t> indices, Shape index_shape) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be 2-D, got " + shape_string(table.shape()));
  if (element_count(index_shape) != indices.size()) {
    throw DimensionError("gather_rows: " + std::to_string(indices.size()) +
                         " indices do not fill index shape " + shape_string(index_shape));
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(indices.size() * d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto idx = indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= vocab) {
      throw IndexError("gather_rows: index " + std::to_string(idx) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(idx) * d, d, out.data() + i * d);
  }
  Shape out_shape = std::move(index_shape);
  out_shape.push_back(d);
  std::vector<std::int32_t> kept(indices.begin(), indices.end());
  Value result = Value::from_op("gather_rows", std::move(out_shape), std::move(out), {table});
  result.set_backward([kept = std::move(kept), d](const Node& self) {
    Node& pt = detail::parent(self, 0);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      double* row = pt.grad.data() + static_cast<std::size_t>(kept[i]) * d;
      for (std::size_t c = 0; c < d; ++c) row[c] += self.grad[i * d + c];
    }
  });
  return result;
}

/// Mean of the table rows in each bag. `index_shape` ends with the bag size;
/// index 0 is padding and is excluded from the mean. An all-padding bag gives
/// a zero row. Output shape is index_shape without its last axis, plus [d].
inline Value bag_mean(const Value& table, std::span<const std::int32_t> indices, Shape index_shape) {
  if (table.rank() != 2) throw DimensionError("bag_mean: table must be 2-D, got " + shape_string(table.shape()));
  if (index_shape.empty() || element_count(index_shape) != indices.size()) {
    throw DimensionError("bag_mean: indices do not fill index shape " + shape_string(index_shape));
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  const std::size_t bag = index_shape.back(), bags = indices.size() / std::max<std::size_t>(bag, 1);
  std::vector<double> weight(bags, 0.0);
  std::vector<double> out(bags * d, 0.0);
  for (std::size_t g = 0; g < bags; ++g) {
    std::size_t count = 0;
    for (std::size_t k = 0; k < bag; ++k) {
      const auto idx = indices[g * bag + k];
      if (idx < 0 || static_cast<std::size_t>(idx) >= vocab) {
        throw IndexError("bag_mean: index " + std::to_string(idx) + " outside table of " +
                         std::to_string(vocab) + " rows");
      }
      if (idx != 0) ++count;
    }
    if (count == 0) continue;
    weight[g] = 1.0 / static_cast<double>(count);
    for (std::size_t k = 0; k < bag; ++k) {
      const auto idx = static_cast<std::size_t>(indices[g * bag + k]);
      if (idx == 0) continue;
      const double* row = table.data().data() + idx * d;
      for (std::size_t c = 0; c < d; ++c) out[g * d + c] += row[c];
    }
    for (std::size_t c = 0; c < d; ++c) out[g * d + c] *= weight[g];
  }
  Shape out_shape = std::move(index_shape);
  out_shape.back() = d;
  std::vector<std::int32_t> kept(indices.begin(), indices.end());
  Value result = Value::from_op("bag_mean", std::move(out_shape), std::move(out), {table});
  result.set_backward([kept = std::move(kept), weight = std::move(weight), bag, d](const Node& self) {
    Node& pt = detail::parent(self, 0);
    for (std::size_t g = 0; g < weight.size(); ++g) {
      if (weight[g] == 0.0) continue;
      for (std::size_t k = 0; k < bag; ++k) {
        const auto idx = static_cast<std::size_t>(kept[g * bag + k]);
        if (idx == 0) continue;
        double* row = pt.grad.data() + idx * d;
        for (std::size_t c = 0; c < d; ++c) row[c] += weight[g] * self.grad[g * d + c];
      }
    }
  });
  return result;
}

/// Overwrites the given columns of the last axis with `fill`; those entries pass no gradient.
inline Value mask_columns(const Value& x, std::vector<std::size_t> columns, double fill) {
  const std::size_t cols = detail::last_dim(x, "mask_columns");
  for (auto c : columns) {
    if (c >= cols) throw IndexError("mask_columns: column " + std::to_string(c) + " out of range");
  }
  const std::size_t rows = x.size() / std::max<std::size_t>(cols, 1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    for (auto c : columns) out[r * cols + c] = fill;
  }
  Value result = Value::from_op("mask_columns", x.shape(), std::move(out), {x});
  result.set_backward([rows, cols, columns = std::move(columns)](const Node& self) {
    Node& px = detail::parent(self, 0);
    std::vector<std::uint8_t> blocked(cols, 0);
    for (auto c : columns) blocked[c] = 1;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        if (!blocked[c]) px.grad[r * cols + c] += self.grad[r * cols + c];
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Normalisation

/// Admissibility pattern for masked_softmax. Its shape must be a suffix of
/// the logits' shape; it is broadcast over the remaining leading axes.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> allowed;  // 1 = entry takes part in the softmax
};

/// Softmax over the last axis restricted to allowed entries. Disallowed
/// entries come out exactly 0. Rows are stabilised by subtracting their max.
inline Value masked_softmax(const Value& logits, const Mask* mask = nullptr) {
  const std::size_t cols = detail::last_dim(logits, "masked_softmax");
  const std::size_t rows = logits.size() / std::max<std::size_t>(cols, 1);
  std::size_t period = 0;
  if (mask) {
    if (mask->allowed.size() != element_count(mask->shape) || !detail::is_suffix(logits.shape(), mask->shape) ||
        mask->shape.empty()) {
      detail::shape_mismatch("masked_softmax", logits.shape(), mask->shape);
    }
    period = mask->allowed.size();
  }
  std::vector<double> out(logits.size(), 0.0);
  const auto x = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    auto allowed = [&](std::size_t c) { return !mask || mask->allowed[(base + c) % period] != 0; };
    double row_max = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!allowed(c)) continue;
      any = true;
      row_max = std::max(row_max, x[base + c]);
    }
    if (!any) throw DegenerateRowError("masked_softmax: row " + std::to_string(r) + " is fully masked");
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!allowed(c)) continue;
      out[base + c] = std::exp(x[base + c] - row_max);
      total += out[base + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[base + c] /= total;
  }
  Value result = Value::from_op("masked_softmax", logits.shape(), std::move(out), {logits});
  result.set_backward([rows, cols](const Node& self) {
    Node& px = detail::parent(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += self.data[base + c] * self.grad[base + c];
      for (std::size_t c = 0; c < cols; ++c) {
        px.grad[base + c] += self.data[base + c] * (self.grad[base + c] - dot);
      }
    }
  });
  return result;
}

inline Value softmax(const Value& logits) { return masked_softmax(logits, nullptr); }

/// Per-row standardisation over the last axis followed by gain * x + bias.
inline Value layer_norm(const Value& x, const Value& gain, const Value& bias, double eps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t d = detail::last_dim(x, "layer_norm");
  if (gain.shape() != Shape{d}) detail::shape_mismatch("layer_norm", x.shape(), gain.shape());
  if (bias.shape() != Shape{d}) detail::shape_mismatch("layer_norm", x.shape(), bias.shape());
  const std::size_t rows = x.size() / std::max<std::size_t>(d, 1);
  std::vector<double> normalized(x.size());
  std::vector<double> inv_std(rows);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double z = (row[c] - mu) * inv_std[r];
      normalized[r * d + c] = z;
      out[r * d + c] = gain.data()[c] * z + bias.data()[c];
    }
  }
  Value result = Value::from_op("layer_norm", x.shape(), std::move(out), {x, gain, bias});
  result.set_backward([rows, d, normalized = std::move(normalized), inv_std = std::move(inv_std)](const Node& self) {
    Node& px = detail::parent(self, 0);
    Node& pg = detail::parent(self, 1);
    Node& pb = detail::parent(self, 2);
    std::vector<double> dz(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * d;
      const double* z = normalized.data() + r * d;
      double mean_dz = 0.0, mean_dz_z = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dz[c] = g[c] * pg.data[c];
        mean_dz += dz[c];
        mean_dz_z += dz[c] * z[c];
        if (pg.requires_grad) pg.grad[c] += g[c] * z[c];
        if (pb.requires_grad) pb.grad[c] += g[c];
      }
      mean_dz /= static_cast<double>(d);
      mean_dz_z /= static_cast<double>(d);
      if (px.requires_grad) {
        for (std::size_t c = 0; c < d; ++c) {
          px.grad[r * d + c] += inv_std[r] * (dz[c] - mean_dz - z[c] * mean_dz_z);
        }
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Combination and losses

/// sum_k coeffs[k] * sources[k] (+ bias[0] when given). All sources share one shape;
/// coeffs has shape [sources.size()], bias shape [1].
inline Value mix(const std::vector<Value>& sources, const Value& coeffs, const Value* bias = nullptr) {
  if (sources.empty()) throw ContractError("mix: empty source list");
  if (coeffs.shape() != Shape{sources.size()}) {
    throw DimensionError("mix: " + std::to_string(sources.size()) + " sources but coefficients " +
                         shape_string(coeffs.shape()));
  }
  if (bias && bias->shape() != Shape{1}) throw DimensionError("mix: bias must have shape [1]");
  const Shape& shape = sources.front().shape();
  for (const auto& s : sources) {
    if (s.shape() != shape) detail::shape_mismatch("mix", shape, s.shape());
  }
  const std::size_t total = element_count(shape);
  std::vector<double> out(total, bias ? bias->data()[0] : 0.0);
  for (std::size_t k = 0; k < sources.size(); ++k) {
    const double c = coeffs.data()[k];
    const auto src = sources[k].data();
    for (std::size_t i = 0; i < total; ++i) out[i] += c * src[i];
  }
  std::vector<Value> operands = sources;
  operands.push_back(coeffs);
  if (bias) operands.push_back(*bias);
  const std::size_t count = sources.size();
  const bool has_bias = bias != nullptr;
  Value result = Value::from_op("mix", shape, std::move(out), std::move(operands));
  result.set_backward([count, total, has_bias](const Node& self) {
    Node& pc = detail::parent(self, count);
    for (std::size_t k = 0; k < count; ++k) {
      Node& pk = detail::parent(self, k);
      const double c = pc.data[k];
      double dc = 0.0;
      for (std::size_t i = 0; i < total; ++i) {
        if (pk.requires_grad) pk.grad[i] += c * self.grad[i];
        dc += self.grad[i] * pk.data[i];
      }
      if (pc.requires_grad) pc.grad[k] += dc;
    }
    if (has_bias) {
      Node& pb = detail::parent(self, count + 1);
      if (pb.requires_grad) {
        for (std::size_t i = 0; i < total; ++i) pb.grad[0] += self.grad[i];
      }
    }
  });
  return result;
}

/// Mean over the batch of -log softmax(logits[b])[targets[b]], via log-sum-exp.
/// Entries equal to -inf act as excluded classes. Target 0 (padding) is rejected.
inline Value cross_entropy(const Value& logits, std::span<const std::int32_t> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<double> probs(batch * classes);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto t = targets[b];
    if (t == 0) throw ContractError("cross_entropy: padding index used as target");
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside " + std::to_string(classes) + " classes");
    }
    const double* row = logits.data().data() + b * classes;
    double row_max = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) row_max = std::max(row_max, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - row_max);
    const double lse = row_max + std::log(z);
    total += lse - row[t];
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - lse);
  }
  std::vector<std::int32_t> kept(targets.begin(), targets.end());
  Value result = Value::from_op("cross_entropy", {}, {total / static_cast<double>(batch)}, {logits});
  result.set_backward([batch, classes, probs = std::move(probs), kept = std::move(kept)](const Node& self) {
    Node& px = detail::parent(self, 0);
    const double g = self.grad[0] / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double onehot = static_cast<std::size_t>(kept[b]) == c ? 1.0 : 0.0;
        px.grad[b * classes + c] += g * (probs[b * classes + c] - onehot);
      }
    }
  });
  return result;
}

/// Mean over the batch of the summed per-class binary cross-entropy. Probabilities
/// are clamped to [eps, 1 - eps]; clamped entries pass no gradient.
inline Value binary_cross_entropy(const Value& probs, std::span<const double> labels, double eps = 1e-7) {
  if (probs.rank() != 2 || probs.size() != labels.size()) {
    throw DimensionError("binary_cross_entropy: probabilities " + shape_string(probs.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = probs.dim(0);
  double total = 0.0;
  std::vector<double> dloss(probs.size(), 0.0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double raw = probs.data()[i];
    const double p = std::clamp(raw, eps, 1.0 - eps);
    const double y = labels[i];
    total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    if (raw >= eps && raw <= 1.0 - eps) dloss[i] = -y / p + (1.0 - y) / (1.0 - p);
  }
  Value result = Value::from_op("binary_cross_entropy", {}, {total / static_cast<double>(batch)}, {probs});
  result.set_backward([batch, dloss = std::move(dloss)](const Node& self) {
    Node& px = detail::parent(self, 0);
    const double g = self.grad[0] / static_cast<double>(batch);
    for (std::size_t i = 0; i < dloss.size(); ++i) px.grad[i] += g * dloss[i];
  });
  return result;
}

}  // namespace difsr::numcore
