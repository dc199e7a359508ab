#include <gtest/gtest.h>

#include <cmath>

#include "difsr/attention/attention.hpp"
#include "difsr/numcore/random.hpp"
#include "support/oracles.hpp"

namespace att = difsr::attention;
namespace nc = difsr::numcore;
using difsr::Fusion;
using nc::Value;

namespace {

std::vector<double> gaussian(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  nc::Rng rng(seed);
  auto v = nc::standard_normal(n, rng);
  for (auto& x : v) x *= scale;
  return v;
}

std::vector<double> values(const Value& v) { return {v.data().begin(), v.data().end()}; }

att::AttentionParams params(std::size_t d, std::size_t heads, std::vector<std::size_t> streams,
                            Fusion fusion = Fusion::add, std::uint64_t seed = 1) {
  nc::Rng rng(seed);
  auto p = att::init_attention(d, heads, streams, fusion, rng);
  // Larger weights than the 0.02 init so the softmax is far from uniform.
  auto scale_up = [](Value& w) {
    for (auto& x : w.mutable_data()) x *= 25.0;
  };
  scale_up(p.w_q);
  scale_up(p.w_k);
  scale_up(p.w_v);
  scale_up(p.w_o);
  for (auto& s : p.streams) {
    scale_up(s.w_q);
    scale_up(s.w_k);
  }
  return p;
}

std::vector<double> columns(const std::vector<double>& w, std::size_t rows, std::size_t cols, std::size_t start,
                            std::size_t width) {
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] = w[r * cols + start + c];
  }
  return out;
}

/// (x Wq_h)(x Wk_h)^T with plain loops.
std::vector<double> logits_oracle(const std::vector<double>& x, std::size_t n, std::size_t width,
                                  const Value& w_q, const Value& w_k, std::size_t head, std::size_t heads) {
  const std::size_t dh = width / heads;
  const auto q = oracle::matmul(x, columns(values(w_q), width, width, head * dh, dh), n, width, dh);
  const auto k = oracle::matmul(x, columns(values(w_k), width, width, head * dh, dh), n, width, dh);
  return oracle::matmul(q, oracle::transpose(k, n, dh), n, dh, n);
}

/// Unbatched causal attention composed from loop oracles.
std::vector<double> attention_oracle(const std::vector<double>& query_src, const std::vector<double>& value_src,
                                     const std::vector<std::vector<double>>& streams, std::size_t n,
                                     const att::AttentionParams& p) {
  const std::size_t d = p.hidden(), dh = p.head_width();
  const auto v = oracle::matmul(value_src, values(p.w_v), n, d, d);
  std::vector<double> joined(n * d, 0.0);
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto fused = logits_oracle(query_src, n, d, p.w_q, p.w_k, h, p.heads);
    for (std::size_t s = 0; s < streams.size(); ++s) {
      const auto side = logits_oracle(streams[s], n, p.streams[s].w_q.dim(0), p.streams[s].w_q, p.streams[s].w_k, h,
                                      p.heads);
      for (std::size_t i = 0; i < fused.size(); ++i) fused[i] += side[i];
    }
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<double> row;
      for (std::size_t s = 0; s <= t; ++s) row.push_back(fused[t * n + s] / std::sqrt(static_cast<double>(d)));
      const auto w = oracle::softmax_row(row);
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t s = 0; s <= t; ++s) acc += w[s] * v[s * d + h * dh + c];
        joined[t * d + h * dh + c] = acc;
      }
    }
  }
  auto out = oracle::matmul(joined, values(p.w_o), n, d, d);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < d; ++c) out[t * d + c] += p.b_o.data()[c];
  }
  return out;
}

void expect_near(const std::vector<double>& got, const std::vector<double>& want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "element " << i;
}

}  // namespace

TEST(ItemLogits, ZeroInputGivesZeroMatrix) {
  const auto p = params(4, 2, {});
  const auto y = att::item_logits(Value::constant({3, 4}), 1, p);
  ASSERT_EQ(y.shape(), (nc::Shape{3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(ItemLogits, HandComputedTwoByTwo) {
  auto p = params(2, 1, {});
  p.w_q = Value::parameter({2, 2}, {1, 0, 0, 2});
  p.w_k = Value::parameter({2, 2}, {0, 1, 1, 0});
  // Q = R Wq = [[1,4],[3,0]], K = R Wk = [[2,1],[0,3]] for R = [[1,2],[3,0]]
  const auto y = att::item_logits(Value::constant({2, 2}, {1, 2, 3, 0}), 0, p);
  EXPECT_EQ(values(y), (std::vector<double>{6, 12, 6, 0}));
}

TEST(ItemLogits, ShapeIsAlwaysSquareAndMismatchIsRejected) {
  const auto p = params(6, 3, {});
  EXPECT_EQ(att::item_logits(Value::constant({2, 5, 6}), 2, p).shape(), (nc::Shape{2, 5, 5}));
  EXPECT_THROW(att::item_logits(Value::constant({5, 4}), 0, p), difsr::DimensionError);
}

TEST(AttributeLogits, ZeroInputGivesZeroMatrix) {
  const auto p = params(8, 2, {4});
  const auto y = att::attribute_logits(Value::constant({3, 4}), 0, 1, p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(AttributeLogits, SharedWeightsReduceToItemLogits) {
  auto p = params(4, 2, {4});
  p.streams[0] = {p.w_q, p.w_k};
  const auto x = Value::constant({5, 4}, gaussian(20, 2));
  for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(values(att::attribute_logits(x, 0, h, p)), values(att::item_logits(x, h, p)));
}

TEST(AttributeLogits, MatchesLoopOracle) {
  const auto p = params(8, 2, {4, 6});
  const auto e = gaussian(5 * 6, 3);
  for (std::size_t h = 0; h < 2; ++h) {
    const auto y = att::attribute_logits(Value::constant({5, 6}, e), 1, h, p);
    expect_near(values(y), logits_oracle(e, 5, 6, p.streams[1].w_q, p.streams[1].w_k, h, 2), 1e-12);
  }
}

TEST(FuseLogits, AddWithZeroAttributesLeavesItemUnchanged) {
  const auto item = Value::constant({3, 3}, gaussian(9, 4));
  const auto y = att::fuse_logits(item, {Value::constant({3, 3}), Value::constant({3, 3})}, Fusion::add);
  EXPECT_EQ(values(y), values(item));
}

TEST(FuseLogits, EqualGatesAverageTheSources) {
  const auto a = Value::constant({2, 2}, {1, 2, 3, 4}), b = Value::constant({2, 2}, {5, 6, 7, 8}),
             c = Value::constant({2, 2}, {0, -3, 9, 1});
  att::FusionHead head{Value::parameter({3}, {0.7, 0.7, 0.7}), Value()};
  const auto y = att::fuse_logits(a, {b, c}, Fusion::gate, &head);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], (a.data()[i] + b.data()[i] + c.data()[i]) / 3.0, 1e-14);
}

TEST(FuseLogits, ConcatInitialisationEmulatesAddition) {
  const auto p = params(4, 2, {2, 2}, Fusion::concat);
  const auto a = Value::constant({3, 3}, gaussian(9, 5)), b = Value::constant({3, 3}, gaussian(9, 6)),
             c = Value::constant({3, 3}, gaussian(9, 7));
  const auto concat = att::fuse_logits(a, {b, c}, Fusion::concat, &p.fusion_heads[0]);
  const auto added = att::fuse_logits(a, {b, c}, Fusion::add);
  expect_near(values(concat), values(added), 1e-15);
  EXPECT_EQ(p.fusion_heads[0].coeffs.size(), 3u);  // p + 2 coefficients with the bias
  EXPECT_EQ(p.fusion_heads[0].bias.size(), 1u);
}

TEST(FuseLogits, EmptySourceListIsAContractError) {
  EXPECT_THROW(att::fuse_logits(Value(), {}, Fusion::add), difsr::ContractError);
  EXPECT_THROW(att::fuse_logits(Value::constant({2, 2}), {Value::constant({3, 3})}, Fusion::add),
               difsr::DimensionError);
}

TEST(DifAttention, ZeroAttributesReduceToCausalSelfAttention) {
  const auto p = params(8, 2, {4, 4});
  const auto r = Value::constant({2, 6, 8}, gaussian(96, 8));
  const std::vector<std::size_t> lengths = {6, 4};
  const auto mask = att::causal_mask(lengths, 6);
  const auto dif = att::dif_attention(r, {Value::constant({2, 6, 4}), Value::constant({2, 6, 4})}, p, mask);
  att::AttentionParams plain = p;
  plain.streams.clear();
  EXPECT_EQ(values(dif), values(att::sas_attention(r, plain, mask)));
}

TEST(DifAttention, SinglePositionOutputIgnoresLogits) {
  const auto p = params(4, 2, {2});
  const auto r = gaussian(4, 9);
  const auto y = att::dif_attention(Value::constant({1, 4}, r), {Value::constant({1, 2}, gaussian(2, 10))}, p,
                                    att::causal_mask(1));
  auto want = oracle::matmul(oracle::matmul(r, values(p.w_v), 1, 4, 4), values(p.w_o), 1, 4, 4);
  expect_near(values(y), want, 1e-12);
}

TEST(DifAttention, MatchesCompositionOracle) {
  const auto p = params(8, 2, {4, 6}, Fusion::add, 11);
  const std::size_t n = 5;
  const auto r = gaussian(n * 8, 12), e1 = gaussian(n * 4, 13), e2 = gaussian(n * 6, 14);
  std::vector<att::AttentionTrace> traces;
  const auto y = att::dif_attention(Value::constant({n, 8}, r),
                                    {Value::constant({n, 4}, e1), Value::constant({n, 6}, e2)}, p,
                                    att::causal_mask(n), &traces, 3);
  expect_near(values(y), attention_oracle(r, r, {e1, e2}, n, p), 1e-10);
  ASSERT_EQ(traces.size(), 2u);
  EXPECT_EQ(traces[1].layer, 3u);
  EXPECT_EQ(traces[1].head, 1u);
  EXPECT_EQ(traces[1].stream_logits.size(), 2u);
  for (std::size_t t = 0; t < n; ++t) {
    double total = 0.0;
    for (std::size_t s = 0; s < n; ++s) total += traces[0].weights.data()[t * n + s];
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(SasAttention, ZeroInputGivesTheOutputBias) {
  auto p = params(4, 2, {});
  p.b_o = Value::parameter({4}, {1, 2, 3, 4});
  const auto y = att::sas_attention(Value::constant({3, 4}), p, att::causal_mask(3));
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.data()[t * 4 + c], c + 1.0);
  }
}

TEST(SasAttention, SingleHeadTwoPositionHandCase) {
  auto p = params(2, 1, {});
  const std::vector<double> eye = {1, 0, 0, 1};
  p.w_q = Value::parameter({2, 2}, eye);
  p.w_k = Value::parameter({2, 2}, eye);
  p.w_v = Value::parameter({2, 2}, eye);
  p.w_o = Value::parameter({2, 2}, eye);
  const auto y = att::sas_attention(Value::constant({2, 2}, {1, 0, 0, 1}), p, att::causal_mask(2));
  // Row 0 sees itself only; row 1 sees logits [0, 1] / sqrt(2).
  const double w1 = 1.0 / (1.0 + std::exp(-1.0 / std::sqrt(2.0)));
  expect_near(values(y), {1, 0, 1 - w1, w1}, 1e-15);
}

TEST(SasAttention, EqualsDifWithoutStreams) {
  const auto p = params(6, 3, {});
  const auto r = Value::constant({4, 6}, gaussian(24, 15));
  EXPECT_EQ(values(att::sas_attention(r, p, att::causal_mask(4))), values(att::dif_attention(r, {}, p, att::causal_mask(4))));
}

TEST(NovaAttention, ReductionsToSelfAttention) {
  const auto p = params(6, 2, {});
  const auto r = Value::constant({4, 6}, gaussian(24, 16));
  const auto mask = att::causal_mask(4);
  EXPECT_EQ(values(att::nova_attention(r, r, p, mask)), values(att::sas_attention(r, p, mask)));
  const auto fused = nc::add(r, Value::constant({4, 6}));
  EXPECT_EQ(values(att::nova_attention(fused, r, p, mask)), values(att::sas_attention(r, p, mask)));
}

TEST(NovaAttention, MatchesCompositionOracle) {
  const auto p = params(6, 2, {}, Fusion::add, 17);
  const auto fused = gaussian(24, 18), id = gaussian(24, 19);
  const auto y = att::nova_attention(Value::constant({4, 6}, fused), Value::constant({4, 6}, id), p, att::causal_mask(4));
  expect_near(values(y), attention_oracle(fused, id, {}, 4, p), 1e-10);
}

TEST(Attention, OutputRowIsInvariantToLaterPositions) {
  const auto p = params(8, 2, {4});
  const std::size_t n = 6;
  auto r = gaussian(n * 8, 20);
  auto e = gaussian(n * 4, 21);
  const auto base = att::dif_attention(Value::constant({n, 8}, r), {Value::constant({n, 4}, e)}, p, att::causal_mask(n));
  for (std::size_t t = 0; t + 1 < n; ++t) {
    auto r2 = r, e2 = e;
    for (std::size_t i = (t + 1) * 8; i < r2.size(); ++i) r2[i] += 3.0;
    for (std::size_t i = (t + 1) * 4; i < e2.size(); ++i) e2[i] -= 2.0;
    const auto moved =
        att::dif_attention(Value::constant({n, 8}, r2), {Value::constant({n, 4}, e2)}, p, att::causal_mask(n));
    for (std::size_t s = 0; s <= t; ++s) {
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(moved.data()[s * 8 + c], base.data()[s * 8 + c]);
    }
  }
}

TEST(CausalMask, LeftPaddedRowsAttendToRealPrefixOnly) {
  const std::vector<std::size_t> lengths = {2};
  const auto m = att::causal_mask(lengths, 4);
  // Rows 0-1 are padding (self only); rows 2-3 see real keys 2..t.
  const std::vector<std::uint8_t> want = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 1};
  EXPECT_EQ(m.allowed, want);
  const std::vector<std::size_t> too_long = {5};
  EXPECT_THROW(att::causal_mask(too_long, 4), difsr::ContractError);
}

TEST(Attention, GateAndConcatFusionHaveCorrectGradients) {
  for (auto fusion : {Fusion::gate, Fusion::concat}) {
    auto p = params(4, 2, {2}, fusion, 22);
    for (auto& fh : p.fusion_heads) {
      auto c = fh.coeffs.mutable_data();
      for (std::size_t i = 0; i < c.size(); ++i) c[i] += 0.3 * static_cast<double>(i + 1);
    }
    const auto r = Value::parameter({3, 4}, gaussian(12, 23));
    const auto e = Value::parameter({3, 2}, gaussian(6, 24));
    const auto weights = Value::constant({3, 4}, gaussian(12, 25));
    std::vector<std::pair<std::string, Value>> named = {{"r", r}, {"e", e}};
    for (auto& [name, v] : p.named("")) named.emplace_back(name, v);
    const auto check = oracle::finite_difference(
        [&] { return nc::sum(nc::mul(att::dif_attention(r, {e}, p, att::causal_mask(3)), weights)); }, named);
    EXPECT_LE(check.max_rel_error, oracle::kGradientTolerance) << check.worst;
  }
}
