#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "difsr/evaluation/evaluate.hpp"
#include "difsr/train/trainer.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

namespace {

using namespace difsr;

TEST(Rank, CountsStrictlyHigherScores) {
  const std::vector<double> scores = {0.0, 0.1, 0.9, 0.5};
  EXPECT_EQ(eval::rank_of_target(scores, 3), 2u);
  EXPECT_EQ(eval::rank_of_target(scores, 2), 1u);
  EXPECT_EQ(eval::rank_of_target(scores, 1), 3u);
  EXPECT_EQ(eval::rank_of_target(scores, 3, {2}), 1u);
}

TEST(Rank, PaddingColumnNeverCompetes) {
  const std::vector<double> scores = {100.0, 0.1, 0.2};
  EXPECT_EQ(eval::rank_of_target(scores, 2), 1u);
}

TEST(Rank, TiesGoToTheSmallerIndex) {
  const std::vector<double> scores = {0.0, 1.0, 1.0, 1.0};
  EXPECT_EQ(eval::rank_of_target(scores, 1), 1u);
  EXPECT_EQ(eval::rank_of_target(scores, 3), 3u);
}

TEST(Rank, InvalidTargetsAreRejected) {
  const std::vector<double> scores = {0.0, 1.0, 2.0};
  EXPECT_THROW(eval::rank_of_target(scores, 0), ContractError);
  EXPECT_THROW(eval::rank_of_target(scores, 3), IndexError);
  EXPECT_THROW(eval::rank_of_target(scores, 1, {1}), ContractError);
}

TEST(Rank, MatchesSortOracle) {
  std::mt19937_64 gen(17);
  std::uniform_int_distribution<int> coarse(0, 9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> scores(31);
    for (auto& s : scores) s = coarse(gen) * 0.25;  // many ties
    const auto target = static_cast<std::int32_t>(1 + gen() % 30);
    std::unordered_set<std::int32_t> seen;
    for (int k = 0; k < 5; ++k) {
      const auto item = static_cast<std::int32_t>(1 + gen() % 30);
      if (item != target) seen.insert(item);
    }
    EXPECT_EQ(eval::rank_of_target(scores, target, seen), oracle::sorted_rank(scores, target, seen));
  }
}

TEST(Rank, InvariantUnderShiftAndMonotoneMaps) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> scores(21);
    for (auto& s : scores) s = normal(gen);
    const auto target = static_cast<std::int32_t>(1 + gen() % 20);
    auto shifted = scores, squashed = scores;
    for (auto& s : shifted) s += 7.0;
    for (auto& s : squashed) s = std::exp(s);
    const auto r = eval::rank_of_target(scores, target);
    EXPECT_EQ(eval::rank_of_target(shifted, target), r);
    EXPECT_EQ(eval::rank_of_target(squashed, target), r);
  }
}

TEST(Rank, RaisingTheTargetNeverWorsensRank) {
  std::mt19937_64 gen(4);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> scores(21);
    for (auto& s : scores) s = normal(gen);
    const auto target = static_cast<std::int32_t>(1 + gen() % 20);
    const auto before = eval::rank_of_target(scores, target);
    scores[static_cast<std::size_t>(target)] += 0.5;
    EXPECT_LE(eval::rank_of_target(scores, target), before);
  }
}

TEST(Metrics, RecallAndNdcgSpotValues) {
  EXPECT_EQ(eval::recall_at_k(1, 10), 1.0);
  EXPECT_EQ(eval::recall_at_k(10, 10), 1.0);
  EXPECT_EQ(eval::recall_at_k(11, 10), 0.0);
  EXPECT_EQ(eval::ndcg_at_k(1, 10), 1.0);
  EXPECT_NEAR(eval::ndcg_at_k(3, 10), 0.5, 1e-15);
  EXPECT_NEAR(eval::ndcg_at_k(10, 10), 1.0 / std::log2(11.0), 1e-15);
  EXPECT_EQ(eval::ndcg_at_k(11, 10), 0.0);
}

TEST(Metrics, TwoUsersAtRanksOneAndEleven) {
  const std::vector<std::size_t> ranks = {1, 11};
  const std::vector<std::size_t> ks = {10, 20};
  const auto r = eval::summarize(ranks, ks, "dif");
  EXPECT_EQ(r.recall.at(10), 0.5);
  EXPECT_EQ(r.ndcg.at(10), 0.5);
  EXPECT_EQ(r.recall.at(20), 1.0);
  EXPECT_NEAR(r.ndcg.at(20), 0.5 * (1.0 + 1.0 / std::log2(12.0)), 1e-15);
  EXPECT_EQ(r.users, 2u);
  const auto j = eval::to_json(r);
  EXPECT_EQ(j.at("recall@10"), 0.5);
  EXPECT_FALSE(j.contains("wall_clock_s"));
  EXPECT_TRUE(eval::to_json(r, true).contains("wall_clock_s"));
}

TEST(Metrics, RecallGrowsWithCutoff) {
  std::mt19937_64 gen(9);
  std::vector<std::size_t> ranks(100);
  for (auto& r : ranks) r = 1 + gen() % 50;
  const std::vector<std::size_t> ks = {1, 5, 10, 20, 50};
  const auto report = eval::summarize(ranks, ks, "x");
  double previous = 0.0;
  for (auto k : ks) {
    EXPECT_GE(report.recall.at(k), previous);
    EXPECT_LE(report.ndcg.at(k), report.recall.at(k));
    previous = report.recall.at(k);
  }
  EXPECT_EQ(report.recall.at(50), 1.0);
}

TEST(Metrics, RandomScoresGiveChanceRecall) {
  // Each rank is uniform over the candidates, so Recall@10 is Bernoulli(10 / items).
  std::mt19937_64 gen(23);
  std::uniform_real_distribution<double> u;
  const std::size_t items = 100, samples = 4000;
  double hits = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    std::vector<double> scores(items + 1);
    for (auto& x : scores) x = u(gen);
    hits += eval::recall_at_k(eval::rank_of_target(scores, static_cast<std::int32_t>(1 + gen() % items)), 10);
  }
  const double p = 10.0 / items;
  const double se = std::sqrt(p * (1 - p) / samples);
  EXPECT_NEAR(hits / samples, p, 3 * se);
}

struct Trained {
  data::InteractionDataset ds;
  RunConfig config;
  train::FitResult fit;
};

Trained small_model() {
  synthetic::UniformOptions o;
  o.users = 30;
  o.items = 25;
  o.length = 6;
  Trained t{synthetic::uniform(o), {}, {}};
  t.config.model.variant = Variant::dif;
  t.config.model.d = 8;
  t.config.model.heads = 2;
  t.config.model.layers = 1;
  t.config.model.max_len = 5;
  t.config.model.attributes = {{"category", 4}};
  t.config.train.epochs = 1;
  t.config.train.batch_size = 16;
  t.fit = train::fit(t.ds, t.config);
  return t;
}

TEST(Evaluate, EmptyViewIsAContractError) {
  const auto t = small_model();
  EXPECT_THROW(eval::evaluate(t.fit.best, t.config.model, t.ds, {}, t.fit.attribute_slots), ContractError);
}

TEST(Evaluate, BatchSizeDoesNotChangeRanks) {
  const auto t = small_model();
  const auto split = data::split_leave_one_out(t.ds);
  eval::EvalOptions a, b;
  a.batch_size = 1;
  b.batch_size = 7;
  EXPECT_EQ(eval::rank_view(t.fit.best, t.config.model, t.ds, split.test, t.fit.attribute_slots, a),
            eval::rank_view(t.fit.best, t.config.model, t.ds, split.test, t.fit.attribute_slots, b));
}

TEST(Evaluate, ExcludingSeenItemsNeverWorsensRank) {
  const auto t = small_model();
  const auto split = data::split_leave_one_out(t.ds);
  eval::EvalOptions with, without;
  without.exclude_seen = false;
  const auto a = eval::rank_view(t.fit.best, t.config.model, t.ds, split.test, t.fit.attribute_slots, with);
  const auto b = eval::rank_view(t.fit.best, t.config.model, t.ds, split.test, t.fit.attribute_slots, without);
  ASSERT_EQ(a.size(), split.test.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE(a[i], b[i]);
}

TEST(Evaluate, ReportAgreesWithPerSampleRanks) {
  const auto t = small_model();
  const auto split = data::split_leave_one_out(t.ds);
  const auto ranks = eval::rank_view(t.fit.best, t.config.model, t.ds, split.valid, t.fit.attribute_slots, {});
  const auto report = eval::evaluate(t.fit.best, t.config.model, t.ds, split.valid, t.fit.attribute_slots);
  double recall = 0.0;
  for (auto r : ranks) recall += r <= 10 ? 1.0 : 0.0;
  EXPECT_NEAR(report.recall.at(10), recall / static_cast<double>(ranks.size()), 1e-15);
  EXPECT_EQ(report.users, split.valid.size());
  EXPECT_EQ(report.variant, "dif");
}

}  // namespace
