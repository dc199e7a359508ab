#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>

#include "difsr/diagnostics/diagnostics.hpp"
#include "support/synthetic.hpp"
#include "support/temp_dir.hpp"

namespace {

using namespace difsr;
namespace dg = difsr::diagnostics;

// ---- rank ----

TEST(RankWitness, FusedLogitsAreABlockIdentity) {
  const auto w = dg::rank_witness(64, 32, 2, {16});
  EXPECT_TRUE(w.block_identity);
  EXPECT_EQ(w.expected_rank, 24u);
  EXPECT_EQ(w.rank, 24u);
  for (double tol : {1e-8, 1e-10, 1e-12}) {
    EXPECT_EQ(numcore::numeric_rank(w.fused, tol).rank, 24u) << tol;
  }
}

TEST(RankWitness, EveryStreamAddsItsHeadWidth) {
  const auto w = dg::rank_witness(40, 32, 4, {16, 8, 4});
  EXPECT_TRUE(w.block_identity);
  EXPECT_EQ(w.rank, 8u + 4u + 2u + 1u);
}

TEST(RankWitness, RejectsImpossibleShapes) {
  EXPECT_THROW(dg::rank_witness(10, 32, 2, {16}), ContractError);
  EXPECT_THROW(dg::rank_witness(64, 30, 4, {16}), ContractError);
  EXPECT_THROW(dg::rank_witness(64, 32, 2, {15}), ContractError);
}

dg::RankProfileOptions small_profile() {
  dg::RankProfileOptions o;
  o.n = 32;
  o.d = 16;
  o.heads = 2;
  o.attribute_dims = {8};
  o.trials = 10;
  return o;
}

TEST(RankProfile, EarlyFusionIsBoundedByHeadWidth) {
  const auto rows = dg::rank_profile(small_profile());
  ASSERT_EQ(rows.size(), 3u * 10u * 2u);
  for (const auto& r : rows) {
    if (r.variant == Variant::dif) {
      EXPECT_EQ(r.rank, 8u + 4u);
    } else {
      EXPECT_LE(r.rank, 8u) << to_string(r.variant);
    }
  }
}

TEST(RankProfile, SameSeedSameRows) {
  auto o = small_profile();
  o.trials = 3;
  EXPECT_EQ(dg::rank_csv(dg::rank_profile(o)), dg::rank_csv(dg::rank_profile(o)));
}

TEST(RankProfile, SummaryAndCsv) {
  auto o = small_profile();
  o.trials = 4;
  o.variants = {Variant::dif};
  const auto rows = dg::rank_profile(o);
  const auto summary = dg::summarize(rows);
  ASSERT_EQ(summary.size(), 2u);
  for (const auto& s : summary) {
    EXPECT_EQ(s.trials, 4u);
    EXPECT_EQ(s.mean_rank, 12.0);
    EXPECT_EQ(s.min_rank, 12u);
    EXPECT_EQ(s.max_rank, 12u);
  }
  const auto csv = dg::rank_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "variant,layer,head,trial,rank,tol");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 8);
}

// ---- gradient rigidity ----

ModelConfig grad_config() {
  ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.layers = 1;
  c.max_len = 6;
  c.attributes = {{"category", 16}, {"brand", 16}};
  return c;
}

TEST(GradientRigidity, EarlyFusionGradientsCoincide) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto v = dg::gradient_rigidity_check(Variant::sasrec_f, grad_config(), seed);
    EXPECT_TRUE(v.equal) << seed;
    EXPECT_EQ(v.pairs.size(), 2u);
    for (const auto& p : v.pairs) EXPECT_TRUE(p.theorem_pair);
  }
}

TEST(GradientRigidity, NovaAttributeGradientsCoincide) {
  const auto v = dg::gradient_rigidity_check(Variant::nova, grad_config(), 0);
  EXPECT_TRUE(v.equal);
  EXPECT_TRUE(v.item_differs);
}

TEST(GradientRigidity, DecoupledAttributeGradientsDiffer) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto v = dg::gradient_rigidity_check(Variant::dif, grad_config(), seed);
    EXPECT_FALSE(v.equal) << seed;
    bool found = false;
    for (const auto& p : v.pairs) {
      if (!p.theorem_pair) continue;
      found = true;
      EXPECT_FALSE(p.bitwise_equal);
      EXPECT_GT(p.max_abs_diff, 1e-12);
      EXPECT_FALSE(p.first_difference.empty());
    }
    EXPECT_TRUE(found);
  }
}

TEST(GradientRigidity, RejectsUnsupportedSetups) {
  EXPECT_THROW(dg::gradient_rigidity_check(Variant::sasrec, grad_config(), 0), ContractError);
  auto c = grad_config();
  c.fusion = Fusion::gate;
  EXPECT_THROW(dg::gradient_rigidity_check(Variant::dif, c, 0), ContractError);
}

TEST(GradientRigidity, JsonCarriesVerdict) {
  const auto j = dg::to_json(dg::gradient_rigidity_check(Variant::sasrec_f, grad_config(), 4));
  EXPECT_EQ(j.at("variant"), "sasrec_f");
  EXPECT_EQ(j.at("equal"), true);
  EXPECT_EQ(j.at("pairs").size(), 2u);
}

// ---- attention export ----

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct ExportFixture {
  data::InteractionDataset ds;
  model::Checkpoint ck;
};

ExportFixture export_fixture() {
  synthetic::UniformOptions o;
  o.users = 6;
  o.items = 20;
  o.length = 5;
  auto ds = synthetic::uniform(o);
  ds.users.push_back("short");
  ds.sequences.push_back({1, 2});
  ExportFixture f{std::move(ds), {}};
  f.ck.config.model.variant = Variant::dif;
  f.ck.config.model.d = 8;
  f.ck.config.model.heads = 2;
  f.ck.config.model.layers = 2;
  f.ck.config.model.max_len = 6;
  f.ck.config.model.attributes = {{"category", 4}};
  f.ck.schema = model::Schema::resolve(f.ds, f.ck.config.model).first;
  numcore::Rng rng(1);
  f.ck.params = model::init_params(f.ck.config.model, f.ck.schema, rng);
  return f;
}

TEST(AttentionExport, WritesEverySourceAndNormalisedWeights) {
  testing_support::TempDir dir("export");
  const auto f = export_fixture();
  const auto lines = dg::export_attention(f.ck, f.ds, "u0", dir / "attn.jsonl");
  EXPECT_EQ(lines, 2u * 2u * (1u + 2u + 2u));
  std::ifstream in(dir / "attn.jsonl");
  std::string line;
  std::size_t softmax = 0;
  std::set<std::string> sources;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    sources.insert(j.at("source").get<std::string>());
    EXPECT_EQ(j.at("user"), "u0");
    EXPECT_EQ(j.at("length"), 4);
    const auto n = j.at("n").get<std::size_t>();
    const auto data = j.at("data").get<std::vector<double>>();
    ASSERT_EQ(data.size(), n * n);
    if (j.at("source") != "softmax") continue;
    ++softmax;
    for (std::size_t r = 0; r < n; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        total += data[r * n + c];
        if (c > r) {
          EXPECT_EQ(data[r * n + c], 0.0);
        }
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
  EXPECT_EQ(softmax, 4u);
  EXPECT_EQ(sources, (std::set<std::string>{"item", "position", "category", "fused", "softmax"}));
}

TEST(AttentionExport, ReExportIsByteIdentical) {
  testing_support::TempDir dir("export_twice");
  const auto f = export_fixture();
  dg::export_attention(f.ck, f.ds, "u3", dir / "a.jsonl");
  dg::export_attention(f.ck, f.ds, "u3", dir / "b.jsonl");
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
}

TEST(AttentionExport, UnknownOrShortUserIsALookupError) {
  testing_support::TempDir dir("export_missing");
  const auto f = export_fixture();
  EXPECT_THROW(dg::export_attention(f.ck, f.ds, "nobody", dir / "x.jsonl"), LookupError);
  EXPECT_THROW(dg::export_attention(f.ck, f.ds, "short", dir / "x.jsonl"), LookupError);
}

TEST(RankProfileTrained, OneRowPerSampleLayerAndHead) {
  const auto f = export_fixture();
  const auto rows = dg::rank_profile_trained(f.ck, f.ds, 4, 1e-8);
  EXPECT_EQ(rows.size(), 4u * 2u * 2u);
  for (const auto& r : rows) {
    EXPECT_GE(r.rank, 1u);
    EXPECT_LE(r.rank, 4u);
  }
}

}  // namespace
