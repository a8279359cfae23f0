#include <gtest/gtest.h>

#include "fewvuln/evaluation.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace fewvuln {
namespace {

using Seqs = std::vector<std::vector<Tag>>;

void expect_same(const TagMetrics& a, const TagMetrics& b) {
  EXPECT_EQ(a.tp, b.tp);
  EXPECT_EQ(a.fp, b.fp);
  EXPECT_EQ(a.fn, b.fn);
  EXPECT_EQ(a.support, b.support);
  EXPECT_EQ(a.precision, b.precision);
  EXPECT_EQ(a.recall, b.recall);
  EXPECT_EQ(a.f1, b.f1);
  EXPECT_EQ(a.precision_undefined, b.precision_undefined);
}

TEST(TokenPrf, PerfectPrediction) {
  Seqs g{{Tag::SN, Tag::SV, Tag::O}};
  auto r = token_prf(g, g);
  EXPECT_EQ(r.sn.f1, 1.0);
  EXPECT_EQ(r.sv.f1, 1.0);
}

TEST(TokenPrf, AllOutsidePrediction) {
  auto r = token_prf({{Tag::SN, Tag::O}}, {{Tag::O, Tag::O}});
  EXPECT_EQ(r.sn.precision, 0.0);
  EXPECT_TRUE(r.sn.precision_undefined);
  EXPECT_EQ(r.sn.recall, 0.0);
  EXPECT_EQ(r.sn.f1, 0.0);
}

TEST(TokenPrf, LengthMismatchNamesIndex) {
  try {
    token_prf({{Tag::O}, {Tag::O, Tag::O}}, {{Tag::O}, {Tag::O}});
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("sentence 1"), std::string::npos);
  }
  EXPECT_THROW(token_prf({{Tag::O}}, {}), DomainError);
}

TEST(TokenPrf, MatchesConfusionOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    Seqs g, p;
    const auto n = 1 + rng.below(6);
    for (std::size_t i = 0; i < n; ++i) {
      const auto len = 1 + rng.below(10);
      g.push_back(testing::random_tags(rng, len));
      p.push_back(testing::random_tags(rng, len));
    }
    auto got = token_prf(g, p);
    auto want = oracle::confusion_prf(g, p);
    expect_same(got.sn, want.sn);
    expect_same(got.sv, want.sv);
    EXPECT_EQ(got.total_tokens, want.total_tokens);
  }
}

TEST(SpanPrf, ExactMatchOnly) {
  // gold SN span [0,2); prediction only covers [0,1)
  auto r = span_prf({{Tag::SN, Tag::SN, Tag::O}}, {{Tag::SN, Tag::O, Tag::O}});
  EXPECT_EQ(r.sn.tp, 0u);
  EXPECT_EQ(r.sn.fp, 1u);
  EXPECT_EQ(r.sn.fn, 1u);
  EXPECT_EQ(r.level, MetricLevel::span);
  auto ok = span_prf({{Tag::SN, Tag::SN, Tag::SV}}, {{Tag::SN, Tag::SN, Tag::SV}});
  EXPECT_EQ(ok.sn.f1, 1.0);
  EXPECT_EQ(ok.sv.support, 1u);
}

TEST(WeightedF1, HandArithmetic) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    EvalReport r;
    r.sn.support = rng.below(50);
    r.sv.support = 1 + rng.below(50);
    r.sn.f1 = rng.uniform();
    r.sv.f1 = rng.uniform();
    const double want = (double(r.sn.support) * r.sn.f1 + double(r.sv.support) * r.sv.f1) /
                        double(r.sn.support + r.sv.support);
    EXPECT_NEAR(weighted_f1(r), want, 1e-12);
  }
}

TEST(WeightedF1, EqualSupportIsMean) {
  EvalReport r;
  r.sn.support = r.sv.support = 4;
  r.sn.f1 = 0.5;
  r.sv.f1 = 1.0;
  EXPECT_DOUBLE_EQ(weighted_f1(r), 0.75);
}

TEST(WeightedF1, NoEntitiesIsDomainError) { EXPECT_THROW(weighted_f1(EvalReport{}), DomainError); }

TEST(AverageReports, MacroAverage) {
  EvalReport a, b;
  a.sn.f1 = 1.0;
  b.sn.f1 = 0.5;
  a.sn.support = 3;
  b.sn.support = 1;
  auto avg = average_reports({a, b});
  EXPECT_DOUBLE_EQ(avg.sn.f1, 0.75);
  EXPECT_EQ(avg.sn.support, 4u);
  EXPECT_EQ(avg.averaged_over, 2u);
  EXPECT_THROW(average_reports({}), DomainError);
}

TEST(ComparisonTable, CsvRoundTrip) {
  EvalReport r;
  r.sn = metrics_from_counts(9, 1, 2);
  r.sv = metrics_from_counts(4, 0, 1);
  auto csv = render_comparison_csv({{"FT", r}, {"FT+SS", r}});
  EXPECT_EQ(csv.rfind("# level=token\nsetting,SN precision,SN recall,SN f1-score,SV precision,SV recall,SV f1-score\n", 0),
            0u);
  auto rows = parse_comparison_csv(csv);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].setting, "FT+SS");
  EXPECT_NEAR(rows[0].values[0], 0.9, 1e-4);
  EXPECT_NEAR(rows[0].values[4], 0.8, 1e-4);
  auto text = render_comparison_text({{"FT", r}}, MetricLevel::span);
  EXPECT_NE(text.find("span-level"), std::string::npos);
  EXPECT_NE(text.find("0.9000"), std::string::npos);
}

}  // namespace
}  // namespace fewvuln
