#include <gtest/gtest.h>

#include <map>

#include "test_util.hpp"

using namespace earnlab;

namespace {

TokenizerState small_tokenizer(const Panel& panel, std::uint64_t seed = 3) {
  TokenizerConfig tc;
  tc.model_dim = 16;
  return make_tokenizer(tc, fit_stats(panel), 1, {4}, seed);
}

}  // namespace

TEST(FeatureStats, MatchTwoPassOraclePerYear) {
  const auto panel = fixtures::featured_panel(300, 41, 0.2);
  const auto st = fit_stats(panel);
  ASSERT_EQ(st.channels, 2u);
  std::map<int, std::vector<double>> earn, hours;
  for (const auto& h : panel) {
    for (const auto& r : h.records) {
      earn[r.year].push_back(log_earnings(r.earnings));
      if (r.missing[0] == 0) hours[r.year].push_back(r.continuous[0]);
    }
  }
  for (const auto& [year, v] : earn) {
    EXPECT_NEAR(st.cell(year, 0).mean, fixtures::mean_of(v), 1e-12);
    EXPECT_NEAR(st.cell(year, 0).sd, std::sqrt(fixtures::var_of(v)), 1e-12);
    EXPECT_NEAR(st.cell(year, 1).mean, fixtures::mean_of(hours[year]), 1e-12);
  }
  // Unseen years fall back to pooled statistics.
  EXPECT_EQ(st.cell(1900, 0).mean, st.pooled[0].mean);
}

TEST(Tokenizer, RejectsOutOfRangeAgeAndYear) {
  const auto panel = fixtures::featured_panel(50, 42);
  const auto tok = small_tokenizer(panel);
  auto r = panel.front().records.front();
  r.age = 70;
  try {
    tokenize(r, tok);
    FAIL() << "expected a tokenization error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Tokenization);
  }
  r = panel.front().records.front();
  r.year = 2100;
  EXPECT_THROW(tokenize(r, tok), Error);
}

TEST(Tokenizer, MissingCategoryUsesUnknownRow) {
  const auto panel = fixtures::featured_panel(50, 43, 0.0);
  const auto tok = small_tokenizer(panel);
  auto r = panel.front().records.front();
  r.missing[1] = 1;
  const auto in = prepare_token(r, tok);
  EXPECT_EQ(in.category_rows[0], 4);
  EXPECT_EQ(in.mask[1], 1.0);
  r.missing[0] = 1;
  EXPECT_EQ(prepare_token(r, tok).continuous[1], 0.0);
  EXPECT_EQ(tokenize(r, tok).size(), 16u);
}

TEST(Tokenizer, DefaultEmbeddingDims) {
  EXPECT_EQ(default_embedding_dim(2), 2);
  EXPECT_EQ(default_embedding_dim(4), 3);
  EXPECT_EQ(default_embedding_dim(5), 4);
  EXPECT_EQ(default_embedding_dim(8), 4);
  const auto p = TokenizerConfig::full_scale();
  int cat = 0;
  for (int d : p.categorical_dims) cat += d;
  EXPECT_EQ(cat, 76);
}

TEST(Tokenizer, JsonRoundTripIsExact) {
  const auto panel = fixtures::featured_panel(80, 44, 0.1);
  const auto tok = small_tokenizer(panel);
  const auto back = tokenizer_from_json(to_json(tok));
  for (const auto& h : panel) {
    for (const auto& r : h.records) EXPECT_EQ(tokenize(r, tok), tokenize(r, back));
  }
}

TEST(Tokenizer, SchemaMismatchThrows) {
  const auto panel = fixtures::featured_panel(20, 45);
  TokenizerConfig tc;
  EXPECT_THROW(make_tokenizer(tc, fit_stats(panel), 2, {4}, 1), Error);
  tc.categorical_dims = {3, 3};
  EXPECT_THROW(make_tokenizer(tc, fit_stats(panel), 1, {4}, 1), Error);
}
