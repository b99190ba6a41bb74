#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <json.hpp>

#include "stda/imbalance_objectives.hpp"
#include "test_util.hpp"

using namespace stda;
using stda::testing::error_code_of;

namespace {

Var<double> probs(std::vector<std::vector<double>> rows) {
  Tensor<double> t({static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows[0].size())});
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j) t[static_cast<int64_t>(i * rows[i].size() + j)] = rows[i][j];
  return Var<double>(t);
}

std::vector<std::vector<double>> random_simplex_rows(int b, int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<std::vector<double>> rows(b, std::vector<double>(n));
  for (auto& r : rows) {
    double s = 0;
    for (auto& v : r) s += (v = u(rng));
    for (auto& v : r) v /= s;
  }
  return rows;
}

double safe_div(double a, double b) { return b == 0 ? 0.0 : a / b; }

// Definitional one-vs-rest metrics, counted cell by cell.
struct OracleClass {
  double precision, recall, specificity, f1, g_mean, iba;
};

OracleClass oracle_class(const ConfusionMatrix& m, int c, double alpha) {
  double tp = 0, fn = 0, fp = 0, tn = 0;
  for (int i = 0; i < m.n(); ++i)
    for (int j = 0; j < m.n(); ++j) {
      const double v = static_cast<double>(m.m[i][j]);
      if (i == c && j == c) tp += v;
      else if (i == c) fn += v;
      else if (j == c) fp += v;
      else tn += v;
    }
  OracleClass o{};
  o.precision = safe_div(tp, tp + fp);
  o.recall = safe_div(tp, tp + fn);
  o.specificity = safe_div(tn, tn + fp);
  o.f1 = safe_div(2 * o.precision * o.recall, o.precision + o.recall);
  o.g_mean = std::sqrt(o.recall * o.specificity);
  o.iba = (1 + alpha * (o.recall - o.specificity)) * o.recall * o.specificity;
  return o;
}

ConfusionMatrix random_confusion(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> nd(2, 5), zero(0, 4);
  std::uniform_int_distribution<int64_t> count(0, 300);
  const int n = nd(rng);
  ConfusionMatrix m{std::vector<std::vector<int64_t>>(n, std::vector<int64_t>(n))};
  for (auto& row : m.m)
    for (auto& v : row) v = zero(rng) == 0 ? 0 : count(rng);
  m.m[0][0] += 1;
  return m;
}

}  // namespace

TEST(CostSensitiveLoss, UniformCostsEqualPlainCrossEntropy) {
  std::mt19937_64 rng(1);
  auto rows = random_simplex_rows(16, 3, rng);
  std::vector<int> truths;
  double ce = 0;
  for (int i = 0; i < 16; ++i) {
    truths.push_back(i % 3);
    ce -= std::log(rows[static_cast<size_t>(i)][static_cast<size_t>(i % 3)]);
  }
  ce /= 16;
  EXPECT_EQ(cost_sensitive_loss(probs(rows), truths, CostMatrix::uniform(3)).value()[0], ce);

  Tensor<float> pf({16, 3});
  for (int i = 0; i < 48; ++i) pf[i] = static_cast<float>(rows[static_cast<size_t>(i / 3)][static_cast<size_t>(i % 3)]);
  EXPECT_NEAR(cost_sensitive_loss(Var<float>(pf), truths, CostMatrix::uniform(3)).value()[0], ce, 1e-6);
}

TEST(CostSensitiveLoss, WeightedExample) {
  CostMatrix c{{{0, 4}, {1, 0}}};
  const double loss = cost_sensitive_loss(probs({{0.25, 0.75}}), {0}, c).value()[0];
  EXPECT_NEAR(loss, 4 * -std::log(0.25), 1e-12);
  EXPECT_NEAR(loss, 5.5452, 1e-4);
}

TEST(CostSensitiveLoss, OneHotAtTruthIsZero) {
  CostMatrix c{{{0, 7, 2}, {3, 0, 9}, {1, 5, 0}}};
  EXPECT_EQ(cost_sensitive_loss(probs({{1, 0, 0}, {0, 0, 1}}), {0, 2}, c).value()[0], 0.0);
}

TEST(CostSensitiveLoss, RejectsBadRowsAndLabels) {
  auto c = CostMatrix::uniform(2);
  EXPECT_EQ(error_code_of([&] { cost_sensitive_loss(probs({{0.3, 0.3}}), {0}, c); }), ErrorCode::kValue);
  EXPECT_EQ(error_code_of([&] { cost_sensitive_loss(probs({{0.5, 0.5}}), {2}, c); }), ErrorCode::kValue);
  EXPECT_EQ(error_code_of([&] { cost_sensitive_loss(probs({{0.5, 0.5}}), {-1}, c); }), ErrorCode::kValue);
}

TEST(CostSensitiveLoss, MonotoneInTrueClassProbability) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  const CostMatrix c{{{0, 2, 3}, {1, 0, 4}, {6, 1, 0}}};
  for (int trial = 0; trial < 200; ++trial) {
    auto row = random_simplex_rows(1, 3, rng)[0];
    const int truth = trial % 3;
    const double before = cost_sensitive_loss(probs({row}), {truth}, c).value()[0];
    // Move mass from the other classes onto the truth.
    const double frac = u(rng);
    double moved = 0;
    for (int j = 0; j < 3; ++j) {
      if (j == truth) continue;
      moved += row[static_cast<size_t>(j)] * frac;
      row[static_cast<size_t>(j)] *= 1 - frac;
    }
    row[static_cast<size_t>(truth)] += moved;
    EXPECT_LE(cost_sensitive_loss(probs({row}), {truth}, c).value()[0], before + 1e-12);
  }
}

TEST(DefaultCostMatrix, PaperCountsGiveRatioWeights) {
  const auto w = default_cost_matrix({1730, 319, 264}).row_weights();
  EXPECT_NEAR(w[0], 1.0, 1e-12);
  EXPECT_NEAR(w[1], 1730.0 / 319.0, 1e-12);
  EXPECT_NEAR(w[2], 1730.0 / 264.0, 1e-12);
  EXPECT_NEAR(w[1], 5.4232, 1e-4);
  EXPECT_NEAR(w[2], 6.5530, 1e-4);
}

TEST(DefaultCostMatrix, BalancedAndTwoClassCases) {
  const auto b = default_cost_matrix({10, 10, 10});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_EQ(b.c[i][j], i == j ? 0.0 : 1.0);
  const auto w = default_cost_matrix({1, 100}).row_weights();
  EXPECT_DOUBLE_EQ(w[0], 100.0);
  EXPECT_DOUBLE_EQ(w[1], 1.0);
  EXPECT_EQ(error_code_of([] { default_cost_matrix({5, 0, 3}); }), ErrorCode::kValue);
}

TEST(CostMatrix, ValidatesDiagonalAndSign) {
  EXPECT_EQ(error_code_of([] { CostMatrix{{{1, 1}, {1, 0}}}.validate(); }), ErrorCode::kValue);
  EXPECT_EQ(error_code_of([] { CostMatrix{{{0, -1}, {1, 0}}}.validate(); }), ErrorCode::kValue);
}

TEST(Confusion, Examples) {
  const auto id = confusion({0, 1, 2}, {0, 1, 2}, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_EQ(id.m[i][j], i == j ? 1 : 0);
  EXPECT_EQ(confusion({0, 0}, {1, 1}, 2).m[0][1], 2);
  EXPECT_EQ(error_code_of([] { confusion({0, 1}, {0}, 2); }), ErrorCode::kShape);
}

TEST(Confusion, MatchesBruteForceTally) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> lab(0, 2);
  std::vector<int> t(1000), p(1000);
  for (int i = 0; i < 1000; ++i) {
    t[i] = lab(rng);
    p[i] = lab(rng);
  }
  const auto m = confusion(t, p, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      int64_t n = 0;
      for (int k = 0; k < 1000; ++k) n += (t[k] == i && p[k] == j) ? 1 : 0;
      EXPECT_EQ(m.m[i][j], n);
    }
  EXPECT_EQ(m.total(), 1000);
}

TEST(MetricReport, PerfectDiagonal) {
  ConfusionMatrix m{{{5, 0, 0}, {0, 3, 0}, {0, 0, 9}}};
  const auto r = metric_report(m);
  for (const auto& k : r.per_class) {
    for (double v : {k.precision, k.recall, k.specificity, k.f1, k.g_mean, k.iba}) EXPECT_DOUBLE_EQ(v, 1.0);
  }
  EXPECT_DOUBLE_EQ(r.average.g_mean, 1.0);
  EXPECT_DOUBLE_EQ(r.average.iba, 1.0);
}

TEST(MetricReport, BinaryWorkedExample) {
  const auto r = metric_report(ConfusionMatrix{{{50, 50}, {10, 90}}});
  const auto& k = r.per_class[0];
  EXPECT_NEAR(k.precision, 50.0 / 60.0, 1e-12);
  EXPECT_DOUBLE_EQ(k.recall, 0.5);
  EXPECT_DOUBLE_EQ(k.specificity, 0.9);
  EXPECT_NEAR(k.f1, 0.625, 1e-12);
  EXPECT_NEAR(k.g_mean, 0.6708, 1e-4);
  EXPECT_NEAR(k.iba, 0.432, 1e-4);
}

TEST(MetricReport, MajorityOnlyPredictorHasZeroGMean) {
  const auto r = metric_report(ConfusionMatrix{{{100, 0}, {20, 0}}});
  EXPECT_EQ(r.per_class[0].specificity, 0.0);
  EXPECT_EQ(r.per_class[0].g_mean, 0.0);
  EXPECT_TRUE(r.undefined_ratio);  // class 1 precision is 0/0
}

TEST(MetricReport, RejectsEmptyMatrix) {
  EXPECT_EQ(error_code_of([] { metric_report(ConfusionMatrix{}); }), ErrorCode::kValue);
  EXPECT_EQ(error_code_of([] { metric_report(ConfusionMatrix{{{0, 0}, {0, 0}}}); }), ErrorCode::kValue);
}

TEST(MetricReport, MatchesDefinitionalOracleOnRandomMatrices) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto m = random_confusion(rng);
    const double alpha = trial % 2 == 0 ? 0.1 : 0.05 * (trial % 7);
    for (auto avg : {Averaging::kMacro, Averaging::kWeighted}) {
      const auto r = metric_report(m, alpha, avg);
      double total = static_cast<double>(m.total());
      OracleClass mean{};
      for (int c = 0; c < m.n(); ++c) {
        const auto o = oracle_class(m, c, alpha);
        const auto& k = r.per_class[static_cast<size_t>(c)];
        EXPECT_NEAR(k.precision, o.precision, 1e-12);
        EXPECT_NEAR(k.recall, o.recall, 1e-12);
        EXPECT_NEAR(k.specificity, o.specificity, 1e-12);
        EXPECT_NEAR(k.f1, o.f1, 1e-12);
        EXPECT_NEAR(k.g_mean, o.g_mean, 1e-12);
        EXPECT_NEAR(k.iba, o.iba, 1e-12);
        double support = 0;
        for (int64_t v : m.m[static_cast<size_t>(c)]) support += static_cast<double>(v);
        const double w = avg == Averaging::kMacro ? 1.0 / m.n() : support / total;
        mean.g_mean += w * o.g_mean;
        mean.iba += w * o.iba;
        mean.recall += w * o.recall;
        mean.f1 += w * o.f1;
      }
      EXPECT_NEAR(r.average.g_mean, mean.g_mean, 1e-12);
      EXPECT_NEAR(r.average.iba, mean.iba, 1e-12);
      EXPECT_NEAR(r.average.recall, mean.recall, 1e-12);
      EXPECT_NEAR(r.average.f1, mean.f1, 1e-12);
    }
  }
}

TEST(MetricReport, GMeanAndIbaIdentities) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const auto m = random_confusion(rng);
    const auto r = metric_report(m, 0.0);
    for (const auto& k : r.per_class) {
      EXPECT_LE(k.g_mean, std::max(k.recall, k.specificity));
      EXPECT_NEAR(k.g_mean * k.g_mean, k.recall * k.specificity, 1e-15);
      EXPECT_EQ(k.iba, k.recall * k.specificity);
      for (double v : {k.precision, k.recall, k.specificity, k.f1, k.g_mean, k.iba}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(MetricReport, TextAndJsonCarryTheAverages) {
  const auto r = metric_report(ConfusionMatrix{{{50, 50}, {10, 90}}});
  EXPECT_NE(r.to_text().find("g_mean"), std::string::npos);
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_TRUE(j.contains("confusion"));
}
