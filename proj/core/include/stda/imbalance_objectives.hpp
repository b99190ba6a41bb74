#pragma once

#include <string>
#include <vector>

#include "stda/ops.hpp"

namespace stda {

/// c[i][j]: cost of predicting class j when the truth is i. Non-negative with
/// a zero diagonal.
struct CostMatrix {
  std::vector<std::vector<double>> c;

  int n() const { return static_cast<int>(c.size()); }
  void validate() const;
  // Mean off-diagonal cost of each row; the per-class loss weight.
  std::vector<double> row_weights() const;

  static CostMatrix uniform(int n);
};

/// c[i][j] = max(counts) / counts[i] off the diagonal.
CostMatrix default_cost_matrix(const std::vector<int64_t>& class_counts);

/// Row-weighted cross-entropy on probabilities (B x N), averaged over the batch.
template <typename T>
Var<T> cost_sensitive_loss(const Var<T>& probabilities, const std::vector<int>& truths, const CostMatrix& costs);

/// m[i][j]: samples of true class i predicted as class j.
struct ConfusionMatrix {
  std::vector<std::vector<int64_t>> m;

  int n() const { return static_cast<int>(m.size()); }
  int64_t total() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix confusion(const std::vector<int>& truths, const std::vector<int>& predictions, int n_classes);

struct ClassMetrics {
  double precision = 0, recall = 0, specificity = 0, f1 = 0, g_mean = 0, iba = 0;
  int64_t support = 0;
};

enum class Averaging { kMacro, kWeighted };

struct MetricReport {
  std::vector<ClassMetrics> per_class;
  ClassMetrics average;  // support holds the total sample count
  Averaging averaging = Averaging::kMacro;
  double iba_alpha = 0.1;
  // Set when any ratio had a zero denominator and was resolved to 0.
  bool undefined_ratio = false;
  ConfusionMatrix confusion;

  std::string to_text() const;
  std::string to_json() const;
};

MetricReport metric_report(const ConfusionMatrix& m, double iba_alpha = 0.1, Averaging averaging = Averaging::kMacro);

}  // namespace stda
