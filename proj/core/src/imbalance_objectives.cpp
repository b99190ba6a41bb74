#include "stda/imbalance_objectives.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace stda {

void CostMatrix::validate() const {
  require(n() >= 2, ErrorCode::kValue, "cost matrix: need at least two classes");
  for (int i = 0; i < n(); ++i) {
    require(static_cast<int>(c[i].size()) == n(), ErrorCode::kShape, "cost matrix: not square");
    for (int j = 0; j < n(); ++j) {
      require(std::isfinite(c[i][j]) && c[i][j] >= 0.0, ErrorCode::kValue,
              "cost matrix: entries must be finite and non-negative");
    }
    require(c[i][i] == 0.0, ErrorCode::kValue, "cost matrix: diagonal must be zero");
  }
}

std::vector<double> CostMatrix::row_weights() const {
  std::vector<double> w(n(), 0.0);
  for (int i = 0; i < n(); ++i) {
    double s = 0.0;
    for (int j = 0; j < n(); ++j) s += c[i][j];
    w[i] = s / (n() - 1);
  }
  return w;
}

CostMatrix CostMatrix::uniform(int n) {
  CostMatrix cm;
  cm.c.assign(n, std::vector<double>(n, 1.0));
  for (int i = 0; i < n; ++i) cm.c[i][i] = 0.0;
  return cm;
}

CostMatrix default_cost_matrix(const std::vector<int64_t>& class_counts) {
  require(class_counts.size() >= 2, ErrorCode::kValue, "default_cost_matrix: need at least two classes");
  for (size_t i = 0; i < class_counts.size(); ++i) {
    require(class_counts[i] > 0, ErrorCode::kValue,
            "default_cost_matrix: class " + std::to_string(i) + " has zero samples");
  }
  const double mx = static_cast<double>(*std::max_element(class_counts.begin(), class_counts.end()));
  const int n = static_cast<int>(class_counts.size());
  CostMatrix cm;
  cm.c.assign(n, std::vector<double>(n, 0.0));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j) cm.c[i][j] = mx / static_cast<double>(class_counts[i]);
    }
  }
  return cm;
}

template <typename T>
Var<T> cost_sensitive_loss(const Var<T>& probabilities, const std::vector<int>& truths, const CostMatrix& costs) {
  costs.validate();
  const auto& p = probabilities.value();
  require(p.rank() == 2 && p.dim(1) == costs.n(), ErrorCode::kShape,
          "cost_sensitive_loss: expected B x " + std::to_string(costs.n()) + " probabilities, got " +
              shape_str(p.shape()));
  const int64_t b = p.dim(0), nc = p.dim(1);
  require(static_cast<int64_t>(truths.size()) == b, ErrorCode::kShape, "cost_sensitive_loss: label count mismatch");
  for (int64_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < nc; ++j) s += static_cast<double>(p[i * nc + j]);
    require(std::abs(s - 1.0) <= 1e-6,
            ErrorCode::kValue, "cost_sensitive_loss: probability row " + std::to_string(i) + " sums to " +
                                   std::to_string(s));
    require(truths[i] >= 0 && truths[i] < nc, ErrorCode::kValue,
            "cost_sensitive_loss: label " + std::to_string(truths[i]) + " out of range");
  }
  const auto rw = costs.row_weights();
  std::vector<T> w(b);
  for (int64_t i = 0; i < b; ++i) w[i] = static_cast<T>(rw[truths[i]]);
  return ops::weighted_nll(probabilities, truths, w);
}

int64_t ConfusionMatrix::total() const {
  int64_t t = 0;
  for (const auto& row : m)
    for (int64_t v : row) t += v;
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  require(other.n() == n(), ErrorCode::kShape, "confusion matrices differ in class count");
  for (int i = 0; i < n(); ++i)
    for (int j = 0; j < n(); ++j) m[i][j] += other.m[i][j];
  return *this;
}

ConfusionMatrix confusion(const std::vector<int>& truths, const std::vector<int>& predictions, int n_classes) {
  require(truths.size() == predictions.size(), ErrorCode::kShape,
          "confusion: " + std::to_string(truths.size()) + " truths vs " + std::to_string(predictions.size()) +
              " predictions");
  require(n_classes >= 1, ErrorCode::kValue, "confusion: n_classes must be positive");
  ConfusionMatrix cm;
  cm.m.assign(n_classes, std::vector<int64_t>(n_classes, 0));
  for (size_t i = 0; i < truths.size(); ++i) {
    require(truths[i] >= 0 && truths[i] < n_classes && predictions[i] >= 0 && predictions[i] < n_classes,
            ErrorCode::kValue, "confusion: label out of range at index " + std::to_string(i));
    ++cm.m[truths[i]][predictions[i]];
  }
  return cm;
}

namespace {

double ratio(double num, double den, bool& undefined) {
  if (den == 0.0) {
    undefined = true;
    return 0.0;
  }
  return num / den;
}

}  // namespace

MetricReport metric_report(const ConfusionMatrix& m, double iba_alpha, Averaging averaging) {
  const int n = m.n();
  require(n >= 1, ErrorCode::kValue, "metric_report: empty confusion matrix");
  for (const auto& row : m.m) {
    require(static_cast<int>(row.size()) == n, ErrorCode::kShape, "metric_report: confusion matrix not square");
    for (int64_t v : row) require(v >= 0, ErrorCode::kValue, "metric_report: negative count");
  }
  const int64_t total = m.total();
  require(total > 0, ErrorCode::kValue, "metric_report: confusion matrix has no samples");

  MetricReport r;
  r.iba_alpha = iba_alpha;
  r.averaging = averaging;
  r.confusion = m;
  r.per_class.resize(n);
  for (int c = 0; c < n; ++c) {
    int64_t tp = m.m[c][c], fn = 0, fp = 0;
    for (int j = 0; j < n; ++j) {
      if (j == c) continue;
      fn += m.m[c][j];
      fp += m.m[j][c];
    }
    const int64_t tn = total - tp - fn - fp;
    auto& k = r.per_class[c];
    k.support = tp + fn;
    k.recall = ratio(tp, tp + fn, r.undefined_ratio);
    k.precision = ratio(tp, tp + fp, r.undefined_ratio);
    k.specificity = ratio(tn, tn + fp, r.undefined_ratio);
    k.f1 = ratio(2.0 * k.precision * k.recall, k.precision + k.recall, r.undefined_ratio);
    const double rs = k.recall * k.specificity;
    k.g_mean = std::sqrt(rs);
    k.iba = (1.0 + iba_alpha * (k.recall - k.specificity)) * rs;
  }
  auto& a = r.average;
  a.support = total;
  for (const auto& k : r.per_class) {
    const double w = averaging == Averaging::kMacro ? 1.0 / n : static_cast<double>(k.support) / total;
    a.precision += w * k.precision;
    a.recall += w * k.recall;
    a.specificity += w * k.specificity;
    a.f1 += w * k.f1;
    a.g_mean += w * k.g_mean;
    a.iba += w * k.iba;
  }
  return r;
}

namespace {

void emit(std::ostringstream& os, const std::string& prefix, const ClassMetrics& k) {
  os << prefix << ".precision=" << k.precision << "\n"
     << prefix << ".recall=" << k.recall << "\n"
     << prefix << ".specificity=" << k.specificity << "\n"
     << prefix << ".f1=" << k.f1 << "\n"
     << prefix << ".g_mean=" << k.g_mean << "\n"
     << prefix << ".iba=" << k.iba << "\n"
     << prefix << ".support=" << k.support << "\n";
}

nlohmann::json to_json_obj(const ClassMetrics& k) {
  return {{"precision", k.precision}, {"recall", k.recall}, {"specificity", k.specificity}, {"f1", k.f1},
          {"g_mean", k.g_mean},       {"iba", k.iba},       {"support", k.support}};
}

}  // namespace

std::string MetricReport::to_text() const {
  std::ostringstream os;
  os.precision(17);
  const std::string avg = averaging == Averaging::kMacro ? "macro" : "weighted";
  os << "averaging=" << avg << "\n"
     << "iba_alpha=" << iba_alpha << "\n"
     << "undefined_ratio=" << (undefined_ratio ? 1 : 0) << "\n";
  emit(os, avg, average);
  for (size_t c = 0; c < per_class.size(); ++c) emit(os, "class" + std::to_string(c), per_class[c]);
  for (int i = 0; i < confusion.n(); ++i) {
    os << "confusion.row" << i << "=";
    for (int j = 0; j < confusion.n(); ++j) os << (j ? "," : "") << confusion.m[i][j];
    os << "\n";
  }
  return os.str();
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["averaging"] = averaging == Averaging::kMacro ? "macro" : "weighted";
  j["iba_alpha"] = iba_alpha;
  j["undefined_ratio"] = undefined_ratio;
  j["average"] = to_json_obj(average);
  j["per_class"] = nlohmann::json::array();
  for (const auto& k : per_class) j["per_class"].push_back(to_json_obj(k));
  j["confusion"] = confusion.m;
  return j.dump(2);
}

template Var<float> cost_sensitive_loss<float>(const Var<float>&, const std::vector<int>&, const CostMatrix&);
template Var<double> cost_sensitive_loss<double>(const Var<double>&, const std::vector<int>&, const CostMatrix&);

}  // namespace stda
