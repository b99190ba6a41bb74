#include "stda/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "stda/attention_fusion.hpp"
#include "stda/behavior_classifier.hpp"
#include "stda/imbalance_objectives.hpp"
#include "stda/saliency_predictor.hpp"
#include "stda/temporal_encoder.hpp"

namespace stda {

using nn::NormMode;
using nn::Rng;

double max_relative_error(const std::function<Var<double>()>& loss, const std::vector<Var<double>*>& leaves,
                          uint64_t seed, int64_t max_entries, double step, int64_t* compared) {
  for (auto* v : leaves) {
    v->set_requires_grad(true);
    v->zero_grad();
  }
  loss().backward();
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (auto* v : leaves) {
    const int64_t n = v->numel();
    std::vector<int64_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n > max_entries) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_entries);
    }
    double diff = 0, na = 0, nn = 0;
    for (int64_t i : idx) {
      const double analytic = v->has_grad() ? v->grad()[i] : 0.0;
      double& x = v->mutable_value()[i];
      const double saved = x;
      double plus, minus;
      {
        NoGradGuard guard;
        x = saved + step;
        plus = loss().value()[0];
        x = saved - step;
        minus = loss().value()[0];
      }
      x = saved;
      const double numeric = (plus - minus) / (2 * step);
      diff += (analytic - numeric) * (analytic - numeric);
      na += analytic * analytic;
      nn += numeric * numeric;
    }
    if (compared != nullptr) *compared += static_cast<int64_t>(idx.size());
    // Unit floor: gradients that are exactly zero (a bias ahead of a
    // batch-statistics normalisation) leave only rounding noise.
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1.0}));
  }
  return worst;
}

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

// sum(out * r) with a fixed random r, so every output element matters.
Var<double> project(const Var<double>& out, const Tensor<double>& r) { return ops::sum_all(ops::mul(out, Var<double>(r))); }

std::vector<Var<double>*> leaves_of(nn::Module<double>& m, std::vector<Var<double>*> extra) {
  auto set = m.parameters();
  for (const auto& p : set.params()) extra.push_back(p.var);
  return extra;
}

struct Instance {
  std::function<Var<double>()> loss;
  std::vector<Var<double>*> leaves;
  std::shared_ptr<void> keep;  // owns the module and inputs
};

template <typename M>
struct Holder {
  M module;
  std::vector<Var<double>> inputs;
  Tensor<double> r;
};

void perturb_params(nn::Module<double>& m, Rng& rng) {
  // Break symmetric initial values (gains at 0, BN at 1/0) so every path carries gradient.
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  auto set = m.parameters();
  for (const auto& p : set.params()) {
    for (auto& v : p.var->mutable_value().storage()) v += u(rng);
  }
}

Instance make_instance(const std::string& op, uint64_t seed) {
  Rng rng(seed);
  Instance inst;
  if (op == "spatial_attention") {
    auto h = std::make_shared<Holder<SpatialAttention<double>>>();
    h->module = SpatialAttention<double>(4, rng);
    perturb_params(h->module, rng);
    h->inputs = {Var<double>(random_tensor({2, 4, 3, 3}, rng))};
    h->r = random_tensor({2, 4, 3, 3}, rng);
    inst.loss = [h] { return project(h->module.forward(h->inputs[0]), h->r); };
    inst.leaves = leaves_of(h->module, {&h->inputs[0]});
    inst.keep = h;
  } else if (op == "conv_gru_step") {
    auto h = std::make_shared<Holder<ConvGru<double>>>();
    h->module = ConvGru<double>(3, 4, 3, rng);
    perturb_params(h->module, rng);
    h->inputs = {Var<double>(random_tensor({2, 3, 4, 4}, rng)), Var<double>(random_tensor({2, 4, 4, 4}, rng))};
    h->r = random_tensor({2, 4, 4, 4}, rng);
    inst.loss = [h] { return project(h->module.step(h->inputs[0], h->inputs[1], NormMode::kTrain).hidden, h->r); };
    inst.leaves = leaves_of(h->module, {&h->inputs[0], &h->inputs[1]});
    inst.keep = h;
  } else if (op == "decode_saliency") {
    auto cfg = SaliencyConfig::tiny();
    cfg.hidden_channels = 4;
    cfg.post_channels = 4;
    auto h = std::make_shared<Holder<SaliencyDecoder<double>>>();
    h->module = SaliencyDecoder<double>(cfg, 5, 3, rng);
    perturb_params(h->module, rng);
    h->inputs = {Var<double>(random_tensor({2, 4, 2, 2}, rng)), Var<double>(random_tensor({2, 5, 4, 4}, rng)),
                 Var<double>(random_tensor({2, 3, 8, 8}, rng))};
    h->r = random_tensor({2, 1, 64, 64}, rng);
    inst.loss = [h] {
      EncoderFeatures<double> f;
      f.skip_s16 = h->inputs[1];
      f.skip_s8 = h->inputs[2];
      return project(h->module.forward(h->inputs[0], f, NormMode::kTrain), h->r);
    };
    inst.leaves = leaves_of(h->module, {&h->inputs[0], &h->inputs[1], &h->inputs[2]});
    inst.keep = h;
  } else if (op == "cross_attention_fuse") {
    auto h = std::make_shared<Holder<CrossAttentionFusion<double>>>();
    h->module = CrossAttentionFusion<double>(CrossAttentionConfig{8, 1}, rng);
    perturb_params(h->module, rng);
    h->inputs = {Var<double>(random_tensor({1, 2, 3, 4, 4}, rng, 0, 1)),
                 Var<double>(random_tensor({1, 2, 3, 4, 4}, rng, 0, 1))};
    h->r = random_tensor({1, 2, 3, 4, 4}, rng);
    inst.loss = [h] { return project(h->module.forward(h->inputs[0], h->inputs[1]), h->r); };
    inst.leaves = leaves_of(h->module, {&h->inputs[0], &h->inputs[1]});
    inst.keep = h;
  } else if (op == "temporal_encode") {
    auto h = std::make_shared<Holder<TemporalEncoder<double>>>();
    h->module = TemporalEncoder<double>(TemporalConfig{3, 4, false}, rng);
    perturb_params(h->module, rng);
    h->inputs = {Var<double>(random_tensor({2, 3, 3, 4, 4}, rng, 0, 1))};
    h->r = random_tensor({2, 3, 4, 4}, rng);
    inst.loss = [h] { return project(h->module.forward(h->inputs[0], NormMode::kTrain), h->r); };
    inst.leaves = leaves_of(h->module, {&h->inputs[0]});
    inst.keep = h;
  } else if (op == "classify") {
    auto h = std::make_shared<Holder<BehaviorClassifier<double>>>();
    h->module = BehaviorClassifier<double>(ClassifierConfig::tiny(), rng);
    perturb_params(h->module, rng);
    h->inputs = {Var<double>(random_tensor({3, 3, 16, 16}, rng, 0, 1))};
    h->r = random_tensor({3, 3}, rng);
    inst.loss = [h] { return project(h->module.forward(h->inputs[0], NormMode::kTrain), h->r); };
    inst.leaves = leaves_of(h->module, {&h->inputs[0]});
    inst.keep = h;
  } else if (op == "cost_sensitive_loss") {
    struct State {
      Var<double> logits;
      std::vector<int> labels;
      CostMatrix costs;
    };
    auto s = std::make_shared<State>();
    s->logits = Var<double>(random_tensor({5, 3}, rng, -2, 2));
    std::uniform_int_distribution<int> lab(0, 2);
    std::uniform_real_distribution<double> cost(0.5, 6.0);
    for (int i = 0; i < 5; ++i) s->labels.push_back(lab(rng));
    s->costs = CostMatrix::uniform(3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (i != j) s->costs.c[i][j] = cost(rng);
    inst.loss = [s] { return cost_sensitive_loss(ops::softmax_lastdim(s->logits), s->labels, s->costs); };
    inst.leaves = {&s->logits};
    inst.keep = s;
  } else {
    fail(ErrorCode::kNotFound, "no gradient check for op '" + op + "'");
  }
  return inst;
}

}  // namespace

const std::vector<std::string>& gradient_suite_ops() {
  static const std::vector<std::string> ops{"spatial_attention", "conv_gru_step",   "decode_saliency",
                                            "cross_attention_fuse", "temporal_encode", "classify",
                                            "cost_sensitive_loss"};
  return ops;
}

GradCheckResult check_gradients(const std::string& op, int instances, uint64_t seed, double tolerance) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckResult r;
  r.op = op;
  r.instances = instances;
  r.tolerance = tolerance;
  for (int i = 0; i < instances; ++i) {
    auto inst = make_instance(op, seed + static_cast<uint64_t>(i));
    r.max_rel_error = std::max(r.max_rel_error, max_relative_error(inst.loss, inst.leaves, seed + 7919 * i, 32, 1e-6,
                                                                   &r.entries));
  }
  r.passed = r.max_rel_error < tolerance;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<GradCheckResult> run_gradient_suite(int instances, uint64_t seed, double tolerance) {
  std::vector<GradCheckResult> out;
  for (const auto& op : gradient_suite_ops()) out.push_back(check_gradients(op, instances, seed, tolerance));
  return out;
}

}  // namespace stda
