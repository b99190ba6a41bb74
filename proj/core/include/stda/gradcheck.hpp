#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stda/autograd.hpp"

namespace stda {

struct GradCheckResult {
  std::string op;
  int instances = 0;
  int64_t entries = 0;  // coordinates compared
  double max_rel_error = 0;
  double tolerance = 0;
  double seconds = 0;
  bool passed = false;
};

/// Compares reverse-mode gradients of loss() with central differences over
/// the given leaves. Leaves larger than max_entries are sampled. Returns the
/// largest per-leaf ||analytic - numeric|| / max(||analytic||, ||numeric||, 1).
double max_relative_error(const std::function<Var<double>()>& loss, const std::vector<Var<double>*>& leaves,
                          uint64_t seed, int64_t max_entries = 32, double step = 1e-6, int64_t* compared = nullptr);

/// Names accepted by check_gradients.
const std::vector<std::string>& gradient_suite_ops();

/// Runs `instances` randomised 64-bit checks of one op.
GradCheckResult check_gradients(const std::string& op, int instances = 10, uint64_t seed = 1, double tolerance = 1e-5);

std::vector<GradCheckResult> run_gradient_suite(int instances = 10, uint64_t seed = 1, double tolerance = 1e-5);

}  // namespace stda
