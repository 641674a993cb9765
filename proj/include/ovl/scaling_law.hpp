#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ovl/common.hpp"

namespace ovl::law {

// One fitted log-linear law R(x) = coef * ln(x / x_c). flagged marks a
// non-physical fit (coef <= 0; the law expects R to increase) for which x_c
// may be undefined and predict() refuses to run.
struct LawFit {
  std::string variable;  // "P", "L" or "S"
  double coef = 0;
  double x_c = 0;
  double r_squared = 0;
  int n_points = 0;
  bool flagged = false;
};

// Ordinary least squares of r = a ln(x) + b over the points; coef = a,
// x_c = exp(-b/a). Needs >= 2 distinct x, all x > 0.
LawFit fit_log_linear(const std::vector<std::pair<double, double>>& points,
                      const std::string& variable = "");

double predict_raw(const LawFit& fit, double x);  // may be negative
double predict(const LawFit& fit, double x);      // clamped below at 0

// |predicted - actual| / |actual|; actual must be nonzero.
double relative_prediction_error(double predicted, double actual);

std::string fit_to_json(const LawFit& fit);
LawFit fit_from_json(const std::string& text);

}  // namespace ovl::law
