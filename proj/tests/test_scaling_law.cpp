#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "ovl/common.hpp"
#include "ovl/scaling_law.hpp"

using namespace ovl;
using namespace ovl::law;

TEST_CASE("exact line recovery: r = 0.3 ln(x/4)") {
  const std::vector<std::pair<double, double>> pts{
      {4.0, 0.0}, {8.0, 0.3 * std::log(2.0)}, {16.0, 0.3 * std::log(4.0)}};
  const LawFit fit = fit_log_linear(pts, "P");
  CHECK(std::abs(fit.coef - 0.3) < 1e-9);
  CHECK(std::abs(fit.x_c - 4.0) < 1e-9);
  CHECK(std::abs(fit.r_squared - 1.0) < 1e-9);
  CHECK(!fit.flagged);
}

TEST_CASE("all-equal rates flag a degenerate slope") {
  const std::vector<std::pair<double, double>> pts{{2, 0.5}, {4, 0.5}, {8, 0.5}};
  const LawFit fit = fit_log_linear(pts);
  CHECK(fit.coef == doctest::Approx(0.0));
  CHECK(fit.flagged);
  CHECK(std::isnan(fit.x_c));
  CHECK_THROWS_AS((void)predict(fit, 3.0), Error);
}

TEST_CASE("fewer than two distinct x is an error") {
  CHECK_THROWS_AS((void)fit_log_linear({{4.0, 0.1}}), Error);
  CHECK_THROWS_AS((void)fit_log_linear({{4.0, 0.1}, {4.0, 0.2}}), Error);
  CHECK_THROWS_AS((void)fit_log_linear({{-1.0, 0.1}, {4.0, 0.2}}), Error);
}

TEST_CASE("predict: at x_c, beyond, and clamped below") {
  LawFit fit;
  fit.coef = 0.3;
  fit.x_c = 4.0;
  fit.flagged = false;
  CHECK(predict(fit, 4.0) == doctest::Approx(0.0));
  CHECK(predict(fit, 8.0) == doctest::Approx(0.3 * std::log(2.0)).epsilon(1e-12));
  CHECK(predict_raw(fit, 2.0) < 0.0);
  CHECK(predict(fit, 2.0) == 0.0);  // clamped
}

TEST_CASE("relative prediction error") {
  CHECK(relative_prediction_error(0.55, 0.5) == doctest::Approx(0.1));
  CHECK(relative_prediction_error(0.5, 0.5) == doctest::Approx(0.0));
  CHECK_THROWS_AS((void)relative_prediction_error(0.1, 0.0), Error);
}

TEST_CASE("residuals orthogonal to [1, ln x] (normal equations)") {
  Rng rng(5);
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < 12; ++i) {
    const double x = 2.0 + i;
    pts.push_back({x, 0.2 * std::log(x) + 0.05 + 0.01 * rng.next_gaussian()});
  }
  const LawFit fit = fit_log_linear(pts, "L");
  double dot1 = 0, dotlx = 0;
  for (const auto& [x, r] : pts) {
    const double resid = r - fit.coef * std::log(x / fit.x_c);
    dot1 += resid;
    dotlx += resid * std::log(x);
  }
  CHECK(std::abs(dot1) < 1e-9);
  CHECK(std::abs(dotlx) < 1e-9);
}

TEST_CASE("fitted values are reproduced by predict on the fitted points") {
  const std::vector<std::pair<double, double>> pts{
      {2, 0.10}, {5, 0.21}, {10, 0.33}, {25, 0.40}};
  const LawFit fit = fit_log_linear(pts, "P");
  const double b = -fit.coef * std::log(fit.x_c);
  for (const auto& [x, r] : pts) {
    const double want = fit.coef * std::log(x) + b;
    CHECK(predict_raw(fit, x) == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("fit is invariant to point order and k-fold duplication") {
  std::vector<std::pair<double, double>> pts{
      {2, 0.12}, {5, 0.2}, {10, 0.31}, {25, 0.44}};
  const LawFit base = fit_log_linear(pts, "P");

  std::vector<std::pair<double, double>> shuffled{pts[2], pts[0], pts[3], pts[1]};
  const LawFit same = fit_log_linear(shuffled, "P");
  CHECK(same.coef == doctest::Approx(base.coef).epsilon(1e-12));
  CHECK(same.x_c == doctest::Approx(base.x_c).epsilon(1e-12));

  std::vector<std::pair<double, double>> tripled;
  for (int k = 0; k < 3; ++k)
    tripled.insert(tripled.end(), pts.begin(), pts.end());
  const LawFit dup = fit_log_linear(tripled, "P");
  CHECK(dup.coef == doctest::Approx(base.coef).epsilon(1e-12));
  CHECK(dup.x_c == doctest::Approx(base.x_c).epsilon(1e-12));
  CHECK(dup.n_points == 12);
}

TEST_CASE("json round trip") {
  const std::vector<std::pair<double, double>> pts{{2, 0.1}, {8, 0.4}};
  const LawFit fit = fit_log_linear(pts, "S");
  const LawFit back = fit_from_json(fit_to_json(fit));
  CHECK(back.variable == "S");
  CHECK(back.coef == doctest::Approx(fit.coef).epsilon(1e-15));
  CHECK(back.x_c == doctest::Approx(fit.x_c).epsilon(1e-15));
  CHECK(back.n_points == 2);
  CHECK(back.flagged == fit.flagged);

  const LawFit flat = fit_log_linear({{2, 0.5}, {4, 0.5}});
  const LawFit flat_back = fit_from_json(fit_to_json(flat));
  CHECK(flat_back.flagged);
  CHECK(std::isnan(flat_back.x_c));

  CHECK_THROWS_AS((void)fit_from_json("{not json"), Error);
}
