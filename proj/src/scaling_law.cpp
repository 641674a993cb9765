#include "ovl/scaling_law.hpp"

#include <cmath>
#include <limits>
#include <set>

#include "json.hpp"

namespace ovl::law {

using nlohmann::json;

LawFit fit_log_linear(const std::vector<std::pair<double, double>>& points,
                      const std::string& variable) {
  std::set<double> distinct;
  for (const auto& [x, r] : points) {
    if (!(x > 0))
      throw Error(ErrorKind::invalid_argument, "fit requires x > 0");
    distinct.insert(x);
  }
  if (distinct.size() < 2)
    throw Error(ErrorKind::invalid_argument,
                "fit requires at least 2 points with distinct x");

  const double n = double(points.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [x, r] : points) {
    const double lx = std::log(x);
    sx += lx;
    sy += r;
    sxx += lx * lx;
    sxy += lx * r;
  }
  const double denom = n * sxx - sx * sx;
  const double a = (n * sxy - sx * sy) / denom;
  const double b = (sy - a * sx) / n;

  double ss_res = 0, ss_tot = 0;
  const double mean_y = sy / n;
  for (const auto& [x, r] : points) {
    const double fit_y = a * std::log(x) + b;
    ss_res += (r - fit_y) * (r - fit_y);
    ss_tot += (r - mean_y) * (r - mean_y);
  }

  LawFit fit;
  fit.variable = variable;
  fit.coef = a;
  fit.n_points = int(points.size());
  fit.flagged = !(a > 0);
  fit.x_c = a != 0 ? std::exp(-b / a) : std::numeric_limits<double>::quiet_NaN();
  fit.r_squared = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return fit;
}

double predict_raw(const LawFit& fit, double x) {
  if (fit.flagged)
    throw Error(ErrorKind::flagged_fit,
                "fit is flagged non-physical (coef <= 0); cannot predict");
  if (!(x > 0))
    throw Error(ErrorKind::invalid_argument, "predict requires x > 0");
  return fit.coef * std::log(x / fit.x_c);
}

double predict(const LawFit& fit, double x) {
  return std::max(0.0, predict_raw(fit, x));
}

double relative_prediction_error(double predicted, double actual) {
  if (actual == 0)
    throw Error(ErrorKind::invalid_argument,
                "relative prediction error undefined for actual = 0");
  return std::abs(predicted - actual) / std::abs(actual);
}

std::string fit_to_json(const LawFit& fit) {
  json j;
  j["variable"] = fit.variable;
  j["coef"] = fit.coef;
  if (std::isfinite(fit.x_c))
    j["x_c"] = fit.x_c;
  else
    j["x_c"] = nullptr;
  j["r2"] = fit.r_squared;
  j["n_points"] = fit.n_points;
  j["flagged"] = fit.flagged;
  return j.dump();
}

LawFit fit_from_json(const std::string& text) {
  LawFit fit;
  try {
    const json j = json::parse(text);
    fit.variable = j.at("variable").get<std::string>();
    fit.coef = j.at("coef").get<double>();
    fit.x_c = j.at("x_c").is_null()
                  ? std::numeric_limits<double>::quiet_NaN()
                  : j.at("x_c").get<double>();
    fit.r_squared = j.at("r2").get<double>();
    fit.n_points = j.at("n_points").get<int>();
    fit.flagged = j.at("flagged").get<bool>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::malformed, std::string("bad fit json: ") + e.what());
  }
  return fit;
}

}  // namespace ovl::law
