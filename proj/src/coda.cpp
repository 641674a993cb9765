#include "ovl/coda.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "json.hpp"

#include "ovl/probe.hpp"

namespace ovl::coda {

bool PlausibleSet::contains(Token t) const {
  return std::binary_search(members.begin(), members.end(), t);
}

PlausibleSet top_set(const std::vector<double>& dist,
                     double plausibility_alpha) {
  if (dist.empty())
    throw Error(ErrorKind::invalid_argument, "empty distribution");
  if (!(plausibility_alpha > 0) || plausibility_alpha > 1)
    throw Error(ErrorKind::invalid_argument,
                "plausibility_alpha must be in (0, 1]");
  double upsilon = dist[0];
  for (double p : dist) upsilon = std::max(upsilon, p);
  PlausibleSet s;
  s.threshold = plausibility_alpha * upsilon;
  for (std::size_t t = 0; t < dist.size(); ++t)
    if (dist[t] >= s.threshold) s.members.push_back(Token(t));
  return s;
}

double r_pmi(double p_x, double p_xp) {
  if (!(p_x > 0) || !(p_xp > 0))
    throw Error(ErrorKind::invalid_argument,
                "R-PMI requires positive probabilities");
  return std::log(p_x / p_xp);
}

double rpmi_sum(const std::vector<double>& dist_x,
                const std::vector<double>& dist_xp,
                double plausibility_alpha) {
  const PlausibleSet tx = top_set(dist_x, plausibility_alpha);
  const PlausibleSet txp = top_set(dist_xp, plausibility_alpha);
  double sum = 0;
  for (Token t : tx.members) {
    if (!txp.contains(t)) continue;
    sum += std::min(r_pmi(dist_x[std::size_t(t)], dist_xp[std::size_t(t)]), 0.0);
  }
  return sum;
}

std::vector<Token> escape_set(const PlausibleSet& top_x,
                              const PlausibleSet& top_xp) {
  std::vector<Token> out;
  for (Token t : top_x.members)
    if (!top_xp.contains(t)) out.push_back(t);
  return out;
}

double erm(const std::vector<double>& dist_x,
           const std::vector<double>& dist_xp,
           const std::vector<Token>& escape,
           const std::vector<Token>& baseline_set) {
  if (escape.empty() || baseline_set.empty()) return 0.0;
  double min_bias = std::numeric_limits<double>::infinity();
  for (Token t : baseline_set)
    min_bias = std::min(min_bias, std::log(dist_xp[std::size_t(t)]));
  double sum = 0;
  for (Token t : escape)
    sum += std::log(dist_x[std::size_t(t)]) - min_bias;
  return sum;
}

namespace {

struct StepSets {
  PlausibleSet top_x, top_xp;
  std::vector<Token> intersection, escape, neg_set;
};

StepSets make_sets(const std::vector<double>& dist_x,
                   const std::vector<double>& dist_xp,
                   double plausibility_alpha) {
  StepSets s;
  s.top_x = top_set(dist_x, plausibility_alpha);
  s.top_xp = top_set(dist_xp, plausibility_alpha);
  for (Token t : s.top_x.members) {
    if (s.top_xp.contains(t)) {
      s.intersection.push_back(t);
      if (r_pmi(dist_x[std::size_t(t)], dist_xp[std::size_t(t)]) < 0)
        s.neg_set.push_back(t);
    } else {
      s.escape.push_back(t);
    }
  }
  return s;
}

}  // namespace

IndicatorComponents indicator(const std::vector<double>& dist_x,
                              const std::vector<double>& dist_xp,
                              double plausibility_alpha) {
  const StepSets s = make_sets(dist_x, dist_xp, plausibility_alpha);
  IndicatorComponents c;
  for (Token t : s.intersection)
    c.rpmi_sum +=
        std::min(r_pmi(dist_x[std::size_t(t)], dist_xp[std::size_t(t)]), 0.0);
  // Baseline falls back to the full intersection when no token has a
  // negative R-PMI; with an empty intersection the reward is zero.
  const std::vector<Token>& baseline =
      s.neg_set.empty() ? s.intersection : s.neg_set;
  c.erm = erm(dist_x, dist_xp, s.escape, baseline);
  c.value = c.rpmi_sum + c.erm;
  c.escape_size = int(s.escape.size());
  c.intersection_size = int(s.intersection.size());
  c.neg_set_size = int(s.neg_set.size());
  return c;
}

OvershadowReport detect(const provider::NextTokenProvider& p,
                        std::span<const Token> prompt,
                        std::vector<int> candidate_positions,
                        double plausibility_alpha) {
  if (prompt.size() < 2)
    throw Error(ErrorKind::invalid_argument,
                "detection needs a prompt of length >= 2");
  if (candidate_positions.empty()) {
    candidate_positions.resize(prompt.size());
    for (std::size_t i = 0; i < prompt.size(); ++i)
      candidate_positions[i] = int(i);
  }
  for (int c : candidate_positions)
    if (c < 0 || c >= int(prompt.size()))
      throw Error(ErrorKind::invalid_argument,
                  "candidate position outside prompt");

  const std::vector<double> dist_x = p.next_token_distribution(prompt);
  OvershadowReport report;
  double best_value = 0;
  for (int c : candidate_positions) {
    TokenSeq masked(prompt.begin(), prompt.end());
    masked.erase(masked.begin() + c);
    const std::vector<double> dist_xp = p.next_token_distribution(masked);
    const IndicatorComponents ic = indicator(dist_x, dist_xp, plausibility_alpha);
    CandidateReport cr;
    cr.position = c;
    cr.rpmi_sum = ic.rpmi_sum;
    cr.erm = ic.erm;
    cr.indicator = ic.value;
    cr.escape_size = ic.escape_size;
    cr.flagged = ic.value > 0;
    if (cr.flagged) {
      report.flagged_positions.push_back(c);
      // primary = argmax indicator among flagged, first position on ties
      if (!report.primary || cr.indicator > best_value) {
        report.primary = c;
        best_value = cr.indicator;
      }
    }
    report.candidates.push_back(cr);
  }
  return report;
}

namespace {

Token argmax_prob(const std::vector<double>& dist,
                  const std::vector<Token>& members) {
  Token best = members.front();
  for (Token t : members)
    if (dist[std::size_t(t)] > dist[std::size_t(best)]) best = t;
  return best;
}

Token coda_step(const std::vector<double>& dist_x,
                const std::vector<double>& dist_xp, double plausibility_alpha,
                bool use_adjusted_scores) {
  const StepSets s = make_sets(dist_x, dist_xp, plausibility_alpha);
  if (!use_adjusted_scores) return argmax_prob(dist_x, s.top_x.members);

  const std::vector<Token>& baseline =
      s.neg_set.empty() ? s.intersection : s.neg_set;
  if (baseline.empty()) return argmax_prob(dist_x, s.top_x.members);

  double min_bias = std::numeric_limits<double>::infinity();
  for (Token t : baseline)
    min_bias = std::min(min_bias, std::log(dist_xp[std::size_t(t)]));

  bool any_signal = !s.escape.empty();
  Token best = -1;
  double best_score = 0;
  for (Token t : s.top_x.members) {
    const double lx = std::log(dist_x[std::size_t(t)]);
    const double score = s.top_xp.contains(t)
                             ? lx - std::log(dist_xp[std::size_t(t)])
                             : lx - min_bias;
    if (s.top_xp.contains(t) && score != 0.0) any_signal = true;
    if (best < 0 || score > best_score) {
      best = t;
      best_score = score;
    }
  }
  if (!any_signal) return argmax_prob(dist_x, s.top_x.members);
  return best;
}

}  // namespace

TokenSeq coda_decode(const provider::NextTokenProvider& p,
                     std::span<const Token> prompt,
                     std::span<const Token> masked_prompt, int max_new,
                     double plausibility_alpha, bool use_adjusted_scores) {
  if (prompt.empty() || masked_prompt.empty())
    throw Error(ErrorKind::invalid_argument, "prompts must be non-empty");
  if (max_new < 1)
    throw Error(ErrorKind::invalid_argument, "max_new must be >= 1");
  TokenSeq x(prompt.begin(), prompt.end());
  TokenSeq xp(masked_prompt.begin(), masked_prompt.end());
  TokenSeq out;
  for (int i = 0; i < max_new; ++i) {
    const std::vector<double> dist_x = p.next_token_distribution(x);
    const std::vector<double> dist_xp = p.next_token_distribution(xp);
    const Token t =
        coda_step(dist_x, dist_xp, plausibility_alpha, use_adjusted_scores);
    out.push_back(t);
    x.push_back(t);
    xp.push_back(t);
  }
  return out;
}

CodaEvalResult coda_eval(const provider::NextTokenProvider& p,
                         const std::vector<corpus::Group>& groups,
                         double plausibility_alpha) {
  if (groups.empty())
    throw Error(ErrorKind::invalid_argument, "no groups to evaluate");

  struct Tally {
    int n = 0, em_g = 0, em_c = 0, flagged = 0;
    double indicator_sum = 0;
  } dom, sup;

  for (const auto& g : groups) {
    for (const auto& s : g.statements) {
      const auto gold = s.answer();
      const TokenSeq greedy =
          probe::greedy_decode(p, s.prompt(), int(gold.size()));
      const OvershadowReport rep =
          detect(p, s.prompt(), {}, plausibility_alpha);
      TokenSeq coda_out;
      if (rep.primary) {
        TokenSeq masked(s.prompt().begin(), s.prompt().end());
        masked.erase(masked.begin() + *rep.primary);
        coda_out = coda_decode(p, s.prompt(), masked, int(gold.size()),
                               plausibility_alpha);
      } else {
        coda_out = greedy;  // no flag: leave the output untouched
      }
      double best_ind = -std::numeric_limits<double>::infinity();
      for (const auto& c : rep.candidates)
        best_ind = std::max(best_ind, c.indicator);

      Tally& t = s.role == corpus::Role::dominant ? dom : sup;
      ++t.n;
      t.em_g += probe::exact_match(greedy, gold);
      t.em_c += probe::exact_match(coda_out, gold);
      t.flagged += rep.primary.has_value();
      t.indicator_sum += best_ind;
    }
  }

  auto stats = [](const Tally& t) {
    ClassStats s;
    s.n = t.n;
    if (t.n > 0) {
      s.em_greedy = 100.0 * t.em_g / t.n;
      s.em_coda = 100.0 * t.em_c / t.n;
      s.flag_rate = double(t.flagged) / t.n;
      s.mean_indicator = t.indicator_sum / t.n;
    }
    return s;
  };
  return CodaEvalResult{stats(dom), stats(sup)};
}

std::string eval_csv(const CodaEvalResult& r) {
  std::string out = "probe_class,em_greedy,em_coda,flag_rate,mean_indicator\n";
  char buf[160];
  auto line = [&](const char* name, const ClassStats& s) {
    std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g,%.10g,%.10g\n", name,
                  s.em_greedy, s.em_coda, s.flag_rate, s.mean_indicator);
    out += buf;
  };
  line("dominant", r.dominant);
  line("suppressed", r.suppressed);
  return out;
}

std::string report_to_json(const OvershadowReport& r) {
  nlohmann::json j;
  j["candidates"] = nlohmann::json::array();
  for (const auto& c : r.candidates) {
    j["candidates"].push_back({{"position", c.position},
                               {"rpmi_sum", c.rpmi_sum},
                               {"erm", c.erm},
                               {"indicator", c.indicator},
                               {"escape_size", c.escape_size},
                               {"flagged", c.flagged}});
  }
  j["flagged_positions"] = r.flagged_positions;
  if (r.primary)
    j["primary"] = *r.primary;
  else
    j["primary"] = nullptr;
  return j.dump();
}

}  // namespace ovl::coda
