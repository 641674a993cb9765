#include "ovl/probe.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

namespace ovl::probe {

TokenSeq greedy_decode(const provider::NextTokenProvider& p,
                       std::span<const Token> prompt, int max_new) {
  if (prompt.empty())
    throw Error(ErrorKind::invalid_argument, "prompt must be non-empty");
  if (max_new < 1)
    throw Error(ErrorKind::invalid_argument, "max_new must be >= 1");
  TokenSeq prefix(prompt.begin(), prompt.end());
  TokenSeq out;
  for (int i = 0; i < max_new; ++i) {
    const std::vector<double> dist = p.next_token_distribution(prefix);
    Token best = 0;
    for (std::size_t t = 1; t < dist.size(); ++t)
      if (dist[t] > dist[std::size_t(best)]) best = Token(t);
    out.push_back(best);
    prefix.push_back(best);
  }
  return out;
}

bool exact_match(std::span<const Token> pred, std::span<const Token> gold) {
  return pred.size() == gold.size() &&
         std::equal(pred.begin(), pred.end(), gold.begin());
}

ProbeCounts& ProbeCounts::operator+=(const ProbeCounts& o) {
  dom_total += o.dom_total;
  dom_correct += o.dom_correct;
  sup_total += o.sup_total;
  sup_halluc += o.sup_halluc;
  sup_correct += o.sup_correct;
  return *this;
}

ProbeCounts count_outcomes(const provider::NextTokenProvider& p,
                           const corpus::Group& g, const DecodeFn& decode) {
  if (g.m() < 1 || g.n() < 1)
    throw Error(ErrorKind::invalid_argument,
                "group needs at least one dominant and one suppressed probe");
  const TokenSeq ya = g.dominant_answer();
  const TokenSeq yb = g.suppressed_answer();
  ProbeCounts c;
  for (const auto& s : g.statements) {
    const TokenSeq pred = decode(p, s.prompt(), int(s.answer().size()));
    if (s.role == corpus::Role::dominant) {
      ++c.dom_total;
      c.dom_correct += exact_match(pred, ya);
    } else {
      ++c.sup_total;
      c.sup_halluc += exact_match(pred, ya);
      c.sup_correct += exact_match(pred, yb);
    }
  }
  return c;
}

RateReport rates_from_counts(const ProbeCounts& c) {
  RateReport r;
  r.n_dom = c.dom_total;
  r.n_sup = c.sup_total;
  r.rr = c.dom_total > 0 ? double(c.dom_correct) / c.dom_total : 0.0;
  r.hr = c.sup_total > 0 ? double(c.sup_halluc) / c.sup_total : 0.0;
  r.other_err =
      c.sup_total > 0
          ? double(c.sup_total - c.sup_halluc - c.sup_correct) / c.sup_total
          : 0.0;
  if (r.rr == 0.0)
    throw UndefinedRatioError(r.rr, r.hr,
                              "R = HR/RR undefined: RR is zero (HR = " +
                                  std::to_string(r.hr) + ")");
  r.r = r.hr / r.rr;
  return r;
}

RateReport measure_rates(const provider::NextTokenProvider& p,
                         const corpus::Group& g, const DecodeFn& decode) {
  return rates_from_counts(count_outcomes(p, g, decode));
}

std::vector<SweepRow> sweep_rates(
    const std::vector<ProviderEntry>& providers,
    const std::vector<const corpus::Corpus*>& corpora, const DecodeFn& decode) {
  std::vector<SweepRow> rows;
  for (const auto& entry : providers) {
    for (const corpus::Corpus* corpus : corpora) {
      if (entry.provider->caps().vocab_size < corpus->vocab_size)
        throw Error(ErrorKind::invalid_argument,
                    "provider vocabulary smaller than corpus vocabulary");
      // Pool counts over groups that share a schedule point.
      std::map<std::pair<double, double>, ProbeCounts> pooled;
      for (const auto& g : corpus->groups) {
        const double p = corpus::relative_popularity(g);
        const double l = corpus::relative_length(g);
        pooled[{p, l}] += count_outcomes(*entry.provider, g, decode);
      }
      for (const auto& [key, counts] : pooled) {
        SweepRow row;
        row.p = key.first;
        row.l = key.second;
        row.s = entry.s;
        row.rates = rates_from_counts(counts);
        rows.push_back(row);
      }
    }
  }
  return rows;
}

std::string rates_csv(const std::vector<SweepRow>& rows) {
  std::string out = "P,L,S,RR,HR,R,other_err,n_dom,n_sup\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%lld,%.10g,%.10g,%.10g,%.10g,%d,%d\n",
                  r.p, r.l, (long long)r.s, r.rates.rr, r.rates.hr, r.rates.r,
                  r.rates.other_err, r.rates.n_dom, r.rates.n_sup);
    out += buf;
  }
  return out;
}

}  // namespace ovl::probe
