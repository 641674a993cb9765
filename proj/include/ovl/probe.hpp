#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ovl/common.hpp"
#include "ovl/corpus.hpp"
#include "ovl/provider.hpp"

namespace ovl::probe {

// Argmax decoding, ties broken by the lowest token id.
TokenSeq greedy_decode(const provider::NextTokenProvider& p,
                       std::span<const Token> prompt, int max_new);

bool exact_match(std::span<const Token> pred, std::span<const Token> gold);

using DecodeFn = std::function<TokenSeq(const provider::NextTokenProvider&,
                                        std::span<const Token>, int)>;

struct RateReport {
  double rr = 0;         // dominant probes answered with Y_a
  double hr = 0;         // suppressed probes answered with Y_a
  double r = 0;          // hr / rr
  double other_err = 0;  // suppressed probes answering neither Y_a nor Y_b
  int n_dom = 0;
  int n_sup = 0;
};

// Raw counts; pooled across groups before any ratio is taken.
struct ProbeCounts {
  int dom_total = 0;
  int dom_correct = 0;   // decoded Y_a on a dominant prompt
  int sup_total = 0;
  int sup_halluc = 0;    // decoded Y_a on a suppressed prompt
  int sup_correct = 0;   // decoded Y_b on a suppressed prompt

  ProbeCounts& operator+=(const ProbeCounts& o);
};

ProbeCounts count_outcomes(const provider::NextTokenProvider& p,
                           const corpus::Group& g, const DecodeFn& decode);

RateReport rates_from_counts(const ProbeCounts& c);  // throws on RR = 0

RateReport measure_rates(const provider::NextTokenProvider& p,
                         const corpus::Group& g,
                         const DecodeFn& decode = greedy_decode);

struct SweepRow {
  double p = 0;
  double l = 0;
  std::int64_t s = 0;  // model parameter count
  RateReport rates;
};

struct ProviderEntry {
  const provider::NextTokenProvider* provider = nullptr;
  std::int64_t s = 0;
};

// One row per ((P, L) aggregate within a corpus) x provider; groups sharing
// a schedule point pool raw counts before the ratio.
std::vector<SweepRow> sweep_rates(const std::vector<ProviderEntry>& providers,
                                  const std::vector<const corpus::Corpus*>& corpora,
                                  const DecodeFn& decode = greedy_decode);

// Header: P,L,S,RR,HR,R,other_err,n_dom,n_sup
std::string rates_csv(const std::vector<SweepRow>& rows);

}  // namespace ovl::probe
