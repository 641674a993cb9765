#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ovl/common.hpp"
#include "ovl/corpus.hpp"
#include "ovl/provider.hpp"

namespace ovl::coda {

// Tokens whose probability reaches plausibility_alpha times the maximum of
// the distribution. The argmax always qualifies, so the set is non-empty.
struct PlausibleSet {
  std::vector<Token> members;  // ascending token ids
  double threshold = 0;

  bool contains(Token t) const;
};

PlausibleSet top_set(const std::vector<double>& dist, double plausibility_alpha);

// ln(pX / pXp); both probabilities must be positive.
double r_pmi(double p_x, double p_xp);

// Sum of min(R-PMI, 0) over the intersection of the two plausible sets.
double rpmi_sum(const std::vector<double>& dist_x,
                const std::vector<double>& dist_xp, double plausibility_alpha);

// Members of top_x that are not plausible under the masked prompt.
std::vector<Token> escape_set(const PlausibleSet& top_x,
                              const PlausibleSet& top_xp);

// Escaping reward: sum over the escape set of ln p(y|X) minus the minimum
// ln p(y|X') over baseline_set. Zero when either set is empty; callers pass
// the negative-R-PMI set, falling back to the plausible-set intersection
// when it is empty.
double erm(const std::vector<double>& dist_x,
           const std::vector<double>& dist_xp,
           const std::vector<Token>& escape, const std::vector<Token>& baseline_set);

struct IndicatorComponents {
  double rpmi_sum = 0;
  double erm = 0;
  double value = 0;  // rpmi_sum + erm
  int escape_size = 0;
  int intersection_size = 0;
  int neg_set_size = 0;
};

IndicatorComponents indicator(const std::vector<double>& dist_x,
                              const std::vector<double>& dist_xp,
                              double plausibility_alpha);

struct CandidateReport {
  int position = 0;
  double rpmi_sum = 0;
  double erm = 0;
  double indicator = 0;
  int escape_size = 0;
  bool flagged = false;  // indicator strictly > 0
};

struct OvershadowReport {
  std::vector<CandidateReport> candidates;
  std::vector<int> flagged_positions;
  std::optional<int> primary;  // argmax indicator among flagged
};

// Masks one prompt position at a time (by deletion) and scores the shift of
// the next-token distribution. Empty candidate_positions means every prompt
// position.
OvershadowReport detect(const provider::NextTokenProvider& p,
                        std::span<const Token> prompt,
                        std::vector<int> candidate_positions,
                        double plausibility_alpha);

// Contrastive decoding against the masked prompt: intersection tokens score
// ln p(y|X) - ln p(y|X'), escape tokens score ln p(y|X) minus the minimum
// masked-prompt bias, and the argmax over the plausible set of X is emitted
// (ties to the lowest id). When the adjusted scores carry no signal (no
// escapes, all intersection scores zero) the step falls back to greedy.
// use_adjusted_scores=false reproduces the literal argmax of ln p(y|X).
TokenSeq coda_decode(const provider::NextTokenProvider& p,
                     std::span<const Token> prompt,
                     std::span<const Token> masked_prompt, int max_new,
                     double plausibility_alpha,
                     bool use_adjusted_scores = true);

struct ClassStats {
  double em_greedy = 0;      // percent
  double em_coda = 0;        // percent
  double flag_rate = 0;      // fraction of probes with a flagged position
  double mean_indicator = 0; // mean over probes of the best candidate value
  int n = 0;
};

struct CodaEvalResult {
  ClassStats dominant;
  ClassStats suppressed;
};

// Greedy vs CoDA exact match per probe class. Probes with no flagged
// position keep their greedy output.
CodaEvalResult coda_eval(const provider::NextTokenProvider& p,
                         const std::vector<corpus::Group>& groups,
                         double plausibility_alpha);

// Header: probe_class,em_greedy,em_coda,flag_rate,mean_indicator
std::string eval_csv(const CodaEvalResult& r);

std::string report_to_json(const OvershadowReport& r);

}  // namespace ovl::coda
