#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>

#include "ovl/coda.hpp"
#include "ovl/corpus.hpp"
#include "ovl/probe.hpp"
#include "ovl/provider.hpp"
#include "support/coda_oracle.hpp"

using namespace ovl;
using namespace ovl::coda;

namespace {

class TableProvider final : public provider::NextTokenProvider {
 public:
  explicit TableProvider(int vocab) : vocab_(vocab) {}
  void set(TokenSeq prefix, std::vector<double> dist) {
    table_[std::move(prefix)] = std::move(dist);
  }
  provider::ProviderCaps caps() const override { return {vocab_, 64}; }
  std::vector<double> next_token_distribution(
      std::span<const Token> prefix) const override {
    auto it = table_.find(TokenSeq(prefix.begin(), prefix.end()));
    if (it != table_.end()) return it->second;
    return std::vector<double>(std::size_t(vocab_), 1.0 / vocab_);
  }

 private:
  int vocab_;
  std::map<TokenSeq, std::vector<double>> table_;
};

const std::vector<double> kDistX{0.48, 0.48, 0.04};
const std::vector<double> kDistXp{0.989, 0.009, 0.002};

}  // namespace

TEST_CASE("top_set thresholds at alpha times the peak") {
  std::vector<double> d{0.6, 0.3, 0.05, 0.004};
  d.resize(16, 0.0);
  const PlausibleSet s = top_set(d, 0.01);
  CHECK(s.threshold == doctest::Approx(0.006));
  CHECK(s.members == std::vector<Token>{0, 1, 2});

  const std::vector<double> uniform(8, 0.125);
  CHECK(top_set(uniform, 0.01).members.size() == 8);  // all qualify

  // alpha = 1 keeps only tokens tied at the maximum
  const std::vector<double> two_peaks{0.4, 0.4, 0.2};
  CHECK(top_set(two_peaks, 1.0).members == std::vector<Token>{0, 1});
}

TEST_CASE("top_set membership is scale invariant") {
  Rng rng(3);
  auto d = coda_oracle::random_dist(rng, 24);
  auto scaled = d;
  double sum = 0;
  for (auto& p : scaled) {
    p *= 37.5;
    sum += p;
  }
  for (auto& p : scaled) p /= sum;  // renormalize
  CHECK(top_set(d, 0.02).members == top_set(scaled, 0.02).members);
}

TEST_CASE("r_pmi formula and antisymmetry") {
  CHECK(r_pmi(0.2, 0.4) == doctest::Approx(std::log(0.5)).epsilon(1e-12));
  CHECK(r_pmi(0.25, 0.25) == doctest::Approx(0.0));
  CHECK(r_pmi(0.4, 0.1) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(r_pmi(0.3, 0.7) == doctest::Approx(-r_pmi(0.7, 0.3)).epsilon(1e-12));
  CHECK_THROWS_AS((void)r_pmi(0.0, 0.5), Error);
}

TEST_CASE("rpmi_sum sums only negative terms over the intersection") {
  const std::vector<double> dx{0.5, 0.3, 0.15, 0.05};
  const std::vector<double> dxp{0.7, 0.2, 0.05, 0.05};
  // only token 0 has negative R-PMI: ln(0.5/0.7)
  CHECK(rpmi_sum(dx, dxp, 0.01) ==
        doctest::Approx(std::log(0.5 / 0.7)).epsilon(1e-9));
  CHECK(rpmi_sum(dx, dx, 0.01) == doctest::Approx(0.0));

  // disjoint top sets: empty intersection, sum 0
  const std::vector<double> a{0.9, 0.1, 0.0, 0.0};
  const std::vector<double> b{0.1, 0.9, 0.0, 0.0};
  CHECK(rpmi_sum(a, b, 0.5) == doctest::Approx(0.0));
}

TEST_CASE("escape_set is the plausible-set difference") {
  PlausibleSet tx, txp;
  tx.members = {1, 4, 9};
  txp.members = {4};
  CHECK(escape_set(tx, txp) == std::vector<Token>{1, 9});
  txp.members = {1, 4, 9, 12};
  CHECK(escape_set(tx, txp).empty());
  txp.members = {};
  CHECK(escape_set(tx, txp) == tx.members);
}

TEST_CASE("erm matches the worked example") {
  // topX = {0,1,2}, topXp = {0}; NegSet = {0}; escapes = {1,2}
  const std::vector<Token> esc{1, 2};
  const std::vector<Token> neg{0};
  const double want = (std::log(0.48) - std::log(0.989)) +
                      (std::log(0.04) - std::log(0.989));
  CHECK(erm(kDistX, kDistXp, esc, neg) == doctest::Approx(want).epsilon(1e-12));
  CHECK(erm(kDistX, kDistXp, esc, neg) == doctest::Approx(-3.9307).epsilon(1e-4));
  CHECK(erm(kDistX, kDistXp, {}, neg) == doctest::Approx(0.0));  // no escapes
}

TEST_CASE("erm: escape equal to the baseline contributes zero") {
  const std::vector<double> dx2{0.5, 0.3, 0.2};
  const std::vector<double> dxp2{0.7, 0.3, 0.0};
  // token 0: rpmi ln(0.5/0.7)<0 -> NegSet {0}; escape {2}
  const double contrib = std::log(dx2[2]) - std::log(dxp2[0]);
  CHECK(erm(dx2, dxp2, {2}, {0}) == doctest::Approx(contrib).epsilon(1e-12));
  // exact cancellation when the two probabilities match
  const std::vector<double> dx3{0.5, 0.3, 0.2};
  const std::vector<double> dxp3{0.2, 0.8, 0.0};
  CHECK(erm(dx3, dxp3, {2}, {0}) == doctest::Approx(0.0));
}

TEST_CASE("indicator components add up exactly") {
  const auto ic = indicator(kDistX, kDistXp, 0.01);
  CHECK(ic.value == ic.rpmi_sum + ic.erm);
  CHECK(ic.escape_size == 2);

  // the rpmi_sum worked pair: no escapes, indicator = rpmi_sum
  const std::vector<double> dx{0.5, 0.3, 0.15, 0.05};
  const std::vector<double> dxp{0.7, 0.2, 0.05, 0.05};
  const auto ic2 = indicator(dx, dxp, 0.01);
  CHECK(ic2.erm == doctest::Approx(0.0));
  CHECK(ic2.value == doctest::Approx(std::log(0.5 / 0.7)).epsilon(1e-9));
  CHECK(ic2.value < 0);  // not flagged

  const auto ic3 = indicator(dx, dx, 0.01);
  CHECK(ic3.value == doctest::Approx(0.0));  // equal distributions
}

TEST_CASE("rpmi_sum is never positive (property)") {
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const auto dx = coda_oracle::random_dist(rng, 24);
    const auto dxp = coda_oracle::random_dist(rng, 24);
    CHECK(rpmi_sum(dx, dxp, 0.01) <= 0.0);
  }
}

TEST_CASE("library matches the brute-force oracle on random pairs") {
  Rng rng(2024);
  for (int i = 0; i < 100; ++i) {
    const auto dx = coda_oracle::random_dist(rng, 32);
    const auto dxp = coda_oracle::random_dist(rng, 32);
    const double alpha = i % 2 ? 0.01 : 0.1;
    const auto want = coda_oracle::evaluate(dx, dxp, alpha);
    const auto ic = indicator(dx, dxp, alpha);
    CHECK(std::abs(ic.rpmi_sum - want.rpmi_sum) < 1e-9);
    CHECK(std::abs(ic.erm - want.erm) < 1e-9);
    CHECK(std::abs(ic.value - want.indicator) < 1e-9);
  }
}

TEST_CASE("detect: a position whose deletion changes nothing is not flagged") {
  TableProvider p(8);  // uniform for every prefix
  const TokenSeq prompt{1, 2, 3};
  const auto rep = detect(p, prompt, {}, 0.01);
  REQUIRE(rep.candidates.size() == 3);
  for (const auto& c : rep.candidates) {
    CHECK(c.indicator == doctest::Approx(0.0));
    CHECK(!c.flagged);
  }
  CHECK(!rep.primary.has_value());
  CHECK_THROWS_AS((void)detect(p, TokenSeq{1}, {}, 0.01), Error);
  CHECK_THROWS_AS((void)detect(p, prompt, {5}, 0.01), Error);
}

TEST_CASE("coda_decode worked example emits token 0") {
  TableProvider p(3);
  const TokenSeq prompt{1, 2};
  const TokenSeq masked{1};
  p.set(prompt, kDistX);
  p.set(masked, kDistXp);
  const TokenSeq out = coda_decode(p, prompt, masked, 1, 0.01);
  CHECK(out == TokenSeq{0});
}

TEST_CASE("coda_decode with masked == prompt reduces to greedy") {
  // constant provider: scores carry no signal, fallback must follow greedy
  TableProvider p(4);
  p.set({2}, {0.2, 0.5, 0.25, 0.05});
  p.set({2, 1}, {0.1, 0.1, 0.7, 0.1});
  const TokenSeq prompt{2};
  const TokenSeq out = coda_decode(p, prompt, prompt, 2, 0.01);
  const TokenSeq ref = probe::greedy_decode(p, prompt, 2);
  CHECK(out == ref);
  CHECK(out == TokenSeq{1, 2});

  // property over random distributions
  Rng rng(31);
  for (int i = 0; i < 50; ++i) {
    TableProvider q(16);
    q.set({3}, coda_oracle::random_dist(rng, 16));
    const TokenSeq pr{3};
    CHECK(coda_decode(q, pr, pr, 1, 0.01) == probe::greedy_decode(q, pr, 1));
  }
}

TEST_CASE("coda step winner matches the brute-force oracle") {
  Rng rng(77);
  for (int i = 0; i < 100; ++i) {
    const auto dx = coda_oracle::random_dist(rng, 24);
    const auto dxp = coda_oracle::random_dist(rng, 24);
    TableProvider p(24);
    p.set({5}, dx);
    p.set({6}, dxp);
    const auto want = coda_oracle::evaluate(dx, dxp, 0.01);
    const TokenSeq out = coda_decode(p, TokenSeq{5}, TokenSeq{6}, 1, 0.01);
    CHECK(out[0] == want.winner);
  }
}

TEST_CASE("literal argmax reading is exposed behind a flag") {
  TableProvider p(3);
  const TokenSeq prompt{1, 2};
  const TokenSeq masked{1};
  p.set(prompt, kDistX);
  p.set(masked, kDistXp);
  // literal Eq.-12 reading: plain argmax of p(y|X) over the plausible set
  const TokenSeq out =
      coda_decode(p, prompt, masked, 1, 0.01, /*use_adjusted_scores=*/false);
  CHECK(out == TokenSeq{0});  // 0.48 ties 0.48, lowest id
}

TEST_CASE("coda_eval passes through when nothing is flagged") {
  // two handmade groups; provider answers every probe correctly with a
  // point mass, so no position is ever flagged
  std::vector<corpus::Group> groups;
  TableProvider p(64);
  for (int gi = 0; gi < 2; ++gi) {
    corpus::Group g;
    g.group_id = gi;
    for (int i = 0; i < 3; ++i) {
      corpus::Statement s;
      s.group_id = gi;
      s.role = i < 2 ? corpus::Role::dominant : corpus::Role::suppressed;
      const Token answer = i < 2 ? Token(50 + gi) : Token(60 + gi);
      s.tokens = {Token(10 + gi), Token(20 + i), answer};
      s.prompt_len = 2;
      std::vector<double> point(64, 0.0);
      point[std::size_t(answer)] = 1.0;
      p.set(TokenSeq{Token(10 + gi), Token(20 + i)}, point);
      // deletions see the same point mass so indicators stay at zero
      p.set(TokenSeq{Token(10 + gi)}, point);
      p.set(TokenSeq{Token(20 + i)}, point);
      g.statements.push_back(std::move(s));
    }
    groups.push_back(std::move(g));
  }
  const CodaEvalResult r = coda_eval(p, groups, 0.01);
  CHECK(r.dominant.em_greedy == doctest::Approx(100.0));
  CHECK(r.dominant.em_coda == doctest::Approx(100.0));
  CHECK(r.suppressed.em_greedy == doctest::Approx(100.0));
  CHECK(r.suppressed.em_coda == doctest::Approx(100.0));
  CHECK(r.dominant.flag_rate == doctest::Approx(0.0));

  CHECK_THROWS_AS((void)coda_eval(p, {}, 0.01), Error);

  const std::string csv = eval_csv(r);
  CHECK(csv.substr(0, csv.find('\n')) ==
        "probe_class,em_greedy,em_coda,flag_rate,mean_indicator");
}
