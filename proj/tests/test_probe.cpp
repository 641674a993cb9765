#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <map>

#include "ovl/corpus.hpp"
#include "ovl/lm.hpp"
#include "ovl/probe.hpp"
#include "ovl/provider.hpp"

using namespace ovl;
using namespace ovl::probe;

namespace {

// Fixed next-token tables keyed by prefix; uniform elsewhere.
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

// Hand-built group: prompts {100+i}, dominant answer {7}, suppressed {8}.
corpus::Group handmade_group(int m, int n) {
  corpus::Group g;
  g.group_id = 0;
  for (int i = 0; i < m + n; ++i) {
    corpus::Statement s;
    s.group_id = 0;
    s.role = i < m ? corpus::Role::dominant : corpus::Role::suppressed;
    s.tokens = {Token(100 + i), i < m ? Token(7) : Token(8)};
    s.prompt_len = 1;
    g.statements.push_back(std::move(s));
  }
  return g;
}

// Decode function driven by a fixed prompt -> output table.
DecodeFn scripted(std::map<TokenSeq, TokenSeq> outputs) {
  return [outputs = std::move(outputs)](const provider::NextTokenProvider&,
                                        std::span<const Token> prompt,
                                        int) -> TokenSeq {
    return outputs.at(TokenSeq(prompt.begin(), prompt.end()));
  };
}

}  // namespace

TEST_CASE("greedy decode of a point mass repeats the peak token") {
  TableProvider p(16);
  std::vector<double> point(16, 0.0);
  point[9] = 1.0;
  // every prefix returns the same point mass
  const TokenSeq prompt{1, 2};
  TokenSeq pre = prompt;
  for (int i = 0; i < 3; ++i) {
    p.set(pre, point);
    pre.push_back(9);
  }
  CHECK(greedy_decode(p, prompt, 3) == TokenSeq{9, 9, 9});
}

TEST_CASE("greedy tie breaks to the lowest token id") {
  TableProvider p(8);
  std::vector<double> tie(8, 0.0);
  tie[2] = 0.5;
  tie[5] = 0.5;
  p.set({3}, tie);
  CHECK(greedy_decode(p, TokenSeq{3}, 1) == TokenSeq{2});
}

TEST_CASE("greedy decode validates inputs") {
  TableProvider p(8);
  CHECK_THROWS_AS((void)greedy_decode(p, TokenSeq{}, 1), Error);
  CHECK_THROWS_AS((void)greedy_decode(p, TokenSeq{1}, 0), Error);
}

TEST_CASE("exact match") {
  CHECK(exact_match(TokenSeq{4, 7}, TokenSeq{4, 7}));
  CHECK(!exact_match(TokenSeq{4, 7}, TokenSeq{4, 8}));
  CHECK(!exact_match(TokenSeq{4}, TokenSeq{4, 8}));
  CHECK(exact_match(TokenSeq{}, TokenSeq{}));
}

TEST_CASE("measure_rates: rr=0.8, hr=0.4 gives r=0.5") {
  const corpus::Group g = handmade_group(5, 5);
  TableProvider p(200);
  std::map<TokenSeq, TokenSeq> out;
  // 4 of 5 dominant prompts decode Y_a; 2 of 5 suppressed decode Y_a,
  // 2 decode Y_b, 1 decodes something else
  out[{100}] = {7};
  out[{101}] = {7};
  out[{102}] = {7};
  out[{103}] = {7};
  out[{104}] = {9};
  out[{105}] = {7};
  out[{106}] = {7};
  out[{107}] = {8};
  out[{108}] = {8};
  out[{109}] = {11};
  const RateReport r = measure_rates(p, g, scripted(out));
  CHECK(r.rr == doctest::Approx(0.8));
  CHECK(r.hr == doctest::Approx(0.4));
  CHECK(r.r == doctest::Approx(0.5));
  CHECK(r.other_err == doctest::Approx(0.2));
  CHECK(r.n_dom == 5);
  CHECK(r.n_sup == 5);
}

TEST_CASE("perfect factuality: hr=0, r=0") {
  const corpus::Group g = handmade_group(2, 2);
  TableProvider p(200);
  std::map<TokenSeq, TokenSeq> out;
  out[{100}] = {7};
  out[{101}] = {7};
  out[{102}] = {8};
  out[{103}] = {8};
  const RateReport r = measure_rates(p, g, scripted(out));
  CHECK(r.hr == doctest::Approx(0.0));
  CHECK(r.r == doctest::Approx(0.0));
}

TEST_CASE("rr=0 raises an undefined-ratio error carrying the rates") {
  const corpus::Group g = handmade_group(2, 2);
  TableProvider p(200);
  std::map<TokenSeq, TokenSeq> out;
  out[{100}] = {1};
  out[{101}] = {1};
  out[{102}] = {7};
  out[{103}] = {8};
  try {
    (void)measure_rates(p, g, scripted(out));
    FAIL("expected undefined ratio");
  } catch (const UndefinedRatioError& e) {
    CHECK(e.rr() == doctest::Approx(0.0));
    CHECK(e.hr() == doctest::Approx(0.5));
  }
}

TEST_CASE("measure_rates is invariant to probe order") {
  corpus::Group g = handmade_group(3, 2);
  TableProvider p(200);
  std::map<TokenSeq, TokenSeq> out;
  out[{100}] = {7};
  out[{101}] = {9};
  out[{102}] = {7};
  out[{103}] = {7};
  out[{104}] = {8};
  const RateReport a = measure_rates(p, g, scripted(out));
  std::reverse(g.statements.begin(), g.statements.end());
  const RateReport b = measure_rates(p, g, scripted(out));
  CHECK(a.rr == b.rr);
  CHECK(a.hr == b.hr);
  CHECK(a.r == b.r);
}

TEST_CASE("a memorized single-statement model decodes its training answer") {
  corpus::CorpusConfig cfg;
  cfg.vocab_size = 64;
  cfg.groups_per_point = 1;
  cfg.len_distinct = 1;
  cfg.len_answer = 2;
  cfg.p_schedule = {1.0};
  cfg.l_schedule = {4.0};
  cfg.global_seed = 13;
  corpus::Corpus c = corpus::build_corpus(cfg);
  c.groups[0].statements.resize(1);

  lm::ModelConfig mc;
  mc.vocab_size = 64;
  mc.d_model = 32;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.context_len = 8;
  mc.precision = Precision::f32;
  lm::TrainConfig tc;
  tc.lr = 1e-2;
  tc.epochs = 300;
  tc.batch_size = 4;
  tc.seed = 5;
  tc.plateau_patience = 0;
  const auto res = lm::train(c, mc, tc);
  provider::LocalProvider prov(res.checkpoint);
  const auto& s = c.groups[0].statements[0];
  const TokenSeq pred = greedy_decode(prov, s.prompt(), int(s.answer().size()));
  CHECK(exact_match(pred, s.answer()));
}

TEST_CASE("sweep_rates pools counts per schedule point and writes the table") {
  corpus::CorpusConfig cfg;
  cfg.vocab_size = 128;
  cfg.groups_per_point = 3;
  cfg.len_distinct = 1;
  cfg.len_answer = 1;
  cfg.p_schedule = {2.0};
  cfg.l_schedule = {3.0};
  cfg.global_seed = 3;
  const corpus::Corpus c = corpus::build_corpus(cfg);

  // provider that always answers Y_a of the probed group: rr=1, hr=1
  class OracleYa final : public provider::NextTokenProvider {
   public:
    explicit OracleYa(const corpus::Corpus& c) : c_(c) {}
    provider::ProviderCaps caps() const override { return {c_.vocab_size, 64}; }
    std::vector<double> next_token_distribution(
        std::span<const Token> prefix) const override {
      std::vector<double> d(std::size_t(c_.vocab_size), 0.0);
      for (const auto& g : c_.groups)
        for (const auto& s : g.statements)
          if (std::equal(prefix.begin(), prefix.end(), s.prompt().begin(),
                         s.prompt().end())) {
            d[std::size_t(g.dominant_answer()[0])] = 1.0;
            return d;
          }
      d[0] = 1.0;
      return d;
    }
    const corpus::Corpus& c_;
  } oracle(c);

  const auto rows = sweep_rates({{&oracle, 12345}}, {&c});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].p == doctest::Approx(2.0));
  CHECK(rows[0].l == doctest::Approx(3.0));
  CHECK(rows[0].s == 12345);
  CHECK(rows[0].rates.rr == doctest::Approx(1.0));
  CHECK(rows[0].rates.hr == doctest::Approx(1.0));
  CHECK(rows[0].rates.r == doctest::Approx(1.0));
  CHECK(rows[0].rates.n_dom == 6);
  CHECK(rows[0].rates.n_sup == 3);

  const std::string csv = rates_csv(rows);
  CHECK(csv.substr(0, csv.find('\n')) ==
        "P,L,S,RR,HR,R,other_err,n_dom,n_sup");

  // vocabulary mismatch is rejected
  TableProvider small(16);
  CHECK_THROWS_AS((void)sweep_rates({{&small, 1}}, {&c}), Error);
}
