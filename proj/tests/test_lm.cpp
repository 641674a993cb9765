#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ovl/corpus.hpp"
#include "ovl/lm.hpp"

using namespace ovl;
namespace fs = std::filesystem;

namespace {

lm::ModelConfig micro_config() {
  lm::ModelConfig mc;
  mc.vocab_size = 16;
  mc.d_model = 8;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.context_len = 8;
  mc.mlp_mult = 2;
  mc.precision = Precision::f64;
  return mc;
}

// Closed-form parameter count derived independently of weight_layout:
// untied embeddings, learned positions, per layer two norms (gain+bias),
// q/k/v/o projections (no key bias), and the feed-forward pair.
std::int64_t param_count_by_hand(const lm::ModelConfig& c) {
  const std::int64_t d = c.d_model;
  const std::int64_t ff = std::int64_t(c.mlp_mult) * d;
  const std::int64_t embeddings = 2 * std::int64_t(c.vocab_size) * d;
  const std::int64_t positions = std::int64_t(c.context_len) * d;
  const std::int64_t layer = 4 * d * d       // wq wk wv wo
                             + 3 * d         // bq bv bo
                             + 4 * d         // two gain/bias pairs
                             + 2 * ff * d    // w1 w2
                             + ff + d;       // b1 b2
  return embeddings + positions + std::int64_t(c.n_layers) * layer;
}

corpus::Corpus tiny_corpus(std::uint64_t seed, int groups = 4, double p = 3.0) {
  corpus::CorpusConfig cfg;
  cfg.vocab_size = 64;
  cfg.groups_per_point = groups;
  cfg.n_suppressed = 1;
  cfg.len_distinct = 1;
  cfg.len_answer = 1;
  cfg.p_schedule = {p};
  cfg.l_schedule = {4.0};
  cfg.global_seed = seed;
  return corpus::build_corpus(cfg);
}

lm::Checkpoint random_checkpoint(const lm::ModelConfig& mc, std::uint64_t seed) {
  lm::Checkpoint c = lm::init_checkpoint(mc, seed);
  Rng rng(derive_seed(seed, 5));
  if (mc.precision == Precision::f32)
    for (auto& w : c.w32) w = float(0.3 * rng.next_gaussian());
  else
    for (auto& w : c.w64) w = 0.3 * rng.next_gaussian();
  return c;
}

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / "ovl_lm_test";
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("param_count: embedding-only model counted by hand") {
  lm::ModelConfig mc;
  mc.vocab_size = 4;
  mc.d_model = 2;
  mc.n_layers = 0;
  mc.n_heads = 1;
  mc.context_len = 3;
  mc.mlp_mult = 4;
  // two embedding tables + positional table
  CHECK(lm::param_count(mc) == 2 * (4 * 2) + 3 * 2);
  CHECK(lm::param_count(mc) == 22);
}

TEST_CASE("param_count matches closed form and is linear in depth") {
  for (int layers : {0, 1, 2, 5}) {
    lm::ModelConfig mc;
    mc.vocab_size = 37;
    mc.d_model = 12;
    mc.n_layers = layers;
    mc.n_heads = 3;
    mc.context_len = 9;
    mc.mlp_mult = 4;
    CHECK(lm::param_count(mc) == param_count_by_hand(mc));
  }
  lm::ModelConfig zero = micro_config(), one = micro_config(), six = micro_config();
  zero.n_layers = 0;
  one.n_layers = 1;
  six.n_layers = 6;
  const auto layer_cost = lm::param_count(one) - lm::param_count(zero);
  CHECK(lm::param_count(six) == lm::param_count(zero) + 6 * layer_cost);
}

TEST_CASE("weight_layout covers the whole vector without gaps") {
  const auto mc = micro_config();
  const auto layout = lm::weight_layout(mc);
  std::int64_t expect = 0;
  for (const auto& t : layout) {
    CHECK(t.offset == expect);
    expect += t.size();
  }
  CHECK(expect == lm::param_count(mc));
}

TEST_CASE("fresh zero-initialized head gives the uniform distribution") {
  const auto mc = micro_config();
  const auto ckpt = lm::init_checkpoint(mc, 1);
  const TokenSeq prefix{3, 1, 2};
  const auto dist = lm::forward(ckpt, prefix);
  REQUIRE(int(dist.size()) == mc.vocab_size);
  for (double p : dist) CHECK(p == doctest::Approx(1.0 / 16).epsilon(1e-9));
}

TEST_CASE("forward distributions are normalized at every position") {
  const auto mc = micro_config();
  const auto ckpt = random_checkpoint(mc, 2);
  const TokenSeq tokens{3, 1, 2, 7, 7, 0};
  const auto rows = lm::forward_all(ckpt, tokens);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    double sum = 0;
    double mn = 1;
    for (int j = 0; j < mc.vocab_size; ++j) {
      sum += rows[r * 16 + std::size_t(j)];
      mn = std::min(mn, rows[r * 16 + std::size_t(j)]);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(mn >= 0.0);
  }
}

TEST_CASE("forward is pure: repeated calls bit-identical") {
  const auto mc = micro_config();
  const auto ckpt = random_checkpoint(mc, 3);
  const TokenSeq prefix{5, 9, 2, 2};
  const auto a = lm::forward(ckpt, prefix);
  const auto b = lm::forward(ckpt, prefix);
  CHECK(a == b);
}

TEST_CASE("causality: future tokens cannot influence earlier positions") {
  const auto mc = micro_config();
  const auto ckpt = random_checkpoint(mc, 4);
  TokenSeq tokens{1, 2, 3, 4, 5, 6};
  const auto base = lm::forward_all(ckpt, tokens);
  Rng rng(17);
  for (int t = 2; t < 6; ++t) {
    TokenSeq mutated = tokens;
    for (int u = t; u < 6; ++u)
      mutated[std::size_t(u)] = Token(rng.next_below(16));
    const auto rows = lm::forward_all(ckpt, mutated);
    // all positions strictly before the first change are unchanged
    for (int r = 0; r < t; ++r)
      for (int j = 0; j < 16; ++j)
        CHECK(rows[std::size_t(r) * 16 + std::size_t(j)] ==
              doctest::Approx(base[std::size_t(r) * 16 + std::size_t(j)]).epsilon(1e-12));
  }
}

TEST_CASE("forward rejects context overflow and out-of-vocab ids") {
  const auto mc = micro_config();
  const auto ckpt = lm::init_checkpoint(mc, 1);
  TokenSeq too_long(std::size_t(mc.context_len) + 1, 0);
  CHECK_THROWS_AS((void)lm::forward(ckpt, too_long), Error);
  const TokenSeq bad{1, 16};
  CHECK_THROWS_AS((void)lm::forward(ckpt, bad), Error);
}

TEST_CASE("evaluate_loss equals a direct recomputation from forward passes") {
  const auto c = tiny_corpus(21);
  auto mc = micro_config();
  mc.vocab_size = 64;
  mc.context_len = 8;
  mc.precision = Precision::f32;
  const auto ckpt = random_checkpoint(mc, 9);

  double nll = 0;
  std::int64_t count = 0;
  for (const auto& g : c.groups) {
    for (const auto& s : g.statements) {
      const auto rows = lm::forward_all(ckpt, s.tokens);
      for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) {
        nll -= std::log(rows[t * 64 + std::size_t(s.tokens[t + 1])]);
        ++count;
      }
    }
  }
  CHECK(lm::evaluate_loss(ckpt, c) == doctest::Approx(nll / double(count)).epsilon(1e-5));
}

TEST_CASE("a single statement is memorized to near-zero loss") {
  corpus::Corpus c = tiny_corpus(31, /*groups=*/1, /*p=*/1.0);
  c.groups[0].statements.resize(1);  // exactly one statement
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
  CHECK(res.loss_trace.back() < 0.01);
  CHECK(res.checkpoint.steps == 300);
}

TEST_CASE("training is deterministic given seeds") {
  const auto c = tiny_corpus(41);
  lm::ModelConfig mc;
  mc.vocab_size = 64;
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.context_len = 8;
  mc.precision = Precision::f32;
  lm::TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 4;
  tc.seed = 7;
  tc.plateau_patience = 0;
  const auto a = lm::train(c, mc, tc);
  const auto b = lm::train(c, mc, tc);
  CHECK(a.loss_trace == b.loss_trace);
  CHECK(a.checkpoint.w32 == b.checkpoint.w32);  // bitwise
}

TEST_CASE("opt-in parallel training is bitwise identical to serial") {
  const auto c = tiny_corpus(43, /*groups=*/6);
  lm::ModelConfig mc;
  mc.vocab_size = 64;
  mc.d_model = 16;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.context_len = 8;
  mc.precision = Precision::f32;
  lm::TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.seed = 11;
  tc.plateau_patience = 0;
  tc.threads = 1;
  const auto serial = lm::train(c, mc, tc);
  tc.threads = 3;
  const auto parallel = lm::train(c, mc, tc);
  CHECK(serial.checkpoint.w32 == parallel.checkpoint.w32);
  CHECK(serial.loss_trace == parallel.loss_trace);
}

TEST_CASE("finetune with zero epochs is the identity") {
  const auto c = tiny_corpus(51);
  lm::ModelConfig mc;
  mc.vocab_size = 64;
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.context_len = 8;
  mc.precision = Precision::f32;
  lm::TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 3;
  tc.plateau_patience = 0;
  const auto base = lm::train(c, mc, tc);
  lm::TrainConfig ft = tc;
  ft.epochs = 0;  // no effective steps
  const auto same = lm::finetune(base.checkpoint, c, ft);
  CHECK(same.checkpoint.w32 == base.checkpoint.w32);
  CHECK(same.loss_trace.empty());

  // and a real finetune continues from the base weights
  ft.epochs = 2;
  const auto more = lm::finetune(base.checkpoint, c, ft);
  CHECK(more.checkpoint.w32 != base.checkpoint.w32);
}

TEST_CASE("finetune rejects corpus exceeding the base vocabulary") {
  const auto c = tiny_corpus(61);  // vocab 64
  lm::ModelConfig mc;
  mc.vocab_size = 32;
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.context_len = 8;
  mc.precision = Precision::f32;
  const auto base = lm::init_checkpoint(mc, 1);
  lm::TrainConfig tc;
  tc.epochs = 1;
  tc.seed = 1;
  CHECK_THROWS_AS((void)lm::finetune(base, c, tc), Error);
}

TEST_CASE("divergence aborts with the offending step") {
  const auto c = tiny_corpus(71);
  lm::ModelConfig mc;
  mc.vocab_size = 64;
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.context_len = 8;
  mc.precision = Precision::f32;
  lm::TrainConfig tc;
  tc.lr = 1e18;  // guaranteed blow-up
  tc.epochs = 50;
  tc.batch_size = 4;
  tc.seed = 2;
  tc.plateau_patience = 0;
  CHECK_THROWS_AS((void)lm::train(c, mc, tc), DivergenceError);
}

TEST_CASE("gradient check: micro transformer, 64-bit, eps 1e-5 under 1e-6") {
  const auto mc = micro_config();
  const TokenSeq sample{0, 1, 5, 1, 4, 15};
  const double err = lm::grad_check(mc, sample, 1e-5, /*init_seed=*/5);
  CHECK(err < 1e-6);
}

TEST_CASE("gradient check passes on a zero-weight model") {
  const auto mc = micro_config();
  const TokenSeq sample{1, 2, 3, 4, 5};
  const double err =
      lm::grad_check(mc, sample, 1e-5, 1, lm::GradCheckInit::zeros);
  CHECK(err < 1e-6);
}

TEST_CASE("gradient check at 32-bit precision stays under the looser bound") {
  auto mc = micro_config();
  mc.precision = Precision::f32;
  const TokenSeq sample{0, 1, 5, 1, 4, 15};
  const double err = lm::grad_check(mc, sample, 1e-3, /*init_seed=*/5);
  CHECK(err < 1e-3);
}

TEST_CASE("grad check refuses non-micro configs") {
  lm::ModelConfig mc;
  mc.vocab_size = 512;
  mc.d_model = 64;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.context_len = 32;
  const TokenSeq sample{1, 2, 3};
  CHECK_THROWS_AS((void)lm::grad_check(mc, sample, 1e-5), Error);
}

TEST_CASE("checkpoint file round trip") {
  auto mc = micro_config();
  mc.precision = Precision::f32;
  auto ckpt = random_checkpoint(mc, 77);
  ckpt.steps = 1234;
  ckpt.final_loss = 0.125;
  ckpt.seed = 99;
  const auto path = temp_dir() / "m.bin";
  lm::write_checkpoint(ckpt, path);
  const auto back = lm::read_checkpoint(path);
  CHECK(back.config == ckpt.config);
  CHECK(back.w32 == ckpt.w32);
  CHECK(back.steps == ckpt.steps);
  CHECK(back.final_loss == ckpt.final_loss);
  CHECK(back.seed == ckpt.seed);

  // identical rewrite is byte-identical
  const auto path2 = temp_dir() / "m2.bin";
  lm::write_checkpoint(ckpt, path2);
  CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("corrupted checkpoint fails the checksum") {
  auto mc = micro_config();
  mc.precision = Precision::f64;
  const auto ckpt = random_checkpoint(mc, 78);
  const auto path = temp_dir() / "c.bin";
  lm::write_checkpoint(ckpt, path);
  std::string bytes = read_file(path);
  bytes[bytes.size() / 2] ^= 0x40;
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size()));
  }
  try {
    (void)lm::read_checkpoint(path);
    FAIL("expected checksum failure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::malformed);
  }
}
