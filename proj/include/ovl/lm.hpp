#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ovl/common.hpp"
#include "ovl/corpus.hpp"

namespace ovl::lm {

// Pre-norm decoder-only transformer: learned positional embeddings, untied
// input/output embeddings, GELU feed-forward, no dropout, no final norm.
struct ModelConfig {
  int vocab_size = 0;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int context_len = 64;
  int mlp_mult = 4;
  Precision precision = Precision::f32;

  int ff_dim() const { return mlp_mult * d_model; }
  int head_dim() const { return d_model / n_heads; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Flat weight vector layout, in order:
//   tok_emb[V,d]  pos_emb[ctx,d]
//   per layer: ln1_g[d] ln1_b[d] wq[d,d] bq[d] wk[d,d] wv[d,d] bv[d]
//              wo[d,d] bo[d] ln2_g[d] ln2_b[d] w1[ff,d] b1[ff] w2[d,ff] b2[d]
//   head[V,d]
// Linear layers compute y = x W^T + b with W stored [out, in]. The key
// projection carries no bias: attention scores are invariant to per-row
// constant shifts, so its gradient is identically zero.
struct TensorInfo {
  std::string name;
  std::int64_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::int64_t size() const { return std::int64_t(rows) * cols; }
  bool is_matrix() const { return rows > 1; }  // decayed by AdamW
};

std::vector<TensorInfo> weight_layout(const ModelConfig& config);
std::int64_t param_count(const ModelConfig& config);

struct Checkpoint {
  ModelConfig config;
  std::vector<float> w32;   // exactly one vector is populated,
  std::vector<double> w64;  // matching config.precision
  std::uint64_t steps = 0;
  double final_loss = 0.0;
  std::uint64_t seed = 0;

  std::size_t weight_count() const {
    return config.precision == Precision::f32 ? w32.size() : w64.size();
  }
};

// normal(0, 0.02) for matrices, zeros for biases and the output head,
// ones/zeros for norm gains/biases. The zero head makes a fresh model emit
// the uniform distribution.
Checkpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed);

// Stochastic gradient descent with the two standard momentum coefficients
// and decoupled weight decay; decay applies to matrices only.
struct TrainConfig {
  double lr = 3e-4;  // paper's 1e-5 targets 7B-scale fine-tuning
  double weight_decay = 1e-2;
  int epochs = 200;
  int batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int threads = 1;  // >1: deterministic row-partitioned parallelism
  // Stop once the per-epoch loss has not improved by rel. plateau_tol for
  // plateau_patience consecutive epochs (0 disables; epochs is the cap).
  int plateau_patience = 10;
  double plateau_tol = 1e-3;

  void validate() const;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> loss_trace;  // mean NLL per epoch, in training order
};

TrainResult train(const corpus::Corpus& corpus, const ModelConfig& config,
                  const TrainConfig& tc);
TrainResult finetune(const Checkpoint& base, const corpus::Corpus& corpus,
                     const TrainConfig& tc);

// Next-token distribution after the full prefix (length-V probabilities,
// computed with a double-precision softmax).
std::vector<double> forward(const Checkpoint& ckpt,
                            std::span<const Token> prefix);

// Distributions at every position, row-major [len(tokens) x V].
std::vector<double> forward_all(const Checkpoint& ckpt,
                                std::span<const Token> tokens);

// Mean NLL of the realized next tokens over the whole corpus.
double evaluate_loss(const Checkpoint& ckpt, const corpus::Corpus& corpus);

enum class GradCheckInit { random, zeros };

// Max over parameters of |analytic - central difference| relative error.
double grad_check(const ModelConfig& config, std::span<const Token> sample,
                  double epsilon, std::uint64_t init_seed = 1,
                  GradCheckInit init = GradCheckInit::random);

// Binary checkpoint file: magic "OVLM", u32 format version, u32 config
// fields, u32 precision tag, u64 steps, f64 final loss, u64 seed, u64 weight
// count, raw little-endian weights, trailing u64 FNV-1a checksum over all
// preceding bytes.
void write_checkpoint(const Checkpoint& ckpt,
                      const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace ovl::lm
