#include "ovl/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <thread>

#include "ovl/kernels.hpp"

namespace ovl::lm {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw Error(ErrorKind::invalid_argument, "vocab_size must be >= 2");
  if (d_model < 1 || context_len < 1 || mlp_mult < 1 || n_layers < 0 || n_heads < 1)
    throw Error(ErrorKind::invalid_argument, "model dimensions must be positive");
  if (d_model % n_heads != 0)
    throw Error(ErrorKind::invalid_argument, "d_model must be divisible by n_heads");
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw Error(ErrorKind::invalid_argument, "learning rate must be > 0");
  // epochs == 0 is allowed and means "no effective steps" (identity).
  if (epochs < 0) throw Error(ErrorKind::invalid_argument, "epochs must be >= 0");
  if (batch_size < 1) throw Error(ErrorKind::invalid_argument, "batch_size must be >= 1");
  if (threads < 1) throw Error(ErrorKind::invalid_argument, "threads must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw Error(ErrorKind::invalid_argument, "momentum coefficients must be in [0, 1)");
}

enum class TensorKind { weight, bias, norm_gain, norm_bias, head };

namespace {

template <typename F>
void for_each_tensor(const ModelConfig& c, F&& f) {
  const int d = c.d_model;
  const int ff = c.ff_dim();
  f("tok_emb", c.vocab_size, d, TensorKind::weight);
  f("pos_emb", c.context_len, d, TensorKind::weight);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    f(p + "ln1_g", 1, d, TensorKind::norm_gain);
    f(p + "ln1_b", 1, d, TensorKind::norm_bias);
    f(p + "wq", d, d, TensorKind::weight);
    f(p + "bq", 1, d, TensorKind::bias);
    f(p + "wk", d, d, TensorKind::weight);
    f(p + "wv", d, d, TensorKind::weight);
    f(p + "bv", 1, d, TensorKind::bias);
    f(p + "wo", d, d, TensorKind::weight);
    f(p + "bo", 1, d, TensorKind::bias);
    f(p + "ln2_g", 1, d, TensorKind::norm_gain);
    f(p + "ln2_b", 1, d, TensorKind::norm_bias);
    f(p + "w1", ff, d, TensorKind::weight);
    f(p + "b1", 1, ff, TensorKind::bias);
    f(p + "w2", d, ff, TensorKind::weight);
    f(p + "b2", 1, d, TensorKind::bias);
  }
  f("head", c.vocab_size, d, TensorKind::head);
}

struct KindedTensor {
  TensorInfo info;
  TensorKind kind;
};

std::vector<KindedTensor> kinded_layout(const ModelConfig& c) {
  std::vector<KindedTensor> out;
  std::int64_t offset = 0;
  for_each_tensor(c, [&](const std::string& name, int rows, int cols,
                         TensorKind kind) {
    out.push_back({TensorInfo{name, offset, rows, cols}, kind});
    offset += std::int64_t(rows) * cols;
  });
  return out;
}

}  // namespace

std::vector<TensorInfo> weight_layout(const ModelConfig& config) {
  config.validate();
  std::vector<TensorInfo> out;
  for (const auto& t : kinded_layout(config)) out.push_back(t.info);
  return out;
}

std::int64_t param_count(const ModelConfig& config) {
  config.validate();
  std::int64_t total = 0;
  for_each_tensor(config, [&](const std::string&, int rows, int cols,
                              TensorKind) { total += std::int64_t(rows) * cols; });
  return total;
}

// ------------------------------------------------------------------ engine

namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
struct LayerW {
  T *ln1_g, *ln1_b, *wq, *bq, *wk, *wv, *bv, *wo, *bo;
  T *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
};

template <typename T>
struct WeightMap {
  T* tok_emb;
  T* pos_emb;
  T* head;
  std::vector<LayerW<T>> layers;
};

// Walks the same order as for_each_tensor.
template <typename T>
WeightMap<T> map_weights(const ModelConfig& c, T* base) {
  const int d = c.d_model;
  const int ff = c.ff_dim();
  WeightMap<T> w;
  T* p = base;
  auto take = [&](std::int64_t count) {
    T* r = p;
    p += count;
    return r;
  };
  w.tok_emb = take(std::int64_t(c.vocab_size) * d);
  w.pos_emb = take(std::int64_t(c.context_len) * d);
  w.layers.resize(std::size_t(c.n_layers));
  for (auto& L : w.layers) {
    L.ln1_g = take(d);
    L.ln1_b = take(d);
    L.wq = take(std::int64_t(d) * d);
    L.bq = take(d);
    L.wk = take(std::int64_t(d) * d);
    L.wv = take(std::int64_t(d) * d);
    L.bv = take(d);
    L.wo = take(std::int64_t(d) * d);
    L.bo = take(d);
    L.ln2_g = take(d);
    L.ln2_b = take(d);
    L.w1 = take(std::int64_t(ff) * d);
    L.b1 = take(ff);
    L.w2 = take(std::int64_t(d) * ff);
    L.b2 = take(d);
  }
  w.head = take(std::int64_t(c.vocab_size) * d);
  return w;
}

template <typename T>
struct LayerActs {
  std::vector<T> ln1_out, q, k, v, att_o, res1, ln2_out, ff_pre, ff_act, res2;
  std::vector<T> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
  std::vector<T> att_p;              // cached attention probabilities
  std::vector<std::size_t> att_off;  // per-sequence offset into att_p
};

template <typename T>
class Engine {
 public:
  Engine(const ModelConfig& cfg, T* weights, int threads)
      : cfg_(cfg),
        ops_(kernels::ops<T>()),
        w_(map_weights(cfg, weights)),
        threads_(threads) {}

  // Runs the batch forward pass and fills the logits buffer.
  void forward(const std::vector<std::span<const Token>>& seqs) {
    prepare(seqs);
    embed();
    const T* x = emb_.data();
    for (int l = 0; l < cfg_.n_layers; ++l) {
      layer_forward(l, x);
      x = acts_[std::size_t(l)].res2.data();
    }
    final_in_ = x;
    // logits = x head^T
    par_rows(n_, [&](int r0, int r1) {
      ops_.matmul_nt(x + std::size_t(r0) * cfg_.d_model, w_.head,
                     logits_.data() + std::size_t(r0) * cfg_.vocab_size,
                     r1 - r0, cfg_.vocab_size, cfg_.d_model, false);
    });
  }

  const T* logits() const { return logits_.data(); }
  int rows() const { return n_; }
  std::int64_t pred_count() const { return pred_count_; }

  // Converts logits to probabilities in place and returns the NLL sum over
  // predicted positions (every position of every sequence except the last).
  // The loss itself comes from log-sum-exp over the raw logits: probs can
  // underflow to zero in f32 once a token is strongly memorized, and the
  // gradient-check oracle needs the loss resolved below double roundoff, so
  // accumulation stays in extended precision.
  long double softmax_and_loss() {
    const int V = cfg_.vocab_size;
    long double loss = 0.0L;
    for (std::size_t b = 0; b < seq_len_.size(); ++b) {
      const int off = seq_off_[b];
      const int len = seq_len_[b];
      for (int t = 0; t + 1 < len; ++t) {
        const Token target = tokens_[std::size_t(off + t + 1)];
        const T* row = logits_.data() + std::size_t(off + t) * V;
        T mx = row[0];
        for (int j = 1; j < V; ++j) mx = row[j] > mx ? row[j] : mx;
        long double sum = 0.0L;
        for (int j = 0; j < V; ++j)
          sum += static_cast<long double>(std::exp(row[j] - mx));
        loss += static_cast<long double>(mx) + std::log(sum) -
                static_cast<long double>(row[target]);
      }
    }
    par_rows(n_, [&](int r0, int r1) {
      for (int r = r0; r < r1; ++r)
        ops_.softmax(logits_.data() + std::size_t(r) * V, V);
    });
    return loss;
  }

  // Backpropagates the mean NLL; expects softmax_and_loss() to have run.
  // grad must hold param_count entries and is accumulated into.
  void backward(T* grad) {
    const int d = cfg_.d_model;
    const int V = cfg_.vocab_size;
    WeightMap<T> g = map_weights(cfg_, grad);

    // logits buffer currently holds probabilities; turn it into dlogits.
    const T inv_pred = T(1) / T(pred_count_);
    par_seqs([&](std::size_t b) {
      const int off = seq_off_[b];
      const int len = seq_len_[b];
      for (int t = 0; t < len; ++t) {
        T* row = logits_.data() + std::size_t(off + t) * V;
        if (t + 1 < len) {
          for (int j = 0; j < V; ++j) row[j] *= inv_pred;
          row[tokens_[std::size_t(off + t + 1)]] -= inv_pred;
        } else {
          std::fill(row, row + V, T(0));
        }
      }
    });

    // head
    ops_.matmul_tn(logits_.data(), final_in_, g.head, V, d, n_, true);
    par_rows(n_, [&](int r0, int r1) {
      ops_.matmul_nn(logits_.data() + std::size_t(r0) * V, w_.head,
                     dres_.data() + std::size_t(r0) * d, r1 - r0, d, V, false);
    });

    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
      const T* x_in =
          l == 0 ? emb_.data() : acts_[std::size_t(l - 1)].res2.data();
      layer_backward(l, x_in, g);
    }

    // embeddings (serial scatter; positions ascending)
    for (std::size_t b = 0; b < seq_len_.size(); ++b) {
      const int off = seq_off_[b];
      const int len = seq_len_[b];
      for (int t = 0; t < len; ++t) {
        const T* row = dres_.data() + std::size_t(off + t) * d;
        ops_.axpy(T(1), row,
                  g.tok_emb + std::size_t(tokens_[std::size_t(off + t)]) * d,
                  d);
        ops_.axpy(T(1), row, g.pos_emb + std::size_t(t) * d, d);
      }
    }
  }

 private:
  void prepare(const std::vector<std::span<const Token>>& seqs) {
    seq_off_.clear();
    seq_len_.clear();
    tokens_.clear();
    max_t_ = 0;
    int n = 0;
    for (const auto& s : seqs) {
      if (s.empty() || int(s.size()) > cfg_.context_len)
        throw Error(ErrorKind::context_overflow,
                    "sequence length " + std::to_string(s.size()) +
                        " outside [1, " + std::to_string(cfg_.context_len) + "]");
      seq_off_.push_back(n);
      seq_len_.push_back(int(s.size()));
      for (Token t : s) {
        if (t < 0 || t >= cfg_.vocab_size)
          throw Error(ErrorKind::out_of_vocab,
                      "token id " + std::to_string(t) + " outside vocabulary");
        tokens_.push_back(t);
      }
      n += int(s.size());
      max_t_ = std::max(max_t_, int(s.size()));
    }
    n_ = n;
    pred_count_ = 0;
    for (int len : seq_len_) pred_count_ += len - 1;

    const int d = cfg_.d_model;
    const int ff = cfg_.ff_dim();
    const int H = cfg_.n_heads;
    emb_.resize(std::size_t(n_) * d);
    logits_.resize(std::size_t(n_) * cfg_.vocab_size);
    acts_.resize(std::size_t(cfg_.n_layers));
    for (auto& a : acts_) {
      for (auto* v : {&a.ln1_out, &a.q, &a.k, &a.v, &a.att_o, &a.res1,
                      &a.ln2_out, &a.res2})
        v->resize(std::size_t(n_) * d);
      a.ff_pre.resize(std::size_t(n_) * ff);
      a.ff_act.resize(std::size_t(n_) * ff);
      for (auto* v : {&a.ln1_mean, &a.ln1_rstd, &a.ln2_mean, &a.ln2_rstd})
        v->resize(std::size_t(n_));
      a.att_off.clear();
      std::size_t total = 0;
      for (int len : seq_len_) {
        a.att_off.push_back(total);
        total += std::size_t(H) * len * len;
      }
      a.att_p.resize(total);
    }
    dres_.resize(std::size_t(n_) * d);
    dres1_.resize(std::size_t(n_) * d);
    dln_.resize(std::size_t(n_) * d);
    dq_.resize(std::size_t(n_) * d);
    dk_.resize(std::size_t(n_) * d);
    dv_.resize(std::size_t(n_) * d);
    dff_.resize(std::size_t(n_) * ff);
    dff2_.resize(std::size_t(n_) * ff);
    const int dh = cfg_.head_dim();
    scratch_.resize(std::size_t(std::max(threads_, 1)));
    for (auto& s : scratch_) {
      s.qh.resize(std::size_t(max_t_) * dh);
      s.kh.resize(std::size_t(max_t_) * dh);
      s.vh.resize(std::size_t(max_t_) * dh);
      s.oh.resize(std::size_t(max_t_) * dh);
      s.ds.resize(std::size_t(max_t_) * max_t_);
    }
  }

  void embed() {
    const int d = cfg_.d_model;
    par_seqs([&](std::size_t b) {
      const int off = seq_off_[b];
      const int len = seq_len_[b];
      for (int t = 0; t < len; ++t) {
        const T* te = w_.tok_emb + std::size_t(tokens_[std::size_t(off + t)]) * d;
        const T* pe = w_.pos_emb + std::size_t(t) * d;
        T* out = emb_.data() + std::size_t(off + t) * d;
        for (int j = 0; j < d; ++j) out[j] = te[j] + pe[j];
      }
    });
  }

  void add_bias(const T* bias, T* rows, int m, int n) {
    par_rows(m, [&](int r0, int r1) {
      for (int r = r0; r < r1; ++r)
        ops_.axpy(T(1), bias, rows + std::size_t(r) * n, n);
    });
  }

  // y = x w^T + b (b may be null for bias-free projections)
  void linear_fwd(const T* x, const T* w, const T* b, T* y, int rows, int out,
                  int in) {
    par_rows(rows, [&](int r0, int r1) {
      ops_.matmul_nt(x + std::size_t(r0) * in, w, y + std::size_t(r0) * out,
                     r1 - r0, out, in, false);
    });
    if (b) add_bias(b, y, rows, out);
  }

  // dw += dy^T x; db += colsum(dy); dx (= or +=) dy w
  void linear_bwd(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db,
                  int rows, int out, int in, bool dx_accumulate) {
    ops_.matmul_tn(dy, x, dw, out, in, rows, true);
    if (db)
      for (int r = 0; r < rows; ++r)
        ops_.axpy(T(1), dy + std::size_t(r) * out, db, out);
    par_rows(rows, [&](int r0, int r1) {
      ops_.matmul_nn(dy + std::size_t(r0) * out, w,
                     dx + std::size_t(r0) * in, r1 - r0, in, out,
                     dx_accumulate);
    });
  }

  void layernorm_rows(const T* x, const T* gain, const T* bias, T* y, T* mean,
                      T* rstd, int rows) {
    const int d = cfg_.d_model;
    par_rows(rows, [&](int r0, int r1) {
      for (int r = r0; r < r1; ++r)
        ops_.layernorm(x + std::size_t(r) * d, gain, bias,
                       y + std::size_t(r) * d, mean + r, rstd + r, d,
                       T(kLnEps));
    });
  }

  void layer_forward(int l, const T* x_in) {
    auto& a = acts_[std::size_t(l)];
    const auto& W = w_.layers[std::size_t(l)];
    const int d = cfg_.d_model;
    const int ff = cfg_.ff_dim();
    const int H = cfg_.n_heads;
    const int dh = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(T(dh));

    layernorm_rows(x_in, W.ln1_g, W.ln1_b, a.ln1_out.data(),
                   a.ln1_mean.data(), a.ln1_rstd.data(), n_);
    linear_fwd(a.ln1_out.data(), W.wq, W.bq, a.q.data(), n_, d, d);
    linear_fwd(a.ln1_out.data(), W.wk, nullptr, a.k.data(), n_, d, d);
    linear_fwd(a.ln1_out.data(), W.wv, W.bv, a.v.data(), n_, d, d);

    par_seqs_scratch([&](std::size_t b, AttScratch& s) {
      const int off = seq_off_[b];
      const int len = seq_len_[b];
      for (int h = 0; h < H; ++h) {
        pack_head(a.q.data(), off, len, h, s.qh.data());
        pack_head(a.k.data(), off, len, h, s.kh.data());
        pack_head(a.v.data(), off, len, h, s.vh.data());
        T* P = a.att_p.data() + a.att_off[b] + std::size_t(h) * len * len;
        ops_.matmul_nt(s.qh.data(), s.kh.data(), P, len, len, dh, false);
        for (int i = 0; i < len; ++i) {
          T* row = P + std::size_t(i) * len;
          for (int j = 0; j <= i; ++j) row[j] *= scale;
          ops_.softmax(row, i + 1);
          for (int j = i + 1; j < len; ++j) row[j] = 0;
        }
        ops_.matmul_nn(P, s.vh.data(), s.oh.data(), len, dh, len, false);
        unpack_head(s.oh.data(), off, len, h, a.att_o.data());
      }
    });

    linear_fwd(a.att_o.data(), W.wo, W.bo, a.res1.data(), n_, d, d);
    add_rows(x_in, a.res1.data(), n_ * d);  // res1 = x_in + attn

    layernorm_rows(a.res1.data(), W.ln2_g, W.ln2_b, a.ln2_out.data(),
                   a.ln2_mean.data(), a.ln2_rstd.data(), n_);
    linear_fwd(a.ln2_out.data(), W.w1, W.b1, a.ff_pre.data(), n_, ff, d);
    par_rows(n_, [&](int r0, int r1) {
      ops_.gelu(a.ff_pre.data() + std::size_t(r0) * ff,
                a.ff_act.data() + std::size_t(r0) * ff, (r1 - r0) * ff);
    });
    linear_fwd(a.ff_act.data(), W.w2, W.b2, a.res2.data(), n_, d, ff);
    add_rows(a.res1.data(), a.res2.data(), n_ * d);  // res2 = res1 + mlp
  }

  // On entry dres_ holds the gradient w.r.t. this layer's output; on exit it
  // holds the gradient w.r.t. the layer's input.
  void layer_backward(int l, const T* x_in, WeightMap<T>& g) {
    auto& a = acts_[std::size_t(l)];
    const auto& W = w_.layers[std::size_t(l)];
    auto& G = g.layers[std::size_t(l)];
    const int d = cfg_.d_model;
    const int ff = cfg_.ff_dim();
    const int H = cfg_.n_heads;
    const int dh = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(T(dh));

    // MLP: res2 = res1 + W2 gelu(W1 ln2(res1) + b1) + b2
    linear_bwd(a.ff_act.data(), W.w2, dres_.data(), dff_.data(), G.w2, G.b2,
               n_, d, ff, false);
    par_rows(n_, [&](int r0, int r1) {
      ops_.gelu_bwd(a.ff_pre.data() + std::size_t(r0) * ff,
                    dff_.data() + std::size_t(r0) * ff,
                    dff2_.data() + std::size_t(r0) * ff, (r1 - r0) * ff);
    });
    linear_bwd(a.ln2_out.data(), W.w1, dff2_.data(), dln_.data(), G.w1, G.b1,
               n_, ff, d, false);
    // dres1 = dres (residual) + ln2 backward of dln
    par_rows(n_, [&](int r0, int r1) {
      for (int r = r0; r < r1; ++r)
        std::memcpy(dres1_.data() + std::size_t(r) * d,
                    dres_.data() + std::size_t(r) * d, sizeof(T) * std::size_t(d));
    });
    layernorm_bwd_rows(a.res1.data(), W.ln2_g, a.ln2_mean.data(),
                       a.ln2_rstd.data(), dln_.data(), dres1_.data(), G.ln2_g,
                       G.ln2_b, true);

    // Attention: res1 = x_in + Wo att(ln1(x_in)) + bo
    linear_bwd(a.att_o.data(), W.wo, dres1_.data(), dln_.data(), G.wo, G.bo,
               n_, d, d, false);  // dln = d(att_o)
    par_seqs_scratch([&](std::size_t b, AttScratch& s) {
      const int off = seq_off_[b];
      const int len = seq_len_[b];
      for (int h = 0; h < H; ++h) {
        pack_head(a.q.data(), off, len, h, s.qh.data());
        pack_head(a.k.data(), off, len, h, s.kh.data());
        pack_head(a.v.data(), off, len, h, s.vh.data());
        const T* P = a.att_p.data() + a.att_off[b] + std::size_t(h) * len * len;
        T* dO = s.oh.data();
        pack_head(dln_.data(), off, len, h, dO);
        T* dS = s.ds.data();
        // dV = P^T dO
        ops_.matmul_tn(P, dO, s.vh2(), len, dh, len, false);
        // dP = dO V^T
        ops_.matmul_nt(dO, s.vh.data(), dS, len, len, dh, false);
        // softmax backward over each causal prefix, folding in the scale
        for (int i = 0; i < len; ++i) {
          const T* prow = P + std::size_t(i) * len;
          T* drow = dS + std::size_t(i) * len;
          T dot = 0;
          for (int j = 0; j <= i; ++j) dot += prow[j] * drow[j];
          for (int j = 0; j <= i; ++j)
            drow[j] = prow[j] * (drow[j] - dot) * scale;
          for (int j = i + 1; j < len; ++j) drow[j] = 0;
        }
        // dQ = dS K ; dK = dS^T Q
        ops_.matmul_nn(dS, s.kh.data(), s.qh2(), len, dh, len, false);
        ops_.matmul_tn(dS, s.qh.data(), s.kh2(), len, dh, len, false);
        unpack_head(s.qh2(), off, len, h, dq_.data());
        unpack_head(s.kh2(), off, len, h, dk_.data());
        unpack_head(s.vh2(), off, len, h, dv_.data());
      }
    });
    linear_bwd(a.ln1_out.data(), W.wq, dq_.data(), dln_.data(), G.wq, G.bq,
               n_, d, d, false);
    linear_bwd(a.ln1_out.data(), W.wk, dk_.data(), dln_.data(), G.wk, nullptr,
               n_, d, d, true);
    linear_bwd(a.ln1_out.data(), W.wv, dv_.data(), dln_.data(), G.wv, G.bv,
               n_, d, d, true);
    // dres (grad w.r.t. x_in) = dres1 (residual) + ln1 backward of dln
    std::swap(dres_, dres1_);
    layernorm_bwd_rows(x_in, W.ln1_g, a.ln1_mean.data(), a.ln1_rstd.data(),
                       dln_.data(), dres_.data(), G.ln1_g, G.ln1_b, true);
  }

  void layernorm_bwd_rows(const T* x, const T* gain, const T* mean,
                          const T* rstd, const T* dy, T* dx, T* dgain,
                          T* dbias, bool accumulate_dx) {
    const int d = cfg_.d_model;
    // dgain/dbias are shared accumulators: keep the row loop serial.
    std::vector<T>& tmp = lnbwd_tmp_;
    tmp.resize(std::size_t(d));
    for (int r = 0; r < n_; ++r) {
      ops_.layernorm_bwd(x + std::size_t(r) * d, gain, mean[r], rstd[r],
                         dy + std::size_t(r) * d, tmp.data(), dgain, dbias, d);
      if (accumulate_dx)
        ops_.axpy(T(1), tmp.data(), dx + std::size_t(r) * d, d);
      else
        std::memcpy(dx + std::size_t(r) * d, tmp.data(),
                    sizeof(T) * std::size_t(d));
    }
  }

  void add_rows(const T* x, T* y, int count) {  // y += x
    par_rows(count, [&](int i0, int i1) {
      ops_.axpy(T(1), x + i0, y + i0, i1 - i0);
    });
  }

  void pack_head(const T* src, int off, int len, int h, T* dst) {
    const int d = cfg_.d_model;
    const int dh = cfg_.head_dim();
    for (int t = 0; t < len; ++t)
      std::memcpy(dst + std::size_t(t) * dh,
                  src + std::size_t(off + t) * d + std::size_t(h) * dh,
                  sizeof(T) * std::size_t(dh));
  }

  void unpack_head(const T* src, int off, int len, int h, T* dst) {
    const int d = cfg_.d_model;
    const int dh = cfg_.head_dim();
    for (int t = 0; t < len; ++t)
      std::memcpy(dst + std::size_t(off + t) * d + std::size_t(h) * dh,
                  src + std::size_t(t) * dh, sizeof(T) * std::size_t(dh));
  }

  // Deterministic parallelism: fixed contiguous partitions, disjoint writes,
  // no cross-thread reductions (shared accumulations stay serial), so the
  // result is bitwise identical to the single-threaded run.
  template <typename F>
  void par_rows(int rows, F&& f) {
    const int chunks = threads_ > 1 && rows >= 2 * threads_ ? threads_ : 1;
    if (chunks == 1) {
      f(0, rows);
      return;
    }
    std::vector<std::thread> ts;
    for (int c = 0; c < chunks; ++c) {
      const int r0 = int(std::int64_t(rows) * c / chunks);
      const int r1 = int(std::int64_t(rows) * (c + 1) / chunks);
      ts.emplace_back([&, r0, r1] { f(r0, r1); });
    }
    for (auto& t : ts) t.join();
  }

  template <typename F>
  void par_seqs(F&& f) {
    par_rows(int(seq_len_.size()), [&](int b0, int b1) {
      for (int b = b0; b < b1; ++b) f(std::size_t(b));
    });
  }

  struct AttScratch {
    std::vector<T> qh, kh, vh, oh, ds;
    std::vector<T> qh2_, kh2_, vh2_;
    T* qh2() {
      qh2_.resize(qh.size());
      return qh2_.data();
    }
    T* kh2() {
      kh2_.resize(kh.size());
      return kh2_.data();
    }
    T* vh2() {
      vh2_.resize(vh.size());
      return vh2_.data();
    }
  };

  template <typename F>
  void par_seqs_scratch(F&& f) {
    const int nseq = int(seq_len_.size());
    const int chunks = threads_ > 1 && nseq >= 2 ? std::min(threads_, nseq) : 1;
    if (chunks == 1) {
      for (int b = 0; b < nseq; ++b) f(std::size_t(b), scratch_[0]);
      return;
    }
    std::vector<std::thread> ts;
    for (int c = 0; c < chunks; ++c) {
      const int b0 = int(std::int64_t(nseq) * c / chunks);
      const int b1 = int(std::int64_t(nseq) * (c + 1) / chunks);
      ts.emplace_back([&, c, b0, b1] {
        for (int b = b0; b < b1; ++b) f(std::size_t(b), scratch_[std::size_t(c)]);
      });
    }
    for (auto& t : ts) t.join();
  }

  ModelConfig cfg_;
  const kernels::Ops<T>& ops_;
  WeightMap<T> w_;
  int threads_;

  int n_ = 0;
  int max_t_ = 0;
  std::int64_t pred_count_ = 0;
  std::vector<int> seq_off_, seq_len_;
  std::vector<Token> tokens_;
  std::vector<T> emb_, logits_;
  std::vector<LayerActs<T>> acts_;
  const T* final_in_ = nullptr;

  std::vector<T> dres_, dres1_, dln_, dq_, dk_, dv_, dff_, dff2_, lnbwd_tmp_;
  std::vector<AttScratch> scratch_;
};

// ------------------------------------------------------------------ init

template <typename T>
void fill_initial_weights(const ModelConfig& cfg, std::uint64_t seed, T* w) {
  Rng rng(seed);
  for (const auto& t : kinded_layout(cfg)) {
    T* p = w + t.info.offset;
    const std::int64_t count = t.info.size();
    switch (t.kind) {
      case TensorKind::weight:
        for (std::int64_t i = 0; i < count; ++i)
          p[i] = T(0.02 * rng.next_gaussian());
        break;
      case TensorKind::norm_gain:
        for (std::int64_t i = 0; i < count; ++i) p[i] = T(1);
        break;
      case TensorKind::bias:
      case TensorKind::norm_bias:
      case TensorKind::head:
        for (std::int64_t i = 0; i < count; ++i) p[i] = T(0);
        break;
    }
  }
}

}  // namespace

Checkpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Checkpoint c;
  c.config = config;
  c.seed = seed;
  const std::size_t count = std::size_t(param_count(config));
  if (config.precision == Precision::f32) {
    c.w32.resize(count);
    fill_initial_weights(config, derive_seed(seed, 1), c.w32.data());
  } else {
    c.w64.resize(count);
    fill_initial_weights(config, derive_seed(seed, 1), c.w64.data());
  }
  return c;
}

// ------------------------------------------------------------------ train

namespace {

std::vector<std::span<const Token>> flatten(const corpus::Corpus& c) {
  std::vector<std::span<const Token>> out;
  for (const auto& g : c.groups)
    for (const auto& s : g.statements)
      out.push_back({s.tokens.data(), s.tokens.size()});
  return out;
}

void check_corpus_fits(const corpus::Corpus& corpus, const ModelConfig& cfg) {
  if (corpus.groups.empty())
    throw Error(ErrorKind::invalid_argument, "corpus is empty");
  if (corpus.vocab_size > cfg.vocab_size)
    throw Error(ErrorKind::invalid_argument,
                "corpus vocab_size " + std::to_string(corpus.vocab_size) +
                    " exceeds model vocab_size " +
                    std::to_string(cfg.vocab_size));
  const int maxlen = corpus.max_statement_len();
  if (maxlen > cfg.context_len)
    throw Error(ErrorKind::context_overflow,
                "statement length " + std::to_string(maxlen) +
                    " exceeds context_len " + std::to_string(cfg.context_len));
}

template <typename T>
TrainResult run_training(std::vector<T> weights, const ModelConfig& cfg,
                         const corpus::Corpus& corpus, const TrainConfig& tc,
                         double base_loss) {
  const auto statements = flatten(corpus);
  const auto layout = kinded_layout(cfg);
  const std::size_t pcount = weights.size();

  std::vector<T> grad(pcount), mom(pcount), vel(pcount);
  Engine<T> engine(cfg, weights.data(), tc.threads);

  TrainResult result;
  std::uint64_t step = 0;
  double best = std::numeric_limits<double>::infinity();
  int stall = 0;

  std::vector<std::size_t> order(statements.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::vector<std::span<const Token>> batch;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(tc.seed, 1000 + std::uint64_t(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::int64_t epoch_pred = 0;
    for (std::size_t at = 0; at < order.size(); at += std::size_t(tc.batch_size)) {
      batch.clear();
      const std::size_t end =
          std::min(order.size(), at + std::size_t(tc.batch_size));
      for (std::size_t i = at; i < end; ++i)
        batch.push_back(statements[order[i]]);

      std::fill(grad.begin(), grad.end(), T(0));
      engine.forward(batch);
      const double loss_sum = double(engine.softmax_and_loss());
      if (!std::isfinite(loss_sum))
        throw DivergenceError(step, "non-finite loss at step " +
                                        std::to_string(step));
      engine.backward(grad.data());

      ++step;
      const T inv_bc1 = T(1) / T(1 - std::pow(tc.beta1, double(step)));
      const T inv_bc2 = T(1) / T(1 - std::pow(tc.beta2, double(step)));
      const auto& ops = kernels::ops<T>();
      for (const auto& t : layout) {
        const T wd = t.info.is_matrix() ? T(tc.weight_decay) : T(0);
        ops.adamw(weights.data() + t.info.offset, mom.data() + t.info.offset,
                  vel.data() + t.info.offset, grad.data() + t.info.offset,
                  int(t.info.size()), T(tc.lr), T(tc.beta1), T(tc.beta2),
                  T(tc.adam_eps), wd, inv_bc1, inv_bc2);
      }

      epoch_loss += loss_sum;
      epoch_pred += engine.pred_count();
    }

    const double mean_loss = epoch_loss / double(epoch_pred);
    result.loss_trace.push_back(mean_loss);

    if (mean_loss < best * (1.0 - tc.plateau_tol)) {
      best = mean_loss;
      stall = 0;
    } else {
      ++stall;
      if (tc.plateau_patience > 0 && stall >= tc.plateau_patience) break;
    }
  }

  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.steps = step;
  ckpt.seed = tc.seed;
  ckpt.final_loss =
      result.loss_trace.empty() ? base_loss : result.loss_trace.back();
  if constexpr (std::is_same_v<T, float>)
    ckpt.w32 = std::move(weights);
  else
    ckpt.w64 = std::move(weights);
  result.checkpoint = std::move(ckpt);
  return result;
}

}  // namespace

TrainResult train(const corpus::Corpus& corpus, const ModelConfig& config,
                  const TrainConfig& tc) {
  config.validate();
  tc.validate();
  check_corpus_fits(corpus, config);
  Checkpoint init = init_checkpoint(config, tc.seed);
  if (config.precision == Precision::f32)
    return run_training<float>(std::move(init.w32), config, corpus, tc, 0.0);
  return run_training<double>(std::move(init.w64), config, corpus, tc, 0.0);
}

TrainResult finetune(const Checkpoint& base, const corpus::Corpus& corpus,
                     const TrainConfig& tc) {
  base.config.validate();
  tc.validate();
  check_corpus_fits(corpus, base.config);
  if (base.weight_count() != std::size_t(param_count(base.config)))
    throw Error(ErrorKind::invalid_argument,
                "base checkpoint weight count does not match its config");
  if (base.config.precision == Precision::f32)
    return run_training<float>(base.w32, base.config, corpus, tc,
                               base.final_loss);
  return run_training<double>(base.w64, base.config, corpus, tc,
                              base.final_loss);
}

// ------------------------------------------------------------------ inference

namespace {

template <typename T>
std::vector<double> forward_rows(const Checkpoint& ckpt,
                                 std::span<const Token> tokens,
                                 const std::vector<T>& weights,
                                 bool last_only) {
  Engine<T> engine(ckpt.config, const_cast<T*>(weights.data()), 1);
  engine.forward({tokens});
  const int V = ckpt.config.vocab_size;
  const int n = int(tokens.size());
  const auto& dops = kernels::ops<double>();
  std::vector<double> row(static_cast<std::size_t>(V));
  std::vector<double> out;
  out.reserve(std::size_t(last_only ? 1 : n) * std::size_t(V));
  for (int r = last_only ? n - 1 : 0; r < n; ++r) {
    const T* lr = engine.logits() + std::size_t(r) * V;
    for (int j = 0; j < V; ++j) row[std::size_t(j)] = double(lr[j]);
    dops.softmax(row.data(), V);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

}  // namespace

std::vector<double> forward(const Checkpoint& ckpt,
                            std::span<const Token> prefix) {
  if (prefix.empty())
    throw Error(ErrorKind::invalid_argument, "prefix must be non-empty");
  if (ckpt.config.precision == Precision::f32)
    return forward_rows<float>(ckpt, prefix, ckpt.w32, true);
  return forward_rows<double>(ckpt, prefix, ckpt.w64, true);
}

std::vector<double> forward_all(const Checkpoint& ckpt,
                                std::span<const Token> tokens) {
  if (tokens.empty())
    throw Error(ErrorKind::invalid_argument, "tokens must be non-empty");
  if (ckpt.config.precision == Precision::f32)
    return forward_rows<float>(ckpt, tokens, ckpt.w32, false);
  return forward_rows<double>(ckpt, tokens, ckpt.w64, false);
}

namespace {

template <typename T>
double evaluate_loss_impl(const Checkpoint& ckpt, const corpus::Corpus& corpus,
                          const std::vector<T>& weights) {
  Engine<T> engine(ckpt.config, const_cast<T*>(weights.data()), 1);
  const auto statements = flatten(corpus);
  double loss = 0.0;
  std::int64_t pred = 0;
  std::vector<std::span<const Token>> batch;
  constexpr std::size_t kChunk = 64;
  for (std::size_t at = 0; at < statements.size(); at += kChunk) {
    batch.assign(statements.begin() + std::ptrdiff_t(at),
                 statements.begin() +
                     std::ptrdiff_t(std::min(statements.size(), at + kChunk)));
    engine.forward(batch);
    loss += double(engine.softmax_and_loss());
    pred += engine.pred_count();
  }
  return loss / double(pred);
}

}  // namespace

double evaluate_loss(const Checkpoint& ckpt, const corpus::Corpus& corpus) {
  check_corpus_fits(corpus, ckpt.config);
  if (ckpt.config.precision == Precision::f32)
    return evaluate_loss_impl<float>(ckpt, corpus, ckpt.w32);
  return evaluate_loss_impl<double>(ckpt, corpus, ckpt.w64);
}

// ------------------------------------------------------------------ grad check

namespace {

template <typename T>
double grad_check_impl(const ModelConfig& cfg, std::span<const Token> sample,
                       double epsilon, std::uint64_t init_seed,
                       GradCheckInit init) {
  const std::size_t pcount = std::size_t(param_count(cfg));
  std::vector<T> w(pcount, T(0));
  if (init == GradCheckInit::random) {
    // Every tensor gets random values (head and biases included) so that
    // gradient signal reaches all layers.
    Rng rng(init_seed);
    for (const auto& t : kinded_layout(cfg)) {
      T* p = w.data() + t.info.offset;
      for (std::int64_t i = 0; i < t.info.size(); ++i) {
        const double v = 0.2 * rng.next_gaussian();
        p[i] = T(t.kind == TensorKind::norm_gain ? 1.0 + v : v);
      }
    }
  }

  Engine<T> engine(cfg, w.data(), 1);
  std::vector<std::span<const Token>> batch{sample};

  std::vector<T> grad(pcount, T(0));
  engine.forward(batch);
  const double pred = double(engine.pred_count());
  engine.softmax_and_loss();
  engine.backward(grad.data());

  // The oracle runs in extended precision with a fourth-order stencil so
  // that its truncation and roundoff both sit far below the comparison
  // tolerance; what is being checked is the T-precision backward pass.
  std::vector<long double> wl(pcount);
  for (std::size_t i = 0; i < pcount; ++i) wl[i] = (long double)w[i];
  Engine<long double> oracle(cfg, wl.data(), 1);
  auto loss_at = [&]() -> long double {
    oracle.forward(batch);
    return oracle.softmax_and_loss() / (long double)pred;
  };

  const long double h = epsilon;
  double max_rel = 0.0;
  for (std::size_t i = 0; i < pcount; ++i) {
    const long double orig = wl[i];
    wl[i] = orig + h;
    const long double lp1 = loss_at();
    wl[i] = orig - h;
    const long double lm1 = loss_at();
    wl[i] = orig + 2 * h;
    const long double lp2 = loss_at();
    wl[i] = orig - 2 * h;
    const long double lm2 = loss_at();
    wl[i] = orig;
    const double fd =
        double((8 * (lp1 - lm1) - (lp2 - lm2)) / (12 * h));
    const double an = double(grad[i]);
    const double rel = std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-12);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace

double grad_check(const ModelConfig& config, std::span<const Token> sample,
                  double epsilon, std::uint64_t init_seed, GradCheckInit init) {
  config.validate();
  if (sample.size() < 2)
    throw Error(ErrorKind::invalid_argument,
                "grad check sample needs at least 2 tokens");
  if (param_count(config) > 10000)
    throw Error(ErrorKind::invalid_argument,
                "grad check requires a micro config (<= 1e4 parameters)");
  if (config.precision == Precision::f32)
    return grad_check_impl<float>(config, sample, epsilon, init_seed, init);
  return grad_check_impl<double>(config, sample, epsilon, init_seed, init);
}

// ------------------------------------------------------------------ file io

namespace {

constexpr char kMagic[4] = {'O', 'V', 'L', 'M'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void append_raw(std::string& out, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

template <typename T>
T read_raw(const std::string& in, std::size_t& at) {
  if (at + sizeof(T) > in.size())
    throw Error(ErrorKind::malformed, "checkpoint file truncated");
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  at += sizeof(T);
  return v;
}

}  // namespace

void write_checkpoint(const Checkpoint& ckpt,
                      const std::filesystem::path& path) {
  ckpt.config.validate();
  if (ckpt.weight_count() != std::size_t(param_count(ckpt.config)))
    throw Error(ErrorKind::invalid_argument,
                "checkpoint weight count does not match config");
  std::string out;
  out.append(kMagic, 4);
  append_raw(out, kFormatVersion);
  for (int v : {ckpt.config.vocab_size, ckpt.config.d_model,
                ckpt.config.n_layers, ckpt.config.n_heads,
                ckpt.config.context_len, ckpt.config.mlp_mult})
    append_raw(out, std::uint32_t(v));
  append_raw(out,
             std::uint32_t(ckpt.config.precision == Precision::f32 ? 32 : 64));
  append_raw(out, ckpt.steps);
  append_raw(out, ckpt.final_loss);
  append_raw(out, ckpt.seed);
  append_raw(out, std::uint64_t(ckpt.weight_count()));
  if (ckpt.config.precision == Precision::f32)
    out.append(reinterpret_cast<const char*>(ckpt.w32.data()),
               ckpt.w32.size() * sizeof(float));
  else
    out.append(reinterpret_cast<const char*>(ckpt.w64.data()),
               ckpt.w64.size() * sizeof(double));
  append_raw(out, fnv1a64(out.data(), out.size()));
  atomic_write_file(path, out);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  std::size_t at = 0;
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0)
    throw Error(ErrorKind::malformed, "not a checkpoint file (bad magic)");
  at = 4;
  if (read_raw<std::uint32_t>(in, at) != kFormatVersion)
    throw Error(ErrorKind::malformed, "unsupported checkpoint format version");

  Checkpoint c;
  c.config.vocab_size = int(read_raw<std::uint32_t>(in, at));
  c.config.d_model = int(read_raw<std::uint32_t>(in, at));
  c.config.n_layers = int(read_raw<std::uint32_t>(in, at));
  c.config.n_heads = int(read_raw<std::uint32_t>(in, at));
  c.config.context_len = int(read_raw<std::uint32_t>(in, at));
  c.config.mlp_mult = int(read_raw<std::uint32_t>(in, at));
  const std::uint32_t prec = read_raw<std::uint32_t>(in, at);
  if (prec != 32 && prec != 64)
    throw Error(ErrorKind::malformed, "bad precision tag");
  c.config.precision = prec == 32 ? Precision::f32 : Precision::f64;
  c.steps = read_raw<std::uint64_t>(in, at);
  c.final_loss = read_raw<double>(in, at);
  c.seed = read_raw<std::uint64_t>(in, at);
  const std::uint64_t count = read_raw<std::uint64_t>(in, at);

  c.config.validate();
  if (count != std::uint64_t(param_count(c.config)))
    throw Error(ErrorKind::malformed,
                "weight count does not match config layout");
  const std::size_t wbytes =
      std::size_t(count) * (prec == 32 ? sizeof(float) : sizeof(double));
  if (in.size() != at + wbytes + sizeof(std::uint64_t))
    throw Error(ErrorKind::malformed, "checkpoint file truncated");

  const std::uint64_t expect = fnv1a64(in.data(), at + wbytes);
  std::uint64_t stored;
  std::memcpy(&stored, in.data() + at + wbytes, sizeof(stored));
  if (stored != expect)
    throw Error(ErrorKind::malformed, "checkpoint checksum mismatch");

  if (prec == 32) {
    c.w32.resize(std::size_t(count));
    std::memcpy(c.w32.data(), in.data() + at, wbytes);
    for (float v : c.w32)
      if (!std::isfinite(v))
        throw Error(ErrorKind::malformed, "non-finite weight in checkpoint");
  } else {
    c.w64.resize(std::size_t(count));
    std::memcpy(c.w64.data(), in.data() + at, wbytes);
    for (double v : c.w64)
      if (!std::isfinite(v))
        throw Error(ErrorKind::malformed, "non-finite weight in checkpoint");
  }
  return c;
}

}  // namespace ovl::lm
