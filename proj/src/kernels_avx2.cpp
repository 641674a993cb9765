// AVX2+FMA kernel variants. This translation unit is the only one compiled
// with -mavx2 -mfma; callers reach it through the runtime dispatch table.
//
// Summation orders are fixed (lane-partitioned accumulators combined in a
// fixed order), so each variant is deterministic run to run. Results may
// differ from the scalar reference in the last bits; the equivalence tests
// bound that difference.

#include <immintrin.h>

#include <cmath>
#include <cstddef>

#include "ovl/kernels.hpp"

namespace ovl::kernels::detail {
namespace {

template <typename T>
struct vec;

template <>
struct vec<float> {
  using reg = __m256;
  static constexpr int width = 8;
  static reg zero() { return _mm256_setzero_ps(); }
  static reg set1(float v) { return _mm256_set1_ps(v); }
  static reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
  static reg fma(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
  static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_ps(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
  static reg div(reg a, reg b) { return _mm256_div_ps(a, b); }
  static reg sqrt(reg a) { return _mm256_sqrt_ps(a); }
  static reg max(reg a, reg b) { return _mm256_max_ps(a, b); }
  static float hsum(reg v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    __m128 s = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, s);
    s = _mm_add_ss(s, sh);
    return _mm_cvtss_f32(s);
  }
  static float hmax(reg v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_max_ps(lo, hi);
    lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_max_ss(lo, _mm_shuffle_ps(lo, lo, 1));
    return _mm_cvtss_f32(lo);
  }
};

template <>
struct vec<double> {
  using reg = __m256d;
  static constexpr int width = 4;
  static reg zero() { return _mm256_setzero_pd(); }
  static reg set1(double v) { return _mm256_set1_pd(v); }
  static reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  static reg fma(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
  static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_pd(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
  static reg div(reg a, reg b) { return _mm256_div_pd(a, b); }
  static reg sqrt(reg a) { return _mm256_sqrt_pd(a); }
  static reg max(reg a, reg b) { return _mm256_max_pd(a, b); }
  static double hsum(reg v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
  }
  static double hmax(reg v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_max_pd(lo, hi);
    lo = _mm_max_sd(lo, _mm_unpackhi_pd(lo, lo));
    return _mm_cvtsd_f64(lo);
  }
};

template <typename T>
T dot_tail(const T* a, const T* b, int from, int n) {
  T s = 0;
  for (int i = from; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Dot products vectorized over k, with 4 rows of b per pass so a's row is
// loaded once per 4 outputs.
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int m, int n, int k,
               bool accumulate) {
  using V = vec<T>;
  const int kv = k - k % V::width;
  for (int i = 0; i < m; ++i) {
    const T* ai = a + std::size_t(i) * k;
    T* ci = c + std::size_t(i) * n;
    int j = 0;
    for (; j + 4 <= n; j += 4) {
      const T* b0 = b + std::size_t(j) * k;
      const T* b1 = b0 + k;
      const T* b2 = b1 + k;
      const T* b3 = b2 + k;
      typename V::reg s0 = V::zero(), s1 = V::zero(), s2 = V::zero(),
                      s3 = V::zero();
      for (int p = 0; p < kv; p += V::width) {
        const auto av = V::load(ai + p);
        s0 = V::fma(av, V::load(b0 + p), s0);
        s1 = V::fma(av, V::load(b1 + p), s1);
        s2 = V::fma(av, V::load(b2 + p), s2);
        s3 = V::fma(av, V::load(b3 + p), s3);
      }
      T r0 = V::hsum(s0) + dot_tail(ai, b0, kv, k);
      T r1 = V::hsum(s1) + dot_tail(ai, b1, kv, k);
      T r2 = V::hsum(s2) + dot_tail(ai, b2, kv, k);
      T r3 = V::hsum(s3) + dot_tail(ai, b3, kv, k);
      if (accumulate) {
        ci[j] += r0;
        ci[j + 1] += r1;
        ci[j + 2] += r2;
        ci[j + 3] += r3;
      } else {
        ci[j] = r0;
        ci[j + 1] = r1;
        ci[j + 2] = r2;
        ci[j + 3] = r3;
      }
    }
    for (; j < n; ++j) {
      const T* bj = b + std::size_t(j) * k;
      typename V::reg s = V::zero();
      for (int p = 0; p < kv; p += V::width)
        s = V::fma(V::load(ai + p), V::load(bj + p), s);
      const T r = V::hsum(s) + dot_tail(ai, bj, kv, k);
      ci[j] = accumulate ? ci[j] + r : r;
    }
  }
}

// Broadcast-a / sweep-b rows, vectorized over n.
template <typename T>
void row_axpy(T alpha, const T* x, T* y, int n) {
  using V = vec<T>;
  const auto av = V::set1(alpha);
  int j = 0;
  for (; j + V::width <= n; j += V::width)
    V::store(y + j, V::fma(av, V::load(x + j), V::load(y + j)));
  for (; j < n; ++j) y[j] += alpha * x[j];
}

template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int m, int n, int k,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + std::size_t(i) * n;
    if (!accumulate)
      for (int j = 0; j < n; ++j) ci[j] = 0;
    const T* ai = a + std::size_t(i) * k;
    for (int p = 0; p < k; ++p)
      row_axpy(ai[p], b + std::size_t(p) * n, ci, n);
  }
}

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int m, int n, int k,
               bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < std::size_t(m) * n; ++i) c[i] = 0;
  for (int p = 0; p < k; ++p) {
    const T* ap = a + std::size_t(p) * m;
    const T* bp = b + std::size_t(p) * n;
    for (int i = 0; i < m; ++i) row_axpy(ap[i], bp, c + std::size_t(i) * n, n);
  }
}

template <typename T>
T dot(const T* a, const T* b, int n) {
  using V = vec<T>;
  typename V::reg s = V::zero();
  int i = 0;
  for (; i + V::width <= n; i += V::width)
    s = V::fma(V::load(a + i), V::load(b + i), s);
  return V::hsum(s) + dot_tail(a, b, i, n);
}

template <typename T>
void softmax(T* x, int n) {
  using V = vec<T>;
  T mx;
  if (n >= V::width) {
    auto mv = V::load(x);
    int i = V::width;
    for (; i + V::width <= n; i += V::width) mv = V::max(mv, V::load(x + i));
    mx = V::hmax(mv);
    for (; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
  } else {
    mx = x[0];
    for (int i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
  }
  T sum = 0;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  const T inv = T(1) / sum;
  const auto iv = V::set1(inv);
  int i = 0;
  for (; i + V::width <= n; i += V::width)
    V::store(x + i, V::mul(V::load(x + i), iv));
  for (; i < n; ++i) x[i] *= inv;
}

template <typename T>
void layernorm(const T* x, const T* gain, const T* bias, T* y, T* mean,
               T* rstd, int n, T eps) {
  using V = vec<T>;
  typename V::reg sv = V::zero();
  int i = 0;
  for (; i + V::width <= n; i += V::width) sv = V::add(sv, V::load(x + i));
  T mu = V::hsum(sv);
  for (; i < n; ++i) mu += x[i];
  mu /= T(n);

  const auto muv = V::set1(mu);
  typename V::reg vv = V::zero();
  i = 0;
  for (; i + V::width <= n; i += V::width) {
    const auto d = V::sub(V::load(x + i), muv);
    vv = V::fma(d, d, vv);
  }
  T var = V::hsum(vv);
  for (; i < n; ++i) {
    const T d = x[i] - mu;
    var += d * d;
  }
  var /= T(n);
  const T rs = T(1) / std::sqrt(var + eps);

  const auto rsv = V::set1(rs);
  i = 0;
  for (; i + V::width <= n; i += V::width) {
    const auto xhat = V::mul(V::sub(V::load(x + i), muv), rsv);
    V::store(y + i, V::fma(xhat, V::load(gain + i), V::load(bias + i)));
  }
  for (; i < n; ++i) y[i] = (x[i] - mu) * rs * gain[i] + bias[i];
  *mean = mu;
  *rstd = rs;
}

template <typename T>
void layernorm_bwd(const T* x, const T* gain, T mean, T rstd, const T* dy,
                   T* dx, T* dgain, T* dbias, int n) {
  using V = vec<T>;
  const auto muv = V::set1(mean);
  const auto rsv = V::set1(rstd);
  typename V::reg s1 = V::zero(), s2 = V::zero();
  int i = 0;
  for (; i + V::width <= n; i += V::width) {
    const auto xhat = V::mul(V::sub(V::load(x + i), muv), rsv);
    const auto dyv = V::load(dy + i);
    const auto dxhat = V::mul(dyv, V::load(gain + i));
    s1 = V::add(s1, dxhat);
    s2 = V::fma(dxhat, xhat, s2);
    V::store(dgain + i, V::fma(dyv, xhat, V::load(dgain + i)));
    V::store(dbias + i, V::add(dyv, V::load(dbias + i)));
  }
  T sum_dxhat = V::hsum(s1);
  T sum_dxhat_xhat = V::hsum(s2);
  for (; i < n; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T dxhat = dy[i] * gain[i];
    sum_dxhat += dxhat;
    sum_dxhat_xhat += dxhat * xhat;
    dgain[i] += dy[i] * xhat;
    dbias[i] += dy[i];
  }
  const T a = sum_dxhat / T(n);
  const T b = sum_dxhat_xhat / T(n);
  const auto av = V::set1(a);
  const auto bv = V::set1(b);
  i = 0;
  for (; i + V::width <= n; i += V::width) {
    const auto xhat = V::mul(V::sub(V::load(x + i), muv), rsv);
    const auto dxhat = V::mul(V::load(dy + i), V::load(gain + i));
    const auto t = V::sub(V::sub(dxhat, av), V::mul(xhat, bv));
    V::store(dx + i, V::mul(rsv, t));
  }
  for (; i < n; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T dxhat = dy[i] * gain[i];
    dx[i] = rstd * (dxhat - a - xhat * b);
  }
}

// erf/exp stay scalar calls; the surrounding arithmetic is not worth
// vectorizing against them.
template <typename T>
void gelu(const T* x, T* y, int n) {
  for (int i = 0; i < n; ++i) {
    const T cdf = T(0.5) * (T(1) + std::erf(x[i] * T(0.7071067811865475)));
    y[i] = x[i] * cdf;
  }
}

template <typename T>
void gelu_bwd(const T* x, const T* dy, T* dx, int n) {
  for (int i = 0; i < n; ++i) {
    const T cdf = T(0.5) * (T(1) + std::erf(x[i] * T(0.7071067811865475)));
    const T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * x[i] * x[i]);
    dx[i] = dy[i] * (cdf + x[i] * pdf);
  }
}

template <typename T>
void axpy(T alpha, const T* x, T* y, int n) {
  row_axpy(alpha, x, y, n);
}

template <typename T>
void adamw(T* w, T* m, T* v, const T* g, int n, T lr, T beta1, T beta2, T eps,
           T weight_decay, T inv_bc1, T inv_bc2) {
  using V = vec<T>;
  const auto b1 = V::set1(beta1);
  const auto b1c = V::set1(T(1) - beta1);
  const auto b2 = V::set1(beta2);
  const auto b2c = V::set1(T(1) - beta2);
  const auto bc1 = V::set1(inv_bc1);
  const auto bc2 = V::set1(inv_bc2);
  const auto epsv = V::set1(eps);
  const auto lrv = V::set1(lr);
  const auto wdv = V::set1(weight_decay);
  int i = 0;
  for (; i + V::width <= n; i += V::width) {
    const auto gv = V::load(g + i);
    auto mv = V::fma(b1, V::load(m + i), V::mul(b1c, gv));
    auto vv = V::fma(b2, V::load(v + i), V::mul(b2c, V::mul(gv, gv)));
    V::store(m + i, mv);
    V::store(v + i, vv);
    const auto mhat = V::mul(mv, bc1);
    const auto vhat = V::mul(vv, bc2);
    const auto wv = V::load(w + i);
    const auto upd =
        V::add(V::div(mhat, V::add(V::sqrt(vhat), epsv)), V::mul(wdv, wv));
    V::store(w + i, V::sub(wv, V::mul(lrv, upd)));
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
    const T mhat = m[i] * inv_bc1;
    const T vhat = v[i] * inv_bc2;
    w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
  }
}

template <typename T>
Ops<T> make_ops() {
  Ops<T> o;
  o.matmul_nt = &matmul_nt<T>;
  o.matmul_nn = &matmul_nn<T>;
  o.matmul_tn = &matmul_tn<T>;
  o.dot = &dot<T>;
  o.axpy = &axpy<T>;
  o.softmax = &softmax<T>;
  o.layernorm = &layernorm<T>;
  o.layernorm_bwd = &layernorm_bwd<T>;
  o.gelu = &gelu<T>;
  o.gelu_bwd = &gelu_bwd<T>;
  o.adamw = &adamw<T>;
  return o;
}

}  // namespace

template <>
const Ops<float>& avx2_ops<float>() {
  static const Ops<float> o = make_ops<float>();
  return o;
}

template <>
const Ops<double>& avx2_ops<double>() {
  static const Ops<double> o = make_ops<double>();
  return o;
}

}  // namespace ovl::kernels::detail
