// Reference implementations. Every kernel uses the same fixed summation
// order as its AVX2 counterpart's scalar tail, and the tests compare the two
// backends on random inputs.

#include <cmath>
#include <cstddef>

#include "ovl/kernels.hpp"

namespace ovl::kernels::detail {
namespace {

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int m, int n, int k,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + std::size_t(i) * k;
    T* ci = c + std::size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + std::size_t(j) * k;
      T s = 0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + s : s;
    }
  }
}

template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int m, int n, int k,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + std::size_t(i) * n;
    if (!accumulate)
      for (int j = 0; j < n; ++j) ci[j] = 0;
    const T* ai = a + std::size_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + std::size_t(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
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
    for (int i = 0; i < m; ++i) {
      const T av = ap[i];
      T* ci = c + std::size_t(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
T dot(const T* a, const T* b, int n) {
  T s = 0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void softmax(T* x, int n) {
  T mx = x[0];
  for (int i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
  T sum = 0;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  const T inv = T(1) / sum;
  for (int i = 0; i < n; ++i) x[i] *= inv;
}

template <typename T>
void layernorm(const T* x, const T* gain, const T* bias, T* y, T* mean,
               T* rstd, int n, T eps) {
  T mu = 0;
  for (int i = 0; i < n; ++i) mu += x[i];
  mu /= T(n);
  T var = 0;
  for (int i = 0; i < n; ++i) {
    const T d = x[i] - mu;
    var += d * d;
  }
  var /= T(n);
  const T rs = T(1) / std::sqrt(var + eps);
  for (int i = 0; i < n; ++i) y[i] = (x[i] - mu) * rs * gain[i] + bias[i];
  *mean = mu;
  *rstd = rs;
}

template <typename T>
void layernorm_bwd(const T* x, const T* gain, T mean, T rstd, const T* dy,
                   T* dx, T* dgain, T* dbias, int n) {
  T sum_dxhat = 0;
  T sum_dxhat_xhat = 0;
  for (int i = 0; i < n; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T dxhat = dy[i] * gain[i];
    sum_dxhat += dxhat;
    sum_dxhat_xhat += dxhat * xhat;
    dgain[i] += dy[i] * xhat;
    dbias[i] += dy[i];
  }
  const T inv_n = T(1) / T(n);
  for (int i = 0; i < n; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T dxhat = dy[i] * gain[i];
    dx[i] = rstd * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n);
  }
}

// Exact GELU, x * Phi(x).
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
void adamw(T* w, T* m, T* v, const T* g, int n, T lr, T beta1, T beta2, T eps,
           T weight_decay, T inv_bc1, T inv_bc2) {
  for (int i = 0; i < n; ++i) {
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
const Ops<float>& scalar_ops<float>() {
  static const Ops<float> o = make_ops<float>();
  return o;
}

template <>
const Ops<double>& scalar_ops<double>() {
  static const Ops<double> o = make_ops<double>();
  return o;
}

template <>
const Ops<long double>& scalar_ops<long double>() {
  static const Ops<long double> o = make_ops<long double>();
  return o;
}

}  // namespace ovl::kernels::detail
