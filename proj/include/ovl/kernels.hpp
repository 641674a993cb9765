#pragma once

#include <string_view>

namespace ovl::kernels {

// Numeric inner loops used by the language model. Two implementations exist
// behind the same table: a scalar reference and an AVX2+FMA variant compiled
// in its own translation unit. The variant is picked once at runtime from
// CPU capabilities and can be forced (tests compare both; the CLI exposes
// --kernel). Within one backend every kernel uses a fixed summation order,
// so results are reproducible run to run.
enum class Backend { scalar, avx2 };

bool backend_supported(Backend b);
Backend detected_backend();  // best supported backend on this CPU
Backend active_backend();
void set_backend(Backend b);  // throws Error(invalid_argument) if unsupported
std::string_view backend_name(Backend b);
bool set_backend_by_name(std::string_view name);

// All matrices are row-major and contiguous.
template <typename T>
struct Ops {
  // c[m x n] = a[m x k] * b[n x k]^T        (+= when accumulate)
  void (*matmul_nt)(const T* a, const T* b, T* c, int m, int n, int k,
                    bool accumulate);
  // c[m x n] = a[m x k] * b[k x n]
  void (*matmul_nn)(const T* a, const T* b, T* c, int m, int n, int k,
                    bool accumulate);
  // c[m x n] = a[k x m]^T * b[k x n]
  void (*matmul_tn)(const T* a, const T* b, T* c, int m, int n, int k,
                    bool accumulate);
  T (*dot)(const T* a, const T* b, int n);
  void (*axpy)(T alpha, const T* x, T* y, int n);  // y += alpha * x
  // In-place numerically stable softmax over n entries.
  void (*softmax)(T* x, int n);
  // One row: y = (x - mean) * rstd * gain + bias; mean/rstd written out.
  void (*layernorm)(const T* x, const T* gain, const T* bias, T* y, T* mean,
                    T* rstd, int n, T eps);
  // One row backward; dgain/dbias accumulate, dx is overwritten.
  void (*layernorm_bwd)(const T* x, const T* gain, T mean, T rstd, const T* dy,
                        T* dx, T* dgain, T* dbias, int n);
  void (*gelu)(const T* x, T* y, int n);
  // dx = dy * gelu'(x)
  void (*gelu_bwd)(const T* x, const T* dy, T* dx, int n);
  // AdamW step with decoupled weight decay; inv_bc1 = 1/(1-beta1^t) etc.
  void (*adamw)(T* w, T* m, T* v, const T* g, int n, T lr, T beta1, T beta2,
                T eps, T weight_decay, T inv_bc1, T inv_bc2);
};

template <typename T>
const Ops<T>& ops(Backend b);

// Extended precision backs only the gradient-check oracle; it is always the
// scalar reference implementation.
template <>
const Ops<long double>& ops<long double>(Backend b);

template <typename T>
inline const Ops<T>& ops() {
  return ops<T>(active_backend());
}

namespace detail {
template <typename T>
const Ops<T>& scalar_ops();
template <typename T>
const Ops<T>& avx2_ops();  // defined only when built with AVX2 support
}  // namespace detail

}  // namespace ovl::kernels
