#include "ovl/kernels.hpp"

#include <atomic>
#include <string>

#include "ovl/common.hpp"

namespace ovl::kernels {

bool backend_supported(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
#if OVL_HAVE_AVX2_BUILD
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

Backend detected_backend() {
  return backend_supported(Backend::avx2) ? Backend::avx2 : Backend::scalar;
}

namespace {
std::atomic<Backend>& active_slot() {
  static std::atomic<Backend> b{detected_backend()};
  return b;
}
}  // namespace

Backend active_backend() { return active_slot().load(); }

void set_backend(Backend b) {
  if (!backend_supported(b))
    throw Error(ErrorKind::invalid_argument,
                std::string("kernel backend not supported on this CPU: ") +
                    std::string(backend_name(b)));
  active_slot().store(b);
}

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::scalar:
      return "scalar";
    case Backend::avx2:
      return "avx2";
  }
  return "?";
}

bool set_backend_by_name(std::string_view name) {
  if (name == "scalar") {
    set_backend(Backend::scalar);
    return true;
  }
  if (name == "avx2") {
    set_backend(Backend::avx2);
    return true;
  }
  if (name == "auto") {
    set_backend(detected_backend());
    return true;
  }
  return false;
}

template <typename T>
const Ops<T>& ops(Backend b) {
  switch (b) {
#if OVL_HAVE_AVX2_BUILD
    case Backend::avx2:
      return detail::avx2_ops<T>();
#endif
    default:
      return detail::scalar_ops<T>();
  }
}

template const Ops<float>& ops<float>(Backend);
template const Ops<double>& ops<double>(Backend);

// Extended precision exists only for the gradient-check oracle; it always
// uses the scalar reference path.
template <>
const Ops<long double>& ops<long double>(Backend) {
  return detail::scalar_ops<long double>();
}

}  // namespace ovl::kernels
