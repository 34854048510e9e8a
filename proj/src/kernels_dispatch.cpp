#include <cstdlib>
#include <stdexcept>
#include <string>

#include "sacn/kernels.hpp"

namespace sacn::kernels {
namespace {

Backend g_selected = Backend::Auto;

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(_M_X64) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend resolve_auto() {
  if (const char* env = std::getenv("SACN_KERNELS")) {
    const Backend b = parse_backend(env);
    if (b != Backend::Auto) return b;
  }
  return avx2_available() ? Backend::Avx2 : Backend::Scalar;
}

Backend effective() {
  return g_selected == Backend::Auto ? resolve_auto() : g_selected;
}

}  // namespace

bool avx2_available() {
  static const bool ok = avx2_f32() != nullptr && cpu_has_avx2_fma();
  return ok;
}

Backend parse_backend(const std::string& name) {
  if (name == "auto") return Backend::Auto;
  if (name == "scalar") return Backend::Scalar;
  if (name == "avx2") return Backend::Avx2;
  throw std::invalid_argument("unknown kernel backend '" + name +
                              "' (expected auto|scalar|avx2)");
}

const char* backend_name(Backend b) {
  switch (b) {
    case Backend::Auto: return "auto";
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
  }
  return "?";
}

void select(Backend b) {
  if (b == Backend::Avx2 && !avx2_available())
    throw std::invalid_argument("avx2 kernels requested but not available on this CPU");
  g_selected = b;
}

Backend selected() { return g_selected; }

template <>
const Table<float>& active<float>() {
  return effective() == Backend::Avx2 ? *avx2_f32() : scalar_f32();
}

template <>
const Table<double>& active<double>() {
  return effective() == Backend::Avx2 ? *avx2_f64() : scalar_f64();
}

}  // namespace sacn::kernels
