#include "gpaslab/kernels.hpp"

#include "kernels_scalar.hpp"

namespace gpaslab::kern {

namespace avx2 {
template <class T>
Ops<T> make_ops();
}
namespace avx512 {
template <class T>
Ops<T> make_ops();
}

namespace {

template <class T>
Ops<T> make_scalar_ops() {
  return Ops<T>{scalar::add<T>,     scalar::sub<T>,     scalar::mul<T>,
                scalar::scale<T>,   scalar::axpy<T>,    scalar::dot<T>,
                scalar::sum<T>,     scalar::sum_sq<T>,  scalar::gemm_nn<T>,
                scalar::gemm_nt<T>, scalar::gemm_tn<T>};
}

bool have_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

bool have_avx512() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx512f");
#else
  return false;
#endif
}

}  // namespace

Isa active_isa() {
  static const Isa isa =
      have_avx512() ? Isa::Avx512 : (have_avx2() ? Isa::Avx2 : Isa::Scalar);
  return isa;
}

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::Avx2:
      return "avx2";
    case Isa::Avx512:
      return "avx512";
    default:
      return "scalar";
  }
}

template <class T>
const Ops<T>& ops(Isa isa) {
  static const Ops<T> scalar_ops = make_scalar_ops<T>();
  static const Ops<T> avx2_ops = have_avx2() ? avx2::make_ops<T>() : scalar_ops;
  static const Ops<T> avx512_ops =
      have_avx512() ? avx512::make_ops<T>() : scalar_ops;
  switch (isa) {
    case Isa::Avx2:
      return avx2_ops;
    case Isa::Avx512:
      return avx512_ops;
    default:
      return scalar_ops;
  }
}

template <class T>
const Ops<T>& ops() {
  return ops<T>(active_isa());
}

template const Ops<float>& ops<float>(Isa);
template const Ops<double>& ops<double>(Isa);
template const Ops<float>& ops<float>();
template const Ops<double>& ops<double>();

}  // namespace gpaslab::kern
