#pragma once

#include <map>
#include <string>

#include "hello/common.hpp"
#include "hello/kernels.hpp"
#include "hello/rng.hpp"
#include "hello/tensor.hpp"

namespace hello {

// Low-rank increment for one base weight viewed as a d x k matrix
// (convolution weights flatten to out_channels x in_channels*kh*kw).
// Effective weight is base + scale * A * B.
template <class T>
struct LoraAdapter {
  std::string target_name;
  Tensor<T> A;  // (d, r), Gaussian init
  Tensor<T> B;  // (r, k), zero init
  T scale = T(1);

  int64_t rank() const { return A.dim(1); }
  int64_t d() const { return A.dim(0); }
  int64_t k() const { return B.dim(1); }

  void validate() const {
    if (target_name.empty()) throw ValidationError("adapter target name empty");
    if (A.rank() != 2 || B.rank() != 2)
      throw ValidationError("adapter matrices must be 2-D: " + target_name);
    if (A.dim(1) != B.dim(0))
      throw ValidationError("adapter rank mismatch between A and B: " + target_name);
    int64_t r = rank();
    if (r < 1 || r > std::min(d(), k()))
      throw ValidationError("adapter rank " + std::to_string(r) +
                            " exceeds min(d,k) for " + target_name);
    if (!(scale > T(0))) throw ValidationError("adapter scale must be positive");
  }

  // scale * A * B, shape (d, k).
  Tensor<T> increment() const {
    Tensor<T> out = Tensor<T>::zeros({d(), k()});
    kernels::par::gemm<T>(false, false, d(), k(), rank(), scale, A.ptr(), rank(),
                          B.ptr(), k(), T(0), out.ptr(), k());
    return out;
  }
};

template <class T>
LoraAdapter<T> make_adapter(const std::string& target, int64_t d, int64_t k,
                            int64_t rank, T scale, Rng& rng) {
  if (rank < 1 || rank > std::min(d, k))
    throw ValidationError("adapter rank " + std::to_string(rank) +
                          " exceeds min(d,k)=" + std::to_string(std::min(d, k)) +
                          " for " + target);
  LoraAdapter<T> ad;
  ad.target_name = target;
  ad.A = Tensor<T>({d, rank});
  for (int64_t i = 0; i < ad.A.numel(); ++i)
    ad.A[i] = static_cast<T>(rng.gauss(0.0, 0.01));
  ad.B = Tensor<T>::zeros({rank, k});
  ad.scale = scale;
  ad.validate();
  return ad;
}

// Adapters keyed by target weight name; std::map keeps iteration sorted so
// serialization and gradient application are order-stable.
template <class T>
using AdapterMap = std::map<std::string, LoraAdapter<T>>;

template <class T>
struct LoraGrad {
  Tensor<T> dA;
  Tensor<T> dB;
};

template <class T>
using AdapterGradMap = std::map<std::string, LoraGrad<T>>;

// Zeroed gradient slots matching an adapter set.
template <class T>
AdapterGradMap<T> make_adapter_grads(const AdapterMap<T>& adapters) {
  AdapterGradMap<T> g;
  for (const auto& [name, ad] : adapters) {
    g.emplace(name, LoraGrad<T>{Tensor<T>::zeros(ad.A.shape),
                                Tensor<T>::zeros(ad.B.shape)});
  }
  return g;
}

}  // namespace hello
