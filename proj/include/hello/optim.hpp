#pragma once

#include <cmath>
#include <vector>

#include "hello/common.hpp"
#include "hello/lora.hpp"
#include "hello/nn.hpp"
#include "hello/tensor.hpp"

namespace hello {

template <class T>
struct ParamRef {
  Tensor<T>* value;
  Tensor<T>* grad;
};

template <class T>
std::vector<ParamRef<T>> net_param_refs(ConvNet<T>& net) {
  std::vector<ParamRef<T>> refs;
  for (auto& p : net.params()) refs.push_back({&p.value, &p.grad});
  return refs;
}

// A and B of every adapter, in map (name) order: stable pairing with the
// optimizer state across steps.
template <class T>
std::vector<ParamRef<T>> adapter_param_refs(AdapterMap<T>& adapters,
                                            AdapterGradMap<T>& grads) {
  std::vector<ParamRef<T>> refs;
  for (auto& [name, ad] : adapters) {
    LoraGrad<T>& g = grads.at(name);
    refs.push_back({&ad.A, &g.dA});
    refs.push_back({&ad.B, &g.dB});
  }
  return refs;
}

// Cosine decay from 1 to 0 over `total` steps.
inline double cosine_scale(int64_t step, int64_t total) {
  if (total <= 1) return 1.0;
  double t = static_cast<double>(step) / static_cast<double>(total - 1);
  return 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

template <class T>
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (lr <= 0.0) throw ConfigError("learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
  }

  void step(const std::vector<ParamRef<T>>& params, double lr_scale) {
    bind(params);
    double lr = lr_ * lr_scale;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& w = *params[i].value;
      Tensor<T>& g = *params[i].grad;
      Tensor<T>& v = vel_[i];
      for (int64_t j = 0; j < w.numel(); ++j) {
        v[j] = static_cast<T>(momentum_) * v[j] + g[j];
        w[j] -= static_cast<T>(lr) * v[j];
      }
    }
  }

 private:
  void bind(const std::vector<ParamRef<T>>& params) {
    if (vel_.empty()) {
      for (const auto& p : params) vel_.push_back(Tensor<T>::zeros(p.value->shape));
      return;
    }
    if (vel_.size() != params.size())
      throw ValidationError("optimizer bound to a different parameter set");
  }

  double lr_, momentum_;
  std::vector<Tensor<T>> vel_;
};

template <class T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0.0) throw ConfigError("learning rate must be positive");
  }

  void step(const std::vector<ParamRef<T>>& params, double lr_scale) {
    bind(params);
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    double lr = lr_ * lr_scale;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& w = *params[i].value;
      Tensor<T>& g = *params[i].grad;
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (int64_t j = 0; j < w.numel(); ++j) {
        double gj = static_cast<double>(g[j]);
        double mj = beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * gj;
        double vj = beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        w[j] -= static_cast<T>(lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
      }
    }
  }

 private:
  void bind(const std::vector<ParamRef<T>>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Tensor<T>::zeros(p.value->shape));
        v_.push_back(Tensor<T>::zeros(p.value->shape));
      }
      return;
    }
    if (m_.size() != params.size())
      throw ValidationError("optimizer bound to a different parameter set");
  }

  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace hello
