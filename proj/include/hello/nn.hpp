#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hello/archive.hpp"
#include "hello/common.hpp"
#include "hello/kernels.hpp"
#include "hello/lora.hpp"
#include "hello/rng.hpp"
#include "hello/tensor.hpp"

namespace hello {

// Small convnet family shared by the toy encoder, teachers, and students:
// N blocks of [3x3 conv (stride 1, pad 1, no bias) -> GroupNorm -> ReLU ->
// 2x2 average pool], then global average pool and one linear layer.
//
// Convolution weights are (Co, Ci, 3, 3) and are viewed as Co x (Ci*9)
// matrices for GEMM and for low-rank adapters. The linear layer follows the
// row-vector convention y = x*W + b with W of shape (in, out), so adapters
// on it use d = in, k = out.
struct ConvNetSpec {
  std::string arch_id;
  std::string param_prefix;  // "enc/", "net/", ...
  int64_t in_channels = 3;
  int64_t in_h = 32;
  int64_t in_w = 32;
  std::vector<int64_t> conv_channels;
  int64_t gn_groups = 4;
  int64_t out_dim = 10;
};

inline std::vector<int64_t> arch_conv_channels(const std::string& arch) {
  if (arch == "toy_cnn") return {16, 32, 64};
  if (arch == "convnet_s") return {8, 16, 32};
  if (arch == "convnet_w") return {16, 32};
  if (arch == "micro") return {4};
  throw ConfigError("unknown architecture: " + arch);
}

inline int64_t arch_gn_groups(const std::string& arch) {
  return arch == "micro" ? 2 : 4;
}

inline ConvNetSpec make_convnet_spec(const std::string& arch,
                                     const std::string& param_prefix,
                                     int64_t in_channels, int64_t in_h,
                                     int64_t in_w, int64_t out_dim) {
  ConvNetSpec s;
  s.arch_id = arch;
  s.param_prefix = param_prefix;
  s.in_channels = in_channels;
  s.in_h = in_h;
  s.in_w = in_w;
  s.conv_channels = arch_conv_channels(arch);
  s.gn_groups = arch_gn_groups(arch);
  s.out_dim = out_dim;
  int64_t div = int64_t(1) << s.conv_channels.size();
  if (in_h % div != 0 || in_w % div != 0)
    throw ConfigError("input " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                      " not divisible by pooling factor " + std::to_string(div) +
                      " of " + arch);
  for (int64_t c : s.conv_channels)
    if (c % s.gn_groups != 0)
      throw ConfigError("channels not divisible by GroupNorm groups in " + arch);
  if (out_dim < 1) throw ValidationError("out_dim must be >= 1");
  return s;
}

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

template <class T>
class ConvNet {
 public:
  static constexpr T kGnEps = T(1e-5);

  struct Ctx {
    int64_t batch = 0;
    std::vector<Tensor<T>> col;     // per block: (N, K, Ho*Wo)
    std::vector<Tensor<T>> xhat;    // per block: GN normalized activations
    std::vector<Tensor<T>> invstd;  // per block: (N*G)
    std::vector<Tensor<T>> gn_out;  // per block: pre-ReLU
    Tensor<T> feat;                 // (N, C_last), input of the linear layer
  };

  explicit ConvNet(ConvNetSpec spec) : spec_(std::move(spec)) {
    int64_t ci = spec_.in_channels;
    for (std::size_t b = 0; b < spec_.conv_channels.size(); ++b) {
      int64_t co = spec_.conv_channels[b];
      std::string base = spec_.param_prefix;
      add_param(base + "conv" + std::to_string(b) + "/w", Tensor<T>::zeros({co, ci, 3, 3}));
      add_param(base + "gn" + std::to_string(b) + "/gamma", Tensor<T>::full({co}, T(1)));
      add_param(base + "gn" + std::to_string(b) + "/beta", Tensor<T>::zeros({co}));
      ci = co;
    }
    add_param(spec_.param_prefix + "fc/w", Tensor<T>::zeros({ci, spec_.out_dim}));
    add_param(spec_.param_prefix + "fc/b", Tensor<T>::zeros({spec_.out_dim}));
  }

  // He init for convs, 1/sqrt(fan_in) for the linear layer; GN affine stays
  // at identity. Draw order is fixed, so init is a pure function of the rng.
  void init_weights(Rng& rng) {
    for (auto& p : params_) {
      if (p.name.find("/conv") != std::string::npos) {
        int64_t fan_in = p.value.dim(1) * p.value.dim(2) * p.value.dim(3);
        double std = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (int64_t i = 0; i < p.value.numel(); ++i)
          p.value[i] = static_cast<T>(rng.gauss(0.0, std));
      } else if (p.name.size() >= 4 &&
                 p.name.compare(p.name.size() - 4, 4, "fc/w") == 0) {
        double std = std::sqrt(1.0 / static_cast<double>(p.value.dim(0)));
        for (int64_t i = 0; i < p.value.numel(); ++i)
          p.value[i] = static_cast<T>(rng.gauss(0.0, std));
      }
    }
  }

  const ConvNetSpec& spec() const { return spec_; }
  int64_t num_blocks() const { return static_cast<int64_t>(spec_.conv_channels.size()); }

  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }

  NamedParam<T>& param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("no such parameter: " + name);
    return params_[it->second];
  }
  const NamedParam<T>& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("no such parameter: " + name);
    return params_[it->second];
  }

  int64_t num_param_values() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_)
      std::fill(p.grad.ptr(), p.grad.ptr() + p.grad.numel(), T(0));
  }

  // Weight names eligible for low-rank adapters, with their (d, k) view.
  std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>> lora_targets() const {
    std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>> out;
    for (const auto& p : params_) {
      if (p.name.find("/conv") != std::string::npos) {
        out.push_back({p.name,
                       {p.value.dim(0), p.value.dim(1) * p.value.dim(2) * p.value.dim(3)}});
      } else if (p.name.size() >= 4 &&
                 p.name.compare(p.name.size() - 4, 4, "fc/w") == 0) {
        out.push_back({p.name, {p.value.dim(0), p.value.dim(1)}});
      }
    }
    return out;
  }

  // Bakes every matching adapter into its base weight. Returns the names
  // that were merged.
  std::vector<std::string> merge_adapters(const AdapterMap<T>& adapters) {
    std::vector<std::string> merged;
    for (const auto& [name, ad] : adapters) {
      auto it = index_.find(name);
      if (it == index_.end()) continue;
      NamedParam<T>& p = params_[it->second];
      Tensor<T> inc = ad.increment();
      if (inc.numel() != p.value.numel())
        throw ValidationError("adapter increment shape mismatch for " + name);
      for (int64_t i = 0; i < inc.numel(); ++i) p.value[i] += inc[i];
      merged.push_back(name);
    }
    return merged;
  }

  Tensor<T> forward(const Tensor<T>& x, Ctx* ctx,
                    const AdapterMap<T>* adapters) const {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.in_h ||
        x.dim(3) != spec_.in_w)
      throw ValidationError("input shape " + shape_str(x.shape) + " does not match " +
                            spec_.arch_id + " input (" +
                            std::to_string(spec_.in_channels) + "," +
                            std::to_string(spec_.in_h) + "," +
                            std::to_string(spec_.in_w) + ")");
    int64_t N = x.dim(0);
    if (ctx) {
      ctx->batch = N;
      ctx->col.clear();
      ctx->xhat.clear();
      ctx->invstd.clear();
      ctx->gn_out.clear();
    }

    Tensor<T> cur = x;
    int64_t H = spec_.in_h, W = spec_.in_w;
    for (int64_t b = 0; b < num_blocks(); ++b) {
      int64_t ci = cur.dim(1);
      int64_t co = spec_.conv_channels[static_cast<std::size_t>(b)];
      int64_t K = ci * 9;
      int64_t hw = H * W;
      const Tensor<T>& wt = conv_weight(b).value;
      const LoraAdapter<T>* ad = find_adapter(adapters, conv_weight(b).name);

      Tensor<T> col({N, K, hw});
      Tensor<T> conv_out({N, co, H, W});
      for (int64_t n = 0; n < N; ++n) {
        T* coln = col.ptr() + n * K * hw;
        kernels::par::im2col<T>(cur.ptr() + n * ci * hw, ci, H, W, 3, 3, 1, 1, coln);
        T* yn = conv_out.ptr() + n * co * hw;
        kernels::par::gemm<T>(false, false, co, hw, K, T(1), wt.ptr(), K, coln, hw,
                              T(0), yn, hw);
        if (ad) apply_adapter_forward(*ad, coln, K, hw, yn);
      }

      Tensor<T> gn_out({N, co, H, W});
      Tensor<T> xhat({N, co, H, W});
      Tensor<T> invstd({N * spec_.gn_groups});
      kernels::par::group_norm<T>(conv_out, gn_gamma(b).value, gn_beta(b).value,
                                  spec_.gn_groups, kGnEps, gn_out, &xhat, &invstd);

      Tensor<T> relu_out({N, co, H, W});
      kernels::par::relu<T>(gn_out.ptr(), relu_out.ptr(), gn_out.numel());

      Tensor<T> pooled({N, co, H / 2, W / 2});
      kernels::par::avg_pool2<T>(relu_out, pooled);

      if (ctx) {
        ctx->col.push_back(std::move(col));
        ctx->xhat.push_back(std::move(xhat));
        ctx->invstd.push_back(std::move(invstd));
        ctx->gn_out.push_back(std::move(gn_out));
      }
      cur = std::move(pooled);
      H /= 2;
      W /= 2;
    }

    Tensor<T> feat({N, cur.dim(1)});
    kernels::par::global_avg_pool<T>(cur, feat);

    const Tensor<T>& fw = fc_w().value;
    const Tensor<T>& fb = fc_b().value;
    Tensor<T> logits({N, spec_.out_dim});
    kernels::par::gemm<T>(false, false, N, spec_.out_dim, fw.dim(0), T(1), feat.ptr(),
                          fw.dim(0), fw.ptr(), spec_.out_dim, T(0), logits.ptr(),
                          spec_.out_dim);
    if (const LoraAdapter<T>* ad = find_adapter(adapters, fc_w().name)) {
      // logits += scale * (feat * A) * B, the factored path.
      int64_t r = ad->rank();
      Tensor<T> t({N, r});
      kernels::par::gemm<T>(false, false, N, r, fw.dim(0), T(1), feat.ptr(), fw.dim(0),
                            ad->A.ptr(), r, T(0), t.ptr(), r);
      kernels::par::gemm<T>(false, false, N, spec_.out_dim, r, ad->scale, t.ptr(), r,
                            ad->B.ptr(), spec_.out_dim, T(1), logits.ptr(),
                            spec_.out_dim);
    }
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t j = 0; j < spec_.out_dim; ++j) logits.at2(n, j) += fb[j];

    if (ctx) ctx->feat = std::move(feat);
    return logits;
  }

  // Accumulates parameter grads (when wanted) and adapter grads (when slots
  // are provided), and returns the input gradient when asked. `adapters`
  // must be the set used in the matching forward call.
  Tensor<T> backward(const Ctx& ctx, const Tensor<T>& dout,
                     const AdapterMap<T>* adapters, AdapterGradMap<T>* agrads,
                     bool want_param_grads, bool want_input_grad) {
    int64_t N = ctx.batch;
    require_shape(dout, {N, spec_.out_dim}, "dout");

    const Tensor<T>& fw = fc_w().value;
    int64_t in_dim = fw.dim(0);
    if (want_param_grads) {
      kernels::par::gemm<T>(true, false, in_dim, spec_.out_dim, N, T(1),
                            ctx.feat.ptr(), in_dim, dout.ptr(), spec_.out_dim, T(1),
                            fc_w().grad.ptr(), spec_.out_dim);
      Tensor<T>& db = fc_b().grad;
      for (int64_t n = 0; n < N; ++n)
        for (int64_t j = 0; j < spec_.out_dim; ++j) db[j] += dout.at2(n, j);
    }
    Tensor<T> dfeat({N, in_dim});
    kernels::par::gemm<T>(false, true, N, in_dim, spec_.out_dim, T(1), dout.ptr(),
                          spec_.out_dim, fw.ptr(), spec_.out_dim, T(0), dfeat.ptr(),
                          in_dim);
    if (const LoraAdapter<T>* ad = find_adapter(adapters, fc_w().name)) {
      int64_t r = ad->rank();
      // u = dout * B^T  (N, r)
      Tensor<T> u({N, r});
      kernels::par::gemm<T>(false, true, N, r, spec_.out_dim, T(1), dout.ptr(),
                            spec_.out_dim, ad->B.ptr(), spec_.out_dim, T(0), u.ptr(), r);
      kernels::par::gemm<T>(false, true, N, in_dim, r, ad->scale, u.ptr(), r,
                            ad->A.ptr(), r, T(1), dfeat.ptr(), in_dim);
      if (agrads) {
        LoraGrad<T>& g = agrads->at(fc_w().name);
        kernels::par::gemm<T>(true, false, in_dim, r, N, ad->scale, ctx.feat.ptr(),
                              in_dim, u.ptr(), r, T(1), g.dA.ptr(), r);
        Tensor<T> t({N, r});
        kernels::par::gemm<T>(false, false, N, r, in_dim, T(1), ctx.feat.ptr(), in_dim,
                              ad->A.ptr(), r, T(0), t.ptr(), r);
        kernels::par::gemm<T>(true, false, r, spec_.out_dim, N, ad->scale, t.ptr(), r,
                              dout.ptr(), spec_.out_dim, T(1), g.dB.ptr(),
                              spec_.out_dim);
      }
    }

    // GAP backward into the last block's pooled output.
    int64_t H = spec_.in_h >> num_blocks();
    int64_t W = spec_.in_w >> num_blocks();
    int64_t c_last = spec_.conv_channels.back();
    Tensor<T> dcur({N, c_last, H, W});
    kernels::par::global_avg_pool_backward<T>(dfeat, dcur);

    for (int64_t b = num_blocks() - 1; b >= 0; --b) {
      int64_t co = spec_.conv_channels[static_cast<std::size_t>(b)];
      int64_t ci = b == 0 ? spec_.in_channels
                          : spec_.conv_channels[static_cast<std::size_t>(b - 1)];
      H *= 2;
      W *= 2;
      int64_t hw = H * W;
      int64_t K = ci * 9;

      Tensor<T> drelu({N, co, H, W});
      kernels::par::avg_pool2_backward<T>(dcur, drelu);

      Tensor<T> dgn({N, co, H, W});
      kernels::par::relu_backward<T>(ctx.gn_out[static_cast<std::size_t>(b)].ptr(),
                                     drelu.ptr(), dgn.ptr(), dgn.numel());

      Tensor<T> dconv({N, co, H, W});
      Tensor<T> dgamma_scratch, dbeta_scratch;
      Tensor<T>* dgamma = want_param_grads ? &gn_gamma(b).grad : &dgamma_scratch;
      Tensor<T>* dbeta = want_param_grads ? &gn_beta(b).grad : &dbeta_scratch;
      if (!want_param_grads) {
        dgamma_scratch = Tensor<T>::zeros({co});
        dbeta_scratch = Tensor<T>::zeros({co});
      }
      kernels::par::group_norm_backward<T>(
          dgn, ctx.xhat[static_cast<std::size_t>(b)],
          ctx.invstd[static_cast<std::size_t>(b)], gn_gamma(b).value, spec_.gn_groups,
          dconv, *dgamma, *dbeta);

      const Tensor<T>& wt = conv_weight(b).value;
      const LoraAdapter<T>* ad = find_adapter(adapters, conv_weight(b).name);
      LoraGrad<T>* ag = (ad && agrads) ? &agrads->at(conv_weight(b).name) : nullptr;
      bool need_dx = b > 0 || want_input_grad;
      Tensor<T> dprev;
      if (need_dx) dprev = Tensor<T>::zeros({N, ci, H, W});

      const Tensor<T>& col = ctx.col[static_cast<std::size_t>(b)];
      Tensor<T> dcol({K, hw});
      Tensor<T> t, u;
      if (ad) {
        t = Tensor<T>({ad->rank(), hw});
        u = Tensor<T>({ad->rank(), hw});
      }
      for (int64_t n = 0; n < N; ++n) {
        const T* coln = col.ptr() + n * K * hw;
        const T* dyn = dconv.ptr() + n * co * hw;
        if (want_param_grads) {
          kernels::par::gemm<T>(false, true, co, K, hw, T(1), dyn, hw, coln, hw, T(1),
                                conv_weight(b).grad.ptr(), K);
        }
        if (ad) {
          int64_t r = ad->rank();
          kernels::par::gemm<T>(false, false, r, hw, K, T(1), ad->B.ptr(), K, coln, hw,
                                T(0), t.ptr(), hw);
          kernels::par::gemm<T>(true, false, r, hw, co, T(1), ad->A.ptr(), r, dyn, hw,
                                T(0), u.ptr(), hw);
          if (ag) {
            kernels::par::gemm<T>(false, true, co, r, hw, ad->scale, dyn, hw, t.ptr(),
                                  hw, T(1), ag->dA.ptr(), r);
            kernels::par::gemm<T>(false, true, r, K, hw, ad->scale, u.ptr(), hw, coln,
                                  hw, T(1), ag->dB.ptr(), K);
          }
        }
        if (need_dx) {
          kernels::par::gemm<T>(true, false, K, hw, co, T(1), wt.ptr(), K, dyn, hw,
                                T(0), dcol.ptr(), hw);
          if (ad) {
            kernels::par::gemm<T>(true, false, K, hw, ad->rank(), ad->scale,
                                  ad->B.ptr(), K, u.ptr(), hw, T(1), dcol.ptr(), hw);
          }
          kernels::par::col2im<T>(dcol.ptr(), ci, H, W, 3, 3, 1, 1,
                                  dprev.ptr() + n * ci * hw);
        }
      }
      dcur = std::move(dprev);
    }
    return dcur;  // empty unless want_input_grad
  }

  void to_archive(TensorArchive& arc) const {
    for (const auto& p : params_) {
      if constexpr (std::is_same_v<T, float>) {
        arc.put(p.name, p.value);
      } else {
        arc.put(p.name, p.value.template cast<double>());
      }
    }
  }

  // Loads every parameter by name; reports all missing names at once.
  void from_archive(const TensorArchive& arc) {
    std::vector<std::string> missing;
    for (const auto& p : params_)
      if (!arc.contains(p.name)) missing.push_back(p.name);
    if (!missing.empty()) {
      std::string msg = "archive is missing weights:";
      for (const auto& m : missing) msg += " " + m;
      throw ValidationError(msg);
    }
    for (auto& p : params_) {
      const Tensorf& src = arc.get_f32(p.name);
      if (src.shape != p.value.shape)
        throw ValidationError("weight " + p.name + " has shape " +
                              shape_str(src.shape) + ", expected " +
                              shape_str(p.value.shape));
      for (int64_t i = 0; i < src.numel(); ++i) p.value[i] = static_cast<T>(src[i]);
    }
  }

 private:
  void add_param(const std::string& name, Tensor<T> value) {
    Tensor<T> grad = Tensor<T>::zeros(value.shape);
    index_[name] = params_.size();
    params_.push_back({name, std::move(value), std::move(grad)});
  }

  NamedParam<T>& conv_weight(int64_t b) {
    return params_[index_.at(spec_.param_prefix + "conv" + std::to_string(b) + "/w")];
  }
  const NamedParam<T>& conv_weight(int64_t b) const {
    return params_[index_.at(spec_.param_prefix + "conv" + std::to_string(b) + "/w")];
  }
  NamedParam<T>& gn_gamma(int64_t b) {
    return params_[index_.at(spec_.param_prefix + "gn" + std::to_string(b) + "/gamma")];
  }
  const NamedParam<T>& gn_gamma(int64_t b) const {
    return params_[index_.at(spec_.param_prefix + "gn" + std::to_string(b) + "/gamma")];
  }
  NamedParam<T>& gn_beta(int64_t b) {
    return params_[index_.at(spec_.param_prefix + "gn" + std::to_string(b) + "/beta")];
  }
  const NamedParam<T>& gn_beta(int64_t b) const {
    return params_[index_.at(spec_.param_prefix + "gn" + std::to_string(b) + "/beta")];
  }
  NamedParam<T>& fc_w() { return params_[index_.at(spec_.param_prefix + "fc/w")]; }
  const NamedParam<T>& fc_w() const {
    return params_[index_.at(spec_.param_prefix + "fc/w")];
  }
  NamedParam<T>& fc_b() { return params_[index_.at(spec_.param_prefix + "fc/b")]; }
  const NamedParam<T>& fc_b() const {
    return params_[index_.at(spec_.param_prefix + "fc/b")];
  }

  static const LoraAdapter<T>* find_adapter(const AdapterMap<T>* adapters,
                                            const std::string& name) {
    if (!adapters) return nullptr;
    auto it = adapters->find(name);
    return it == adapters->end() ? nullptr : &it->second;
  }

  // y += scale * A * (B * col), never materializing A*B.
  static void apply_adapter_forward(const LoraAdapter<T>& ad, const T* col, int64_t K,
                                    int64_t hw, T* y) {
    int64_t r = ad.rank();
    Tensor<T> t({r, hw});
    kernels::par::gemm<T>(false, false, r, hw, K, T(1), ad.B.ptr(), K, col, hw, T(0),
                          t.ptr(), hw);
    kernels::par::gemm<T>(false, false, ad.d(), hw, r, ad.scale, ad.A.ptr(), r,
                          t.ptr(), hw, T(1), y, hw);
  }

  ConvNetSpec spec_;
  std::vector<NamedParam<T>> params_;
  std::map<std::string, std::size_t> index_;
};

using ConvNetF = ConvNet<float>;
using ConvNetD = ConvNet<double>;

}  // namespace hello
