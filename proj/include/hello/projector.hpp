#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hello/archive.hpp"
#include "hello/encoders.hpp"
#include "hello/kernels.hpp"
#include "hello/lora.hpp"
#include "hello/nn.hpp"
#include "hello/rng.hpp"
#include "hello/tensor.hpp"

namespace hello {

// Head adapter target name. The head is not part of the encoder ConvNet, so
// the projector resolves this name itself.
inline const char* kHeadTarget = "head/w";

template <class T>
struct LinearHeadT {
  Tensor<T> W;  // (d_f, C)
  Tensor<T> b;  // (C), frozen at zero
  std::string init_source;  // "text_embedding" or "random"
};

using LinearHead = LinearHeadT<float>;

// logits[n][i] = dot(normalize(encode(x_n)), v_T[i]).
template <class T>
Tensor<T> zero_shot_logits(const ImageEncoderT<T>& enc, const Tensor<T>& v_T,
                           const Tensor<T>& images) {
  if (v_T.rank() != 2 || v_T.dim(1) != enc.d_f())
    throw ValidationError("v_T is " + shape_str(v_T.shape) + " but encoder d_f is " +
                          std::to_string(enc.d_f()));
  Tensor<T> v_I = normalize_rows(encode_image(enc, images));
  int64_t n = v_I.dim(0), c = v_T.dim(0), d = v_T.dim(1);
  Tensor<T> logits({n, c});
  kernels::par::gemm<T>(false, true, n, c, d, T(1), v_I.ptr(), d, v_T.ptr(), d, T(0),
                        logits.ptr(), c);
  return logits;
}

// W = transpose(v_T) element-exact, b = 0. With identical arithmetic order
// the head path reproduces zero_shot_logits bit for bit.
template <class T>
LinearHeadT<T> init_head_from_text(const Tensor<T>& v_T) {
  if (v_T.rank() != 2) throw ValidationError("v_T must be (C, d_f)");
  int64_t c = v_T.dim(0), d = v_T.dim(1);
  Tensor<T> norms({c});
  kernels::par::row_norms<T>(v_T.ptr(), c, d, norms.ptr());
  for (int64_t i = 0; i < c; ++i)
    if (std::abs(static_cast<double>(norms[i]) - 1.0) > 1e-4)
      throw ValidationError("v_T row " + std::to_string(i) +
                            " is not unit-norm (norm=" + num_str(norms[i]) + ")");
  LinearHeadT<T> head;
  head.W = Tensor<T>({d, c});
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = 0; j < d; ++j) head.W.at2(j, i) = v_T.at2(i, j);
  head.b = Tensor<T>::zeros({c});
  head.init_source = "text_embedding";
  return head;
}

// Frozen encoder + text-initialized head + low-rank adapters. The adapters
// (encoder convolutions and the head) are the only trainable state.
template <class T>
class ProjectorT {
 public:
  ProjectorT(ImageEncoderT<T> encoder, LinearHeadT<T> head, std::string encoder_id,
             std::vector<std::string> class_names, std::vector<std::string> templates)
      : enc_(std::move(encoder)), head_(std::move(head)),
        encoder_id_(std::move(encoder_id)), class_names_(std::move(class_names)),
        templates_(std::move(templates)) {
    if (head_.W.rank() != 2 || head_.W.dim(0) != enc_.d_f())
      throw ValidationError("head W is " + shape_str(head_.W.shape) +
                            " but encoder d_f is " + std::to_string(enc_.d_f()));
    if (head_.b.numel() != num_classes())
      throw ValidationError("head bias length mismatch");
    if (static_cast<int64_t>(class_names_.size()) != num_classes())
      throw ValidationError("class name count does not match head width");
  }

  int64_t num_classes() const { return head_.W.dim(1); }
  int64_t d_f() const { return enc_.d_f(); }
  const ImageEncoderT<T>& encoder() const { return enc_; }
  ImageEncoderT<T>& encoder_mut() { return enc_; }
  const LinearHeadT<T>& head() const { return head_; }
  const std::string& encoder_id() const { return encoder_id_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<std::string>& templates() const { return templates_; }
  const AdapterMap<T>& adapters() const { return adapters_; }
  AdapterMap<T>& adapters_mut() { return adapters_; }
  bool has_adapters() const { return !adapters_.empty(); }
  bool merged() const { return merged_; }

  void set_adapters(AdapterMap<T> adapters) {
    if (!adapters_.empty()) throw ValidationError("adapters already attached");
    for (const auto& [name, ad] : adapters) ad.validate();
    adapters_ = std::move(adapters);
  }

  struct Ctx {
    typename ConvNet<T>::Ctx enc_ctx;
    Tensor<T> emb_raw;   // (N, d_f)
    Tensor<T> norms;     // (N)
    Tensor<T> emb_norm;  // (N, d_f)
  };

  Tensor<T> forward(const Tensor<T>& images, Ctx* ctx = nullptr) const {
    typename ConvNet<T>::Ctx* ectx = ctx ? &ctx->enc_ctx : nullptr;
    Tensor<T> raw = enc_.encode(images, ectx, adapter_ptr());
    int64_t n = raw.dim(0), d = raw.dim(1);
    Tensor<T> norms({n});
    kernels::par::row_norms<T>(raw.ptr(), n, d, norms.ptr());
    for (int64_t i = 0; i < n; ++i)
      if (static_cast<double>(norms[i]) < 1e-12)
        throw DegenerateEmbeddingError("embedding row " + std::to_string(i) +
                                       " has near-zero norm");
    Tensor<T> v(raw.shape);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
      T inv = T(1) / norms[i];
      for (int64_t j = 0; j < d; ++j) v.at2(i, j) = raw.at2(i, j) * inv;
    }

    int64_t c = num_classes();
    Tensor<T> logits({n, c});
    kernels::par::gemm<T>(false, false, n, c, d, T(1), v.ptr(), d, head_.W.ptr(), c,
                          T(0), logits.ptr(), c);
    if (const LoraAdapter<T>* ad = head_adapter()) {
      int64_t r = ad->rank();
      Tensor<T> t({n, r});
      kernels::par::gemm<T>(false, false, n, r, d, T(1), v.ptr(), d, ad->A.ptr(), r,
                            T(0), t.ptr(), r);
      kernels::par::gemm<T>(false, false, n, c, r, ad->scale, t.ptr(), r, ad->B.ptr(),
                            c, T(1), logits.ptr(), c);
    }
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < c; ++j) logits.at2(i, j) += head_.b[j];

    if (ctx) {
      ctx->emb_raw = std::move(raw);
      ctx->norms = std::move(norms);
      ctx->emb_norm = std::move(v);
    }
    return logits;
  }

  // Accumulates adapter grads into *agrads; base weights and head W receive
  // no gradient. Returns d(loss)/d(pixels) when want_pixel_grad.
  Tensor<T> backward(const Ctx& ctx, const Tensor<T>& dlogits,
                     AdapterGradMap<T>* agrads, bool want_pixel_grad) {
    int64_t n = dlogits.dim(0), c = num_classes(), d = d_f();
    require_shape(dlogits, {n, c}, "dlogits");

    // Head: dv = dlogits * W_eff^T, with the low-rank part factored.
    Tensor<T> dv({n, d});
    kernels::par::gemm<T>(false, true, n, d, c, T(1), dlogits.ptr(), c, head_.W.ptr(),
                          c, T(0), dv.ptr(), d);
    if (const LoraAdapter<T>* ad = head_adapter()) {
      int64_t r = ad->rank();
      Tensor<T> u({n, r});
      kernels::par::gemm<T>(false, true, n, r, c, T(1), dlogits.ptr(), c, ad->B.ptr(),
                            c, T(0), u.ptr(), r);
      kernels::par::gemm<T>(false, true, n, d, r, ad->scale, u.ptr(), r, ad->A.ptr(),
                            r, T(1), dv.ptr(), d);
      if (agrads) {
        LoraGrad<T>& g = agrads->at(kHeadTarget);
        kernels::par::gemm<T>(true, false, d, r, n, ad->scale, ctx.emb_norm.ptr(), d,
                              u.ptr(), r, T(1), g.dA.ptr(), r);
        Tensor<T> t({n, r});
        kernels::par::gemm<T>(false, false, n, r, d, T(1), ctx.emb_norm.ptr(), d,
                              ad->A.ptr(), r, T(0), t.ptr(), r);
        kernels::par::gemm<T>(true, false, r, c, n, ad->scale, t.ptr(), r,
                              dlogits.ptr(), c, T(1), g.dB.ptr(), c);
      }
    }

    // Normalization: de = (dv - v (v . dv)) / ||e||.
    Tensor<T> de({n, d});
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j)
        dot += static_cast<double>(ctx.emb_norm.at2(i, j)) * dv.at2(i, j);
      T inv = T(1) / ctx.norms[i];
      for (int64_t j = 0; j < d; ++j)
        de.at2(i, j) =
            (dv.at2(i, j) - ctx.emb_norm.at2(i, j) * static_cast<T>(dot)) * inv;
    }

    Tensor<T> dnorm = enc_.net_for_backward().backward(
        ctx.enc_ctx, de, adapter_ptr(), agrads, false, want_pixel_grad);
    if (!want_pixel_grad) return Tensor<T>();
    return enc_.denormalize_grad(dnorm);
  }

  // Bakes adapters into base weights and drops them. Double-merge errors.
  void merge() {
    if (merged_) throw ValidationError("projector already merged");
    if (adapters_.empty()) throw ValidationError("no adapters attached to merge");
    enc_.net_for_backward().merge_adapters(adapters_);
    if (const LoraAdapter<T>* ad = head_adapter()) {
      Tensor<T> inc = ad->increment();
      for (int64_t i = 0; i < inc.numel(); ++i) head_.W[i] += inc[i];
    }
    adapters_.clear();
    merged_ = true;
  }

 private:
  const AdapterMap<T>* adapter_ptr() const {
    return adapters_.empty() ? nullptr : &adapters_;
  }
  const LoraAdapter<T>* head_adapter() const {
    auto it = adapters_.find(kHeadTarget);
    return it == adapters_.end() ? nullptr : &it->second;
  }

  ImageEncoderT<T> enc_;
  LinearHeadT<T> head_;
  AdapterMap<T> adapters_;
  std::string encoder_id_;
  std::vector<std::string> class_names_;
  std::vector<std::string> templates_;
  bool merged_ = false;
};

using Projector = ProjectorT<float>;

template <class T>
Tensor<T> projector_forward(const ProjectorT<T>& p, const Tensor<T>& images) {
  return p.forward(images, nullptr);
}

inline bool default_conv_filter(const std::string& name) {
  return name.find("/conv") != std::string::npos;
}

// One adapter per encoder weight passing the filter, plus one for the head.
// A is Gaussian (std 0.01), B zero, so the attached projector still computes
// exactly the zero-shot solution.
template <class T>
void attach_lora(ProjectorT<T>& p, const std::function<bool(const std::string&)>& filter,
                 int64_t rank_encoder, int64_t rank_head, T scale, Rng& rng) {
  if (rank_encoder < 1 || rank_head < 1)
    throw ValidationError("adapter ranks must be positive");
  AdapterMap<T> adapters;
  Rng r = rng.split_tag("attach_lora");
  uint64_t child = 0;
  for (const auto& [name, dk] : p.encoder().net().lora_targets()) {
    if (!filter(name)) continue;
    Rng cr = r.split(child++);
    adapters.emplace(name, make_adapter<T>(name, dk.first, dk.second, rank_encoder,
                                           scale, cr));
  }
  if (adapters.empty())
    throw ConfigError("adapter filter selected no encoder weights");
  Rng hr = r.split_tag("head");
  adapters.emplace(kHeadTarget, make_adapter<T>(kHeadTarget, p.d_f(), p.num_classes(),
                                                rank_head, scale, hr));
  p.set_adapters(std::move(adapters));
}

template <class T>
void merge_lora(ProjectorT<T>& p) {
  p.merge();
}

// ---- artifact (float only) ----

struct ProjectorArtifact {
  std::string encoder_id;
  AdapterMap<float> adapters;
  int64_t head_rank = 0;
  std::vector<std::string> class_names;
  std::vector<std::string> templates;
  std::string config_hash;  // 16 hex chars
};

struct StorageCount {
  int64_t param_count = 0;    // adapter matrix entries only
  int64_t param_bytes = 0;    // param_count x element width
  int64_t artifact_bytes = 0; // full serialized archive, metadata included
};

ProjectorArtifact make_projector_artifact(const Projector& p,
                                          const std::string& config_hash);
TensorArchive artifact_to_archive(const ProjectorArtifact& art);
ProjectorArtifact artifact_from_archive(const TensorArchive& arc);
StorageCount count_projector_storage(const ProjectorArtifact& art);

void save_projector(const ProjectorArtifact& art, const std::string& path);
// Rebuilds encoder + head from their sources; refuses a mismatched encoder
// archive (compared by content fingerprint).
Projector load_projector(const std::string& path, const TensorArchive& encoder_arc,
                         const TextEncoder& txt);

}  // namespace hello
