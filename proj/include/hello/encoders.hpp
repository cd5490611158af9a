#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hello/archive.hpp"
#include "hello/kernels.hpp"
#include "hello/nn.hpp"
#include "hello/rng.hpp"
#include "hello/tensor.hpp"

namespace hello {

struct EmbeddingSpace {
  int64_t d_f = 64;
  void validate() const {
    if (d_f < 2) throw ValidationError("embedding dimension must be >= 2");
  }
};

// Frozen convolutional image encoder. Base weights never change after
// construction; adaptation happens only through LoRA increments passed into
// encode(). Inputs are normalized per channel with the stored pixel stats.
//
// Templated on the element type so gradient checks can run the identical
// code path in 8-byte precision; production uses ImageEncoder (float).
template <class T>
class ImageEncoderT {
 public:
  ImageEncoderT(ConvNetSpec spec, std::vector<T> pixel_mean, std::vector<T> pixel_std)
      : net_(std::move(spec)), pixel_mean_(std::move(pixel_mean)),
        pixel_std_(std::move(pixel_std)) {
    EmbeddingSpace{net_.spec().out_dim}.validate();
    auto c = static_cast<std::size_t>(net_.spec().in_channels);
    if (pixel_mean_.size() != c || pixel_std_.size() != c)
      throw ValidationError("pixel stats must have one entry per input channel");
    for (T s : pixel_std_)
      if (!(s > T(0))) throw ValidationError("pixel std entries must be positive");
  }

  int64_t d_f() const { return net_.spec().out_dim; }
  const std::string& arch() const { return net_.spec().arch_id; }
  int64_t in_channels() const { return net_.spec().in_channels; }
  int64_t in_h() const { return net_.spec().in_h; }
  int64_t in_w() const { return net_.spec().in_w; }
  const std::vector<T>& pixel_mean() const { return pixel_mean_; }
  const std::vector<T>& pixel_std() const { return pixel_std_; }

  const ConvNet<T>& net() const { return net_; }
  // Gradient plumbing (adapter fitting, pixel updates) needs the grad slots;
  // base weight values stay frozen by contract.
  ConvNet<T>& net_for_backward() { return net_; }

  Tensor<T> normalize_pixels(const Tensor<T>& images) const {
    Tensor<T> out(images.shape);
    int64_t n = images.dim(0), c = images.dim(1);
    int64_t hw = images.dim(2) * images.dim(3);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n * c; ++i) {
      auto ch = static_cast<std::size_t>(i % c);
      const T* src = images.ptr() + i * hw;
      T* dst = out.ptr() + i * hw;
      T mu = pixel_mean_[ch], inv = T(1) / pixel_std_[ch];
      for (int64_t j = 0; j < hw; ++j) dst[j] = (src[j] - mu) * inv;
    }
    return out;
  }

  // d(raw pixels) from d(normalized pixels): divide by per-channel std.
  Tensor<T> denormalize_grad(const Tensor<T>& grad) const {
    Tensor<T> out(grad.shape);
    int64_t n = grad.dim(0), c = grad.dim(1);
    int64_t hw = grad.dim(2) * grad.dim(3);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n * c; ++i) {
      T inv = T(1) / pixel_std_[static_cast<std::size_t>(i % c)];
      const T* src = grad.ptr() + i * hw;
      T* dst = out.ptr() + i * hw;
      for (int64_t j = 0; j < hw; ++j) dst[j] = src[j] * inv;
    }
    return out;
  }

  // Raw embeddings (batch x d_f). Pure function of (weights, adapters, input).
  Tensor<T> encode(const Tensor<T>& images, typename ConvNet<T>::Ctx* ctx,
                   const AdapterMap<T>* adapters) const {
    for (int64_t i = 0; i < images.numel(); ++i)
      if (!std::isfinite(static_cast<double>(images[i])))
        throw ValidationError("non-finite pixel at flat index " + std::to_string(i));
    return net_.forward(normalize_pixels(images), ctx, adapters);
  }

 private:
  ConvNet<T> net_;
  std::vector<T> pixel_mean_, pixel_std_;
};

using ImageEncoder = ImageEncoderT<float>;

template <class T, class U>
ImageEncoderT<U> encoder_cast(const ImageEncoderT<T>& src) {
  std::vector<U> mean(src.pixel_mean().begin(), src.pixel_mean().end());
  std::vector<U> std(src.pixel_std().begin(), src.pixel_std().end());
  ImageEncoderT<U> out(src.net().spec(), std::move(mean), std::move(std));
  const auto& sp = src.net().params();
  auto& dp = out.net_for_backward().params();
  for (std::size_t i = 0; i < sp.size(); ++i)
    for (int64_t j = 0; j < sp[i].value.numel(); ++j)
      dp[i].value[j] = static_cast<U>(sp[i].value[j]);
  return out;
}

// Bag-of-token text encoder: a fixed random embedding table indexed by token
// hash; a prompt encodes to the mean of its token rows.
class TextEncoder {
 public:
  explicit TextEncoder(Tensorf table);  // (vocab, d_f)

  int64_t d_f() const { return table_.dim(1); }
  int64_t vocab() const { return table_.dim(0); }
  const Tensorf& table() const { return table_; }

  Tensorf encode_prompt(const std::string& prompt) const;  // (d_f), raw

 private:
  Tensorf table_;
};

// ---- module operations ----

template <class T>
Tensor<T> encode_image(const ImageEncoderT<T>& enc, const Tensor<T>& images) {
  return enc.encode(images, nullptr, nullptr);
}

// Unit L2 rows; a row with norm below 1e-12 raises DegenerateEmbeddingError.
template <class T>
Tensor<T> normalize_rows(const Tensor<T>& m) {
  if (m.rank() != 2) throw ValidationError("normalize_rows expects a matrix");
  int64_t rows = m.dim(0), cols = m.dim(1);
  Tensor<T> norms({rows});
  kernels::par::row_norms<T>(m.ptr(), rows, cols, norms.ptr());
  for (int64_t r = 0; r < rows; ++r)
    if (static_cast<double>(norms[r]) < 1e-12)
      throw DegenerateEmbeddingError("row " + std::to_string(r) +
                                     " has near-zero norm, refusing to normalize");
  Tensor<T> out(m.shape);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    T inv = T(1) / norms[r];
    for (int64_t j = 0; j < cols; ++j) out.at2(r, j) = m.at2(r, j) * inv;
  }
  return out;
}

// Each template must contain the placeholder "{}" exactly once.
std::vector<std::vector<std::string>> build_class_prompts(
    const std::vector<std::string>& class_names,
    const std::vector<std::string>& templates);

// Per class: encode each prompt, average raw embeddings, normalize.
// Returns v_T (C x d_f) with unit rows.
Tensorf encode_text(const TextEncoder& enc,
                    const std::vector<std::vector<std::string>>& prompt_sets);

const std::vector<std::string>& default_prompt_templates();

std::vector<std::string> tokenize_prompt(const std::string& prompt);

// ---- construction and archive I/O ----

ImageEncoder make_toy_image_encoder(const std::string& arch, int64_t in_channels,
                                    int64_t in_h, int64_t in_w, int64_t d_f,
                                    Rng& rng);
TextEncoder make_toy_text_encoder(int64_t vocab, int64_t d_f, Rng& rng);

// Archive layout: "enc/<layer>/<param>" weights, "txt/table", and
// "meta/arch", "meta/d_f", "meta/input_shape", "meta/pixel_mean",
// "meta/pixel_std".
TensorArchive encoder_pair_to_archive(const ImageEncoder& enc, const TextEncoder& txt);
ImageEncoder load_pretrained_encoder(const TensorArchive& arc, const std::string& arch);
TextEncoder load_text_encoder(const TensorArchive& arc);

// Content fingerprint over all entries; "<arch>:<hex>" identifies an encoder
// archive so artifacts can refuse a mismatched one.
std::string encoder_id_of(const TensorArchive& arc);

}  // namespace hello
