#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hello/dataset.hpp"
#include "hello/encoders.hpp"
#include "hello/kernels.hpp"
#include "hello/projector.hpp"
#include "hello/rng.hpp"

namespace hello {

struct CropBox {
  int64_t x = 0, y = 0, w = 0, h = 0;  // x is the column of the left edge
};

struct PatchCandidate {
  Tensorf pixels;  // (C, h, w)
  int64_t source = 0;
  CropBox box;
  int32_t label = 0;
  double difficulty = 0.0;  // CE under the observer; filled by score_candidates
};

// Per source image: `per_image` square crops with side fraction uniform in
// [min_frac, max_frac] of min(H, W), position uniform in bounds. Rng is split
// per source image, so the pool is a pure function of (seed, dataset).
std::vector<PatchCandidate> crop_candidates(const LabeledDataset& ds,
                                            int64_t per_image, double min_frac,
                                            double max_frac, Rng& rng);

// Anything that maps an image stack to logits can rank patches. The referent
// must outlive the observer.
struct Observer {
  int64_t in_c = 0, in_h = 0, in_w = 0, classes = 0;
  std::function<Tensorf(const Tensorf&)> forward;
};
Observer make_projector_observer(const Projector& p);
Observer make_net_observer(const ConvNet<float>& net);

// CE of the observer's softmax against the patch's hard label, after a
// bilinear resize to the observer input. Lower = more representative.
double patch_difficulty(const Observer& obs, const PatchCandidate& patch,
                        int32_t label);
// Batched difficulty fill for a whole pool.
void score_candidates(const Observer& obs, std::vector<PatchCandidate>& pool,
                      int64_t chunk = 64);

// k lowest-difficulty candidates, ordered by (difficulty, source, x, y, w, h)
// ascending so the result is independent of pool order. Single-class pools
// only; a short pool is an error naming the deficit.
std::vector<PatchCandidate> select_patches(const std::vector<PatchCandidate>& pool,
                                           int64_t k);

// grid x grid patches resized to the cell size and placed row-major. All
// patches must share one class; out dims must be divisible by grid.
Tensorf assemble_image(const std::vector<PatchCandidate>& patches, int64_t grid,
                       int64_t out_h, int64_t out_w);

struct PatchRef {
  int64_t source = 0;
  CropBox box;
};
struct Provenance {
  int64_t grid = 1;
  std::vector<PatchRef> patches;
};

struct SyntheticDataset {
  LabeledDataset data;  // split_tag "train"; exactly ipc images per class
  std::vector<Provenance> provenance;
  int64_t ipc = 0;
  int64_t grid = 1;
  std::string config_hash;

  void validate() const;
};

struct SynthesisConfig {
  int64_t ipc = 10;
  int64_t grid = 2;  // 1 when ipc == 1 is the conventional choice
  int64_t crops_per_image = 16;
  double min_frac = 0.3;
  double max_frac = 1.0;

  void validate() const;
};

// Full pipeline: crop -> score -> per-class select ipc*grid^2 -> assemble.
SyntheticDataset build_synthetic(const LabeledDataset& ds, const Observer& obs,
                                 const SynthesisConfig& cfg, Rng& rng);

// Archive ("syn/images", "syn/labels", meta) plus a JSON provenance manifest.
void save_synthetic(const std::string& arc_path, const std::string& manifest_path,
                    const SyntheticDataset& sd);
SyntheticDataset load_synthetic(const std::string& arc_path,
                                const std::string& manifest_path);

// Bilinear down-sample by an integer factor >= 2 (floor dims, min 1), then
// bilinear up-sample back to the original size. (C, H, W) in and out.
template <class T>
Tensor<T> degrade(const Tensor<T>& img, int64_t factor) {
  if (factor < 2) throw ConfigError("degrade factor must be >= 2");
  if (img.rank() != 3) throw ValidationError("degrade expects a (C,H,W) image");
  int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  int64_t dh = std::max<int64_t>(1, h / factor);
  int64_t dw = std::max<int64_t>(1, w / factor);
  Tensor<T> down({c, dh, dw});
  kernels::bilinear_resize<T>(img.ptr(), c, h, w, dh, dw, down.ptr());
  Tensor<T> up({c, h, w});
  kernels::bilinear_resize<T>(down.ptr(), c, dh, dw, h, w, up.ptr());
  return up;
}

// Degradation loss for one image and its pixel gradient: mean squared
// difference of raw embeddings between the image and its degraded copy. Both
// branches contribute gradient; the degraded branch chains through the
// bilinear adjoints. Returns the loss; adds nothing when grad is null.
template <class T>
double degradation_loss_grad(ImageEncoderT<T>& enc, const Tensor<T>& img,
                             int64_t factor, Tensor<T>* grad) {
  if (img.rank() != 3) throw ValidationError("degradation loss expects (C,H,W)");
  int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<T> hat = degrade(img, factor);
  Tensor<T> batch({1, c, h, w}), batch_hat({1, c, h, w});
  std::copy_n(img.ptr(), img.numel(), batch.ptr());
  std::copy_n(hat.ptr(), hat.numel(), batch_hat.ptr());

  typename ConvNet<T>::Ctx ctx_p, ctx_hat;
  Tensor<T> e1 = enc.encode(batch, grad ? &ctx_p : nullptr, nullptr);
  Tensor<T> e2 = enc.encode(batch_hat, grad ? &ctx_hat : nullptr, nullptr);
  int64_t d = e1.dim(1);
  double inv = 1.0 / static_cast<double>(d);
  double loss = 0.0;
  Tensor<T> de1({1, d}), de2({1, d});
  for (int64_t j = 0; j < d; ++j) {
    double r = static_cast<double>(e1[j]) - static_cast<double>(e2[j]);
    loss += r * r * inv;
    de1[j] = static_cast<T>(2.0 * r * inv);
    de2[j] = static_cast<T>(-2.0 * r * inv);
  }
  if (!grad) return loss;

  Tensor<T> g1 = enc.denormalize_grad(
      enc.net_for_backward().backward(ctx_p, de1, nullptr, nullptr, false, true));
  Tensor<T> g2 = enc.denormalize_grad(
      enc.net_for_backward().backward(ctx_hat, de2, nullptr, nullptr, false, true));

  // hat = up(down(img)): pull the hat-branch gradient back through both
  // resizes, then add the direct branch.
  int64_t dh = std::max<int64_t>(1, h / factor);
  int64_t dw = std::max<int64_t>(1, w / factor);
  Tensor<T> mid({c, dh, dw});
  kernels::bilinear_resize_adjoint<T>(g2.ptr(), c, h, w, dh, dw, mid.ptr());
  Tensor<T> back({c, h, w});
  kernels::bilinear_resize_adjoint<T>(mid.ptr(), c, dh, dw, h, w, back.ptr());

  require_shape(*grad, {c, h, w}, "degradation grad");
  for (int64_t i = 0; i < grad->numel(); ++i)
    (*grad)[i] += g1[i] + back[i];
  return loss;
}

struct ImageUpdateConfig {
  int64_t steps = 20;
  double lr = 0.01;
  int64_t factor = 2;

  void validate() const;
};

struct ImageUpdateResult {
  // steps+1 entries: mean loss before each step, then after the last.
  std::vector<double> mean_loss;
  int64_t updated = 0;
  int64_t skipped = 0;  // non-finite gradient; originals kept
};

// Pixel-space descent on the degradation loss, clamped to [0,1] after every
// step. Labels, shapes, and provenance are untouched by construction.
ImageUpdateResult image_update(SyntheticDataset& sd, ImageEncoder& enc,
                               const ImageUpdateConfig& cfg);

}  // namespace hello
