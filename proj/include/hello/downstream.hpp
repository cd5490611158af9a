#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hello/dataset.hpp"
#include "hello/loss.hpp"
#include "hello/nn.hpp"
#include "hello/optim.hpp"
#include "hello/projector.hpp"
#include "hello/rng.hpp"

namespace hello {

struct AugmentationPolicy {
  double p_mixup = 0.5;
  double p_cutmix = 0.5;  // remainder of the probability mass is "none"
  double mixup_alpha = 0.8;
  double cutmix_alpha = 1.0;
  bool flips = false;

  void validate() const;
};

// Pixel-wise convex combination x <- lam*x + (1-lam)*x[perm], shared by the
// mixup path and tests that pin specific coefficients.
void blend_images(Tensorf& images, const std::vector<int64_t>& perm, double lam);

// Rectangle [x0,x1) x [y0,y1) replaced from the permuted partner.
void paste_box(Tensorf& images, const std::vector<int64_t>& perm, int64_t x0,
               int64_t y0, int64_t x1, int64_t y1);

struct MixInfo {
  std::vector<int64_t> perm;
  double lam = 1.0;  // cutmix recomputes this from the realized box area
};

MixInfo mixup(Tensorf& images, double alpha, Rng& rng);
MixInfo cutmix(Tensorf& images, double alpha, Rng& rng);

// One augmented batch with everything the loss needs: pixels, both hard
// labels per row, and the mixing coefficient.
struct AugBatch {
  Tensorf images;
  std::vector<int32_t> ya, yb;
  std::vector<double> lam;
  std::string mode;  // "mixup" | "cutmix" | "none"
};

AugBatch apply_policy(const Tensorf& images, const std::vector<int32_t>& labels,
                      const AugmentationPolicy& policy, Rng& rng);

// Soft labels for exactly this batch, produced fresh and never persisted.
Tensorf online_labels(const Projector& proj, const Tensorf& images, LabelSpace space,
                      double temp = 1.0);

// One optimizer step on MSE(student, y_star) + beta * CE(student, mixed hard
// labels). Returns the loss parts.
LossParts student_step(ConvNet<float>& student, const AugBatch& batch,
                       const Tensorf& y_star, double beta, LabelSpace space,
                       double temp, SgdMomentum<float>& opt, double lr_scale);

struct StudentConfig {
  std::string arch = "convnet_s";
  int64_t epochs_K = 400;
  int64_t batch = 64;
  double lr = 0.02;
  double momentum = 0.9;
  bool cosine = true;
  double beta_ce = 0.1;
  LabelSpace space = LabelSpace::kProb;
  double temp = 1.0;
  // "projector": online soft labels. "hard": one-hot targets in the same
  // objective, the hard-label comparison arm.
  std::string label_mode = "projector";
  // Mixed hard-label CE (lam*CE(ya) + (1-lam)*CE(yb)) vs plain CE(ya).
  bool mixed_targets = true;
  AugmentationPolicy policy;
  uint64_t seed = 0;
  int64_t eval_every = 1;  // test-set evaluation cadence; 0 = final epoch only

  void validate() const;
};

struct EpochRecord {
  int64_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double test_acc = -1.0;  // negative when this epoch was not evaluated
};

struct StudentResult {
  ConvNet<float> model;
  std::vector<EpochRecord> epochs;
  double final_test_acc = 0.0;
};

// K epochs over the synthetic set with fresh augmentations and fresh online
// labels every batch; nothing is written to disk. Bitwise reproducible under
// a fixed seed when the policy is deterministic.
StudentResult train_student(const LabeledDataset& synthetic, const Projector& proj,
                            const StudentConfig& cfg, const LabeledDataset& test);

// Per-epoch line records for the metrics file; num_str keeps bytes stable.
void save_student_metrics(const std::string& path, const StudentResult& res);

}  // namespace hello
