#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hello/dataset.hpp"
#include "hello/loss.hpp"
#include "hello/projector.hpp"
#include "hello/teachers.hpp"

namespace hello {

// Knowledge-transfer settings: fit only the adapter matrices so the
// projector tracks the weak-teacher ensemble on the original dataset.
struct TransferConfig {
  double lambda_ce = 0.1;
  int64_t batch = 64;
  int64_t epochs = 3;       // 0 is legal: fit_projector becomes a no-op
  double lr = 1e-3;
  bool cosine = true;
  LabelSpace space = LabelSpace::kProb;  // shared with ensemble averaging
  double temp = 1.0;
  double holdout_frac = 0.05;  // early-stop slice of the train set; 0 disables
  uint64_t seed = 0;

  void validate() const;
};

// MSE(repr(pred), y_soft) + lambda * CE(softmax(pred / temp), y_hard).
// Gradients accumulate into *dlogits when given.
template <class T>
LossParts transfer_loss(const Tensor<T>& pred, const Tensor<T>& y_soft,
                        const std::vector<int32_t>& y_hard, double lambda,
                        LabelSpace space, double temp, Tensor<T>* dlogits) {
  if (lambda < 0.0) throw ValidationError("lambda must be >= 0");
  std::vector<double> lam(y_hard.size(), 1.0);
  return combined_loss(pred, y_soft, y_hard, y_hard, lam, lambda, space, temp,
                       dlogits);
}

struct TransferStep {
  int64_t step = 0;
  double mse = 0.0, ce = 0.0, total = 0.0, lr = 0.0;
};

struct TransferLog {
  std::vector<TransferStep> steps;
  std::vector<double> holdout_acc;  // one entry per completed epoch
  double initial_running = 0.0;     // mean total of the first <=20 steps
  double final_running = 0.0;       // mean total of the last  <=20 steps
  int64_t epochs_run = 0;
  bool early_stopped = false;
};

// Optimizes only the attached adapter A/B matrices (base weights and head W
// are never touched) against cached ensemble targets. Deterministic given
// cfg.seed; divergence raises TrainingError naming the step.
TransferLog fit_projector(Projector& proj, const LabeledDataset& ds,
                          const TeacherEnsemble& ensemble, const TransferConfig& cfg);

// Line-delimited records: {"step":..,"mse":..,"ce":..,"total":..,"lr":..}.
// Formatting goes through num_str so reruns are byte-identical.
void save_transfer_log(const std::string& path, const TransferLog& log);

// Ensemble targets for a whole image stack, evaluated in bounded chunks.
Tensorf ensemble_targets(const TeacherEnsemble& ensemble, const Tensorf& images,
                         LabelSpace space, double temp, int64_t chunk = 256);

// Top-1 accuracy of the projector over an image stack, evaluated in chunks.
double projector_accuracy(const Projector& proj, const Tensorf& images,
                          const std::vector<int32_t>& labels, int64_t chunk = 256);

}  // namespace hello
