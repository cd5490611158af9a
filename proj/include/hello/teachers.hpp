#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hello/dataset.hpp"
#include "hello/loss.hpp"
#include "hello/nn.hpp"

namespace hello {

// One supervised training trajectory supplies every teacher: checkpoints are
// snapshots along it, and an ensemble is a window of those snapshots.
struct TeacherTrainConfig {
  std::string arch = "convnet_s";
  int64_t total_epochs = 24;
  int64_t save_every = 1;
  int64_t batch = 64;
  double lr = 0.05;
  double momentum = 0.9;
  uint64_t seed = 0;
  std::string out_dir;  // checkpoints land in <out_dir>/teacher/<epoch>.arc

  void validate() const;
};

struct TeacherCheckpoint {
  int64_t epoch = 0;
  std::string path;
};

struct TrajectoryResult {
  std::vector<TeacherCheckpoint> checkpoints;
  std::vector<double> epoch_losses;  // mean CE per epoch, 1-based epochs
};

// SGD-with-momentum on hard-label CE, cosine decay, fixed shuffle order per
// (seed, epoch). Saves an archive at every epoch divisible by save_every.
// Non-finite loss aborts with the epoch index; a final loss above the first
// epoch's is treated as divergence too.
TrajectoryResult train_trajectory(const LabeledDataset& ds,
                                  const TeacherTrainConfig& cfg);

// Checkpoint archives carry the net weights plus enough metadata to rebuild
// the spec without the training config.
void save_teacher_checkpoint(const std::string& path, const ConvNet<float>& net,
                             int64_t epoch);
struct LoadedTeacher {
  ConvNet<float> net;
  int64_t epoch = 0;
};
LoadedTeacher load_teacher_checkpoint(const std::string& path);

// JSON sidecar listing every checkpoint of a trajectory; paths are relative
// to the manifest's directory.
void save_trajectory_manifest(const std::string& path, const TrajectoryResult& traj,
                              const TeacherTrainConfig& cfg,
                              const std::string& config_hash);
TrajectoryResult load_trajectory_manifest(const std::string& path);
std::string trajectory_manifest_hash(const std::string& path);

struct TeacherEnsemble {
  std::vector<int64_t> epochs;        // ascending
  std::vector<ConvNet<float>> models; // same order as epochs
  std::pair<int64_t, int64_t> window{0, 0};
};

// The selection rule alone, exposed for oracle tests: `count` epochs out of
// `available` (any order), evenly spaced across the inclusive window, each
// target resolved to the nearest unused available epoch (ties toward the
// lower epoch). Too few epochs in the window is an error naming the deficit.
std::vector<int64_t> pick_even_epochs(const std::vector<int64_t>& available,
                                      std::pair<int64_t, int64_t> window,
                                      int64_t count);

TeacherEnsemble select_teachers(const std::vector<TeacherCheckpoint>& checkpoints,
                                std::pair<int64_t, int64_t> window, int64_t count);

// Arithmetic mean of per-teacher outputs in fixed (epoch) order. kProb
// averages softmax(logits / temp) rows; kLogit averages raw logits.
Tensorf ensemble_soft_labels(const TeacherEnsemble& ensemble, const Tensorf& images,
                             LabelSpace space, double temp = 1.0);

}  // namespace hello
