#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hello/dataset.hpp"
#include "hello/downstream.hpp"
#include "hello/nn.hpp"
#include "hello/projector.hpp"

namespace hello {

// Top-1 accuracy, first-maximum tie rule (lowest class index wins).
double evaluate(const ConvNet<float>& model, const LabeledDataset& test);
double evaluate(const Projector& proj, const LabeledDataset& test);

struct CrossArchRow {
  std::string arch;
  std::vector<double> per_seed;
  double mean = 0.0;
  double stddev = 0.0;  // population std over seeds
};

// train_student per (arch, seed) on identical data and the identical
// projector; one row per architecture.
std::vector<CrossArchRow> cross_arch_eval(const LabeledDataset& synthetic,
                                          const Projector& proj,
                                          const std::vector<std::string>& archs,
                                          const StudentConfig& base_cfg,
                                          const std::vector<uint64_t>& seeds,
                                          const LabeledDataset& test);

struct ContinualRun {
  int64_t steps = 0;
  std::vector<std::vector<int32_t>> partition;  // disjoint, union = all classes
  int64_t ipc = 0;
  std::vector<double> step_acc;      // one entry per step
  std::vector<int64_t> memory_sizes; // ipc * classes seen, per step

  void validate() const;
};

// Greedy-memory continual harness: classes arrive in `steps` groups (earlier
// groups take the remainder), memory holds ipc distilled images per seen
// class, the student retrains from scratch on memory with online labels, and
// accuracy is measured over seen-class test rows with the argmax restricted
// to seen classes.
ContinualRun gdumb_run(const LabeledDataset& synthetic, const Projector& proj,
                       const LabeledDataset& test, int64_t steps, int64_t ipc,
                       const StudentConfig& cfg);

struct StorageReport {
  uint64_t soft_label_bytes = 0;       // K * N_s * C * width, exact
  uint64_t projector_param_bytes = 0;
  uint64_t projector_artifact_bytes = 0;
  uint64_t synthetic_image_bytes = 0;
  double ratio_params = 0.0;    // projector params / labels
  double ratio_artifact = 0.0;  // serialized artifact / labels
  int64_t K = 0, N_s = 0, C = 0, width = 0, ipc = 0;  // inputs echoed
};

// Pure integer arithmetic, wide-checked; width must be 4 or 8.
StorageReport storage_report(int64_t K, int64_t N_s, int64_t C, int64_t width,
                             const StorageCount& proj, uint64_t synthetic_bytes,
                             int64_t ipc);

double bytes_to_mib(uint64_t bytes);
std::string format_storage_table(const StorageReport& r);  // human table
std::string storage_report_json(const StorageReport& r);   // machine record

double mean_of(const std::vector<double>& v);
double stddev_of(const std::vector<double>& v);  // population

}  // namespace hello
