#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hello/config.hpp"
#include "hello/dataset.hpp"
#include "hello/downstream.hpp"
#include "hello/encoders.hpp"
#include "hello/projector.hpp"
#include "hello/synthesis.hpp"
#include "hello/teachers.hpp"
#include "hello/transfer.hpp"

namespace hello {

// Canonical stage order. update-images is conditional on image_update.enabled;
// the other stages always run.
const std::vector<std::string>& pipeline_stages();

// Every artifact path of a run, rooted at out_dir.
struct RunPaths {
  std::string out_dir;
  std::string train_data;       // data/train.arc
  std::string test_data;        // data/test.arc
  std::string encoder;          // encoder/pair.arc
  std::string teacher_dir;      // teacher checkpoints land here
  std::string teacher_manifest; // teacher/manifest.json
  std::string syn_archive;      // syn/images.arc
  std::string syn_manifest;     // syn/prov.json
  std::string syn_updated;      // syn/updated.arc (pixel-updated copy)
  std::string update_trace;     // syn/update_trace.json
  std::string projector;        // proj/artifact.arc
  std::string transfer_log;     // proj/transfer_log.jsonl
  std::string student;          // student/student.arc
  std::string student_metrics;  // student/metrics.jsonl
  std::string eval_report;      // eval/report.json

  std::string done(const std::string& stage) const;  // <out_dir>/<stage>.done
};

RunPaths run_paths(const std::string& out_dir);

// Config subtrees mapped onto module configs. Each module validates its own.
ToySpec data_spec(const Config& cfg);
int64_t test_per_class(const Config& cfg);
TeacherTrainConfig teacher_config(const Config& cfg, const std::string& out_dir);
TransferConfig transfer_config(const Config& cfg);
SynthesisConfig synthesis_config(const Config& cfg);
ImageUpdateConfig image_update_config(const Config& cfg);
AugmentationPolicy aug_policy(const Config& cfg);
StudentConfig student_config(const Config& cfg);

// Completion sidecar: {"stage","config_hash","artifacts","seconds"}.
struct StageStamp {
  std::string stage;
  std::string config_hash;  // hex64 of Config::hash()
  std::vector<std::string> artifacts;
  double seconds = 0.0;
};

void write_stage_stamp(const std::string& path, const StageStamp& stamp);
StageStamp read_stage_stamp(const std::string& path);

// Resume protocol: no stamp -> run; matching hash -> skip; stale hash is an
// error unless force, which reruns and overwrites the stamp.
enum class StageAction { kRun, kSkip };
StageAction plan_stage(const std::string& done_path, const std::string& config_hash,
                       bool force);

struct StageResult {
  std::string stage;
  bool skipped = false;
  double seconds = 0.0;
};

// Orchestrates the full run. Stage methods are individually callable (the CLI
// exposes each as a subcommand); each checks its stamp, loads its inputs from
// the artifact tree, and stamps on success. Loaders cache within one process.
class Pipeline {
 public:
  explicit Pipeline(Config cfg, bool force = false);

  const Config& config() const { return cfg_; }
  const RunPaths& paths() const { return paths_; }
  const std::string& config_hash() const { return hash_; }

  StageResult init_data();
  StageResult harvest_teachers();
  StageResult init_synthetic();
  StageResult fit_projector_stage();
  StageResult update_images_stage();
  StageResult train_student_stage();
  StageResult eval_student();

  // All stages in order; update-images only when image_update.enabled.
  std::vector<StageResult> run_all();

  // Artifact loaders, usable once the producing stage has run.
  const LabeledDataset& train_set();
  const LabeledDataset& test_set();
  const TensorArchive& encoder_archive();
  TextEncoder text_encoder();
  // Fresh zero-shot projector (text-initialized head, no adapters).
  Projector zero_shot_projector();
  // The fitted artifact, rebuilt against the stored encoder pair.
  Projector fitted_projector();
  // Pixel-updated synthetic set when enabled and present, else the original.
  SyntheticDataset student_train_set();
  SyntheticDataset raw_synthetic();
  TeacherEnsemble teacher_ensemble();

 private:
  StageResult guarded(const std::string& stage,
                      const std::function<std::vector<std::string>()>& body);
  uint64_t seed() const;

  Config cfg_;
  bool force_ = false;
  RunPaths paths_;
  std::string hash_;
  std::optional<LabeledDataset> train_, test_;
  std::optional<TensorArchive> encoder_arc_;
};

}  // namespace hello
