#include "hello/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "hello/loss.hpp"

namespace hello {

namespace {

template <class Forward>
double accuracy_over(const LabeledDataset& test, int64_t chunk, Forward&& forward) {
  if (test.count() == 0) throw ValidationError("cannot evaluate an empty set");
  int64_t hits = 0;
  for (int64_t lo = 0; lo < test.count(); lo += chunk) {
    int64_t hi = std::min(test.count(), lo + chunk);
    std::vector<int64_t> idx;
    for (int64_t i = lo; i < hi; ++i) idx.push_back(i);
    Tensorf logits = forward(gather_images(test.images, idx));
    for (int64_t r = 0; r < hi - lo; ++r)
      if (argmax_row(logits, r) == test.hard_labels[static_cast<std::size_t>(lo + r)])
        ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test.count());
}

}  // namespace

double evaluate(const ConvNet<float>& model, const LabeledDataset& test) {
  test.validate();
  if (model.spec().out_dim != test.num_classes())
    throw ValidationError("model output dim does not match the test label space");
  return accuracy_over(test, 256,
                       [&](const Tensorf& x) { return model.forward(x, nullptr, nullptr); });
}

double evaluate(const Projector& proj, const LabeledDataset& test) {
  test.validate();
  if (proj.num_classes() != test.num_classes())
    throw ValidationError("projector classes do not match the test label space");
  return accuracy_over(test, 256, [&](const Tensorf& x) { return proj.forward(x); });
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw ValidationError("mean of an empty list");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
  double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::vector<CrossArchRow> cross_arch_eval(const LabeledDataset& synthetic,
                                          const Projector& proj,
                                          const std::vector<std::string>& archs,
                                          const StudentConfig& base_cfg,
                                          const std::vector<uint64_t>& seeds,
                                          const LabeledDataset& test) {
  if (archs.empty()) throw ValidationError("cross-arch eval needs architectures");
  if (seeds.empty()) throw ValidationError("cross-arch eval needs seeds");
  std::vector<CrossArchRow> rows;
  for (const auto& arch : archs) {
    CrossArchRow row;
    row.arch = arch;
    for (uint64_t seed : seeds) {
      StudentConfig cfg = base_cfg;
      cfg.arch = arch;
      cfg.seed = seed;
      StudentResult res = train_student(synthetic, proj, cfg, test);
      row.per_seed.push_back(res.final_test_acc);
    }
    row.mean = mean_of(row.per_seed);
    row.stddev = stddev_of(row.per_seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

void ContinualRun::validate() const {
  if (steps < 1) throw ValidationError("continual run needs steps >= 1");
  if (static_cast<int64_t>(step_acc.size()) != steps)
    throw ValidationError("accuracy list length must equal step count");
  if (static_cast<int64_t>(partition.size()) != steps)
    throw ValidationError("partition length must equal step count");
  std::set<int32_t> seen;
  for (const auto& group : partition)
    for (int32_t c : group)
      if (!seen.insert(c).second)
        throw ValidationError("partition groups are not disjoint");
}

ContinualRun gdumb_run(const LabeledDataset& synthetic, const Projector& proj,
                       const LabeledDataset& test, int64_t steps, int64_t ipc,
                       const StudentConfig& cfg) {
  synthetic.validate();
  test.validate();
  int64_t classes = synthetic.num_classes();
  if (steps < 1 || steps > classes)
    throw ValidationError("steps must be in [1, classes]");
  if (ipc < 1) throw ValidationError("ipc budget must be >= 1");

  // The synthetic set is the memory source: ipc per class must be available.
  std::vector<int64_t> per_class(static_cast<std::size_t>(classes), 0);
  for (int32_t y : synthetic.hard_labels) ++per_class[static_cast<std::size_t>(y)];
  for (int64_t c = 0; c < classes; ++c)
    if (per_class[static_cast<std::size_t>(c)] < ipc)
      throw ValidationError("ipc budget " + std::to_string(ipc) + " exceeds the " +
                            std::to_string(per_class[static_cast<std::size_t>(c)]) +
                            " distilled images of class " + std::to_string(c));

  ContinualRun run;
  run.steps = steps;
  run.ipc = ipc;
  // Ascending class ids; earlier steps take the extra classes.
  int64_t base = classes / steps, extra = classes % steps;
  int32_t next = 0;
  for (int64_t s = 0; s < steps; ++s) {
    int64_t take = base + (s < extra ? 1 : 0);
    std::vector<int32_t> group;
    for (int64_t i = 0; i < take; ++i) group.push_back(next++);
    run.partition.push_back(std::move(group));
  }

  std::vector<bool> seen(static_cast<std::size_t>(classes), false);
  for (int64_t s = 0; s < steps; ++s) {
    for (int32_t c : run.partition[static_cast<std::size_t>(s)])
      seen[static_cast<std::size_t>(c)] = true;

    // Memory: first ipc distilled images of every seen class.
    std::vector<int64_t> mem_idx;
    std::vector<int64_t> taken(static_cast<std::size_t>(classes), 0);
    for (int64_t i = 0; i < synthetic.count(); ++i) {
      int32_t y = synthetic.hard_labels[static_cast<std::size_t>(i)];
      if (seen[static_cast<std::size_t>(y)] && taken[static_cast<std::size_t>(y)] < ipc) {
        mem_idx.push_back(i);
        ++taken[static_cast<std::size_t>(y)];
      }
    }
    LabeledDataset memory;
    memory.images = gather_images(synthetic.images, mem_idx);
    memory.hard_labels = gather_values(synthetic.hard_labels, mem_idx);
    memory.class_names = synthetic.class_names;
    memory.split_tag = "train";
    run.memory_sizes.push_back(memory.count());

    StudentConfig step_cfg = cfg;
    step_cfg.seed = cfg.seed + static_cast<uint64_t>(s);
    step_cfg.eval_every = 0;  // the harness evaluates below, masked to seen classes
    StudentResult res = train_student(memory, proj, step_cfg, test);

    // Seen-class test rows; argmax restricted to seen classes.
    std::vector<int64_t> rows;
    for (int64_t i = 0; i < test.count(); ++i)
      if (seen[static_cast<std::size_t>(test.hard_labels[static_cast<std::size_t>(i)])])
        rows.push_back(i);
    if (rows.empty()) throw ValidationError("test set has no rows for seen classes");
    Tensorf imgs = gather_images(test.images, rows);
    std::vector<int32_t> labels = gather_values(test.hard_labels, rows);
    int64_t hits = 0;
    for (int64_t lo = 0; lo < imgs.dim(0); lo += 256) {
      int64_t hi = std::min(imgs.dim(0), lo + 256);
      std::vector<int64_t> idx;
      for (int64_t i = lo; i < hi; ++i) idx.push_back(i);
      Tensorf logits = res.model.forward(gather_images(imgs, idx), nullptr, nullptr);
      for (int64_t r = 0; r < hi - lo; ++r) {
        int64_t best = -1;
        for (int64_t j = 0; j < classes; ++j) {
          if (!seen[static_cast<std::size_t>(j)]) continue;
          if (best < 0 || logits.at2(r, j) > logits.at2(r, best)) best = j;
        }
        if (best == labels[static_cast<std::size_t>(lo + r)]) ++hits;
      }
    }
    run.step_acc.push_back(static_cast<double>(hits) /
                           static_cast<double>(imgs.dim(0)));
  }
  run.validate();
  return run;
}

StorageReport storage_report(int64_t K, int64_t N_s, int64_t C, int64_t width,
                             const StorageCount& proj, uint64_t synthetic_bytes,
                             int64_t ipc) {
  if (K < 1 || N_s < 1 || C < 1) throw ValidationError("K, N_s, C must be positive");
  if (width != 4 && width != 8) throw ValidationError("element width must be 4 or 8");
  unsigned __int128 wide = static_cast<unsigned __int128>(K);
  wide *= static_cast<unsigned __int128>(N_s);
  wide *= static_cast<unsigned __int128>(C);
  wide *= static_cast<unsigned __int128>(width);
  if (wide > static_cast<unsigned __int128>(INT64_MAX))
    throw ValidationError("label byte count overflows 2^63");
  StorageReport r;
  r.soft_label_bytes = static_cast<uint64_t>(wide);
  r.projector_param_bytes = static_cast<uint64_t>(proj.param_bytes);
  r.projector_artifact_bytes = static_cast<uint64_t>(proj.artifact_bytes);
  r.synthetic_image_bytes = synthetic_bytes;
  r.ratio_params = static_cast<double>(r.projector_param_bytes) /
                   static_cast<double>(r.soft_label_bytes);
  r.ratio_artifact = static_cast<double>(r.projector_artifact_bytes) /
                     static_cast<double>(r.soft_label_bytes);
  r.K = K;
  r.N_s = N_s;
  r.C = C;
  r.width = width;
  r.ipc = ipc;
  return r;
}

double bytes_to_mib(uint64_t bytes) {
  return static_cast<double>(bytes) / (1024.0 * 1024.0);
}

namespace {
std::string fixed1(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}
std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}
}  // namespace

std::string format_storage_table(const StorageReport& r) {
  std::ostringstream os;
  os << "storage report (K=" << r.K << ", N_s=" << r.N_s << ", C=" << r.C
     << ", width=" << r.width << ", ipc=" << r.ipc << ")\n";
  os << "  soft labels        " << r.soft_label_bytes << " bytes ("
     << fixed1(bytes_to_mib(r.soft_label_bytes)) << " MiB)\n";
  os << "  projector params   " << r.projector_param_bytes << " bytes ("
     << fixed1(bytes_to_mib(r.projector_param_bytes)) << " MiB)\n";
  os << "  projector artifact " << r.projector_artifact_bytes << " bytes ("
     << fixed1(bytes_to_mib(r.projector_artifact_bytes)) << " MiB)\n";
  if (r.synthetic_image_bytes > 0)
    os << "  synthetic images   " << r.synthetic_image_bytes << " bytes ("
       << fixed1(bytes_to_mib(r.synthetic_image_bytes)) << " MiB)\n";
  os << "  params/labels      " << fixed6(r.ratio_params) << "\n";
  os << "  artifact/labels    " << fixed6(r.ratio_artifact) << "\n";
  return os.str();
}

std::string storage_report_json(const StorageReport& r) {
  std::ostringstream os;
  os << "{\"K\":" << r.K << ",\"N_s\":" << r.N_s << ",\"C\":" << r.C
     << ",\"width\":" << r.width << ",\"ipc\":" << r.ipc
     << ",\"soft_label_bytes\":" << r.soft_label_bytes
     << ",\"projector_param_bytes\":" << r.projector_param_bytes
     << ",\"projector_artifact_bytes\":" << r.projector_artifact_bytes
     << ",\"synthetic_image_bytes\":" << r.synthetic_image_bytes
     << ",\"ratio_params\":" << num_str(r.ratio_params)
     << ",\"ratio_artifact\":" << num_str(r.ratio_artifact) << "}";
  return os.str();
}

}  // namespace hello
