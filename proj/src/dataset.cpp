#include "hello/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "hello/archive.hpp"
#include "hello/common.hpp"

namespace hello {

void LabeledDataset::validate() const {
  if (images.rank() != 4)
    throw ValidationError("dataset images must be 4-D, got shape " +
                          shape_str(images.shape));
  if (count() != static_cast<int64_t>(hard_labels.size()))
    throw ValidationError("dataset has " + std::to_string(count()) +
                          " images but " + std::to_string(hard_labels.size()) +
                          " labels");
  int64_t c = num_classes();
  if (c < 2) throw ValidationError("dataset needs at least 2 classes");
  for (std::size_t i = 0; i < hard_labels.size(); ++i) {
    if (hard_labels[i] < 0 || hard_labels[i] >= c)
      throw ValidationError("label out of range at index " + std::to_string(i));
  }
  if (split_tag != "train" && split_tag != "test")
    throw ValidationError("split_tag must be train or test, got " + split_tag);
  for (int64_t i = 0; i < images.numel(); ++i) {
    float v = images[i];
    if (!(v >= 0.0f && v <= 1.0f))
      throw ValidationError("pixel outside [0,1] at flat index " + std::to_string(i));
  }
}

std::vector<std::string> toy_class_names(int64_t classes) {
  static const char* kBands[] = {"coarse", "low", "mid", "high", "fine",
                                 "ultra", "micro", "nano"};
  if (classes < 2 || classes % 2 != 0 || classes > 16)
    throw ValidationError("toy class count must be even and in [2,16]");
  std::vector<std::string> names;
  for (int64_t c = 0; c < classes; ++c) {
    std::string band = kBands[c / 2];
    names.push_back(band + (c % 2 == 0 ? "_h" : "_v"));
  }
  return names;
}

LabeledDataset make_toy_dataset(const ToySpec& spec, const std::string& split_tag,
                                Rng& rng) {
  constexpr double kPi = 3.14159265358979323846;
  LabeledDataset ds;
  ds.class_names = toy_class_names(spec.classes);
  ds.split_tag = split_tag;
  int64_t n = spec.classes * spec.per_class;
  ds.images = Tensorf({n, spec.channels, spec.height, spec.width});
  ds.hard_labels.resize(static_cast<std::size_t>(n));

  // Frequency bands in cycles per image; adjacent bands overlap under the
  // +-8% jitter, which is what makes neighbors confusable.
  std::vector<double> freqs;
  for (int64_t b = 0; b < spec.classes / 2; ++b) freqs.push_back(1.5 + 1.0 * b);

  Rng split_rng = rng.split_tag(split_tag);
  int64_t idx = 0;
  for (int64_t c = 0; c < spec.classes; ++c) {
    double base_freq = freqs[static_cast<std::size_t>(c / 2)];
    double base_theta = (c % 2 == 0) ? 0.0 : kPi / 2.0;
    for (int64_t i = 0; i < spec.per_class; ++i, ++idx) {
      Rng r = split_rng.split(c * 1000003 + i);
      double freq = base_freq * (1.0 + r.uniform(-0.08, 0.08));
      double theta = base_theta + r.uniform(-0.15, 0.15);
      double phase = r.uniform(0.0, 2.0 * kPi);
      double amp = r.uniform(0.30, 0.45);
      double bias = r.uniform(0.42, 0.58);
      double ct = std::cos(theta), st = std::sin(theta);
      ds.hard_labels[static_cast<std::size_t>(idx)] = static_cast<int32_t>(c);
      for (int64_t ch = 0; ch < spec.channels; ++ch) {
        double gain = r.uniform(0.8, 1.2);
        for (int64_t y = 0; y < spec.height; ++y) {
          double v = static_cast<double>(y) / static_cast<double>(spec.height);
          for (int64_t x = 0; x < spec.width; ++x) {
            double u = static_cast<double>(x) / static_cast<double>(spec.width);
            double wave =
                std::sin(2.0 * kPi * freq * (u * ct + v * st) + phase);
            double val = bias + amp * gain * wave + r.gauss(0.0, spec.noise);
            ds.images.at4(idx, ch, y, x) =
                static_cast<float>(std::clamp(val, 0.0, 1.0));
          }
        }
      }
    }
  }
  ds.validate();
  return ds;
}

LabeledDataset subset_per_class(const LabeledDataset& ds, int64_t per_class) {
  if (per_class < 1) throw ValidationError("per_class must be >= 1");
  std::vector<int64_t> keep;
  std::vector<int64_t> taken(static_cast<std::size_t>(ds.num_classes()), 0);
  for (int64_t i = 0; i < ds.count(); ++i) {
    int32_t c = ds.hard_labels[static_cast<std::size_t>(i)];
    if (taken[static_cast<std::size_t>(c)] < per_class) {
      keep.push_back(i);
      ++taken[static_cast<std::size_t>(c)];
    }
  }
  for (int64_t c = 0; c < ds.num_classes(); ++c) {
    if (taken[static_cast<std::size_t>(c)] < per_class)
      throw ValidationError("class " + ds.class_names[static_cast<std::size_t>(c)] +
                            " has fewer than " + std::to_string(per_class) +
                            " examples");
  }
  LabeledDataset out;
  out.class_names = ds.class_names;
  out.split_tag = ds.split_tag;
  int64_t m = static_cast<int64_t>(keep.size());
  int64_t img = ds.channels() * ds.height() * ds.width();
  out.images = Tensorf({m, ds.channels(), ds.height(), ds.width()});
  out.hard_labels.resize(static_cast<std::size_t>(m));
  for (int64_t j = 0; j < m; ++j) {
    std::copy_n(ds.images.ptr() + keep[static_cast<std::size_t>(j)] * img, img,
                out.images.ptr() + j * img);
    out.hard_labels[static_cast<std::size_t>(j)] =
        ds.hard_labels[static_cast<std::size_t>(keep[static_cast<std::size_t>(j)])];
  }
  return out;
}

Tensorf gather_images(const Tensorf& images, const std::vector<int64_t>& idx) {
  if (images.rank() != 4) throw ValidationError("gather_images expects a 4-D stack");
  if (idx.empty()) throw ValidationError("gather_images needs at least one index");
  int64_t img = images.dim(1) * images.dim(2) * images.dim(3);
  Tensorf out({static_cast<int64_t>(idx.size()), images.dim(1), images.dim(2),
               images.dim(3)});
  for (std::size_t j = 0; j < idx.size(); ++j) {
    int64_t i = idx[j];
    if (i < 0 || i >= images.dim(0))
      throw ValidationError("gather index " + std::to_string(i) + " out of range");
    std::copy_n(images.ptr() + i * img, img, out.ptr() + static_cast<int64_t>(j) * img);
  }
  return out;
}

void save_dataset(const std::string& path, const LabeledDataset& ds) {
  ds.validate();
  TensorArchive arc;
  arc.put("data/images", ds.images);
  Tensorf labels({ds.count()});
  for (int64_t i = 0; i < ds.count(); ++i)
    labels[i] = static_cast<float>(ds.hard_labels[static_cast<std::size_t>(i)]);
  arc.put("data/labels", std::move(labels));
  archive_put_strings(arc, "data/class_names", ds.class_names);
  archive_put_string(arc, "data/split", ds.split_tag);
  arc.save_file(path);
}

LabeledDataset load_dataset(const std::string& path) {
  TensorArchive arc = TensorArchive::load_file(path);
  LabeledDataset ds;
  ds.images = arc.get_f32("data/images");
  const Tensorf& labels = arc.get_f32("data/labels");
  ds.hard_labels.resize(static_cast<std::size_t>(labels.numel()));
  for (int64_t i = 0; i < labels.numel(); ++i)
    ds.hard_labels[static_cast<std::size_t>(i)] = static_cast<int32_t>(labels[i]);
  ds.class_names = archive_get_strings(arc, "data/class_names");
  ds.split_tag = archive_get_string(arc, "data/split");
  ds.validate();
  return ds;
}

}  // namespace hello
