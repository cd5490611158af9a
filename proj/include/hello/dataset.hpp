#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hello/rng.hpp"
#include "hello/tensor.hpp"

namespace hello {

// An image-classification split. Pixels live in [0,1].
struct LabeledDataset {
  Tensorf images;  // (N, C, H, W)
  std::vector<int32_t> hard_labels;
  std::vector<std::string> class_names;
  std::string split_tag;  // "train" or "test"

  int64_t count() const { return images.dim(0); }
  int64_t channels() const { return images.dim(1); }
  int64_t height() const { return images.dim(2); }
  int64_t width() const { return images.dim(3); }
  int64_t num_classes() const { return static_cast<int64_t>(class_names.size()); }

  void validate() const;
};

// Procedural grating textures: frequency bands x two orientations, with
// random phase, amplitude, tint, frequency jitter, orientation jitter, and
// pixel noise. Adjacent frequency bands are deliberately confusable. Class
// count must be even (pairs of orientations per band).
struct ToySpec {
  int64_t classes = 10;
  int64_t per_class = 500;
  int64_t channels = 3;
  int64_t height = 32;
  int64_t width = 32;
  double noise = 0.06;
};

LabeledDataset make_toy_dataset(const ToySpec& spec, const std::string& split_tag,
                                Rng& rng);

// Deterministic names for the toy classes ("coarse_h", "coarse_v", ...).
std::vector<std::string> toy_class_names(int64_t classes);

// First `per_class` examples of each class, original order. Used to carve
// small distilled-scale subsets out of a split.
LabeledDataset subset_per_class(const LabeledDataset& ds, int64_t per_class);

// Rows of a (N, C, H, W) stack picked by index, in the order given. The
// batching primitive shared by every training loop.
Tensorf gather_images(const Tensorf& images, const std::vector<int64_t>& idx);

template <class V>
std::vector<V> gather_values(const std::vector<V>& v, const std::vector<int64_t>& idx) {
  std::vector<V> out;
  out.reserve(idx.size());
  for (int64_t i : idx) out.push_back(v[static_cast<std::size_t>(i)]);
  return out;
}

// Archive round-trip under names "data/images", "data/labels",
// "data/class_names", "data/split".
void save_dataset(const std::string& path, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::string& path);

}  // namespace hello
