#include "hello/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "hello/archive.hpp"
#include "hello/loss.hpp"

namespace hello {

void SynthesisConfig::validate() const {
  if (ipc < 1) throw ConfigError("synthesis ipc must be >= 1");
  if (grid < 1) throw ConfigError("synthesis grid must be >= 1");
  if (crops_per_image < 1) throw ConfigError("synthesis crops_per_image must be >= 1");
  if (!(min_frac > 0.0) || min_frac > max_frac)
    throw ConfigError("synthesis crop fractions must satisfy 0 < min <= max");
  if (max_frac > 1.0)
    throw ConfigError("synthesis max_frac above 1 would crop larger than the image");
}

void ImageUpdateConfig::validate() const {
  if (steps < 0) throw ConfigError("image update steps must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("image update lr must be positive");
  if (factor < 2) throw ConfigError("degrade factor must be >= 2");
}

void SyntheticDataset::validate() const {
  data.validate();
  if (ipc < 1) throw ValidationError("synthetic ipc must be >= 1");
  if (data.count() != ipc * data.num_classes())
    throw ValidationError("synthetic set must hold ipc images per class: " +
                          std::to_string(data.count()) + " != " +
                          std::to_string(ipc * data.num_classes()));
  if (static_cast<int64_t>(provenance.size()) != data.count())
    throw ValidationError("provenance count does not match image count");
  for (const auto& p : provenance) {
    if (p.grid != grid || static_cast<int64_t>(p.patches.size()) != grid * grid)
      throw ValidationError("provenance entry disagrees with grid " +
                            std::to_string(grid));
  }
}

std::vector<PatchCandidate> crop_candidates(const LabeledDataset& ds,
                                            int64_t per_image, double min_frac,
                                            double max_frac, Rng& rng) {
  ds.validate();
  if (per_image < 1) throw ValidationError("per_image must be >= 1");
  SynthesisConfig probe;
  probe.crops_per_image = per_image;
  probe.min_frac = min_frac;
  probe.max_frac = max_frac;
  probe.validate();

  int64_t c = ds.channels(), h = ds.height(), w = ds.width();
  int64_t side_max = std::min(h, w);
  Rng root = rng.split_tag("crops");
  std::vector<PatchCandidate> pool;
  pool.reserve(static_cast<std::size_t>(ds.count() * per_image));
  for (int64_t i = 0; i < ds.count(); ++i) {
    Rng r = root.split(static_cast<uint64_t>(i));
    for (int64_t j = 0; j < per_image; ++j) {
      double f = r.uniform(min_frac, max_frac);
      int64_t side = std::clamp<int64_t>(
          static_cast<int64_t>(std::lround(f * static_cast<double>(side_max))), 1,
          side_max);
      int64_t x = r.uniform_int(w - side + 1);
      int64_t y = r.uniform_int(h - side + 1);
      PatchCandidate cand;
      cand.source = i;
      cand.box = {x, y, side, side};
      cand.label = ds.hard_labels[static_cast<std::size_t>(i)];
      cand.pixels = Tensorf({c, side, side});
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t r2 = 0; r2 < side; ++r2)
          for (int64_t c2 = 0; c2 < side; ++c2)
            cand.pixels[(ch * side + r2) * side + c2] =
                ds.images.at4(i, ch, y + r2, x + c2);
      pool.push_back(std::move(cand));
    }
  }
  return pool;
}

Observer make_projector_observer(const Projector& p) {
  Observer obs;
  obs.in_c = p.encoder().in_channels();
  obs.in_h = p.encoder().in_h();
  obs.in_w = p.encoder().in_w();
  obs.classes = p.num_classes();
  obs.forward = [&p](const Tensorf& images) { return p.forward(images); };
  return obs;
}

Observer make_net_observer(const ConvNet<float>& net) {
  Observer obs;
  obs.in_c = net.spec().in_channels;
  obs.in_h = net.spec().in_h;
  obs.in_w = net.spec().in_w;
  obs.classes = net.spec().out_dim;
  obs.forward = [&net](const Tensorf& images) {
    return net.forward(images, nullptr, nullptr);
  };
  return obs;
}

namespace {

Tensorf resize_patch(const PatchCandidate& patch, int64_t th, int64_t tw) {
  int64_t c = patch.pixels.dim(0), h = patch.pixels.dim(1), w = patch.pixels.dim(2);
  Tensorf out({c, th, tw});
  kernels::bilinear_resize<float>(patch.pixels.ptr(), c, h, w, th, tw, out.ptr());
  return out;
}

// CE of softmax(logits) rows against hard labels, temp 1.
std::vector<double> ce_rows(const Tensorf& logits, const std::vector<int32_t>& labels) {
  int64_t n = logits.dim(0), c = logits.dim(1);
  Tensorf p(logits.shape);
  kernels::par::softmax_rows<float>(logits.ptr(), p.ptr(), n, c, 1.0f);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    int32_t y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= c)
      throw ValidationError("patch label " + std::to_string(y) + " out of range");
    out[static_cast<std::size_t>(r)] =
        -std::log(std::max(static_cast<double>(p.at2(r, y)), 1e-300));
  }
  return out;
}

}  // namespace

double patch_difficulty(const Observer& obs, const PatchCandidate& patch,
                        int32_t label) {
  if (patch.pixels.dim(0) != obs.in_c)
    throw ValidationError("patch channels do not match the observer");
  Tensorf resized = resize_patch(patch, obs.in_h, obs.in_w);
  Tensorf batch({1, obs.in_c, obs.in_h, obs.in_w});
  std::copy_n(resized.ptr(), resized.numel(), batch.ptr());
  Tensorf logits = obs.forward(batch);
  return ce_rows(logits, {label})[0];
}

void score_candidates(const Observer& obs, std::vector<PatchCandidate>& pool,
                      int64_t chunk) {
  if (chunk < 1) throw ValidationError("chunk must be >= 1");
  int64_t n = static_cast<int64_t>(pool.size());
  for (int64_t lo = 0; lo < n; lo += chunk) {
    int64_t hi = std::min(n, lo + chunk);
    Tensorf batch({hi - lo, obs.in_c, obs.in_h, obs.in_w});
    std::vector<int32_t> labels;
    int64_t img = obs.in_c * obs.in_h * obs.in_w;
    for (int64_t i = lo; i < hi; ++i) {
      Tensorf resized = resize_patch(pool[static_cast<std::size_t>(i)], obs.in_h,
                                     obs.in_w);
      std::copy_n(resized.ptr(), img, batch.ptr() + (i - lo) * img);
      labels.push_back(pool[static_cast<std::size_t>(i)].label);
    }
    std::vector<double> ce = ce_rows(obs.forward(batch), labels);
    for (int64_t i = lo; i < hi; ++i)
      pool[static_cast<std::size_t>(i)].difficulty = ce[static_cast<std::size_t>(i - lo)];
  }
}

std::vector<PatchCandidate> select_patches(const std::vector<PatchCandidate>& pool,
                                           int64_t k) {
  if (k < 1) throw ValidationError("select_patches needs k >= 1");
  if (static_cast<int64_t>(pool.size()) < k)
    throw ValidationError("pool holds " + std::to_string(pool.size()) +
                          " candidates, need " + std::to_string(k) + " (short by " +
                          std::to_string(k - static_cast<int64_t>(pool.size())) + ")");
  for (const auto& cand : pool)
    if (cand.label != pool.front().label)
      throw ValidationError("select_patches pools are per-class; labels differ");
    else if (!std::isfinite(cand.difficulty))
      throw ValidationError("candidate difficulty is not finite; score the pool first");

  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto key_less = [&pool](std::size_t a, std::size_t b) {
    const PatchCandidate& p = pool[a];
    const PatchCandidate& q = pool[b];
    auto ka = std::make_tuple(p.difficulty, p.source, p.box.x, p.box.y, p.box.w, p.box.h);
    auto kb = std::make_tuple(q.difficulty, q.source, q.box.x, q.box.y, q.box.w, q.box.h);
    return ka < kb;
  };
  std::sort(idx.begin(), idx.end(), key_less);
  std::vector<PatchCandidate> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int64_t i = 0; i < k; ++i) out.push_back(pool[idx[static_cast<std::size_t>(i)]]);
  return out;
}

Tensorf assemble_image(const std::vector<PatchCandidate>& patches, int64_t grid,
                       int64_t out_h, int64_t out_w) {
  if (grid < 1) throw ConfigError("grid must be >= 1");
  if (static_cast<int64_t>(patches.size()) != grid * grid)
    throw ValidationError("assembly needs exactly grid^2 patches, got " +
                          std::to_string(patches.size()));
  if (out_h % grid != 0 || out_w % grid != 0)
    throw ConfigError("output dims must be divisible by the grid");
  for (const auto& p : patches)
    if (p.label != patches.front().label)
      throw ValidationError("assembly mixes classes; per-class only");

  int64_t c = patches.front().pixels.dim(0);
  int64_t cell_h = out_h / grid, cell_w = out_w / grid;
  Tensorf out({c, out_h, out_w});
  for (int64_t g = 0; g < grid * grid; ++g) {
    Tensorf cell = resize_patch(patches[static_cast<std::size_t>(g)], cell_h, cell_w);
    int64_t r0 = (g / grid) * cell_h, c0 = (g % grid) * cell_w;
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t r = 0; r < cell_h; ++r)
        for (int64_t cc = 0; cc < cell_w; ++cc)
          out[(ch * out_h + r0 + r) * out_w + c0 + cc] =
              cell[(ch * cell_h + r) * cell_w + cc];
  }
  return out;
}

SyntheticDataset build_synthetic(const LabeledDataset& ds, const Observer& obs,
                                 const SynthesisConfig& cfg, Rng& rng) {
  cfg.validate();
  ds.validate();
  if (obs.classes != ds.num_classes())
    throw ValidationError("observer classes do not match the dataset");

  std::vector<PatchCandidate> pool =
      crop_candidates(ds, cfg.crops_per_image, cfg.min_frac, cfg.max_frac, rng);
  score_candidates(obs, pool);

  std::vector<std::vector<PatchCandidate>> by_class(
      static_cast<std::size_t>(ds.num_classes()));
  for (auto& cand : pool)
    by_class[static_cast<std::size_t>(cand.label)].push_back(std::move(cand));

  int64_t per_class = cfg.ipc * cfg.grid * cfg.grid;
  int64_t h = ds.height(), w = ds.width();
  SyntheticDataset sd;
  sd.ipc = cfg.ipc;
  sd.grid = cfg.grid;
  sd.data.class_names = ds.class_names;
  sd.data.split_tag = "train";
  sd.data.images = Tensorf({cfg.ipc * ds.num_classes(), ds.channels(), h, w});
  int64_t img = ds.channels() * h * w;
  int64_t out_i = 0;
  for (int64_t c = 0; c < ds.num_classes(); ++c) {
    std::vector<PatchCandidate> top =
        select_patches(by_class[static_cast<std::size_t>(c)], per_class);
    for (int64_t i = 0; i < cfg.ipc; ++i, ++out_i) {
      std::vector<PatchCandidate> cell(
          top.begin() + i * cfg.grid * cfg.grid,
          top.begin() + (i + 1) * cfg.grid * cfg.grid);
      Tensorf assembled = assemble_image(cell, cfg.grid, h, w);
      std::copy_n(assembled.ptr(), img, sd.data.images.ptr() + out_i * img);
      sd.data.hard_labels.push_back(static_cast<int32_t>(c));
      Provenance prov;
      prov.grid = cfg.grid;
      for (const auto& p : cell) prov.patches.push_back({p.source, p.box});
      sd.provenance.push_back(std::move(prov));
    }
  }
  sd.validate();
  return sd;
}

void save_synthetic(const std::string& arc_path, const std::string& manifest_path,
                    const SyntheticDataset& sd) {
  sd.validate();
  TensorArchive arc;
  arc.put("syn/images", sd.data.images);
  Tensorf labels({sd.data.count()});
  for (int64_t i = 0; i < sd.data.count(); ++i)
    labels[i] = static_cast<float>(sd.data.hard_labels[static_cast<std::size_t>(i)]);
  arc.put("syn/labels", std::move(labels));
  archive_put_strings(arc, "syn/class_names", sd.data.class_names);
  archive_put_scalar(arc, "syn/ipc", sd.ipc);
  archive_put_scalar(arc, "syn/grid", sd.grid);
  archive_put_string(arc, "syn/config_hash", sd.config_hash);
  arc.save_file(arc_path);

  nlohmann::json m;
  m["ipc"] = sd.ipc;
  m["grid"] = sd.grid;
  m["config_hash"] = sd.config_hash;
  nlohmann::json images = nlohmann::json::array();
  for (int64_t i = 0; i < sd.data.count(); ++i) {
    nlohmann::json e;
    e["label"] = sd.data.hard_labels[static_cast<std::size_t>(i)];
    nlohmann::json patches = nlohmann::json::array();
    for (const auto& p : sd.provenance[static_cast<std::size_t>(i)].patches) {
      nlohmann::json pe;
      pe["source"] = p.source;
      pe["box"] = {p.box.x, p.box.y, p.box.w, p.box.h};
      patches.push_back(pe);
    }
    e["patches"] = patches;
    images.push_back(e);
  }
  m["images"] = images;
  std::ofstream os(manifest_path);
  if (!os) throw IoError("cannot open " + manifest_path + " for writing");
  os << m.dump(2) << "\n";
  if (!os) throw IoError("write failed for " + manifest_path);
}

SyntheticDataset load_synthetic(const std::string& arc_path,
                                const std::string& manifest_path) {
  TensorArchive arc = TensorArchive::load_file(arc_path);
  SyntheticDataset sd;
  sd.data.images = arc.get_f32("syn/images");
  const Tensorf& labels = arc.get_f32("syn/labels");
  for (int64_t i = 0; i < labels.numel(); ++i)
    sd.data.hard_labels.push_back(static_cast<int32_t>(labels[i]));
  sd.data.class_names = archive_get_strings(arc, "syn/class_names");
  sd.data.split_tag = "train";
  sd.ipc = archive_get_scalar(arc, "syn/ipc");
  sd.grid = archive_get_scalar(arc, "syn/grid");
  sd.config_hash = archive_get_string(arc, "syn/config_hash");

  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open " + manifest_path);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path + ": " + e.what());
  }
  if (m.at("config_hash").get<std::string>() != sd.config_hash)
    throw ValidationError("provenance manifest and archive disagree on config hash");
  for (const auto& e : m.at("images")) {
    Provenance prov;
    prov.grid = sd.grid;
    for (const auto& pe : e.at("patches")) {
      auto box = pe.at("box").get<std::vector<int64_t>>();
      if (box.size() != 4) throw FormatError(manifest_path + ": box needs 4 entries");
      prov.patches.push_back({pe.at("source").get<int64_t>(),
                              {box[0], box[1], box[2], box[3]}});
    }
    sd.provenance.push_back(std::move(prov));
  }
  sd.validate();
  return sd;
}

ImageUpdateResult image_update(SyntheticDataset& sd, ImageEncoder& enc,
                               const ImageUpdateConfig& cfg) {
  cfg.validate();
  sd.validate();
  int64_t n = sd.data.count();
  int64_t c = sd.data.channels(), h = sd.data.height(), w = sd.data.width();
  int64_t img = c * h * w;

  ImageUpdateResult res;
  std::vector<std::vector<double>> traces(
      static_cast<std::size_t>(n),
      std::vector<double>(static_cast<std::size_t>(cfg.steps + 1), 0.0));

  for (int64_t i = 0; i < n; ++i) {
    Tensorf p({c, h, w});
    std::copy_n(sd.data.images.ptr() + i * img, img, p.ptr());
    Tensorf original = p;
    auto& trace = traces[static_cast<std::size_t>(i)];
    bool skipped = false;
    for (int64_t s = 0; s < cfg.steps; ++s) {
      Tensorf grad = Tensorf::zeros({c, h, w});
      double loss = degradation_loss_grad(enc, p, cfg.factor, &grad);
      trace[static_cast<std::size_t>(s)] = loss;
      bool finite = std::isfinite(loss);
      for (int64_t j = 0; finite && j < grad.numel(); ++j)
        finite = std::isfinite(static_cast<double>(grad[j]));
      if (!finite) {
        p = original;
        double base = degradation_loss_grad<float>(enc, p, cfg.factor, nullptr);
        std::fill(trace.begin(), trace.end(), base);
        skipped = true;
        break;
      }
      for (int64_t j = 0; j < p.numel(); ++j)
        p[j] = std::clamp(p[j] - static_cast<float>(cfg.lr) * grad[j], 0.0f, 1.0f);
    }
    if (!skipped)
      trace[static_cast<std::size_t>(cfg.steps)] =
          degradation_loss_grad<float>(enc, p, cfg.factor, nullptr);
    std::copy_n(p.ptr(), img, sd.data.images.ptr() + i * img);
    skipped ? ++res.skipped : ++res.updated;
  }

  res.mean_loss.assign(static_cast<std::size_t>(cfg.steps + 1), 0.0);
  for (const auto& trace : traces)
    for (std::size_t s = 0; s < trace.size(); ++s)
      res.mean_loss[s] += trace[s] / static_cast<double>(n);
  return res;
}

}  // namespace hello
