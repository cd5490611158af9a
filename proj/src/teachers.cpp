#include "hello/teachers.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "hello/archive.hpp"
#include "hello/common.hpp"
#include "hello/optim.hpp"
#include "hello/rng.hpp"

namespace hello {

void TeacherTrainConfig::validate() const {
  if (total_epochs < 1) throw ConfigError("teacher total_epochs must be >= 1");
  if (save_every < 1) throw ConfigError("teacher save_every must be >= 1");
  if (batch < 1) throw ConfigError("teacher batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("teacher lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ConfigError("teacher momentum must be in [0,1)");
  if (out_dir.empty()) throw ConfigError("teacher out_dir must be set");
}

void save_teacher_checkpoint(const std::string& path, const ConvNet<float>& net,
                             int64_t epoch) {
  TensorArchive arc;
  net.to_archive(arc);
  archive_put_string(arc, "meta/arch", net.spec().arch_id);
  archive_put_string(arc, "meta/prefix", net.spec().param_prefix);
  archive_put_scalar(arc, "meta/epoch", epoch);
  archive_put_scalar(arc, "meta/classes", net.spec().out_dim);
  Tensorf ishape({3});
  ishape[0] = static_cast<float>(net.spec().in_channels);
  ishape[1] = static_cast<float>(net.spec().in_h);
  ishape[2] = static_cast<float>(net.spec().in_w);
  arc.put("meta/input_shape", std::move(ishape));
  arc.save_file(path);
}

LoadedTeacher load_teacher_checkpoint(const std::string& path) {
  TensorArchive arc = TensorArchive::load_file(path);
  std::string arch = archive_get_string(arc, "meta/arch");
  std::string prefix = archive_get_string(arc, "meta/prefix");
  const Tensorf& ishape = arc.get_f32("meta/input_shape");
  if (ishape.numel() != 3) throw FormatError(path + ": meta/input_shape must have 3 entries");
  ConvNetSpec spec = make_convnet_spec(
      arch, prefix, static_cast<int64_t>(ishape[0]), static_cast<int64_t>(ishape[1]),
      static_cast<int64_t>(ishape[2]), archive_get_scalar(arc, "meta/classes"));
  LoadedTeacher out{ConvNet<float>(std::move(spec)), archive_get_scalar(arc, "meta/epoch")};
  out.net.from_archive(arc);
  return out;
}

TrajectoryResult train_trajectory(const LabeledDataset& ds,
                                  const TeacherTrainConfig& cfg) {
  cfg.validate();
  ds.validate();
  ConvNetSpec spec = make_convnet_spec(cfg.arch, "t/", ds.channels(), ds.height(),
                                       ds.width(), ds.num_classes());
  ConvNet<float> net(std::move(spec));
  Rng root(cfg.seed);
  Rng init = root.split_tag("teacher_init");
  net.init_weights(init);

  std::filesystem::path dir = std::filesystem::path(cfg.out_dir) / "teacher";
  std::filesystem::create_directories(dir);

  int64_t n = ds.count();
  int64_t batches = (n + cfg.batch - 1) / cfg.batch;
  int64_t total_steps = cfg.total_epochs * batches;
  SgdMomentum<float> opt(cfg.lr, cfg.momentum);
  auto refs = net_param_refs(net);

  TrajectoryResult result;
  Rng order_root = root.split_tag("teacher_order");
  std::vector<int64_t> order(static_cast<std::size_t>(n));
  int64_t step = 0;
  for (int64_t epoch = 1; epoch <= cfg.total_epochs; ++epoch) {
    for (int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng er = order_root.split(static_cast<uint64_t>(epoch));
    er.shuffle(order);

    double loss_sum = 0.0;
    for (int64_t b = 0; b < batches; ++b) {
      int64_t lo = b * cfg.batch;
      int64_t hi = std::min(n, lo + cfg.batch);
      std::vector<int64_t> idx(order.begin() + lo, order.begin() + hi);
      Tensorf x = gather_images(ds.images, idx);
      std::vector<int32_t> y = gather_values(ds.hard_labels, idx);

      typename ConvNet<float>::Ctx ctx;
      Tensorf logits = net.forward(x, &ctx, nullptr);
      Tensorf dlogits = Tensorf::zeros(logits.shape);
      double ce = ce_softmax(logits, y, 1.0, &dlogits, 1.0);
      if (!std::isfinite(ce))
        throw TrainingError("teacher training diverged at epoch " +
                            std::to_string(epoch));
      loss_sum += ce * static_cast<double>(hi - lo);

      net.zero_grads();
      net.backward(ctx, dlogits, nullptr, nullptr, true, false);
      opt.step(refs, cosine_scale(step, total_steps));
      ++step;
    }
    double epoch_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(epoch_loss))
      throw TrainingError("teacher training diverged at epoch " + std::to_string(epoch));
    result.epoch_losses.push_back(epoch_loss);

    if (epoch % cfg.save_every == 0) {
      std::string path = (dir / (std::to_string(epoch) + ".arc")).string();
      save_teacher_checkpoint(path, net, epoch);
      result.checkpoints.push_back({epoch, path});
    }
  }
  if (result.epoch_losses.back() > result.epoch_losses.front())
    throw TrainingError("teacher training diverged: final epoch loss " +
                        num_str(result.epoch_losses.back()) + " above first epoch " +
                        num_str(result.epoch_losses.front()));
  return result;
}

void save_trajectory_manifest(const std::string& path, const TrajectoryResult& traj,
                              const TeacherTrainConfig& cfg,
                              const std::string& config_hash) {
  nlohmann::json m;
  m["arch"] = cfg.arch;
  m["total_epochs"] = cfg.total_epochs;
  m["save_every"] = cfg.save_every;
  m["config_hash"] = config_hash;
  std::filesystem::path base = std::filesystem::path(path).parent_path();
  nlohmann::json cps = nlohmann::json::array();
  for (const auto& cp : traj.checkpoints) {
    nlohmann::json e;
    e["epoch"] = cp.epoch;
    e["path"] = std::filesystem::relative(cp.path, base).string();
    cps.push_back(e);
  }
  m["checkpoints"] = cps;
  m["epoch_losses"] = traj.epoch_losses;
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << m.dump(2) << "\n";
  if (!os) throw IoError("write failed for " + path);
}

namespace {
nlohmann::json parse_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}
}  // namespace

TrajectoryResult load_trajectory_manifest(const std::string& path) {
  nlohmann::json m = parse_manifest(path);
  std::filesystem::path base = std::filesystem::path(path).parent_path();
  TrajectoryResult out;
  for (const auto& e : m.at("checkpoints")) {
    out.checkpoints.push_back(
        {e.at("epoch").get<int64_t>(), (base / e.at("path").get<std::string>()).string()});
  }
  out.epoch_losses = m.at("epoch_losses").get<std::vector<double>>();
  return out;
}

std::string trajectory_manifest_hash(const std::string& path) {
  return parse_manifest(path).at("config_hash").get<std::string>();
}

std::vector<int64_t> pick_even_epochs(const std::vector<int64_t>& available,
                                      std::pair<int64_t, int64_t> window,
                                      int64_t count) {
  auto [lo, hi] = window;
  if (lo > hi) throw ValidationError("teacher window is empty: lo > hi");
  if (count < 1) throw ValidationError("teacher count must be >= 1");
  std::vector<int64_t> in;
  for (int64_t e : available)
    if (e >= lo && e <= hi) in.push_back(e);
  std::sort(in.begin(), in.end());
  in.erase(std::unique(in.begin(), in.end()), in.end());
  if (static_cast<int64_t>(in.size()) < count)
    throw ValidationError("window (" + std::to_string(lo) + "," + std::to_string(hi) +
                          ") holds " + std::to_string(in.size()) +
                          " checkpoints, need " + std::to_string(count) + " (short by " +
                          std::to_string(count - static_cast<int64_t>(in.size())) + ")");
  if (static_cast<int64_t>(in.size()) == count) return in;

  std::vector<bool> used(in.size(), false);
  std::vector<int64_t> picked;
  for (int64_t i = 0; i < count; ++i) {
    double target =
        count == 1 ? (static_cast<double>(lo) + static_cast<double>(hi)) / 2.0
                   : static_cast<double>(lo) + static_cast<double>(hi - lo) *
                                                   static_cast<double>(i) /
                                                   static_cast<double>(count - 1);
    std::size_t best = in.size();
    double best_dist = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      if (used[j]) continue;
      double dist = std::abs(static_cast<double>(in[j]) - target);
      // Ties resolve toward the lower epoch; `in` is ascending, so strict <.
      if (best == in.size() || dist < best_dist) {
        best = j;
        best_dist = dist;
      }
    }
    used[best] = true;
    picked.push_back(in[best]);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

TeacherEnsemble select_teachers(const std::vector<TeacherCheckpoint>& checkpoints,
                                std::pair<int64_t, int64_t> window, int64_t count) {
  std::vector<int64_t> avail;
  for (const auto& cp : checkpoints) avail.push_back(cp.epoch);
  std::vector<int64_t> epochs = pick_even_epochs(avail, window, count);

  TeacherEnsemble ens;
  ens.window = window;
  for (int64_t e : epochs) {
    auto it = std::find_if(checkpoints.begin(), checkpoints.end(),
                           [e](const TeacherCheckpoint& cp) { return cp.epoch == e; });
    LoadedTeacher t = load_teacher_checkpoint(it->path);
    if (t.epoch != e)
      throw ValidationError(it->path + " claims epoch " + std::to_string(t.epoch) +
                            ", manifest says " + std::to_string(e));
    if (!ens.models.empty()) {
      const ConvNetSpec& a = ens.models.front().spec();
      const ConvNetSpec& b = t.net.spec();
      if (a.arch_id != b.arch_id || a.out_dim != b.out_dim ||
          a.in_channels != b.in_channels || a.in_h != b.in_h || a.in_w != b.in_w)
        throw ValidationError("ensemble mixes incompatible checkpoints");
    }
    ens.epochs.push_back(e);
    ens.models.push_back(std::move(t.net));
  }
  return ens;
}

Tensorf ensemble_soft_labels(const TeacherEnsemble& ensemble, const Tensorf& images,
                             LabelSpace space, double temp) {
  if (ensemble.models.empty()) throw ValidationError("ensemble is empty");
  if (temp <= 0.0) throw ValidationError("ensemble temperature must be positive");
  int64_t n = images.dim(0);
  int64_t c = ensemble.models.front().spec().out_dim;
  // Double accumulator in fixed teacher order: the mean is bitwise stable no
  // matter how each forward parallelizes internally.
  Tensord acc = Tensord::zeros({n, c});
  Tensorf probs({n, c});
  for (const auto& model : ensemble.models) {
    Tensorf logits = model.forward(images, nullptr, nullptr);
    const Tensorf& term = space == LabelSpace::kProb
                              ? (kernels::par::softmax_rows<float>(
                                     logits.ptr(), probs.ptr(), n, c,
                                     static_cast<float>(temp)),
                                 probs)
                              : logits;
    for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += static_cast<double>(term[i]);
  }
  double inv = 1.0 / static_cast<double>(ensemble.models.size());
  Tensorf out({n, c});
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<float>(acc[i] * inv);
  return out;
}

}  // namespace hello
