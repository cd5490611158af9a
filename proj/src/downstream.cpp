#include "hello/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "hello/evalsuite.hpp"

namespace hello {

void AugmentationPolicy::validate() const {
  if (p_mixup < 0.0 || p_cutmix < 0.0 || p_mixup + p_cutmix > 1.0 + 1e-12)
    throw ConfigError("augmentation probabilities must be >= 0 and sum to <= 1");
  if (p_mixup > 0.0 && !(mixup_alpha > 0.0))
    throw ConfigError("mixup alpha must be positive");
  if (p_cutmix > 0.0 && !(cutmix_alpha > 0.0))
    throw ConfigError("cutmix alpha must be positive");
}

void StudentConfig::validate() const {
  if (epochs_K < 1) throw ConfigError("student epochs_K must be >= 1");
  if (batch < 1) throw ConfigError("student batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("student lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ConfigError("student momentum must be in [0,1)");
  if (beta_ce < 0.0) throw ConfigError("student beta_ce must be >= 0");
  if (!(temp > 0.0)) throw ConfigError("student temp must be positive");
  if (label_mode != "projector" && label_mode != "hard")
    throw ConfigError("student label_mode must be 'projector' or 'hard', got " +
                      label_mode);
  if (eval_every < 0) throw ConfigError("student eval_every must be >= 0");
  policy.validate();
}

void blend_images(Tensorf& images, const std::vector<int64_t>& perm, double lam) {
  int64_t n = images.dim(0);
  if (static_cast<int64_t>(perm.size()) != n)
    throw ValidationError("permutation length does not match batch");
  int64_t img = images.dim(1) * images.dim(2) * images.dim(3);
  Tensorf src = images;
  float l = static_cast<float>(lam), r = static_cast<float>(1.0 - lam);
  for (int64_t i = 0; i < n; ++i) {
    const float* partner = src.ptr() + perm[static_cast<std::size_t>(i)] * img;
    float* dst = images.ptr() + i * img;
    const float* own = src.ptr() + i * img;
    for (int64_t j = 0; j < img; ++j) dst[j] = l * own[j] + r * partner[j];
  }
}

void paste_box(Tensorf& images, const std::vector<int64_t>& perm, int64_t x0,
               int64_t y0, int64_t x1, int64_t y1) {
  int64_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (static_cast<int64_t>(perm.size()) != n)
    throw ValidationError("permutation length does not match batch");
  if (x0 < 0 || y0 < 0 || x1 > w || y1 > h || x0 > x1 || y0 > y1)
    throw ValidationError("paste box out of bounds");
  Tensorf src = images;
  for (int64_t i = 0; i < n; ++i) {
    int64_t p = perm[static_cast<std::size_t>(i)];
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t r = y0; r < y1; ++r)
        for (int64_t cc = x0; cc < x1; ++cc)
          images.at4(i, ch, r, cc) = src.at4(p, ch, r, cc);
  }
}

namespace {

std::vector<int64_t> draw_perm(int64_t n, Rng& rng) {
  std::vector<int64_t> perm(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(perm);
  return perm;
}

}  // namespace

MixInfo mixup(Tensorf& images, double alpha, Rng& rng) {
  if (images.dim(0) < 2) throw ValidationError("mixup needs a batch of at least 2");
  if (!(alpha > 0.0)) throw ValidationError("mixup alpha must be positive");
  MixInfo info;
  info.lam = rng.beta(alpha, alpha);
  info.perm = draw_perm(images.dim(0), rng);
  blend_images(images, info.perm, info.lam);
  return info;
}

MixInfo cutmix(Tensorf& images, double alpha, Rng& rng) {
  int64_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
  if (n < 2) throw ValidationError("cutmix needs a batch of at least 2");
  if (!(alpha > 0.0)) throw ValidationError("cutmix alpha must be positive");
  MixInfo info;
  double lam = rng.beta(alpha, alpha);
  double ratio = std::sqrt(1.0 - lam);
  int64_t bw = static_cast<int64_t>(std::floor(static_cast<double>(w) * ratio));
  int64_t bh = static_cast<int64_t>(std::floor(static_cast<double>(h) * ratio));
  int64_t cx = rng.uniform_int(w);
  int64_t cy = rng.uniform_int(h);
  int64_t x0 = std::clamp<int64_t>(cx - bw / 2, 0, w);
  int64_t x1 = std::clamp<int64_t>(x0 + bw, 0, w);
  int64_t y0 = std::clamp<int64_t>(cy - bh / 2, 0, h);
  int64_t y1 = std::clamp<int64_t>(y0 + bh, 0, h);
  info.perm = draw_perm(n, rng);
  paste_box(images, info.perm, x0, y0, x1, y1);
  // lam tracks the realized box area, not the drawn value.
  double area = static_cast<double>((x1 - x0) * (y1 - y0));
  info.lam = 1.0 - area / static_cast<double>(h * w);
  return info;
}

AugBatch apply_policy(const Tensorf& images, const std::vector<int32_t>& labels,
                      const AugmentationPolicy& policy, Rng& rng) {
  policy.validate();
  if (images.dim(0) != static_cast<int64_t>(labels.size()))
    throw ValidationError("labels do not match batch size");
  AugBatch out;
  out.images = images;
  out.ya = labels;

  if (policy.flips) {
    int64_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    for (int64_t i = 0; i < n; ++i) {
      if (rng.uniform() < 0.5) continue;
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t r = 0; r < h; ++r)
          for (int64_t cc = 0; cc < w / 2; ++cc)
            std::swap(out.images.at4(i, ch, r, cc), out.images.at4(i, ch, r, w - 1 - cc));
    }
  }

  double u = rng.uniform();
  MixInfo info;
  if (images.dim(0) >= 2 && u < policy.p_mixup) {
    out.mode = "mixup";
    info = mixup(out.images, policy.mixup_alpha, rng);
  } else if (images.dim(0) >= 2 && u < policy.p_mixup + policy.p_cutmix) {
    out.mode = "cutmix";
    info = cutmix(out.images, policy.cutmix_alpha, rng);
  } else {
    out.mode = "none";
    info.perm.resize(static_cast<std::size_t>(images.dim(0)));
    for (int64_t i = 0; i < images.dim(0); ++i)
      info.perm[static_cast<std::size_t>(i)] = i;
    info.lam = 1.0;
  }
  out.yb = gather_values(labels, info.perm);
  out.lam.assign(labels.size(), info.lam);
  return out;
}

Tensorf online_labels(const Projector& proj, const Tensorf& images, LabelSpace space,
                      double temp) {
  if (temp <= 0.0) throw ValidationError("label temperature must be positive");
  Tensorf logits = proj.forward(images);
  if (space == LabelSpace::kLogit) return logits;
  Tensorf out(logits.shape);
  kernels::par::softmax_rows<float>(logits.ptr(), out.ptr(), logits.dim(0),
                                    logits.dim(1), static_cast<float>(temp));
  return out;
}

LossParts student_step(ConvNet<float>& student, const AugBatch& batch,
                       const Tensorf& y_star, double beta, LabelSpace space,
                       double temp, SgdMomentum<float>& opt, double lr_scale) {
  typename ConvNet<float>::Ctx ctx;
  Tensorf logits = student.forward(batch.images, &ctx, nullptr);
  Tensorf dlogits = Tensorf::zeros(logits.shape);
  LossParts parts = combined_loss(logits, y_star, batch.ya, batch.yb, batch.lam,
                                  beta, space, temp, &dlogits);
  student.zero_grads();
  student.backward(ctx, dlogits, nullptr, nullptr, true, false);
  auto refs = net_param_refs(student);
  opt.step(refs, lr_scale);
  return parts;
}

namespace {

// One-hot targets in the configured space. In logit space a one-hot vector is
// still the regression target the hard-label arm trains toward.
Tensorf one_hot_targets(const std::vector<int32_t>& ya, const std::vector<int32_t>& yb,
                        const std::vector<double>& lam, int64_t classes) {
  int64_t n = static_cast<int64_t>(ya.size());
  Tensorf out = Tensorf::zeros({n, classes});
  for (int64_t i = 0; i < n; ++i) {
    double l = lam[static_cast<std::size_t>(i)];
    out.at2(i, ya[static_cast<std::size_t>(i)]) += static_cast<float>(l);
    out.at2(i, yb[static_cast<std::size_t>(i)]) += static_cast<float>(1.0 - l);
  }
  return out;
}

}  // namespace

StudentResult train_student(const LabeledDataset& synthetic, const Projector& proj,
                            const StudentConfig& cfg, const LabeledDataset& test) {
  cfg.validate();
  synthetic.validate();
  test.validate();
  if (synthetic.num_classes() != proj.num_classes())
    throw ValidationError("synthetic classes do not match the projector");

  ConvNetSpec spec =
      make_convnet_spec(cfg.arch, "s/", synthetic.channels(), synthetic.height(),
                        synthetic.width(), synthetic.num_classes());
  StudentResult res{ConvNet<float>(std::move(spec)), {}, 0.0};
  Rng root(cfg.seed);
  Rng init = root.split_tag("student_init");
  res.model.init_weights(init);

  int64_t n = synthetic.count();
  int64_t batches = (n + cfg.batch - 1) / cfg.batch;
  int64_t total_steps = cfg.epochs_K * batches;
  SgdMomentum<float> opt(cfg.lr, cfg.momentum);

  Rng epoch_root = root.split_tag("student_epoch");
  std::vector<int64_t> order(static_cast<std::size_t>(n));
  int64_t step = 0;
  for (int64_t epoch = 1; epoch <= cfg.epochs_K; ++epoch) {
    Rng er = epoch_root.split(static_cast<uint64_t>(epoch));
    for (int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    er.shuffle(order);

    double loss_sum = 0.0;
    double lr_eff = 0.0;
    for (int64_t b = 0; b < batches; ++b) {
      int64_t lo = b * cfg.batch;
      int64_t hi = std::min(n, lo + cfg.batch);
      std::vector<int64_t> idx(order.begin() + lo, order.begin() + hi);
      Tensorf x = gather_images(synthetic.images, idx);
      std::vector<int32_t> y = gather_values(synthetic.hard_labels, idx);

      AugBatch batch = apply_policy(x, y, cfg.policy, er);
      if (!cfg.mixed_targets) {
        batch.yb = batch.ya;
        batch.lam.assign(batch.lam.size(), 1.0);
      }
      // Fresh labels for exactly these pixels; nothing is cached or saved.
      Tensorf y_star = cfg.label_mode == "projector"
                           ? online_labels(proj, batch.images, cfg.space, cfg.temp)
                           : one_hot_targets(batch.ya, batch.yb, batch.lam,
                                             synthetic.num_classes());
      double scale = cfg.cosine ? cosine_scale(step, total_steps) : 1.0;
      LossParts parts;
      try {
        parts = student_step(res.model, batch, y_star, cfg.beta_ce, cfg.space,
                             cfg.temp, opt, scale);
      } catch (const TrainingError& e) {
        throw TrainingError("student epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(b) + ": " + e.what());
      }
      loss_sum += parts.total * static_cast<double>(hi - lo);
      lr_eff = cfg.lr * scale;
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(n);
    rec.lr = lr_eff;
    bool eval_now = epoch == cfg.epochs_K ||
                    (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
    if (eval_now) rec.test_acc = evaluate(res.model, test);
    res.epochs.push_back(rec);
  }
  res.final_test_acc = res.epochs.back().test_acc;
  return res;
}

void save_student_metrics(const std::string& path, const StudentResult& res) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  for (const auto& e : res.epochs) {
    os << "{\"epoch\":" << e.epoch << ",\"loss\":" << num_str(e.loss)
       << ",\"lr\":" << num_str(e.lr);
    if (e.test_acc >= 0.0) os << ",\"test_acc\":" << num_str(e.test_acc);
    os << "}\n";
  }
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace hello
