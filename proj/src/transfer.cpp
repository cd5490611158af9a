#include "hello/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "hello/optim.hpp"
#include "hello/rng.hpp"

namespace hello {

void TransferConfig::validate() const {
  if (lambda_ce < 0.0) throw ConfigError("transfer lambda_ce must be >= 0");
  if (batch < 1) throw ConfigError("transfer batch must be >= 1");
  if (epochs < 0) throw ConfigError("transfer epochs must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("transfer lr must be positive");
  if (!(temp > 0.0)) throw ConfigError("transfer temp must be positive");
  if (holdout_frac < 0.0 || holdout_frac >= 1.0)
    throw ConfigError("transfer holdout_frac must be in [0,1)");
}

Tensorf ensemble_targets(const TeacherEnsemble& ensemble, const Tensorf& images,
                         LabelSpace space, double temp, int64_t chunk) {
  int64_t n = images.dim(0);
  Tensorf out;
  for (int64_t lo = 0; lo < n; lo += chunk) {
    int64_t hi = std::min(n, lo + chunk);
    std::vector<int64_t> idx;
    for (int64_t i = lo; i < hi; ++i) idx.push_back(i);
    Tensorf part = ensemble_soft_labels(ensemble, gather_images(images, idx), space, temp);
    if (lo == 0) out = Tensorf({n, part.dim(1)});
    std::copy_n(part.ptr(), part.numel(), out.ptr() + lo * part.dim(1));
  }
  return out;
}

double projector_accuracy(const Projector& proj, const Tensorf& images,
                          const std::vector<int32_t>& labels, int64_t chunk) {
  int64_t n = images.dim(0);
  if (n == 0 || static_cast<int64_t>(labels.size()) != n)
    throw ValidationError("accuracy needs a non-empty stack with matching labels");
  int64_t hits = 0;
  for (int64_t lo = 0; lo < n; lo += chunk) {
    int64_t hi = std::min(n, lo + chunk);
    std::vector<int64_t> idx;
    for (int64_t i = lo; i < hi; ++i) idx.push_back(i);
    Tensorf logits = proj.forward(gather_images(images, idx));
    for (int64_t r = 0; r < hi - lo; ++r)
      if (argmax_row(logits, r) == labels[static_cast<std::size_t>(lo + r)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

namespace {

void zero_adapter_grads(AdapterGradMap<float>& grads) {
  for (auto& [name, g] : grads) {
    std::fill(g.dA.ptr(), g.dA.ptr() + g.dA.numel(), 0.0f);
    std::fill(g.dB.ptr(), g.dB.ptr() + g.dB.numel(), 0.0f);
  }
}

double running_mean(const std::vector<TransferStep>& steps, bool from_front) {
  if (steps.empty()) return 0.0;
  std::size_t k = std::min<std::size_t>(20, steps.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    sum += (from_front ? steps[i] : steps[steps.size() - 1 - i]).total;
  return sum / static_cast<double>(k);
}

}  // namespace

TransferLog fit_projector(Projector& proj, const LabeledDataset& ds,
                          const TeacherEnsemble& ensemble, const TransferConfig& cfg) {
  cfg.validate();
  ds.validate();
  if (!proj.has_adapters())
    throw ValidationError("fit_projector needs attached adapters");
  if (proj.merged()) throw ValidationError("projector is already merged");
  if (proj.num_classes() != ds.num_classes())
    throw ValidationError("projector has " + std::to_string(proj.num_classes()) +
                          " classes, dataset has " + std::to_string(ds.num_classes()));

  TransferLog log;
  if (cfg.epochs == 0) return log;

  // Holdout split: a deterministic shuffle, first slice held out.
  int64_t n = ds.count();
  Rng root(cfg.seed);
  std::vector<int64_t> all(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  Rng hr = root.split_tag("holdout");
  hr.shuffle(all);
  int64_t held = cfg.holdout_frac > 0.0
                     ? std::max<int64_t>(1, static_cast<int64_t>(
                                                cfg.holdout_frac * static_cast<double>(n)))
                     : 0;
  if (held >= n) throw ValidationError("holdout slice would swallow the dataset");
  std::vector<int64_t> hold_idx(all.begin(), all.begin() + held);
  std::vector<int64_t> train_idx(all.begin() + held, all.end());
  std::sort(hold_idx.begin(), hold_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  Tensorf train_images = gather_images(ds.images, train_idx);
  std::vector<int32_t> train_labels = gather_values(ds.hard_labels, train_idx);
  Tensorf hold_images;
  std::vector<int32_t> hold_labels;
  if (held > 0) {
    hold_images = gather_images(ds.images, hold_idx);
    hold_labels = gather_values(ds.hard_labels, hold_idx);
  }

  // Transfer never augments, so the targets are computed once and cached.
  Tensorf targets = ensemble_targets(ensemble, train_images, cfg.space, cfg.temp);

  AdapterGradMap<float> grads = make_adapter_grads(proj.adapters());
  auto refs = adapter_param_refs(proj.adapters_mut(), grads);
  Adam<float> opt(cfg.lr);

  int64_t n_train = train_images.dim(0);
  int64_t batches = (n_train + cfg.batch - 1) / cfg.batch;
  int64_t total_steps = cfg.epochs * batches;
  Rng order_root = root.split_tag("order");

  std::vector<int64_t> order(static_cast<std::size_t>(n_train));
  int64_t step = 0;
  double best_acc = -1.0;
  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (int64_t i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng er = order_root.split(static_cast<uint64_t>(epoch));
    er.shuffle(order);

    for (int64_t b = 0; b < batches; ++b) {
      int64_t lo = b * cfg.batch;
      int64_t hi = std::min(n_train, lo + cfg.batch);
      std::vector<int64_t> idx(order.begin() + lo, order.begin() + hi);
      Tensorf x = gather_images(train_images, idx);
      std::vector<int32_t> y = gather_values(train_labels, idx);
      int64_t c = targets.dim(1);
      Tensorf y_soft({hi - lo, c});
      for (int64_t r = 0; r < hi - lo; ++r)
        std::copy_n(targets.ptr() + idx[static_cast<std::size_t>(r)] * c, c,
                    y_soft.ptr() + r * c);

      Projector::Ctx ctx;
      Tensorf logits = proj.forward(x, &ctx);
      Tensorf dlogits = Tensorf::zeros(logits.shape);
      LossParts parts;
      try {
        parts = transfer_loss(logits, y_soft, y, cfg.lambda_ce, cfg.space, cfg.temp,
                              &dlogits);
      } catch (const TrainingError& e) {
        throw TrainingError("transfer diverged at step " + std::to_string(step) +
                            ": " + e.what());
      }
      zero_adapter_grads(grads);
      proj.backward(ctx, dlogits, &grads, false);
      double scale = cfg.cosine ? cosine_scale(step, total_steps) : 1.0;
      opt.step(refs, scale);
      log.steps.push_back({step, parts.mse, parts.ce, parts.total, cfg.lr * scale});
      ++step;
    }
    log.epochs_run = epoch;

    if (held > 0) {
      double acc = projector_accuracy(proj, hold_images, hold_labels);
      log.holdout_acc.push_back(acc);
      if (acc < best_acc) {
        log.early_stopped = true;
        break;
      }
      best_acc = std::max(best_acc, acc);
    }
  }

  log.initial_running = running_mean(log.steps, true);
  log.final_running = running_mean(log.steps, false);
  return log;
}

void save_transfer_log(const std::string& path, const TransferLog& log) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  for (const auto& s : log.steps) {
    os << "{\"step\":" << s.step << ",\"mse\":" << num_str(s.mse)
       << ",\"ce\":" << num_str(s.ce) << ",\"total\":" << num_str(s.total)
       << ",\"lr\":" << num_str(s.lr) << "}\n";
  }
  os << "{\"epochs_run\":" << log.epochs_run
     << ",\"early_stopped\":" << (log.early_stopped ? "true" : "false")
     << ",\"initial_running\":" << num_str(log.initial_running)
     << ",\"final_running\":" << num_str(log.final_running) << ",\"holdout_acc\":[";
  for (std::size_t i = 0; i < log.holdout_acc.size(); ++i)
    os << (i ? "," : "") << num_str(log.holdout_acc[i]);
  os << "]}\n";
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace hello
