#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "hello/dataset.hpp"
#include "hello/kernels.hpp"
#include "hello/rng.hpp"
#include "hello/teachers.hpp"

using namespace hello;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& leaf) {
  fs::path p = fs::temp_directory_path() / "hello_test_teachers" / leaf;
  fs::create_directories(p);
  return p;
}

LabeledDataset tiny_dataset(uint64_t seed, int64_t per_class = 20) {
  ToySpec spec;
  spec.classes = 2;
  spec.per_class = per_class;
  spec.height = 8;
  spec.width = 8;
  Rng rng(seed);
  return make_toy_dataset(spec, "train", rng);
}

TeacherTrainConfig tiny_config(const std::string& out_dir) {
  TeacherTrainConfig cfg;
  cfg.arch = "micro";
  cfg.total_epochs = 4;
  cfg.save_every = 1;
  cfg.batch = 8;
  cfg.lr = 0.05;
  cfg.out_dir = out_dir;
  return cfg;
}

std::vector<int64_t> iota_epochs(int64_t lo, int64_t hi) {
  std::vector<int64_t> v;
  for (int64_t e = lo; e <= hi; ++e) v.push_back(e);
  return v;
}

}  // namespace

TEST_CASE("pick_even_epochs lands on the even grid when it exists") {
  // 41 epochs, window [1,41], 9 picks: targets are exactly 1+5k.
  std::vector<int64_t> got = pick_even_epochs(iota_epochs(1, 41), {1, 41}, 9);
  CHECK(got == std::vector<int64_t>{1, 6, 11, 16, 21, 26, 31, 36, 41});
}

TEST_CASE("pick_even_epochs takes the whole window when exact") {
  CHECK(pick_even_epochs(iota_epochs(1, 24), {1, 9}, 9) == iota_epochs(1, 9));
  CHECK(pick_even_epochs(iota_epochs(1, 24), {16, 24}, 9) == iota_epochs(16, 24));
}

TEST_CASE("pick_even_epochs deficit names the shortfall") {
  CHECK_THROWS_WITH_AS(pick_even_epochs({1, 2, 3}, {1, 3}, 4),
                       doctest::Contains("short by 1"), ValidationError);
}

TEST_CASE("pick_even_epochs breaks distance ties toward the lower epoch") {
  // Midpoint target 3 sits exactly between the two available epochs.
  CHECK(pick_even_epochs({2, 4}, {2, 4}, 1) == std::vector<int64_t>{2});
}

TEST_CASE("pick_even_epochs count 1 aims at the window midpoint") {
  CHECK(pick_even_epochs(iota_epochs(1, 9), {1, 9}, 1) == std::vector<int64_t>{5});
}

TEST_CASE("pick_even_epochs ignores the order of the available list") {
  std::vector<int64_t> avail = iota_epochs(1, 20);
  std::vector<int64_t> base = pick_even_epochs(avail, {2, 18}, 5);
  Rng rng(9);
  for (int rep = 0; rep < 5; ++rep) {
    rng.shuffle(avail);
    CHECK(pick_even_epochs(avail, {2, 18}, 5) == base);
  }
}

TEST_CASE("pick_even_epochs nearest-available resolution") {
  // Targets 1, 5.5, 10; available misses the middle; 5.5 resolves to 5
  // (distance 0.5 beats 6's... both 0.5 -> lower wins).
  std::vector<int64_t> got = pick_even_epochs({1, 5, 6, 10}, {1, 10}, 3);
  CHECK(got == std::vector<int64_t>{1, 5, 10});
}

TEST_CASE("train_trajectory saves on the cadence and reduces the loss") {
  fs::path dir = temp_dir("traj");
  LabeledDataset ds = tiny_dataset(1);
  TeacherTrainConfig cfg = tiny_config(dir.string());
  cfg.save_every = 2;
  TrajectoryResult res = train_trajectory(ds, cfg);

  REQUIRE(res.checkpoints.size() == 2);
  CHECK(res.checkpoints[0].epoch == 2);
  CHECK(res.checkpoints[1].epoch == 4);
  for (const auto& cp : res.checkpoints) CHECK(fs::exists(cp.path));
  REQUIRE(res.epoch_losses.size() == 4);
  CHECK(res.epoch_losses.back() <= res.epoch_losses.front());
}

TEST_CASE("train_trajectory is deterministic checkpoint for checkpoint") {
  LabeledDataset ds = tiny_dataset(2);
  fs::path d1 = temp_dir("det1"), d2 = temp_dir("det2");
  TrajectoryResult r1 = train_trajectory(ds, tiny_config(d1.string()));
  TrajectoryResult r2 = train_trajectory(ds, tiny_config(d2.string()));
  REQUIRE(r1.epoch_losses.size() == r2.epoch_losses.size());
  for (std::size_t i = 0; i < r1.epoch_losses.size(); ++i)
    CHECK(r1.epoch_losses[i] == r2.epoch_losses[i]);
  for (std::size_t i = 0; i < r1.checkpoints.size(); ++i) {
    LoadedTeacher a = load_teacher_checkpoint(r1.checkpoints[i].path);
    LoadedTeacher b = load_teacher_checkpoint(r2.checkpoints[i].path);
    const auto& pa = a.net.params();
    const auto& pb = b.net.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t p = 0; p < pa.size(); ++p)
      for (int64_t j = 0; j < pa[p].value.numel(); ++j)
        CHECK(pa[p].value[j] == pb[p].value[j]);
  }
}

TEST_CASE("checkpoint save/load round-trips weights and epoch") {
  fs::path dir = temp_dir("roundtrip");
  LabeledDataset ds = tiny_dataset(3);
  TrajectoryResult res = train_trajectory(ds, tiny_config(dir.string()));
  LoadedTeacher t = load_teacher_checkpoint(res.checkpoints.back().path);
  CHECK(t.epoch == 4);
  CHECK(t.net.spec().arch_id == "micro");
  Tensorf out = t.net.forward(ds.images, nullptr, nullptr);
  CHECK(out.dim(1) == ds.num_classes());
}

TEST_CASE("trajectory manifest round-trips checkpoints and hash") {
  fs::path dir = temp_dir("manifest");
  LabeledDataset ds = tiny_dataset(4);
  TeacherTrainConfig cfg = tiny_config(dir.string());
  TrajectoryResult res = train_trajectory(ds, cfg);
  std::string mpath = (dir / "teacher" / "manifest.json").string();
  save_trajectory_manifest(mpath, res, cfg, "deadbeef00000000");
  TrajectoryResult back = load_trajectory_manifest(mpath);
  REQUIRE(back.checkpoints.size() == res.checkpoints.size());
  for (std::size_t i = 0; i < back.checkpoints.size(); ++i) {
    CHECK(back.checkpoints[i].epoch == res.checkpoints[i].epoch);
    CHECK(fs::equivalent(back.checkpoints[i].path, res.checkpoints[i].path));
  }
  CHECK(trajectory_manifest_hash(mpath) == "deadbeef00000000");
  CHECK(back.epoch_losses == res.epoch_losses);
}

namespace {

struct EnsembleSetup {
  LabeledDataset ds;
  TeacherEnsemble ens;
};

EnsembleSetup make_ensemble(int64_t count) {
  EnsembleSetup s{tiny_dataset(5), {}};
  fs::path dir = temp_dir("ens" + std::to_string(count));
  TeacherTrainConfig cfg = tiny_config(dir.string());
  TrajectoryResult res = train_trajectory(s.ds, cfg);
  s.ens = select_teachers(res.checkpoints, {1, 4}, count);
  return s;
}

}  // namespace

TEST_CASE("single-teacher ensemble reproduces that teacher") {
  EnsembleSetup s = make_ensemble(1);
  REQUIRE(s.ens.models.size() == 1);
  Tensorf mean = ensemble_soft_labels(s.ens, s.ds.images, LabelSpace::kLogit);
  Tensorf direct = s.ens.models[0].forward(s.ds.images, nullptr, nullptr);
  for (int64_t i = 0; i < mean.numel(); ++i)
    CHECK(std::abs(mean[i] - direct[i]) < 1e-6f);
}

TEST_CASE("ensemble mean matches the loop-and-average oracle") {
  EnsembleSetup s = make_ensemble(3);
  REQUIRE(s.ens.models.size() == 3);
  int64_t n = s.ds.count(), c = s.ds.num_classes();

  for (LabelSpace space : {LabelSpace::kLogit, LabelSpace::kProb}) {
    Tensorf mean = ensemble_soft_labels(s.ens, s.ds.images, space);
    Tensord acc = Tensord::zeros({n, c});
    for (const auto& model : s.ens.models) {
      Tensorf logits = model.forward(s.ds.images, nullptr, nullptr);
      Tensorf term = logits;
      if (space == LabelSpace::kProb)
        kernels::par::softmax_rows<float>(logits.ptr(), term.ptr(), n, c, 1.0f);
      for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += term[i];
    }
    for (int64_t i = 0; i < mean.numel(); ++i)
      CHECK(std::abs(static_cast<double>(mean[i]) - acc[i] / 3.0) < 1e-6);
  }
}

TEST_CASE("ensemble probability rows sum to one") {
  EnsembleSetup s = make_ensemble(2);
  Tensorf mean = ensemble_soft_labels(s.ens, s.ds.images, LabelSpace::kProb);
  int64_t n = mean.dim(0), c = mean.dim(1);
  for (int64_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      sum += mean.at2(i, j);
      CHECK(mean.at2(i, j) >= 0.0f);
    }
    CHECK(std::abs(sum - 1.0) < 1e-5);
  }
}

TEST_CASE("ensemble mean is bounded by per-teacher extremes") {
  EnsembleSetup s = make_ensemble(4);
  Tensorf mean = ensemble_soft_labels(s.ens, s.ds.images, LabelSpace::kLogit);
  std::vector<Tensorf> outs;
  for (const auto& model : s.ens.models)
    outs.push_back(model.forward(s.ds.images, nullptr, nullptr));
  for (int64_t i = 0; i < mean.numel(); ++i) {
    float lo = outs[0][i], hi = outs[0][i];
    for (const auto& o : outs) {
      lo = std::min(lo, o[i]);
      hi = std::max(hi, o[i]);
    }
    CHECK(mean[i] >= lo - 1e-6f);
    CHECK(mean[i] <= hi + 1e-6f);
  }
}

TEST_CASE("ensemble rejects empty input and bad temperature") {
  EnsembleSetup s = make_ensemble(1);
  TeacherEnsemble empty;
  CHECK_THROWS_AS(ensemble_soft_labels(empty, s.ds.images, LabelSpace::kProb),
                  ValidationError);
  CHECK_THROWS_AS(ensemble_soft_labels(s.ens, s.ds.images, LabelSpace::kProb, 0.0),
                  ValidationError);
}

TEST_CASE("teacher config validation") {
  TeacherTrainConfig cfg = tiny_config("");
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.out_dir = "x";
  cfg.total_epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.total_epochs = 4;
  cfg.lr = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
