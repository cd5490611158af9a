// Pipeline orchestration: stage order, artifact paths, resume stamps, config
// mappers, and an end-to-end tiny run exercised twice to prove stamp skipping.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "hello/common.hpp"
#include "hello/config.hpp"
#include "hello/pipeline.hpp"
#include "nlohmann/json.hpp"

using namespace hello;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& leaf) {
  fs::path p = fs::temp_directory_path() / "hello_pipeline_tests" / leaf;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Small enough to run every stage in well under a second.
Config tiny_cfg(const std::string& out_dir) {
  Config cfg;
  cfg.set("seed", "3");
  cfg.set("out_dir", out_dir);
  cfg.set("data.classes", "4");
  cfg.set("data.per_class", "10");
  cfg.set("data.channels", "3");
  cfg.set("data.height", "8");
  cfg.set("data.width", "8");
  cfg.set("data.noise", "0.05");
  cfg.set("data.test_per_class", "4");
  cfg.set("encoder.source", "toy");
  cfg.set("encoder.arch", "micro");
  cfg.set("encoder.d_f", "4");
  cfg.set("text.vocab", "64");
  cfg.set("teacher.arch", "micro");
  cfg.set("teacher.epochs", "3");
  cfg.set("teacher.save_every", "1");
  cfg.set("teacher.batch", "8");
  cfg.set("teacher.lr", "0.05");
  cfg.set("teacher.window", "[1,3]");
  cfg.set("teacher.count", "2");
  cfg.set("transfer.lambda_ce", "0.1");
  cfg.set("transfer.batch", "8");
  cfg.set("transfer.epochs", "1");
  cfg.set("transfer.lr", "0.001");
  cfg.set("transfer.rank_enc", "1");
  cfg.set("transfer.rank_head", "2");
  cfg.set("transfer.holdout_frac", "0.25");
  cfg.set("synthesis.ipc", "1");
  cfg.set("synthesis.grid", "2");
  cfg.set("synthesis.crops_per_image", "6");
  cfg.set("synthesis.min_frac", "0.3");
  cfg.set("synthesis.max_frac", "1.0");
  cfg.set("image_update.enabled", "true");
  cfg.set("image_update.steps", "1");
  cfg.set("image_update.lr", "0.01");
  cfg.set("image_update.factor", "2");
  cfg.set("student.arch", "micro");
  cfg.set("student.epochs_K", "2");
  cfg.set("student.batch", "8");
  cfg.set("student.lr", "0.02");
  cfg.set("student.eval_every", "1");
  cfg.set("student.aug.p_mixup", "0");
  cfg.set("student.aug.p_cutmix", "0");
  cfg.set("student.aug.flips", "false");
  cfg.set("eval.storage_K", "150");
  return cfg;
}

}  // namespace

TEST_CASE("pipeline stage list is fixed and ordered") {
  const std::vector<std::string>& s = pipeline_stages();
  std::vector<std::string> want = {"init-data",      "harvest-teachers",
                                   "init-synthetic", "fit-projector",
                                   "update-images",  "train-student",
                                   "eval-student"};
  CHECK(s == want);
}

TEST_CASE("run_paths lays out the artifact tree under out_dir") {
  RunPaths p = run_paths("/tmp/run");
  CHECK(p.out_dir == "/tmp/run");
  CHECK(p.train_data == "/tmp/run/data/train.arc");
  CHECK(p.test_data == "/tmp/run/data/test.arc");
  CHECK(p.encoder == "/tmp/run/encoder/pair.arc");
  CHECK(p.teacher_dir == "/tmp/run");
  CHECK(p.teacher_manifest == "/tmp/run/teacher/manifest.json");
  CHECK(p.syn_archive == "/tmp/run/syn/images.arc");
  CHECK(p.syn_manifest == "/tmp/run/syn/prov.json");
  CHECK(p.syn_updated == "/tmp/run/syn/updated.arc");
  CHECK(p.update_trace == "/tmp/run/syn/update_trace.json");
  CHECK(p.projector == "/tmp/run/proj/artifact.arc");
  CHECK(p.transfer_log == "/tmp/run/proj/transfer_log.jsonl");
  CHECK(p.student == "/tmp/run/student/student.arc");
  CHECK(p.student_metrics == "/tmp/run/student/metrics.jsonl");
  CHECK(p.eval_report == "/tmp/run/eval/report.json");
  CHECK(p.done("init-data") == "/tmp/run/init-data.done");
  CHECK_THROWS_AS(run_paths(""), ConfigError);
}

TEST_CASE("stage stamps round-trip through disk") {
  fs::path dir = temp_dir("stamp");
  std::string path = (dir / "x.done").string();
  StageStamp s{"init-data", "deadbeefdeadbeef", {"a.arc", "b.json"}, 1.5};
  write_stage_stamp(path, s);
  StageStamp r = read_stage_stamp(path);
  CHECK(r.stage == s.stage);
  CHECK(r.config_hash == s.config_hash);
  CHECK(r.artifacts == s.artifacts);
  CHECK(r.seconds == doctest::Approx(1.5));

  std::ofstream(path) << "not json";
  CHECK_THROWS_AS(read_stage_stamp(path), FormatError);
  CHECK_THROWS_AS(read_stage_stamp((dir / "missing.done").string()), IoError);
}

TEST_CASE("plan_stage implements the resume protocol") {
  fs::path dir = temp_dir("plan");
  std::string done = (dir / "s.done").string();

  CHECK(plan_stage(done, "aaaa", false) == StageAction::kRun);

  write_stage_stamp(done, {"fit-projector", "aaaa", {}, 0.1});
  CHECK(plan_stage(done, "aaaa", false) == StageAction::kSkip);
  CHECK(plan_stage(done, "aaaa", true) == StageAction::kSkip);

  // A stale stamp is an error that names both hashes, unless forced.
  try {
    plan_stage(done, "bbbb", false);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("aaaa") != std::string::npos);
    CHECK(msg.find("bbbb") != std::string::npos);
    CHECK(msg.find("--force") != std::string::npos);
  }
  CHECK(plan_stage(done, "bbbb", true) == StageAction::kRun);
}

TEST_CASE("config mappers read dotted keys and fall back to defaults") {
  Config cfg = tiny_cfg("/tmp/unused");

  ToySpec d = data_spec(cfg);
  CHECK(d.classes == 4);
  CHECK(d.per_class == 10);
  CHECK(d.channels == 3);
  CHECK(d.height == 8);
  CHECK(d.width == 8);
  CHECK(d.noise == doctest::Approx(0.05));
  CHECK(test_per_class(cfg) == 4);

  TeacherTrainConfig t = teacher_config(cfg, "/tmp/run");
  CHECK(t.arch == "micro");
  CHECK(t.total_epochs == 3);
  CHECK(t.save_every == 1);
  CHECK(t.batch == 8);
  CHECK(t.lr == doctest::Approx(0.05));
  CHECK(t.seed == 3);
  CHECK(t.out_dir == "/tmp/run");

  TransferConfig tr = transfer_config(cfg);
  CHECK(tr.lambda_ce == doctest::Approx(0.1));
  CHECK(tr.batch == 8);
  CHECK(tr.epochs == 1);
  CHECK(tr.lr == doctest::Approx(0.001));
  CHECK(tr.holdout_frac == doctest::Approx(0.25));
  CHECK(tr.seed == 3);

  SynthesisConfig sy = synthesis_config(cfg);
  CHECK(sy.ipc == 1);
  CHECK(sy.grid == 2);
  CHECK(sy.crops_per_image == 6);
  CHECK(sy.min_frac == doctest::Approx(0.3));
  CHECK(sy.max_frac == doctest::Approx(1.0));

  ImageUpdateConfig iu = image_update_config(cfg);
  CHECK(iu.steps == 1);
  CHECK(iu.lr == doctest::Approx(0.01));
  CHECK(iu.factor == 2);

  StudentConfig st = student_config(cfg);
  CHECK(st.arch == "micro");
  CHECK(st.epochs_K == 2);
  CHECK(st.batch == 8);
  CHECK(st.lr == doctest::Approx(0.02));
  CHECK(st.eval_every == 1);
  CHECK(st.seed == 3);
  CHECK(st.policy.p_mixup == doctest::Approx(0.0));
  CHECK(st.policy.p_cutmix == doctest::Approx(0.0));
  CHECK(st.policy.flips == false);

  // Unset keys keep module defaults.
  Config bare;
  bare.set("out_dir", "/tmp/x");
  ToySpec dd = data_spec(bare);
  ToySpec def;
  CHECK(dd.classes == def.classes);
  CHECK(dd.per_class == def.per_class);
  CHECK(test_per_class(bare) == 100);
  TransferConfig trd = transfer_config(bare);
  CHECK(trd.lambda_ce == doctest::Approx(0.1));
  CHECK(trd.epochs == 3);
  CHECK(trd.holdout_frac == doctest::Approx(0.05));

  Config bad = tiny_cfg("/tmp/unused");
  bad.set("data.test_per_class", "0");
  CHECK_THROWS_AS(test_per_class(bad), ConfigError);
  bad.set("teacher.epochs", "0");
  CHECK_THROWS_AS(teacher_config(bad, "/tmp/run"), ConfigError);
}

TEST_CASE("run_all executes every stage, stamps, and then skips on rerun") {
  fs::path dir = temp_dir("full_run");
  Config cfg = tiny_cfg(dir.string());

  Pipeline p(cfg);
  CHECK(p.config_hash() == hex64(cfg.hash()));
  std::vector<StageResult> first = p.run_all();
  REQUIRE(first.size() == 7);
  const std::vector<std::string>& stages = pipeline_stages();
  for (size_t i = 0; i < first.size(); ++i) {
    CAPTURE(first[i].stage);
    CHECK(first[i].stage == stages[i]);
    CHECK(first[i].skipped == false);
  }

  const RunPaths& paths = p.paths();
  for (const std::string& f :
       {paths.train_data, paths.test_data, paths.encoder, paths.teacher_manifest,
        paths.syn_archive, paths.syn_manifest, paths.syn_updated,
        paths.update_trace, paths.projector, paths.transfer_log, paths.student,
        paths.student_metrics, paths.eval_report})
    CHECK(fs::exists(f));
  for (const std::string& s : stages) {
    StageStamp stamp = read_stage_stamp(paths.done(s));
    CHECK(stamp.stage == s);
    CHECK(stamp.config_hash == p.config_hash());
    CHECK(!stamp.artifacts.empty());
  }

  // Fresh process, same config: everything resumes as a skip.
  Pipeline p2(cfg);
  std::vector<StageResult> second = p2.run_all();
  REQUIRE(second.size() == 7);
  for (const StageResult& r : second) CHECK(r.skipped == true);

  // Changed config against existing stamps refuses, force reruns.
  Config changed = tiny_cfg(dir.string());
  changed.set("seed", "4");
  Pipeline p3(changed);
  CHECK_THROWS_AS(p3.run_all(), ConfigError);
  Pipeline p4(changed, /*force=*/true);
  std::vector<StageResult> forced = p4.run_all();
  REQUIRE(forced.size() == 7);
  for (const StageResult& r : forced) CHECK(r.skipped == false);
  CHECK(read_stage_stamp(paths.done("init-data")).config_hash ==
        hex64(changed.hash()));
}

TEST_CASE("loaders rebuild artifacts and the eval report embeds the hash") {
  fs::path dir = temp_dir("loaders");
  Config cfg = tiny_cfg(dir.string());
  Pipeline p(cfg);
  p.run_all();

  Pipeline q(cfg);
  Projector zs = q.zero_shot_projector();
  CHECK(!zs.has_adapters());
  Projector fitted = q.fitted_projector();
  CHECK(fitted.has_adapters());
  CHECK(fitted.num_classes() == 4);

  // image_update.enabled routes the student loader at the updated archive.
  SyntheticDataset sd = q.student_train_set();
  CHECK(sd.data.count() == 4);  // classes * ipc
  CHECK(sd.ipc == 1);
  CHECK(sd.config_hash == q.config_hash());
  SyntheticDataset raw = q.raw_synthetic();
  CHECK(raw.data.count() == 4);
  bool differ = false;
  for (int64_t i = 0; i < raw.data.images.numel(); ++i)
    if (raw.data.images.data()[i] != sd.data.images.data()[i]) differ = true;
  CHECK(differ);  // one pixel step must have moved something

  TeacherEnsemble ens = q.teacher_ensemble();
  CHECK(ens.members.size() == 2);

  nlohmann::json rep = nlohmann::json::parse(slurp(q.paths().eval_report));
  CHECK(rep.at("config_hash").get<std::string>() == hex64(cfg.hash()));
  double acc = rep.at("test_acc").get<double>();
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(rep.at("storage").at("K").get<int64_t>() == 150);
  // 150 teacher snapshots * 4 images * 4 classes * 4 bytes.
  CHECK(rep.at("storage").at("soft_label_bytes").get<int64_t>() == 9600);
  CHECK(rep.at("storage").at("ipc").get<int64_t>() == 1);
}

TEST_CASE("pipeline construction validates out_dir") {
  Config cfg;
  CHECK_THROWS_AS(Pipeline{cfg}, ConfigError);
  cfg.set("out_dir", "");
  CHECK_THROWS_AS(Pipeline{cfg}, ConfigError);
}
