#include "hello/pipeline.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>

#include "hello/common.hpp"
#include "hello/evalsuite.hpp"
#include "hello/npyio.hpp"

namespace hello {

namespace fs = std::filesystem;

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> kStages = {
      "init-data",     "harvest-teachers", "init-synthetic", "fit-projector",
      "update-images", "train-student",    "eval-student"};
  return kStages;
}

std::string RunPaths::done(const std::string& stage) const {
  return out_dir + "/" + stage + ".done";
}

RunPaths run_paths(const std::string& out_dir) {
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  RunPaths p;
  p.out_dir = out_dir;
  p.train_data = out_dir + "/data/train.arc";
  p.test_data = out_dir + "/data/test.arc";
  p.encoder = out_dir + "/encoder/pair.arc";
  p.teacher_dir = out_dir;  // checkpoints use the module's own teacher/ prefix
  p.teacher_manifest = out_dir + "/teacher/manifest.json";
  p.syn_archive = out_dir + "/syn/images.arc";
  p.syn_manifest = out_dir + "/syn/prov.json";
  p.syn_updated = out_dir + "/syn/updated.arc";
  p.update_trace = out_dir + "/syn/update_trace.json";
  p.projector = out_dir + "/proj/artifact.arc";
  p.transfer_log = out_dir + "/proj/transfer_log.jsonl";
  p.student = out_dir + "/student/student.arc";
  p.student_metrics = out_dir + "/student/metrics.jsonl";
  p.eval_report = out_dir + "/eval/report.json";
  return p;
}

ToySpec data_spec(const Config& cfg) {
  ToySpec s;
  s.classes = cfg.get_int("data.classes", s.classes);
  s.per_class = cfg.get_int("data.per_class", s.per_class);
  s.channels = cfg.get_int("data.channels", s.channels);
  s.height = cfg.get_int("data.height", s.height);
  s.width = cfg.get_int("data.width", s.width);
  s.noise = cfg.get_num("data.noise", s.noise);
  return s;
}

int64_t test_per_class(const Config& cfg) {
  int64_t n = cfg.get_int("data.test_per_class", 100);
  if (n < 1) throw ConfigError("data.test_per_class must be >= 1");
  return n;
}

TeacherTrainConfig teacher_config(const Config& cfg, const std::string& out_dir) {
  TeacherTrainConfig t;
  t.arch = cfg.get_str("teacher.arch", t.arch);
  t.total_epochs = cfg.get_int("teacher.epochs", t.total_epochs);
  t.save_every = cfg.get_int("teacher.save_every", t.save_every);
  t.batch = cfg.get_int("teacher.batch", t.batch);
  t.lr = cfg.get_num("teacher.lr", t.lr);
  t.momentum = cfg.get_num("teacher.momentum", t.momentum);
  t.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  t.out_dir = out_dir;
  t.validate();
  return t;
}

TransferConfig transfer_config(const Config& cfg) {
  TransferConfig t;
  t.lambda_ce = cfg.get_num("transfer.lambda_ce", t.lambda_ce);
  t.batch = cfg.get_int("transfer.batch", t.batch);
  t.epochs = cfg.get_int("transfer.epochs", t.epochs);
  t.lr = cfg.get_num("transfer.lr", t.lr);
  t.cosine = cfg.get_bool("transfer.cosine", t.cosine);
  t.space = parse_space(cfg.get_str("transfer.space", space_name(t.space)));
  t.temp = cfg.get_num("transfer.temp", t.temp);
  t.holdout_frac = cfg.get_num("transfer.holdout_frac", t.holdout_frac);
  t.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  t.validate();
  return t;
}

SynthesisConfig synthesis_config(const Config& cfg) {
  SynthesisConfig s;
  s.ipc = cfg.get_int("synthesis.ipc", s.ipc);
  s.grid = cfg.get_int("synthesis.grid", s.grid);
  s.crops_per_image = cfg.get_int("synthesis.crops_per_image", s.crops_per_image);
  s.min_frac = cfg.get_num("synthesis.min_frac", s.min_frac);
  s.max_frac = cfg.get_num("synthesis.max_frac", s.max_frac);
  s.validate();
  return s;
}

ImageUpdateConfig image_update_config(const Config& cfg) {
  ImageUpdateConfig u;
  u.steps = cfg.get_int("image_update.steps", u.steps);
  u.lr = cfg.get_num("image_update.lr", u.lr);
  u.factor = cfg.get_int("image_update.factor", u.factor);
  u.validate();
  return u;
}

AugmentationPolicy aug_policy(const Config& cfg) {
  AugmentationPolicy p;
  p.p_mixup = cfg.get_num("student.aug.p_mixup", p.p_mixup);
  p.p_cutmix = cfg.get_num("student.aug.p_cutmix", p.p_cutmix);
  p.mixup_alpha = cfg.get_num("student.aug.mixup_alpha", p.mixup_alpha);
  p.cutmix_alpha = cfg.get_num("student.aug.cutmix_alpha", p.cutmix_alpha);
  p.flips = cfg.get_bool("student.aug.flips", p.flips);
  p.validate();
  return p;
}

StudentConfig student_config(const Config& cfg) {
  StudentConfig s;
  s.arch = cfg.get_str("student.arch", s.arch);
  s.epochs_K = cfg.get_int("student.epochs_K", s.epochs_K);
  s.batch = cfg.get_int("student.batch", s.batch);
  s.lr = cfg.get_num("student.lr", cfg.get_num("student.alpha_lr", s.lr));
  s.momentum = cfg.get_num("student.momentum", s.momentum);
  s.cosine = cfg.get_bool("student.cosine", s.cosine);
  s.beta_ce = cfg.get_num("student.beta_ce", s.beta_ce);
  s.space = parse_space(cfg.get_str("student.space", space_name(s.space)));
  s.temp = cfg.get_num("student.temp", s.temp);
  s.label_mode = cfg.get_str("student.label_mode", s.label_mode);
  s.mixed_targets = cfg.get_bool("student.mixed_targets", s.mixed_targets);
  s.policy = aug_policy(cfg);
  s.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  s.eval_every = cfg.get_int("student.eval_every", s.eval_every);
  s.validate();
  return s;
}

void write_stage_stamp(const std::string& path, const StageStamp& stamp) {
  nlohmann::json j;
  j["stage"] = stamp.stage;
  j["config_hash"] = stamp.config_hash;
  j["artifacts"] = stamp.artifacts;
  j["seconds"] = stamp.seconds;
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed for " + path);
}

StageStamp read_stage_stamp(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("stamp parse error in " + path + ": " + e.what());
  }
  StageStamp s;
  s.stage = j.at("stage").get<std::string>();
  s.config_hash = j.at("config_hash").get<std::string>();
  s.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  s.seconds = j.at("seconds").get<double>();
  return s;
}

StageAction plan_stage(const std::string& done_path, const std::string& config_hash,
                       bool force) {
  if (!fs::exists(done_path)) return StageAction::kRun;
  StageStamp s = read_stage_stamp(done_path);
  if (s.config_hash == config_hash) return StageAction::kSkip;
  if (force) return StageAction::kRun;
  throw ConfigError("stage " + s.stage + " was completed under config " +
                    s.config_hash + " but the current config hashes to " +
                    config_hash + "; rerun with --force to overwrite");
}

Pipeline::Pipeline(Config cfg, bool force)
    : cfg_(std::move(cfg)), force_(force),
      paths_(run_paths(cfg_.require_str("out_dir"))), hash_(hex64(cfg_.hash())) {}

uint64_t Pipeline::seed() const {
  return static_cast<uint64_t>(cfg_.get_int("seed", 0));
}

StageResult Pipeline::guarded(
    const std::string& stage,
    const std::function<std::vector<std::string>()>& body) {
  std::string done = paths_.done(stage);
  fs::create_directories(paths_.out_dir);
  if (plan_stage(done, hash_, force_) == StageAction::kSkip)
    return {stage, true, 0.0};
  for (const char* sub : {"data", "encoder", "teacher", "syn", "proj", "student", "eval"})
    fs::create_directories(fs::path(paths_.out_dir) / sub);
  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> artifacts = body();
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_stage_stamp(done, {stage, hash_, artifacts, secs});
  return {stage, false, secs};
}

const LabeledDataset& Pipeline::train_set() {
  if (!train_) train_ = load_dataset(paths_.train_data);
  return *train_;
}

const LabeledDataset& Pipeline::test_set() {
  if (!test_) test_ = load_dataset(paths_.test_data);
  return *test_;
}

const TensorArchive& Pipeline::encoder_archive() {
  if (!encoder_arc_) encoder_arc_ = TensorArchive::load_file(paths_.encoder);
  return *encoder_arc_;
}

TextEncoder Pipeline::text_encoder() { return load_text_encoder(encoder_archive()); }

Projector Pipeline::zero_shot_projector() {
  std::string arch = cfg_.get_str("encoder.arch", "convnet_s");
  ImageEncoder enc = load_pretrained_encoder(encoder_archive(), arch);
  TextEncoder txt = text_encoder();
  const std::vector<std::string>& names = train_set().class_names;
  const std::vector<std::string>& tmpl = default_prompt_templates();
  Tensorf v_T = encode_text(txt, build_class_prompts(names, tmpl));
  return Projector(std::move(enc), init_head_from_text(v_T),
                   encoder_id_of(encoder_archive()), names, tmpl);
}

Projector Pipeline::fitted_projector() {
  // student.projector_arc points train-student at a foreign artifact.
  std::string path = cfg_.get_str("student.projector_arc", paths_.projector);
  return load_projector(path, encoder_archive(), text_encoder());
}

SyntheticDataset Pipeline::raw_synthetic() {
  return load_synthetic(paths_.syn_archive, paths_.syn_manifest);
}

SyntheticDataset Pipeline::student_train_set() {
  if (cfg_.has("student.synthetic_arc")) {
    std::string arc = cfg_.require_str("student.synthetic_arc");
    std::string man = cfg_.get_str(
        "student.synthetic_manifest",
        (fs::path(arc).parent_path() / "prov.json").string());
    return load_synthetic(arc, man);
  }
  if (cfg_.get_bool("image_update.enabled", false) && fs::exists(paths_.syn_updated))
    return load_synthetic(paths_.syn_updated, paths_.syn_manifest);
  return raw_synthetic();
}

TeacherEnsemble Pipeline::teacher_ensemble() {
  TrajectoryResult traj = load_trajectory_manifest(paths_.teacher_manifest);
  std::vector<int64_t> w = cfg_.get_int_list("teacher.window", {1, 9});
  if (w.size() != 2) throw ConfigError("teacher.window must be [lo, hi]");
  int64_t count = cfg_.get_int("teacher.count", 9);
  return select_teachers(traj.checkpoints, {w[0], w[1]}, count);
}

StageResult Pipeline::init_data() {
  return guarded("init-data", [&]() -> std::vector<std::string> {
    ToySpec spec = data_spec(cfg_);
    ToySpec tspec = spec;
    tspec.per_class = test_per_class(cfg_);
    Rng root(seed());
    Rng tr_rng = root.split_tag("data_train");
    Rng te_rng = root.split_tag("data_test");
    LabeledDataset train = make_toy_dataset(spec, "train", tr_rng);
    LabeledDataset test = make_toy_dataset(tspec, "test", te_rng);
    save_dataset(paths_.train_data, train);
    save_dataset(paths_.test_data, test);
    train_ = std::move(train);
    test_ = std::move(test);

    std::string source = cfg_.get_str("encoder.source", "toy");
    TensorArchive pair;
    if (source == "toy") {
      std::string arch = cfg_.get_str("encoder.arch", "convnet_s");
      int64_t d_f = cfg_.get_int("encoder.d_f", 64);
      int64_t vocab = cfg_.get_int("text.vocab", 512);
      Rng er = root.split_tag("encoder");
      Rng xr = root.split_tag("text");
      ImageEncoder enc = make_toy_image_encoder(arch, spec.channels, spec.height,
                                                spec.width, d_f, er);
      TextEncoder txt = make_toy_text_encoder(vocab, d_f, xr);
      pair = encoder_pair_to_archive(enc, txt);
    } else if (source == "archive") {
      std::string src = cfg_.require_str("encoder.archive");
      if (src.size() > 5 && src.substr(src.size() - 5) == ".json") {
        pair = import_encoder_archive(src);
      } else {
        pair = TensorArchive::load_file(src);
        load_pretrained_encoder(pair, cfg_.get_str("encoder.arch", "convnet_s"));
        load_text_encoder(pair);
      }
    } else {
      throw ConfigError("encoder.source must be \"toy\" or \"archive\"");
    }
    pair.save_file(paths_.encoder);
    encoder_arc_.reset();
    return {paths_.train_data, paths_.test_data, paths_.encoder};
  });
}

StageResult Pipeline::harvest_teachers() {
  return guarded("harvest-teachers", [&]() -> std::vector<std::string> {
    TeacherTrainConfig tcfg = teacher_config(cfg_, paths_.out_dir);
    TrajectoryResult traj = train_trajectory(train_set(), tcfg);
    save_trajectory_manifest(paths_.teacher_manifest, traj, tcfg, hash_);
    std::vector<std::string> artifacts = {paths_.teacher_manifest};
    for (const auto& cp : traj.checkpoints) artifacts.push_back(cp.path);
    return artifacts;
  });
}

StageResult Pipeline::init_synthetic() {
  return guarded("init-synthetic", [&]() -> std::vector<std::string> {
    SynthesisConfig scfg = synthesis_config(cfg_);
    std::string obs_kind = cfg_.get_str("synthesis.observer", "zero_shot");

    // Keep the observed model alive for the whole build.
    std::optional<Projector> proj;
    std::optional<LoadedTeacher> teacher;
    Observer obs;
    if (obs_kind == "zero_shot") {
      proj = zero_shot_projector();
      obs = make_projector_observer(*proj);
    } else if (obs_kind == "teacher") {
      TrajectoryResult traj = load_trajectory_manifest(paths_.teacher_manifest);
      if (traj.checkpoints.empty())
        throw ValidationError("teacher manifest lists no checkpoints");
      teacher = load_teacher_checkpoint(traj.checkpoints.back().path);
      obs = make_net_observer(teacher->net);
    } else {
      throw ConfigError("synthesis.observer must be \"zero_shot\" or \"teacher\"");
    }

    Rng root(seed());
    Rng sr = root.split_tag("synthesis");
    SyntheticDataset sd = build_synthetic(train_set(), obs, scfg, sr);
    sd.config_hash = hash_;
    save_synthetic(paths_.syn_archive, paths_.syn_manifest, sd);
    return {paths_.syn_archive, paths_.syn_manifest};
  });
}

StageResult Pipeline::fit_projector_stage() {
  return guarded("fit-projector", [&]() -> std::vector<std::string> {
    TeacherEnsemble ens = teacher_ensemble();
    Projector proj = zero_shot_projector();
    int64_t rank_enc = cfg_.get_int("transfer.rank_enc", 4);
    int64_t rank_head = cfg_.get_int("transfer.rank_head", 8);
    double scale = cfg_.get_num("transfer.scale", 1.0);
    Rng root(seed());
    Rng lr_rng = root.split_tag("lora");
    attach_lora(proj, default_conv_filter, rank_enc, rank_head,
                static_cast<float>(scale), lr_rng);
    TransferLog log = fit_projector(proj, train_set(), ens, transfer_config(cfg_));
    save_transfer_log(paths_.transfer_log, log);
    save_projector(make_projector_artifact(proj, hash_), paths_.projector);
    return {paths_.projector, paths_.transfer_log};
  });
}

StageResult Pipeline::update_images_stage() {
  return guarded("update-images", [&]() -> std::vector<std::string> {
    SyntheticDataset sd = raw_synthetic();
    std::string arch = cfg_.get_str("encoder.arch", "convnet_s");
    ImageEncoder enc = load_pretrained_encoder(encoder_archive(), arch);
    ImageUpdateResult res = image_update(sd, enc, image_update_config(cfg_));
    save_synthetic(paths_.syn_updated, paths_.syn_manifest, sd);

    nlohmann::json j;
    nlohmann::json losses = nlohmann::json::array();
    for (double v : res.mean_loss) losses.push_back(v);
    j["mean_loss"] = losses;
    j["updated"] = res.updated;
    j["skipped"] = res.skipped;
    std::ofstream os(paths_.update_trace);
    if (!os) throw IoError("cannot open " + paths_.update_trace + " for writing");
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed for " + paths_.update_trace);
    return {paths_.syn_updated, paths_.update_trace};
  });
}

StageResult Pipeline::train_student_stage() {
  return guarded("train-student", [&]() -> std::vector<std::string> {
    SyntheticDataset sd = student_train_set();
    Projector proj = fitted_projector();
    StudentConfig scfg = student_config(cfg_);
    StudentResult res = train_student(sd.data, proj, scfg, test_set());
    save_teacher_checkpoint(paths_.student, res.model, scfg.epochs_K);
    save_student_metrics(paths_.student_metrics, res);
    return {paths_.student, paths_.student_metrics};
  });
}

StageResult Pipeline::eval_student() {
  return guarded("eval-student", [&]() -> std::vector<std::string> {
    LoadedTeacher student = load_teacher_checkpoint(paths_.student);
    double acc = evaluate(student.net, test_set());

    TensorArchive parc = TensorArchive::load_file(paths_.projector);
    StorageCount sc = count_projector_storage(artifact_from_archive(parc));
    SyntheticDataset sd = student_train_set();
    std::string syn_path =
        cfg_.get_bool("image_update.enabled", false) && fs::exists(paths_.syn_updated)
            ? paths_.syn_updated
            : paths_.syn_archive;
    uint64_t syn_bytes = static_cast<uint64_t>(fs::file_size(syn_path));
    int64_t K = cfg_.get_int("eval.storage_K", 150);
    int64_t C = sd.data.num_classes();
    StorageReport rep =
        storage_report(K, sd.data.count(), C, 4, sc, syn_bytes, sd.ipc);

    std::string out = "{\"test_acc\":" + num_str(acc) + ",\"config_hash\":\"" +
                      hash_ + "\",\"storage\":" + storage_report_json(rep) + "}\n";
    std::ofstream os(paths_.eval_report);
    if (!os) throw IoError("cannot open " + paths_.eval_report + " for writing");
    os << out;
    if (!os) throw IoError("write failed for " + paths_.eval_report);
    return {paths_.eval_report};
  });
}

std::vector<StageResult> Pipeline::run_all() {
  std::vector<StageResult> out;
  out.push_back(init_data());
  out.push_back(harvest_teachers());
  out.push_back(init_synthetic());
  out.push_back(fit_projector_stage());
  if (cfg_.get_bool("image_update.enabled", false))
    out.push_back(update_images_stage());
  out.push_back(train_student_stage());
  out.push_back(eval_student());
  return out;
}

}  // namespace hello
