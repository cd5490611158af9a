#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "hello/common.hpp"
#include "hello/evalsuite.hpp"
#include "hello/npyio.hpp"
#include "hello/pipeline.hpp"

namespace {

namespace fs = std::filesystem;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  bool force = false;
  bool resume = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file")->required();
  cmd->add_option("--set", args.sets, "dotted.key=value override, repeatable");
  cmd->add_flag("--force", args.force,
                "rerun a stage whose stamp carries a different config hash");
  cmd->add_flag("--resume", args.resume,
                "skip stages stamped with this config hash (always on; flag kept "
                "for scripts)");
}

hello::Config load_config(const CommonArgs& args) {
  hello::Config cfg = hello::Config::from_file(args.config_path);
  cfg.apply_env();
  for (const std::string& kv : args.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw hello::ConfigError("--set expects key=value, got: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void report(const hello::StageResult& r) {
  if (r.skipped)
    std::fprintf(stderr, "[%s] skipped (stamp matches config)\n", r.stage.c_str());
  else
    std::fprintf(stderr, "[%s] done in %.2fs\n", r.stage.c_str(), r.seconds);
}

void write_text(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path);
  if (!os) throw hello::IoError("cannot open " + path + " for writing");
  os << text;
  if (!os) throw hello::IoError("write failed for " + path);
}

void apply_aug_preset(hello::Config& cfg, const std::string& preset) {
  if (preset == "none") {
    cfg.set("student.aug.p_mixup", "0.0");
    cfg.set("student.aug.p_cutmix", "0.0");
    cfg.set("student.aug.flips", "false");
  } else if (preset == "mixup") {
    cfg.set("student.aug.p_mixup", "1.0");
    cfg.set("student.aug.p_cutmix", "0.0");
  } else if (preset == "cutmix") {
    cfg.set("student.aug.p_mixup", "0.0");
    cfg.set("student.aug.p_cutmix", "1.0");
  } else if (preset == "full") {
    cfg.set("student.aug.p_mixup", "0.5");
    cfg.set("student.aug.p_cutmix", "0.5");
    cfg.set("student.aug.flips", "true");
  } else {
    throw hello::ConfigError("--aug must be none, mixup, cutmix, or full");
  }
}

std::string cross_arch_json(const std::vector<hello::CrossArchRow>& rows) {
  std::string out = "{\"rows\":[";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i) out += ",";
    out += "{\"arch\":\"" + rows[i].arch + "\",\"per_seed\":[";
    for (std::size_t j = 0; j < rows[i].per_seed.size(); ++j) {
      if (j) out += ",";
      out += hello::num_str(rows[i].per_seed[j]);
    }
    out += "],\"mean\":" + hello::num_str(rows[i].mean) +
           ",\"stddev\":" + hello::num_str(rows[i].stddev) + "}";
  }
  return out + "]}\n";
}

std::string continual_json(const std::vector<hello::ContinualRun>& runs) {
  std::string out = "{\"runs\":[";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    if (i) out += ",";
    out += "{\"steps\":" + std::to_string(r.steps) +
           ",\"ipc\":" + std::to_string(r.ipc) + ",\"step_acc\":[";
    for (std::size_t j = 0; j < r.step_acc.size(); ++j) {
      if (j) out += ",";
      out += hello::num_str(r.step_acc[j]);
    }
    out += "],\"memory_sizes\":[";
    for (std::size_t j = 0; j < r.memory_sizes.size(); ++j) {
      if (j) out += ",";
      out += std::to_string(r.memory_sizes[j]);
    }
    out += "],\"partition\":[";
    for (std::size_t j = 0; j < r.partition.size(); ++j) {
      if (j) out += ",";
      out += "[";
      for (std::size_t k = 0; k < r.partition[j].size(); ++k) {
        if (k) out += ",";
        out += std::to_string(r.partition[j][k]);
      }
      out += "]";
    }
    out += "]}";
  }
  return out + "]}\n";
}

int run_cli(int argc, char** argv) {
  CLI::App app{"label-lightening toolkit: distill a dataset into synthetic images "
               "plus a compact online label projector"};
  app.require_subcommand(1);

  CommonArgs pipe_args;
  CLI::App* pipe = app.add_subcommand("pipeline", "run every stage in order");
  add_common(pipe, pipe_args);
  pipe->callback([&] {
    hello::Pipeline p(load_config(pipe_args), pipe_args.force);
    for (const auto& r : p.run_all()) report(r);
  });

  struct StageCmd {
    const char* name;
    const char* help;
    hello::StageResult (hello::Pipeline::*fn)();
  };
  const std::vector<StageCmd> simple = {
      {"init-data", "generate the toy splits and the encoder pair",
       &hello::Pipeline::init_data},
      {"harvest-teachers", "train the teacher trajectory and save checkpoints",
       &hello::Pipeline::harvest_teachers},
      {"init-synthetic", "select patches and assemble the synthetic set",
       &hello::Pipeline::init_synthetic},
      {"update-images", "pixel-space refinement of the synthetic images",
       &hello::Pipeline::update_images_stage},
      {"eval-student", "test accuracy plus the storage report",
       &hello::Pipeline::eval_student},
  };
  std::vector<std::unique_ptr<CommonArgs>> stage_args;
  for (const auto& sc : simple) {
    auto args = std::make_unique<CommonArgs>();
    CLI::App* cmd = app.add_subcommand(sc.name, sc.help);
    add_common(cmd, *args);
    CommonArgs* a = args.get();
    auto fn = sc.fn;
    cmd->callback([a, fn] {
      hello::Pipeline p(load_config(*a), a->force);
      report((p.*fn)());
    });
    stage_args.push_back(std::move(args));
  }

  CommonArgs fit_args;
  double fit_lambda = 0.0;
  int64_t fit_rank_enc = 0, fit_rank_head = 0;
  std::vector<int64_t> fit_window;
  CLI::App* fit = app.add_subcommand("fit-projector",
                                     "fit the adapters against the teacher ensemble");
  add_common(fit, fit_args);
  auto* opt_lambda = fit->add_option("--lambda", fit_lambda, "CE weight in the transfer objective");
  auto* opt_renc = fit->add_option("--rank-enc", fit_rank_enc, "adapter rank on encoder convolutions");
  auto* opt_rhead = fit->add_option("--rank-head", fit_rank_head, "adapter rank on the head");
  auto* opt_window = fit->add_option("--teacher-window", fit_window,
                                     "inclusive teacher epoch window: lo hi")
                         ->expected(2);
  fit->callback([&] {
    hello::Config cfg = load_config(fit_args);
    if (opt_lambda->count()) cfg.set("transfer.lambda_ce", hello::num_str(fit_lambda));
    if (opt_renc->count()) cfg.set("transfer.rank_enc", std::to_string(fit_rank_enc));
    if (opt_rhead->count()) cfg.set("transfer.rank_head", std::to_string(fit_rank_head));
    if (opt_window->count())
      cfg.set("teacher.window", "[" + std::to_string(fit_window[0]) + "," +
                                    std::to_string(fit_window[1]) + "]");
    hello::Pipeline p(std::move(cfg), fit_args.force);
    report(p.fit_projector_stage());
  });

  CommonArgs stu_args;
  std::string stu_synthetic, stu_manifest, stu_projector, stu_aug;
  int64_t stu_epochs = 0;
  double stu_beta = 0.0;
  CLI::App* stu = app.add_subcommand("train-student",
                                     "train a student on the synthetic set with "
                                     "online labels");
  add_common(stu, stu_args);
  auto* opt_syn = stu->add_option("--synthetic", stu_synthetic,
                                  "synthetic archive to train on (default: this run's)");
  auto* opt_man = stu->add_option("--synthetic-manifest", stu_manifest,
                                  "provenance manifest (default: prov.json next to the archive)");
  auto* opt_proj = stu->add_option("--projector", stu_projector,
                                   "projector artifact (default: this run's)");
  auto* opt_epochs = stu->add_option("--epochs", stu_epochs, "training epochs");
  auto* opt_beta = stu->add_option("--beta", stu_beta, "CE weight in the student objective");
  auto* opt_aug = stu->add_option("--aug", stu_aug, "augmentation preset: none, mixup, cutmix, full");
  stu->callback([&] {
    hello::Config cfg = load_config(stu_args);
    if (opt_syn->count()) cfg.set("student.synthetic_arc", stu_synthetic);
    if (opt_man->count()) cfg.set("student.synthetic_manifest", stu_manifest);
    if (opt_proj->count()) cfg.set("student.projector_arc", stu_projector);
    if (opt_epochs->count()) cfg.set("student.epochs_K", std::to_string(stu_epochs));
    if (opt_beta->count()) cfg.set("student.beta_ce", hello::num_str(stu_beta));
    if (opt_aug->count()) apply_aug_preset(cfg, stu_aug);
    hello::Pipeline p(std::move(cfg), stu_args.force);
    report(p.train_student_stage());
  });

  CommonArgs xa_args;
  CLI::App* xa = app.add_subcommand("eval-cross-arch",
                                    "train students of several architectures on the "
                                    "same synthetic set");
  add_common(xa, xa_args);
  xa->callback([&] {
    hello::Config cfg = load_config(xa_args);
    std::vector<std::string> archs =
        cfg.get_str_list("eval.cross_archs", {"convnet_s"});
    std::vector<int64_t> iseeds = cfg.get_int_list("eval.seeds", {0, 1, 2});
    std::vector<uint64_t> seeds(iseeds.begin(), iseeds.end());
    hello::Pipeline p(cfg, xa_args.force);
    hello::SyntheticDataset sd = p.student_train_set();
    hello::Projector proj = p.fitted_projector();
    std::vector<hello::CrossArchRow> rows = hello::cross_arch_eval(
        sd.data, proj, archs, hello::student_config(cfg), seeds, p.test_set());
    for (const auto& r : rows)
      std::fprintf(stderr, "[eval-cross-arch] %s mean=%.4f stddev=%.4f\n",
                   r.arch.c_str(), r.mean, r.stddev);
    write_text(p.paths().out_dir + "/eval/cross_arch.json", cross_arch_json(rows));
  });

  CommonArgs ct_args;
  CLI::App* ct = app.add_subcommand("eval-continual",
                                    "class-incremental greedy-memory schedule over "
                                    "the synthetic set");
  add_common(ct, ct_args);
  ct->callback([&] {
    hello::Config cfg = load_config(ct_args);
    std::vector<int64_t> steps_list = cfg.get_int_list("eval.continual_steps", {5, 10});
    hello::Pipeline p(cfg, ct_args.force);
    hello::SyntheticDataset sd = p.student_train_set();
    hello::Projector proj = p.fitted_projector();
    std::vector<hello::ContinualRun> runs;
    for (int64_t steps : steps_list) {
      runs.push_back(hello::gdumb_run(sd.data, proj, p.test_set(), steps, sd.ipc,
                                      hello::student_config(cfg)));
      const auto& r = runs.back();
      std::string accs;
      for (double a : r.step_acc) accs += " " + hello::num_str(a);
      std::fprintf(stderr, "[eval-continual] steps=%lld acc per step:%s\n",
                   static_cast<long long>(r.steps), accs.c_str());
    }
    write_text(p.paths().out_dir + "/eval/continual.json", continual_json(runs));
  });

  int64_t rs_K = 150, rs_ipc = 10, rs_classes = 100, rs_width = 4;
  bool rs_grid = false;
  std::string rs_config;
  CLI::App* rs = app.add_subcommand("report-storage",
                                    "label-storage arithmetic: bytes for K epochs of "
                                    "soft labels vs. the projector artifact");
  rs->add_option("--K", rs_K, "downstream epochs counted");
  rs->add_option("--ipc", rs_ipc, "synthetic images per class");
  rs->add_option("--classes", rs_classes, "class count");
  rs->add_option("--width", rs_width, "bytes per stored scalar (4 or 8)");
  rs->add_flag("--grid", rs_grid, "print the reference grid: classes 100/1000, ipc 1/10/50");
  auto* opt_rsc = rs->add_option("--run", rs_config,
                                 "config of a finished run; reports its real artifacts");
  rs->callback([&] {
    if (rs_grid) {
      std::printf("%8s %6s %16s %12s\n", "classes", "ipc", "label bytes", "MiB");
      for (int64_t c : {int64_t{100}, int64_t{1000}}) {
        for (int64_t ipc : {int64_t{1}, int64_t{10}, int64_t{50}}) {
          hello::StorageReport r = hello::storage_report(
              rs_K, ipc * c, c, rs_width, hello::StorageCount{}, 0, ipc);
          std::printf("%8lld %6lld %16lld %12.1f\n", static_cast<long long>(c),
                      static_cast<long long>(ipc),
                      static_cast<long long>(r.soft_label_bytes),
                      hello::bytes_to_mib(static_cast<uint64_t>(r.soft_label_bytes)));
        }
      }
      return;
    }
    if (opt_rsc->count()) {
      hello::Config cfg = hello::Config::from_file(rs_config);
      cfg.apply_env();
      hello::Pipeline p(cfg, false);
      hello::TensorArchive parc = hello::TensorArchive::load_file(p.paths().projector);
      hello::StorageCount sc =
          hello::count_projector_storage(hello::artifact_from_archive(parc));
      hello::SyntheticDataset sd = p.student_train_set();
      std::string syn_path = fs::exists(p.paths().syn_updated)
                                 ? p.paths().syn_updated
                                 : p.paths().syn_archive;
      hello::StorageReport r = hello::storage_report(
          cfg.get_int("eval.storage_K", rs_K), sd.data.count(),
          sd.data.num_classes(), rs_width, sc,
          static_cast<uint64_t>(fs::file_size(syn_path)), sd.ipc);
      std::printf("%s", hello::format_storage_table(r).c_str());
      return;
    }
    hello::StorageReport r = hello::storage_report(
        rs_K, rs_ipc * rs_classes, rs_classes, rs_width, hello::StorageCount{}, 0,
        rs_ipc);
    std::printf("%s", hello::format_storage_table(r).c_str());
  });

  std::string ie_manifest, ie_out;
  CLI::App* ie = app.add_subcommand("import-encoder",
                                    "convert an external checkpoint (JSON manifest + "
                                    "npy tensors) into an encoder archive");
  ie->add_option("--manifest", ie_manifest, "import manifest JSON")->required();
  ie->add_option("--out", ie_out, "output archive path")->required();
  ie->callback([&] {
    hello::TensorArchive arc = hello::import_encoder_archive(ie_manifest);
    fs::create_directories(fs::path(ie_out).parent_path());
    arc.save_file(ie_out);
    std::fprintf(stderr, "[import-encoder] wrote %s (%s)\n", ie_out.c_str(),
                 hello::encoder_id_of(arc).c_str());
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const hello::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const hello::ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 2;
  } catch (const hello::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
