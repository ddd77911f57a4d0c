#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "deskdet/experiment.hpp"

namespace fs = std::filesystem;
using namespace deskdet;

namespace {

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_file, "flat key=value config file");
  cmd->add_option("--set", opts.overrides,
                  "override a config key, e.g. --set thresholds.t_cls=0.8 (repeatable; "
                  "overrides win over the file)");
  cmd->add_option("--out", opts.out, "output path (run directory or file)");
}

std::string resolve_out(const std::string& out) {
  if (out.empty()) return out;
  fs::path p(out);
  const char* root = std::getenv("DESKDET_OUTPUT_ROOT");
  if (root && *root && p.is_relative()) p = fs::path(root) / p;
  return p.string();
}

ExperimentConfig build_config(const CommonOpts& opts) {
  ExperimentConfig cfg =
      opts.config_file.empty() ? default_config() : load_config_file(opts.config_file);
  for (const std::string& kv : opts.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!opts.out.empty()) cfg.out_dir = resolve_out(opts.out);
  else cfg.out_dir = resolve_out(cfg.out_dir);
  return cfg;
}

std::vector<std::uint64_t> seed_list(std::uint64_t first, int count) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < count; ++i) seeds.push_back(first + static_cast<std::uint64_t>(i));
  return seeds;
}

int cmd_generate(const CommonOpts& opts, const std::string& dump_dir) {
  ExperimentConfig cfg = build_config(opts);
  validate(cfg);
  const std::string path = cfg.out_dir.empty() ? "manifest.jsonl" : cfg.out_dir;
  const auto scenes =
      generate_dataset(cfg.num_scenes, cfg.labeled_fraction, cfg.dataset_seed, cfg.scene);
  DatasetMeta meta{cfg.num_scenes, cfg.labeled_fraction, cfg.dataset_seed, cfg.scene};
  write_manifest(path, scenes, meta);
  std::cout << "wrote " << scenes.size() << " scene records to " << path << "\n";
  if (!dump_dir.empty()) {
    fs::create_directories(dump_dir);
    for (const Scene& s : scenes) {
      write_ppm((fs::path(dump_dir) / ("scene_" + std::to_string(s.id) + ".ppm")).string(),
                s.image);
    }
    std::cout << "dumped images to " << dump_dir << "\n";
  }
  return 0;
}

int cmd_train(const CommonOpts& opts) {
  ExperimentConfig cfg = build_config(opts);
  if (cfg.out_dir.empty()) cfg.out_dir = "run";
  const RunResult r = run_experiment(cfg);
  std::cout << "run complete: " << r.dir.string() << "\n"
            << "final AP50=" << r.final_ap.ap50 << " AP75=" << r.final_ap.ap75
            << " AP50:95=" << r.final_ap.ap50_95 << "\n";
  if (r.corr) {
    std::cout << "sigma/IoU spearman rho=" << r.corr->spearman_rho << " over "
              << r.corr->sample_count << " detections\n";
  }
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint, const std::string& which) {
  ExperimentConfig cfg = build_config(opts);
  validate(cfg);
  if (cfg.out_dir.empty()) cfg.out_dir = "eval_out";
  fs::create_directories(cfg.out_dir);

  TeacherStudentState state(cfg.detector(), 0, cfg.train_seed, cfg.pipe.ema_momentum);
  load_state(checkpoint, state);
  DetectorModel& net = which == "student" ? state.student : state.teacher;

  const auto eval_scenes = make_eval_scenes(cfg);
  auto [ap, records] = evaluate_model(net, eval_scenes, cfg.pipe);
  write_detection_dump((fs::path(cfg.out_dir) / "detections.csv").string(), records);
  write_ap_report((fs::path(cfg.out_dir) / "ap_report.csv").string(), ap);
  std::vector<GroundTruth> gts;
  for (const Scene& s : eval_scenes) {
    for (const Annotation& a : s.annotations) gts.push_back(GroundTruth{s.id, a.class_id, a.box});
  }
  std::cout << "AP50=" << ap.ap50 << " AP75=" << ap.ap75 << " AP50:95=" << ap.ap50_95 << "\n";
  try {
    const auto corr = uncertainty_iou_correlation(records, gts);
    write_correlation_report((fs::path(cfg.out_dir) / "correlation.csv").string(), corr);
    std::cout << "spearman rho=" << corr.spearman_rho << " n=" << corr.sample_count << "\n";
  } catch (const std::exception& e) {
    std::cout << "correlation unavailable: " << e.what() << "\n";
  }
  return 0;
}

int cmd_ablate(const CommonOpts& opts, std::uint64_t first_seed, int num_seeds, int jobs) {
  ExperimentConfig cfg = build_config(opts);
  const std::string out = cfg.out_dir.empty() ? "ablation" : cfg.out_dir;
  cfg.out_dir.clear();
  const std::vector<AblationCell> cells = {
      {"ocl_rupl", true, true}, {"rupl_only", false, true},
      {"ocl_only", true, false}, {"baseline", false, false}};
  const auto results = run_ablation_grid(cfg, cells, seed_list(first_seed, num_seeds), jobs, out);
  for (const auto& r : results) {
    std::cout << r.name << ": AP50:95 " << r.s5095.mean << " +- " << r.s5095.stddev
              << (r.ok ? "" : ("  [" + r.error + "]")) << "\n";
  }
  std::cout << "grid written to " << (fs::path(out) / "grid.csv").string() << "\n";
  return 0;
}

int cmd_sweep(const CommonOpts& opts, std::uint64_t first_seed, int num_seeds, int jobs) {
  ExperimentConfig cfg = build_config(opts);
  const std::string out = cfg.out_dir.empty() ? "treg_sweep" : cfg.out_dir;
  cfg.out_dir.clear();
  const std::vector<double> thresholds = {0.3, 0.4, 0.5, 0.6, 0.7};
  const auto results = run_treg_sweep(cfg, thresholds, seed_list(first_seed, num_seeds), jobs, out);
  for (const auto& r : results) {
    std::cout << r.name << ": AP50:95 " << r.s5095.mean << " +- " << r.s5095.stddev
              << (r.ok ? "" : ("  [" + r.error + "]")) << "\n";
  }
  std::cout << "sweep written to " << (fs::path(out) / "sweep.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale semi-supervised object detection sandbox"};
  app.require_subcommand(1);

  CommonOpts gen_opts, train_opts, eval_opts, abl_opts, sweep_opts;
  std::string dump_dir, checkpoint, which = "teacher";
  std::uint64_t abl_seed = 1, sweep_seed = 1;
  int abl_nseeds = 5, sweep_nseeds = 5, abl_jobs = 2, sweep_jobs = 2;

  CLI::App* gen = app.add_subcommand("generate", "write a dataset manifest (JSON lines)");
  add_common(gen, gen_opts);
  gen->add_option("--dump-ppm", dump_dir, "also dump every scene as a PPM image");

  CLI::App* train = app.add_subcommand("train", "run one training configuration");
  add_common(train, train_opts);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out scenes");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--which", which, "teacher|student")->check(CLI::IsMember({"teacher", "student"}));

  CLI::App* abl = app.add_subcommand("ablate", "2x2 module on/off grid over several seeds");
  add_common(abl, abl_opts);
  abl->add_option("--first-seed", abl_seed, "first training seed");
  abl->add_option("--seeds", abl_nseeds, "number of seeds per cell");
  abl->add_option("--jobs", abl_jobs, "parallel runs");

  CLI::App* sweep = app.add_subcommand("sweep-treg", "regression-threshold sweep 0.3..0.7");
  add_common(sweep, sweep_opts);
  sweep->add_option("--first-seed", sweep_seed, "first training seed");
  sweep->add_option("--seeds", sweep_nseeds, "number of seeds per threshold");
  sweep->add_option("--jobs", sweep_jobs, "parallel runs");

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_generate(gen_opts, dump_dir);
    if (train->parsed()) return cmd_train(train_opts);
    if (eval->parsed()) return cmd_eval(eval_opts, checkpoint, which);
    if (abl->parsed()) return cmd_ablate(abl_opts, abl_seed, abl_nseeds, abl_jobs);
    if (sweep->parsed()) return cmd_sweep(sweep_opts, sweep_seed, sweep_nseeds, sweep_jobs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
