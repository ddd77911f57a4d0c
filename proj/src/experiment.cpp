#include "deskdet/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include "deskdet/checkpoint.hpp"

namespace deskdet {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kStreamBatch = 0xba7c4e5ULL;
constexpr std::uint64_t kStreamEvalScenes = 0xe7a15c3ULL;
constexpr std::uint64_t kStreamInit = 0x12175eedULL;

std::vector<const Scene*> pick_batch(const std::vector<const Scene*>& pool, int batch, Rng& rng) {
  std::vector<const Scene*> out;
  const auto idx = rng.sample_without_replacement(static_cast<int>(pool.size()), batch);
  out.reserve(idx.size());
  for (int i : idx) out.push_back(pool[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace

std::vector<Scene> make_eval_scenes(const ExperimentConfig& cfg) {
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(cfg.eval_scenes));
  const std::uint64_t seed = mix_seed(cfg.dataset_seed, kStreamEvalScenes);
  for (int id = 0; id < cfg.eval_scenes; ++id) {
    scenes.push_back(generate_scene(id, seed, Split::kLabeled, cfg.scene));
  }
  return scenes;
}

std::pair<APReport, std::vector<DetectionRecord>> evaluate_model(
    DetectorModel& model, const std::vector<Scene>& scenes, const PipelineConfig& pipe) {
  std::vector<DetectionRecord> records;
  std::vector<GroundTruth> gts;
  for (const Scene& s : scenes) {
    for (const Detection& d : model.detect(s.image, pipe.pseudo_score_thresh, pipe.pseudo_nms_iou,
                                           pipe.eval_proposals, pipe.rpn_nms_iou)) {
      records.push_back(DetectionRecord{s.id, d});
    }
    for (const Annotation& a : s.annotations) {
      gts.push_back(GroundTruth{s.id, a.class_id, a.box});
    }
  }
  return {evaluate_ap(records, gts), std::move(records)};
}

void save_state(const std::string& path, const TeacherStudentState& state) {
  std::map<std::string, Array> entries;
  for (const Parameter* p : state.teacher.params().all())
    entries.emplace("teacher/" + p->name, p->value);
  for (const Parameter* p : state.student.params().all())
    entries.emplace("student/" + p->name, p->value);
  for (const auto& [name, v] : state.opt_momentum) entries.emplace("opt/" + name, v);
  entries.emplace("meta/iteration", Array::scalar(state.iteration));
  entries.emplace("meta/stage", Array::scalar(state.stage == Stage::kMutual ? 1.0 : 0.0));
  entries.emplace("meta/ema_momentum", Array::scalar(state.ema_momentum));
  write_checkpoint(path, entries);
}

void load_state(const std::string& path, TeacherStudentState& state) {
  auto entries = read_checkpoint(path);
  auto pull = [&](const std::string& name) -> Array& {
    auto it = entries.find(name);
    if (it == entries.end()) {
      throw std::runtime_error("load_state: checkpoint lacks entry '" + name + "'");
    }
    return it->second;
  };
  auto restore = [&](ParamStore& store, const std::string& prefix) {
    for (Parameter* p : store.all()) {
      Array& src = pull(prefix + p->name);
      if (!same_shape(src.shape, p->value.shape)) {
        throw std::runtime_error("load_state: shape mismatch at " + prefix + p->name + " (" +
                                 shape_str(src.shape) + " vs " + shape_str(p->value.shape) + ")");
      }
      p->value.data = src.data;
    }
  };
  restore(state.teacher.params(), "teacher/");
  restore(state.student.params(), "student/");
  state.opt_momentum.clear();
  for (const auto& [name, arr] : entries) {
    if (name.rfind("opt/", 0) == 0) state.opt_momentum.emplace(name.substr(4), arr);
  }
  state.iteration = static_cast<int>(pull("meta/iteration")[0]);
  state.stage = pull("meta/stage")[0] > 0.5 ? Stage::kMutual : Stage::kPretrain;
  state.ema_momentum = pull("meta/ema_momentum")[0];
}

RunResult run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  if (cfg.out_dir.empty()) throw ConfigError("output.dir: required for a run");
  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  {
    std::ofstream resolved(dir / "config.resolved");
    resolved << dump_config(cfg);
  }

  const std::vector<Scene> dataset =
      generate_dataset(cfg.num_scenes, cfg.labeled_fraction, cfg.dataset_seed, cfg.scene);
  std::vector<const Scene*> labeled, unlabeled;
  for (const Scene& s : dataset) {
    (s.split == Split::kLabeled ? labeled : unlabeled).push_back(&s);
  }
  const std::vector<Scene> eval_scenes = make_eval_scenes(cfg);

  TeacherStudentState state(cfg.detector(), mix_seed(cfg.train_seed, kStreamInit),
                            cfg.train_seed, cfg.pipe.ema_momentum);

  std::ofstream ledger(dir / "ledger.csv");
  ledger.precision(17);
  ledger << "iteration,stage,L_sup,L_unsup,L_ocl,L_total,n_cls_labels,n_reg_labels,mean_sigma,"
            "teacher_AP50,teacher_AP5095\n";

  RunResult result;
  result.dir = dir;
  bool have_pretrain_ap = false;

  for (int iter = 0; iter < cfg.total_iters; ++iter) {
    if (!cfg.supervised_only && iter == cfg.pretrain_iters) {
      auto [ap, recs] = evaluate_model(state.student, eval_scenes, cfg.pipe);
      (void)recs;
      result.pretrain_ap = ap;
      have_pretrain_ap = true;
      save_state((dir / "checkpoint_pretrain.ckpt").string(), state);
      stage_transition(state);
    }

    Rng brng(mix_seed(cfg.train_seed, static_cast<std::uint64_t>(iter), kStreamBatch));
    const auto labeled_batch = pick_batch(labeled, cfg.batch_labeled, brng);

    StepStats stats;
    if (state.stage == Stage::kPretrain) {
      stats = pretrain_step(state, labeled_batch, cfg.pipe);
    } else {
      const auto unlabeled_batch = pick_batch(unlabeled, cfg.batch_unlabeled, brng);
      stats = mutual_step(state, labeled_batch, unlabeled_batch, cfg.pipe);
    }

    const bool last = iter + 1 == cfg.total_iters;
    const bool do_eval = (iter + 1) % cfg.eval_interval == 0 || last;
    std::string ap50_col, ap5095_col;
    if (do_eval) {
      DetectorModel& eval_net =
          state.stage == Stage::kMutual ? state.teacher : state.student;
      auto [ap, recs] = evaluate_model(eval_net, eval_scenes, cfg.pipe);
      (void)recs;
      std::ostringstream a, b;
      a.precision(17);
      b.precision(17);
      a << ap.ap50;
      b << ap.ap50_95;
      ap50_col = a.str();
      ap5095_col = b.str();
      if (last) result.final_ap = ap;
    }
    ledger << state.iteration << ","
           << (state.stage == Stage::kMutual ? "mutual" : "pretrain") << "," << stats.loss_sup
           << "," << stats.loss_unsup << "," << stats.loss_ocl << "," << stats.loss_total << ","
           << stats.n_cls_labels << "," << stats.n_reg_labels << "," << stats.mean_sigma << ","
           << ap50_col << "," << ap5095_col << "\n";
  }
  ledger.flush();

  DetectorModel& final_net = state.stage == Stage::kMutual ? state.teacher : state.student;
  if (!have_pretrain_ap) {
    // supervised-only runs: the run itself is the baseline
    result.pretrain_ap = result.final_ap;
  }
  save_state((dir / "checkpoint_final.ckpt").string(), state);

  auto [final_ap, records] = evaluate_model(final_net, eval_scenes, cfg.pipe);
  result.final_ap = final_ap;
  write_detection_dump((dir / "detections.csv").string(), records);
  write_ap_report((dir / "ap_report.csv").string(), final_ap);
  std::vector<GroundTruth> gts;
  for (const Scene& s : eval_scenes) {
    for (const Annotation& a : s.annotations) gts.push_back(GroundTruth{s.id, a.class_id, a.box});
  }
  try {
    result.corr = uncertainty_iou_correlation(records, gts);
    write_correlation_report((dir / "correlation.csv").string(), *result.corr);
  } catch (const std::exception&) {
    result.corr.reset();
  }
  return result;
}

CellStats mean_std(const std::vector<double>& xs) {
  CellStats s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double acc = 0.0;
  for (double x : xs) acc += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(acc / static_cast<double>(xs.size()));
  return s;
}

namespace {

struct Job {
  int cell = 0;
  int seed_index = 0;
};

std::vector<CellResult> run_cells(
    const ExperimentConfig& base, const std::vector<std::string>& names,
    const std::vector<std::function<void(ExperimentConfig&)>>& configure,
    const std::vector<std::uint64_t>& seeds, int jobs, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const int n_cells = static_cast<int>(names.size());
  const int n_seeds = static_cast<int>(seeds.size());

  std::vector<CellResult> results(static_cast<std::size_t>(n_cells));
  for (int c = 0; c < n_cells; ++c) {
    results[static_cast<std::size_t>(c)].name = names[static_cast<std::size_t>(c)];
    results[static_cast<std::size_t>(c)].ok = true;
    results[static_cast<std::size_t>(c)].ap50_95.assign(static_cast<std::size_t>(n_seeds), 0.0);
    results[static_cast<std::size_t>(c)].ap50.assign(static_cast<std::size_t>(n_seeds), 0.0);
    results[static_cast<std::size_t>(c)].ap75.assign(static_cast<std::size_t>(n_seeds), 0.0);
  }

  std::vector<Job> queue;
  for (int c = 0; c < n_cells; ++c)
    for (int s = 0; s < n_seeds; ++s) queue.push_back(Job{c, s});
  std::atomic<std::size_t> next{0};
  std::mutex mu;

  auto worker = [&]() {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= queue.size()) return;
      const Job job = queue[j];
      ExperimentConfig cfg = base;
      configure[static_cast<std::size_t>(job.cell)](cfg);
      cfg.train_seed = seeds[static_cast<std::size_t>(job.seed_index)];
      cfg.out_dir = (fs::path(out_dir) /
                     (names[static_cast<std::size_t>(job.cell)] + "_seed" +
                      std::to_string(cfg.train_seed)))
                        .string();
      try {
        const RunResult r = run_experiment(cfg);
        std::lock_guard<std::mutex> lock(mu);
        auto& cell = results[static_cast<std::size_t>(job.cell)];
        cell.ap50_95[static_cast<std::size_t>(job.seed_index)] = r.final_ap.ap50_95;
        cell.ap50[static_cast<std::size_t>(job.seed_index)] = r.final_ap.ap50;
        cell.ap75[static_cast<std::size_t>(job.seed_index)] = r.final_ap.ap75;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        auto& cell = results[static_cast<std::size_t>(job.cell)];
        cell.ok = false;
        if (cell.error.empty()) cell.error = e.what();
      }
    }
  };

  jobs = std::max(1, jobs);
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (auto& cell : results) {
    cell.s5095 = mean_std(cell.ap50_95);
    cell.s50 = mean_std(cell.ap50);
    cell.s75 = mean_std(cell.ap75);
  }
  return results;
}

}  // namespace

std::vector<CellResult> run_ablation_grid(const ExperimentConfig& base,
                                          const std::vector<AblationCell>& cells,
                                          const std::vector<std::uint64_t>& seeds, int jobs,
                                          const std::string& out_dir) {
  if (cells.size() > 32) throw ConfigError("ablation grid: at most 32 cells");
  std::vector<std::string> names;
  std::vector<std::function<void(ExperimentConfig&)>> configure;
  for (const AblationCell& c : cells) {
    names.push_back(c.name);
    configure.push_back([c](ExperimentConfig& cfg) {
      cfg.pipe.ocl_enabled = c.ocl;
      cfg.pipe.rupl_enabled = c.rupl;
    });
  }
  auto results = run_cells(base, names, configure, seeds, jobs, out_dir);
  write_grid_csv((fs::path(out_dir) / "grid.csv").string(), results, "cell");
  return results;
}

std::vector<CellResult> run_treg_sweep(const ExperimentConfig& base,
                                       const std::vector<double>& thresholds,
                                       const std::vector<std::uint64_t>& seeds, int jobs,
                                       const std::string& out_dir) {
  std::vector<std::string> names;
  std::vector<std::function<void(ExperimentConfig&)>> configure;
  for (double t : thresholds) {
    std::ostringstream name;
    name << "treg" << t;
    names.push_back(name.str());
    configure.push_back([t](ExperimentConfig& cfg) { cfg.pipe.thresholds.t_reg = t; });
  }
  auto results = run_cells(base, names, configure, seeds, jobs, out_dir);
  write_grid_csv((fs::path(out_dir) / "sweep.csv").string(), results, "t_reg");
  return results;
}

void write_grid_csv(const std::string& path, const std::vector<CellResult>& rows,
                    const std::string& key_column) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_grid_csv: cannot open " + path);
  out.precision(17);
  out << key_column
      << ",seeds,ap50_95_mean,ap50_95_std,ap50_mean,ap50_std,ap75_mean,ap75_std,status\n";
  for (const CellResult& r : rows) {
    out << r.name << "," << r.ap50_95.size() << "," << r.s5095.mean << "," << r.s5095.stddev
        << "," << r.s50.mean << "," << r.s50.stddev << "," << r.s75.mean << "," << r.s75.stddev
        << "," << (r.ok ? "ok" : ("error:" + r.error)) << "\n";
  }
}

}  // namespace deskdet
