#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deskdet/config.hpp"
#include "deskdet/metrics.hpp"
#include "deskdet/pipeline.hpp"

namespace deskdet {

struct RunResult {
  std::filesystem::path dir;
  APReport final_ap;                      // teacher (student if supervised-only)
  APReport pretrain_ap;                   // evaluated at the stage transition
  std::optional<CorrelationReport> corr;  // absent if too few matched detections
};

/// Full training run: writes config.resolved, ledger.csv, checkpoints,
/// detections.csv, ap_report.csv and correlation.csv into cfg.out_dir.
/// Deterministic per (dataset.seed, train.seed).
RunResult run_experiment(const ExperimentConfig& cfg);

/// Evaluate a model on freshly generated held-out scenes (independent stream
/// derived from the dataset seed).
std::pair<APReport, std::vector<DetectionRecord>> evaluate_model(
    DetectorModel& model, const std::vector<Scene>& scenes, const PipelineConfig& pipe);

std::vector<Scene> make_eval_scenes(const ExperimentConfig& cfg);

/// Checkpoint both networks, optimizer momentum and loop position.
void save_state(const std::string& path, const TeacherStudentState& state);
/// Restore into a compatible state; throws on missing names or shape
/// mismatches, naming the offending entry.
void load_state(const std::string& path, TeacherStudentState& state);

struct AblationCell {
  std::string name;
  bool ocl = false;
  bool rupl = false;
};

struct CellStats {
  double mean = 0.0;
  double stddev = 0.0;
};

struct CellResult {
  std::string name;
  bool ok = false;
  std::string error;
  std::vector<double> ap50_95, ap50, ap75;  // one entry per seed
  CellStats s5095, s50, s75;
};

CellStats mean_std(const std::vector<double>& xs);

/// One row per cell in declared order, each run over every seed. Failed cells
/// are recorded with their error and the grid continues. Cells run on `jobs`
/// worker threads; each run itself is single-threaded and deterministic.
std::vector<CellResult> run_ablation_grid(const ExperimentConfig& base,
                                          const std::vector<AblationCell>& cells,
                                          const std::vector<std::uint64_t>& seeds, int jobs,
                                          const std::string& out_dir);

/// Regression-threshold sweep at otherwise default toggles.
std::vector<CellResult> run_treg_sweep(const ExperimentConfig& base,
                                       const std::vector<double>& thresholds,
                                       const std::vector<std::uint64_t>& seeds, int jobs,
                                       const std::string& out_dir);

void write_grid_csv(const std::string& path, const std::vector<CellResult>& rows,
                    const std::string& key_column);

}  // namespace deskdet
