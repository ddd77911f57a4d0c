#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deskdet/pipeline.hpp"
#include "deskdet/scenes.hpp"

namespace deskdet {

/// Full experiment description. Serialized as a flat key=value text file with
/// dotted keys; command-line overrides use the same keys and win over the
/// file.
struct ExperimentConfig {
  // dataset
  int num_scenes = 800;
  double labeled_fraction = 0.10;
  std::uint64_t dataset_seed = 42;
  SceneConfig scene;
  // schedule
  int pretrain_iters = 500;
  int total_iters = 5000;
  int batch_labeled = 8;
  int batch_unlabeled = 8;
  bool supervised_only = false;  // stay in the supervised stage for all iters
  std::uint64_t train_seed = 1;
  // pipeline (thresholds, lambdas, toggles, sampling)
  PipelineConfig pipe;
  // evaluation
  int eval_interval = 500;
  int eval_scenes = 100;
  // output
  std::string out_dir;

  DetectorConfig detector() const;
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

ExperimentConfig default_config();

/// Set one dotted key; throws ConfigError naming the key on unknown keys or
/// unparsable values.
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// key=value lines; '#' starts a comment.
ExperimentConfig load_config_file(const std::string& path);

/// Cross-field checks; throws ConfigError with the offending field path.
void validate(const ExperimentConfig& cfg);

/// Resolved flat dump, one key=value per line, every key present.
std::string dump_config(const ExperimentConfig& cfg);

std::vector<std::string> config_keys();

}  // namespace deskdet
