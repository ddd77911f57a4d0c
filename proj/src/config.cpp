#include "deskdet/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace deskdet {

DetectorConfig ExperimentConfig::detector() const {
  DetectorConfig d;
  d.image_size = scene.image_size;
  d.num_classes = scene.num_classes;
  d.iou_branch = pipe.loc_quality == LocQuality::kPredictedIou;
  return d;
}

ExperimentConfig default_config() { return ExperimentConfig{}; }

namespace {

struct KeyHandler {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::uint64_t x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected on/off, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

const std::map<std::string, KeyHandler>& registry() {
  static const std::map<std::string, KeyHandler> table = [] {
    std::map<std::string, KeyHandler> m;
    auto add_int = [&](const std::string& key, int ExperimentConfig::*field) {
      m[key] = {[key, field](ExperimentConfig& c, const std::string& v) {
                  c.*field = parse_int(key, v);
                },
                [field](const ExperimentConfig& c) { return std::to_string(c.*field); }};
    };
    auto add_f = [&](const std::string& key, double ExperimentConfig::*field) {
      m[key] = {[key, field](ExperimentConfig& c, const std::string& v) {
                  c.*field = parse_double(key, v);
                },
                [field](const ExperimentConfig& c) { return fmt(c.*field); }};
    };
    (void)add_f;
    auto add_pipe_f = [&](const std::string& key, double PipelineConfig::*field) {
      m[key] = {[key, field](ExperimentConfig& c, const std::string& v) {
                  c.pipe.*field = parse_double(key, v);
                },
                [field](const ExperimentConfig& c) { return fmt(c.pipe.*field); }};
    };
    auto add_pipe_i = [&](const std::string& key, int PipelineConfig::*field) {
      m[key] = {[key, field](ExperimentConfig& c, const std::string& v) {
                  c.pipe.*field = parse_int(key, v);
                },
                [field](const ExperimentConfig& c) { return std::to_string(c.pipe.*field); }};
    };
    auto add_th = [&](const std::string& key, double FilterThresholds::*field) {
      m[key] = {[key, field](ExperimentConfig& c, const std::string& v) {
                  c.pipe.thresholds.*field = parse_double(key, v);
                },
                [field](const ExperimentConfig& c) { return fmt(c.pipe.thresholds.*field); }};
    };

    add_int("dataset.num_scenes", &ExperimentConfig::num_scenes);
    add_f("dataset.labeled_fraction", &ExperimentConfig::labeled_fraction);
    m["dataset.seed"] = {[](ExperimentConfig& c, const std::string& v) {
                           c.dataset_seed = parse_u64("dataset.seed", v);
                         },
                         [](const ExperimentConfig& c) { return std::to_string(c.dataset_seed); }};
    m["dataset.image_size"] = {[](ExperimentConfig& c, const std::string& v) {
                                 c.scene.image_size = parse_int("dataset.image_size", v);
                               },
                               [](const ExperimentConfig& c) {
                                 return std::to_string(c.scene.image_size);
                               }};
    m["dataset.num_classes"] = {[](ExperimentConfig& c, const std::string& v) {
                                  c.scene.num_classes = parse_int("dataset.num_classes", v);
                                },
                                [](const ExperimentConfig& c) {
                                  return std::to_string(c.scene.num_classes);
                                }};
    m["dataset.max_objects"] = {[](ExperimentConfig& c, const std::string& v) {
                                  c.scene.max_objects = parse_int("dataset.max_objects", v);
                                },
                                [](const ExperimentConfig& c) {
                                  return std::to_string(c.scene.max_objects);
                                }};

    add_int("schedule.pretrain_iters", &ExperimentConfig::pretrain_iters);
    add_int("schedule.total_iters", &ExperimentConfig::total_iters);
    add_int("schedule.batch_labeled", &ExperimentConfig::batch_labeled);
    add_int("schedule.batch_unlabeled", &ExperimentConfig::batch_unlabeled);
    m["schedule.supervised_only"] = {
        [](ExperimentConfig& c, const std::string& v) {
          c.supervised_only = parse_bool("schedule.supervised_only", v);
        },
        [](const ExperimentConfig& c) { return c.supervised_only ? "on" : "off"; }};
    m["train.seed"] = {[](ExperimentConfig& c, const std::string& v) {
                         c.train_seed = parse_u64("train.seed", v);
                       },
                       [](const ExperimentConfig& c) { return std::to_string(c.train_seed); }};

    add_pipe_f("optim.lr", &PipelineConfig::lr);
    add_pipe_f("optim.momentum", &PipelineConfig::sgd_momentum);
    add_pipe_f("ema.momentum", &PipelineConfig::ema_momentum);

    add_th("thresholds.t_cls", &FilterThresholds::t_cls);
    add_th("thresholds.t_cont", &FilterThresholds::t_cont);
    add_th("thresholds.t_reg", &FilterThresholds::t_reg);
    add_th("thresholds.tau", &FilterThresholds::tau);

    add_pipe_f("lambdas.unsup", &PipelineConfig::lambda_unsup);
    add_pipe_f("lambdas.ocl", &PipelineConfig::lambda_ocl);
    add_pipe_f("lambdas.unc", &PipelineConfig::lambda_unc);
    add_pipe_f("focal.gamma", &PipelineConfig::focal_gamma);
    add_pipe_f("focal.alpha", &PipelineConfig::focal_alpha);

    m["toggles.ocl"] = {[](ExperimentConfig& c, const std::string& v) {
                          c.pipe.ocl_enabled = parse_bool("toggles.ocl", v);
                        },
                        [](const ExperimentConfig& c) {
                          return c.pipe.ocl_enabled ? "on" : "off";
                        }};
    m["toggles.rupl"] = {[](ExperimentConfig& c, const std::string& v) {
                           c.pipe.rupl_enabled = parse_bool("toggles.rupl", v);
                         },
                         [](const ExperimentConfig& c) {
                           return c.pipe.rupl_enabled ? "on" : "off";
                         }};
    m["toggles.loc_quality"] = {
        [](ExperimentConfig& c, const std::string& v) {
          if (v == "uncertainty") c.pipe.loc_quality = LocQuality::kUncertainty;
          else if (v == "box_jitter") c.pipe.loc_quality = LocQuality::kBoxJitter;
          else if (v == "predicted_iou") c.pipe.loc_quality = LocQuality::kPredictedIou;
          else throw ConfigError("toggles.loc_quality: expected uncertainty|box_jitter|predicted_iou, got '" + v + "'");
        },
        [](const ExperimentConfig& c) -> std::string {
          switch (c.pipe.loc_quality) {
            case LocQuality::kUncertainty: return "uncertainty";
            case LocQuality::kBoxJitter: return "box_jitter";
            default: return "predicted_iou";
          }
        }};

    add_pipe_f("pseudo.score_thresh", &PipelineConfig::pseudo_score_thresh);
    add_pipe_f("pseudo.nms_iou", &PipelineConfig::pseudo_nms_iou);
    add_pipe_i("proposals.train", &PipelineConfig::train_proposals);
    add_pipe_i("proposals.eval", &PipelineConfig::eval_proposals);
    add_pipe_f("proposals.rpn_nms_iou", &PipelineConfig::rpn_nms_iou);
    add_pipe_i("sampling.rois_per_image", &PipelineConfig::rois_per_image);
    add_pipe_f("sampling.roi_pos_fraction", &PipelineConfig::roi_pos_fraction);
    add_pipe_f("sampling.roi_pos_iou", &PipelineConfig::roi_pos_iou);
    add_pipe_i("sampling.rpn_per_image", &PipelineConfig::rpn_samples_per_image);
    add_pipe_f("sampling.rpn_pos_iou", &PipelineConfig::rpn_pos_iou);
    add_pipe_f("sampling.rpn_neg_iou", &PipelineConfig::rpn_neg_iou);
    add_pipe_i("ocl.max_objects", &PipelineConfig::ocl_max_objects);
    add_pipe_f("ocl.jitter_frac", &PipelineConfig::box_jitter_frac);
    add_pipe_f("locq.box_jitter_thresh", &PipelineConfig::box_jitter_thresh);
    add_pipe_f("locq.predicted_iou_thresh", &PipelineConfig::predicted_iou_thresh);
    add_pipe_i("locq.box_jitter_samples", &PipelineConfig::box_jitter_samples);

    add_int("eval.interval", &ExperimentConfig::eval_interval);
    add_int("eval.num_scenes", &ExperimentConfig::eval_scenes);
    m["output.dir"] = {[](ExperimentConfig& c, const std::string& v) { c.out_dir = v; },
                       [](const ExperimentConfig& c) { return c.out_dir; }};
    return m;
  }();
  return table;
}

}  // namespace

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = registry();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key: " + key);
  it->second.set(cfg, value);
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  ExperimentConfig cfg = default_config();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = strip(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    apply_override(cfg, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
  return cfg;
}

void validate(const ExperimentConfig& cfg) {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  check(cfg.num_scenes > 0, "dataset.num_scenes: must be > 0");
  check(cfg.labeled_fraction > 0.0 && cfg.labeled_fraction <= 1.0,
        "dataset.labeled_fraction: must be in (0,1]");
  check(cfg.scene.image_size > 0 && cfg.scene.image_size % 8 == 0,
        "dataset.image_size: must be a positive multiple of 8");
  check(cfg.scene.num_classes > 0, "dataset.num_classes: must be > 0");
  check(cfg.scene.max_objects >= 0, "dataset.max_objects: must be >= 0");
  check(cfg.pretrain_iters >= 0, "schedule.pretrain_iters: must be >= 0");
  check(cfg.total_iters >= cfg.pretrain_iters,
        "schedule.total_iters: must be >= schedule.pretrain_iters");
  check(cfg.batch_labeled > 0, "schedule.batch_labeled: must be > 0");
  check(cfg.batch_unlabeled > 0, "schedule.batch_unlabeled: must be > 0");
  const auto& th = cfg.pipe.thresholds;
  check(th.t_cls > 0.0 && th.t_cls <= 1.0, "thresholds.t_cls: must be in (0,1]");
  check(th.t_cont > 0.0 && th.t_cont <= 1.0, "thresholds.t_cont: must be in (0,1]");
  check(th.t_reg > 0.0 && th.t_reg <= 1.0, "thresholds.t_reg: must be in (0,1]");
  check(th.tau > 0.0, "thresholds.tau: must be > 0");
  check(cfg.pipe.lambda_unsup >= 0.0, "lambdas.unsup: must be >= 0");
  check(cfg.pipe.lambda_ocl >= 0.0, "lambdas.ocl: must be >= 0");
  check(cfg.pipe.lambda_unc >= 0.0, "lambdas.unc: must be >= 0");
  check(cfg.pipe.focal_gamma >= 0.0, "focal.gamma: must be >= 0");
  check(cfg.pipe.focal_alpha > 0.0 && cfg.pipe.focal_alpha <= 1.0,
        "focal.alpha: must be in (0,1]");
  check(cfg.pipe.lr > 0.0, "optim.lr: must be > 0");
  check(cfg.pipe.sgd_momentum >= 0.0 && cfg.pipe.sgd_momentum < 1.0,
        "optim.momentum: must be in [0,1)");
  check(cfg.pipe.ema_momentum >= 0.0 && cfg.pipe.ema_momentum <= 1.0,
        "ema.momentum: must be in [0,1]");
  check(cfg.eval_interval > 0, "eval.interval: must be > 0");
  check(cfg.eval_scenes > 0, "eval.num_scenes: must be > 0");
  const int n_labeled = static_cast<int>(std::lround(cfg.num_scenes * cfg.labeled_fraction));
  check(n_labeled >= cfg.batch_labeled,
        "schedule.batch_labeled: larger than the labeled pool");
  if (!cfg.supervised_only && cfg.total_iters > cfg.pretrain_iters) {
    check(cfg.num_scenes - n_labeled >= cfg.batch_unlabeled,
          "schedule.batch_unlabeled: larger than the unlabeled pool");
  }
}

std::string dump_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const auto& [key, handler] : registry()) os << key << "=" << handler.get(cfg) << "\n";
  return os.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [key, handler] : registry()) out.push_back(key);
  return out;
}

}  // namespace deskdet
