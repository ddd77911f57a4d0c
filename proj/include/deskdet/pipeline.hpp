#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "deskdet/detector.hpp"
#include "deskdet/losses.hpp"
#include "deskdet/scenes.hpp"

namespace deskdet {

struct FilterThresholds {
  double t_cls = 0.7;
  double t_cont = 0.7;
  double t_reg = 0.5;
  double tau = 0.07;
};

enum class Stage { kPretrain, kMutual };
enum class LocQuality { kUncertainty, kBoxJitter, kPredictedIou };

struct PipelineConfig {
  double lr = 0.01;
  double sgd_momentum = 0.9;
  double ema_momentum = 0.9996;
  FilterThresholds thresholds;
  double lambda_unsup = 4.0;
  double lambda_ocl = 0.1;
  double lambda_unc = 0.25;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  bool ocl_enabled = true;
  bool rupl_enabled = true;
  LocQuality loc_quality = LocQuality::kUncertainty;
  // teacher decode settings for pseudo-label candidates
  double pseudo_score_thresh = 0.05;
  double pseudo_nms_iou = 0.5;
  int train_proposals = 64;
  int eval_proposals = 32;
  double rpn_nms_iou = 0.7;
  // sampling recipe
  int rois_per_image = 32;
  double roi_pos_fraction = 0.25;
  double roi_pos_iou = 0.5;
  int rpn_samples_per_image = 32;
  double rpn_pos_iou = 0.5;
  double rpn_neg_iou = 0.3;
  // contrastive batch assembly
  int ocl_max_objects = 32;
  double box_jitter_frac = 0.06;
  // alternative localization-quality measures
  double box_jitter_thresh = 0.01;
  double predicted_iou_thresh = 0.8;
  int box_jitter_samples = 10;
};

/// Teacher + student + optimizer state. The teacher owns no optimizer state
/// and is only ever written by copy (stage transition) or EMA.
struct TeacherStudentState {
  DetectorModel teacher;
  DetectorModel student;
  std::map<std::string, Array> opt_momentum;  // per trainable student param
  double ema_momentum = 0.9996;
  Stage stage = Stage::kPretrain;
  int iteration = 0;
  std::uint64_t train_seed = 0;

  TeacherStudentState(const DetectorConfig& cfg, std::uint64_t init_seed,
                      std::uint64_t train_seed_, double ema_m);
};

/// Per-image filtered pseudo labels, boxes in the original scene frame.
/// reg_set[i] is a subset of cls_set[i] for every image. candidates[i] keeps
/// the raw decoded detections before score filtering; the contrastive batch
/// is assembled from them.
struct PseudoLabelSet {
  std::vector<std::vector<Detection>> cls_set;
  std::vector<std::vector<Detection>> reg_set;
  std::vector<std::vector<Detection>> candidates;
  int total_cls() const;
  int total_reg() const;
};

struct StepStats {
  double loss_total = 0.0;
  double loss_sup = 0.0;
  double loss_unsup = 0.0;
  double loss_ocl = 0.0;
  double rpn_cls = 0.0, rpn_reg = 0.0, roi_cls = 0.0, roi_reg = 0.0;
  int n_cls_labels = 0;
  int n_reg_labels = 0;
  double mean_sigma = 0.0;
  bool ocl_degenerate = false;
};

/// One supervised SGD step on the labeled batch (ROI regression uses the
/// uncertainty-aware loss). Throws on an empty batch.
StepStats pretrain_step(TeacherStudentState& state, const std::vector<const Scene*>& labeled,
                        const PipelineConfig& cfg);

/// Teacher inference on the weak views, decoded at the pseudo candidate
/// settings, then two-step filtering: score > t_cls into cls_set, plus the
/// localization-quality gate into reg_set. Detections are mapped back to the
/// original frame. `seed` feeds the box-jitter consistency sampler only.
PseudoLabelSet generate_pseudo_labels(DetectorModel& teacher,
                                      const std::vector<AugmentedView>& weak_views,
                                      const FilterThresholds& thresholds,
                                      const PipelineConfig& cfg, std::uint64_t seed = 0);

/// One mutual-learning step: supervised loss on the labeled batch, pseudo-label
/// losses and the symmetrized contrastive term on the unlabeled batch, one SGD
/// step on the student, then an EMA update of the teacher.
StepStats mutual_step(TeacherStudentState& state, const std::vector<const Scene*>& labeled,
                      const std::vector<const Scene*>& unlabeled, const PipelineConfig& cfg);

/// theta_t <- m * theta_t + (1-m) * theta_s for every shared parameter and
/// batch-norm buffer; student-only prediction-module names are skipped.
void ema_update(TeacherStudentState& state);

/// Copy the student into the teacher and enter the mutual stage.
void stage_transition(TeacherStudentState& state);

/// v <- mu v + g; p <- p - lr v, per trainable parameter.
void sgd_step(ParamStore& params, std::map<std::string, Array>& momentum, double lr, double mu);

/// Mean normalized variance of refined boundaries across jittered copies of
/// the detection box: var(boundary)/side^2 averaged over the four boundaries
/// (population variance). A constant ROI head scores exactly 0.
double box_jitter_consistency(DetectorModel& teacher, const Array& image, const Detection& det,
                              int num_samples, Rng& rng, const PipelineConfig& cfg);

/// Sigmoid IoU estimate of the detection's box at its predicted class.
double predicted_iou_estimate(DetectorModel& teacher, const Array& image, const Detection& det,
                              const PipelineConfig& cfg);

// --- internals exposed for composition and tests ---

struct GtObj {
  int class_id = 0;
  Box box;
  bool reg_ok = true;  // eligible as a regression target
};

struct ImageLossInputs {
  ad::Var features;  // backbone output for this image on the step tape
  std::vector<GtObj> gts;
};

struct LossParts {
  ad::Var rpn_cls, rpn_reg, roi_cls, roi_reg, iou_loss;
  int n_roi_pos = 0;
};

/// Detection losses over a batch of images whose features are already on the
/// tape. eq7_reg selects the uncertainty-aware ROI regression (labeled data).
LossParts build_detection_losses(ad::Tape& tape, DetectorModel& model,
                                 const std::vector<ImageLossInputs>& images, bool eq7_reg,
                                 const PipelineConfig& cfg, Rng& rng, bool train_iou_branch);

}  // namespace deskdet
