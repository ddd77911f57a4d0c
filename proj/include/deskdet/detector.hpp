#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "deskdet/metrics.hpp"
#include "deskdet/rng.hpp"
#include "deskdet/scenes.hpp"
#include "deskdet/tape.hpp"

namespace deskdet {

struct DetectorConfig {
  int image_size = 64;
  int num_classes = 5;  // foreground classes; background index = num_classes
  int grid = 8;         // feature cells per side (stride = image_size / grid)
  int stem_channels = 12;
  int feat_channels = 32;
  int roi_pool_size = 4;
  int hidden_dim = 128;
  int proj_hidden = 256;
  int embed_dim = 64;
  double alpha_clamp = 10.0;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  bool iou_branch = false;  // alternative localization-quality head
  std::vector<double> anchor_sizes = {8.0, 16.0, 26.0};
  std::vector<double> anchor_aspects = {0.6, 1.5};

  double stride() const { return static_cast<double>(image_size) / grid; }
  int anchors_per_cell() const {
    return static_cast<int>(anchor_sizes.size() * anchor_aspects.size());
  }
  int num_anchors() const { return grid * grid * anchors_per_cell(); }
};

/// Fixed anchor grid; identical between teacher and student by construction.
std::vector<Box> make_anchors(const DetectorConfig& cfg);

/// Per-boundary offsets between a reference box and a target, normalized by
/// the reference width (x) or height (y).
std::array<double, 4> encode_box(const Box& reference, const Box& target);
Box decode_box(const Box& reference, const double* deltas);

/// Uniform per-coordinate perturbation scaled by box width/height, clipped to
/// the image. A collapsed side after clipping is re-opened to 1 px.
Box jitter_box(const Box& box, double lo_frac, double hi_frac, Rng& rng, double image_size);

/// Two-stage detector: conv stem to a grid of features, RPN over fixed
/// anchors, ROI heads (class logits, class-agnostic per-boundary offsets,
/// class-aware per-boundary log-variance), and the embedding stack
/// (projection for both roles, prediction for the student only).
class DetectorModel {
 public:
  enum class Role { kTeacher, kStudent };
  static constexpr const char* kStudentOnlyPrefix = "pred.";

  DetectorModel(const DetectorConfig& cfg, Role role, std::uint64_t init_seed);

  const DetectorConfig& config() const { return cfg_; }
  Role role() const { return role_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const std::vector<Box>& anchors() const { return anchors_; }

  /// Copy every shared parameter and buffer value from `src` (used at the
  /// stage transition). Student-only names are skipped.
  void copy_shared_from(const DetectorModel& src);

  // --- tape-based forward pieces ---
  ad::Var backbone(ad::Tape& tape, const Array& image);

  struct RpnOut {
    ad::Var obj_logits;  // num_anchors x 2 (background/object)
    ad::Var deltas;      // num_anchors x 4
  };
  RpnOut rpn_head(ad::Tape& tape, ad::Var features);

  struct Proposals {
    std::vector<Box> boxes;
    std::vector<double> scores;
  };
  /// Objectness-sorted, NMS-deduplicated, capped at top_k. Score ties break
  /// by anchor index. Pure value-level computation (no gradient through
  /// proposal coordinates).
  Proposals propose(const Array& obj_logits, const Array& deltas, int top_k,
                    double nms_iou) const;

  struct RoiOut {
    ad::Var cls_logits;  // N x (K+1)
    ad::Var deltas;      // N x 4, class-agnostic
    ad::Var alpha;       // N x 4 at the readout classes, or N x 4(K+1) raw
    ad::Var hidden;      // N x hidden_dim, shared trunk for the embedding stack
    ad::Var iou_logits;  // N x (K+1), defined only when the branch is enabled
    std::vector<char> degenerate;  // per box: pooled from a single cell
  };
  /// readout_classes selects the uncertainty columns per row (training uses
  /// target classes); pass nullptr to get the full class-aware matrix.
  RoiOut roi_head(ad::Tape& tape, ad::Var features, const std::vector<Box>& boxes,
                  const std::vector<int>* readout_classes);

  /// Shared ROI trunk only (pool -> fc1 -> relu), the embedding stack input.
  ad::Var roi_trunk(ad::Tape& tape, ad::Var features, const std::vector<Box>& boxes,
                    std::vector<char>* degenerate = nullptr);

  /// Unit-norm embeddings from ROI hidden features. Teacher output is
  /// detached; batch-norm uses batch statistics iff bn_training (buffers are
  /// only updated then, so teacher passes must use running statistics).
  ad::Var embed(ad::Tape& tape, ad::Var hidden, bool bn_training);

  /// Full inference: weak-free forward, decode, per-class NMS. Detections
  /// carry per-boundary sigma = exp(alpha/2) read at the predicted class.
  std::vector<Detection> detect(const Array& image, double score_thresh, double nms_iou,
                                int top_k_proposals, double rpn_nms_iou = 0.7);

 private:
  DetectorConfig cfg_;
  Role role_;
  ParamStore params_;
  std::vector<Box> anchors_;
};

/// Value-level decode of ROI outputs followed by per-class NMS.
std::vector<Detection> decode_and_nms(const Array& cls_logits, const Array& deltas,
                                      const Array& alpha_full,
                                      const std::vector<Box>& proposals,
                                      const DetectorConfig& cfg, double score_thresh,
                                      double nms_iou);

}  // namespace deskdet
