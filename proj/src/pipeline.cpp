#include "deskdet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace deskdet {

using ad::Tape;
using ad::Var;

namespace {

// rng stream tags
constexpr std::uint64_t kStreamLabeledAug = 0x1ab01ULL;
constexpr std::uint64_t kStreamWeakAug = 0x3ea7ULL;
constexpr std::uint64_t kStreamStrong1 = 0x57a1ULL;
constexpr std::uint64_t kStreamStrong2 = 0x57a2ULL;
constexpr std::uint64_t kStreamSampling = 0x5a3cULL;
constexpr std::uint64_t kStreamOclJitter = 0x0c1bULL;
constexpr std::uint64_t kStreamBoxJitter = 0xb0c5ULL;

bool starts_with(const std::string& s, const char* prefix) {
  return s.rfind(prefix, 0) == 0;
}

}  // namespace

TeacherStudentState::TeacherStudentState(const DetectorConfig& cfg, std::uint64_t init_seed,
                                         std::uint64_t train_seed_, double ema_m)
    : teacher(cfg, DetectorModel::Role::kTeacher, init_seed),
      student(cfg, DetectorModel::Role::kStudent, init_seed),
      ema_momentum(ema_m),
      train_seed(train_seed_) {}

int PseudoLabelSet::total_cls() const {
  int n = 0;
  for (const auto& v : cls_set) n += static_cast<int>(v.size());
  return n;
}

int PseudoLabelSet::total_reg() const {
  int n = 0;
  for (const auto& v : reg_set) n += static_cast<int>(v.size());
  return n;
}

void sgd_step(ParamStore& params, std::map<std::string, Array>& momentum, double lr, double mu) {
  for (Parameter* p : params.trainable()) {
    auto it = momentum.find(p->name);
    if (it == momentum.end()) {
      it = momentum.emplace(p->name, Array::zeros(p->value.shape)).first;
    }
    Array& v = it->second;
    for (int i = 0; i < p->value.numel(); ++i) {
      v[i] = mu * v[i] + p->grad[i];
      p->value[i] -= lr * v[i];
    }
  }
}

void ema_update(TeacherStudentState& state) {
  const double m = state.ema_momentum;
  for (Parameter* tp : state.teacher.params().all()) {
    const Parameter* sp = state.student.params().find(tp->name);
    if (!sp) throw std::runtime_error("ema_update: student lacks parameter " + tp->name);
    if (!same_shape(tp->value.shape, sp->value.shape)) {
      throw std::runtime_error("ema_update: shape mismatch at " + tp->name);
    }
    for (int i = 0; i < tp->value.numel(); ++i) {
      tp->value[i] = m * tp->value[i] + (1.0 - m) * sp->value[i];
    }
  }
  for (const Parameter* sp : state.student.params().all()) {
    if (!state.teacher.params().find(sp->name) &&
        !starts_with(sp->name, DetectorModel::kStudentOnlyPrefix)) {
      throw std::runtime_error("ema_update: unexpected student-only parameter " + sp->name);
    }
  }
}

void stage_transition(TeacherStudentState& state) {
  state.teacher.copy_shared_from(state.student);
  state.stage = Stage::kMutual;
}

// ---------------------------------------------------------------------------
// detection loss assembly
// ---------------------------------------------------------------------------

namespace {

struct RpnAssignment {
  std::vector<int> labels;      // -1 ignore, 0 negative, 1 positive
  std::vector<int> matched_gt;  // valid for positives
};

RpnAssignment assign_anchors(const std::vector<Box>& anchors, const std::vector<GtObj>& gts,
                             double pos_iou, double neg_iou) {
  const int n = static_cast<int>(anchors.size());
  RpnAssignment out;
  out.labels.assign(static_cast<std::size_t>(n), 0);
  out.matched_gt.assign(static_cast<std::size_t>(n), -1);
  if (gts.empty()) return out;

  for (int a = 0; a < n; ++a) {
    double best = 0.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double ov = iou(anchors[static_cast<std::size_t>(a)], gts[g].box);
      if (ov > best) {
        best = ov;
        best_g = static_cast<int>(g);
      }
    }
    if (best >= pos_iou) {
      out.labels[static_cast<std::size_t>(a)] = 1;
      out.matched_gt[static_cast<std::size_t>(a)] = best_g;
    } else if (best < neg_iou) {
      out.labels[static_cast<std::size_t>(a)] = 0;
    } else {
      out.labels[static_cast<std::size_t>(a)] = -1;
    }
  }
  // Every target keeps at least one positive anchor.
  for (std::size_t g = 0; g < gts.size(); ++g) {
    double best = -1.0;
    int best_a = -1;
    for (int a = 0; a < n; ++a) {
      const double ov = iou(anchors[static_cast<std::size_t>(a)], gts[g].box);
      if (ov > best) {
        best = ov;
        best_a = a;
      }
    }
    if (best_a >= 0) {
      out.labels[static_cast<std::size_t>(best_a)] = 1;
      out.matched_gt[static_cast<std::size_t>(best_a)] = static_cast<int>(g);
    }
  }
  return out;
}

std::vector<int> sample_subset(const std::vector<int>& pool, int want, Rng& rng) {
  if (static_cast<int>(pool.size()) <= want) return pool;
  std::vector<int> picked_idx = rng.sample_without_replacement(static_cast<int>(pool.size()), want);
  std::sort(picked_idx.begin(), picked_idx.end());
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(want));
  for (int i : picked_idx) out.push_back(pool[static_cast<std::size_t>(i)]);
  return out;
}

Array concat_arrays(const std::vector<Array>& parts, int cols) {
  int rows = 0;
  for (const auto& a : parts) rows += a.dim(0);
  Array out({rows, cols});
  std::size_t off = 0;
  for (const auto& a : parts) {
    std::copy(a.data.begin(), a.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += a.data.size();
  }
  return out;
}

}  // namespace

LossParts build_detection_losses(Tape& tape, DetectorModel& model,
                                 const std::vector<ImageLossInputs>& images, bool eq7_reg,
                                 const PipelineConfig& cfg, Rng& rng, bool train_iou_branch) {
  const DetectorConfig& dcfg = model.config();
  const int bg = dcfg.num_classes;

  std::vector<Var> rpn_logit_parts, rpn_reg_parts, roi_logit_parts, roi_reg_parts, roi_alpha_parts;
  std::vector<Var> iou_pred_parts;
  std::vector<int> rpn_targets, roi_targets;
  std::vector<Array> rpn_reg_targets, roi_reg_targets, iou_targets;
  int n_roi_pos = 0;

  for (const ImageLossInputs& img : images) {
    DetectorModel::RpnOut rpn = model.rpn_head(tape, img.features);
    const RpnAssignment assign =
        assign_anchors(model.anchors(), img.gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou);

    std::vector<int> pos, neg;
    for (std::size_t a = 0; a < assign.labels.size(); ++a) {
      if (assign.labels[a] == 1) pos.push_back(static_cast<int>(a));
      else if (assign.labels[a] == 0) neg.push_back(static_cast<int>(a));
    }
    const int want_pos = cfg.rpn_samples_per_image / 2;
    const std::vector<int> pos_keep = sample_subset(pos, want_pos, rng);
    const std::vector<int> neg_keep =
        sample_subset(neg, cfg.rpn_samples_per_image - static_cast<int>(pos_keep.size()), rng);

    std::vector<int> cls_rows;
    cls_rows.reserve(pos_keep.size() + neg_keep.size());
    for (int a : pos_keep) {
      cls_rows.push_back(a);
      rpn_targets.push_back(1);
    }
    for (int a : neg_keep) {
      cls_rows.push_back(a);
      rpn_targets.push_back(0);
    }
    if (!cls_rows.empty()) {
      rpn_logit_parts.push_back(ad::gather_rows(rpn.obj_logits, cls_rows));
    }

    std::vector<int> reg_rows;
    std::vector<Array> reg_tgts;
    for (int a : pos_keep) {
      const GtObj& gt = img.gts[static_cast<std::size_t>(assign.matched_gt[static_cast<std::size_t>(a)])];
      if (!gt.reg_ok) continue;
      reg_rows.push_back(a);
      const auto t = encode_box(model.anchors()[static_cast<std::size_t>(a)], gt.box);
      reg_tgts.push_back(Array({1, 4}, {t[0], t[1], t[2], t[3]}));
    }
    if (!reg_rows.empty()) {
      rpn_reg_parts.push_back(ad::gather_rows(rpn.deltas, reg_rows));
      rpn_reg_targets.push_back(concat_arrays(reg_tgts, 4));
    }

    // --- ROI stage ---
    DetectorModel::Proposals props = model.propose(
        tape.value(rpn.obj_logits), tape.value(rpn.deltas), cfg.train_proposals, cfg.rpn_nms_iou);
    std::vector<Box> candidates = props.boxes;
    for (const GtObj& gt : img.gts) candidates.push_back(gt.box);
    if (candidates.empty()) continue;

    std::vector<int> cand_label(candidates.size(), bg);
    std::vector<int> cand_gt(candidates.size(), -1);
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      double best = 0.0;
      int best_g = -1;
      for (std::size_t g = 0; g < img.gts.size(); ++g) {
        const double ov = iou(candidates[c], img.gts[g].box);
        if (ov > best) {
          best = ov;
          best_g = static_cast<int>(g);
        }
      }
      if (best >= cfg.roi_pos_iou && best_g >= 0) {
        cand_label[c] = img.gts[static_cast<std::size_t>(best_g)].class_id;
        cand_gt[c] = best_g;
      }
    }

    std::vector<int> roi_pos, roi_neg;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      (cand_label[c] == bg ? roi_neg : roi_pos).push_back(static_cast<int>(c));
    }
    const int want_roi_pos =
        static_cast<int>(std::lround(cfg.rois_per_image * cfg.roi_pos_fraction));
    const std::vector<int> keep_pos = sample_subset(roi_pos, want_roi_pos, rng);
    const std::vector<int> keep_neg =
        sample_subset(roi_neg, cfg.rois_per_image - static_cast<int>(keep_pos.size()), rng);

    std::vector<Box> roi_boxes;
    std::vector<int> readout, labels;
    for (int c : keep_pos) {
      roi_boxes.push_back(candidates[static_cast<std::size_t>(c)]);
      labels.push_back(cand_label[static_cast<std::size_t>(c)]);
      readout.push_back(cand_label[static_cast<std::size_t>(c)]);
    }
    for (int c : keep_neg) {
      roi_boxes.push_back(candidates[static_cast<std::size_t>(c)]);
      labels.push_back(bg);
      readout.push_back(bg);
    }
    if (roi_boxes.empty()) continue;

    DetectorModel::RoiOut roi = model.roi_head(tape, img.features, roi_boxes, &readout);
    roi_logit_parts.push_back(roi.cls_logits);
    for (int l : labels) roi_targets.push_back(l);

    std::vector<int> reg_sel;
    std::vector<Array> roi_tgts;
    std::vector<int> iou_cols;
    std::vector<Array> iou_tgt_rows;
    for (std::size_t k = 0; k < keep_pos.size(); ++k) {
      const int c = keep_pos[k];
      const GtObj& gt = img.gts[static_cast<std::size_t>(cand_gt[static_cast<std::size_t>(c)])];
      if (gt.reg_ok) {
        reg_sel.push_back(static_cast<int>(k));
        const auto t = encode_box(candidates[static_cast<std::size_t>(c)], gt.box);
        roi_tgts.push_back(Array({1, 4}, {t[0], t[1], t[2], t[3]}));
      }
      if (train_iou_branch && dcfg.iou_branch) {
        iou_cols.push_back(static_cast<int>(k));
        iou_tgt_rows.push_back(
            Array({1, 1}, {iou(candidates[static_cast<std::size_t>(c)], gt.box)}));
      }
    }
    n_roi_pos += static_cast<int>(keep_pos.size());
    if (!reg_sel.empty()) {
      roi_reg_parts.push_back(ad::gather_rows(roi.deltas, reg_sel));
      roi_alpha_parts.push_back(ad::gather_rows(roi.alpha, reg_sel));
      roi_reg_targets.push_back(concat_arrays(roi_tgts, 4));
    }
    if (!iou_cols.empty()) {
      Var fg_rows = ad::gather_rows(roi.iou_logits, iou_cols);
      std::vector<int> class_cols;
      for (int k : iou_cols) class_cols.push_back(labels[static_cast<std::size_t>(k)]);
      iou_pred_parts.push_back(ad::sigmoid(ad::take_per_row(fg_rows, class_cols, 1)));
      iou_targets.push_back(concat_arrays(iou_tgt_rows, 1));
    }
  }

  LossParts parts;
  parts.n_roi_pos = n_roi_pos;
  parts.rpn_cls = rpn_logit_parts.empty()
                      ? tape.constant(0.0)
                      : cross_entropy(ad::concat_rows(rpn_logit_parts), rpn_targets);
  parts.rpn_reg = rpn_reg_parts.empty()
                      ? tape.constant(0.0)
                      : smooth_l1(ad::concat_rows(rpn_reg_parts),
                                  tape.constant(concat_arrays(rpn_reg_targets, 4)));
  parts.roi_cls = roi_logit_parts.empty()
                      ? tape.constant(0.0)
                      : focal_loss(ad::concat_rows(roi_logit_parts), roi_targets,
                                   cfg.focal_gamma, cfg.focal_alpha);
  if (roi_reg_parts.empty()) {
    parts.roi_reg = tape.constant(0.0);
  } else {
    Var pred = ad::concat_rows(roi_reg_parts);
    Var target = tape.constant(concat_arrays(roi_reg_targets, 4));
    parts.roi_reg = eq7_reg
                        ? uncertainty_reg_loss(pred, target, ad::concat_rows(roi_alpha_parts),
                                               cfg.lambda_unc)
                        : smooth_l1(pred, target);
  }
  parts.iou_loss = iou_pred_parts.empty()
                       ? tape.constant(0.0)
                       : smooth_l1(ad::concat_rows(iou_pred_parts),
                                   tape.constant(concat_arrays(iou_targets, 1)));
  return parts;
}

// ---------------------------------------------------------------------------
// steps
// ---------------------------------------------------------------------------

namespace {

std::vector<ImageLossInputs> labeled_inputs(Tape& tape, DetectorModel& student,
                                            const std::vector<const Scene*>& scenes,
                                            std::uint64_t train_seed, int iteration) {
  std::vector<ImageLossInputs> inputs;
  inputs.reserve(scenes.size());
  for (std::size_t slot = 0; slot < scenes.size(); ++slot) {
    const AugmentationSpec spec = AugmentationSpec::weak(
        mix_seed(train_seed, static_cast<std::uint64_t>(iteration), slot, kStreamLabeledAug));
    AugmentedView view = apply_augmentation(*scenes[slot], spec);
    ImageLossInputs in;
    in.features = student.backbone(tape, view.image);
    for (std::size_t k = 0; k < view.boxes.size(); ++k) {
      in.gts.push_back(GtObj{scenes[slot]->annotations[k].class_id, view.boxes[k], true});
    }
    inputs.push_back(std::move(in));
  }
  return inputs;
}

double scalar_of(Tape& tape, Var v) { return tape.raw(v)[0]; }

}  // namespace

StepStats pretrain_step(TeacherStudentState& state, const std::vector<const Scene*>& labeled,
                        const PipelineConfig& cfg) {
  if (labeled.empty()) throw std::invalid_argument("pretrain_step: empty batch");
  if (state.stage != Stage::kPretrain) {
    throw std::logic_error("pretrain_step: state is not in the pretrain stage");
  }
  state.student.params().zero_grad();
  Tape tape;
  Rng rng(mix_seed(state.train_seed, static_cast<std::uint64_t>(state.iteration), kStreamSampling));

  auto inputs = labeled_inputs(tape, state.student, labeled, state.train_seed, state.iteration);
  LossParts parts = build_detection_losses(tape, state.student, inputs, /*eq7_reg=*/true, cfg,
                                           rng, /*train_iou_branch=*/true);
  Var sup = supervised_loss(parts.rpn_cls, parts.rpn_reg, parts.roi_cls, parts.roi_reg);
  if (state.student.config().iou_branch) sup = ad::add(sup, parts.iou_loss);

  tape.backward(sup);
  sgd_step(state.student.params(), state.opt_momentum, cfg.lr, cfg.sgd_momentum);
  state.iteration++;

  StepStats stats;
  stats.loss_sup = scalar_of(tape, sup);
  stats.loss_total = stats.loss_sup;
  stats.rpn_cls = scalar_of(tape, parts.rpn_cls);
  stats.rpn_reg = scalar_of(tape, parts.rpn_reg);
  stats.roi_cls = scalar_of(tape, parts.roi_cls);
  stats.roi_reg = scalar_of(tape, parts.roi_reg);
  return stats;
}

PseudoLabelSet generate_pseudo_labels(DetectorModel& teacher,
                                      const std::vector<AugmentedView>& weak_views,
                                      const FilterThresholds& thresholds,
                                      const PipelineConfig& cfg, std::uint64_t seed) {
  PseudoLabelSet out;
  out.cls_set.resize(weak_views.size());
  out.reg_set.resize(weak_views.size());
  out.candidates.resize(weak_views.size());

  for (std::size_t i = 0; i < weak_views.size(); ++i) {
    const AugmentedView& view = weak_views[i];
    std::vector<Detection> dets = teacher.detect(view.image, cfg.pseudo_score_thresh,
                                                 cfg.pseudo_nms_iou, cfg.eval_proposals,
                                                 cfg.rpn_nms_iou);
    Rng jitter_rng(mix_seed(seed, i, kStreamBoxJitter));
    for (const Detection& det : dets) {
      Detection unmapped = det;
      unmapped.box = unmap_box(det.box, view.transform);
      out.candidates[i].push_back(unmapped);
      if (!(det.score > thresholds.t_cls)) continue;  // strict: ties are excluded
      out.cls_set[i].push_back(unmapped);
      bool reg_ok = true;
      if (cfg.rupl_enabled) {
        switch (cfg.loc_quality) {
          case LocQuality::kUncertainty:
            reg_ok = det.sigma_mean < thresholds.t_reg;  // strict
            break;
          case LocQuality::kBoxJitter:
            reg_ok = box_jitter_consistency(teacher, view.image, det, cfg.box_jitter_samples,
                                            jitter_rng, cfg) < cfg.box_jitter_thresh;
            break;
          case LocQuality::kPredictedIou:
            reg_ok = predicted_iou_estimate(teacher, view.image, det, cfg) >
                     cfg.predicted_iou_thresh;
            break;
        }
      }
      if (reg_ok) out.reg_set[i].push_back(unmapped);
    }
  }
  return out;
}

namespace {

struct OclObject {
  int slot = 0;       // unlabeled batch position
  int det_index = 0;  // index within that image's candidate list
  Detection det;      // original-frame box
  Box jittered;       // original frame, after the +-6% perturbation
};

Array embed_on_scratch_tape(DetectorModel& model, const std::vector<Array>& images,
                            const std::vector<std::vector<Box>>& boxes_per_image) {
  Tape tape;
  std::vector<Var> hiddens;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (boxes_per_image[i].empty()) continue;
    Var feats = model.backbone(tape, images[i]);
    hiddens.push_back(model.roi_trunk(tape, feats, boxes_per_image[i]));
  }
  Var emb = model.embed(tape, ad::concat_rows(hiddens), /*bn_training=*/false);
  return tape.value(emb);
}

}  // namespace

StepStats mutual_step(TeacherStudentState& state, const std::vector<const Scene*>& labeled,
                      const std::vector<const Scene*>& unlabeled, const PipelineConfig& cfg) {
  if (labeled.empty() || unlabeled.empty()) {
    throw std::invalid_argument("mutual_step: empty batch");
  }
  if (state.stage != Stage::kMutual) {
    throw std::logic_error("mutual_step: state is not in the mutual stage");
  }
  const std::uint64_t ts = state.train_seed;
  const auto it = static_cast<std::uint64_t>(state.iteration);
  const double img_size = state.student.config().image_size;

  state.student.params().zero_grad();
  Tape tape;
  Rng rng(mix_seed(ts, it, kStreamSampling));

  // Supervised part (uncertainty-aware ROI regression on labeled data).
  auto sup_inputs = labeled_inputs(tape, state.student, labeled, ts, state.iteration);
  LossParts sup_parts = build_detection_losses(tape, state.student, sup_inputs, /*eq7_reg=*/true,
                                               cfg, rng, /*train_iou_branch=*/true);
  Var sup = supervised_loss(sup_parts.rpn_cls, sup_parts.rpn_reg, sup_parts.roi_cls,
                            sup_parts.roi_reg);
  if (state.student.config().iou_branch) sup = ad::add(sup, sup_parts.iou_loss);

  // Teacher pseudo labels from the weak views.
  const int n_unlab = static_cast<int>(unlabeled.size());
  std::vector<AugmentedView> weak_views, strong1, strong2;
  weak_views.reserve(static_cast<std::size_t>(n_unlab));
  for (int i = 0; i < n_unlab; ++i) {
    weak_views.push_back(apply_augmentation(
        *unlabeled[static_cast<std::size_t>(i)],
        AugmentationSpec::weak(mix_seed(ts, it, static_cast<std::uint64_t>(i), kStreamWeakAug))));
    strong1.push_back(apply_augmentation(
        *unlabeled[static_cast<std::size_t>(i)],
        AugmentationSpec::strong(mix_seed(ts, it, static_cast<std::uint64_t>(i), kStreamStrong1))));
    strong2.push_back(apply_augmentation(
        *unlabeled[static_cast<std::size_t>(i)],
        AugmentationSpec::strong(mix_seed(ts, it, static_cast<std::uint64_t>(i), kStreamStrong2))));
  }
  PseudoLabelSet pseudo = generate_pseudo_labels(state.teacher, weak_views, cfg.thresholds, cfg,
                                                 mix_seed(ts, it, kStreamBoxJitter));
  if (pseudo.total_reg() > pseudo.total_cls()) {
    throw std::logic_error("mutual_step: regression set exceeds classification set");
  }

  // Student backbone features on the first strong view, created lazily:
  // reused by both the pseudo-label losses and the contrastive pass.
  std::vector<Var> feats1(static_cast<std::size_t>(n_unlab));
  std::vector<Var> feats2(static_cast<std::size_t>(n_unlab));
  auto student_feats1 = [&](int i) -> Var {
    auto& f = feats1[static_cast<std::size_t>(i)];
    if (!f.defined()) f = state.student.backbone(tape, strong1[static_cast<std::size_t>(i)].image);
    return f;
  };
  auto student_feats2 = [&](int i) -> Var {
    auto& f = feats2[static_cast<std::size_t>(i)];
    if (!f.defined()) f = state.student.backbone(tape, strong2[static_cast<std::size_t>(i)].image);
    return f;
  };

  // Unsupervised detection losses on the first strong view. Classification
  // targets come from cls_set; regression targets only from reg_set members.
  std::vector<ImageLossInputs> unsup_inputs;
  for (int i = 0; i < n_unlab; ++i) {
    const auto& cls = pseudo.cls_set[static_cast<std::size_t>(i)];
    if (cls.empty()) continue;
    const auto& reg = pseudo.reg_set[static_cast<std::size_t>(i)];
    ImageLossInputs in;
    in.features = student_feats1(i);
    for (const Detection& det : cls) {
      const bool reg_ok =
          std::any_of(reg.begin(), reg.end(), [&](const Detection& r) {
            return r.class_id == det.class_id && r.score == det.score &&
                   r.box.x1 == det.box.x1 && r.box.y1 == det.box.y1 && r.box.x2 == det.box.x2 &&
                   r.box.y2 == det.box.y2;
          });
      in.gts.push_back(GtObj{det.class_id,
                             map_box(det.box, strong1[static_cast<std::size_t>(i)].transform),
                             reg_ok});
    }
    unsup_inputs.push_back(std::move(in));
  }
  LossParts unsup_parts = build_detection_losses(tape, state.student, unsup_inputs,
                                                 /*eq7_reg=*/false, cfg, rng,
                                                 /*train_iou_branch=*/false);
  Var unsup = supervised_loss(unsup_parts.rpn_cls, unsup_parts.rpn_reg, unsup_parts.roi_cls,
                              unsup_parts.roi_reg);

  // Object-wise contrastive term over the teacher's weak-view detections.
  Var ocl = tape.constant(0.0);
  bool ocl_degenerate = true;
  if (cfg.ocl_enabled) {
    std::vector<OclObject> objects;
    for (int i = 0; i < n_unlab; ++i) {
      const auto& cands = pseudo.candidates[static_cast<std::size_t>(i)];
      for (std::size_t d = 0; d < cands.size(); ++d) {
        objects.push_back(OclObject{i, static_cast<int>(d), cands[d], Box{}});
      }
    }
    if (static_cast<int>(objects.size()) > cfg.ocl_max_objects) {
      std::stable_sort(objects.begin(), objects.end(),
                       [](const OclObject& a, const OclObject& b) {
                         return a.det.score > b.det.score;
                       });
      objects.resize(static_cast<std::size_t>(cfg.ocl_max_objects));
      std::stable_sort(objects.begin(), objects.end(),
                       [](const OclObject& a, const OclObject& b) {
                         if (a.slot != b.slot) return a.slot < b.slot;
                         return a.det_index < b.det_index;
                       });
    }
    if (objects.size() >= 2) {
      std::vector<std::vector<Box>> boxes1(static_cast<std::size_t>(n_unlab));
      std::vector<std::vector<Box>> boxes2(static_cast<std::size_t>(n_unlab));
      std::vector<double> scores;
      std::vector<int> classes;
      std::vector<Array> strong1_images, strong2_images;
      for (auto& obj : objects) {
        Rng jr(mix_seed(ts, it, kStreamOclJitter,
                        static_cast<std::uint64_t>(obj.slot * 4096 + obj.det_index)));
        obj.jittered =
            jitter_box(obj.det.box, -cfg.box_jitter_frac, cfg.box_jitter_frac, jr, img_size);
        boxes1[static_cast<std::size_t>(obj.slot)].push_back(
            map_box(obj.jittered, strong1[static_cast<std::size_t>(obj.slot)].transform));
        boxes2[static_cast<std::size_t>(obj.slot)].push_back(
            map_box(obj.jittered, strong2[static_cast<std::size_t>(obj.slot)].transform));
        scores.push_back(obj.det.score);
        classes.push_back(obj.det.class_id);
      }
      for (int i = 0; i < n_unlab; ++i) {
        strong1_images.push_back(strong1[static_cast<std::size_t>(i)].image);
        strong2_images.push_back(strong2[static_cast<std::size_t>(i)].image);
      }

      // Teacher embeddings on scratch tapes (no gradient enters the loss
      // graph); student embeddings on the step tape with batch statistics.
      const Array t_emb1 = embed_on_scratch_tape(state.teacher, strong1_images, boxes1);
      const Array t_emb2 = embed_on_scratch_tape(state.teacher, strong2_images, boxes2);

      std::vector<Var> s1_hidden, s2_hidden;
      for (int i = 0; i < n_unlab; ++i) {
        if (boxes1[static_cast<std::size_t>(i)].empty()) continue;
        s1_hidden.push_back(state.student.roi_trunk(tape, student_feats1(i),
                                                    boxes1[static_cast<std::size_t>(i)]));
        s2_hidden.push_back(state.student.roi_trunk(tape, student_feats2(i),
                                                    boxes2[static_cast<std::size_t>(i)]));
      }
      Var s_emb1 = state.student.embed(tape, ad::concat_rows(s1_hidden), /*bn_training=*/true);
      Var s_emb2 = state.student.embed(tape, ad::concat_rows(s2_hidden), /*bn_training=*/true);

      const PairingMatrix pairing = pairing_weights(scores, classes, cfg.thresholds.t_cont);
      RoiEmbeddingBatch view_a{/*student=*/s_emb2, /*teacher=*/tape.constant(t_emb1), scores,
                               classes};
      RoiEmbeddingBatch view_b{/*student=*/s_emb1, /*teacher=*/tape.constant(t_emb2), scores,
                               classes};
      ContrastiveResult res = ocl_loss(view_a, view_b, pairing, cfg.thresholds.tau);
      ocl = res.loss;
      ocl_degenerate = res.degenerate;
    }
  }

  Var total = total_loss(sup, unsup, ocl, cfg.lambda_unsup, cfg.lambda_ocl);
  tape.backward(total);
  sgd_step(state.student.params(), state.opt_momentum, cfg.lr, cfg.sgd_momentum);
  ema_update(state);
  state.iteration++;

  StepStats stats;
  stats.loss_total = scalar_of(tape, total);
  stats.loss_sup = scalar_of(tape, sup);
  stats.loss_unsup = scalar_of(tape, unsup);
  stats.loss_ocl = scalar_of(tape, ocl);
  stats.rpn_cls = scalar_of(tape, sup_parts.rpn_cls);
  stats.rpn_reg = scalar_of(tape, sup_parts.rpn_reg);
  stats.roi_cls = scalar_of(tape, sup_parts.roi_cls);
  stats.roi_reg = scalar_of(tape, sup_parts.roi_reg);
  stats.n_cls_labels = pseudo.total_cls();
  stats.n_reg_labels = pseudo.total_reg();
  stats.ocl_degenerate = ocl_degenerate;
  double sigma_acc = 0.0;
  int sigma_n = 0;
  for (const auto& dets : pseudo.cls_set) {
    for (const auto& d : dets) {
      sigma_acc += d.sigma_mean;
      sigma_n++;
    }
  }
  stats.mean_sigma = sigma_n > 0 ? sigma_acc / sigma_n : 0.0;
  return stats;
}

double box_jitter_consistency(DetectorModel& teacher, const Array& image, const Detection& det,
                              int num_samples, Rng& rng, const PipelineConfig& cfg) {
  if (num_samples < 2) {
    throw std::invalid_argument("box_jitter_consistency: need at least 2 samples");
  }
  const double img_size = teacher.config().image_size;
  std::vector<Box> jittered;
  jittered.reserve(static_cast<std::size_t>(num_samples));
  for (int k = 0; k < num_samples; ++k) {
    jittered.push_back(
        jitter_box(det.box, -cfg.box_jitter_frac, cfg.box_jitter_frac, rng, img_size));
  }
  Tape tape;
  Var feats = teacher.backbone(tape, image);
  DetectorModel::RoiOut roi = teacher.roi_head(tape, feats, jittered, nullptr);
  const Array deltas = tape.value(roi.deltas);

  std::vector<std::vector<double>> refined(4, std::vector<double>(static_cast<std::size_t>(num_samples)));
  for (int k = 0; k < num_samples; ++k) {
    const Box r = decode_box(jittered[static_cast<std::size_t>(k)],
                             &deltas.data[static_cast<std::size_t>(k * 4)]);
    refined[0][static_cast<std::size_t>(k)] = r.x1;
    refined[1][static_cast<std::size_t>(k)] = r.y1;
    refined[2][static_cast<std::size_t>(k)] = r.x2;
    refined[3][static_cast<std::size_t>(k)] = r.y2;
  }
  const double norm[4] = {det.box.width(), det.box.height(), det.box.width(), det.box.height()};
  double acc = 0.0;
  for (int b = 0; b < 4; ++b) {
    double mu = 0.0;
    for (int k = 0; k < num_samples; ++k) mu += refined[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)];
    mu /= num_samples;
    double var = 0.0;
    for (int k = 0; k < num_samples; ++k) {
      const double d = refined[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)] - mu;
      var += d * d;
    }
    var /= num_samples;
    acc += var / (norm[b] * norm[b]);
  }
  return acc / 4.0;
}

double predicted_iou_estimate(DetectorModel& teacher, const Array& image, const Detection& det,
                              const PipelineConfig& cfg) {
  (void)cfg;
  if (!teacher.config().iou_branch) {
    throw std::logic_error("predicted_iou_estimate: iou branch is not enabled");
  }
  Tape tape;
  Var feats = teacher.backbone(tape, image);
  DetectorModel::RoiOut roi = teacher.roi_head(tape, feats, {det.box}, nullptr);
  const Array logits = tape.value(roi.iou_logits);
  const double x = logits.at2(0, det.class_id);
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace deskdet
