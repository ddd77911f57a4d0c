#include "deskdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace deskdet {

using ad::Tape;
using ad::Var;

std::vector<Box> make_anchors(const DetectorConfig& cfg) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(cfg.num_anchors()));
  const double stride = cfg.stride();
  for (int gy = 0; gy < cfg.grid; ++gy) {
    for (int gx = 0; gx < cfg.grid; ++gx) {
      const double cx = (gx + 0.5) * stride;
      const double cy = (gy + 0.5) * stride;
      for (double s : cfg.anchor_sizes) {
        for (double a : cfg.anchor_aspects) {
          const double w = s * std::sqrt(a);
          const double h = s / std::sqrt(a);
          anchors.push_back(Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
        }
      }
    }
  }
  return anchors;
}

std::array<double, 4> encode_box(const Box& reference, const Box& target) {
  const double w = reference.width(), h = reference.height();
  return {(target.x1 - reference.x1) / w, (target.y1 - reference.y1) / h,
          (target.x2 - reference.x2) / w, (target.y2 - reference.y2) / h};
}

Box decode_box(const Box& reference, const double* deltas) {
  const double w = reference.width(), h = reference.height();
  return Box{reference.x1 + deltas[0] * w, reference.y1 + deltas[1] * h,
             reference.x2 + deltas[2] * w, reference.y2 + deltas[3] * h};
}

Box jitter_box(const Box& box, double lo_frac, double hi_frac, Rng& rng, double image_size) {
  const double w = box.width(), h = box.height();
  Box out{box.x1 + rng.uniform(lo_frac, hi_frac) * w, box.y1 + rng.uniform(lo_frac, hi_frac) * h,
          box.x2 + rng.uniform(lo_frac, hi_frac) * w, box.y2 + rng.uniform(lo_frac, hi_frac) * h};
  out = clip_box(out, image_size, image_size);
  if (out.x2 - out.x1 < 1.0) {
    if (out.x1 + 1.0 <= image_size) out.x2 = out.x1 + 1.0;
    else out.x1 = out.x2 - 1.0;
  }
  if (out.y2 - out.y1 < 1.0) {
    if (out.y1 + 1.0 <= image_size) out.y2 = out.y1 + 1.0;
    else out.y1 = out.y2 - 1.0;
  }
  return out;
}

namespace {

Array conv_init(Rng& rng, int k, int cin, int cout) {
  Array w({k, k, cin, cout});
  const double std = std::sqrt(2.0 / (k * k * cin));
  for (double& v : w.data) v = rng.normal(0.0, std);
  return w;
}

Array fc_init(Rng& rng, int in, int out) {
  Array w({in, out});
  const double std = std::sqrt(2.0 / in);
  for (double& v : w.data) v = rng.normal(0.0, std);
  return w;
}

}  // namespace

DetectorModel::DetectorModel(const DetectorConfig& cfg, Role role, std::uint64_t init_seed)
    : cfg_(cfg), role_(role), anchors_(make_anchors(cfg)) {
  Rng rng(mix_seed(init_seed, 0xde7ec70aULL));
  const int k1 = cfg.num_classes + 1;
  const int apc = cfg.anchors_per_cell();
  const int pooled = cfg.roi_pool_size * cfg.roi_pool_size * cfg.feat_channels;

  params_.add("backbone.conv1.w", conv_init(rng, 3, 3, cfg.stem_channels));
  params_.add("backbone.conv1.b", Array::zeros({cfg.stem_channels}));
  params_.add("backbone.conv2.w", conv_init(rng, 3, cfg.stem_channels, cfg.feat_channels));
  params_.add("backbone.conv2.b", Array::zeros({cfg.feat_channels}));

  params_.add("rpn.obj.w", fc_init(rng, cfg.feat_channels, apc * 2));
  params_.add("rpn.obj.b", Array::zeros({apc * 2}));
  params_.add("rpn.reg.w", fc_init(rng, cfg.feat_channels, apc * 4));
  params_.add("rpn.reg.b", Array::zeros({apc * 4}));

  params_.add("roi.fc1.w", fc_init(rng, pooled, cfg.hidden_dim));
  params_.add("roi.fc1.b", Array::zeros({cfg.hidden_dim}));
  params_.add("roi.cls.w", fc_init(rng, cfg.hidden_dim, k1));
  params_.add("roi.cls.b", Array::zeros({k1}));
  params_.add("roi.reg.w", fc_init(rng, cfg.hidden_dim, 4));
  params_.add("roi.reg.b", Array::zeros({4}));
  params_.add("roi.unc.w", fc_init(rng, cfg.hidden_dim, 4 * k1));
  params_.add("roi.unc.b", Array::zeros({4 * k1}));
  if (cfg.iou_branch) {
    params_.add("roi.iou.w", fc_init(rng, cfg.hidden_dim, k1));
    params_.add("roi.iou.b", Array::zeros({k1}));
  }

  params_.add("proj.fc1.w", fc_init(rng, cfg.hidden_dim, cfg.proj_hidden));
  params_.add("proj.bn1.gamma", Array::full({cfg.proj_hidden}, 1.0));
  params_.add("proj.bn1.beta", Array::zeros({cfg.proj_hidden}));
  params_.add("proj.bn1.run_mean", Array::zeros({cfg.proj_hidden}), /*trainable=*/false);
  params_.add("proj.bn1.run_var", Array::full({cfg.proj_hidden}, 1.0), /*trainable=*/false);
  params_.add("proj.fc2.w", fc_init(rng, cfg.proj_hidden, cfg.embed_dim));
  params_.add("proj.bn2.run_mean", Array::zeros({cfg.embed_dim}), /*trainable=*/false);
  params_.add("proj.bn2.run_var", Array::full({cfg.embed_dim}, 1.0), /*trainable=*/false);

  if (role == Role::kStudent) {
    params_.add("pred.fc1.w", fc_init(rng, cfg.embed_dim, cfg.proj_hidden));
    params_.add("pred.bn1.gamma", Array::full({cfg.proj_hidden}, 1.0));
    params_.add("pred.bn1.beta", Array::zeros({cfg.proj_hidden}));
    params_.add("pred.bn1.run_mean", Array::zeros({cfg.proj_hidden}), /*trainable=*/false);
    params_.add("pred.bn1.run_var", Array::full({cfg.proj_hidden}, 1.0), /*trainable=*/false);
    params_.add("pred.fc2.w", fc_init(rng, cfg.proj_hidden, cfg.embed_dim));
  }
}

void DetectorModel::copy_shared_from(const DetectorModel& src) {
  for (Parameter* p : params_.all()) {
    const Parameter* s = src.params().find(p->name);
    if (!s) throw std::runtime_error("copy_shared_from: source lacks parameter " + p->name);
    if (!same_shape(p->value.shape, s->value.shape)) {
      throw std::runtime_error("copy_shared_from: shape mismatch at " + p->name);
    }
    p->value.data = s->value.data;
  }
}

Var DetectorModel::backbone(Tape& tape, const Array& image) {
  auto& ps = params_;
  Var x = tape.leaf(image);
  x = ad::relu(ad::conv2d(x, tape.param(ps.get("backbone.conv1.w")),
                          tape.param(ps.get("backbone.conv1.b")), 1));
  x = ad::avg_pool2d(x, 4);
  x = ad::relu(ad::conv2d(x, tape.param(ps.get("backbone.conv2.w")),
                          tape.param(ps.get("backbone.conv2.b")), 1));
  x = ad::avg_pool2d(x, 2);
  return x;
}

DetectorModel::RpnOut DetectorModel::rpn_head(Tape& tape, Var features) {
  auto& ps = params_;
  const int cells = cfg_.grid * cfg_.grid;
  const int apc = cfg_.anchors_per_cell();
  Var flat = ad::reshape(features, {cells, cfg_.feat_channels});
  Var obj = ad::add_rowvec(ad::matmul(flat, tape.param(ps.get("rpn.obj.w"))),
                           tape.param(ps.get("rpn.obj.b")));
  Var reg = ad::add_rowvec(ad::matmul(flat, tape.param(ps.get("rpn.reg.w"))),
                           tape.param(ps.get("rpn.reg.b")));
  return {ad::reshape(obj, {cells * apc, 2}), ad::reshape(reg, {cells * apc, 4})};
}

DetectorModel::Proposals DetectorModel::propose(const Array& obj_logits, const Array& deltas,
                                                int top_k, double nms_iou) const {
  const int n = static_cast<int>(anchors_.size());
  std::vector<Box> boxes;
  std::vector<double> scores;
  std::vector<int> anchor_of;
  boxes.reserve(static_cast<std::size_t>(n));
  const double img = cfg_.image_size;
  for (int i = 0; i < n; ++i) {
    const double l0 = obj_logits.at2(i, 0), l1 = obj_logits.at2(i, 1);
    const double m = std::max(l0, l1);
    const double p1 = std::exp(l1 - m) / (std::exp(l0 - m) + std::exp(l1 - m));
    Box b = decode_box(anchors_[static_cast<std::size_t>(i)],
                       &deltas.data[static_cast<std::size_t>(i * 4)]);
    b = clip_box(b, img, img);
    if (!b.valid()) continue;
    boxes.push_back(b);
    scores.push_back(p1);
    anchor_of.push_back(i);
  }
  const std::vector<int> kept = nms(boxes, scores, nms_iou);
  Proposals out;
  for (int idx : kept) {
    if (static_cast<int>(out.boxes.size()) >= top_k) break;
    out.boxes.push_back(boxes[static_cast<std::size_t>(idx)]);
    out.scores.push_back(scores[static_cast<std::size_t>(idx)]);
    (void)anchor_of;
  }
  return out;
}

Var DetectorModel::roi_trunk(Tape& tape, Var features, const std::vector<Box>& boxes,
                             std::vector<char>* degenerate) {
  auto& ps = params_;
  const int n = static_cast<int>(boxes.size());
  Var pooled = ad::roi_pool(features, boxes, cfg_.roi_pool_size, cfg_.stride(), degenerate);
  const int pooled_dim = cfg_.roi_pool_size * cfg_.roi_pool_size * cfg_.feat_channels;
  Var flat = ad::reshape(pooled, {n, pooled_dim});
  return ad::relu(ad::add_rowvec(ad::matmul(flat, tape.param(ps.get("roi.fc1.w"))),
                                 tape.param(ps.get("roi.fc1.b"))));
}

DetectorModel::RoiOut DetectorModel::roi_head(Tape& tape, Var features,
                                              const std::vector<Box>& boxes,
                                              const std::vector<int>* readout_classes) {
  auto& ps = params_;
  const int n = static_cast<int>(boxes.size());
  const int k1 = cfg_.num_classes + 1;
  RoiOut out;
  out.hidden = roi_trunk(tape, features, boxes, &out.degenerate);
  out.cls_logits = ad::add_rowvec(ad::matmul(out.hidden, tape.param(ps.get("roi.cls.w"))),
                                  tape.param(ps.get("roi.cls.b")));
  out.deltas = ad::add_rowvec(ad::matmul(out.hidden, tape.param(ps.get("roi.reg.w"))),
                              tape.param(ps.get("roi.reg.b")));
  Var alpha_full =
      ad::clamp(ad::add_rowvec(ad::matmul(out.hidden, tape.param(ps.get("roi.unc.w"))),
                               tape.param(ps.get("roi.unc.b"))),
                -cfg_.alpha_clamp, cfg_.alpha_clamp);
  if (readout_classes) {
    if (static_cast<int>(readout_classes->size()) != n) {
      throw ad::TapeError("roi_head: readout class count != box count");
    }
    std::vector<int> idx(static_cast<std::size_t>(n) * 4);
    for (int i = 0; i < n; ++i) {
      const int c = (*readout_classes)[static_cast<std::size_t>(i)];
      if (c < 0 || c >= k1) throw ad::TapeError("roi_head: readout class out of range");
      for (int j = 0; j < 4; ++j) idx[static_cast<std::size_t>(i * 4 + j)] = 4 * c + j;
    }
    out.alpha = ad::take_per_row(alpha_full, idx, 4);
  } else {
    out.alpha = alpha_full;
  }
  if (cfg_.iou_branch) {
    out.iou_logits = ad::add_rowvec(ad::matmul(out.hidden, tape.param(ps.get("roi.iou.w"))),
                                    tape.param(ps.get("roi.iou.b")));
  }
  return out;
}

Var DetectorModel::embed(Tape& tape, Var hidden, bool bn_training) {
  auto& ps = params_;
  Var x = ad::matmul(hidden, tape.param(ps.get("proj.fc1.w")));
  x = ad::batch_norm(x, tape.param(ps.get("proj.bn1.gamma")), tape.param(ps.get("proj.bn1.beta")),
                     &ps.get("proj.bn1.run_mean"), &ps.get("proj.bn1.run_var"), bn_training,
                     cfg_.bn_momentum, cfg_.bn_eps);
  x = ad::relu(x);
  x = ad::matmul(x, tape.param(ps.get("proj.fc2.w")));
  x = ad::batch_norm(x, Var{}, Var{}, &ps.get("proj.bn2.run_mean"), &ps.get("proj.bn2.run_var"),
                     bn_training, cfg_.bn_momentum, cfg_.bn_eps);
  if (role_ == Role::kStudent) {
    Var y = ad::matmul(x, tape.param(ps.get("pred.fc1.w")));
    y = ad::batch_norm(y, tape.param(ps.get("pred.bn1.gamma")),
                       tape.param(ps.get("pred.bn1.beta")), &ps.get("pred.bn1.run_mean"),
                       &ps.get("pred.bn1.run_var"), bn_training, cfg_.bn_momentum, cfg_.bn_eps);
    y = ad::relu(y);
    x = ad::matmul(y, tape.param(ps.get("pred.fc2.w")));
  }
  x = ad::l2_normalize_rows(x);
  if (role_ == Role::kTeacher) x = ad::detach(x);
  return x;
}

std::vector<Detection> decode_and_nms(const Array& cls_logits, const Array& deltas,
                                      const Array& alpha_full,
                                      const std::vector<Box>& proposals,
                                      const DetectorConfig& cfg, double score_thresh,
                                      double nms_iou) {
  const int n = static_cast<int>(proposals.size());
  const int k1 = cfg.num_classes + 1;
  const double img = cfg.image_size;

  std::vector<std::vector<double>> probs(static_cast<std::size_t>(n));
  std::vector<Box> decoded(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double m = cls_logits.at2(i, 0);
    for (int c = 1; c < k1; ++c) m = std::max(m, cls_logits.at2(i, c));
    double z = 0.0;
    auto& p = probs[static_cast<std::size_t>(i)];
    p.resize(static_cast<std::size_t>(k1));
    for (int c = 0; c < k1; ++c) {
      p[static_cast<std::size_t>(c)] = std::exp(cls_logits.at2(i, c) - m);
      z += p[static_cast<std::size_t>(c)];
    }
    for (double& v : p) v /= z;
    decoded[static_cast<std::size_t>(i)] =
        clip_box(decode_box(proposals[static_cast<std::size_t>(i)],
                            &deltas.data[static_cast<std::size_t>(i * 4)]),
                 img, img);
  }

  std::vector<Detection> out;
  for (int c = 0; c < cfg.num_classes; ++c) {
    std::vector<Box> cand_boxes;
    std::vector<double> cand_scores;
    std::vector<int> cand_rows;
    for (int i = 0; i < n; ++i) {
      const double s = probs[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
      if (s <= score_thresh) continue;
      if (!decoded[static_cast<std::size_t>(i)].valid()) continue;
      cand_boxes.push_back(decoded[static_cast<std::size_t>(i)]);
      cand_scores.push_back(s);
      cand_rows.push_back(i);
    }
    for (int keep : nms(cand_boxes, cand_scores, nms_iou)) {
      Detection det;
      det.class_id = c;
      det.score = cand_scores[static_cast<std::size_t>(keep)];
      det.box = cand_boxes[static_cast<std::size_t>(keep)];
      const int row = cand_rows[static_cast<std::size_t>(keep)];
      double acc = 0.0;
      for (int j = 0; j < 4; ++j) {
        const double a = alpha_full.at2(row, 4 * c + j);
        det.sigma[static_cast<std::size_t>(j)] = std::exp(a / 2.0);
        acc += det.sigma[static_cast<std::size_t>(j)];
      }
      det.sigma_mean = acc / 4.0;
      out.push_back(det);
    }
  }
  return out;
}

std::vector<Detection> DetectorModel::detect(const Array& image, double score_thresh,
                                             double nms_iou, int top_k_proposals,
                                             double rpn_nms_iou) {
  Tape tape;
  Var feats = backbone(tape, image);
  RpnOut rpn = rpn_head(tape, feats);
  Proposals props = propose(tape.value(rpn.obj_logits), tape.value(rpn.deltas), top_k_proposals,
                            rpn_nms_iou);
  if (props.boxes.empty()) return {};
  RoiOut roi = roi_head(tape, feats, props.boxes, nullptr);
  return decode_and_nms(tape.value(roi.cls_logits), tape.value(roi.deltas),
                        tape.value(roi.alpha), props.boxes, cfg_, score_thresh, nms_iou);
}

}  // namespace deskdet
