#include "deskdet/losses.hpp"

#include <stdexcept>
#include <string>

namespace deskdet {

using ad::Var;

PairingMatrix pairing_weights(const std::vector<double>& scores,
                              const std::vector<int>& classes, double t_cont) {
  if (scores.size() != classes.size()) {
    throw std::invalid_argument("pairing_weights: scores/classes length mismatch");
  }
  const int n = static_cast<int>(scores.size());
  PairingMatrix pm;
  pm.size = n;
  pm.weights.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
  pm.positive_counts.assign(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double w = 0.0;
      if (i == j) {
        w = 1.0;
      } else if (classes[static_cast<std::size_t>(i)] == classes[static_cast<std::size_t>(j)] &&
                 scores[static_cast<std::size_t>(i)] > t_cont &&
                 scores[static_cast<std::size_t>(j)] > t_cont) {
        w = scores[static_cast<std::size_t>(i)] * scores[static_cast<std::size_t>(j)];
      }
      pm.weights[static_cast<std::size_t>(i * n + j)] = w;
      if (w > 0.0) pm.positive_counts[static_cast<std::size_t>(i)]++;
    }
  }
  return pm;
}

namespace {

std::vector<int> checked_targets(const Shape& logits_shape, const std::vector<int>& targets,
                                 const char* who) {
  if (logits_shape.size() != 2) {
    throw std::invalid_argument(std::string(who) + ": logits must be BxK");
  }
  if (static_cast<int>(targets.size()) != logits_shape[0]) {
    throw std::invalid_argument(std::string(who) + ": batch size mismatch");
  }
  for (int t : targets) {
    if (t < 0 || t >= logits_shape[1]) {
      throw std::invalid_argument(std::string(who) + ": target class " + std::to_string(t) +
                                  " outside [0," + std::to_string(logits_shape[1]) + ")");
    }
  }
  return targets;
}

}  // namespace

Var cross_entropy(Var logits, const std::vector<int>& targets) {
  const auto idx = checked_targets(logits.shape(), targets, "cross_entropy");
  Var ls = ad::log_softmax(logits);
  Var picked = ad::take_per_row(ls, idx, 1);
  return ad::negate(ad::mean(picked));
}

Var focal_loss(Var logits, const std::vector<int>& targets, double gamma, double alpha) {
  if (gamma < 0.0) throw std::invalid_argument("focal_loss: gamma must be >= 0");
  if (alpha <= 0.0 || alpha > 1.0) throw std::invalid_argument("focal_loss: alpha in (0,1]");
  const auto idx = checked_targets(logits.shape(), targets, "focal_loss");
  ad::Tape& t = *logits.tape;
  Var log_pt = ad::take_per_row(ad::log_softmax(logits), idx, 1);
  Var pt = ad::take_per_row(ad::softmax(logits), idx, 1);
  Var one = t.constant(1.0);
  Var focal_weight = ad::pow_const(ad::sub(one, pt), gamma);
  Var per_sample = ad::mul(focal_weight, log_pt);
  return ad::negate(ad::mean(per_sample)) * alpha;
}

Var smooth_l1(Var pred, Var target) {
  if (pred.shape() != target.shape()) {
    throw ad::TapeError("smooth_l1: shape mismatch " + shape_str(pred.shape()) + " vs " +
                        shape_str(target.shape()));
  }
  return ad::mean(ad::huber(ad::sub(pred, target)));
}

Var uncertainty_reg_loss(Var pred, Var target, Var log_sigma_sq, double lambda_unc) {
  if (pred.shape() != target.shape() || pred.shape() != log_sigma_sq.shape()) {
    throw ad::TapeError("uncertainty_reg_loss: shape mismatch");
  }
  if (lambda_unc < 0.0) throw std::invalid_argument("uncertainty_reg_loss: lambda_unc >= 0");
  Var alpha = ad::clamp(log_sigma_sq, -10.0, 10.0);
  Var residual_term = ad::mul(ad::exp(ad::negate(alpha)), ad::huber(ad::sub(pred, target)));
  Var penalty = alpha * lambda_unc;
  return ad::mean(ad::add(residual_term, penalty));
}

ContrastiveResult contrastive_loss(const RoiEmbeddingBatch& batch, const PairingMatrix& pairing,
                                   double tau) {
  if (tau <= 0.0) throw std::invalid_argument("contrastive_loss: tau must be positive");
  if (pairing.size != batch.size()) {
    throw std::invalid_argument("contrastive_loss: pairing size " + std::to_string(pairing.size) +
                                " != batch size " + std::to_string(batch.size()));
  }
  ad::Tape& t = *batch.student.tape;
  const int n = batch.size();
  if (n < 2) {
    // The denominator sums over other objects and is empty here.
    return {t.constant(0.0), true};
  }

  Var sims = ad::matmul(batch.student, batch.teacher, false, true) * (1.0 / tau);

  // Mask the diagonal out of the denominator with a large negative constant;
  // exp() underflows it to zero inside the row-wise log-sum-exp.
  Array mask = Array::zeros({n, n});
  for (int i = 0; i < n; ++i) mask.at2(i, i) = -1e30;
  Var denom = ad::logsumexp_rows(ad::add(sims, t.constant(mask)));

  Array w(Shape{n, n}, pairing.weights);
  Array row_weight_sum = Array::zeros({n});
  Array inv_counts = Array::zeros({n});
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += pairing.at(i, j);
    row_weight_sum[i] = s;
    inv_counts[i] = 1.0 / static_cast<double>(pairing.positive_counts[static_cast<std::size_t>(i)]);
  }

  // sum_m w[n][m] * (sims[n][m] - denom[n]), row-normalized by positive count.
  Var weighted = ad::sum(ad::mul(t.constant(w), sims), 1);
  Var weighted_denom = ad::mul(denom, t.constant(row_weight_sum));
  Var per_object = ad::mul(ad::sub(weighted, weighted_denom), t.constant(inv_counts));
  return {ad::negate(ad::mean(per_object)), false};
}

ContrastiveResult ocl_loss(const RoiEmbeddingBatch& view1, const RoiEmbeddingBatch& view2,
                           const PairingMatrix& pairing, double tau) {
  if (pairing.size != view1.size() || pairing.size != view2.size()) {
    throw std::invalid_argument("ocl_loss: pairing size mismatch with a view");
  }
  ContrastiveResult a = contrastive_loss(view1, pairing, tau);
  ContrastiveResult b = contrastive_loss(view2, pairing, tau);
  return {ad::add(a.loss, b.loss) * 0.5, a.degenerate || b.degenerate};
}

Var supervised_loss(Var rpn_cls, Var rpn_reg, Var roi_cls, Var roi_reg) {
  return ad::add(ad::add(rpn_cls, rpn_reg), ad::add(roi_cls, roi_reg));
}

Var total_loss(Var sup, Var unsup, Var ocl, double lambda_unsup, double lambda_ocl) {
  if (lambda_unsup < 0.0 || lambda_ocl < 0.0) {
    throw std::invalid_argument("total_loss: lambdas must be >= 0");
  }
  return ad::add(sup, ad::add(unsup * lambda_unsup, ocl * lambda_ocl));
}

}  // namespace deskdet
