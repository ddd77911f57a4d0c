#pragma once

#include <vector>

#include "deskdet/tape.hpp"

namespace deskdet {

/// Confidence-aware pairing weights over one batch of ROI objects:
///   w[n][n] = 1
///   w[n][m] = p_n * p_m   when the predicted classes match and both scores
///                         exceed the contrastive threshold
///   w[n][m] = 0           otherwise
/// Symmetric with a unit diagonal; positive_counts[n] counts entries > 0 in
/// row n (the diagonal always counts).
struct PairingMatrix {
  int size = 0;
  std::vector<double> weights;       // row-major size x size
  std::vector<int> positive_counts;  // per row

  double at(int n, int m) const { return weights[static_cast<std::size_t>(n * size + m)]; }
};

PairingMatrix pairing_weights(const std::vector<double>& scores,
                              const std::vector<int>& classes, double t_cont);

/// One view's ROI embeddings. Teacher rows must be detached; both matrices
/// are N x D with unit-norm rows.
struct RoiEmbeddingBatch {
  ad::Var student;
  ad::Var teacher;
  std::vector<double> scores;
  std::vector<int> classes;

  int size() const { return static_cast<int>(scores.size()); }
};

struct ContrastiveResult {
  ad::Var loss;
  bool degenerate = false;  // batches with fewer than 2 objects yield loss 0
};

/// Mean negative log-softmax of the target class.
ad::Var cross_entropy(ad::Var logits, const std::vector<int>& targets);

/// Mean of -alpha * (1 - p_t)^gamma * log p_t over samples.
ad::Var focal_loss(ad::Var logits, const std::vector<int>& targets, double gamma, double alpha);

/// Mean elementwise smooth-L1 with transition at |x| = 1.
ad::Var smooth_l1(ad::Var pred, ad::Var target);

/// Uncertainty-aware regression loss, parametrized by alpha = log(sigma^2):
/// mean over elements of exp(-alpha) * smoothL1(pred - target) + lambda_unc * alpha.
/// alpha is clamped to [-10, 10] before use.
ad::Var uncertainty_reg_loss(ad::Var pred, ad::Var target, ad::Var log_sigma_sq,
                             double lambda_unc);

/// Object-wise contrastive loss for one view direction. Outer mean over
/// objects, each row normalized by its positive-pair count; the denominator
/// sums exp(sim/tau) over all other objects (same-class terms included).
ContrastiveResult contrastive_loss(const RoiEmbeddingBatch& batch, const PairingMatrix& pairing,
                                   double tau);

/// Symmetrized form: 0.5 * (L(view1) + L(view2)).
ContrastiveResult ocl_loss(const RoiEmbeddingBatch& view1, const RoiEmbeddingBatch& view2,
                           const PairingMatrix& pairing, double tau);

/// Unweighted sum of the four detection loss terms.
ad::Var supervised_loss(ad::Var rpn_cls, ad::Var rpn_reg, ad::Var roi_cls, ad::Var roi_reg);

/// sup + lambda_unsup * unsup + lambda_ocl * ocl.
ad::Var total_loss(ad::Var sup, ad::Var unsup, ad::Var ocl, double lambda_unsup,
                   double lambda_ocl);

}  // namespace deskdet
