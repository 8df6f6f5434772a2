#pragma once

#include <functional>
#include <string>

#include "xmodal/tensor.hpp"

namespace xmodal {

// ---------------------------------------------------------------------------
// Cross-modal contrastive objectives.
//
// All losses return the scalar value plus exact analytic gradients with
// respect to the input embedding rows. Inputs are plain embedding batches:
// row normalization, when wanted, happens upstream in the projection heads.
// ---------------------------------------------------------------------------

struct EmbeddingBatch {
  Matrix vectors;    // B x d
  IntVector labels;  // length B, entries in {0,1}; may be empty for
                     // losses that do not use labels

  Eigen::Index batch() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }
};

enum class AhnpStrategy { kLinear, kTopk, kExp };
enum class WeightScope { kNegativesOnly, kAll };
enum class Reduction { kSum, kMean };

struct AhnpConfig {
  AhnpStrategy strategy = AhnpStrategy::kTopk;
  double alpha = 4.5;      // weight ceiling (linear/topk), steepness (exp)
  double k_percent = 7.5;  // topk only, in (0, 100]
  double beta = 0.0;       // extra numerator weight on the within-sample pair
  double tau = 0.1;        // softmax temperature
  WeightScope weight_scope = WeightScope::kNegativesOnly;
  bool include_self = true;         // whether A(i) contains i itself
  Reduction reduction = Reduction::kMean;
  bool error_on_empty_positives = false;  // default: skip such anchors

  void validate() const;
};

struct LossOutput {
  double value = 0.0;
  Matrix grad_e;  // d(value)/d(first input rows)
  Matrix grad_x;  // d(value)/d(second input rows); empty for single-input losses
};

// values[i][j] = dot(a.row(i), b.row(j)). Throws on shape mismatch.
Matrix similarity_matrix(const EmbeddingBatch& a, const EmbeddingBatch& b);

// Symmetrized InfoNCE over cross-modal pairs: the positive for anchor i is
// the within-sample pair (i, i); every a in A(i) contributes to the
// denominator. Uses cfg.tau / include_self / reduction only.
LossOutput cma_loss(const EmbeddingBatch& ze, const EmbeddingBatch& zx,
                    const AhnpConfig& cfg);

// Label-supervised variant: all same-label cross-modal pairs are positives,
// each anchor averaged over its positive set.
LossOutput supcma_loss(const EmbeddingBatch& ze, const EmbeddingBatch& zx,
                       const AhnpConfig& cfg);

// Per-anchor hard-negative weights. `anchor_row_sims` are raw (un-tau-scaled)
// similarities of one anchor against its candidate set, `neg_mask` marks which
// of them count as negatives. Elements outside the weighting scope get 1.
//   linear: weights affine in similarity rank over the weighted subset,
//           least-similar -> 1, most-similar -> alpha, ties by ascending index
//   topk:   ceil(k% * count) most-similar weighted elements -> alpha, rest 1
//   exp:    w = 1 + exp(alpha * s)
Vector ahnp_weights(const Vector& anchor_row_sims, const std::vector<bool>& neg_mask,
                    const AhnpConfig& cfg);

// Supervised loss with adaptive hard negative penalization: denominator terms
// are scaled by ahnp_weights and the within-sample positive numerator is
// boosted by (1 + beta). exp-strategy weights are differentiated through;
// linear/topk weights are piecewise constant and treated as constants of the
// forward pass.
LossOutput ahnp_supcma_loss(const EmbeddingBatch& ze, const EmbeddingBatch& zx,
                            const AhnpConfig& cfg);

// SimCLR-style NT-Xent over 2B views; mean over the 2B anchors, self-similarity
// excluded from each denominator. grad_e/grad_x are the view1/view2 gradients.
LossOutput ntxent_loss(const EmbeddingBatch& view1, const EmbeddingBatch& view2,
                       double tau);

// Mean softmax cross-entropy for binary logits (B x 2).
LossOutput cross_entropy_loss(const Matrix& logits, const IntVector& labels);

// ---------------------------------------------------------------------------
// Central finite differences, the gradient oracle used by tests and the
// check-grads command.
// ---------------------------------------------------------------------------

struct FdReport {
  double max_rel_err = 0.0;
  Eigen::Index worst_index = -1;
  bool pass = false;
  double tol = 0.0;
};

// Compares `analytic_grad` against central differences of `f` around `x0`.
// f must be deterministic; this is checked by evaluating f(x0) twice.
// Relative error per coordinate uses max(|analytic|, |fd|, 1e-3 * ||grad||_inf)
// as the denominator so that near-zero coordinates are judged on the scale
// of the gradient instead of blowing up.
FdReport finite_diff_check(const std::function<double(const Vector&)>& f,
                           const Vector& x0, const Vector& analytic_grad,
                           double h, double tol);

}  // namespace xmodal
