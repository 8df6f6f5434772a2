#include "xmodal/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace xmodal {

namespace {

void validate_batch(const EmbeddingBatch& b, const char* what, bool need_labels) {
  require(b.batch() >= 1 && b.dim() >= 1, std::string(what) + ": empty batch");
  require(all_finite(b.vectors), std::string(what) + ": non-finite embedding");
  if (need_labels) {
    require(b.labels.size() == b.batch(), std::string(what) + ": labels missing");
    for (Eigen::Index i = 0; i < b.labels.size(); ++i)
      require(b.labels[i] == 0 || b.labels[i] == 1,
              std::string(what) + ": labels must be 0/1");
  }
}

struct WeightResult {
  Vector w;   // per candidate
  Vector dw;  // dw/ds, nonzero only for exp-strategy weighted elements
};

// weighted_mask marks the elements the strategy applies to; everything else
// keeps weight 1.
WeightResult compute_weights(const Vector& sims, const std::vector<bool>& weighted_mask,
                             const AhnpConfig& cfg) {
  const Eigen::Index n = sims.size();
  WeightResult r;
  r.w = Vector::Ones(n);
  r.dw = Vector::Zero(n);

  std::vector<Eigen::Index> scoped;
  scoped.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < n; ++j)
    if (weighted_mask[static_cast<std::size_t>(j)]) scoped.push_back(j);
  if (scoped.empty()) return r;

  switch (cfg.strategy) {
    case AhnpStrategy::kLinear: {
      // Rank 0 = least similar; ties resolved by ascending index.
      std::sort(scoped.begin(), scoped.end(), [&](Eigen::Index a, Eigen::Index b) {
        if (sims[a] != sims[b]) return sims[a] < sims[b];
        return a < b;
      });
      const auto m = static_cast<double>(scoped.size());
      for (std::size_t rank = 0; rank < scoped.size(); ++rank) {
        r.w[scoped[rank]] = scoped.size() == 1
                                ? cfg.alpha
                                : 1.0 + (cfg.alpha - 1.0) * static_cast<double>(rank) /
                                            (m - 1.0);
      }
      break;
    }
    case AhnpStrategy::kTopk: {
      std::sort(scoped.begin(), scoped.end(), [&](Eigen::Index a, Eigen::Index b) {
        if (sims[a] != sims[b]) return sims[a] > sims[b];
        return a < b;
      });
      const auto top = static_cast<std::size_t>(
          std::ceil(cfg.k_percent / 100.0 * static_cast<double>(scoped.size())));
      for (std::size_t j = 0; j < std::min(top, scoped.size()); ++j)
        r.w[scoped[j]] = cfg.alpha;
      break;
    }
    case AhnpStrategy::kExp: {
      for (Eigen::Index j : scoped) {
        const double e = std::exp(cfg.alpha * sims[j]);
        r.w[j] = 1.0 + e;
        r.dw[j] = cfg.alpha * e;
      }
      break;
    }
  }
  return r;
}

enum class PositiveMode { kWithinSample, kSameLabel };

struct DirOpts {
  PositiveMode mode;
  bool weighted;
  bool use_beta;
};

// One direction of the symmetrized loss. S is the raw similarity matrix for
// this direction; returns the directional value and dL/dS.
double directional_loss(const Matrix& S, const IntVector& labels, const AhnpConfig& cfg,
                        const DirOpts& opts, Matrix& grad_s) {
  const Eigen::Index B = S.rows();
  grad_s = Matrix::Zero(B, B);

  double total = 0.0;
  Eigen::Index anchors_used = 0;

  std::vector<Eigen::Index> cand;
  std::vector<bool> weighted_mask;
  for (Eigen::Index i = 0; i < B; ++i) {
    cand.clear();
    for (Eigen::Index a = 0; a < B; ++a)
      if (cfg.include_self || a != i) cand.push_back(a);
    require(!cand.empty(), "contrastive loss: empty denominator (B=1 with include_self=false)");

    Vector sims(static_cast<Eigen::Index>(cand.size()));
    for (std::size_t j = 0; j < cand.size(); ++j)
      sims[static_cast<Eigen::Index>(j)] = S(i, cand[j]);

    WeightResult wr;
    if (opts.weighted) {
      weighted_mask.assign(cand.size(), true);
      if (cfg.weight_scope == WeightScope::kNegativesOnly) {
        for (std::size_t j = 0; j < cand.size(); ++j)
          weighted_mask[j] = labels[cand[j]] != labels[i];
      }
      wr = compute_weights(sims, weighted_mask, cfg);
    } else {
      wr.w = Vector::Ones(sims.size());
      wr.dw = Vector::Zero(sims.size());
    }

    // Positive set.
    std::vector<Eigen::Index> pos;
    bool self_positive = false;
    if (opts.mode == PositiveMode::kWithinSample) {
      pos.push_back(i);
      self_positive = true;
    } else {
      for (Eigen::Index a : cand)
        if (labels[a] == labels[i]) {
          pos.push_back(a);
          if (a == i) self_positive = true;
        }
      if (pos.empty()) {
        require(!cfg.error_on_empty_positives,
                "supervised contrastive loss: anchor with empty positive set");
        continue;
      }
    }
    const double np = static_cast<double>(pos.size());

    // Stabilized log denominator and its gradient.
    const double m = sims.maxCoeff() / cfg.tau;
    double denom = 0.0;
    Vector expt(sims.size());
    for (Eigen::Index j = 0; j < sims.size(); ++j) {
      expt[j] = std::exp(sims[j] / cfg.tau - m);
      denom += wr.w[j] * expt[j];
    }
    const double log_denom = m + std::log(denom);

    double value_i = log_denom;
    for (Eigen::Index p : pos) value_i -= S(i, p) / (cfg.tau * np);
    if (opts.use_beta && self_positive) value_i -= std::log1p(cfg.beta) / np;

    for (Eigen::Index j = 0; j < sims.size(); ++j)
      grad_s(i, cand[static_cast<std::size_t>(j)]) +=
          expt[j] / denom * (wr.dw[j] + wr.w[j] / cfg.tau);
    for (Eigen::Index p : pos) grad_s(i, p) -= 1.0 / (cfg.tau * np);

    total += value_i;
    ++anchors_used;
  }

  if (cfg.reduction == Reduction::kMean) {
    if (anchors_used == 0) return 0.0;
    total /= static_cast<double>(anchors_used);
    grad_s /= static_cast<double>(anchors_used);
  }
  return total;
}

LossOutput symmetrized_loss(const EmbeddingBatch& ze, const EmbeddingBatch& zx,
                            const AhnpConfig& cfg, const DirOpts& opts) {
  cfg.validate();
  const bool need_labels = opts.mode == PositiveMode::kSameLabel;
  validate_batch(ze, "loss", need_labels);
  validate_batch(zx, "loss", need_labels);
  require(ze.batch() == zx.batch() && ze.dim() == zx.dim(),
          "loss: embedding batches must have matching shapes");
  if (need_labels)
    require((ze.labels.array() == zx.labels.array()).all(),
            "loss: modality batches carry different labels");

  const Matrix s_ex = ze.vectors * zx.vectors.transpose();
  const Matrix s_xe = s_ex.transpose();

  Matrix g_ex, g_xe;
  const double v_ex = directional_loss(s_ex, ze.labels, cfg, opts, g_ex);
  const double v_xe = directional_loss(s_xe, ze.labels, cfg, opts, g_xe);

  LossOutput out;
  out.value = 0.5 * (v_ex + v_xe);
  out.grad_e = 0.5 * ((g_ex + g_xe.transpose()) * zx.vectors);
  out.grad_x = 0.5 * ((g_ex.transpose() + g_xe) * ze.vectors);
  return out;
}

}  // namespace

void AhnpConfig::validate() const {
  require(tau > 0.0, "AhnpConfig: tau must be > 0");
  require(alpha > 0.0, "AhnpConfig: alpha must be > 0");
  require(beta >= 0.0, "AhnpConfig: beta must be >= 0");
  if (strategy == AhnpStrategy::kLinear || strategy == AhnpStrategy::kTopk)
    require(alpha >= 1.0, "AhnpConfig: alpha must be >= 1 for linear/topk");
  if (strategy == AhnpStrategy::kTopk)
    require(k_percent > 0.0 && k_percent <= 100.0,
            "AhnpConfig: k_percent must be in (0, 100]");
}

Matrix similarity_matrix(const EmbeddingBatch& a, const EmbeddingBatch& b) {
  validate_batch(a, "similarity_matrix", false);
  validate_batch(b, "similarity_matrix", false);
  require(a.batch() == b.batch() && a.dim() == b.dim(),
          "similarity_matrix: shape mismatch");
  return a.vectors * b.vectors.transpose();
}

LossOutput cma_loss(const EmbeddingBatch& ze, const EmbeddingBatch& zx,
                    const AhnpConfig& cfg) {
  return symmetrized_loss(ze, zx, cfg, {PositiveMode::kWithinSample, false, false});
}

LossOutput supcma_loss(const EmbeddingBatch& ze, const EmbeddingBatch& zx,
                       const AhnpConfig& cfg) {
  return symmetrized_loss(ze, zx, cfg, {PositiveMode::kSameLabel, false, false});
}

LossOutput ahnp_supcma_loss(const EmbeddingBatch& ze, const EmbeddingBatch& zx,
                            const AhnpConfig& cfg) {
  return symmetrized_loss(ze, zx, cfg, {PositiveMode::kSameLabel, true, true});
}

Vector ahnp_weights(const Vector& anchor_row_sims, const std::vector<bool>& neg_mask,
                    const AhnpConfig& cfg) {
  cfg.validate();
  require(anchor_row_sims.size() > 0, "ahnp_weights: empty similarity vector");
  require(all_finite(anchor_row_sims), "ahnp_weights: non-finite similarity");
  require(neg_mask.size() == static_cast<std::size_t>(anchor_row_sims.size()),
          "ahnp_weights: mask size mismatch");

  std::vector<bool> weighted_mask(neg_mask.size(), true);
  if (cfg.weight_scope == WeightScope::kNegativesOnly) weighted_mask = neg_mask;
  return compute_weights(anchor_row_sims, weighted_mask, cfg).w;
}

LossOutput ntxent_loss(const EmbeddingBatch& view1, const EmbeddingBatch& view2,
                       double tau) {
  validate_batch(view1, "ntxent", false);
  validate_batch(view2, "ntxent", false);
  require(tau > 0.0, "ntxent: tau must be > 0");
  require(view1.batch() == view2.batch() && view1.dim() == view2.dim(),
          "ntxent: view shapes differ");

  const Eigen::Index B = view1.batch();
  const Eigen::Index n = 2 * B;
  Matrix z(n, view1.dim());
  z.topRows(B) = view1.vectors;
  z.bottomRows(B) = view2.vectors;

  const Matrix s = z * z.transpose();
  Matrix g = Matrix::Zero(n, n);
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(n);

  for (Eigen::Index q = 0; q < n; ++q) {
    const Eigen::Index p = (q + B) % n;
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < n; ++r)
      if (r != q) m = std::max(m, s(q, r) / tau);
    double denom = 0.0;
    for (Eigen::Index r = 0; r < n; ++r)
      if (r != q) denom += std::exp(s(q, r) / tau - m);
    total += m + std::log(denom) - s(q, p) / tau;
    for (Eigen::Index r = 0; r < n; ++r)
      if (r != q) g(q, r) += std::exp(s(q, r) / tau - m) / denom * inv / tau;
    g(q, p) -= inv / tau;
  }

  const Matrix grad_z = (g + g.transpose()) * z;
  LossOutput out;
  out.value = total * inv;
  out.grad_e = grad_z.topRows(B);
  out.grad_x = grad_z.bottomRows(B);
  return out;
}

LossOutput cross_entropy_loss(const Matrix& logits, const IntVector& labels) {
  require(logits.rows() >= 1 && logits.cols() == 2, "cross_entropy: logits must be Bx2");
  require(all_finite(logits), "cross_entropy: non-finite logits");
  require(labels.size() == logits.rows(), "cross_entropy: label count mismatch");

  const Eigen::Index B = logits.rows();
  LossOutput out;
  out.grad_e = Matrix::Zero(B, 2);
  double total = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    require(labels[i] == 0 || labels[i] == 1, "cross_entropy: labels must be 0/1");
    const double m = std::max(logits(i, 0), logits(i, 1));
    const double e0 = std::exp(logits(i, 0) - m);
    const double e1 = std::exp(logits(i, 1) - m);
    const double denom = e0 + e1;
    total += m + std::log(denom) - logits(i, labels[i]);
    out.grad_e(i, 0) = e0 / denom;
    out.grad_e(i, 1) = e1 / denom;
    out.grad_e(i, labels[i]) -= 1.0;
  }
  out.value = total / static_cast<double>(B);
  out.grad_e /= static_cast<double>(B);
  return out;
}

FdReport finite_diff_check(const std::function<double(const Vector&)>& f,
                           const Vector& x0, const Vector& analytic_grad,
                           double h, double tol) {
  require(h > 0.0, "finite_diff_check: h must be > 0");
  require(analytic_grad.size() == x0.size(), "finite_diff_check: gradient size mismatch");

  const double f_once = f(x0);
  const double f_twice = f(x0);
  if (!(f_once == f_twice))
    throw std::runtime_error("finite_diff_check: loss function is not deterministic");

  Vector fd(x0.size());
  Vector x = x0;
  for (Eigen::Index j = 0; j < x0.size(); ++j) {
    x[j] = x0[j] + h;
    const double fp = f(x);
    x[j] = x0[j] - h;
    const double fm = f(x);
    x[j] = x0[j];
    fd[j] = static_cast<double>((static_cast<long double>(fp) - static_cast<long double>(fm)) /
                                (2.0L * static_cast<long double>(h)));
  }

  const double scale =
      std::max({analytic_grad.cwiseAbs().maxCoeff(), fd.cwiseAbs().maxCoeff(), 1e-12});
  FdReport rep;
  rep.tol = tol;
  for (Eigen::Index j = 0; j < x0.size(); ++j) {
    const double denom =
        std::max({std::abs(analytic_grad[j]), std::abs(fd[j]), 1e-3 * scale, 1e-12});
    const double rel = std::abs(analytic_grad[j] - fd[j]) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = j;
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace xmodal
