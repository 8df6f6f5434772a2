#include "xmodal/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace xmodal {

double auroc(const Vector& scores, const IntVector& labels) {
  require(scores.size() == labels.size(), "auroc: size mismatch");
  require(scores.size() >= 2, "auroc: need at least two samples");
  require(all_finite(scores), "auroc: non-finite score");

  const Eigen::Index n = scores.size();
  long n_pos = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    require(labels[i] == 0 || labels[i] == 1, "auroc: labels must be 0/1");
    n_pos += labels[i];
  }
  const long n_neg = static_cast<long>(n) - n_pos;
  require(n_pos > 0 && n_neg > 0, "auroc: both classes must be present");

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return scores[a] < scores[b]; });

  // Average ranks over tie groups, then the Mann-Whitney statistic.
  double rank_sum_pos = 0.0;
  Eigen::Index i = 0;
  while (i < n) {
    Eigen::Index j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (Eigen::Index k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                      (static_cast<double>(n_pos) + 1.0);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double f1(const Vector& scores, const IntVector& labels, double threshold) {
  require(scores.size() == labels.size(), "f1: size mismatch");
  long tp = 0, fp = 0, fn = 0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i] == 1) ++tp;
    if (pred && labels[i] == 0) ++fp;
    if (!pred && labels[i] == 1) ++fn;
  }
  const long denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

MetricReport evaluate(const Vector& scores, const IntVector& labels, double threshold) {
  MetricReport r;
  r.threshold = threshold;
  r.n = static_cast<long>(scores.size());
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i] == 1) ++r.tp;
    if (pred && labels[i] == 0) ++r.fp;
    if (!pred && labels[i] == 0) ++r.tn;
    if (!pred && labels[i] == 1) ++r.fn;
  }
  r.auroc = auroc(scores, labels);
  r.f1 = f1(scores, labels, threshold);
  return r;
}

SeedSummary seed_summary(const std::vector<double>& values) {
  require(!values.empty(), "seed_summary: empty input");
  SeedSummary s;
  s.n = static_cast<int>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) /
           static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace xmodal
