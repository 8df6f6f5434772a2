#pragma once

#include <vector>

#include "xmodal/tensor.hpp"

namespace xmodal {

struct MetricReport {
  double auroc = 0.0;
  double f1 = 0.0;
  double threshold = 0.5;
  long tp = 0, fp = 0, tn = 0, fn = 0;
  long n = 0;
};

// Rank-statistic AUROC (probability a random positive outscores a random
// negative, ties counted 1/2), O(n log n). Throws if only one class present.
double auroc(const Vector& scores, const IntVector& labels);

// F1 at the given threshold; predictions are score >= threshold. Returns 0
// when 2TP + FP + FN == 0.
double f1(const Vector& scores, const IntVector& labels, double threshold);

MetricReport evaluate(const Vector& scores, const IntVector& labels,
                      double threshold = 0.5);

struct SeedSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n-1); 0 for n == 1
  int n = 0;
};

SeedSummary seed_summary(const std::vector<double>& values);

}  // namespace xmodal
