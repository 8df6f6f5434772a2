#include <benchmark/benchmark.h>

#include "xmodal/eval.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/signal.hpp"

using namespace xmodal;

namespace {

void BM_Auroc(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  Rng rng(5);
  Vector scores(n);
  IntVector labels(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    labels[i] = rng.uniform() < 0.3 ? 1 : 0;
    scores[i] = rng.normal(labels[i] * 0.5, 1.0);
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(auroc(scores, labels));
  }
}

void BM_BaselineWander(benchmark::State& state) {
  Rng rng(9);
  EcgRecord rec;
  rec.sample_rate = 100.0;
  rec.samples.resize(12, 1000);
  for (Eigen::Index i = 0; i < rec.samples.size(); ++i) rec.samples.data()[i] = rng.normal();
  for (auto _ : state) {
    benchmark::DoNotOptimize(remove_baseline_wander(rec, 0.6));
  }
}

}  // namespace

BENCHMARK(BM_Auroc)->Arg(1000)->Arg(100000);
BENCHMARK(BM_BaselineWander);

BENCHMARK_MAIN();
