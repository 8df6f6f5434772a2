#include <benchmark/benchmark.h>

#include "xmodal/losses.hpp"
#include "xmodal/rng.hpp"

using namespace xmodal;

namespace {

EmbeddingBatch make_batch(Eigen::Index b, Eigen::Index d, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingBatch e;
  e.vectors.resize(b, d);
  for (Eigen::Index i = 0; i < e.vectors.size(); ++i) e.vectors.data()[i] = rng.normal();
  for (Eigen::Index r = 0; r < b; ++r) e.vectors.row(r) /= e.vectors.row(r).norm();
  e.labels.resize(b);
  for (Eigen::Index i = 0; i < b; ++i) e.labels[i] = rng.uniform() < 0.275 ? 1 : 0;
  return e;
}

AhnpConfig bench_cfg(AhnpStrategy s) {
  AhnpConfig c;
  c.strategy = s;
  c.alpha = 4.5;
  c.k_percent = 7.5;
  c.beta = 2.0;
  c.tau = 0.07;
  return c;
}

void BM_AhnpSupCma(benchmark::State& state, AhnpStrategy strategy) {
  const auto b = static_cast<Eigen::Index>(state.range(0));
  const EmbeddingBatch ze = make_batch(b, 128, 11);
  const EmbeddingBatch zx = make_batch(b, 128, 12);
  EmbeddingBatch zx2 = zx;
  zx2.labels = ze.labels;
  const AhnpConfig cfg = bench_cfg(strategy);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ahnp_supcma_loss(ze, zx2, cfg));
  }
}

void BM_Ntxent(benchmark::State& state) {
  const auto b = static_cast<Eigen::Index>(state.range(0));
  const EmbeddingBatch v1 = make_batch(b, 128, 21);
  const EmbeddingBatch v2 = make_batch(b, 128, 22);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ntxent_loss(v1, v2, 0.1));
  }
}

}  // namespace

BENCHMARK_CAPTURE(BM_AhnpSupCma, topk, AhnpStrategy::kTopk)->Arg(64)->Arg(256);
BENCHMARK_CAPTURE(BM_AhnpSupCma, linear, AhnpStrategy::kLinear)->Arg(256);
BENCHMARK_CAPTURE(BM_AhnpSupCma, exp, AhnpStrategy::kExp)->Arg(256);
BENCHMARK(BM_Ntxent)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
