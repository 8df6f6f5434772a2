#include <benchmark/benchmark.h>

#include "xmodal/losses.hpp"
#include "xmodal/model.hpp"
#include "xmodal/rng.hpp"

using namespace xmodal;

namespace {

EncoderConfig tiny_reference_encoder() {
  EncoderConfig cfg;
  cfg.input_length = 1000;
  cfg.kernel_size = 20;
  cfg.stride1 = 20;
  cfg.stride2 = 1;
  cfg.intermediate_dim = 24;
  cfg.embed_dim = 64;
  cfg.num_heads = 4;
  cfg.num_layers = 2;
  cfg.classifier_dim = 64;
  cfg.classifier_layers = 2;
  return cfg;
}

std::vector<Matrix> make_batch(Eigen::Index b, int t, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Matrix> out;
  for (Eigen::Index s = 0; s < b; ++s) {
    Matrix m(12, t);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    out.push_back(std::move(m));
  }
  return out;
}

void BM_EncoderForward(benchmark::State& state) {
  const EncoderConfig cfg = tiny_reference_encoder();
  ParamStore params;
  init_encoder_params(cfg, 1, params);
  const auto batch = make_batch(state.range(0), cfg.input_length, 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ecg_encoder_forward(params, cfg, batch, Mode::kEval));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_EncoderTrainStep(benchmark::State& state) {
  const EncoderConfig cfg = tiny_reference_encoder();
  ParamStore params;
  init_encoder_params(cfg, 1, params);
  init_classifier_params(cfg, 2, params);
  const auto batch = make_batch(state.range(0), cfg.input_length, 3);
  IntVector labels(state.range(0));
  for (Eigen::Index i = 0; i < labels.size(); ++i) labels[i] = i % 2;
  for (auto _ : state) {
    ClassifyCache cache;
    const Matrix logits = classify_forward(params, cfg, batch, Mode::kTrain, 5, &cache);
    const LossOutput lo = cross_entropy_loss(logits, labels);
    benchmark::DoNotOptimize(model_backward(params, cfg, cache, lo.grad_e));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_EncoderForward)->Arg(32)->Arg(128);
BENCHMARK(BM_EncoderTrainStep)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
