#pragma once

#include <map>
#include <string>

#include "xmodal/model.hpp"

namespace xmodal {

// Adaptive moment estimation with bias correction. decoupled=true gives the
// AdamW update (weight decay as a direct shrink); decoupled=false adds the
// decay term to the gradient before the moment updates.
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool decoupled = false;
};

struct OptimizerState {
  AdamConfig hyper;
  long step = 0;
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;
};

struct ScheduleConfig {
  double start_lr = 1e-5;
  double peak_lr = 1e-4;
  double end_lr = 1e-5;
  int warmup_epochs = 10;
  int total_epochs = 100;
  int steps_per_epoch = 1;

  void validate() const;
};

// Per-tensor learning-rate multipliers by longest matching name prefix;
// unmatched tensors get 1.0.
struct ParamGroups {
  std::map<std::string, double> prefix_multipliers;
  double multiplier_for(const std::string& name) const;
};

// Linear warmup from start_lr to peak_lr, then cosine decay to end_lr.
// Steps past the end of the schedule clamp to end_lr.
double lr_at(long step, const ScheduleConfig& sched);

// Effective per-tensor learning rates: schedule_lr x group multiplier.
std::map<std::string, double> param_group_scaling(const ParamStore& params,
                                                  const ParamGroups& groups,
                                                  double schedule_lr);

// If the global L2 norm across all gradient tensors exceeds max_norm, scales
// every tensor by max_norm / norm. Returns the pre-clip norm.
double clip_global_norm(GradientStore& grads, double max_norm);

// One optimizer step over every trainable tensor that has a gradient entry.
// Throws on non-finite gradients (identifying the tensor) and on updates
// aimed at frozen tensors.
void adaptive_moment_step(ParamStore& params, const GradientStore& grads,
                          OptimizerState& state, double lr,
                          const ParamGroups* groups = nullptr);

}  // namespace xmodal
