#include "xmodal/optim.hpp"

#include <cmath>

namespace xmodal {

void ScheduleConfig::validate() const {
  require(start_lr > 0.0 && peak_lr > 0.0 && end_lr > 0.0,
          "ScheduleConfig: learning rates must be > 0");
  require(start_lr <= peak_lr, "ScheduleConfig: start_lr must be <= peak_lr");
  require(warmup_epochs >= 0 && total_epochs >= warmup_epochs,
          "ScheduleConfig: warmup must fit in the schedule");
  require(steps_per_epoch >= 1, "ScheduleConfig: steps_per_epoch must be >= 1");
}

double ParamGroups::multiplier_for(const std::string& name) const {
  std::size_t best_len = 0;
  double best = 1.0;
  for (const auto& [prefix, mult] : prefix_multipliers) {
    if (name.rfind(prefix, 0) == 0 && prefix.size() >= best_len) {
      best_len = prefix.size();
      best = mult;
    }
  }
  return best;
}

double lr_at(long step, const ScheduleConfig& sched) {
  sched.validate();
  require(step >= 0, "lr_at: negative step");
  const long warmup = static_cast<long>(sched.warmup_epochs) * sched.steps_per_epoch;
  const long total = static_cast<long>(sched.total_epochs) * sched.steps_per_epoch;
  if (step < warmup) {
    return sched.start_lr + (sched.peak_lr - sched.start_lr) *
                                static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (step >= total || total == warmup) {
    return step == warmup ? sched.peak_lr : sched.end_lr;
  }
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return sched.end_lr +
         0.5 * (sched.peak_lr - sched.end_lr) * (1.0 + std::cos(M_PI * progress));
}

std::map<std::string, double> param_group_scaling(const ParamStore& params,
                                                  const ParamGroups& groups,
                                                  double schedule_lr) {
  std::map<std::string, double> out;
  for (const auto& t : params.tensors())
    if (t.kind == TensorKind::kTrainable)
      out[t.name] = schedule_lr * groups.multiplier_for(t.name);
  return out;
}

double clip_global_norm(GradientStore& grads, double max_norm) {
  require(max_norm > 0.0, "clip_global_norm: max_norm must be > 0");
  const double norm = grads.global_norm();
  if (norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

void adaptive_moment_step(ParamStore& params, const GradientStore& grads,
                          OptimizerState& state, double lr, const ParamGroups* groups) {
  const AdamConfig& h = state.hyper;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));

  for (const auto& [name, grad] : grads.entries()) {
    const TensorKind kind = params.kind(name);
    if (kind == TensorKind::kFrozen)
      throw std::invalid_argument("optimizer: attempt to update frozen tensor " + name);
    require(kind == TensorKind::kTrainable, "optimizer: gradient for buffer " + name);
    if (!grad.allFinite())
      throw std::runtime_error("optimizer: non-finite gradient for tensor " + name);

    Matrix& p = params.at(name);
    require(p.rows() == grad.rows() && p.cols() == grad.cols(),
            "optimizer: shape mismatch for " + name);

    Matrix g = grad;
    if (!h.decoupled && h.weight_decay != 0.0) g += h.weight_decay * p;

    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      state.m[name] = Matrix::Zero(p.rows(), p.cols());
      state.v[name] = Matrix::Zero(p.rows(), p.cols());
      mit = state.m.find(name);
    }
    Matrix& m = mit->second;
    Matrix& v = state.v[name];
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    v = h.beta2 * v + (1.0 - h.beta2) * g.cwiseProduct(g);

    const double step_lr = groups ? lr * groups->multiplier_for(name) : lr;
    const Matrix m_hat = m / bc1;
    const Matrix v_hat = v / bc2;
    if (h.decoupled && h.weight_decay != 0.0) p -= step_lr * h.weight_decay * p;
    p -= step_lr * (m_hat.array() / (v_hat.array().sqrt() + h.eps)).matrix();
  }
}

}  // namespace xmodal
