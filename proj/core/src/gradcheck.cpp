#include "xmodal/gradcheck.hpp"

#include <functional>

#include "xmodal/losses.hpp"
#include "xmodal/model.hpp"
#include "xmodal/rng.hpp"

namespace xmodal {

namespace {

Matrix random_rows(Eigen::Index b, Eigen::Index d, Rng& rng, bool normalize) {
  Matrix m(b, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  if (normalize)
    for (Eigen::Index r = 0; r < b; ++r) m.row(r) /= m.row(r).norm();
  return m;
}

IntVector mixed_labels(Eigen::Index b, Rng& rng) {
  IntVector y(b);
  // Guarantee both classes.
  y[0] = 1;
  y[b - 1] = 0;
  for (Eigen::Index i = 1; i + 1 < b; ++i) y[i] = rng.uniform() < 0.5 ? 1 : 0;
  return y;
}

using PairLoss = std::function<LossOutput(const EmbeddingBatch&, const EmbeddingBatch&)>;

// Checks d(loss)/d(ze, zx) for a two-batch loss at one seed.
double check_pair_loss(const PairLoss& loss, Eigen::Index b, Eigen::Index d,
                       bool with_labels, std::uint64_t seed, double h, double tol) {
  Rng rng(seed);
  const Matrix ze0 = random_rows(b, d, rng, true);
  const Matrix zx0 = random_rows(b, d, rng, true);
  const IntVector y = with_labels ? mixed_labels(b, rng) : IntVector();

  const auto make = [&](const Vector& x) {
    EmbeddingBatch e, g;
    e.vectors = Eigen::Map<const Matrix>(x.data(), b, d);
    g.vectors = Eigen::Map<const Matrix>(x.data() + b * d, b, d);
    e.labels = y;
    g.labels = y;
    return std::make_pair(e, g);
  };

  Vector x0(2 * b * d);
  Eigen::Map<Matrix>(x0.data(), b, d) = ze0;
  Eigen::Map<Matrix>(x0.data() + b * d, b, d) = zx0;

  const auto [e0, g0] = make(x0);
  const LossOutput out = loss(e0, g0);
  Vector analytic(2 * b * d);
  Eigen::Map<Matrix>(analytic.data(), b, d) = out.grad_e;
  Eigen::Map<Matrix>(analytic.data() + b * d, b, d) = out.grad_x;

  const auto f = [&](const Vector& x) {
    const auto [e, g] = make(x);
    return loss(e, g).value;
  };
  return finite_diff_check(f, x0, analytic, h, tol).max_rel_err;
}

double check_cross_entropy(std::uint64_t seed, double h, double tol) {
  Rng rng(seed);
  const Eigen::Index b = 16;
  const Matrix logits = random_rows(b, 2, rng, false);
  const IntVector y = mixed_labels(b, rng);

  Vector x0(2 * b);
  Eigen::Map<Matrix>(x0.data(), b, 2) = logits;
  const LossOutput out = cross_entropy_loss(logits, y);
  Vector analytic(2 * b);
  Eigen::Map<Matrix>(analytic.data(), b, 2) = out.grad_e;

  const auto f = [&](const Vector& x) {
    return cross_entropy_loss(Eigen::Map<const Matrix>(x.data(), b, 2), y).value;
  };
  return finite_diff_check(f, x0, analytic, h, tol).max_rel_err;
}

Vector pack_trainable(const ParamStore& ps) {
  Eigen::Index total = 0;
  for (const auto& t : ps.tensors())
    if (t.kind == TensorKind::kTrainable) total += t.value.size();
  Vector x(total);
  Eigen::Index at = 0;
  for (const auto& t : ps.tensors())
    if (t.kind == TensorKind::kTrainable) {
      x.segment(at, t.value.size()) =
          Eigen::Map<const Vector>(t.value.data(), t.value.size());
      at += t.value.size();
    }
  return x;
}

void unpack_trainable(const Vector& x, ParamStore& ps) {
  Eigen::Index at = 0;
  for (auto& t : ps.tensors())
    if (t.kind == TensorKind::kTrainable) {
      Eigen::Map<Vector>(t.value.data(), t.value.size()) = x.segment(at, t.value.size());
      at += t.value.size();
    }
}

// Whole-model check: CE(classifier(encoder(batch))) against every trainable
// parameter, train mode with a fixed dropout seed.
double check_composed_model(std::uint64_t seed, double h, double tol) {
  EncoderConfig cfg;
  cfg.input_length = 20;
  cfg.kernel_size = 2;
  cfg.stride1 = 2;
  cfg.stride2 = 1;
  cfg.intermediate_dim = 4;
  cfg.embed_dim = 8;
  cfg.num_heads = 1;
  cfg.num_layers = 1;
  cfg.classifier_dim = 8;
  cfg.classifier_layers = 2;
  cfg.classifier_dropout = 0.1;

  ParamStore params;
  init_encoder_params(cfg, derive_seed(seed, "fd.enc"), params);
  init_classifier_params(cfg, derive_seed(seed, "fd.clf"), params);

  Rng rng(derive_seed(seed, "fd.data"));
  const Eigen::Index b = 4;
  std::vector<Matrix> batch;
  for (Eigen::Index i = 0; i < b; ++i) batch.push_back(random_rows(12, 20, rng, false));
  const IntVector y = mixed_labels(b, rng);
  const std::uint64_t dropout_seed = derive_seed(seed, "fd.dropout");

  const Vector x0 = pack_trainable(params);
  ClassifyCache cache;
  const Matrix logits = classify_forward(params, cfg, batch, Mode::kTrain, dropout_seed,
                                         &cache);
  const LossOutput lo = cross_entropy_loss(logits, y);
  const GradientStore grads = model_backward(params, cfg, cache, lo.grad_e);

  Vector analytic(x0.size());
  Eigen::Index at = 0;
  for (const auto& t : params.tensors())
    if (t.kind == TensorKind::kTrainable) {
      const Matrix& g = grads.at(t.name);
      analytic.segment(at, g.size()) = Eigen::Map<const Vector>(g.data(), g.size());
      at += g.size();
    }

  ParamStore work = params;
  const auto f = [&](const Vector& x) {
    unpack_trainable(x, work);
    const Matrix l = classify_forward(work, cfg, batch, Mode::kTrain, dropout_seed);
    return cross_entropy_loss(l, y).value;
  };
  return finite_diff_check(f, x0, analytic, h, tol).max_rel_err;
}

AhnpConfig suite_ahnp(AhnpStrategy strategy, WeightScope scope) {
  AhnpConfig c;
  c.strategy = strategy;
  c.alpha = 4.5;
  c.k_percent = 40.0;
  c.beta = 2.0;
  c.tau = 0.07;
  c.weight_scope = scope;
  c.include_self = true;
  c.reduction = Reduction::kMean;
  return c;
}

}  // namespace

std::vector<GradCheckRow> run_gradient_suite(std::uint64_t base_seed, int num_seeds,
                                             bool include_model) {
  constexpr double kH = 1e-5;
  constexpr double kLossTol = 1e-4;
  constexpr double kModelTol = 1e-3;

  struct Case {
    std::string name;
    PairLoss loss;
    bool labels;
  };
  AhnpConfig plain;
  plain.tau = 0.07;
  plain.include_self = true;
  plain.reduction = Reduction::kMean;
  AhnpConfig noself = plain;
  noself.include_self = false;

  std::vector<Case> cases;
  cases.push_back({"cma", [=](const EmbeddingBatch& a, const EmbeddingBatch& b) {
                     return cma_loss(a, b, plain);
                   },
                   false});
  cases.push_back({"cma_no_self", [=](const EmbeddingBatch& a, const EmbeddingBatch& b) {
                     return cma_loss(a, b, noself);
                   },
                   false});
  cases.push_back({"supcma", [=](const EmbeddingBatch& a, const EmbeddingBatch& b) {
                     return supcma_loss(a, b, plain);
                   },
                   true});
  const std::pair<AhnpStrategy, std::string> strategies[] = {
      {AhnpStrategy::kLinear, "linear"},
      {AhnpStrategy::kTopk, "topk"},
      {AhnpStrategy::kExp, "exp"},
  };
  const std::pair<WeightScope, std::string> scopes[] = {
      {WeightScope::kNegativesOnly, "neg"},
      {WeightScope::kAll, "all"},
  };
  for (const auto& [strat, sname] : strategies) {
    for (const auto& [scope, scname] : scopes) {
      const AhnpConfig ac = suite_ahnp(strat, scope);
      cases.push_back({"ahnp_" + sname + "_" + scname,
                       [=](const EmbeddingBatch& a, const EmbeddingBatch& b) {
                         return ahnp_supcma_loss(a, b, ac);
                       },
                       true});
    }
  }

  std::vector<GradCheckRow> rows;
  for (const auto& c : cases) {
    GradCheckRow row{c.name, 0.0, kLossTol, false};
    for (int s = 0; s < num_seeds; ++s) {
      const double err = check_pair_loss(c.loss, 6, 8, c.labels,
                                         derive_seed(base_seed, c.name, s), kH, kLossTol);
      row.max_rel_err = std::max(row.max_rel_err, err);
    }
    row.pass = row.max_rel_err <= row.tol;
    rows.push_back(row);
  }

  {
    GradCheckRow row{"ntxent", 0.0, kLossTol, false};
    for (int s = 0; s < num_seeds; ++s) {
      Rng rng(derive_seed(base_seed, "ntxent", s));
      const Eigen::Index b = 8, d = 6;
      const double tau = 0.2;
      const auto loss = [&](const EmbeddingBatch& a, const EmbeddingBatch& v) {
        return ntxent_loss(a, v, tau);
      };
      (void)rng;
      const double err =
          check_pair_loss(loss, b, d, false, derive_seed(base_seed, "ntxent", s), kH,
                          kLossTol);
      row.max_rel_err = std::max(row.max_rel_err, err);
    }
    row.pass = row.max_rel_err <= row.tol;
    rows.push_back(row);
  }

  {
    GradCheckRow row{"cross_entropy", 0.0, kLossTol, false};
    for (int s = 0; s < num_seeds; ++s) {
      const double err =
          check_cross_entropy(derive_seed(base_seed, "xent", s), kH, kLossTol);
      row.max_rel_err = std::max(row.max_rel_err, err);
    }
    row.pass = row.max_rel_err <= row.tol;
    rows.push_back(row);
  }

  if (include_model) {
    GradCheckRow row{"composed_model", 0.0, kModelTol, false};
    for (int s = 0; s < num_seeds; ++s) {
      const double err =
          check_composed_model(derive_seed(base_seed, "model", s), kH, kModelTol);
      row.max_rel_err = std::max(row.max_rel_err, err);
    }
    row.pass = row.max_rel_err <= row.tol;
    rows.push_back(row);
  }

  return rows;
}

}  // namespace xmodal
