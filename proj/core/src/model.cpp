#include "xmodal/model.hpp"

#include <algorithm>
#include <cmath>

#include "xmodal/rng.hpp"

namespace xmodal {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kBnMomentum = 0.1;

void check_finite(const Matrix& m, const char* layer) {
  if (!m.allFinite())
    throw std::runtime_error(std::string("non-finite activation in layer ") + layer);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) +
         x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

// Fan-in-scaled uniform with variance 1/fan_in.
void fill_uniform_fan_in(Matrix& w, int fan_in, Rng& rng) {
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  for (Eigen::Index i = 0; i < w.size(); ++i)
    w.data()[i] = rng.uniform(-bound, bound);
}

void add_linear(ParamStore& out, const std::string& prefix, int out_dim, int in_dim,
                std::uint64_t seed) {
  Matrix w(out_dim, in_dim);
  Rng rng(derive_seed(seed, prefix));
  fill_uniform_fan_in(w, in_dim, rng);
  out.add(prefix + ".w", std::move(w));
  out.add(prefix + ".b", Matrix::Zero(out_dim, 1));
}

void add_norm(ParamStore& out, const std::string& prefix, int dim, bool batch_norm) {
  out.add(prefix + ".gamma", Matrix::Ones(dim, 1));
  out.add(prefix + ".beta", Matrix::Zero(dim, 1));
  if (batch_norm) {
    out.add(prefix + ".run_mean", Matrix::Zero(dim, 1), TensorKind::kBuffer);
    out.add(prefix + ".run_var", Matrix::Ones(dim, 1), TensorKind::kBuffer);
  }
}

// Rows of `x`: time positions of one sample; one output row per patch.
Matrix im2col(const Matrix& x_channels_by_time, int kernel, int stride, int out_len) {
  const auto channels = x_channels_by_time.rows();
  Matrix p(out_len, channels * kernel);
  for (int t = 0; t < out_len; ++t)
    for (Eigen::Index c = 0; c < channels; ++c)
      for (int k = 0; k < kernel; ++k)
        p(t, c * kernel + k) = x_channels_by_time(c, t * stride + k);
  return p;
}

struct BnForward {
  Matrix out;
  BatchNormCache cache;
};

BnForward batch_norm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                             const Matrix& run_mean, const Matrix& run_var, Mode mode) {
  const auto n = static_cast<double>(x.rows());
  BnForward r;
  Vector mean, var;
  if (mode == Mode::kTrain) {
    mean = x.colwise().mean();
    var = ((x.rowwise() - mean.transpose()).array().square().colwise().sum() / n)
              .transpose();
    r.cache.new_running_mean =
        (1.0 - kBnMomentum) * run_mean.col(0) + kBnMomentum * mean;
    r.cache.new_running_var = (1.0 - kBnMomentum) * run_var.col(0) + kBnMomentum * var;
  } else {
    mean = run_mean.col(0);
    var = run_var.col(0);
  }
  r.cache.inv_std = (var.array() + kNormEps).rsqrt();
  r.cache.xhat = (x.rowwise() - mean.transpose()).array().rowwise() *
                 r.cache.inv_std.transpose().array();
  r.out = (r.cache.xhat.array().rowwise() * gamma.col(0).transpose().array())
              .rowwise() +
          beta.col(0).transpose().array();
  return r;
}

// Gradient through train-mode batch statistics.
Matrix batch_norm_backward(const BatchNormCache& cache, const Matrix& gamma, Mode mode,
                           const Matrix& d_out, Matrix& d_gamma, Matrix& d_beta) {
  d_gamma = (d_out.array() * cache.xhat.array()).colwise().sum().transpose();
  d_beta = d_out.colwise().sum().transpose();

  const Matrix dxhat = d_out.array().rowwise() * gamma.col(0).transpose().array();
  if (mode == Mode::kEval) {
    return dxhat.array().rowwise() * cache.inv_std.transpose().array();
  }
  const auto n = static_cast<double>(d_out.rows());
  const Vector mean_dxhat = dxhat.colwise().sum() / n;
  const Vector mean_dxhat_xhat =
      (dxhat.array() * cache.xhat.array()).colwise().sum() / n;
  Matrix dx = dxhat;
  dx.array().rowwise() -= mean_dxhat.transpose().array();
  dx.array() -= cache.xhat.array().rowwise() * mean_dxhat_xhat.transpose().array();
  return dx.array().rowwise() * cache.inv_std.transpose().array();
}

struct LnForward {
  Matrix out;
  LayerNormCache cache;
};

LnForward layer_norm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta) {
  const auto d = static_cast<double>(x.cols());
  LnForward r;
  const Vector mean = x.rowwise().mean();
  const Vector var = (x.colwise() - mean).array().square().rowwise().sum() / d;
  r.cache.inv_std = (var.array() + kNormEps).rsqrt();
  r.cache.xhat = (x.colwise() - mean).array().colwise() * r.cache.inv_std.array();
  r.out = (r.cache.xhat.array().rowwise() * gamma.col(0).transpose().array())
              .rowwise() +
          beta.col(0).transpose().array();
  return r;
}

Matrix layer_norm_backward(const LayerNormCache& cache, const Matrix& gamma,
                           const Matrix& d_out, Matrix& d_gamma, Matrix& d_beta) {
  d_gamma = (d_out.array() * cache.xhat.array()).colwise().sum().transpose();
  d_beta = d_out.colwise().sum().transpose();

  const auto d = static_cast<double>(d_out.cols());
  const Matrix dxhat = d_out.array().rowwise() * gamma.col(0).transpose().array();
  const Vector mean_dxhat = dxhat.rowwise().sum() / d;
  const Vector mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().sum() / d;
  Matrix dx = dxhat;
  dx.colwise() -= mean_dxhat;
  dx.array() -= cache.xhat.array().colwise() * mean_dxhat_xhat.array();
  return dx.array().colwise() * cache.inv_std.array();
}

Matrix affine_forward(const Matrix& x, const Matrix& w, const Matrix& b) {
  return (x * w.transpose()).rowwise() + b.col(0).transpose();
}

// d_x for y = x w^T + b; accumulates dW, db.
Matrix affine_backward(const Matrix& x, const Matrix& w, const Matrix& d_y,
                       const std::string& prefix, GradientStore& grads) {
  grads.add(prefix + ".w", d_y.transpose() * x);
  grads.add(prefix + ".b", d_y.colwise().sum().transpose());
  return d_y * w;
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore / GradientStore
// ---------------------------------------------------------------------------

void ParamStore::add(const std::string& name, Matrix value, TensorKind kind) {
  require(index_.find(name) == index_.end(), "ParamStore: duplicate tensor " + name);
  require(value.allFinite(), "ParamStore: non-finite tensor " + name);
  index_[name] = tensors_.size();
  tensors_.push_back({name, std::move(value), kind});
}

bool ParamStore::has(const std::string& name) const {
  return index_.find(name) != index_.end();
}

Matrix& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  require(it != index_.end(), "ParamStore: unknown tensor " + name);
  return tensors_[it->second].value;
}

const Matrix& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), "ParamStore: unknown tensor " + name);
  return tensors_[it->second].value;
}

TensorKind ParamStore::kind(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), "ParamStore: unknown tensor " + name);
  return tensors_[it->second].kind;
}

void ParamStore::freeze_prefix(const std::string& prefix) {
  for (auto& t : tensors_)
    if (t.name.rfind(prefix, 0) == 0 && t.kind == TensorKind::kTrainable)
      t.kind = TensorKind::kFrozen;
}

void ParamStore::remove_prefix(const std::string& prefix) {
  std::vector<NamedTensor> kept;
  for (auto& t : tensors_)
    if (t.name.rfind(prefix, 0) != 0) kept.push_back(std::move(t));
  tensors_ = std::move(kept);
  index_.clear();
  for (std::size_t i = 0; i < tensors_.size(); ++i) index_[tensors_[i].name] = i;
}

ParamStore ParamStore::subset(const std::vector<std::string>& prefixes) const {
  ParamStore out;
  for (const auto& t : tensors_)
    for (const auto& p : prefixes)
      if (t.name.rfind(p, 0) == 0) {
        out.add(t.name, t.value, t.kind);
        break;
      }
  return out;
}

void ParamStore::merge(const ParamStore& other) {
  for (const auto& t : other.tensors()) add(t.name, t.value, t.kind);
}

long ParamStore::parameter_count(TensorKind kind_filter) const {
  long n = 0;
  for (const auto& t : tensors_)
    if (t.kind == kind_filter) n += static_cast<long>(t.value.size());
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& t : tensors_) out.push_back(t.name);
  return out;
}

GradientStore::GradientStore(const ParamStore& params) {
  for (const auto& t : params.tensors())
    if (t.kind == TensorKind::kTrainable)
      grads_[t.name] = Matrix::Zero(t.value.rows(), t.value.cols());
}

Matrix& GradientStore::at(const std::string& name) {
  auto it = grads_.find(name);
  require(it != grads_.end(), "GradientStore: no gradient for " + name);
  return it->second;
}

const Matrix& GradientStore::at(const std::string& name) const {
  auto it = grads_.find(name);
  require(it != grads_.end(), "GradientStore: no gradient for " + name);
  return it->second;
}

bool GradientStore::has(const std::string& name) const {
  return grads_.find(name) != grads_.end();
}

void GradientStore::add(const std::string& name, const Matrix& g) {
  auto it = grads_.find(name);
  if (it == grads_.end())
    throw std::invalid_argument(
        "GradientStore: attempt to accumulate gradient for frozen or untracked tensor " +
        name);
  require(it->second.rows() == g.rows() && it->second.cols() == g.cols(),
          "GradientStore: gradient shape mismatch for " + name);
  it->second += g;
}

double GradientStore::global_norm() const {
  double ss = 0.0;
  for (const auto& [name, g] : grads_) ss += g.squaredNorm();
  return std::sqrt(ss);
}

void GradientStore::scale(double factor) {
  for (auto& [name, g] : grads_) g *= factor;
}

void GradientStore::set_zero() {
  for (auto& [name, g] : grads_) g.setZero();
}

// ---------------------------------------------------------------------------
// Configuration / init
// ---------------------------------------------------------------------------

void EncoderConfig::validate() const {
  require(input_length >= 1 && kernel_size >= 1 && stride1 >= 1 && stride2 >= 1,
          "EncoderConfig: dims must be >= 1");
  require(intermediate_dim >= 1 && embed_dim >= 1 && num_heads >= 1 && num_layers >= 1,
          "EncoderConfig: dims must be >= 1");
  require(embed_dim % num_heads == 0,
          "EncoderConfig: embed_dim must be divisible by num_heads");
  require(classifier_dim >= 1 && classifier_layers >= 1,
          "EncoderConfig: classifier dims must be >= 1");
  require(classifier_dropout >= 0.0 && classifier_dropout < 1.0,
          "EncoderConfig: dropout must be in [0,1)");
  require(conv1_out_len() >= kernel_size,
          "EncoderConfig: input too short for the conv stack");
  require(tokens() >= 1, "EncoderConfig: no tokens left after convolutions");
}

void init_encoder_params(const EncoderConfig& cfg, std::uint64_t seed, ParamStore& out) {
  cfg.validate();
  const int k = cfg.kernel_size;
  const int d = cfg.embed_dim;

  add_linear(out, "enc.conv1", cfg.intermediate_dim, 12 * k, seed);
  add_norm(out, "enc.bn1", cfg.intermediate_dim, true);
  add_linear(out, "enc.conv2", d, cfg.intermediate_dim * k, seed);
  add_norm(out, "enc.bn2", d, true);

  Matrix pos(cfg.tokens(), d);
  Rng pos_rng(derive_seed(seed, "enc.pos"));
  for (Eigen::Index i = 0; i < pos.size(); ++i)
    pos.data()[i] = pos_rng.uniform(-0.02, 0.02);
  out.add("enc.pos", std::move(pos));

  for (int blk = 0; blk < cfg.num_layers; ++blk) {
    const std::string p = "enc.blk" + std::to_string(blk);
    add_norm(out, p + ".ln1", d, false);
    add_linear(out, p + ".attn.q", d, d, seed);
    add_linear(out, p + ".attn.k", d, d, seed);
    add_linear(out, p + ".attn.v", d, d, seed);
    add_linear(out, p + ".attn.o", d, d, seed);
    add_norm(out, p + ".ln2", d, false);
    add_linear(out, p + ".ffn.l1", 4 * d, d, seed);
    add_linear(out, p + ".ffn.l2", d, 4 * d, seed);
  }
}

void init_linear_head_params(const std::string& prefix, int in_dim, int out_dim,
                             std::uint64_t seed, ParamStore& out) {
  add_linear(out, prefix, out_dim, in_dim, seed);
}

void init_classifier_params(const EncoderConfig& cfg, std::uint64_t seed,
                            ParamStore& out) {
  int in = cfg.embed_dim;
  for (int layer = 0; layer < cfg.classifier_layers; ++layer) {
    const bool last = layer == cfg.classifier_layers - 1;
    const int width = last ? 2 : cfg.classifier_dim;
    add_linear(out, "clf.l" + std::to_string(layer), width, in, seed);
    in = width;
  }
}

void init_teacher_params(const ModelConfig& cfg, std::uint64_t seed, ParamStore& out) {
  add_linear(out, "teacher.l0", cfg.teacher_hidden, cfg.modality_b_dim, seed);
  add_linear(out, "teacher.l1", cfg.encoder.embed_dim, cfg.teacher_hidden, seed);
  add_linear(out, "teacher.clf", 2, cfg.encoder.embed_dim, seed);
}

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamStore out;
  init_encoder_params(cfg.encoder, seed, out);
  init_linear_head_params("ssl_head", cfg.encoder.embed_dim, cfg.projection_dim(), seed,
                          out);
  init_linear_head_params("proj.ecg", cfg.encoder.embed_dim, cfg.projection_dim(), seed,
                          out);
  init_linear_head_params("proj.cxr", cfg.encoder.embed_dim, cfg.projection_dim(), seed,
                          out);
  init_classifier_params(cfg.encoder, seed, out);
  init_teacher_params(cfg, seed, out);
  return out;
}

long parameter_count(const ModelConfig& cfg) {
  return init_params(cfg, 0).parameter_count(TensorKind::kTrainable);
}

// ---------------------------------------------------------------------------
// Encoder forward / backward
// ---------------------------------------------------------------------------

Matrix ecg_encoder_forward(const ParamStore& params, const EncoderConfig& cfg,
                           const std::vector<Matrix>& batch, Mode mode,
                           EncoderCache* cache) {
  cfg.validate();
  require(!batch.empty(), "encoder: empty batch");
  for (const auto& x : batch)
    require_shape(x, 12, cfg.input_length, "encoder input");

  const auto B = static_cast<Eigen::Index>(batch.size());
  const int l1 = cfg.conv1_out_len();
  const int l2 = cfg.tokens();
  const int d = cfg.embed_dim;
  const int heads = cfg.num_heads;
  const int dh = d / heads;

  EncoderCache local;
  EncoderCache& c = cache ? *cache : local;
  c.mode = mode;
  c.batch = B;

  // Conv patch embedding, stage 1.
  c.p1.resize(B * l1, 12 * cfg.kernel_size);
  for (Eigen::Index s = 0; s < B; ++s)
    c.p1.middleRows(s * l1, l1) = im2col(batch[s], cfg.kernel_size, cfg.stride1, l1);
  c.y1 = affine_forward(c.p1, params.at("enc.conv1.w"), params.at("enc.conv1.b"));
  check_finite(c.y1, "enc.conv1");
  Matrix a1 = c.y1.cwiseMax(0.0);
  auto bn1 = batch_norm_forward(a1, params.at("enc.bn1.gamma"), params.at("enc.bn1.beta"),
                                params.at("enc.bn1.run_mean"),
                                params.at("enc.bn1.run_var"), mode);
  c.bn1 = std::move(bn1.cache);
  c.bn1_out = std::move(bn1.out);
  check_finite(c.bn1_out, "enc.bn1");

  // Stage 2 reads its patches from the per-sample rows of bn1_out.
  c.p2.resize(B * l2, cfg.intermediate_dim * cfg.kernel_size);
  for (Eigen::Index s = 0; s < B; ++s) {
    const Matrix sample = c.bn1_out.middleRows(s * l1, l1).transpose();  // C1 x L1
    c.p2.middleRows(s * l2, l2) = im2col(sample, cfg.kernel_size, cfg.stride2, l2);
  }
  c.y2 = affine_forward(c.p2, params.at("enc.conv2.w"), params.at("enc.conv2.b"));
  check_finite(c.y2, "enc.conv2");
  Matrix a2 = c.y2.cwiseMax(0.0);
  auto bn2 = batch_norm_forward(a2, params.at("enc.bn2.gamma"), params.at("enc.bn2.beta"),
                                params.at("enc.bn2.run_mean"),
                                params.at("enc.bn2.run_var"), mode);
  c.bn2 = std::move(bn2.cache);
  check_finite(bn2.out, "enc.bn2");

  // Tokens + learned positional embedding.
  c.tokens = std::move(bn2.out);
  const Matrix& pos = params.at("enc.pos");
  for (Eigen::Index s = 0; s < B; ++s) c.tokens.middleRows(s * l2, l2) += pos;

  Matrix x = c.tokens;
  c.blocks.resize(static_cast<std::size_t>(cfg.num_layers));
  for (int blk = 0; blk < cfg.num_layers; ++blk) {
    const std::string p = "enc.blk" + std::to_string(blk);
    BlockCache& bc = c.blocks[static_cast<std::size_t>(blk)];
    bc.x_in = x;

    auto ln1 = layer_norm_forward(x, params.at(p + ".ln1.gamma"),
                                  params.at(p + ".ln1.beta"));
    bc.ln1 = std::move(ln1.cache);
    bc.ln1_out = std::move(ln1.out);

    bc.q = affine_forward(bc.ln1_out, params.at(p + ".attn.q.w"),
                          params.at(p + ".attn.q.b"));
    bc.k = affine_forward(bc.ln1_out, params.at(p + ".attn.k.w"),
                          params.at(p + ".attn.k.b"));
    bc.v = affine_forward(bc.ln1_out, params.at(p + ".attn.v.w"),
                          params.at(p + ".attn.v.b"));

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    bc.attn.assign(static_cast<std::size_t>(B * heads), Matrix());
    bc.attn_concat.resize(B * l2, d);
    for (Eigen::Index s = 0; s < B; ++s) {
      for (int h = 0; h < heads; ++h) {
        const auto q = bc.q.block(s * l2, h * dh, l2, dh);
        const auto k = bc.k.block(s * l2, h * dh, l2, dh);
        const auto v = bc.v.block(s * l2, h * dh, l2, dh);
        Matrix scores = q * k.transpose() * scale;
        for (Eigen::Index r = 0; r < scores.rows(); ++r) {
          const double m = scores.row(r).maxCoeff();
          scores.row(r) = (scores.row(r).array() - m).exp();
          scores.row(r) /= scores.row(r).sum();
        }
        bc.attn_concat.block(s * l2, h * dh, l2, dh) = scores * v;
        bc.attn[static_cast<std::size_t>(s * heads + h)] = std::move(scores);
      }
    }
    bc.after_attn = x + affine_forward(bc.attn_concat, params.at(p + ".attn.o.w"),
                                       params.at(p + ".attn.o.b"));
    check_finite(bc.after_attn, (p + ".attn").c_str());

    auto ln2 = layer_norm_forward(bc.after_attn, params.at(p + ".ln2.gamma"),
                                  params.at(p + ".ln2.beta"));
    bc.ln2 = std::move(ln2.cache);
    bc.ln2_out = std::move(ln2.out);

    bc.ffn_pre = affine_forward(bc.ln2_out, params.at(p + ".ffn.l1.w"),
                                params.at(p + ".ffn.l1.b"));
    bc.ffn_act = bc.ffn_pre.unaryExpr([](double t) { return gelu(t); });
    x = bc.after_attn + affine_forward(bc.ffn_act, params.at(p + ".ffn.l2.w"),
                                       params.at(p + ".ffn.l2.b"));
    check_finite(x, (p + ".ffn").c_str());
  }
  c.x_final = x;

  // Adaptive mean pooling to one vector per sample.
  Matrix pooled(B, d);
  for (Eigen::Index s = 0; s < B; ++s)
    pooled.row(s) = x.middleRows(s * l2, l2).colwise().mean();
  check_finite(pooled, "enc.pool");
  return pooled;
}

void ecg_encoder_backward(const ParamStore& params, const EncoderConfig& cfg,
                          const EncoderCache& cache, const Matrix& d_pooled,
                          GradientStore& grads) {
  const Eigen::Index B = cache.batch;
  const int l1 = cfg.conv1_out_len();
  const int l2 = cfg.tokens();
  const int d = cfg.embed_dim;
  const int heads = cfg.num_heads;
  const int dh = d / heads;
  require(B > 0 && cache.blocks.size() == static_cast<std::size_t>(cfg.num_layers),
          "encoder backward: cache does not match config");
  require_shape(d_pooled, B, d, "encoder backward upstream");
  require(cache.x_final.rows() == B * l2, "encoder backward: cache/batch mismatch");

  // Un-pool.
  Matrix dx = Matrix::Zero(B * l2, d);
  const double inv_l = 1.0 / static_cast<double>(l2);
  for (Eigen::Index s = 0; s < B; ++s)
    dx.middleRows(s * l2, l2).rowwise() += d_pooled.row(s) * inv_l;

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int blk = cfg.num_layers - 1; blk >= 0; --blk) {
    const std::string p = "enc.blk" + std::to_string(blk);
    const BlockCache& bc = cache.blocks[static_cast<std::size_t>(blk)];

    // FFN branch.
    Matrix d_act = affine_backward(bc.ffn_act, params.at(p + ".ffn.l2.w"), dx,
                                   p + ".ffn.l2", grads);
    Matrix d_pre =
        d_act.array() * bc.ffn_pre.unaryExpr([](double t) { return gelu_grad(t); }).array();
    Matrix d_ln2_out = affine_backward(bc.ln2_out, params.at(p + ".ffn.l1.w"), d_pre,
                                       p + ".ffn.l1", grads);
    Matrix d_g, d_b;
    Matrix d_after_attn =
        dx + layer_norm_backward(bc.ln2, params.at(p + ".ln2.gamma"), d_ln2_out, d_g, d_b);
    grads.add(p + ".ln2.gamma", d_g);
    grads.add(p + ".ln2.beta", d_b);

    // Attention branch.
    Matrix d_concat = affine_backward(bc.attn_concat, params.at(p + ".attn.o.w"),
                                      d_after_attn, p + ".attn.o", grads);
    Matrix dq(B * l2, d), dk(B * l2, d), dv(B * l2, d);
    for (Eigen::Index s = 0; s < B; ++s) {
      for (int h = 0; h < heads; ++h) {
        const Matrix& probs = bc.attn[static_cast<std::size_t>(s * heads + h)];
        const auto q = bc.q.block(s * l2, h * dh, l2, dh);
        const auto k = bc.k.block(s * l2, h * dh, l2, dh);
        const auto v = bc.v.block(s * l2, h * dh, l2, dh);
        const auto d_o = d_concat.block(s * l2, h * dh, l2, dh);

        const Matrix d_v = probs.transpose() * d_o;
        Matrix d_probs = d_o * v.transpose();
        // Softmax backward per row.
        for (Eigen::Index r = 0; r < d_probs.rows(); ++r) {
          const double dot = d_probs.row(r).dot(probs.row(r));
          d_probs.row(r) = probs.row(r).array() * (d_probs.row(r).array() - dot);
        }
        dq.block(s * l2, h * dh, l2, dh) = d_probs * k * scale;
        dk.block(s * l2, h * dh, l2, dh) = d_probs.transpose() * q * scale;
        dv.block(s * l2, h * dh, l2, dh) = d_v;
      }
    }
    Matrix d_ln1_out =
        affine_backward(bc.ln1_out, params.at(p + ".attn.q.w"), dq, p + ".attn.q", grads);
    d_ln1_out +=
        affine_backward(bc.ln1_out, params.at(p + ".attn.k.w"), dk, p + ".attn.k", grads);
    d_ln1_out +=
        affine_backward(bc.ln1_out, params.at(p + ".attn.v.w"), dv, p + ".attn.v", grads);
    dx = d_after_attn + layer_norm_backward(bc.ln1, params.at(p + ".ln1.gamma"),
                                            d_ln1_out, d_g, d_b);
    grads.add(p + ".ln1.gamma", d_g);
    grads.add(p + ".ln1.beta", d_b);
  }

  // Positional embedding.
  Matrix d_pos = Matrix::Zero(l2, d);
  for (Eigen::Index s = 0; s < B; ++s) d_pos += dx.middleRows(s * l2, l2);
  grads.add("enc.pos", d_pos);

  // Conv stage 2.
  Matrix d_g, d_b;
  Matrix d_a2 = batch_norm_backward(cache.bn2, params.at("enc.bn2.gamma"), cache.mode,
                                    dx, d_g, d_b);
  grads.add("enc.bn2.gamma", d_g);
  grads.add("enc.bn2.beta", d_b);
  Matrix d_y2 = (cache.y2.array() > 0.0).select(d_a2, 0.0);
  Matrix d_p2 = affine_backward(cache.p2, params.at("enc.conv2.w"), d_y2, "enc.conv2", grads);

  // col2im back onto bn1's output rows.
  Matrix d_bn1_out = Matrix::Zero(B * l1, cfg.intermediate_dim);
  for (Eigen::Index s = 0; s < B; ++s)
    for (int t = 0; t < l2; ++t)
      for (int ch = 0; ch < cfg.intermediate_dim; ++ch)
        for (int k = 0; k < cfg.kernel_size; ++k)
          d_bn1_out(s * l1 + t * cfg.stride2 + k, ch) +=
              d_p2(s * l2 + t, ch * cfg.kernel_size + k);

  Matrix d_a1 = batch_norm_backward(cache.bn1, params.at("enc.bn1.gamma"), cache.mode,
                                    d_bn1_out, d_g, d_b);
  grads.add("enc.bn1.gamma", d_g);
  grads.add("enc.bn1.beta", d_b);
  Matrix d_y1 = (cache.y1.array() > 0.0).select(d_a1, 0.0);
  affine_backward(cache.p1, params.at("enc.conv1.w"), d_y1, "enc.conv1", grads);
}

void commit_bn_updates(ParamStore& params, const EncoderCache& cache) {
  if (cache.mode != Mode::kTrain) return;
  params.at("enc.bn1.run_mean").col(0) = cache.bn1.new_running_mean;
  params.at("enc.bn1.run_var").col(0) = cache.bn1.new_running_var;
  params.at("enc.bn2.run_mean").col(0) = cache.bn2.new_running_mean;
  params.at("enc.bn2.run_var").col(0) = cache.bn2.new_running_var;
}

// ---------------------------------------------------------------------------
// Projection heads
// ---------------------------------------------------------------------------

ProjectionResult projection_forward(const ParamStore& params, const std::string& prefix,
                                    const Matrix& embeddings, bool normalize) {
  ProjectionResult r;
  r.pre = affine_forward(embeddings, params.at(prefix + ".w"), params.at(prefix + ".b"));
  check_finite(r.pre, prefix.c_str());
  r.valid.assign(static_cast<std::size_t>(r.pre.rows()), true);
  if (!normalize) {
    r.z = r.pre;
    return r;
  }
  r.z = r.pre;
  for (Eigen::Index i = 0; i < r.pre.rows(); ++i) {
    const double n = r.pre.row(i).norm();
    if (n == 0.0) {
      r.valid[static_cast<std::size_t>(i)] = false;
      r.z.row(i).setZero();
    } else {
      r.z.row(i) /= n;
    }
  }
  return r;
}

Matrix projection_backward(const ParamStore& params, const std::string& prefix,
                           const Matrix& embeddings, const ProjectionResult& result,
                           const Matrix& d_z, bool normalize, GradientStore& grads) {
  Matrix d_pre;
  if (!normalize) {
    d_pre = d_z;
  } else {
    d_pre = Matrix::Zero(d_z.rows(), d_z.cols());
    for (Eigen::Index i = 0; i < d_z.rows(); ++i) {
      if (!result.valid[static_cast<std::size_t>(i)]) continue;
      const double n = result.pre.row(i).norm();
      const double dot = d_z.row(i).dot(result.z.row(i));
      d_pre.row(i) = (d_z.row(i) - dot * result.z.row(i)) / n;
    }
  }
  return affine_backward(embeddings, params.at(prefix + ".w"), d_pre, prefix, grads);
}

// ---------------------------------------------------------------------------
// MLPs: classifier and teacher
// ---------------------------------------------------------------------------

namespace {

// Shared fully-connected stack. Hidden layers use ReLU; dropout_p > 0 in
// train mode applies inverted dropout after each hidden activation.
Matrix mlp_forward(const ParamStore& params, const std::string& prefix, int layers,
                   const Matrix& input, double dropout_p, Mode mode, std::uint64_t seed,
                   MlpCache* cache) {
  MlpCache local;
  MlpCache& c = cache ? *cache : local;
  c.input = input;
  c.pre.clear();
  c.post.clear();
  c.masks.clear();

  Rng rng(derive_seed(seed, prefix + ".dropout"));
  Matrix x = input;
  for (int layer = 0; layer < layers; ++layer) {
    const std::string lp = prefix + ".l" + std::to_string(layer);
    Matrix y = affine_forward(x, params.at(lp + ".w"), params.at(lp + ".b"));
    check_finite(y, lp.c_str());
    c.pre.push_back(y);
    const bool last = layer == layers - 1;
    if (!last) {
      y = y.cwiseMax(0.0);
      if (mode == Mode::kTrain && dropout_p > 0.0) {
        Matrix mask(y.rows(), y.cols());
        const double keep = 1.0 - dropout_p;
        for (Eigen::Index i = 0; i < mask.size(); ++i)
          mask.data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
        y = y.array() * mask.array();
        c.masks.push_back(std::move(mask));
      } else {
        c.masks.emplace_back();
      }
    }
    c.post.push_back(y);
    x = y;
  }
  return x;
}

Matrix mlp_backward(const ParamStore& params, const std::string& prefix, int layers,
                    const MlpCache& cache, const Matrix& d_out, GradientStore& grads) {
  require(cache.pre.size() == static_cast<std::size_t>(layers),
          "mlp backward: cache does not match layer count");
  Matrix d = d_out;
  for (int layer = layers - 1; layer >= 0; --layer) {
    const std::string lp = prefix + ".l" + std::to_string(layer);
    const bool last = layer == layers - 1;
    if (!last) {
      const Matrix& mask = cache.masks[static_cast<std::size_t>(layer)];
      if (mask.size() > 0) d = d.array() * mask.array();
      d = (cache.pre[static_cast<std::size_t>(layer)].array() > 0.0).select(d, 0.0);
    }
    const Matrix& in =
        layer == 0 ? cache.input : cache.post[static_cast<std::size_t>(layer - 1)];
    d = affine_backward(in, params.at(lp + ".w"), d, lp, grads);
  }
  return d;
}

}  // namespace

Matrix classifier_forward(const ParamStore& params, const EncoderConfig& cfg,
                          const Matrix& embeddings, Mode mode, std::uint64_t seed,
                          MlpCache* cache) {
  require(embeddings.cols() == cfg.embed_dim, "classifier: embedding dim mismatch");
  return mlp_forward(params, "clf", cfg.classifier_layers, embeddings,
                     cfg.classifier_dropout, mode, seed, cache);
}

Matrix classifier_backward(const ParamStore& params, const EncoderConfig& cfg,
                           const MlpCache& cache, const Matrix& d_logits,
                           GradientStore& grads) {
  return mlp_backward(params, "clf", cfg.classifier_layers, cache, d_logits, grads);
}

Matrix teacher_forward(const ParamStore& params, const Matrix& features,
                       MlpCache* cache) {
  require(features.cols() == params.at("teacher.l0.w").cols(),
          "teacher: feature dim mismatch");
  return mlp_forward(params, "teacher", 2, features, 0.0, Mode::kEval, 0, cache);
}

Matrix teacher_backward(const ParamStore& params, const MlpCache& cache,
                        const Matrix& d_out, GradientStore& grads) {
  return mlp_backward(params, "teacher", 2, cache, d_out, grads);
}

Matrix teacher_classifier_forward(const ParamStore& params, const Matrix& embeddings,
                                  MlpCache* cache) {
  if (cache) cache->input = embeddings;
  return affine_forward(embeddings, params.at("teacher.clf.w"), params.at("teacher.clf.b"));
}

Matrix teacher_classifier_backward(const ParamStore& params, const MlpCache& cache,
                                   const Matrix& d_logits, GradientStore& grads) {
  return affine_backward(cache.input, params.at("teacher.clf.w"), d_logits, "teacher.clf",
                         grads);
}

// ---------------------------------------------------------------------------
// Composed classification path
// ---------------------------------------------------------------------------

Matrix classify_forward(const ParamStore& params, const EncoderConfig& cfg,
                        const std::vector<Matrix>& batch, Mode mode, std::uint64_t seed,
                        ClassifyCache* cache) {
  ClassifyCache local;
  ClassifyCache& c = cache ? *cache : local;
  const Matrix emb = ecg_encoder_forward(params, cfg, batch, mode, &c.encoder);
  return classifier_forward(params, cfg, emb, mode, seed, &c.classifier);
}

GradientStore model_backward(const ParamStore& params, const EncoderConfig& cfg,
                             const ClassifyCache& cache, const Matrix& d_logits) {
  GradientStore grads(params);
  const Matrix d_emb =
      classifier_backward(params, cfg, cache.classifier, d_logits, grads);
  ecg_encoder_backward(params, cfg, cache.encoder, d_emb, grads);
  return grads;
}

}  // namespace xmodal
