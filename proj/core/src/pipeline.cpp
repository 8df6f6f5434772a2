#include "xmodal/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "xmodal/checkpoint.hpp"
#include "xmodal/losses.hpp"
#include "xmodal/optim.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/signal.hpp"

namespace xmodal {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Vector positive_scores(const Matrix& logits) {
  Vector s(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = std::max(logits(i, 0), logits(i, 1));
    const double e0 = std::exp(logits(i, 0) - m);
    const double e1 = std::exp(logits(i, 1) - m);
    s[i] = e1 / (e0 + e1);
  }
  return s;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
}

std::string curve_csv(const StageReport& r) {
  std::string out = "epoch,train_loss,val_loss\n";
  char buf[96];
  for (const auto& row : r.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", row.epoch, row.train_loss,
                  row.val_loss);
    out += buf;
  }
  return out;
}

json metrics_json(const std::map<std::string, double>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

// Snapshot of the tensors for byte-level freeze verification.
std::vector<Matrix> tensor_snapshot(const ParamStore& params, const std::string& prefix) {
  std::vector<Matrix> out;
  for (const auto& t : params.tensors())
    if (t.name.rfind(prefix, 0) == 0) out.push_back(t.value);
  return out;
}

bool snapshot_equal(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols()) return false;
    if (std::memcmp(a[i].data(), b[i].data(),
                    sizeof(double) * static_cast<std::size_t>(a[i].size())) != 0)
      return false;
  }
  return true;
}

struct BestTracker {
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  ParamStore best_params;

  void observe(int epoch, double val_loss, const ParamStore& params) {
    if (std::isfinite(val_loss) && val_loss < best_val) {
      best_val = val_loss;
      best_epoch = epoch;
      best_params = params;
    }
  }

  // Lowest validation loss, final epoch as fallback.
  ParamStore resolve(const ParamStore& final_params, int final_epoch, int* chosen) {
    if (best_epoch >= 0) {
      *chosen = best_epoch;
      return best_params;
    }
    *chosen = final_epoch;
    return final_params;
  }
};

}  // namespace

std::string variant_from_flags(const TrainConfig& cfg) {
  if (cfg.no_ssl && cfg.no_ahnp) return "no_ssl_no_ahnp";
  if (cfg.no_ssl) return "no_ssl";
  if (cfg.no_ahnp) return "no_ahnp";
  return "full";
}

std::shared_ptr<const Dataset> load_or_generate(const TrainConfig& cfg) {
  if (!cfg.dataset_path.empty())
    return std::make_shared<const Dataset>(read_dataset(cfg.dataset_path));
  return std::make_shared<const Dataset>(generate_dataset(cfg.generator));
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

Experiment::Experiment(const TrainConfig& cfg, std::uint64_t seed,
                       std::shared_ptr<const Dataset> data, SplitAssignment split,
                       std::string run_dir)
    : cfg_(cfg),
      seed_(seed),
      data_(std::move(data)),
      split_(std::move(split)),
      run_dir_(std::move(run_dir)) {
  cfg_.validate();
  require(data_ && !data_->records.empty(), "experiment: empty dataset");
  require(cfg_.model.modality_b_dim == data_->modality_b_dim,
          "experiment: model modality_b_dim does not match the dataset");
  access_counts_.assign(data_->size(), 0);

  train_all_ = split_.indices(*data_, Split::kTrain);
  val_all_ = split_.indices(*data_, Split::kVal);
  test_all_ = split_.indices(*data_, Split::kTest);
  for (std::size_t i : train_all_)
    if (data_->records[i].ecg_present) train_ecg_.push_back(i);
  for (std::size_t i : val_all_)
    if (data_->records[i].ecg_present) val_ecg_.push_back(i);
  for (std::size_t i : test_all_)
    if (data_->records[i].ecg_present) test_ecg_.push_back(i);
  require(!train_ecg_.empty() && !val_ecg_.empty() && !test_ecg_.empty(),
          "experiment: a split has no ECG-bearing records");

  fs::create_directories(run_dir_);
}

const PairedSample& Experiment::record(std::size_t index) {
  ++access_counts_[index];
  return data_->records[index];
}

void Experiment::reset_access_counts() {
  std::fill(access_counts_.begin(), access_counts_.end(), 0);
}

void Experiment::adopt_existing_checkpoints() {
  if (fs::exists(run_dir_ + "/teacher.ckpt")) teacher_ckpt_ = run_dir_ + "/teacher.ckpt";
  if (fs::exists(run_dir_ + "/ssl.ckpt")) ssl_ckpt_ = run_dir_ + "/ssl.ckpt";
}

std::vector<Matrix> Experiment::ecg_batch(const std::vector<std::size_t>& idx,
                                          bool augment_vcg, bool augment_time,
                                          std::uint64_t aug_seed) {
  std::vector<Matrix> out;
  out.reserve(idx.size());
  for (std::size_t slot = 0; slot < idx.size(); ++slot) {
    const PairedSample& r = record(idx[slot]);
    require(r.ecg_present, "ecg_batch: record has no ECG");
    if (!augment_vcg && !augment_time) {
      out.push_back(r.ecg);
      continue;
    }
    EcgRecord rec;
    rec.samples = r.ecg;
    rec.sample_rate = 100.0;
    rec.subject_id = r.subject_id;
    rec.label = r.label;
    AugmentConfig ac = cfg_.augment;
    ac.seed = derive_seed(aug_seed, "slot", slot);
    out.push_back(augment_vcg ? vcg_augment(rec, ac).samples
                              : time_domain_augment(rec, ac).samples);
  }
  return out;
}

Matrix Experiment::feature_batch(const std::vector<std::size_t>& idx) {
  Matrix f(static_cast<Eigen::Index>(idx.size()), data_->modality_b_dim);
  for (std::size_t i = 0; i < idx.size(); ++i)
    f.row(static_cast<Eigen::Index>(i)) = record(idx[i]).modality_b.transpose();
  return f;
}

IntVector Experiment::label_batch(const std::vector<std::size_t>& idx) {
  IntVector y(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i)
    y[static_cast<Eigen::Index>(i)] = data_->records[idx[i]].label;
  return y;
}

// --- teacher ---------------------------------------------------------------

double Experiment::teacher_val_loss(const ParamStore& params, double* auroc_out) {
  const int chunk = cfg_.teacher.batch_size;
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t start = 0; start < val_all_.size();
       start += static_cast<std::size_t>(chunk)) {
    std::vector<std::size_t> idx(
        val_all_.begin() + static_cast<std::ptrdiff_t>(start),
        val_all_.begin() +
            static_cast<std::ptrdiff_t>(std::min(start + chunk, val_all_.size())));
    const Matrix feats = feature_batch(idx);
    const IntVector y = label_batch(idx);
    const Matrix emb = teacher_forward(params, feats);
    const Matrix logits = teacher_classifier_forward(params, emb);
    total += cross_entropy_loss(logits, y).value * static_cast<double>(idx.size());
    count += idx.size();
    const Vector s = positive_scores(logits);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      scores.push_back(s[i]);
      labels.push_back(y[i]);
    }
  }
  if (auroc_out) {
    Vector sv = Eigen::Map<Vector>(scores.data(), static_cast<Eigen::Index>(scores.size()));
    IntVector lv(static_cast<Eigen::Index>(labels.size()));
    for (std::size_t i = 0; i < labels.size(); ++i)
      lv[static_cast<Eigen::Index>(i)] = labels[i];
    *auroc_out = auroc(sv, lv);
  }
  return total / static_cast<double>(count);
}

StageReport Experiment::train_teacher() {
  const auto t0 = Clock::now();
  const StageConfig& sc = cfg_.teacher;
  StageReport rep;
  rep.stage = "teacher";
  rep.config_hash = config_hash_hex(cfg_);

  ParamStore params;
  init_teacher_params(cfg_.model, derive_seed(seed_, "init.teacher"), params);

  std::vector<int> labels;
  for (std::size_t i : train_all_) labels.push_back(data_->records[i].label);
  WeightedBatchSampler sampler(labels, sc.batch_size, cfg_.minority_target,
                               derive_seed(seed_, "teacher.sampler"));
  const int steps = std::max<int>(1, static_cast<int>(train_all_.size()) / sc.batch_size);
  const ScheduleConfig sched = sc.schedule(steps);

  OptimizerState opt;
  opt.hyper = {0.9, 0.999, 1e-8, sc.weight_decay, sc.decoupled};
  BestTracker best;
  double best_auroc = -1.0;
  int best_auroc_epoch = -1;
  long global_step = 0;

  for (int epoch = 0; epoch < sc.epochs; ++epoch) {
    double train_sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      const auto sub = sampler.next();
      std::vector<std::size_t> idx;
      idx.reserve(sub.size());
      for (std::size_t s : sub) idx.push_back(train_all_[s]);

      const Matrix feats = feature_batch(idx);
      const IntVector y = label_batch(idx);
      MlpCache enc_cache, clf_cache;
      const Matrix emb = teacher_forward(params, feats, &enc_cache);
      const Matrix logits = teacher_classifier_forward(params, emb, &clf_cache);
      const LossOutput lo = cross_entropy_loss(logits, y);

      GradientStore grads(params);
      const Matrix d_emb =
          teacher_classifier_backward(params, clf_cache, lo.grad_e, grads);
      teacher_backward(params, enc_cache, d_emb, grads);
      clip_global_norm(grads, sc.clip_norm);
      adaptive_moment_step(params, grads, opt, lr_at(global_step++, sched));
      train_sum += lo.value;
    }
    double val_auroc = 0.0;
    const double val_loss = teacher_val_loss(params, &val_auroc);
    require(std::isfinite(val_loss), "teacher: non-finite validation loss");
    rep.epochs.push_back({epoch, train_sum / steps, val_loss});
    best.observe(epoch, val_loss, params);

    if (val_auroc > best_auroc + 1e-4) {
      best_auroc = val_auroc;
      best_auroc_epoch = epoch;
    } else if (sc.patience > 0 && epoch - best_auroc_epoch >= sc.patience) {
      break;  // validation AUROC plateau
    }
  }

  params = best.resolve(params, static_cast<int>(rep.epochs.size()) - 1, &rep.best_epoch);
  params.freeze_prefix("teacher.");
  round_to_f32(params);

  double val_auroc = 0.0;
  const double val_loss = teacher_val_loss(params, &val_auroc);
  rep.final_metrics["val_auroc"] = val_auroc;
  rep.final_metrics["val_loss"] = val_loss;

  teacher_ckpt_ = run_dir_ + "/teacher.ckpt";
  save_checkpoint(teacher_ckpt_, params,
                  std::string("{\"stage\":\"teacher\",\"config_hash\":\"") +
                      rep.config_hash + "\"}");
  rep.checkpoint_path = teacher_ckpt_;
  rep.wall_clock_s = seconds_since(t0);
  write_stage_outputs(rep);
  return rep;
}

// --- SSL pre-training --------------------------------------------------------

double Experiment::ssl_val_loss(const ParamStore& params) {
  const int chunk = cfg_.ssl.batch_size;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + 2 <= val_ecg_.size();
       start += static_cast<std::size_t>(chunk)) {
    const std::size_t stop = std::min(start + chunk, val_ecg_.size());
    if (stop - start < 2) break;
    std::vector<std::size_t> idx(val_ecg_.begin() + static_cast<std::ptrdiff_t>(start),
                                 val_ecg_.begin() + static_cast<std::ptrdiff_t>(stop));
    // Fixed per-record view seeds: the validation pairs never change.
    std::vector<Matrix> views;
    views.reserve(2 * idx.size());
    for (int view = 0; view < 2; ++view) {
      for (std::size_t slot = 0; slot < idx.size(); ++slot) {
        const PairedSample& r = record(idx[slot]);
        EcgRecord rec;
        rec.samples = r.ecg;
        rec.sample_rate = 100.0;
        AugmentConfig ac = cfg_.augment;
        ac.seed = derive_seed(seed_, "ssl.valview", idx[slot],
                              static_cast<std::uint64_t>(view));
        views.push_back(vcg_augment(rec, ac).samples);
      }
    }
    const Matrix emb = ecg_encoder_forward(params, cfg_.model.encoder, views, Mode::kEval);
    const ProjectionResult proj = projection_forward(params, "ssl_head", emb,
                                                     cfg_.model.normalize_projections);
    const auto b = static_cast<Eigen::Index>(idx.size());
    EmbeddingBatch v1{proj.z.topRows(b), IntVector()};
    EmbeddingBatch v2{proj.z.bottomRows(b), IntVector()};
    total += ntxent_loss(v1, v2, cfg_.ssl.tau).value * static_cast<double>(idx.size());
    count += idx.size();
  }
  return total / static_cast<double>(count);
}

StageReport Experiment::pretrain_ssl() {
  const auto t0 = Clock::now();
  const StageConfig& sc = cfg_.ssl;
  require(sc.batch_size >= 2, "ssl: batch size must be >= 2");
  StageReport rep;
  rep.stage = "ssl";
  rep.config_hash = config_hash_hex(cfg_);

  ParamStore params;
  init_encoder_params(cfg_.model.encoder, derive_seed(seed_, "init.encoder"), params);
  init_linear_head_params("ssl_head", cfg_.model.encoder.embed_dim,
                          cfg_.model.projection_dim(), derive_seed(seed_, "init.ssl_head"),
                          params);

  const int steps = std::max<int>(1, static_cast<int>(train_ecg_.size()) / sc.batch_size);
  const ScheduleConfig sched = sc.schedule(steps);
  OptimizerState opt;
  opt.hyper = {0.9, 0.999, 1e-8, sc.weight_decay, sc.decoupled};
  BestTracker best;
  long global_step = 0;

  std::vector<std::size_t> order = train_ecg_;
  for (int epoch = 0; epoch < sc.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(seed_, "ssl.shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double train_sum = 0.0;
    int used_steps = 0;
    for (int step = 0; step < steps; ++step) {
      const std::size_t start = static_cast<std::size_t>(step) * sc.batch_size;
      const std::size_t stop = std::min(start + sc.batch_size, order.size());
      if (stop - start < 2) break;
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(stop));
      const auto b = static_cast<Eigen::Index>(idx.size());

      std::vector<Matrix> views;
      views.reserve(2 * idx.size());
      for (int view = 0; view < 2; ++view) {
        for (std::size_t slot = 0; slot < idx.size(); ++slot) {
          const PairedSample& r = record(idx[slot]);
          EcgRecord rec;
          rec.samples = r.ecg;
          rec.sample_rate = 100.0;
          AugmentConfig ac = cfg_.augment;
          ac.seed = derive_seed(seed_, "ssl.aug", static_cast<std::uint64_t>(global_step),
                                static_cast<std::uint64_t>(slot * 2 + view));
          views.push_back(vcg_augment(rec, ac).samples);
        }
      }

      EncoderCache cache;
      const Matrix emb =
          ecg_encoder_forward(params, cfg_.model.encoder, views, Mode::kTrain, &cache);
      const ProjectionResult proj = projection_forward(params, "ssl_head", emb,
                                                       cfg_.model.normalize_projections);
      EmbeddingBatch v1{proj.z.topRows(b), IntVector()};
      EmbeddingBatch v2{proj.z.bottomRows(b), IntVector()};
      const LossOutput lo = ntxent_loss(v1, v2, sc.tau);

      Matrix d_z(2 * b, proj.z.cols());
      d_z.topRows(b) = lo.grad_e;
      d_z.bottomRows(b) = lo.grad_x;

      GradientStore grads(params);
      const Matrix d_emb = projection_backward(params, "ssl_head", emb, proj, d_z,
                                               cfg_.model.normalize_projections, grads);
      ecg_encoder_backward(params, cfg_.model.encoder, cache, d_emb, grads);
      clip_global_norm(grads, sc.clip_norm);
      adaptive_moment_step(params, grads, opt, lr_at(global_step++, sched));
      commit_bn_updates(params, cache);
      train_sum += lo.value;
      ++used_steps;
    }
    const double val_loss = ssl_val_loss(params);
    require(std::isfinite(val_loss), "ssl: non-finite validation loss");
    rep.epochs.push_back({epoch, train_sum / std::max(1, used_steps), val_loss});
    best.observe(epoch, val_loss, params);
  }

  ParamStore chosen =
      best.resolve(params, static_cast<int>(rep.epochs.size()) - 1, &rep.best_epoch);
  round_to_f32(chosen);
  // The SSL projection head is discarded; only the encoder ships.
  ParamStore to_save = chosen.subset({"enc."});

  ssl_ckpt_ = run_dir_ + "/ssl.ckpt";
  save_checkpoint(ssl_ckpt_, to_save,
                  std::string("{\"stage\":\"ssl\",\"config_hash\":\"") + rep.config_hash +
                      "\"}");
  rep.checkpoint_path = ssl_ckpt_;
  rep.wall_clock_s = seconds_since(t0);
  write_stage_outputs(rep);
  return rep;
}

// --- cross-modal alignment ---------------------------------------------------

double Experiment::align_val_loss(const ParamStore& params, bool use_ahnp) {
  const int chunk = cfg_.align.batch_size;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + 2 <= val_ecg_.size();
       start += static_cast<std::size_t>(chunk)) {
    const std::size_t stop = std::min(start + chunk, val_ecg_.size());
    if (stop - start < 2) break;
    std::vector<std::size_t> idx(val_ecg_.begin() + static_cast<std::ptrdiff_t>(start),
                                 val_ecg_.begin() + static_cast<std::ptrdiff_t>(stop));
    const std::vector<Matrix> ecgs = ecg_batch(idx, false, false, 0);
    const Matrix emb_e =
        ecg_encoder_forward(params, cfg_.model.encoder, ecgs, Mode::kEval);
    const ProjectionResult ze = projection_forward(params, "proj.ecg", emb_e,
                                                   cfg_.model.normalize_projections);
    const Matrix emb_x = teacher_forward(params, feature_batch(idx));
    const ProjectionResult zx = projection_forward(params, "proj.cxr", emb_x,
                                                   cfg_.model.normalize_projections);
    const IntVector y = label_batch(idx);
    EmbeddingBatch be{ze.z, y};
    EmbeddingBatch bx{zx.z, y};
    const double v = use_ahnp ? ahnp_supcma_loss(be, bx, cfg_.ahnp).value
                              : supcma_loss(be, bx, cfg_.ahnp).value;
    total += v * static_cast<double>(idx.size());
    count += idx.size();
  }
  return total / static_cast<double>(count);
}

StageReport Experiment::align_crossmodal(bool use_ssl, bool use_ahnp,
                                         const std::string& variant_tag) {
  const auto t0 = Clock::now();
  const StageConfig& sc = cfg_.align;
  require(!teacher_ckpt_.empty(), "align: teacher checkpoint missing (run teacher first)");
  StageReport rep;
  rep.stage = "align_" + variant_tag;
  rep.config_hash = config_hash_hex(cfg_);

  ParamStore params;
  if (use_ssl) {
    require(!ssl_ckpt_.empty(), "align: SSL checkpoint missing (run pretrain first)");
    params = load_checkpoint(ssl_ckpt_).params.subset({"enc."});
  } else {
    init_encoder_params(cfg_.model.encoder, derive_seed(seed_, "init.encoder"), params);
    round_to_f32(params);
  }
  init_linear_head_params("proj.ecg", cfg_.model.encoder.embed_dim,
                          cfg_.model.projection_dim(), derive_seed(seed_, "init.proj.ecg"),
                          params);
  init_linear_head_params("proj.cxr", cfg_.model.encoder.embed_dim,
                          cfg_.model.projection_dim(), derive_seed(seed_, "init.proj.cxr"),
                          params);
  {
    ParamStore teacher = load_checkpoint(teacher_ckpt_).params.subset({"teacher."});
    teacher.freeze_prefix("teacher.");
    params.merge(teacher);
  }
  const std::vector<Matrix> teacher_before = tensor_snapshot(params, "teacher.");

  std::vector<int> labels;
  for (std::size_t i : train_ecg_) labels.push_back(data_->records[i].label);
  WeightedBatchSampler sampler(labels, sc.batch_size, cfg_.minority_target,
                               derive_seed(seed_, "align.sampler"));
  const int steps = std::max<int>(1, static_cast<int>(train_ecg_.size()) / sc.batch_size);
  const ScheduleConfig sched = sc.schedule(steps);
  OptimizerState opt;
  opt.hyper = {0.9, 0.999, 1e-8, sc.weight_decay, sc.decoupled};
  ParamGroups groups;
  groups.prefix_multipliers["proj."] = sc.proj_lr_scale;
  BestTracker best;
  long global_step = 0;

  for (int epoch = 0; epoch < sc.epochs; ++epoch) {
    double train_sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      const auto sub = sampler.next();
      std::vector<std::size_t> idx;
      idx.reserve(sub.size());
      for (std::size_t s : sub) idx.push_back(train_ecg_[s]);

      const std::vector<Matrix> ecgs =
          ecg_batch(idx, false, true,
                    derive_seed(seed_, "align.aug", static_cast<std::uint64_t>(global_step)));
      EncoderCache cache;
      const Matrix emb_e =
          ecg_encoder_forward(params, cfg_.model.encoder, ecgs, Mode::kTrain, &cache);
      const ProjectionResult ze = projection_forward(params, "proj.ecg", emb_e,
                                                     cfg_.model.normalize_projections);
      const Matrix feats = feature_batch(idx);
      const Matrix emb_x = teacher_forward(params, feats);
      const ProjectionResult zx = projection_forward(params, "proj.cxr", emb_x,
                                                     cfg_.model.normalize_projections);
      const IntVector y = label_batch(idx);
      EmbeddingBatch be{ze.z, y};
      EmbeddingBatch bx{zx.z, y};
      const LossOutput lo = use_ahnp ? ahnp_supcma_loss(be, bx, cfg_.ahnp)
                                     : supcma_loss(be, bx, cfg_.ahnp);

      GradientStore grads(params);
      const Matrix d_emb_e = projection_backward(params, "proj.ecg", emb_e, ze, lo.grad_e,
                                                 cfg_.model.normalize_projections, grads);
      // The teacher is frozen: gradients stop at its projection head.
      projection_backward(params, "proj.cxr", emb_x, zx, lo.grad_x,
                          cfg_.model.normalize_projections, grads);
      ecg_encoder_backward(params, cfg_.model.encoder, cache, d_emb_e, grads);
      clip_global_norm(grads, sc.clip_norm);
      adaptive_moment_step(params, grads, opt, lr_at(global_step++, sched), &groups);
      commit_bn_updates(params, cache);
      train_sum += lo.value;
    }
    const double val_loss = align_val_loss(params, use_ahnp);
    require(std::isfinite(val_loss), "align: non-finite validation loss");
    rep.epochs.push_back({epoch, train_sum / steps, val_loss});
    best.observe(epoch, val_loss, params);
  }

  ParamStore chosen =
      best.resolve(params, static_cast<int>(rep.epochs.size()) - 1, &rep.best_epoch);
  if (!snapshot_equal(teacher_before, tensor_snapshot(params, "teacher.")))
    throw std::runtime_error("align: frozen teacher parameters changed");
  rep.final_metrics["val_loss"] = best.best_epoch >= 0 ? best.best_val
                                                       : rep.epochs.back().val_loss;

  round_to_f32(chosen);
  ParamStore to_save = chosen.subset({"enc.", "proj."});
  const std::string path = run_dir_ + "/align_" + variant_tag + ".ckpt";
  save_checkpoint(path, to_save,
                  std::string("{\"stage\":\"align\",\"variant\":\"") + variant_tag +
                      "\",\"config_hash\":\"" + rep.config_hash + "\"}");
  rep.checkpoint_path = path;
  rep.wall_clock_s = seconds_since(t0);
  write_stage_outputs(rep);
  return rep;
}

// --- fine-tuning / direct baseline -------------------------------------------

double Experiment::ce_val_loss(const ParamStore& params,
                               const std::vector<std::size_t>& val_idx) {
  const int chunk = cfg_.finetune.batch_size;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < val_idx.size();
       start += static_cast<std::size_t>(chunk)) {
    const std::size_t stop = std::min(start + chunk, val_idx.size());
    std::vector<std::size_t> idx(val_idx.begin() + static_cast<std::ptrdiff_t>(start),
                                 val_idx.begin() + static_cast<std::ptrdiff_t>(stop));
    const std::vector<Matrix> ecgs = ecg_batch(idx, false, false, 0);
    const Matrix logits =
        classify_forward(params, cfg_.model.encoder, ecgs, Mode::kEval, 0);
    total += cross_entropy_loss(logits, label_batch(idx)).value *
             static_cast<double>(idx.size());
    count += idx.size();
  }
  return total / static_cast<double>(count);
}

MetricReport Experiment::test_evaluation(const ParamStore& params) {
  const int chunk = cfg_.finetune.batch_size;
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t start = 0; start < test_ecg_.size();
       start += static_cast<std::size_t>(chunk)) {
    const std::size_t stop = std::min(start + chunk, test_ecg_.size());
    std::vector<std::size_t> idx(test_ecg_.begin() + static_cast<std::ptrdiff_t>(start),
                                 test_ecg_.begin() + static_cast<std::ptrdiff_t>(stop));
    const std::vector<Matrix> ecgs = ecg_batch(idx, false, false, 0);
    const Matrix logits =
        classify_forward(params, cfg_.model.encoder, ecgs, Mode::kEval, 0);
    const Vector s = positive_scores(logits);
    const IntVector y = label_batch(idx);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      scores.push_back(s[i]);
      labels.push_back(y[i]);
    }
  }
  Vector sv = Eigen::Map<Vector>(scores.data(), static_cast<Eigen::Index>(scores.size()));
  IntVector lv(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i)
    lv[static_cast<Eigen::Index>(i)] = labels[i];
  return evaluate(sv, lv, 0.5);
}

StageReport Experiment::finetune(const std::string& variant_tag) {
  const auto t0 = Clock::now();
  const std::string align_path = run_dir_ + "/align_" + variant_tag + ".ckpt";
  if (!fs::exists(align_path))
    throw std::runtime_error("finetune: missing aligned checkpoint " + align_path);

  // Projection heads are discarded; a fresh classifier is attached.
  ParamStore params = load_checkpoint(align_path).params.subset({"enc."});
  init_classifier_params(cfg_.model.encoder, derive_seed(seed_, "init.clf"), params);

  StageReport rep;
  rep.stage = "finetune_" + variant_tag;
  rep.config_hash = config_hash_hex(cfg_);

  const StageConfig& sc = cfg_.finetune;
  std::vector<int> labels;
  for (std::size_t i : train_ecg_) labels.push_back(data_->records[i].label);
  WeightedBatchSampler sampler(labels, sc.batch_size, cfg_.minority_target,
                               derive_seed(seed_, "finetune.sampler"));
  const int steps = std::max<int>(1, static_cast<int>(train_ecg_.size()) / sc.batch_size);
  const ScheduleConfig sched = sc.schedule(steps);
  OptimizerState opt;
  opt.hyper = {0.9, 0.999, 1e-8, sc.weight_decay, sc.decoupled};
  BestTracker best;
  long global_step = 0;

  for (int epoch = 0; epoch < sc.epochs; ++epoch) {
    double train_sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      const auto sub = sampler.next();
      std::vector<std::size_t> idx;
      idx.reserve(sub.size());
      for (std::size_t s : sub) idx.push_back(train_ecg_[s]);

      const std::vector<Matrix> ecgs =
          ecg_batch(idx, false, true,
                    derive_seed(seed_, "finetune.aug", static_cast<std::uint64_t>(global_step)));
      ClassifyCache cache;
      const Matrix logits = classify_forward(
          params, cfg_.model.encoder, ecgs, Mode::kTrain,
          derive_seed(seed_, "finetune.dropout", static_cast<std::uint64_t>(global_step)),
          &cache);
      const LossOutput lo = cross_entropy_loss(logits, label_batch(idx));
      GradientStore grads = model_backward(params, cfg_.model.encoder, cache, lo.grad_e);
      clip_global_norm(grads, sc.clip_norm);
      adaptive_moment_step(params, grads, opt, lr_at(global_step++, sched));
      commit_bn_updates(params, cache.encoder);
      train_sum += lo.value;
    }
    const double val_loss = ce_val_loss(params, val_ecg_);
    require(std::isfinite(val_loss), "finetune: non-finite validation loss");
    rep.epochs.push_back({epoch, train_sum / steps, val_loss});
    best.observe(epoch, val_loss, params);
  }

  ParamStore chosen =
      best.resolve(params, static_cast<int>(rep.epochs.size()) - 1, &rep.best_epoch);
  round_to_f32(chosen);

  const std::string path = run_dir_ + "/final_" + variant_tag + ".ckpt";
  save_checkpoint(path, chosen,
                  std::string("{\"stage\":\"finetune\",\"variant\":\"") + variant_tag +
                      "\",\"config_hash\":\"" + rep.config_hash + "\"}");
  rep.checkpoint_path = path;

  // The single test-split read of the experiment.
  const MetricReport m = test_evaluation(chosen);
  rep.final_metrics["test_auroc"] = m.auroc;
  rep.final_metrics["test_f1"] = m.f1;
  rep.final_metrics["test_n"] = static_cast<double>(m.n);
  rep.wall_clock_s = seconds_since(t0);
  write_stage_outputs(rep);
  return rep;
}

StageReport Experiment::direct_baseline() {
  const auto t0 = Clock::now();
  const StageConfig& sc = cfg_.direct;
  StageReport rep;
  rep.stage = "direct";
  rep.config_hash = config_hash_hex(cfg_);

  ParamStore params;
  init_encoder_params(cfg_.model.encoder, derive_seed(seed_, "init.encoder"), params);
  init_classifier_params(cfg_.model.encoder, derive_seed(seed_, "init.clf"), params);
  round_to_f32(params);

  std::vector<int> labels;
  for (std::size_t i : train_ecg_) labels.push_back(data_->records[i].label);
  WeightedBatchSampler sampler(labels, sc.batch_size, cfg_.minority_target,
                               derive_seed(seed_, "direct.sampler"));
  const int steps = std::max<int>(1, static_cast<int>(train_ecg_.size()) / sc.batch_size);
  const ScheduleConfig sched = sc.schedule(steps);
  OptimizerState opt;
  opt.hyper = {0.9, 0.999, 1e-8, sc.weight_decay, sc.decoupled};
  BestTracker best;
  long global_step = 0;

  for (int epoch = 0; epoch < sc.epochs; ++epoch) {
    double train_sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      const auto sub = sampler.next();
      std::vector<std::size_t> idx;
      idx.reserve(sub.size());
      for (std::size_t s : sub) idx.push_back(train_ecg_[s]);

      const std::vector<Matrix> ecgs =
          ecg_batch(idx, false, true,
                    derive_seed(seed_, "direct.aug", static_cast<std::uint64_t>(global_step)));
      ClassifyCache cache;
      const Matrix logits = classify_forward(
          params, cfg_.model.encoder, ecgs, Mode::kTrain,
          derive_seed(seed_, "direct.dropout", static_cast<std::uint64_t>(global_step)),
          &cache);
      const LossOutput lo = cross_entropy_loss(logits, label_batch(idx));
      GradientStore grads = model_backward(params, cfg_.model.encoder, cache, lo.grad_e);
      clip_global_norm(grads, sc.clip_norm);
      adaptive_moment_step(params, grads, opt, lr_at(global_step++, sched));
      commit_bn_updates(params, cache.encoder);
      train_sum += lo.value;
    }
    const double val_loss = ce_val_loss(params, val_ecg_);
    require(std::isfinite(val_loss), "direct: non-finite validation loss");
    rep.epochs.push_back({epoch, train_sum / steps, val_loss});
    best.observe(epoch, val_loss, params);
  }

  ParamStore chosen =
      best.resolve(params, static_cast<int>(rep.epochs.size()) - 1, &rep.best_epoch);
  round_to_f32(chosen);
  const std::string path = run_dir_ + "/final_direct.ckpt";
  save_checkpoint(path, chosen,
                  std::string("{\"stage\":\"direct\",\"config_hash\":\"") +
                      rep.config_hash + "\"}");
  rep.checkpoint_path = path;

  const MetricReport m = test_evaluation(chosen);
  rep.final_metrics["test_auroc"] = m.auroc;
  rep.final_metrics["test_f1"] = m.f1;
  rep.final_metrics["test_n"] = static_cast<double>(m.n);
  rep.wall_clock_s = seconds_since(t0);
  write_stage_outputs(rep);
  return rep;
}

// --- composition ---------------------------------------------------------------

void Experiment::ensure_teacher() {
  if (teacher_ckpt_.empty()) train_teacher();
}

void Experiment::ensure_ssl() {
  if (ssl_ckpt_.empty()) pretrain_ssl();
}

VariantResult Experiment::run_variant(const std::string& variant) {
  reset_access_counts();
  VariantResult res;
  res.variant = variant;
  res.seed = seed_;

  if (variant == "direct") {
    res.stages.push_back(direct_baseline());
  } else {
    const bool use_ssl = variant == "full" || variant == "no_ahnp";
    const bool use_ahnp = variant == "full" || variant == "no_ssl";
    require(variant == "full" || variant == "no_ssl" || variant == "no_ahnp" ||
                variant == "no_ssl_no_ahnp",
            "unknown variant " + variant);
    ensure_teacher();
    if (use_ssl) ensure_ssl();
    res.stages.push_back(align_crossmodal(use_ssl, use_ahnp, variant));
    res.stages.push_back(finetune(variant));
  }

  // Data hygiene: ECG-bearing test records read exactly once, the rest never.
  for (std::size_t i : test_all_) {
    const std::uint32_t expected = data_->records[i].ecg_present ? 1u : 0u;
    if (access_counts_[i] != expected)
      throw std::runtime_error("data hygiene violation: test record " +
                               std::to_string(i) + " read " +
                               std::to_string(access_counts_[i]) + " times");
  }

  const StageReport& last = res.stages.back();
  res.test_auroc = last.final_metrics.at("test_auroc");
  res.test_f1 = last.final_metrics.at("test_f1");
  return res;
}

void Experiment::write_stage_outputs(const StageReport& rep) const {
  write_text_file(run_dir_ + "/" + rep.stage + "_report.json",
                  stage_report_json(rep, !cfg_.no_timestamps));
  write_text_file(run_dir_ + "/" + rep.stage + "_curve.csv", curve_csv(rep));
}

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

std::string stage_report_json(const StageReport& r, bool include_timestamps) {
  json j;
  j["stage"] = r.stage;
  j["config_hash"] = r.config_hash;
  j["best_epoch"] = r.best_epoch;
  j["checkpoint"] = r.checkpoint_path;
  json rows = json::array();
  for (const auto& e : r.epochs) {
    json row;
    row["epoch"] = e.epoch;
    row["train_loss"] = e.train_loss;
    row["val_loss"] = e.val_loss;
    rows.push_back(row);
  }
  j["epochs"] = rows;
  j["final_metrics"] = metrics_json(r.final_metrics);
  if (include_timestamps) j["wall_clock_s"] = r.wall_clock_s;
  return j.dump(2) + "\n";
}

std::vector<VariantResult> run_all(const TrainConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  write_text_file(cfg.out_dir + "/resolved_config.json", resolved_config_json(cfg));

  auto data = load_or_generate(cfg);
  std::vector<std::int64_t> ids;
  for (const auto& r : data->records) ids.push_back(r.subject_id);
  const SplitAssignment split = split_by_subject(ids, cfg.train_fraction,
                                                 cfg.val_fraction, cfg.test_fraction,
                                                 cfg.split_seed);
  const std::string variant = variant_from_flags(cfg);

  std::vector<VariantResult> results;
  std::vector<double> aurocs, f1s;
  for (std::uint64_t seed : cfg.seeds) {
    Experiment ex(cfg, seed, data, split,
                  cfg.out_dir + "/seed_" + std::to_string(seed));
    results.push_back(ex.run_variant(variant));
    aurocs.push_back(results.back().test_auroc);
    f1s.push_back(results.back().test_f1);
  }

  const SeedSummary sa = seed_summary(aurocs);
  const SeedSummary sf = seed_summary(f1s);
  json j;
  j["variant"] = variant;
  j["config_hash"] = config_hash_hex(cfg);
  json runs = json::array();
  for (const auto& r : results) {
    json row;
    row["seed"] = r.seed;
    row["test_auroc"] = r.test_auroc;
    row["test_f1"] = r.test_f1;
    runs.push_back(row);
  }
  j["runs"] = runs;
  j["auroc_mean"] = sa.mean;
  j["auroc_std"] = sa.std;
  j["f1_mean"] = sf.mean;
  j["f1_std"] = sf.std;
  write_text_file(cfg.out_dir + "/run_report.json", j.dump(2) + "\n");
  return results;
}

AblationReport run_ablations(const TrainConfig& cfg, std::vector<std::string> variants) {
  cfg.validate();
  if (variants.empty()) variants = all_variants();
  for (const auto& v : variants)
    require(std::find(all_variants().begin(), all_variants().end(), v) !=
                all_variants().end(),
            "unknown ablation variant " + v);

  fs::create_directories(cfg.out_dir);
  write_text_file(cfg.out_dir + "/resolved_config.json", resolved_config_json(cfg));

  auto data = load_or_generate(cfg);
  std::vector<std::int64_t> ids;
  for (const auto& r : data->records) ids.push_back(r.subject_id);
  const SplitAssignment split = split_by_subject(ids, cfg.train_fraction,
                                                 cfg.val_fraction, cfg.test_fraction,
                                                 cfg.split_seed);

  AblationReport rep;
  rep.variants.resize(variants.size());
  for (std::size_t v = 0; v < variants.size(); ++v) rep.variants[v].variant = variants[v];

  std::vector<double> teacher_aurocs;
  for (std::uint64_t seed : cfg.seeds) {
    Experiment ex(cfg, seed, data, split, cfg.out_dir + "/seed_" + std::to_string(seed));
    for (std::size_t v = 0; v < variants.size(); ++v)
      rep.variants[v].runs.push_back(ex.run_variant(variants[v]));
    if (!ex.teacher_checkpoint().empty()) {
      // Teacher validation AUROC, the desk-scale analogue of the
      // second-modality reference row.
      std::ifstream in(ex.run_dir() + "/teacher_report.json");
      if (in) {
        json tj = json::parse(in);
        teacher_aurocs.push_back(tj["final_metrics"]["val_auroc"].get<double>());
      }
    }
  }

  for (auto& vs : rep.variants) {
    std::vector<double> a, f;
    for (const auto& r : vs.runs) {
      a.push_back(r.test_auroc);
      f.push_back(r.test_f1);
    }
    vs.auroc = seed_summary(a);
    vs.f1 = seed_summary(f);
  }
  if (!teacher_aurocs.empty())
    rep.teacher_val_auroc_mean = seed_summary(teacher_aurocs).mean;

  write_text_file(cfg.out_dir + "/ablation_report.json", ablation_report_json(rep));
  return rep;
}

std::string ablation_report_json(const AblationReport& r) {
  json j;
  json vs = json::array();
  for (const auto& v : r.variants) {
    json row;
    row["variant"] = v.variant;
    json runs = json::array();
    for (const auto& run : v.runs) {
      json rr;
      rr["seed"] = run.seed;
      rr["auroc"] = run.test_auroc;
      rr["f1"] = run.test_f1;
      runs.push_back(rr);
    }
    row["runs"] = runs;
    row["auroc_mean"] = v.auroc.mean;
    row["auroc_std"] = v.auroc.std;
    row["f1_mean"] = v.f1.mean;
    row["f1_std"] = v.f1.std;
    vs.push_back(row);
  }
  j["variants"] = vs;
  j["teacher_val_auroc_mean"] = r.teacher_val_auroc_mean;
  return j.dump(2) + "\n";
}

}  // namespace xmodal
