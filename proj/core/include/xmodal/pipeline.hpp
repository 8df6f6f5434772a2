#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xmodal/config.hpp"
#include "xmodal/data.hpp"
#include "xmodal/eval.hpp"
#include "xmodal/model.hpp"

namespace xmodal {

struct StageEpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct StageReport {
  std::string stage;
  std::vector<StageEpochRow> epochs;
  int best_epoch = -1;
  std::map<std::string, double> final_metrics;
  double wall_clock_s = 0.0;
  std::string checkpoint_path;
  std::string config_hash;
};

// Known pipeline variants, mirroring the ablation table rows.
inline const std::vector<std::string>& all_variants() {
  static const std::vector<std::string> v = {"direct", "no_ssl_no_ahnp", "no_ahnp",
                                             "no_ssl", "full"};
  return v;
}

struct VariantResult {
  std::string variant;
  std::uint64_t seed = 0;
  double test_auroc = 0.0;
  double test_f1 = 0.0;
  std::vector<StageReport> stages;
};

// One (config, seed) experiment over a shared immutable dataset. Owns the
// per-record access counters used to enforce test-split hygiene: every data
// access goes through record(), and finalize_test_eval() verifies that
// ECG-bearing test records were each read exactly once, by the final
// evaluation only.
class Experiment {
 public:
  Experiment(const TrainConfig& cfg, std::uint64_t seed,
             std::shared_ptr<const Dataset> data, SplitAssignment split,
             std::string run_dir);

  StageReport train_teacher();
  StageReport pretrain_ssl();
  StageReport align_crossmodal(bool use_ssl, bool use_ahnp,
                               const std::string& variant_tag);
  StageReport finetune(const std::string& variant_tag);
  StageReport direct_baseline();

  // Composes the stages for a named variant, enforcing data hygiene.
  VariantResult run_variant(const std::string& variant);

  const Dataset& data() const { return *data_; }
  const std::vector<std::uint32_t>& access_counts() const { return access_counts_; }
  void reset_access_counts();

  // Picks up stage checkpoints already present in run_dir (teacher.ckpt,
  // ssl.ckpt) so the align/finetune commands can continue a previous run.
  void adopt_existing_checkpoints();

  // Paths of cached stage outputs (empty until the stage has run).
  const std::string& teacher_checkpoint() const { return teacher_ckpt_; }
  const std::string& ssl_checkpoint() const { return ssl_ckpt_; }
  const std::string& run_dir() const { return run_dir_; }

 private:
  const PairedSample& record(std::size_t index);
  void ensure_teacher();
  void ensure_ssl();

  std::vector<Matrix> ecg_batch(const std::vector<std::size_t>& idx, bool augment_vcg,
                                bool augment_time, std::uint64_t aug_seed);
  Matrix feature_batch(const std::vector<std::size_t>& idx);
  IntVector label_batch(const std::vector<std::size_t>& idx);

  double teacher_val_loss(const ParamStore& params, double* auroc_out);
  double ssl_val_loss(const ParamStore& params);
  double align_val_loss(const ParamStore& params, bool use_ahnp);
  double ce_val_loss(const ParamStore& params, const std::vector<std::size_t>& idx);
  MetricReport test_evaluation(const ParamStore& params);

  void write_stage_outputs(const StageReport& report) const;

  TrainConfig cfg_;
  std::uint64_t seed_;
  std::shared_ptr<const Dataset> data_;
  SplitAssignment split_;
  std::string run_dir_;
  std::vector<std::uint32_t> access_counts_;

  std::vector<std::size_t> train_all_, val_all_;
  std::vector<std::size_t> train_ecg_, val_ecg_, test_ecg_;
  std::vector<std::size_t> test_all_;

  std::string teacher_ckpt_, ssl_ckpt_;
};

struct VariantSummary {
  std::string variant;
  std::vector<VariantResult> runs;
  SeedSummary auroc;
  SeedSummary f1;
};

struct AblationReport {
  std::vector<VariantSummary> variants;
  double teacher_val_auroc_mean = 0.0;  // reference row
};

// Loads or generates the dataset described by the config.
std::shared_ptr<const Dataset> load_or_generate(const TrainConfig& cfg);

// Runs the configured variant (from the ablation flags) for every seed;
// writes per-stage reports, curves, checkpoints and a run_report.json.
std::vector<VariantResult> run_all(const TrainConfig& cfg);

// Runs the requested variants over all seeds and writes ablation_report.json
// with one mean +/- std row per variant.
AblationReport run_ablations(const TrainConfig& cfg,
                             std::vector<std::string> variants = {});

std::string variant_from_flags(const TrainConfig& cfg);

// Serialization used by the CLI (stable key order; wall-clock fields omitted
// when the config sets no_timestamps).
std::string stage_report_json(const StageReport& r, bool include_timestamps);
std::string ablation_report_json(const AblationReport& r);

}  // namespace xmodal
