#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xmodal/data.hpp"
#include "xmodal/losses.hpp"
#include "xmodal/model.hpp"
#include "xmodal/optim.hpp"
#include "xmodal/signal.hpp"

namespace xmodal {

// Per-stage optimization settings. steps_per_epoch of the schedule is derived
// from the data at run time; total_epochs is the stage epoch count.
struct StageConfig {
  int epochs = 10;
  int batch_size = 128;
  double start_lr = 1e-5;
  double peak_lr = 1e-4;
  double end_lr = 1e-5;
  int warmup_epochs = 1;
  double weight_decay = 0.0;
  bool decoupled = false;  // true -> AdamW-style decay
  double tau = 0.1;        // contrastive temperature (ssl stage)
  double clip_norm = 2.5;
  double proj_lr_scale = 0.1;  // alignment stage: projection-head multiplier
  int patience = 0;            // 0 disables plateau early-stop (teacher stage)

  ScheduleConfig schedule(int steps_per_epoch) const;
};

// Full experiment description; the JSON schema is strict (unknown keys are
// errors) and parsing materializes every default so the resolved snapshot
// reproduces the run.
struct TrainConfig {
  std::vector<std::uint64_t> seeds = {1};
  std::string out_dir = "runs/out";
  bool deterministic = true;
  bool no_timestamps = false;

  // data
  std::string dataset_path;  // empty -> generate from `generator`
  GeneratorConfig generator;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::uint64_t split_seed = 91;
  double minority_target = 0.275;

  ModelConfig model;
  AhnpConfig ahnp;
  AugmentConfig augment;

  StageConfig teacher;
  StageConfig ssl;
  StageConfig align;
  StageConfig finetune;
  StageConfig direct;

  bool no_ssl = false;
  bool no_ahnp = false;

  void validate() const;
};

// Parses the strict JSON schema; throws std::invalid_argument naming the
// offending field on schema violations or unknown keys.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config_file(const std::string& path);

// Canonical snapshot with all defaults materialized; parsing it back yields
// an identical config.
std::string resolved_config_json(const TrainConfig& cfg);

// FNV-1a over the resolved snapshot, reported in stage reports.
std::string config_hash_hex(const TrainConfig& cfg);

// The pinned reference experiment used by the acceptance suite and shipped
// as configs/reference.json.
TrainConfig reference_config();
// A fast small configuration for smoke runs.
TrainConfig tiny_config();

}  // namespace xmodal
