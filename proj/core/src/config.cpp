#include "xmodal/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "xmodal/rng.hpp"

namespace xmodal {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void field_error(const std::string& path, const std::string& what) {
  throw std::invalid_argument("config: field '" + path + "' " + what);
}

void check_keys(const json& j, const std::string& path,
                const std::set<std::string>& allowed) {
  if (!j.is_object()) field_error(path, "must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key))
      field_error(path.empty() ? key : path + "." + key, "is not a recognized key");
  }
}

double get_num(const json& j, const std::string& path, const std::string& key,
               double def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_number()) field_error(path + "." + key, "must be a number");
  return j.at(key).get<double>();
}

int get_int(const json& j, const std::string& path, const std::string& key, int def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_number_integer()) field_error(path + "." + key, "must be an integer");
  return j.at(key).get<int>();
}

std::uint64_t get_u64(const json& j, const std::string& path, const std::string& key,
                      std::uint64_t def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_number_unsigned() && !j.at(key).is_number_integer())
    field_error(path + "." + key, "must be an integer");
  return j.at(key).get<std::uint64_t>();
}

bool get_bool(const json& j, const std::string& path, const std::string& key, bool def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_boolean()) field_error(path + "." + key, "must be a boolean");
  return j.at(key).get<bool>();
}

std::string get_str(const json& j, const std::string& path, const std::string& key,
                    const std::string& def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_string()) field_error(path + "." + key, "must be a string");
  return j.at(key).get<std::string>();
}

AhnpStrategy strategy_from(const std::string& s, const std::string& path) {
  if (s == "linear") return AhnpStrategy::kLinear;
  if (s == "topk") return AhnpStrategy::kTopk;
  if (s == "exp") return AhnpStrategy::kExp;
  field_error(path, "must be one of linear/topk/exp");
}

std::string strategy_name(AhnpStrategy s) {
  switch (s) {
    case AhnpStrategy::kLinear: return "linear";
    case AhnpStrategy::kTopk: return "topk";
    case AhnpStrategy::kExp: return "exp";
  }
  return "topk";
}

GeneratorConfig parse_generator(const json& j, const std::string& path,
                                const GeneratorConfig& def) {
  check_keys(j, path,
             {"n_subjects", "records_per_subject", "positive_rate", "latent_dim",
              "modality_b_dim", "ecg_noise_sigma", "modality_b_noise_sigma",
              "ecg_present_rate", "seed"});
  GeneratorConfig g = def;
  g.n_subjects = get_int(j, path, "n_subjects", def.n_subjects);
  g.records_per_subject = get_int(j, path, "records_per_subject", def.records_per_subject);
  g.positive_rate = get_num(j, path, "positive_rate", def.positive_rate);
  g.latent_dim = get_int(j, path, "latent_dim", def.latent_dim);
  g.modality_b_dim = get_int(j, path, "modality_b_dim", def.modality_b_dim);
  g.ecg_noise_sigma = get_num(j, path, "ecg_noise_sigma", def.ecg_noise_sigma);
  g.modality_b_noise_sigma =
      get_num(j, path, "modality_b_noise_sigma", def.modality_b_noise_sigma);
  g.ecg_present_rate = get_num(j, path, "ecg_present_rate", def.ecg_present_rate);
  g.seed = get_u64(j, path, "seed", def.seed);
  return g;
}

StageConfig parse_stage(const json& j, const std::string& path, const StageConfig& def) {
  check_keys(j, path,
             {"epochs", "batch_size", "start_lr", "peak_lr", "end_lr", "warmup_epochs",
              "weight_decay", "decoupled", "tau", "clip_norm", "proj_lr_scale",
              "patience"});
  StageConfig s = def;
  s.epochs = get_int(j, path, "epochs", def.epochs);
  s.batch_size = get_int(j, path, "batch_size", def.batch_size);
  s.start_lr = get_num(j, path, "start_lr", def.start_lr);
  s.peak_lr = get_num(j, path, "peak_lr", def.peak_lr);
  s.end_lr = get_num(j, path, "end_lr", def.end_lr);
  s.warmup_epochs = get_int(j, path, "warmup_epochs", def.warmup_epochs);
  s.weight_decay = get_num(j, path, "weight_decay", def.weight_decay);
  s.decoupled = get_bool(j, path, "decoupled", def.decoupled);
  s.tau = get_num(j, path, "tau", def.tau);
  s.clip_norm = get_num(j, path, "clip_norm", def.clip_norm);
  s.proj_lr_scale = get_num(j, path, "proj_lr_scale", def.proj_lr_scale);
  s.patience = get_int(j, path, "patience", def.patience);
  return s;
}

json stage_json(const StageConfig& s) {
  json j;
  j["epochs"] = s.epochs;
  j["batch_size"] = s.batch_size;
  j["start_lr"] = s.start_lr;
  j["peak_lr"] = s.peak_lr;
  j["end_lr"] = s.end_lr;
  j["warmup_epochs"] = s.warmup_epochs;
  j["weight_decay"] = s.weight_decay;
  j["decoupled"] = s.decoupled;
  j["tau"] = s.tau;
  j["clip_norm"] = s.clip_norm;
  j["proj_lr_scale"] = s.proj_lr_scale;
  j["patience"] = s.patience;
  return j;
}

}  // namespace

ScheduleConfig StageConfig::schedule(int steps_per_epoch) const {
  ScheduleConfig s;
  s.start_lr = start_lr;
  s.peak_lr = peak_lr;
  s.end_lr = end_lr;
  s.warmup_epochs = warmup_epochs;
  s.total_epochs = epochs;
  s.steps_per_epoch = steps_per_epoch;
  return s;
}

void TrainConfig::validate() const {
  require(!seeds.empty(), "config: seeds must be nonempty");
  require(!out_dir.empty(), "config: out_dir must be set");
  if (dataset_path.empty()) generator.validate();
  require(train_fraction > 0 && val_fraction > 0 && test_fraction > 0,
          "config: split fractions must be positive");
  require(minority_target > 0.0 && minority_target < 1.0,
          "config: minority_target must be in (0,1)");
  model.encoder.validate();
  ahnp.validate();
  augment.validate();
  for (const StageConfig* s : {&teacher, &ssl, &align, &finetune, &direct}) {
    require(s->epochs >= 1 && s->batch_size >= 1, "config: stage epochs/batch invalid");
    s->schedule(1).validate();
  }
  require(ssl.batch_size >= 2, "config: ssl batch_size must be >= 2");
}

TrainConfig parse_train_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }

  TrainConfig def;  // compiled-in defaults
  check_keys(j, "",
             {"seeds", "out_dir", "deterministic", "no_timestamps", "data", "model",
              "loss", "augment", "stages", "ablation"});

  TrainConfig c;
  if (j.contains("seeds")) {
    if (!j["seeds"].is_array() || j["seeds"].empty())
      field_error("seeds", "must be a nonempty array of integers");
    c.seeds.clear();
    for (const auto& s : j["seeds"]) {
      if (!s.is_number_integer() && !s.is_number_unsigned())
        field_error("seeds", "must contain integers only");
      c.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  c.out_dir = get_str(j, "", "out_dir", def.out_dir);
  c.deterministic = get_bool(j, "", "deterministic", def.deterministic);
  c.no_timestamps = get_bool(j, "", "no_timestamps", def.no_timestamps);

  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, "data",
               {"dataset_path", "generator", "train_fraction", "val_fraction",
                "test_fraction", "split_seed", "minority_target"});
    c.dataset_path = get_str(d, "data", "dataset_path", def.dataset_path);
    if (d.contains("generator"))
      c.generator = parse_generator(d["generator"], "data.generator", def.generator);
    c.train_fraction = get_num(d, "data", "train_fraction", def.train_fraction);
    c.val_fraction = get_num(d, "data", "val_fraction", def.val_fraction);
    c.test_fraction = get_num(d, "data", "test_fraction", def.test_fraction);
    c.split_seed = get_u64(d, "data", "split_seed", def.split_seed);
    c.minority_target = get_num(d, "data", "minority_target", def.minority_target);
  }

  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, "model", {"encoder", "teacher_hidden", "normalize_projections"});
    if (m.contains("encoder")) {
      const json& e = m["encoder"];
      check_keys(e, "model.encoder",
                 {"input_length", "kernel_size", "stride1", "stride2", "intermediate_dim",
                  "embed_dim", "num_heads", "num_layers", "classifier_dim",
                  "classifier_layers", "classifier_dropout"});
      EncoderConfig& ec = c.model.encoder;
      const EncoderConfig& ed = def.model.encoder;
      ec.input_length = get_int(e, "model.encoder", "input_length", ed.input_length);
      ec.kernel_size = get_int(e, "model.encoder", "kernel_size", ed.kernel_size);
      ec.stride1 = get_int(e, "model.encoder", "stride1", ed.stride1);
      ec.stride2 = get_int(e, "model.encoder", "stride2", ed.stride2);
      ec.intermediate_dim =
          get_int(e, "model.encoder", "intermediate_dim", ed.intermediate_dim);
      ec.embed_dim = get_int(e, "model.encoder", "embed_dim", ed.embed_dim);
      ec.num_heads = get_int(e, "model.encoder", "num_heads", ed.num_heads);
      ec.num_layers = get_int(e, "model.encoder", "num_layers", ed.num_layers);
      ec.classifier_dim = get_int(e, "model.encoder", "classifier_dim", ed.classifier_dim);
      ec.classifier_layers =
          get_int(e, "model.encoder", "classifier_layers", ed.classifier_layers);
      ec.classifier_dropout =
          get_num(e, "model.encoder", "classifier_dropout", ed.classifier_dropout);
    }
    c.model.teacher_hidden = get_int(m, "model", "teacher_hidden", def.model.teacher_hidden);
    c.model.normalize_projections =
        get_bool(m, "model", "normalize_projections", def.model.normalize_projections);
  }
  c.model.modality_b_dim = c.generator.modality_b_dim;

  if (j.contains("loss")) {
    const json& l = j["loss"];
    check_keys(l, "loss",
               {"strategy", "alpha", "k_percent", "beta", "tau", "weight_scope",
                "include_self", "reduction", "error_on_empty_positives"});
    c.ahnp.strategy =
        strategy_from(get_str(l, "loss", "strategy", strategy_name(def.ahnp.strategy)),
                      "loss.strategy");
    c.ahnp.alpha = get_num(l, "loss", "alpha", def.ahnp.alpha);
    c.ahnp.k_percent = get_num(l, "loss", "k_percent", def.ahnp.k_percent);
    c.ahnp.beta = get_num(l, "loss", "beta", def.ahnp.beta);
    c.ahnp.tau = get_num(l, "loss", "tau", def.ahnp.tau);
    const std::string scope = get_str(
        l, "loss", "weight_scope",
        def.ahnp.weight_scope == WeightScope::kNegativesOnly ? "negatives_only" : "all");
    if (scope == "negatives_only") {
      c.ahnp.weight_scope = WeightScope::kNegativesOnly;
    } else if (scope == "all") {
      c.ahnp.weight_scope = WeightScope::kAll;
    } else {
      field_error("loss.weight_scope", "must be negatives_only or all");
    }
    c.ahnp.include_self = get_bool(l, "loss", "include_self", def.ahnp.include_self);
    const std::string red = get_str(l, "loss", "reduction",
                                    def.ahnp.reduction == Reduction::kSum ? "sum" : "mean");
    if (red == "sum") {
      c.ahnp.reduction = Reduction::kSum;
    } else if (red == "mean") {
      c.ahnp.reduction = Reduction::kMean;
    } else {
      field_error("loss.reduction", "must be sum or mean");
    }
    c.ahnp.error_on_empty_positives = get_bool(l, "loss", "error_on_empty_positives",
                                               def.ahnp.error_on_empty_positives);
  }

  if (j.contains("augment")) {
    const json& a = j["augment"];
    check_keys(a, "augment",
               {"rotation_max_degrees", "scale_lo", "scale_hi", "mask_fraction_max",
                "noise_sigma", "wander_amplitude", "wander_freq_hz"});
    c.augment.rotation_max_degrees =
        get_num(a, "augment", "rotation_max_degrees", def.augment.rotation_max_degrees);
    c.augment.scale_lo = get_num(a, "augment", "scale_lo", def.augment.scale_lo);
    c.augment.scale_hi = get_num(a, "augment", "scale_hi", def.augment.scale_hi);
    c.augment.mask_fraction_max =
        get_num(a, "augment", "mask_fraction_max", def.augment.mask_fraction_max);
    c.augment.noise_sigma = get_num(a, "augment", "noise_sigma", def.augment.noise_sigma);
    c.augment.wander_amplitude =
        get_num(a, "augment", "wander_amplitude", def.augment.wander_amplitude);
    c.augment.wander_freq_hz =
        get_num(a, "augment", "wander_freq_hz", def.augment.wander_freq_hz);
  }

  if (j.contains("stages")) {
    const json& s = j["stages"];
    check_keys(s, "stages", {"teacher", "ssl", "align", "finetune", "direct"});
    if (s.contains("teacher"))
      c.teacher = parse_stage(s["teacher"], "stages.teacher", def.teacher);
    if (s.contains("ssl")) c.ssl = parse_stage(s["ssl"], "stages.ssl", def.ssl);
    if (s.contains("align")) c.align = parse_stage(s["align"], "stages.align", def.align);
    if (s.contains("finetune"))
      c.finetune = parse_stage(s["finetune"], "stages.finetune", def.finetune);
    if (s.contains("direct"))
      c.direct = parse_stage(s["direct"], "stages.direct", def.direct);
  }

  if (j.contains("ablation")) {
    const json& a = j["ablation"];
    check_keys(a, "ablation", {"no_ssl", "no_ahnp"});
    c.no_ssl = get_bool(a, "ablation", "no_ssl", def.no_ssl);
    c.no_ahnp = get_bool(a, "ablation", "no_ahnp", def.no_ahnp);
  }

  c.validate();
  return c;
}

TrainConfig load_train_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string resolved_config_json(const TrainConfig& c) {
  json j;
  j["seeds"] = c.seeds;
  j["out_dir"] = c.out_dir;
  j["deterministic"] = c.deterministic;
  j["no_timestamps"] = c.no_timestamps;

  json d;
  d["dataset_path"] = c.dataset_path;
  json g;
  g["n_subjects"] = c.generator.n_subjects;
  g["records_per_subject"] = c.generator.records_per_subject;
  g["positive_rate"] = c.generator.positive_rate;
  g["latent_dim"] = c.generator.latent_dim;
  g["modality_b_dim"] = c.generator.modality_b_dim;
  g["ecg_noise_sigma"] = c.generator.ecg_noise_sigma;
  g["modality_b_noise_sigma"] = c.generator.modality_b_noise_sigma;
  g["ecg_present_rate"] = c.generator.ecg_present_rate;
  g["seed"] = c.generator.seed;
  d["generator"] = g;
  d["train_fraction"] = c.train_fraction;
  d["val_fraction"] = c.val_fraction;
  d["test_fraction"] = c.test_fraction;
  d["split_seed"] = c.split_seed;
  d["minority_target"] = c.minority_target;
  j["data"] = d;

  json m;
  json e;
  e["input_length"] = c.model.encoder.input_length;
  e["kernel_size"] = c.model.encoder.kernel_size;
  e["stride1"] = c.model.encoder.stride1;
  e["stride2"] = c.model.encoder.stride2;
  e["intermediate_dim"] = c.model.encoder.intermediate_dim;
  e["embed_dim"] = c.model.encoder.embed_dim;
  e["num_heads"] = c.model.encoder.num_heads;
  e["num_layers"] = c.model.encoder.num_layers;
  e["classifier_dim"] = c.model.encoder.classifier_dim;
  e["classifier_layers"] = c.model.encoder.classifier_layers;
  e["classifier_dropout"] = c.model.encoder.classifier_dropout;
  m["encoder"] = e;
  m["teacher_hidden"] = c.model.teacher_hidden;
  m["normalize_projections"] = c.model.normalize_projections;
  j["model"] = m;

  json l;
  l["strategy"] = strategy_name(c.ahnp.strategy);
  l["alpha"] = c.ahnp.alpha;
  l["k_percent"] = c.ahnp.k_percent;
  l["beta"] = c.ahnp.beta;
  l["tau"] = c.ahnp.tau;
  l["weight_scope"] =
      c.ahnp.weight_scope == WeightScope::kNegativesOnly ? "negatives_only" : "all";
  l["include_self"] = c.ahnp.include_self;
  l["reduction"] = c.ahnp.reduction == Reduction::kSum ? "sum" : "mean";
  l["error_on_empty_positives"] = c.ahnp.error_on_empty_positives;
  j["loss"] = l;

  json a;
  a["rotation_max_degrees"] = c.augment.rotation_max_degrees;
  a["scale_lo"] = c.augment.scale_lo;
  a["scale_hi"] = c.augment.scale_hi;
  a["mask_fraction_max"] = c.augment.mask_fraction_max;
  a["noise_sigma"] = c.augment.noise_sigma;
  a["wander_amplitude"] = c.augment.wander_amplitude;
  a["wander_freq_hz"] = c.augment.wander_freq_hz;
  j["augment"] = a;

  json st;
  st["teacher"] = stage_json(c.teacher);
  st["ssl"] = stage_json(c.ssl);
  st["align"] = stage_json(c.align);
  st["finetune"] = stage_json(c.finetune);
  st["direct"] = stage_json(c.direct);
  j["stages"] = st;

  json ab;
  ab["no_ssl"] = c.no_ssl;
  ab["no_ahnp"] = c.no_ahnp;
  j["ablation"] = ab;

  return j.dump(2) + "\n";
}

std::string config_hash_hex(const TrainConfig& cfg) {
  const std::uint64_t h = fnv1a64(resolved_config_json(cfg));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

TrainConfig reference_config() {
  TrainConfig c;
  c.seeds = {1, 2, 3, 4, 5};
  c.out_dir = "runs/reference";
  c.no_timestamps = false;

  c.generator.n_subjects = 4000;
  c.generator.records_per_subject = 1;
  c.generator.positive_rate = 0.2;
  c.generator.latent_dim = 6;
  c.generator.modality_b_dim = 16;
  c.generator.ecg_noise_sigma = 0.40;
  c.generator.modality_b_noise_sigma = 0.05;
  c.generator.ecg_present_rate = 0.65;
  c.generator.seed = 2024;
  c.split_seed = 91;
  c.minority_target = 0.275;

  c.model.encoder.input_length = 1000;
  c.model.encoder.kernel_size = 20;
  c.model.encoder.stride1 = 20;
  c.model.encoder.stride2 = 1;
  c.model.encoder.intermediate_dim = 24;
  c.model.encoder.embed_dim = 64;
  c.model.encoder.num_heads = 4;
  c.model.encoder.num_layers = 2;
  c.model.encoder.classifier_dim = 64;
  c.model.encoder.classifier_layers = 2;
  c.model.encoder.classifier_dropout = 0.1;
  c.model.teacher_hidden = 128;
  c.model.modality_b_dim = 16;
  c.model.normalize_projections = true;

  c.ahnp.strategy = AhnpStrategy::kTopk;
  c.ahnp.alpha = 4.5;
  c.ahnp.k_percent = 7.5;
  c.ahnp.beta = 2.0;
  c.ahnp.tau = 0.07;
  c.ahnp.weight_scope = WeightScope::kNegativesOnly;
  c.ahnp.include_self = true;
  c.ahnp.reduction = Reduction::kMean;

  c.augment.rotation_max_degrees = 45.0;
  c.augment.scale_lo = 0.8;
  c.augment.scale_hi = 1.2;
  c.augment.mask_fraction_max = 0.12;
  c.augment.noise_sigma = 0.03;
  c.augment.wander_amplitude = 0.06;
  c.augment.wander_freq_hz = 0.3;

  c.teacher = StageConfig{15, 128, 1e-4, 1e-3, 1e-5, 1, 0.0, false, 0.1, 2.5, 0.1, 4};
  c.ssl = StageConfig{5, 128, 1e-5, 3e-4, 1e-5, 1, 0.0, false, 0.1, 2.5, 0.1, 0};
  c.align = StageConfig{8, 128, 1e-5, 3e-4, 1e-5, 1, 1e-5, true, 0.1, 2.5, 0.1, 0};
  c.finetune = StageConfig{6, 128, 1e-5, 1e-4, 1e-5, 1, 0.0, false, 0.1, 2.5, 0.1, 0};
  c.direct = StageConfig{10, 128, 1e-5, 3e-4, 1e-5, 1, 0.0, false, 0.1, 2.5, 0.1, 0};
  return c;
}

TrainConfig tiny_config() {
  TrainConfig c = reference_config();
  c.seeds = {1};
  c.out_dir = "runs/tiny";
  c.generator.n_subjects = 300;
  c.generator.ecg_present_rate = 0.8;
  c.model.encoder.kernel_size = 25;
  c.model.encoder.stride1 = 25;
  c.model.encoder.intermediate_dim = 12;
  c.model.encoder.embed_dim = 32;
  c.model.encoder.num_heads = 2;
  c.model.encoder.num_layers = 1;
  c.model.encoder.classifier_dim = 32;
  c.teacher.epochs = 6;
  c.ssl.epochs = 2;
  c.align.epochs = 2;
  c.finetune.epochs = 2;
  c.direct.epochs = 2;
  c.teacher.batch_size = 64;
  c.ssl.batch_size = 64;
  c.align.batch_size = 64;
  c.finetune.batch_size = 64;
  c.direct.batch_size = 64;
  return c;
}

}  // namespace xmodal
