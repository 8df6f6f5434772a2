// Command-line front end: dataset generation, the three training stages,
// evaluation, the ablation runner, and the finite-difference gradient suite.
//
// Exit codes: 0 success, 1 usage error, 2 runtime/validation error.
// stdout carries only the final JSON or table; diagnostics go to stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "xmodal/checkpoint.hpp"
#include "xmodal/config.hpp"
#include "xmodal/data.hpp"
#include "xmodal/eval.hpp"
#include "xmodal/gradcheck.hpp"
#include "xmodal/pipeline.hpp"

namespace fs = std::filesystem;
using namespace xmodal;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool deterministic = false;
  bool no_timestamps = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required) {
  auto* c = cmd->add_option("--config", o.config_path, "experiment config (JSON)");
  if (config_required) c->required();
  cmd->add_option("--out-dir", o.out_dir, "override the config's output directory");
  cmd->add_option("--seed", o.seed, "run a single seed instead of the config's list")
      ->each([&o](const std::string&) { o.seed_set = true; });
  cmd->add_flag("--deterministic", o.deterministic,
                "single-threaded bit-reproducible mode (always on; kept for scripts)");
  cmd->add_flag("--no-timestamps", o.no_timestamps,
                "omit wall-clock fields from reports for byte-level comparisons");
}

TrainConfig config_from(const CommonOpts& o) {
  TrainConfig cfg = load_train_config_file(o.config_path);
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  if (o.seed_set) cfg.seeds = {o.seed};
  if (o.deterministic) cfg.deterministic = true;
  if (o.no_timestamps) cfg.no_timestamps = true;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Shared setup for per-stage commands.
struct StageRun {
  TrainConfig cfg;
  std::shared_ptr<const Dataset> data;
  SplitAssignment split;

  explicit StageRun(const TrainConfig& c) : cfg(c) {
    fs::create_directories(cfg.out_dir);
    std::ofstream snap(cfg.out_dir + "/resolved_config.json", std::ios::binary);
    snap << resolved_config_json(cfg);
    data = load_or_generate(cfg);
    std::vector<std::int64_t> ids;
    for (const auto& r : data->records) ids.push_back(r.subject_id);
    split = split_by_subject(ids, cfg.train_fraction, cfg.val_fraction,
                             cfg.test_fraction, cfg.split_seed);
  }

  Experiment experiment(std::uint64_t seed) {
    Experiment ex(cfg, seed, data, split, cfg.out_dir + "/seed_" + std::to_string(seed));
    ex.adopt_existing_checkpoints();
    return ex;
  }
};

int cmd_gen_data(const CommonOpts& o, const std::string& out_path) {
  const TrainConfig cfg = config_from(o);
  GeneratorConfig gen = cfg.generator;
  if (o.seed_set) gen.seed = o.seed;
  std::cerr << "generating " << gen.n_subjects << " subjects -> " << out_path << "\n";
  const Dataset ds = generate_dataset(gen);
  write_dataset(out_path, ds);
  std::printf("{\"records\": %zu, \"path\": \"%s\"}\n", ds.size(), out_path.c_str());
  return 0;
}

int cmd_pretrain(const CommonOpts& o) {
  StageRun run(config_from(o));
  for (std::uint64_t seed : run.cfg.seeds) {
    Experiment ex = run.experiment(seed);
    std::cerr << "[seed " << seed << "] training teacher\n";
    const StageReport t = ex.train_teacher();
    std::cerr << "[seed " << seed << "] teacher val_auroc="
              << t.final_metrics.at("val_auroc") << "\n";
    if (!run.cfg.no_ssl) {
      std::cerr << "[seed " << seed << "] SSL pre-training\n";
      ex.pretrain_ssl();
    }
    std::cout << slurp(ex.run_dir() + "/teacher_report.json");
  }
  return 0;
}

int cmd_align(const CommonOpts& o) {
  StageRun run(config_from(o));
  const std::string tag = variant_from_flags(run.cfg);
  for (std::uint64_t seed : run.cfg.seeds) {
    Experiment ex = run.experiment(seed);
    std::cerr << "[seed " << seed << "] cross-modal alignment (" << tag << ")\n";
    const StageReport r =
        ex.align_crossmodal(!run.cfg.no_ssl, !run.cfg.no_ahnp, tag);
    std::cout << stage_report_json(r, !run.cfg.no_timestamps);
  }
  return 0;
}

int cmd_finetune(const CommonOpts& o) {
  StageRun run(config_from(o));
  const std::string tag = variant_from_flags(run.cfg);
  for (std::uint64_t seed : run.cfg.seeds) {
    Experiment ex = run.experiment(seed);
    std::cerr << "[seed " << seed << "] fine-tuning (" << tag << ")\n";
    const StageReport r = ex.finetune(tag);
    std::cout << stage_report_json(r, !run.cfg.no_timestamps);
  }
  return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& ckpt_path,
             const std::string& split_name) {
  StageRun run(config_from(o));
  Split split = Split::kTest;
  if (split_name == "train") {
    split = Split::kTrain;
  } else if (split_name == "val") {
    split = Split::kVal;
  } else if (split_name != "test") {
    throw std::runtime_error("--split must be train/val/test");
  }

  const ParamStore params = load_checkpoint(ckpt_path).params;
  const auto idx_all = run.split.indices(*run.data, split);
  std::vector<double> scores;
  std::vector<int> labels;
  const int chunk = run.cfg.finetune.batch_size;
  std::vector<Matrix> batch;
  IntVector ybuf;
  for (std::size_t start = 0; start < idx_all.size();
       start += static_cast<std::size_t>(chunk)) {
    batch.clear();
    std::vector<int> ybatch;
    for (std::size_t i = start; i < std::min(start + chunk, idx_all.size()); ++i) {
      const PairedSample& r = run.data->records[idx_all[i]];
      if (!r.ecg_present) continue;
      batch.push_back(r.ecg);
      ybatch.push_back(r.label);
    }
    if (batch.empty()) continue;
    const Matrix logits =
        classify_forward(params, run.cfg.model.encoder, batch, Mode::kEval, 0);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double m = std::max(logits(i, 0), logits(i, 1));
      const double e0 = std::exp(logits(i, 0) - m);
      const double e1 = std::exp(logits(i, 1) - m);
      scores.push_back(e1 / (e0 + e1));
      labels.push_back(ybatch[static_cast<std::size_t>(i)]);
    }
  }
  Vector sv = Eigen::Map<Vector>(scores.data(), static_cast<Eigen::Index>(scores.size()));
  IntVector lv(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i)
    lv[static_cast<Eigen::Index>(i)] = labels[i];
  const MetricReport m = evaluate(sv, lv, 0.5);
  std::printf(
      "{\"split\": \"%s\", \"n\": %ld, \"auroc\": %.17g, \"f1\": %.17g, "
      "\"threshold\": %.17g, \"tp\": %ld, \"fp\": %ld, \"tn\": %ld, \"fn\": %ld}\n",
      split_name.c_str(), m.n, m.auroc, m.f1, m.threshold, m.tp, m.fp, m.tn, m.fn);
  return 0;
}

int cmd_ablate(const CommonOpts& o, const std::string& variants_csv) {
  TrainConfig cfg = config_from(o);
  std::vector<std::string> variants;
  if (!variants_csv.empty()) {
    std::stringstream ss(variants_csv);
    std::string item;
    while (std::getline(ss, item, ',')) variants.push_back(item);
  }
  std::cerr << "running ablations over " << cfg.seeds.size() << " seeds\n";
  const AblationReport rep = run_ablations(cfg, variants);
  std::cout << ablation_report_json(rep);
  return 0;
}

int cmd_check_grads(std::uint64_t seed, int num_seeds, bool skip_model) {
  const auto rows = run_gradient_suite(seed, num_seeds, !skip_model);
  std::printf("%-22s %14s %10s %6s\n", "loss", "max_rel_err", "tol", "pass");
  bool all_pass = true;
  for (const auto& r : rows) {
    std::printf("%-22s %14.3e %10.1e %6s\n", r.name.c_str(), r.max_rel_err, r.tol,
                r.pass ? "yes" : "NO");
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 2;
}

int cmd_run_all(const CommonOpts& o) {
  const TrainConfig cfg = config_from(o);
  std::cerr << "run-all: variant " << variant_from_flags(cfg) << ", "
            << cfg.seeds.size() << " seed(s)\n";
  run_all(cfg);
  std::cout << slurp(cfg.out_dir + "/run_report.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-modal contrastive ECG training and evaluation"};
  app.require_subcommand(1);

  CommonOpts gen_o, pre_o, align_o, ft_o, eval_o, abl_o, all_o;
  std::string gen_out, eval_ckpt, eval_split = "test", abl_variants;
  std::uint64_t grads_seed = 7;
  int grads_num_seeds = 20;
  bool grads_skip_model = false;

  auto* gen = app.add_subcommand("gen-data", "generate a CMTX dataset");
  add_common(gen, gen_o, true);
  gen->add_option("--out", gen_out, "output CMTX path")->required();

  auto* pre = app.add_subcommand("pretrain", "train the teacher and SSL-pretrain the encoder");
  add_common(pre, pre_o, true);

  auto* al = app.add_subcommand("align", "cross-modal alignment stage");
  add_common(al, align_o, true);

  auto* ft = app.add_subcommand("finetune", "fine-tune and evaluate on the test split");
  add_common(ft, ft_o, true);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(ev, eval_o, true);
  ev->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  ev->add_option("--split", eval_split, "train/val/test (default test)");

  auto* ab = app.add_subcommand("ablate", "run the ablation comparison table");
  add_common(ab, abl_o, true);
  ab->add_option("--variants", abl_variants,
                 "comma-separated subset of direct,no_ssl_no_ahnp,no_ahnp,no_ssl,full");

  auto* gr = app.add_subcommand("check-grads", "finite-difference gradient suite");
  gr->add_option("--seed", grads_seed, "base seed (default 7)");
  gr->add_option("--num-seeds", grads_num_seeds, "seeds per case (default 20)");
  gr->add_flag("--skip-model", grads_skip_model, "skip the composed-model check");

  auto* ra = app.add_subcommand("run-all", "teacher -> SSL -> align -> finetune for all seeds");
  add_common(ra, all_o, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    std::cerr << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_o, gen_out);
    if (pre->parsed()) return cmd_pretrain(pre_o);
    if (al->parsed()) return cmd_align(align_o);
    if (ft->parsed()) return cmd_finetune(ft_o);
    if (ev->parsed()) return cmd_eval(eval_o, eval_ckpt, eval_split);
    if (ab->parsed()) return cmd_ablate(abl_o, abl_variants);
    if (gr->parsed()) return cmd_check_grads(grads_seed, grads_num_seeds, grads_skip_model);
    if (ra->parsed()) return cmd_run_all(all_o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
