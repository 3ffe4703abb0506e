// Command-line front end: synthetic data generation, stratified
// cross-validation, ablations, perturbation tests, screening reports and
// attention export.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xattn/pipeline.hpp"

namespace {

using namespace xattn;

struct CommonFlags {
  std::string config_path;
  std::string dataset_dir, out_dir;
  std::int64_t seed = -1;
  int workers = -1;
  int folds = -1;

  void attach(CLI::App* cmd, bool config_required = true) {
    auto* opt = cmd->add_option("--config", config_path, "run configuration file (JSON)");
    if (config_required) opt->required();
    cmd->add_option("--data", dataset_dir, "dataset directory (overrides config)");
    cmd->add_option("--out", out_dir, "output directory (overrides config)");
    cmd->add_option("--seed", seed, "run seed (overrides config)");
    cmd->add_option("--workers", workers, "parallel fold workers, 0 = all cores");
    cmd->add_option("--folds", folds, "number of CV folds (overrides config)");
  }

  RunConfig load() const {
    RunConfig cfg = load_run_config(config_path);
    if (!dataset_dir.empty()) cfg.dataset_dir = dataset_dir;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (workers >= 0) cfg.workers = workers;
    if (folds >= 0) cfg.n_folds = folds;
    cfg.validate();
    return cfg;
  }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bidirectional cross-attention fusion for BMD regression"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset directory");
  int gen_n = 233;
  std::uint64_t gen_seed = 42;
  std::string gen_out;
  gen->add_option("--n", gen_n, "number of samples (min 20)")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--out", gen_out, "output dataset directory")->required();

  // cross-validate
  auto* cv = app.add_subcommand("cross-validate", "train and evaluate with stratified k-fold CV");
  CommonFlags cv_flags;
  cv_flags.attach(cv);

  // ablate
  auto* ab = app.add_subcommand("ablate", "fusion/loss ablation matrix with paired t-tests");
  CommonFlags ab_flags;
  ab_flags.attach(ab);
  std::string ab_variants;
  ab->add_option("--variants", ab_variants,
                 "comma list of variants, e.g. bidirectional,concat,bidirectional:huber");

  // perturb
  auto* pt = app.add_subcommand("perturb", "perturbation test on trained fold checkpoints");
  CommonFlags pt_flags;
  pt_flags.attach(pt);
  std::string pt_folds;
  int pt_variants = 20;
  pt->add_option("--perturb-folds", pt_folds,
                 "comma list of fold indices (default: three best by R2)");
  pt->add_option("--variants", pt_variants, "augmented variants per image")
      ->capture_default_str();

  // screen
  auto* sc = app.add_subcommand("screen", "clinical screening report from out-of-fold predictions");
  CommonFlags sc_flags;
  sc_flags.attach(sc);

  // export-attention
  auto* ea = app.add_subcommand("export-attention", "field-level attention export for one fold");
  CommonFlags ea_flags;
  ea_flags.attach(ea);
  int ea_fold = -1;
  ea->add_option("--fold", ea_fold, "fold index whose checkpoint to inspect")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // 1 = usage error
  }

  try {
    if (gen->parsed()) {
      auto s = cmd_gen_data(gen_n, gen_seed, gen_out);
      std::printf("wrote %d samples to %s\n", s.n, gen_out.c_str());
      std::printf("bmd mean %.4f sd %.4f\n", s.bmd_mean, s.bmd_sd);
      std::printf("bin counts [0.6..1.2 by 0.1]:");
      for (int c : s.bin_counts) std::printf(" %d", c);
      std::printf("\n");
    } else if (cv->parsed()) {
      const auto cfg = cv_flags.load();
      auto s = cmd_cross_validate(cfg);
      for (size_t f = 0; f < s.fold_metrics.size(); ++f)
        std::printf("fold %zu: mse %.6f mae %.6f r2 %.4f\n", f, s.fold_metrics[f].mse,
                    s.fold_metrics[f].mae, s.fold_metrics[f].r2);
      std::printf("pooled (%zu): mse %.6f mae %.6f r2 %.4f\n", s.pooled_count, s.pooled.mse,
                  s.pooled.mae, s.pooled.r2);
      std::printf("pearson r %.4f (95%% CI %.4f-%.4f)\n", s.pearson.r, s.pearson.lo,
                  s.pearson.hi);
      std::printf("config hash %s\n", hash_hex(s.config_hash).c_str());
    } else if (ab->parsed()) {
      const auto cfg = ab_flags.load();
      auto s = cmd_ablate(cfg, split_list(ab_variants));
      for (size_t v = 0; v < s.names.size(); ++v)
        std::printf("%-24s mse %.6f mae %.6f r2 %.4f\n", s.names[v].c_str(), s.mse_mean[v],
                    s.mae_mean[v], s.r2_mean[v]);
    } else if (pt->parsed()) {
      const auto cfg = pt_flags.load();
      std::vector<int> fold_list;
      for (const auto& tok : split_list(pt_folds)) fold_list.push_back(std::stoi(tok));
      auto s = cmd_perturb(cfg, fold_list, pt_variants);
      for (const auto& r : s.rows)
        std::printf("fold %d: r2 %.4f -> perturbed %.4f (mse %.6f -> %.6f)\n", r.fold,
                    r.original.r2, r.perturbed.r2, r.original.mse, r.perturbed.mse);
    } else if (sc->parsed()) {
      const auto cfg = sc_flags.load();
      auto s = cmd_screen(cfg);
      const auto& m = s.metrics;
      std::printf("n %d, low-BMD %d (%.2f%%)\n", m.n, m.n_low, 100.0 * m.n_low / m.n);
      std::printf("low: precision %.4f recall %.4f f1 %.4f\n", m.low.precision, m.low.recall,
                  m.low.f1);
      std::printf("normal: precision %.4f recall %.4f f1 %.4f\n", m.normal.precision,
                  m.normal.recall, m.normal.f1);
      std::printf("accuracy %.4f\n", m.accuracy);
      if (m.auc_defined)
        std::printf("auc %.4f ap %.4f specificity %.4f (wilson %.3f-%.3f)\n", m.auc, m.ap,
                    m.specificity, m.specificity_ci.lo, m.specificity_ci.hi);
      else
        std::printf("auc undefined (single-class ground truth); partial report written\n");
    } else if (ea->parsed()) {
      const auto cfg = ea_flags.load();
      auto exported = cmd_export_attention(cfg, ea_fold);
      std::printf("field attention (all layers):\n");
      for (size_t i = 0; i < exported.field_names.size(); ++i)
        std::printf("  %-14s %.4f\n", exported.field_names[i].c_str(), exported.overall[i]);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
