#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "xattn/config.hpp"
#include "xattn/report.hpp"
#include "xattn/train.hpp"

namespace xattn {

inline int log_level() {
  static const int level = [] {
    const char* env = std::getenv("XATTN_LOG");
    return env ? std::atoi(env) : 1;
  }();
  return level;
}

inline void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[xattn] " << msg << "\n";
}

// Dispatches on the configured floating-point precision.
template <typename Fn>
auto with_precision(const RunConfig& cfg, Fn&& fn) {
  if (cfg.precision == "f64") return fn(double{});
  return fn(float{});
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataSummary {
  int n = 0;
  double bmd_mean = 0, bmd_sd = 0;
  std::vector<int> bin_counts;
};

inline GenDataSummary cmd_gen_data(int n, std::uint64_t seed,
                                   const std::filesystem::path& out_dir,
                                   GeneratorParams params = {}) {
  auto manifest = generate_synthetic(n, seed, params);
  save_dataset(manifest, out_dir);
  GenDataSummary s;
  s.n = n;
  double acc = 0;
  for (const auto& rec : manifest.samples) acc += rec.bmd;
  s.bmd_mean = acc / n;
  double ss = 0;
  for (const auto& rec : manifest.samples) ss += (rec.bmd - s.bmd_mean) * (rec.bmd - s.bmd_mean);
  s.bmd_sd = std::sqrt(ss / n);
  FoldPlan binner;
  s.bin_counts.assign(static_cast<size_t>(binner.n_bins()), 0);
  for (const auto& rec : manifest.samples) ++s.bin_counts[static_cast<size_t>(binner.bin_of(rec.bmd))];
  return s;
}

// ---------------------------------------------------------------------------
// cross-validate
// ---------------------------------------------------------------------------

struct CvSummary {
  std::vector<RegressionMetrics> fold_metrics;
  RegressionMetrics pooled;
  PearsonCI pearson;
  std::uint64_t config_hash = 0;
  size_t pooled_count = 0;
};

inline CvSummary cmd_cross_validate(const RunConfig& cfg) {
  cfg.validate();
  const auto manifest = load_dataset(cfg.dataset_dir);
  const auto plan = stratified_folds(manifest, cfg.n_folds, cfg.seed);
  const auto hash = config_hash(cfg);
  log_info("cross-validate: " + std::to_string(manifest.samples.size()) + " samples, " +
           std::to_string(cfg.n_folds) + " folds, mode " + to_string(cfg.model.fusion_mode) +
           ", hash " + hash_hex(hash));
  CvSummary summary;
  summary.config_hash = hash;
  with_precision(cfg, [&](auto tag) {
    using T = decltype(tag);
    auto cv = cross_validate<T>(manifest, plan, cfg.model, cfg.augmentation, cfg.seed, hash,
                                cfg.effective_workers());
    write_cv_outputs(cfg, manifest, plan, cv, hash);
    for (const auto& fr : cv.folds) summary.fold_metrics.push_back(fr.metrics);
    summary.pooled = cv.pooled_metrics;
    summary.pearson = pearson_fisher_ci(cv.pooled_y, cv.pooled_pred);
    summary.pooled_count = cv.pooled_y.size();
  });
  return summary;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

inline AblationVariant parse_variant(const std::string& token, LossKind default_loss) {
  AblationVariant v;
  v.name = token;
  const auto colon = token.find(':');
  const std::string mode = colon == std::string::npos ? token : token.substr(0, colon);
  v.fusion_mode = fusion_mode_from_string(mode);
  v.loss = colon == std::string::npos ? default_loss
                                      : loss_kind_from_string(token.substr(colon + 1));
  return v;
}

inline std::vector<AblationVariant> default_ablation_variants(LossKind loss) {
  std::vector<AblationVariant> v;
  for (const char* mode : {"bidirectional", "concat", "image_only", "metadata_only",
                           "img_to_meta", "meta_to_img"})
    v.push_back(parse_variant(mode, loss));
  return v;
}

struct AblationSummary {
  std::vector<std::string> names;
  std::vector<double> mse_mean, mae_mean, r2_mean;
  std::uint64_t config_hash = 0;
};

inline AblationSummary cmd_ablate(const RunConfig& cfg,
                                  const std::vector<std::string>& variant_tokens) {
  cfg.validate();
  std::vector<AblationVariant> variants;
  if (variant_tokens.empty()) {
    variants = default_ablation_variants(cfg.model.loss);
  } else {
    for (const auto& t : variant_tokens) variants.push_back(parse_variant(t, cfg.model.loss));
  }
  if (variants.size() < 2) throw ConfigError("ablate: need at least 2 variants");
  const auto manifest = load_dataset(cfg.dataset_dir);
  const auto plan = stratified_folds(manifest, cfg.n_folds, cfg.seed);
  const auto hash = config_hash(cfg);
  log_info("ablate: " + std::to_string(variants.size()) + " variants x " +
           std::to_string(cfg.n_folds) + " folds");
  AblationSummary summary;
  summary.config_hash = hash;
  with_precision(cfg, [&](auto tag) {
    using T = decltype(tag);
    auto results = run_ablation_matrix<T>(manifest, plan, cfg.model, variants, cfg.augmentation,
                                          cfg.seed, hash, cfg.effective_workers());
    write_ablation_outputs(cfg, results, hash);
    for (const auto& vr : results) {
      summary.names.push_back(vr.variant.name);
      summary.mse_mean.push_back(mean_of(vr.fold_mse));
      summary.mae_mean.push_back(mean_of(vr.fold_mae));
      summary.r2_mean.push_back(mean_of(vr.fold_r2));
    }
  });
  return summary;
}

// ---------------------------------------------------------------------------
// perturb
// ---------------------------------------------------------------------------

struct PerturbSummary {
  std::vector<PerturbFoldRow> rows;
};

inline PerturbSummary cmd_perturb(const RunConfig& cfg, std::vector<int> folds, int n_variants) {
  cfg.validate();
  namespace fs = std::filesystem;
  const auto manifest = load_dataset(cfg.dataset_dir);
  const fs::path out = cfg.out_dir;
  std::ifstream plan_in(out / "foldplan.json");
  if (!plan_in)
    throw DataError("perturb: no foldplan.json under " + out.string() +
                    " (run cross-validate first)");
  std::vector<std::string> ids;
  for (const auto& s : manifest.samples) ids.push_back(s.id);
  const auto plan = fold_plan_from_json(nlohmann::json::parse(plan_in), ids);
  const auto hash = config_hash(cfg);

  PerturbSummary summary;
  with_precision(cfg, [&](auto tag) {
    using T = decltype(tag);
    // original per-fold metrics from the stored checkpoints
    std::vector<std::pair<double, int>> ranked;  // (r2, fold)
    std::vector<Checkpoint<T>> checkpoints(static_cast<size_t>(plan.n_folds));
    std::vector<RegressionMetrics> original(static_cast<size_t>(plan.n_folds));
    std::vector<int> wanted = folds;
    if (wanted.empty())
      for (int f = 0; f < plan.n_folds; ++f) wanted.push_back(f);
    for (int f : wanted)
      if (f < 0 || f >= plan.n_folds)
        throw ConfigError("perturb: fold " + std::to_string(f) + " outside 0.." +
                          std::to_string(plan.n_folds - 1));
    for (int f : wanted) {
      char tag_name[16];
      std::snprintf(tag_name, sizeof(tag_name), "fold_%02d", f);
      const fs::path ckpt = out / "checkpoints" / (std::string(tag_name) + ".ckpt");
      if (!fs::exists(ckpt)) throw DataError("perturb: missing checkpoint for fold " +
                                             std::to_string(f) + " at " + ckpt.string());
      checkpoints[static_cast<size_t>(f)] = load_checkpoint<T>(ckpt);
      FusionModelConfig mc = cfg.model;
      mc.metadata_encoder.field_spec = manifest.schema.field_spec();
      FusionModel<T> model(mc, 0);
      restore_model(model, checkpoints[static_cast<size_t>(f)]);
      const auto rows = encode_all_rows<T>(manifest, checkpoints[static_cast<size_t>(f)].scaler);
      const auto test_idx = plan.test_indices(f);
      const auto pred = predict_indices(model, manifest, test_idx, rows,
                                        cfg.model.training.eval_batch);
      std::vector<double> truth;
      for (int i : test_idx) truth.push_back(manifest.samples[static_cast<size_t>(i)].bmd);
      original[static_cast<size_t>(f)] = regression_metrics(truth, pred);
      ranked.emplace_back(original[static_cast<size_t>(f)].r2, f);
    }
    if (folds.empty()) {
      // default: the three best-performing folds by original R2
      std::sort(ranked.begin(), ranked.end(),
                [](const auto& a, const auto& b) { return a.first > b.first; });
      folds.clear();
      for (size_t i = 0; i < std::min<size_t>(3, ranked.size()); ++i)
        folds.push_back(ranked[i].second);
      std::sort(folds.begin(), folds.end());
    }
    for (int f : folds) {
      FusionModelConfig mc = cfg.model;
      mc.metadata_encoder.field_spec = manifest.schema.field_spec();
      FusionModel<T> model(mc, 0);
      restore_model(model, checkpoints[static_cast<size_t>(f)]);
      const auto test_idx = plan.test_indices(f);
      auto pr = perturbation_test(model, manifest, test_idx,
                                  checkpoints[static_cast<size_t>(f)].scaler, cfg.perturbation,
                                  n_variants, derive_seed(cfg.seed, "perturb", f),
                                  cfg.model.training.eval_batch);
      PerturbFoldRow row;
      row.fold = f;
      row.original = original[static_cast<size_t>(f)];
      row.perturbed = pr.metrics;
      summary.rows.push_back(row);
      char tag_name[16];
      std::snprintf(tag_name, sizeof(tag_name), "fold_%02d", f);
      fs::create_directories(out / "perturbation");
      svg::scatter_with_identity(out / "perturbation" /
                                     (std::string(tag_name) + "_scatter.svg"),
                                 pr.y_true, pr.mean_predictions,
                                 "perturbed fold " + std::to_string(f) +
                                     "  R2=" + fmt(pr.metrics.r2, 4));
    }
  });
  write_perturbation_outputs(cfg, summary.rows, hash);
  return summary;
}

// ---------------------------------------------------------------------------
// screen
// ---------------------------------------------------------------------------

struct ScreenSummary {
  ScreeningMetrics metrics;
  bool partial = false;  // single-class data: no AUC/bands
};

inline ScreenSummary cmd_screen(const RunConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path pred_path = fs::path(cfg.out_dir) / "predictions.csv";
  std::ifstream in(pred_path);
  if (!in)
    throw DataError("screen: no out-of-fold predictions at " + pred_path.string() +
                    " (run cross-validate first)");
  std::string line;
  std::getline(in, line);
  if (line != "id,fold,y_true,y_pred")
    throw DataError("screen: unexpected predictions.csv header: " + line);
  std::vector<double> y, y_hat;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = io_detail::split_csv_line(line);
    if (cells.size() != 4) throw DataError("screen: malformed predictions row");
    y.push_back(std::stod(cells[2]));
    y_hat.push_back(std::stod(cells[3]));
  }
  const auto hash = config_hash(cfg);
  ScreenSummary s;
  s.metrics = screening_metrics(y, y_hat, cfg.screening);
  if (s.metrics.auc_defined) {
    const auto bands = stratified_bootstrap_bands(y, y_hat, cfg.screening,
                                                  cfg.bootstrap_samples, cfg.seed);
    write_screening_outputs(cfg, s.metrics, &bands, hash);
  } else {
    s.partial = true;
    log_info("screen: single-class ground truth; writing flagged partial report");
    write_screening_outputs(cfg, s.metrics, nullptr, hash);
  }
  return s;
}

// ---------------------------------------------------------------------------
// export-attention
// ---------------------------------------------------------------------------

inline AttentionExport cmd_export_attention(const RunConfig& cfg, int fold) {
  cfg.validate();
  namespace fs = std::filesystem;
  const auto manifest = load_dataset(cfg.dataset_dir);
  const fs::path out = cfg.out_dir;
  std::ifstream plan_in(out / "foldplan.json");
  if (!plan_in) throw DataError("export-attention: no foldplan.json under " + out.string());
  std::vector<std::string> ids;
  for (const auto& s : manifest.samples) ids.push_back(s.id);
  const auto plan = fold_plan_from_json(nlohmann::json::parse(plan_in), ids);
  if (fold < 0 || fold >= plan.n_folds)
    throw ConfigError("export-attention: fold " + std::to_string(fold) + " outside 0.." +
                      std::to_string(plan.n_folds - 1));
  char tag_name[16];
  std::snprintf(tag_name, sizeof(tag_name), "fold_%02d", fold);
  const fs::path ckpt_path = out / "checkpoints" / (std::string(tag_name) + ".ckpt");
  if (!fs::exists(ckpt_path))
    throw DataError("export-attention: missing checkpoint " + ckpt_path.string());
  const auto hash = config_hash(cfg);

  AttentionExport exported;
  with_precision(cfg, [&](auto tag) {
    using T = decltype(tag);
    auto ckpt = load_checkpoint<T>(ckpt_path);
    FusionModelConfig mc = cfg.model;
    mc.metadata_encoder.field_spec = manifest.schema.field_spec();
    FusionModel<T> model(mc, 0);
    restore_model(model, ckpt);
    exported = export_field_attention(model, manifest, plan.test_indices(fold), ckpt.scaler,
                                      cfg.model.training.eval_batch);
  });
  write_attention_outputs(cfg, fold, exported, hash);
  return exported;
}

}  // namespace xattn
