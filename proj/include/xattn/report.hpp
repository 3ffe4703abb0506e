#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xattn/config.hpp"
#include "xattn/metrics.hpp"
#include "xattn/svg.hpp"
#include "xattn/train.hpp"

namespace xattn {

inline std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string fmt(double v, int digits = 6) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

inline double mean_of(const std::vector<double>& v) {
  double acc = 0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

inline double sd_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
}

// fold,mse,mae,r2 rows plus mean and sd summary rows.
inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<RegressionMetrics>& folds) {
  std::ofstream out(path);
  out << "fold,mse,mae,r2\n";
  std::vector<double> mse, mae, r2;
  for (size_t f = 0; f < folds.size(); ++f) {
    out << f << "," << fmt(folds[f].mse) << "," << fmt(folds[f].mae) << ","
        << fmt(folds[f].r2) << "\n";
    mse.push_back(folds[f].mse);
    mae.push_back(folds[f].mae);
    r2.push_back(folds[f].r2);
  }
  out << "mean," << fmt(mean_of(mse)) << "," << fmt(mean_of(mae)) << "," << fmt(mean_of(r2))
      << "\n";
  out << "sd," << fmt(sd_of(mse)) << "," << fmt(sd_of(mae)) << "," << fmt(sd_of(r2)) << "\n";
}

inline void write_predictions_csv(const std::filesystem::path& path,
                                  const std::vector<std::string>& ids,
                                  const std::vector<int>& folds, const std::vector<double>& y,
                                  const std::vector<double>& y_hat) {
  std::ofstream out(path);
  out << "id,fold,y_true,y_pred\n";
  for (size_t i = 0; i < ids.size(); ++i)
    out << ids[i] << "," << folds[i] << "," << fmt(y[i], 10) << "," << fmt(y_hat[i], 10) << "\n";
}

inline void write_history_csv(const std::filesystem::path& path,
                              const std::vector<EpochStats>& history) {
  std::ofstream out(path);
  out << "epoch,train_loss,val_loss\n";
  for (const auto& h : history)
    out << h.epoch << "," << fmt(h.train_loss, 10) << "," << fmt(h.val_loss, 10) << "\n";
}

template <typename T>
nlohmann::json cv_report_json(const RunConfig& cfg, const CvResult<T>& cv,
                              std::uint64_t cfg_hash) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config_hash"] = hash_hex(cfg_hash);
  j["dataset_dir"] = cfg.dataset_dir;
  j["n"] = cv.pooled_y.size();
  j["n_folds"] = static_cast<int>(cv.folds.size());
  j["fusion_mode"] = to_string(cfg.model.fusion_mode);
  j["loss"] = to_string(cfg.model.loss);
  nlohmann::json folds = nlohmann::json::array();
  for (size_t f = 0; f < cv.folds.size(); ++f) {
    const auto& m = cv.folds[f].metrics;
    folds.push_back({{"fold", f},
                     {"mse", m.mse},
                     {"mae", m.mae},
                     {"r2", m.r2},
                     {"n", m.n},
                     {"best_epoch", cv.folds[f].checkpoint.epoch},
                     {"val_loss", cv.folds[f].checkpoint.val_loss}});
  }
  j["folds"] = folds;
  j["pooled"] = {{"mse", cv.pooled_metrics.mse},
                 {"mae", cv.pooled_metrics.mae},
                 {"r2", cv.pooled_metrics.r2},
                 {"n", cv.pooled_metrics.n}};
  const auto ci = pearson_fisher_ci(cv.pooled_y, cv.pooled_pred);
  j["pearson"] = {{"r", ci.r}, {"ci_lo", ci.lo}, {"ci_hi", ci.hi}, {"level", 0.95}};
  return j;
}

template <typename T>
void write_cv_outputs(const RunConfig& cfg, const DatasetManifest& manifest,
                      const FoldPlan& plan, const CvResult<T>& cv, std::uint64_t cfg_hash) {
  namespace fs = std::filesystem;
  const fs::path out = cfg.out_dir;
  fs::create_directories(out / "history");
  fs::create_directories(out / "checkpoints");
  fs::create_directories(out / "scatter");

  std::ofstream(out / "foldplan.json") << fold_plan_to_json(plan).dump(2) << "\n";
  std::ofstream(out / "config.json") << run_config_to_json(cfg).dump(2) << "\n";

  std::vector<RegressionMetrics> fold_metrics;
  for (size_t f = 0; f < cv.folds.size(); ++f) {
    const auto& fr = cv.folds[f];
    fold_metrics.push_back(fr.metrics);
    char tag[16];
    std::snprintf(tag, sizeof(tag), "fold_%02zu", f);
    write_history_csv(out / "history" / (std::string(tag) + ".csv"), fr.history);
    save_checkpoint(fr.checkpoint, out / "checkpoints" / (std::string(tag) + ".ckpt"));
    svg::scatter_with_identity(out / "scatter" / (std::string(tag) + ".svg"), fr.y_true,
                               fr.y_pred,
                               "fold " + std::to_string(f) + "  R2=" + fmt(fr.metrics.r2, 4));
  }
  write_metrics_csv(out / "metrics.csv", fold_metrics);
  write_predictions_csv(out / "predictions.csv", cv.pooled_ids, cv.pooled_fold, cv.pooled_y,
                        cv.pooled_pred);
  svg::scatter_with_identity(out / "scatter" / "pooled.svg", cv.pooled_y, cv.pooled_pred,
                             "pooled out-of-fold  R2=" + fmt(cv.pooled_metrics.r2, 4));
  std::ofstream(out / "run_report.json") << cv_report_json(cfg, cv, cfg_hash).dump(2) << "\n";
}

template <typename T>
void write_ablation_outputs(const RunConfig& cfg, const std::vector<VariantResult<T>>& results,
                            std::uint64_t cfg_hash) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(cfg.out_dir) / "ablation";
  fs::create_directories(dir);

  {
    std::ofstream out(dir / "metrics_long.csv");
    out << "variant,fold,mse,mae,r2\n";
    for (const auto& vr : results)
      for (size_t f = 0; f < vr.fold_mse.size(); ++f)
        out << vr.variant.name << "," << f << "," << fmt(vr.fold_mse[f]) << ","
            << fmt(vr.fold_mae[f]) << "," << fmt(vr.fold_r2[f]) << "\n";
  }
  {
    std::ofstream out(dir / "summary.csv");
    out << "variant,fusion_mode,loss,mse_mean,mse_sd,mae_mean,mae_sd,r2_mean,r2_sd,pooled_r2\n";
    for (const auto& vr : results)
      out << vr.variant.name << "," << to_string(vr.variant.fusion_mode) << ","
          << to_string(vr.variant.loss) << "," << fmt(mean_of(vr.fold_mse)) << ","
          << fmt(sd_of(vr.fold_mse)) << "," << fmt(mean_of(vr.fold_mae)) << ","
          << fmt(sd_of(vr.fold_mae)) << "," << fmt(mean_of(vr.fold_r2)) << ","
          << fmt(sd_of(vr.fold_r2)) << "," << fmt(vr.cv.pooled_metrics.r2) << "\n";
  }
  {
    // paired t-tests of every variant against the first (reference) variant
    std::ofstream out(dir / "ttests.csv");
    out << "comparison,metric,t,p,degenerate\n";
    if (!results.empty()) {
      const auto& ref = results.front();
      for (size_t v = 1; v < results.size(); ++v) {
        const auto& other = results[v];
        const std::string cmp = ref.variant.name + "_vs_" + other.variant.name;
        for (const auto& [metric, a, b] :
             {std::tuple{"mse", &ref.fold_mse, &other.fold_mse},
              std::tuple{"mae", &ref.fold_mae, &other.fold_mae},
              std::tuple{"r2", &ref.fold_r2, &other.fold_r2}}) {
          const auto t = paired_t_test(*a, *b);
          out << cmp << "," << metric << "," << fmt(t.t) << "," << fmt(t.p) << ","
              << (t.degenerate ? 1 : 0) << "\n";
        }
      }
    }
  }
  for (const auto& vr : results)
    write_predictions_csv(dir / ("predictions_" + vr.variant.name + ".csv"), vr.cv.pooled_ids,
                          vr.cv.pooled_fold, vr.cv.pooled_y, vr.cv.pooled_pred);
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config_hash"] = hash_hex(cfg_hash);
  for (const auto& vr : results)
    j["variants"].push_back({{"name", vr.variant.name},
                             {"mse_mean", mean_of(vr.fold_mse)},
                             {"mae_mean", mean_of(vr.fold_mae)},
                             {"r2_mean", mean_of(vr.fold_r2)}});
  std::ofstream(dir / "report.json") << j.dump(2) << "\n";
}

struct PerturbFoldRow {
  int fold = 0;
  RegressionMetrics original, perturbed;
};

inline void write_perturbation_outputs(const RunConfig& cfg,
                                       const std::vector<PerturbFoldRow>& rows,
                                       std::uint64_t cfg_hash) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(cfg.out_dir) / "perturbation";
  fs::create_directories(dir);
  std::ofstream out(dir / "perturbation.csv");
  out << "fold,orig_mse,orig_mae,orig_r2,pert_mse,pert_mae,pert_r2\n";
  for (const auto& r : rows)
    out << r.fold << "," << fmt(r.original.mse) << "," << fmt(r.original.mae) << ","
        << fmt(r.original.r2) << "," << fmt(r.perturbed.mse) << "," << fmt(r.perturbed.mae)
        << "," << fmt(r.perturbed.r2) << "\n";
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config_hash"] = hash_hex(cfg_hash);
  for (const auto& r : rows)
    j["folds"].push_back({{"fold", r.fold},
                          {"orig_r2", r.original.r2},
                          {"pert_r2", r.perturbed.r2}});
  std::ofstream(dir / "report.json") << j.dump(2) << "\n";
}

inline nlohmann::json screening_report_json(const ScreeningMetrics& m, const ScreeningConfig& cfg,
                                            std::uint64_t cfg_hash) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config_hash"] = hash_hex(cfg_hash);
  j["threshold"] = {{"bmd", cfg.bmd_threshold},
                    {"t_score", cfg.t_threshold},
                    {"young_adult_mean", cfg.young_adult_mean},
                    {"young_adult_sd", cfg.young_adult_sd}};
  j["counts"] = {{"n", m.n},         {"n_low", m.n_low}, {"n_normal", m.n_normal},
                 {"tp", m.tp},       {"fp", m.fp},       {"tn", m.tn},
                 {"fn", m.fn},       {"prevalence", static_cast<double>(m.n_low) / m.n}};
  j["low"] = {{"precision", m.low.precision}, {"recall", m.low.recall}, {"f1", m.low.f1}};
  j["normal"] = {{"precision", m.normal.precision},
                 {"recall", m.normal.recall},
                 {"f1", m.normal.f1}};
  j["accuracy"] = m.accuracy;
  j["macro"] = {{"precision", m.macro_precision},
                {"recall", m.macro_recall},
                {"f1", m.macro_f1}};
  j["weighted"] = {{"precision", m.weighted_precision},
                   {"recall", m.weighted_recall},
                   {"f1", m.weighted_f1}};
  j["specificity"] = {{"value", m.specificity},
                      {"wilson_lo", m.specificity_ci.lo},
                      {"wilson_hi", m.specificity_ci.hi}};
  j["auc"] = m.auc_defined ? nlohmann::json(m.auc) : nlohmann::json();
  j["auc_defined"] = m.auc_defined;
  j["average_precision"] = std::isnan(m.ap) ? nlohmann::json() : nlohmann::json(m.ap);
  return j;
}

inline void write_band_csv(const std::filesystem::path& path, const CurveBand& band,
                           const std::string& xname, const std::string& yname) {
  std::ofstream out(path);
  out << xname << "," << yname << ",lo,hi\n";
  for (size_t i = 0; i < band.grid.size(); ++i)
    out << fmt(band.grid[i]) << "," << fmt(band.point[i]) << "," << fmt(band.lo[i]) << ","
        << fmt(band.hi[i]) << "\n";
}

inline void write_screening_outputs(const RunConfig& cfg, const ScreeningMetrics& m,
                                    const BootstrapBands* bands, std::uint64_t cfg_hash) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(cfg.out_dir) / "screening";
  fs::create_directories(dir);
  std::ofstream(dir / "report.json")
      << screening_report_json(m, cfg.screening, cfg_hash).dump(2) << "\n";
  svg::bar_chart(dir / "class_metrics.svg",
                 {"low prec", "low rec", "low f1", "norm prec", "norm rec", "norm f1"},
                 {m.low.precision, m.low.recall, m.low.f1, m.normal.precision, m.normal.recall,
                  m.normal.f1},
                 "screening metrics at BMD < " + fmt(cfg.screening.bmd_threshold, 3), 1.0);
  if (bands) {
    write_band_csv(dir / "roc.csv", bands->roc, "fpr", "tpr");
    write_band_csv(dir / "pr.csv", bands->pr, "recall", "precision");
    svg::curve_with_band(dir / "roc.svg", bands->roc.grid, bands->roc.point, bands->roc.lo,
                         bands->roc.hi, "false positive rate", "true positive rate",
                         "ROC  AUC=" + fmt(m.auc, 4), /*diagonal=*/true);
    svg::curve_with_band(dir / "pr.svg", bands->pr.grid, bands->pr.point, bands->pr.lo,
                         bands->pr.hi, "recall", "precision", "PR  AP=" + fmt(m.ap, 4));
  }
}

inline void write_attention_outputs(const RunConfig& cfg, int fold, const AttentionExport& exp,
                                    std::uint64_t cfg_hash) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(cfg.out_dir) / "attention";
  fs::create_directories(dir);
  char tag[16];
  std::snprintf(tag, sizeof(tag), "fold_%02d", fold);
  {
    std::ofstream out(dir / (std::string(tag) + "_attention.csv"));
    out << "layer";
    for (const auto& name : exp.field_names) out << "," << name;
    out << "\n";
    for (int l = 0; l < exp.n_layers; ++l) {
      out << (l + 1);
      for (double v : exp.per_layer[static_cast<size_t>(l)]) out << "," << fmt(v, 8);
      out << "\n";
    }
    out << "all";
    for (double v : exp.overall) out << "," << fmt(v, 8);
    out << "\n";
  }
  for (int l = 0; l < exp.n_layers; ++l)
    svg::bar_chart(dir / (std::string(tag) + "_layer_" + std::to_string(l + 1) + ".svg"),
                   exp.field_names, exp.per_layer[static_cast<size_t>(l)],
                   "field attention, layer " + std::to_string(l + 1));
  svg::bar_chart(dir / (std::string(tag) + "_overall.svg"), exp.field_names, exp.overall,
                 "field attention, all layers");
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config_hash"] = hash_hex(cfg_hash);
  j["fold"] = fold;
  j["fields"] = exp.field_names;
  j["overall"] = exp.overall;
  std::ofstream(dir / (std::string(tag) + "_report.json")) << j.dump(2) << "\n";
}

}  // namespace xattn
