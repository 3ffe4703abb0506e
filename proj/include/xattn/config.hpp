#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <thread>

#include <json.hpp>

#include "xattn/data.hpp"
#include "xattn/metrics.hpp"
#include "xattn/model.hpp"

namespace xattn {

// Complete run configuration: model + training hyperparameters, dataset and
// output paths, and command options. Human-editable JSON with a schema
// version; unknown keys are rejected.
struct RunConfig {
  int schema_version = 1;
  std::string dataset_dir;
  std::string out_dir = "runs/out";
  std::uint64_t seed = 42;
  int workers = 0;  // 0 = all available cores
  std::string precision = "f32";
  FusionModelConfig model;
  AugmentationPolicy augmentation;
  AugmentationPolicy perturbation = AugmentationPolicy::perturbation();
  ScreeningConfig screening;
  int n_folds = 10;
  int perturb_variants = 20;
  int bootstrap_samples = 4000;

  void validate() const {
    if (precision != "f32" && precision != "f64")
      throw ConfigError("config: precision must be f32 or f64, got " + precision);
    if (n_folds < 2) throw ConfigError("config: n_folds must be >= 2");
    if (perturb_variants < 1) throw ConfigError("config: perturb_variants must be >= 1");
    if (bootstrap_samples < 1) throw ConfigError("config: bootstrap_samples must be >= 1");
    if (workers < 0) throw ConfigError("config: workers must be >= 0");
    model.optimizer.validate();
    model.training.validate();
    model.loss_cfg.validate();
    augmentation.validate();
    perturbation.validate();
    screening.validate();
  }

  int effective_workers() const {
    if (workers > 0) return workers;
    const unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? static_cast<int>(hc) : 1;
  }
};

namespace config_detail {

inline void expect_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                        const std::string& where) {
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw ConfigError("config: unknown key '" + key + "' in " + where);
}

template <typename T>
void maybe(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

inline void parse_augmentation(const nlohmann::json& j, AugmentationPolicy& p,
                               const std::string& where) {
  expect_keys(j,
              {"probability", "ops_min", "ops_max", "noise_sigma", "scale_lo", "scale_hi",
               "translate_frac", "rotate_deg", "shear_deg", "brightness_limit", "contrast_limit",
               "bin_multiplicity"},
              where);
  maybe(j, "probability", p.probability);
  maybe(j, "ops_min", p.ops_min);
  maybe(j, "ops_max", p.ops_max);
  maybe(j, "noise_sigma", p.noise_sigma);
  maybe(j, "scale_lo", p.scale_lo);
  maybe(j, "scale_hi", p.scale_hi);
  maybe(j, "translate_frac", p.translate_frac);
  maybe(j, "rotate_deg", p.rotate_deg);
  maybe(j, "shear_deg", p.shear_deg);
  maybe(j, "brightness_limit", p.brightness_limit);
  maybe(j, "contrast_limit", p.contrast_limit);
  if (j.contains("bin_multiplicity")) {
    const auto mult = j.at("bin_multiplicity").get<std::vector<int>>();
    if (mult.size() != p.bin_multiplicity.size())
      throw ConfigError("config: bin_multiplicity needs " +
                        std::to_string(p.bin_multiplicity.size()) + " entries");
    std::copy(mult.begin(), mult.end(), p.bin_multiplicity.begin());
  }
}

inline nlohmann::json augmentation_json(const AugmentationPolicy& p) {
  return {{"probability", p.probability},
          {"ops_min", p.ops_min},
          {"ops_max", p.ops_max},
          {"noise_sigma", p.noise_sigma},
          {"scale_lo", p.scale_lo},
          {"scale_hi", p.scale_hi},
          {"translate_frac", p.translate_frac},
          {"rotate_deg", p.rotate_deg},
          {"shear_deg", p.shear_deg},
          {"brightness_limit", p.brightness_limit},
          {"contrast_limit", p.contrast_limit},
          {"bin_multiplicity",
           std::vector<int>(p.bin_multiplicity.begin(), p.bin_multiplicity.end())}};
}

}  // namespace config_detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using config_detail::expect_keys;
  using config_detail::maybe;
  RunConfig cfg;
  expect_keys(j,
              {"schema_version", "dataset_dir", "out_dir", "seed", "workers", "precision",
               "model", "loss", "optimizer", "training", "cv", "augmentation", "perturbation",
               "screening"},
              "config root");
  maybe(j, "schema_version", cfg.schema_version);
  if (cfg.schema_version != 1)
    throw ConfigError("config: unsupported schema_version " +
                      std::to_string(cfg.schema_version));
  maybe(j, "dataset_dir", cfg.dataset_dir);
  maybe(j, "out_dir", cfg.out_dir);
  maybe(j, "seed", cfg.seed);
  maybe(j, "workers", cfg.workers);
  maybe(j, "precision", cfg.precision);

  if (j.contains("model")) {
    const auto& m = j.at("model");
    expect_keys(m, {"fusion_mode", "head_dropout_p", "image_encoder", "metadata_encoder",
                    "attention"},
                "model");
    if (m.contains("fusion_mode"))
      cfg.model.fusion_mode = fusion_mode_from_string(m.at("fusion_mode").get<std::string>());
    maybe(m, "head_dropout_p", cfg.model.head_dropout_p);
    if (m.contains("image_encoder")) {
      const auto& ie = m.at("image_encoder");
      expect_keys(ie,
                  {"image_size", "conv_channels", "kernel_size", "stride", "pooled_feature_dim",
                   "projection_dim", "dropout_p", "token_count"},
                  "model.image_encoder");
      auto& e = cfg.model.image_encoder;
      maybe(ie, "image_size", e.image_size);
      maybe(ie, "conv_channels", e.conv_channels);
      maybe(ie, "kernel_size", e.kernel_size);
      maybe(ie, "stride", e.stride);
      if (ie.contains("pooled_feature_dim"))
        e.pooled_feature_dim = ie.at("pooled_feature_dim").get<int>();
      else
        e.pooled_feature_dim = e.conv_channels.back();
      maybe(ie, "projection_dim", e.projection_dim);
      maybe(ie, "dropout_p", e.dropout_p);
      maybe(ie, "token_count", e.token_count);
    }
    if (m.contains("metadata_encoder")) {
      const auto& me = m.at("metadata_encoder");
      expect_keys(me, {"hidden_dim", "embed_dim", "dropout_p"}, "model.metadata_encoder");
      auto& e = cfg.model.metadata_encoder;
      maybe(me, "hidden_dim", e.hidden_dim);
      maybe(me, "embed_dim", e.embed_dim);
      maybe(me, "dropout_p", e.dropout_p);
    }
    if (m.contains("attention")) {
      const auto& at = m.at("attention");
      expect_keys(at, {"n_layers", "n_heads", "updater_dropout_p", "updater_residual_scale"},
                  "model.attention");
      auto& a = cfg.model.attention;
      maybe(at, "n_layers", a.n_layers);
      maybe(at, "n_heads", a.n_heads);
      maybe(at, "updater_dropout_p", a.updater_dropout_p);
      maybe(at, "updater_residual_scale", a.updater_residual_scale);
    }
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    expect_keys(l, {"kind", "center", "lambda", "beta"}, "loss");
    if (l.contains("kind")) cfg.model.loss = loss_kind_from_string(l.at("kind").get<std::string>());
    maybe(l, "center", cfg.model.loss_cfg.center);
    maybe(l, "lambda", cfg.model.loss_cfg.lambda);
    maybe(l, "beta", cfg.model.loss_cfg.beta);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    expect_keys(o, {"lr", "weight_decay", "l1", "beta1", "beta2", "eps"}, "optimizer");
    auto& opt = cfg.model.optimizer;
    maybe(o, "lr", opt.lr);
    maybe(o, "weight_decay", opt.weight_decay);
    maybe(o, "l1", opt.l1);
    maybe(o, "beta1", opt.beta1);
    maybe(o, "beta2", opt.beta2);
    maybe(o, "eps", opt.eps);
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    expect_keys(t, {"epochs", "train_batch", "eval_batch"}, "training");
    maybe(t, "epochs", cfg.model.training.epochs);
    maybe(t, "train_batch", cfg.model.training.train_batch);
    maybe(t, "eval_batch", cfg.model.training.eval_batch);
  }
  if (j.contains("cv")) {
    const auto& c = j.at("cv");
    expect_keys(c, {"n_folds"}, "cv");
    maybe(c, "n_folds", cfg.n_folds);
  }
  if (j.contains("augmentation"))
    config_detail::parse_augmentation(j.at("augmentation"), cfg.augmentation, "augmentation");
  if (j.contains("perturbation")) {
    const auto& p = j.at("perturbation");
    expect_keys(p, {"variants", "ops_min", "ops_max", "probability"}, "perturbation");
    maybe(p, "variants", cfg.perturb_variants);
    maybe(p, "ops_min", cfg.perturbation.ops_min);
    maybe(p, "ops_max", cfg.perturbation.ops_max);
    maybe(p, "probability", cfg.perturbation.probability);
  }
  if (j.contains("screening")) {
    const auto& s = j.at("screening");
    expect_keys(s,
                {"young_adult_mean", "young_adult_sd", "t_threshold", "bmd_threshold",
                 "bootstrap_samples"},
                "screening");
    maybe(s, "young_adult_mean", cfg.screening.young_adult_mean);
    maybe(s, "young_adult_sd", cfg.screening.young_adult_sd);
    maybe(s, "t_threshold", cfg.screening.t_threshold);
    maybe(s, "bmd_threshold", cfg.screening.bmd_threshold);
    maybe(s, "bootstrap_samples", cfg.bootstrap_samples);
  }
  cfg.validate();
  return cfg;
}

// Canonical full serialization; object keys are emitted sorted, so the dump
// is a stable hashing surface.
inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["schema_version"] = cfg.schema_version;
  j["dataset_dir"] = cfg.dataset_dir;
  j["out_dir"] = cfg.out_dir;
  j["seed"] = cfg.seed;
  j["workers"] = cfg.workers;
  j["precision"] = cfg.precision;
  j["model"] = {
      {"fusion_mode", to_string(cfg.model.fusion_mode)},
      {"head_dropout_p", cfg.model.head_dropout_p},
      {"image_encoder",
       {{"image_size", cfg.model.image_encoder.image_size},
        {"conv_channels", cfg.model.image_encoder.conv_channels},
        {"kernel_size", cfg.model.image_encoder.kernel_size},
        {"stride", cfg.model.image_encoder.stride},
        {"pooled_feature_dim", cfg.model.image_encoder.pooled_feature_dim},
        {"projection_dim", cfg.model.image_encoder.projection_dim},
        {"dropout_p", cfg.model.image_encoder.dropout_p},
        {"token_count", cfg.model.image_encoder.token_count}}},
      {"metadata_encoder",
       {{"hidden_dim", cfg.model.metadata_encoder.hidden_dim},
        {"embed_dim", cfg.model.metadata_encoder.embed_dim},
        {"dropout_p", cfg.model.metadata_encoder.dropout_p}}},
      {"attention",
       {{"n_layers", cfg.model.attention.n_layers},
        {"n_heads", cfg.model.attention.n_heads},
        {"updater_dropout_p", cfg.model.attention.updater_dropout_p},
        {"updater_residual_scale", cfg.model.attention.updater_residual_scale}}}};
  j["loss"] = {{"kind", to_string(cfg.model.loss)},
               {"center", cfg.model.loss_cfg.center},
               {"lambda", cfg.model.loss_cfg.lambda},
               {"beta", cfg.model.loss_cfg.beta}};
  j["optimizer"] = {{"lr", cfg.model.optimizer.lr},
                    {"weight_decay", cfg.model.optimizer.weight_decay},
                    {"l1", cfg.model.optimizer.l1},
                    {"beta1", cfg.model.optimizer.beta1},
                    {"beta2", cfg.model.optimizer.beta2},
                    {"eps", cfg.model.optimizer.eps}};
  j["training"] = {{"epochs", cfg.model.training.epochs},
                   {"train_batch", cfg.model.training.train_batch},
                   {"eval_batch", cfg.model.training.eval_batch}};
  j["cv"] = {{"n_folds", cfg.n_folds}};
  j["augmentation"] = config_detail::augmentation_json(cfg.augmentation);
  j["perturbation"] = {{"variants", cfg.perturb_variants},
                       {"ops_min", cfg.perturbation.ops_min},
                       {"ops_max", cfg.perturbation.ops_max},
                       {"probability", cfg.perturbation.probability}};
  j["screening"] = {{"young_adult_mean", cfg.screening.young_adult_mean},
                    {"young_adult_sd", cfg.screening.young_adult_sd},
                    {"t_threshold", cfg.screening.t_threshold},
                    {"bmd_threshold", cfg.screening.bmd_threshold},
                    {"bootstrap_samples", cfg.bootstrap_samples}};
  return j;
}

inline std::uint64_t config_hash(const RunConfig& cfg) {
  return fnv1a(run_config_to_json(cfg).dump());
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace xattn
