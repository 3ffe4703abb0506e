#pragma once

#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "xattn/data.hpp"
#include "xattn/metrics.hpp"
#include "xattn/model.hpp"

namespace xattn {

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<T> m, v;
};

// Classic Adam with bias correction; weight decay enters the gradient
// (L2-in-gradient), not a decoupled update.
template <typename T>
void adam_step(std::vector<T>& param, const std::vector<T>& grad, AdamState<T>& state, int t,
               const OptimizerConfig& hp) {
  if (param.size() != grad.size()) throw ShapeError("adam_step: param/grad size mismatch");
  if (state.m.empty()) {
    state.m.assign(param.size(), T(0));
    state.v.assign(param.size(), T(0));
  }
  const T b1 = static_cast<T>(hp.beta1), b2 = static_cast<T>(hp.beta2);
  const T corr1 = static_cast<T>(1.0 - std::pow(hp.beta1, t));
  const T corr2 = static_cast<T>(1.0 - std::pow(hp.beta2, t));
  const T lr = static_cast<T>(hp.lr), wd = static_cast<T>(hp.weight_decay);
  const T eps = static_cast<T>(hp.eps);
  for (size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i] + wd * param[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
    const T mhat = state.m[i] / corr1;
    const T vhat = state.v[i] / corr2;
    param[i] -= lr * mhat / (static_cast<T>(std::sqrt(static_cast<double>(vhat))) + eps);
  }
}

template <typename T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const OptimizerConfig& hp) : hp_(hp) { hp_.validate(); }

  void step(ParamRegistry<T>& params) {
    if (states_.empty()) states_.resize(params.size());
    ++t_;
    for (size_t i = 0; i < params.size(); ++i)
      adam_step(params[i].tensor->data(), params[i].tensor->grad(), states_[i], t_, hp_);
  }

  int steps_taken() const { return t_; }

 private:
  OptimizerConfig hp_;
  std::vector<AdamState<T>> states_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// Batch assembly and evaluation helpers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> build_image_tensor(const std::vector<const std::vector<float>*>& images, int size) {
  const int b = static_cast<int>(images.size());
  auto t = Tensor<T>::zeros({b, 1, size, size});
  for (int i = 0; i < b; ++i)
    for (size_t j = 0; j < images[static_cast<size_t>(i)]->size(); ++j)
      t.data()[static_cast<size_t>(i) * images[static_cast<size_t>(i)]->size() + j] =
          static_cast<T>((*images[static_cast<size_t>(i)])[j]);
  return t;
}

template <typename T>
Tensor<T> build_meta_tensor(const std::vector<const std::vector<double>*>& rows) {
  const int b = static_cast<int>(rows.size());
  const int d = rows.empty() ? 0 : static_cast<int>(rows[0]->size());
  auto t = Tensor<T>::zeros({b, d});
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < d; ++j)
      t.data()[static_cast<size_t>(i * d + j)] = static_cast<T>((*rows[static_cast<size_t>(i)])[static_cast<size_t>(j)]);
  return t;
}

inline double eval_loss_value(LossKind kind, const WeightedSmoothL1Config& cfg,
                              const std::vector<double>& y, const std::vector<double>& y_hat) {
  double acc = 0;
  for (size_t i = 0; i < y.size(); ++i) {
    switch (kind) {
      case LossKind::kWeightedSmoothL1:
        acc += sample_weight(y[i], cfg) * huber(y[i], y_hat[i], cfg.beta);
        break;
      case LossKind::kMse: {
        const double e = y[i] - y_hat[i];
        acc += e * e;
        break;
      }
      case LossKind::kHuber:
        acc += huber(y[i], y_hat[i], cfg.beta);
        break;
    }
  }
  return acc / static_cast<double>(y.size());
}

// Eval-mode predictions over manifest rows in eval_batch chunks.
template <typename T>
std::vector<double> predict_indices(FusionModel<T>& model, const DatasetManifest& manifest,
                                    const std::vector<int>& indices,
                                    const std::vector<std::vector<double>>& encoded_rows,
                                    int eval_batch) {
  NoGradGuard no_grad;
  Rng unused(0);
  std::vector<double> preds;
  preds.reserve(indices.size());
  for (size_t start = 0; start < indices.size(); start += static_cast<size_t>(eval_batch)) {
    const size_t end = std::min(indices.size(), start + static_cast<size_t>(eval_batch));
    std::vector<const std::vector<float>*> images;
    std::vector<const std::vector<double>*> rows;
    for (size_t i = start; i < end; ++i) {
      images.push_back(&manifest.samples[static_cast<size_t>(indices[i])].image);
      rows.push_back(&encoded_rows[static_cast<size_t>(indices[i])]);
    }
    auto img = build_image_tensor<T>(images, manifest.schema.image_size);
    auto meta = build_meta_tensor<T>(rows);
    auto out = model.forward(img, meta, Mode::kEval, unused);
    for (const T v : out.data()) preds.push_back(static_cast<double>(v));
  }
  return preds;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

template <typename T>
struct Checkpoint {
  std::uint64_t config_hash = 0;
  int fold = -1;
  int epoch = -1;
  double val_loss = std::numeric_limits<double>::infinity();
  ScalerParams scaler;
  std::vector<std::pair<std::string, std::vector<T>>> params;
};

template <typename T>
Checkpoint<T> snapshot_model(FusionModel<T>& model, std::uint64_t config_hash, int fold,
                             int epoch, double val_loss, const ScalerParams& scaler) {
  Checkpoint<T> ck;
  ck.config_hash = config_hash;
  ck.fold = fold;
  ck.epoch = epoch;
  ck.val_loss = val_loss;
  ck.scaler = scaler;
  for (auto& p : model.parameters()) ck.params.emplace_back(p.name, p.tensor->data());
  return ck;
}

template <typename T>
void restore_model(FusionModel<T>& model, const Checkpoint<T>& ck) {
  auto registry = model.parameters();
  if (registry.size() != ck.params.size())
    throw DataError("checkpoint: parameter count mismatch (" + std::to_string(ck.params.size()) +
                    " saved vs " + std::to_string(registry.size()) + " in model)");
  for (size_t i = 0; i < registry.size(); ++i) {
    if (registry[i].name != ck.params[i].first)
      throw DataError("checkpoint: parameter " + ck.params[i].first + " does not match model " +
                      registry[i].name);
    if (registry[i].tensor->data().size() != ck.params[i].second.size())
      throw DataError("checkpoint: size mismatch for " + registry[i].name);
    registry[i].tensor->data() = ck.params[i].second;
  }
}

namespace ckpt_detail {

inline void write_u32(std::ostream& o, std::uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& o, std::uint64_t v) { o.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_f64(std::ostream& o, double v) { o.write(reinterpret_cast<const char*>(&v), 8); }
inline std::uint32_t read_u32(std::istream& i) {
  std::uint32_t v = 0;
  i.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint64_t read_u64(std::istream& i) {
  std::uint64_t v = 0;
  i.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline double read_f64(std::istream& i) {
  double v = 0;
  i.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write("XATTNCKP", 8);
  ckpt_detail::write_u32(out, 1);
  ckpt_detail::write_u32(out, static_cast<std::uint32_t>(sizeof(T)));
  ckpt_detail::write_u64(out, ck.config_hash);
  ckpt_detail::write_u32(out, static_cast<std::uint32_t>(ck.fold));
  ckpt_detail::write_u32(out, static_cast<std::uint32_t>(ck.epoch));
  ckpt_detail::write_f64(out, ck.val_loss);
  ckpt_detail::write_u32(out, static_cast<std::uint32_t>(ck.scaler.mean.size()));
  for (double v : ck.scaler.mean) ckpt_detail::write_f64(out, v);
  for (double v : ck.scaler.stddev) ckpt_detail::write_f64(out, v);
  for (bool v : ck.scaler.zero_variance) out.put(v ? 1 : 0);
  ckpt_detail::write_u32(out, static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, data] : ck.params) {
    ckpt_detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    ckpt_detail::write_u64(out, data.size());
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(T)));
  }
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, "XATTNCKP", 8) != 0)
    throw DataError(path.string() + ": not a checkpoint file");
  if (ckpt_detail::read_u32(in) != 1) throw DataError(path.string() + ": unknown version");
  if (ckpt_detail::read_u32(in) != sizeof(T))
    throw DataError(path.string() + ": precision does not match build");
  Checkpoint<T> ck;
  ck.config_hash = ckpt_detail::read_u64(in);
  ck.fold = static_cast<int>(ckpt_detail::read_u32(in));
  ck.epoch = static_cast<int>(ckpt_detail::read_u32(in));
  ck.val_loss = ckpt_detail::read_f64(in);
  const auto ns = ckpt_detail::read_u32(in);
  ck.scaler.mean.resize(ns);
  ck.scaler.stddev.resize(ns);
  ck.scaler.zero_variance.resize(ns);
  for (auto& v : ck.scaler.mean) v = ckpt_detail::read_f64(in);
  for (auto& v : ck.scaler.stddev) v = ckpt_detail::read_f64(in);
  for (std::uint32_t i = 0; i < ns; ++i) ck.scaler.zero_variance[i] = in.get() != 0;
  const auto np = ckpt_detail::read_u32(in);
  for (std::uint32_t i = 0; i < np; ++i) {
    const auto len = ckpt_detail::read_u32(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto count = ckpt_detail::read_u64(in);
    std::vector<T> data(count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(count * sizeof(T)));
    ck.params.emplace_back(std::move(name), std::move(data));
  }
  if (!in) throw DataError(path.string() + ": truncated checkpoint");
  return ck;
}

// ---------------------------------------------------------------------------
// Fold training
// ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

template <typename T>
struct FoldResult {
  Checkpoint<T> checkpoint;
  std::vector<EpochStats> history;
  std::vector<int> test_indices;
  std::vector<double> y_true, y_pred;  // out-of-fold, at the best checkpoint
  RegressionMetrics metrics;
};

template <typename T>
std::vector<std::vector<double>> encode_all_rows(const DatasetManifest& manifest,
                                                 const ScalerParams& scaler) {
  std::vector<std::vector<double>> rows;
  rows.reserve(manifest.samples.size());
  for (const auto& s : manifest.samples)
    rows.push_back(encode_metadata_row(manifest.schema, s, scaler));
  return rows;
}

template <typename T>
FoldResult<T> train_fold(const DatasetManifest& manifest, const FoldPlan& plan, int fold,
                         const FusionModelConfig& cfg, const AugmentationPolicy& policy,
                         std::uint64_t run_seed, std::uint64_t config_hash) {
  FoldResult<T> result;
  const auto train_idx = plan.train_indices(fold);
  const auto test_idx = plan.test_indices(fold);
  result.test_indices = test_idx;
  if (train_idx.empty() || test_idx.empty())
    throw ConfigError("train_fold: fold " + std::to_string(fold) + " has an empty split");

  const auto scaler = fit_scaler(manifest, train_idx, /*warn=*/false);
  const auto rows = encode_all_rows<T>(manifest, scaler);
  auto expanded = expand_training_set(manifest, plan, fold, policy, run_seed);

  FusionModelConfig model_cfg = cfg;
  model_cfg.metadata_encoder.field_spec = manifest.schema.field_spec();
  FusionModel<T> model(model_cfg, derive_seed(run_seed, "model", fold));
  AdamOptimizer<T> opt(cfg.optimizer);
  auto registry = model.parameters();
  std::vector<Tensor<T>> l1_weights;
  for (auto& p : registry)
    if (p.kind == ParamKind::kWeight) l1_weights.push_back(*p.tensor);

  Rng dropout_rng(derive_seed(run_seed, "dropout", fold));
  std::vector<double> val_truth;
  for (int i : test_idx) val_truth.push_back(manifest.samples[static_cast<size_t>(i)].bmd);

  Checkpoint<T> best;
  std::vector<int> order(expanded.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.training.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(run_seed, "shuffle", fold, epoch));
    shuffle_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    int batch_index = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.training.train_batch), ++batch_index) {
      const size_t end =
          std::min(order.size(), start + static_cast<size_t>(cfg.training.train_batch));
      std::vector<const std::vector<float>*> images;
      std::vector<const std::vector<double>*> meta_rows;
      std::vector<T> targets;
      for (size_t i = start; i < end; ++i) {
        const auto& ts = expanded[static_cast<size_t>(order[i])];
        images.push_back(&ts.image);
        meta_rows.push_back(&rows[static_cast<size_t>(ts.manifest_index)]);
        targets.push_back(static_cast<T>(manifest.samples[static_cast<size_t>(ts.manifest_index)].bmd));
      }
      auto img = build_image_tensor<T>(images, manifest.schema.image_size);
      auto meta = build_meta_tensor<T>(meta_rows);
      auto pred = model.forward(img, meta, Mode::kTrain, dropout_rng);
      auto loss = model_loss(cfg.loss, pred, targets, cfg.loss_cfg);
      if (cfg.optimizer.l1 > 0) loss = add(loss, l1_penalty(l1_weights, cfg.optimizer.l1));
      const double loss_value = static_cast<double>(loss.value());
      if (!std::isfinite(loss_value))
        throw NumericError("non-finite training loss " + std::to_string(loss_value) +
                           " at fold " + std::to_string(fold) + " epoch " +
                           std::to_string(epoch) + " batch " + std::to_string(batch_index));
      model.zero_grad();
      loss.backward();
      opt.step(registry);
      loss_sum += loss_value * static_cast<double>(end - start);
    }

    const auto val_pred = predict_indices(model, manifest, test_idx, rows,
                                          cfg.training.eval_batch);
    const double val_loss = eval_loss_value(cfg.loss, cfg.loss_cfg, val_truth, val_pred);
    if (!std::isfinite(val_loss))
      throw NumericError("non-finite validation loss at fold " + std::to_string(fold) +
                         " epoch " + std::to_string(epoch));
    result.history.push_back({epoch, loss_sum / static_cast<double>(order.size()), val_loss});
    if (val_loss < best.val_loss)
      best = snapshot_model(model, config_hash, fold, epoch, val_loss, scaler);
  }

  restore_model(model, best);
  result.checkpoint = std::move(best);
  result.y_pred = predict_indices(model, manifest, test_idx, rows, cfg.training.eval_batch);
  result.y_true = val_truth;
  result.metrics = regression_metrics(result.y_true, result.y_pred);
  return result;
}

// ---------------------------------------------------------------------------
// Parallel task pool (fold/experiment level parallelism)
// ---------------------------------------------------------------------------

template <typename Fn>
void parallel_tasks(int n_tasks, int workers, Fn&& fn) {
  workers = std::max(1, std::min(workers, n_tasks));
  if (workers == 1) {
    for (int i = 0; i < n_tasks; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      while (true) {
        const int i = next.fetch_add(1);
        if (i >= n_tasks) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Cross-validation and the ablation matrix
// ---------------------------------------------------------------------------

template <typename T>
struct CvResult {
  std::vector<FoldResult<T>> folds;
  std::vector<double> pooled_y, pooled_pred;  // each sample exactly once
  std::vector<int> pooled_fold;
  std::vector<std::string> pooled_ids;
  RegressionMetrics pooled_metrics;
};

template <typename T>
CvResult<T> cross_validate(const DatasetManifest& manifest, const FoldPlan& plan,
                           const FusionModelConfig& cfg, const AugmentationPolicy& policy,
                           std::uint64_t run_seed, std::uint64_t config_hash, int workers) {
  CvResult<T> cv;
  cv.folds.resize(static_cast<size_t>(plan.n_folds));
  parallel_tasks(plan.n_folds, workers, [&](int f) {
    cv.folds[static_cast<size_t>(f)] =
        train_fold<T>(manifest, plan, f, cfg, policy, run_seed, config_hash);
  });
  for (int f = 0; f < plan.n_folds; ++f) {
    const auto& fr = cv.folds[static_cast<size_t>(f)];
    for (size_t i = 0; i < fr.test_indices.size(); ++i) {
      cv.pooled_y.push_back(fr.y_true[i]);
      cv.pooled_pred.push_back(fr.y_pred[i]);
      cv.pooled_fold.push_back(f);
      cv.pooled_ids.push_back(manifest.samples[static_cast<size_t>(fr.test_indices[i])].id);
    }
  }
  cv.pooled_metrics = regression_metrics(cv.pooled_y, cv.pooled_pred);
  return cv;
}

struct AblationVariant {
  std::string name;
  FusionMode fusion_mode = FusionMode::kBidirectional;
  LossKind loss = LossKind::kWeightedSmoothL1;
};

template <typename T>
struct VariantResult {
  AblationVariant variant;
  CvResult<T> cv;
  std::vector<double> fold_mse, fold_mae, fold_r2;
};

template <typename T>
std::vector<VariantResult<T>> run_ablation_matrix(const DatasetManifest& manifest,
                                                  const FoldPlan& plan,
                                                  const FusionModelConfig& base_cfg,
                                                  const std::vector<AblationVariant>& variants,
                                                  const AugmentationPolicy& policy,
                                                  std::uint64_t run_seed,
                                                  std::uint64_t config_hash, int workers) {
  std::vector<VariantResult<T>> results(variants.size());
  for (size_t v = 0; v < variants.size(); ++v) {
    results[v].variant = variants[v];
    results[v].cv.folds.resize(static_cast<size_t>(plan.n_folds));
  }
  // one flat task list across variants and folds
  const int n_tasks = static_cast<int>(variants.size()) * plan.n_folds;
  parallel_tasks(n_tasks, workers, [&](int task) {
    const int v = task / plan.n_folds;
    const int f = task % plan.n_folds;
    FusionModelConfig cfg = base_cfg;
    cfg.fusion_mode = variants[static_cast<size_t>(v)].fusion_mode;
    cfg.loss = variants[static_cast<size_t>(v)].loss;
    results[static_cast<size_t>(v)].cv.folds[static_cast<size_t>(f)] = train_fold<T>(
        manifest, plan, f, cfg, policy, derive_seed(run_seed, "variant", variants[static_cast<size_t>(v)].name),
        config_hash);
  });
  for (auto& vr : results) {
    for (int f = 0; f < plan.n_folds; ++f) {
      const auto& fr = vr.cv.folds[static_cast<size_t>(f)];
      vr.fold_mse.push_back(fr.metrics.mse);
      vr.fold_mae.push_back(fr.metrics.mae);
      vr.fold_r2.push_back(fr.metrics.r2);
      for (size_t i = 0; i < fr.test_indices.size(); ++i) {
        vr.cv.pooled_y.push_back(fr.y_true[i]);
        vr.cv.pooled_pred.push_back(fr.y_pred[i]);
        vr.cv.pooled_fold.push_back(f);
        vr.cv.pooled_ids.push_back(manifest.samples[static_cast<size_t>(fr.test_indices[i])].id);
      }
    }
    vr.cv.pooled_metrics = regression_metrics(vr.cv.pooled_y, vr.cv.pooled_pred);
  }
  return results;
}

// ---------------------------------------------------------------------------
// Perturbation test and attention export
// ---------------------------------------------------------------------------

struct PerturbationResult {
  std::vector<double> y_true;
  std::vector<double> mean_predictions;  // one averaged prediction per test image
  RegressionMetrics metrics;
};

// Predicts n_variants augmented copies of every test image (metadata
// unperturbed) and averages per image.
template <typename T>
PerturbationResult perturbation_test(FusionModel<T>& model, const DatasetManifest& manifest,
                                     const std::vector<int>& test_indices,
                                     const ScalerParams& scaler,
                                     const AugmentationPolicy& policy, int n_variants,
                                     std::uint64_t seed, int eval_batch) {
  PerturbationResult out;
  const auto rows = encode_all_rows<T>(manifest, scaler);
  NoGradGuard no_grad;
  Rng unused(0);
  for (int idx : test_indices) {
    const auto& rec = manifest.samples[static_cast<size_t>(idx)];
    std::vector<std::vector<float>> variants;
    variants.reserve(static_cast<size_t>(n_variants));
    for (int v = 0; v < n_variants; ++v) {
      Rng rng(derive_seed(seed, "perturb", rec.id, v));
      variants.push_back(augment(rec.image, manifest.schema.image_size, policy, rng));
    }
    std::vector<double> preds;
    for (size_t start = 0; start < variants.size(); start += static_cast<size_t>(eval_batch)) {
      const size_t end = std::min(variants.size(), start + static_cast<size_t>(eval_batch));
      std::vector<const std::vector<float>*> images;
      std::vector<const std::vector<double>*> meta_rows;
      for (size_t i = start; i < end; ++i) {
        images.push_back(&variants[i]);
        meta_rows.push_back(&rows[static_cast<size_t>(idx)]);
      }
      auto img = build_image_tensor<T>(images, manifest.schema.image_size);
      auto meta = build_meta_tensor<T>(meta_rows);
      auto pred = model.forward(img, meta, Mode::kEval, unused);
      for (const T v : pred.data()) preds.push_back(static_cast<double>(v));
    }
    // mean via deviations from the first value: exact when all variants agree
    double dev = 0;
    for (double p : preds) dev += p - preds[0];
    out.mean_predictions.push_back(preds[0] + dev / static_cast<double>(preds.size()));
    out.y_true.push_back(rec.bmd);
  }
  out.metrics = regression_metrics(out.y_true, out.mean_predictions);
  return out;
}

struct AttentionExport {
  std::vector<std::string> field_names;
  std::vector<std::vector<double>> per_layer;  // [n_layers][n_fields]
  std::vector<double> overall;                 // [n_fields]
  int n_layers = 0;
};

// Mean attention mass per metadata field (image->metadata branch keys) over
// heads, query tokens and the given samples, per layer and overall.
template <typename T>
AttentionExport export_field_attention(FusionModel<T>& model, const DatasetManifest& manifest,
                                       const std::vector<int>& indices,
                                       const ScalerParams& scaler, int eval_batch) {
  const auto mode = model.config().fusion_mode;
  if (mode != FusionMode::kBidirectional && mode != FusionMode::kImgToMeta)
    throw ConfigError("attention export requires an image->metadata branch (mode " +
                      to_string(mode) + ")");
  const auto rows = encode_all_rows<T>(manifest, scaler);
  NoGradGuard no_grad;
  Rng unused(0);
  AttentionExport out;
  for (const auto& f : manifest.schema.field_spec()) out.field_names.push_back(f.name);
  std::vector<std::vector<double>> sums;
  int total = 0;
  for (size_t start = 0; start < indices.size(); start += static_cast<size_t>(eval_batch)) {
    const size_t end = std::min(indices.size(), start + static_cast<size_t>(eval_batch));
    std::vector<const std::vector<float>*> images;
    std::vector<const std::vector<double>*> meta_rows;
    for (size_t i = start; i < end; ++i) {
      images.push_back(&manifest.samples[static_cast<size_t>(indices[i])].image);
      meta_rows.push_back(&rows[static_cast<size_t>(indices[i])]);
    }
    auto img = build_image_tensor<T>(images, manifest.schema.image_size);
    auto meta = build_meta_tensor<T>(meta_rows);
    BidirectionalTrace trace;
    model.forward(img, meta, Mode::kEval, unused, &trace);
    const auto& tr = trace.img_to_meta;
    if (sums.empty()) {
      out.n_layers = tr.n_layers;
      sums.assign(static_cast<size_t>(tr.n_layers),
                  std::vector<double>(static_cast<size_t>(tr.key_tokens), 0.0));
    }
    const int b = static_cast<int>(end - start);
    for (int l = 0; l < tr.n_layers; ++l) {
      const auto key_mean = tr.layer_key_mean(l);
      for (size_t k = 0; k < key_mean.size(); ++k)
        sums[static_cast<size_t>(l)][k] += key_mean[k] * b;
    }
    total += b;
  }
  if (total == 0) throw ConfigError("attention export: no samples");
  out.per_layer = sums;
  for (auto& layer : out.per_layer)
    for (auto& v : layer) v /= static_cast<double>(total);
  out.overall.assign(out.field_names.size(), 0.0);
  for (const auto& layer : out.per_layer)
    for (size_t k = 0; k < layer.size(); ++k) out.overall[k] += layer[k] / out.n_layers;
  return out;
}

}  // namespace xattn
