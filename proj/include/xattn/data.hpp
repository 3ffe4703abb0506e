#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xattn/encoders.hpp"  // FieldSpec, SchemaError
#include "xattn/rng.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Schema and records
// ---------------------------------------------------------------------------

struct DatasetSchema {
  struct Numeric {
    std::string name, unit;
    int decimals = 2;
  };
  struct Categorical {
    std::string name;
    std::vector<std::string> levels;
  };
  std::vector<Numeric> numeric;
  std::vector<Categorical> categorical;
  int image_size = 64;

  std::vector<FieldSpec> field_spec() const {
    std::vector<FieldSpec> fs;
    for (const auto& f : numeric) fs.push_back({f.name, 1});
    for (const auto& f : categorical) fs.push_back({f.name, static_cast<int>(f.levels.size())});
    return fs;
  }

  int input_dim() const {
    int d = 0;
    for (const auto& f : field_spec()) d += f.width;
    return d;
  }
};

inline DatasetSchema default_schema() {
  DatasetSchema s;
  s.numeric = {{"agexray", "year", 1},      {"hbsage", "year", 1},
               {"epht", "cm", 1},           {"epwt", "kg", 1},
               {"epbmi", "kg/m^2", 2},      {"epalunit", "units/week", 1},
               {"eptotact", "mins/day", 2}, {"epprddiet24", "", 2}};
  s.categorical = {{"absex", {"Male", "Female"}},
                   {"epsmkstat", {"Never", "Ex", "Current"}}};
  return s;
}

struct SampleRecord {
  std::string id;
  std::vector<float> image;  // image_size^2 grayscale values in [0,1]
  std::vector<double> numeric_values;  // aligned with schema.numeric
  std::vector<int> categorical_values;  // level indices, aligned with schema.categorical
  double bmd = 0.0;  // g/cm^2
};

// Per-sample generator internals, kept in memory for oracle tests; never
// serialized with the dataset.
struct GeneratorLatents {
  double image_factor = 0.0;   // u, encoded in the band texture
  double meta_signal = 0.0;    // m, standardized metadata combination
  double cross_term = 0.0;     // u * sex interaction
  double noise = 0.0;
};

struct GeneratorParams {
  int image_size = 64;
  double bmd_mean = 0.889;
  double bmd_std = 0.130;
  // variance split of the standardized BMD signal
  double frac_image = 0.40;
  double frac_meta = 0.25;
  double frac_cross = 0.15;
  double frac_noise = 0.20;
  double guard_lo = 0.4, guard_hi = 1.4;

  void validate() const {
    const double s = frac_image + frac_meta + frac_cross + frac_noise;
    if (std::fabs(s - 1.0) > 1e-9)
      throw ConfigError("generator: variance fractions must sum to 1, got " + std::to_string(s));
    if (bmd_std <= 0 || image_size < 16) throw ConfigError("generator: bad parameters");
  }
};

struct DatasetManifest {
  DatasetSchema schema;
  std::vector<SampleRecord> samples;
  std::uint64_t seed = 0;
  int n = 0;
  GeneratorParams params;
  std::vector<GeneratorLatents> latents;  // empty when loaded from disk

  int numeric_index(const std::string& name) const {
    for (size_t i = 0; i < schema.numeric.size(); ++i)
      if (schema.numeric[i].name == name) return static_cast<int>(i);
    throw SchemaError("unknown numeric field: " + name);
  }
};

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace gen_detail {

// Calibration constants for the standardized metadata signal and the clamped
// image factor, fixed by simulation of the generating distributions.
constexpr double kMetaSignalMean = -0.05405829;
constexpr double kMetaSignalStd = 0.74617032;
constexpr double kImageFactorStd = 0.98801060;

inline double round_to(double v, int decimals) {
  const double scale = std::pow(10.0, decimals);
  return std::round(v * scale) / scale;
}

inline double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Procedural femoral-band texture. The band-background contrast and the
// strand frequency both encode the image factor u; band pose, illumination
// gradient and speckle are uninformative nuisance variation.
inline std::vector<float> render_image(int size, double u_n, Rng& rng) {
  const double b0 = rng.uniform(0.30, 0.42);
  const double band_center = rng.uniform(0.35 * size, 0.65 * size);
  const double halfwidth = (0.14 + 0.023 * rng.uniform(-1.0, 1.0)) * size;
  const double angle = rng.uniform(-0.21, 0.21);  // radians
  const double gx = rng.uniform(-0.05, 0.05);
  const double gy = rng.uniform(-0.05, 0.05);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double contrast = 0.20 + 0.05 * u_n;
  const double strands = 6.0 + 2.0 * u_n;  // strand count across the width
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double cx = 0.5 * (size - 1), cy = 0.5 * (size - 1);

  std::vector<float> img(static_cast<size_t>(size) * size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double d = (y - band_center) * ca - (x - cx) * sa;  // distance to band axis
      const double along = (x - cx) * ca + (y - cy) * sa;
      const double edge = smoothstep01((halfwidth - std::fabs(d)) / 6.0 + 0.5);
      const double tex = 0.035 * std::sin(2.0 * M_PI * strands * along / size + phase);
      // fade the band toward the borders so geometric augmentation with edge
      // padding stays reversible
      const int border = std::min(std::min(x, size - 1 - x), std::min(y, size - 1 - y));
      const double fade = smoothstep01(border / 12.0);
      double v = b0 + (contrast + tex) * edge * fade +
                 gx * (static_cast<double>(x) / size - 0.5) +
                 gy * (static_cast<double>(y) / size - 0.5) + 0.005 * rng.normal();
      v = std::clamp(v, 0.0, 1.0);
      const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
      img[static_cast<size_t>(y) * size + x] = static_cast<float>(q / 65535.0);
    }
  return img;
}

}  // namespace gen_detail

// Draws a synthetic cohort whose metadata approximates the published summary
// statistics and whose BMD is a mix of a metadata signal, an image-texture
// signal, a genuine cross-modal interaction, and noise.
inline DatasetManifest generate_synthetic(int n, std::uint64_t seed,
                                          GeneratorParams params = {}) {
  params.validate();
  if (n < 20) throw ConfigError("generate_synthetic: n must be >= 20, got " + std::to_string(n));

  DatasetManifest m;
  m.schema = default_schema();
  m.schema.image_size = params.image_size;
  m.seed = seed;
  m.n = n;
  m.params = params;

  const double a_img = std::sqrt(params.frac_image);
  const double a_meta = std::sqrt(params.frac_meta);
  const double a_cross = std::sqrt(params.frac_cross);
  const double a_noise = std::sqrt(params.frac_noise);

  int digits = 1;
  for (int v = n; v >= 10; v /= 10) ++digits;

  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "sample", i));
    SampleRecord rec;
    {
      std::ostringstream os;
      os << "s";
      std::string num = std::to_string(i + 1);
      os << std::string(static_cast<size_t>(std::max(0, digits + 1 - static_cast<int>(num.size()))), '0') << num;
      rec.id = os.str();
    }

    const bool male = rng.uniform() < 0.511;
    const double agexray = rng.normal(75.45, 2.58);
    const double hbsage = agexray + rng.normal(0.64, 0.55);
    const double epht = rng.normal(male ? 171.5 : 160.6, 6.2);
    const double epwt = 0.62 * (epht - 166.17) + 77.13 + rng.normal(0.0, 10.4);
    const double epbmi = epwt / ((epht / 100.0) * (epht / 100.0));
    const double epalunit = std::max(0.0, rng.normal(6.80, 10.16));
    const double eptotact = std::max(0.0, rng.normal(225.11, 121.68));
    const double epprddiet24 = rng.normal(0.13, 1.53);
    const double u_smoke = rng.uniform();
    const int smoke = u_smoke < 0.519 ? 0 : (u_smoke < 0.978 ? 1 : 2);
    const double u_img = std::clamp(rng.normal(), -2.5, 2.5);
    const double eps_noise = rng.normal();

    const double sex_pm = male ? 1.0 : -1.0;
    const double smoke_val = smoke == 0 ? 0.0 : (smoke == 1 ? -0.5 : -1.5);
    const double z_age = (agexray - 75.45) / 2.58;
    const double z_wt = (epwt - 77.13) / 12.24;
    const double z_act = (eptotact - 225.11) / 121.68;
    const double z_diet = (epprddiet24 - 0.13) / 1.53;
    const double m_raw = 0.40 * sex_pm - 0.35 * z_age + 0.35 * z_wt + 0.25 * z_act +
                         0.15 * z_diet + 0.25 * smoke_val;
    const double m_n = (m_raw - gen_detail::kMetaSignalMean) / gen_detail::kMetaSignalStd;
    const double u_n = u_img / gen_detail::kImageFactorStd;

    GeneratorLatents lat;
    lat.image_factor = u_n;
    lat.meta_signal = m_n;
    lat.cross_term = u_n * sex_pm;
    lat.noise = eps_noise;

    double bmd = params.bmd_mean +
                 params.bmd_std * (a_img * u_n + a_meta * m_n + a_cross * lat.cross_term +
                                   a_noise * eps_noise);
    bmd = std::clamp(bmd, params.guard_lo + 1e-3, params.guard_hi - 1e-3);

    rec.numeric_values = {gen_detail::round_to(agexray, 1),
                          gen_detail::round_to(hbsage, 1),
                          gen_detail::round_to(epht, 1),
                          gen_detail::round_to(epwt, 1),
                          gen_detail::round_to(epbmi, 2),
                          gen_detail::round_to(epalunit, 1),
                          gen_detail::round_to(eptotact, 2),
                          gen_detail::round_to(epprddiet24, 2)};
    rec.categorical_values = {male ? 0 : 1, smoke};
    rec.bmd = gen_detail::round_to(bmd, 3);
    rec.image = gen_detail::render_image(params.image_size, u_n, rng);

    m.samples.push_back(std::move(rec));
    m.latents.push_back(lat);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentationPolicy {
  double probability = 0.5;  // per selected op
  int ops_min = 1, ops_max = 3;
  double noise_sigma = 0.02;  // "moderate" Gaussian noise, [0,1] intensity units
  double scale_lo = 0.95, scale_hi = 1.05;
  double translate_frac = 0.03;
  double rotate_deg = 10.0;
  double shear_deg = 3.0;
  double brightness_limit = 0.1, contrast_limit = 0.1;
  // augmented copies per training sample, by BMD bin [0.6,0.7) ... [1.1,1.2]
  std::array<int, 6> bin_multiplicity{4, 2, 1, 1, 2, 4};

  void validate() const {
    if (probability < 0 || probability > 1) throw ConfigError("augment: probability in [0,1]");
    if (ops_min < 0 || ops_max < ops_min) throw ConfigError("augment: bad ops range");
    for (int mult : bin_multiplicity)
      if (mult < 0) throw ConfigError("augment: multiplicity must be >= 0");
  }

  static AugmentationPolicy perturbation() {
    AugmentationPolicy p;
    p.ops_min = 1;
    p.ops_max = 2;
    return p;
  }
};

namespace aug_detail {

inline double bilinear_at(const std::vector<float>& img, int size, double sx, double sy) {
  // edge padding
  sx = std::clamp(sx, 0.0, static_cast<double>(size - 1));
  sy = std::clamp(sy, 0.0, static_cast<double>(size - 1));
  const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
  const int x1 = std::min(x0 + 1, size - 1), y1 = std::min(y0 + 1, size - 1);
  const double fx = sx - x0, fy = sy - y0;
  const double v00 = img[static_cast<size_t>(y0) * size + x0];
  const double v01 = img[static_cast<size_t>(y0) * size + x1];
  const double v10 = img[static_cast<size_t>(y1) * size + x0];
  const double v11 = img[static_cast<size_t>(y1) * size + x1];
  return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
}

// Applies the inverse-mapped affine [a b; c d] with translation (tx, ty)
// about the image center, bilinear sampling with edge padding.
inline void affine_inverse(std::vector<float>& img, int size, double a, double b, double c,
                           double d, double tx, double ty) {
  const double cx = 0.5 * (size - 1), cy = 0.5 * (size - 1);
  std::vector<float> out(img.size());
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double rx = x - cx - tx, ry = y - cy - ty;
      const double det = a * d - b * c;
      const double sx = (d * rx - b * ry) / det + cx;
      const double sy = (-c * rx + a * ry) / det + cy;
      out[static_cast<size_t>(y) * size + x] =
          static_cast<float>(std::clamp(bilinear_at(img, size, sx, sy), 0.0, 1.0));
    }
  img = std::move(out);
}

}  // namespace aug_detail

enum class AugmentOp : int {
  kGaussNoise = 0,
  kHorizontalFlip,
  kScale,
  kTranslate,
  kRotate,
  kShear,
  kBrightnessContrast,
};
constexpr int kAugmentOpCount = 7;

inline void apply_augment_op(std::vector<float>& img, int size, AugmentOp op,
                             const AugmentationPolicy& p, Rng& rng) {
  switch (op) {
    case AugmentOp::kGaussNoise: {
      for (auto& v : img)
        v = static_cast<float>(std::clamp(static_cast<double>(v) + p.noise_sigma * rng.normal(), 0.0, 1.0));
      break;
    }
    case AugmentOp::kHorizontalFlip: {
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size / 2; ++x)
          std::swap(img[static_cast<size_t>(y) * size + x],
                    img[static_cast<size_t>(y) * size + (size - 1 - x)]);
      break;
    }
    case AugmentOp::kScale: {
      const double s = rng.uniform(p.scale_lo, p.scale_hi);
      aug_detail::affine_inverse(img, size, s, 0, 0, s, 0, 0);
      break;
    }
    case AugmentOp::kTranslate: {
      const double tx = rng.uniform(-p.translate_frac, p.translate_frac) * size;
      const double ty = rng.uniform(-p.translate_frac, p.translate_frac) * size;
      aug_detail::affine_inverse(img, size, 1, 0, 0, 1, tx, ty);
      break;
    }
    case AugmentOp::kRotate: {
      const double th = rng.uniform(-p.rotate_deg, p.rotate_deg) * M_PI / 180.0;
      aug_detail::affine_inverse(img, size, std::cos(th), -std::sin(th), std::sin(th),
                                 std::cos(th), 0, 0);
      break;
    }
    case AugmentOp::kShear: {
      const double sh = std::tan(rng.uniform(-p.shear_deg, p.shear_deg) * M_PI / 180.0);
      aug_detail::affine_inverse(img, size, 1, sh, 0, 1, 0, 0);
      break;
    }
    case AugmentOp::kBrightnessContrast: {
      const double b = rng.uniform(-p.brightness_limit, p.brightness_limit);
      const double c = rng.uniform(-p.contrast_limit, p.contrast_limit);
      double mean = 0;
      for (float v : img) mean += v;
      mean /= static_cast<double>(img.size());
      for (auto& v : img)
        v = static_cast<float>(std::clamp(mean + (v - mean) * (1.0 + c) + b, 0.0, 1.0));
      break;
    }
  }
}

// Draws k ops (k uniform in the policy range) without replacement; each
// selected op fires with the policy probability.
inline std::vector<float> augment(const std::vector<float>& image, int size,
                                  const AugmentationPolicy& policy, Rng& rng) {
  policy.validate();
  std::vector<float> out = image;
  const int k = policy.ops_max > policy.ops_min
                    ? rng.uniform_int(policy.ops_min, policy.ops_max)
                    : policy.ops_min;
  std::array<int, kAugmentOpCount> order{0, 1, 2, 3, 4, 5, 6};
  rng.shuffle(order.begin(), order.end());
  for (int i = 0; i < std::min(k, kAugmentOpCount); ++i) {
    if (rng.uniform() < policy.probability)
      apply_augment_op(out, size, static_cast<AugmentOp>(order[static_cast<size_t>(i)]), policy, rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stratified folds
// ---------------------------------------------------------------------------

struct FoldPlan {
  int n_folds = 10;
  double bin_lo = 0.6, bin_hi = 1.2, bin_step = 0.1;
  std::vector<std::string> ids;
  std::vector<int> fold_of;  // aligned with ids

  int n_bins() const {
    return static_cast<int>(std::lround((bin_hi - bin_lo) / bin_step));
  }

  int bin_of(double bmd) const {
    if (bmd < bin_lo) return 0;
    if (bmd >= bin_hi) return n_bins() - 1;
    const int b = static_cast<int>(std::floor((bmd - bin_lo) / bin_step + 1e-9));
    return std::min(b, n_bins() - 1);
  }

  std::vector<int> test_indices(int fold) const {
    std::vector<int> out;
    for (size_t i = 0; i < fold_of.size(); ++i)
      if (fold_of[i] == fold) out.push_back(static_cast<int>(i));
    return out;
  }

  std::vector<int> train_indices(int fold) const {
    std::vector<int> out;
    for (size_t i = 0; i < fold_of.size(); ++i)
      if (fold_of[i] != fold) out.push_back(static_cast<int>(i));
    return out;
  }
};

// Deterministic stratified partition on binned BMD; per-bin fold counts
// differ by at most one, remainders go to the currently smallest folds.
inline FoldPlan stratified_folds(const DatasetManifest& manifest, int n_folds,
                                 std::uint64_t seed) {
  if (n_folds < 2) throw ConfigError("stratified_folds: n_folds must be >= 2");
  if (static_cast<int>(manifest.samples.size()) < n_folds)
    throw ConfigError("stratified_folds: fewer samples than folds");
  FoldPlan plan;
  plan.n_folds = n_folds;
  for (const auto& s : manifest.samples) plan.ids.push_back(s.id);
  plan.fold_of.assign(manifest.samples.size(), -1);

  const int n_bins = plan.n_bins();
  std::vector<std::vector<int>> bins(static_cast<size_t>(n_bins));
  for (size_t i = 0; i < manifest.samples.size(); ++i)
    bins[static_cast<size_t>(plan.bin_of(manifest.samples[i].bmd))].push_back(static_cast<int>(i));

  std::vector<int> fold_totals(static_cast<size_t>(n_folds), 0);
  for (int b = 0; b < n_bins; ++b) {
    auto& members = bins[static_cast<size_t>(b)];
    if (members.empty()) continue;
    Rng rng(derive_seed(seed, "stratify", b));
    rng.shuffle(members.begin(), members.end());
    const int q = static_cast<int>(members.size()) / n_folds;
    const int r = static_cast<int>(members.size()) % n_folds;
    // counts per fold: q everywhere, +1 for the r least-filled folds
    std::vector<int> order(static_cast<size_t>(n_folds));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int c) { return fold_totals[static_cast<size_t>(a)] < fold_totals[static_cast<size_t>(c)]; });
    std::vector<int> count(static_cast<size_t>(n_folds), q);
    for (int i = 0; i < r; ++i) ++count[static_cast<size_t>(order[static_cast<size_t>(i)])];
    size_t next = 0;
    for (int f = 0; f < n_folds; ++f)
      for (int c = 0; c < count[static_cast<size_t>(f)]; ++c) {
        plan.fold_of[static_cast<size_t>(members[next++])] = f;
        ++fold_totals[static_cast<size_t>(f)];
      }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Metadata preprocessing
// ---------------------------------------------------------------------------

struct ScalerParams {
  std::vector<double> mean, stddev;
  std::vector<bool> zero_variance;
};

// StandardScaler fit on the training split only (population std).
inline ScalerParams fit_scaler(const DatasetManifest& manifest,
                               const std::vector<int>& train_indices, bool warn = true) {
  if (train_indices.empty()) throw DataError("fit_scaler: empty training split");
  const size_t nf = manifest.schema.numeric.size();
  ScalerParams sp;
  sp.mean.assign(nf, 0.0);
  sp.stddev.assign(nf, 1.0);
  sp.zero_variance.assign(nf, false);
  for (size_t f = 0; f < nf; ++f) {
    double acc = 0;
    for (int i : train_indices) acc += manifest.samples[static_cast<size_t>(i)].numeric_values[f];
    const double mean = acc / static_cast<double>(train_indices.size());
    double ss = 0;
    for (int i : train_indices) {
      const double d = manifest.samples[static_cast<size_t>(i)].numeric_values[f] - mean;
      ss += d * d;
    }
    const double var = ss / static_cast<double>(train_indices.size());
    sp.mean[f] = mean;
    if (var > 0) {
      sp.stddev[f] = std::sqrt(var);
    } else {
      sp.stddev[f] = 1.0;  // zero-centering with unit divisor
      sp.zero_variance[f] = true;
      if (warn)
        std::cerr << "warning: zero-variance column '" << manifest.schema.numeric[f].name
                  << "', falling back to centering only\n";
    }
  }
  return sp;
}

inline std::vector<double> encode_metadata_row(const DatasetSchema& schema,
                                               const SampleRecord& rec, const ScalerParams& sp) {
  std::vector<double> row;
  row.reserve(static_cast<size_t>(schema.input_dim()));
  for (size_t f = 0; f < schema.numeric.size(); ++f)
    row.push_back((rec.numeric_values[f] - sp.mean[f]) / sp.stddev[f]);
  for (size_t c = 0; c < schema.categorical.size(); ++c) {
    const auto& levels = schema.categorical[c].levels;
    for (size_t l = 0; l < levels.size(); ++l)
      row.push_back(rec.categorical_values[c] == static_cast<int>(l) ? 1.0 : 0.0);
  }
  return row;
}

// ---------------------------------------------------------------------------
// Training-set expansion (BMD-conditioned augmentation)
// ---------------------------------------------------------------------------

struct TrainSample {
  int manifest_index = 0;
  std::vector<float> image;
  bool augmented = false;
};

// Originals plus per-bin augmented copies; the test split is never touched.
inline std::vector<TrainSample> expand_training_set(const DatasetManifest& manifest,
                                                    const FoldPlan& plan, int fold,
                                                    const AugmentationPolicy& policy,
                                                    std::uint64_t seed) {
  policy.validate();
  std::vector<TrainSample> out;
  for (int idx : plan.train_indices(fold)) {
    const auto& rec = manifest.samples[static_cast<size_t>(idx)];
    out.push_back({idx, rec.image, false});
    const int bin = plan.bin_of(rec.bmd);
    const int copies = policy.bin_multiplicity[static_cast<size_t>(bin)];
    for (int c = 0; c < copies; ++c) {
      Rng rng(derive_seed(seed, "augment", fold, rec.id, c));
      out.push_back({idx, augment(rec.image, manifest.schema.image_size, policy, rng), true});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory I/O
// ---------------------------------------------------------------------------

namespace io_detail {

inline std::string format_decimal(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

inline void write_pgm16(const std::filesystem::path& path, const std::vector<float>& img,
                        int size) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << size << " " << size << "\n65535\n";
  for (float v : img) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 65535.0));
    out.put(static_cast<char>(q >> 8));
    out.put(static_cast<char>(q & 0xff));
  }
}

inline std::vector<float> read_pgm16(const std::filesystem::path& path, int expect_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw DataError(path.string() + ": not a binary PGM");
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  in.get();  // single whitespace after header
  if (w != expect_size || h != expect_size || maxval != 65535)
    throw DataError(path.string() + ": unexpected PGM geometry");
  std::vector<float> img(static_cast<size_t>(w) * h);
  for (auto& v : img) {
    const int hi = in.get(), lo = in.get();
    if (hi < 0 || lo < 0) throw DataError(path.string() + ": truncated PGM");
    v = static_cast<float>(((hi << 8) | lo) / 65535.0);
  }
  return img;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace io_detail

inline void save_dataset(const DatasetManifest& manifest, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw DataError("cannot create dataset directory " + dir.string());

  nlohmann::json schema;
  schema["schema_version"] = 1;
  schema["image_size"] = manifest.schema.image_size;
  for (const auto& f : manifest.schema.numeric)
    schema["numeric"].push_back({{"name", f.name}, {"unit", f.unit}, {"decimals", f.decimals}});
  for (const auto& f : manifest.schema.categorical)
    schema["categorical"].push_back({{"name", f.name}, {"levels", f.levels}});
  std::ofstream(dir / "schema.json") << schema.dump(2) << "\n";

  nlohmann::json params;
  params["seed"] = manifest.seed;
  params["n"] = manifest.n;
  params["image_size"] = manifest.params.image_size;
  params["bmd_mean"] = manifest.params.bmd_mean;
  params["bmd_std"] = manifest.params.bmd_std;
  params["frac_image"] = manifest.params.frac_image;
  params["frac_meta"] = manifest.params.frac_meta;
  params["frac_cross"] = manifest.params.frac_cross;
  params["frac_noise"] = manifest.params.frac_noise;
  std::ofstream(dir / "params.json") << params.dump(2) << "\n";

  std::ofstream csv(dir / "metadata.csv");
  csv << "id";
  for (const auto& f : manifest.schema.numeric) csv << "," << f.name;
  for (const auto& f : manifest.schema.categorical) csv << "," << f.name;
  csv << ",bmd\n";
  for (const auto& rec : manifest.samples) {
    csv << rec.id;
    for (size_t f = 0; f < manifest.schema.numeric.size(); ++f)
      csv << "," << io_detail::format_decimal(rec.numeric_values[f],
                                              manifest.schema.numeric[f].decimals);
    for (size_t c = 0; c < manifest.schema.categorical.size(); ++c)
      csv << "," << manifest.schema.categorical[c].levels[static_cast<size_t>(rec.categorical_values[c])];
    csv << "," << io_detail::format_decimal(rec.bmd, 3) << "\n";
    io_detail::write_pgm16(dir / "images" / (rec.id + ".pgm"), rec.image,
                           manifest.schema.image_size);
  }
}

inline DatasetManifest load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "metadata.csv"))
    throw DataError("no dataset at " + dir.string() + " (metadata.csv missing)");

  DatasetManifest m;
  {
    std::ifstream in(dir / "schema.json");
    if (!in) throw DataError("missing schema.json in " + dir.string());
    nlohmann::json schema = nlohmann::json::parse(in);
    m.schema.image_size = schema.at("image_size").get<int>();
    for (const auto& f : schema.at("numeric"))
      m.schema.numeric.push_back(
          {f.at("name").get<std::string>(), f.at("unit").get<std::string>(), f.at("decimals").get<int>()});
    for (const auto& f : schema.at("categorical"))
      m.schema.categorical.push_back(
          {f.at("name").get<std::string>(), f.at("levels").get<std::vector<std::string>>()});
  }
  {
    std::ifstream in(dir / "params.json");
    if (in) {
      nlohmann::json params = nlohmann::json::parse(in);
      m.seed = params.value("seed", 0ull);
      m.n = params.value("n", 0);
      m.params.image_size = params.value("image_size", m.schema.image_size);
      m.params.bmd_mean = params.value("bmd_mean", 0.889);
      m.params.bmd_std = params.value("bmd_std", 0.130);
      m.params.frac_image = params.value("frac_image", 0.40);
      m.params.frac_meta = params.value("frac_meta", 0.25);
      m.params.frac_cross = params.value("frac_cross", 0.15);
      m.params.frac_noise = params.value("frac_noise", 0.20);
    }
  }

  std::ifstream csv(dir / "metadata.csv");
  std::string line;
  if (!std::getline(csv, line)) throw DataError("empty metadata.csv");
  const auto header = io_detail::split_csv_line(line);
  std::vector<std::string> expected{"id"};
  for (const auto& f : m.schema.numeric) expected.push_back(f.name);
  for (const auto& f : m.schema.categorical) expected.push_back(f.name);
  expected.push_back("bmd");
  if (header != expected) throw SchemaError("metadata.csv header does not match schema");

  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto cells = io_detail::split_csv_line(line);
    if (cells.size() != expected.size())
      throw DataError("metadata.csv row has " + std::to_string(cells.size()) + " cells");
    SampleRecord rec;
    size_t c = 0;
    rec.id = cells[c++];
    for (size_t f = 0; f < m.schema.numeric.size(); ++f)
      rec.numeric_values.push_back(std::stod(cells[c++]));
    for (size_t f = 0; f < m.schema.categorical.size(); ++f) {
      const auto& levels = m.schema.categorical[f].levels;
      const auto it = std::find(levels.begin(), levels.end(), cells[c]);
      if (it == levels.end())
        throw SchemaError("unknown level '" + cells[c] + "' for " + m.schema.categorical[f].name);
      rec.categorical_values.push_back(static_cast<int>(it - levels.begin()));
      ++c;
    }
    rec.bmd = std::stod(cells[c]);
    if (rec.bmd <= 0.4 || rec.bmd >= 1.4)
      throw DataError("sample " + rec.id + " outside the BMD guard range: " +
                      std::to_string(rec.bmd));
    rec.image = io_detail::read_pgm16(dir / "images" / (rec.id + ".pgm"), m.schema.image_size);
    m.samples.push_back(std::move(rec));
  }
  if (m.n == 0) m.n = static_cast<int>(m.samples.size());
  return m;
}

inline nlohmann::json fold_plan_to_json(const FoldPlan& plan) {
  nlohmann::json j;
  j["n_folds"] = plan.n_folds;
  j["bin_lo"] = plan.bin_lo;
  j["bin_hi"] = plan.bin_hi;
  j["bin_step"] = plan.bin_step;
  nlohmann::json assign = nlohmann::json::object();
  for (size_t i = 0; i < plan.ids.size(); ++i) assign[plan.ids[i]] = plan.fold_of[i];
  j["assignments"] = assign;
  return j;
}

inline FoldPlan fold_plan_from_json(const nlohmann::json& j,
                                    const std::vector<std::string>& ids_in_order) {
  FoldPlan plan;
  plan.n_folds = j.at("n_folds").get<int>();
  plan.bin_lo = j.at("bin_lo").get<double>();
  plan.bin_hi = j.at("bin_hi").get<double>();
  plan.bin_step = j.at("bin_step").get<double>();
  const auto& assign = j.at("assignments");
  for (const auto& id : ids_in_order) {
    if (!assign.contains(id)) throw DataError("fold plan missing id " + id);
    plan.ids.push_back(id);
    plan.fold_of.push_back(assign.at(id).get<int>());
  }
  return plan;
}

}  // namespace xattn
