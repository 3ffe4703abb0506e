#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "xattn/rng.hpp"

namespace xattn {

struct MetricError : std::runtime_error {
  explicit MetricError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Acklam's rational approximation to the inverse normal CDF (|eps| < 1.2e-9).
inline double normal_quantile(double p) {
  if (p <= 0.0 || p >= 1.0) throw MetricError("normal_quantile: p outside (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1 - plow;
  double q, r;
  if (p < plow) {
    q = std::sqrt(-2 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  if (p > phigh) {
    q = std::sqrt(-2 * std::log(1 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  q = p - 0.5;
  r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
}

namespace detail {

// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

inline double incomplete_beta(double a, double b, double x) {
  if (x < 0.0 || x > 1.0) throw MetricError("incomplete_beta: x outside [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                       b * std::log(1.0 - x);
  const double bt = std::exp(ln_bt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * detail::betacf(a, b, x) / a;
  return 1.0 - bt * detail::betacf(b, a, 1.0 - x) / b;
}

// Two-sided p-value for a t statistic with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

// ---------------------------------------------------------------------------
// Regression metrics
// ---------------------------------------------------------------------------

struct RegressionMetrics {
  double mse = 0.0;
  double mae = 0.0;
  double r2 = std::numeric_limits<double>::quiet_NaN();
  bool r2_defined = false;
  int n = 0;
};

inline RegressionMetrics regression_metrics(const std::vector<double>& y,
                                            const std::vector<double>& y_hat) {
  if (y.size() != y_hat.size() || y.empty())
    throw MetricError("regression_metrics: need equal non-empty vectors");
  RegressionMetrics m;
  m.n = static_cast<int>(y.size());
  double sse = 0.0, sae = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    const double e = y[i] - y_hat[i];
    sse += e * e;
    sae += std::fabs(e);
  }
  m.mse = sse / m.n;
  m.mae = sae / m.n;
  const double mean_y = std::accumulate(y.begin(), y.end(), 0.0) / m.n;
  double sst = 0.0;
  for (double v : y) sst += (v - mean_y) * (v - mean_y);
  if (m.n >= 2 && sst > 0.0) {
    m.r2 = 1.0 - sse / sst;
    m.r2_defined = true;
  }
  return m;
}

inline double pearson_r(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw MetricError("pearson_r: need n >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw MetricError("pearson_r: zero variance input");
  return sab / std::sqrt(saa * sbb);
}

struct PearsonCI {
  double r = 0.0, lo = 0.0, hi = 0.0;
};

inline PearsonCI fisher_ci_from_r(double r, int n, double level = 0.95) {
  if (n < 4) throw MetricError("fisher_ci_from_r: need n >= 4");
  PearsonCI ci;
  ci.r = r;
  const double z = std::atanh(r);
  const double se = 1.0 / std::sqrt(static_cast<double>(n) - 3.0);
  const double zc = normal_quantile(0.5 + level / 2.0);
  ci.lo = std::tanh(z - zc * se);
  ci.hi = std::tanh(z + zc * se);
  return ci;
}

// Fisher z interval: atanh(r) +- z_crit / sqrt(n-3), back-transformed.
inline PearsonCI pearson_fisher_ci(const std::vector<double>& y, const std::vector<double>& y_hat,
                                   double level = 0.95) {
  if (y.size() < 4) throw MetricError("pearson_fisher_ci: need n >= 4");
  return fisher_ci_from_r(pearson_r(y, y_hat), static_cast<int>(y.size()), level);
}

// ---------------------------------------------------------------------------
// Screening (threshold-on-regression) metrics
// ---------------------------------------------------------------------------

// Young-adult reference constants for the T-score and the derived screening
// threshold (T < -1  <=>  BMD < 0.899 g/cm^2).
struct ScreeningConfig {
  double young_adult_mean = 1.038;  // g/cm^2
  double young_adult_sd = 0.139;    // g/cm^2
  double t_threshold = -1.0;
  double bmd_threshold = 0.899;  // g/cm^2, rounded as published

  void validate() const {
    if (young_adult_sd <= 0) throw MetricError("screening: reference SD must be positive");
    const double implied = young_adult_mean + t_threshold * young_adult_sd;
    if (std::fabs(implied - bmd_threshold) > 1e-3)
      throw MetricError("screening: threshold does not match mean + t*SD");
  }
};

inline double t_score(double bmd, const ScreeningConfig& cfg) {
  return (bmd - cfg.young_adult_mean) / cfg.young_adult_sd;
}

struct WilsonInterval {
  double lo = 0.0, hi = 1.0;
};

inline WilsonInterval wilson_interval(int successes, int trials, double level = 0.95) {
  if (trials <= 0) throw MetricError("wilson_interval: trials must be positive");
  const double z = normal_quantile(0.5 + level / 2.0);
  const double n = trials, p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2 * n)) / denom;
  const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom;
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

// Rank-statistic AUC with midrank tie handling. Higher score = more positive.
inline double roc_auc(const std::vector<int>& labels, const std::vector<double>& scores,
                      bool* defined = nullptr) {
  const size_t n = labels.size();
  if (scores.size() != n || n == 0) throw MetricError("roc_auc: size mismatch");
  std::int64_t n_pos = 0;
  for (int l : labels) n_pos += l ? 1 : 0;
  const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    if (defined) *defined = false;
    return std::numeric_limits<double>::quiet_NaN();
  }
  if (defined) *defined = true;
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k)
      if (labels[idx[k]]) rank_sum_pos += midrank;
    i = j + 1;
  }
  return (rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Average precision by stepwise precision-recall summation over distinct
// score thresholds (descending).
inline double average_precision(const std::vector<int>& labels, const std::vector<double>& scores) {
  const size_t n = labels.size();
  if (scores.size() != n || n == 0) throw MetricError("average_precision: size mismatch");
  std::int64_t n_pos = 0;
  for (int l : labels) n_pos += l ? 1 : 0;
  if (n_pos == 0) return std::numeric_limits<double>::quiet_NaN();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0, prev_recall = 0.0;
  std::int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    for (size_t k = i; k <= j; ++k)
      labels[idx[k]] ? ++tp : ++fp;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j + 1;
  }
  return ap;
}

struct ClassMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct ScreeningMetrics {
  int tp = 0, fp = 0, tn = 0, fn = 0;
  int n = 0;
  int n_low = 0, n_normal = 0;
  ClassMetrics low;     // positive class: BMD below threshold
  ClassMetrics normal;  // negative class
  double accuracy = 0.0;
  double macro_precision = 0.0, weighted_precision = 0.0;
  double macro_recall = 0.0, weighted_recall = 0.0;
  double macro_f1 = 0.0, weighted_f1 = 0.0;
  double specificity = 0.0;
  WilsonInterval specificity_ci;
  double auc = std::numeric_limits<double>::quiet_NaN();
  bool auc_defined = false;
  double ap = std::numeric_limits<double>::quiet_NaN();
};

// Dichotomizes truth and prediction at the BMD threshold; the continuous
// screening score is -y_hat (lower predicted BMD = more positive).
inline ScreeningMetrics screening_metrics(const std::vector<double>& y,
                                          const std::vector<double>& y_hat,
                                          const ScreeningConfig& cfg, double ci_level = 0.95) {
  if (y.size() != y_hat.size() || y.empty()) throw MetricError("screening_metrics: size mismatch");
  cfg.validate();
  ScreeningMetrics m;
  m.n = static_cast<int>(y.size());
  std::vector<int> labels(y.size());
  std::vector<double> scores(y.size());
  for (size_t i = 0; i < y.size(); ++i) {
    labels[i] = y[i] < cfg.bmd_threshold ? 1 : 0;
    scores[i] = -y_hat[i];
    const bool pred_low = y_hat[i] < cfg.bmd_threshold;
    if (labels[i] && pred_low) ++m.tp;
    if (!labels[i] && pred_low) ++m.fp;
    if (labels[i] && !pred_low) ++m.fn;
    if (!labels[i] && !pred_low) ++m.tn;
  }
  m.n_low = m.tp + m.fn;
  m.n_normal = m.tn + m.fp;
  auto safe_div = [](double a, double b) { return b > 0 ? a / b : 0.0; };
  m.low.precision = safe_div(m.tp, m.tp + m.fp);
  m.low.recall = safe_div(m.tp, m.tp + m.fn);
  m.low.f1 = safe_div(2 * m.low.precision * m.low.recall, m.low.precision + m.low.recall);
  m.normal.precision = safe_div(m.tn, m.tn + m.fn);
  m.normal.recall = safe_div(m.tn, m.tn + m.fp);
  m.normal.f1 =
      safe_div(2 * m.normal.precision * m.normal.recall, m.normal.precision + m.normal.recall);
  m.accuracy = static_cast<double>(m.tp + m.tn) / m.n;
  m.macro_precision = 0.5 * (m.low.precision + m.normal.precision);
  m.weighted_precision = safe_div(m.n_low * m.low.precision + m.n_normal * m.normal.precision,
                                  m.n);
  m.macro_recall = 0.5 * (m.low.recall + m.normal.recall);
  m.weighted_recall = safe_div(m.n_low * m.low.recall + m.n_normal * m.normal.recall, m.n);
  m.macro_f1 = 0.5 * (m.low.f1 + m.normal.f1);
  m.weighted_f1 = safe_div(m.n_low * m.low.f1 + m.n_normal * m.normal.f1, m.n);
  m.specificity = m.normal.recall;
  if (m.n_normal > 0) m.specificity_ci = wilson_interval(m.tn, m.n_normal, ci_level);
  m.auc = roc_auc(labels, scores, &m.auc_defined);
  if (m.n_low > 0) m.ap = average_precision(labels, scores);
  return m;
}

// ---------------------------------------------------------------------------
// Curves and stratified bootstrap bands
// ---------------------------------------------------------------------------

namespace detail {

struct RocWalk {
  std::vector<double> fpr, tpr;  // staircase points, starts at (0,0), ends (1,1)
};

inline RocWalk roc_walk(const std::vector<int>& labels, const std::vector<double>& scores) {
  const size_t n = labels.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  std::int64_t n_pos = 0;
  for (int l : labels) n_pos += l ? 1 : 0;
  const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
  RocWalk w;
  w.fpr.push_back(0.0);
  w.tpr.push_back(0.0);
  std::int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    for (size_t k = i; k <= j; ++k)
      labels[idx[k]] ? ++tp : ++fp;
    w.fpr.push_back(n_neg > 0 ? static_cast<double>(fp) / n_neg : 0.0);
    w.tpr.push_back(n_pos > 0 ? static_cast<double>(tp) / n_pos : 0.0);
    i = j + 1;
  }
  return w;
}

// TPR at a target FPR: staircase evaluation (largest TPR with fpr <= target).
inline double tpr_at(const RocWalk& w, double fpr) {
  double best = 0.0;
  for (size_t i = 0; i < w.fpr.size(); ++i)
    if (w.fpr[i] <= fpr + 1e-12) best = std::max(best, w.tpr[i]);
  return best;
}

struct PrWalk {
  std::vector<double> recall, precision;
};

inline PrWalk pr_walk(const std::vector<int>& labels, const std::vector<double>& scores) {
  const size_t n = labels.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  std::int64_t n_pos = 0;
  for (int l : labels) n_pos += l ? 1 : 0;
  PrWalk w;
  std::int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    for (size_t k = i; k <= j; ++k)
      labels[idx[k]] ? ++tp : ++fp;
    w.recall.push_back(n_pos > 0 ? static_cast<double>(tp) / n_pos : 0.0);
    w.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    i = j + 1;
  }
  return w;
}

// Interpolated precision at a target recall: max precision among walk points
// with recall >= target.
inline double precision_at(const PrWalk& w, double recall) {
  double best = 0.0;
  for (size_t i = 0; i < w.recall.size(); ++i)
    if (w.recall[i] >= recall - 1e-12) best = std::max(best, w.precision[i]);
  return best;
}

}  // namespace detail

struct CurveBand {
  std::vector<double> grid;   // fpr for ROC, recall for PR
  std::vector<double> point;  // estimate on the full sample
  std::vector<double> lo, hi;
};

struct BootstrapBands {
  CurveBand roc;  // tpr vs fpr
  CurveBand pr;   // precision vs recall
  int n_boot = 0;
};

// Resamples within class strata and reports pointwise percentile bands on a
// fixed grid of thresholds.
inline BootstrapBands stratified_bootstrap_bands(const std::vector<double>& y,
                                                 const std::vector<double>& y_hat,
                                                 const ScreeningConfig& cfg, int n_boot = 4000,
                                                 std::uint64_t seed = 0, int grid_size = 101,
                                                 double level = 0.95) {
  if (y.size() != y_hat.size() || y.empty())
    throw MetricError("stratified_bootstrap_bands: size mismatch");
  cfg.validate();
  std::vector<size_t> pos, neg;
  std::vector<int> labels(y.size());
  std::vector<double> scores(y.size());
  for (size_t i = 0; i < y.size(); ++i) {
    labels[i] = y[i] < cfg.bmd_threshold ? 1 : 0;
    scores[i] = -y_hat[i];
    (labels[i] ? pos : neg).push_back(i);
  }
  if (pos.empty() || neg.empty())
    throw MetricError("stratified_bootstrap_bands: both classes required");

  BootstrapBands out;
  out.n_boot = n_boot;
  out.roc.grid.resize(static_cast<size_t>(grid_size));
  out.pr.grid.resize(static_cast<size_t>(grid_size));
  for (int g = 0; g < grid_size; ++g)
    out.roc.grid[static_cast<size_t>(g)] = out.pr.grid[static_cast<size_t>(g)] =
        static_cast<double>(g) / (grid_size - 1);

  const auto roc_full = detail::roc_walk(labels, scores);
  const auto pr_full = detail::pr_walk(labels, scores);
  for (int g = 0; g < grid_size; ++g) {
    out.roc.point.push_back(detail::tpr_at(roc_full, out.roc.grid[static_cast<size_t>(g)]));
    out.pr.point.push_back(detail::precision_at(pr_full, out.pr.grid[static_cast<size_t>(g)]));
  }

  std::vector<std::vector<double>> roc_samples(static_cast<size_t>(grid_size)),
      pr_samples(static_cast<size_t>(grid_size));
  std::vector<int> blab(y.size());
  std::vector<double> bscore(y.size());
  for (int b = 0; b < n_boot; ++b) {
    Rng rng(derive_seed(seed, "bootstrap", b));
    size_t k = 0;
    for (size_t i = 0; i < pos.size(); ++i, ++k) {
      const size_t pick = pos[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pos.size()) - 1))];
      blab[k] = 1;
      bscore[k] = scores[pick];
    }
    for (size_t i = 0; i < neg.size(); ++i, ++k) {
      const size_t pick = neg[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(neg.size()) - 1))];
      blab[k] = 0;
      bscore[k] = scores[pick];
    }
    const auto rw = detail::roc_walk(blab, bscore);
    const auto pw = detail::pr_walk(blab, bscore);
    for (int g = 0; g < grid_size; ++g) {
      roc_samples[static_cast<size_t>(g)].push_back(detail::tpr_at(rw, out.roc.grid[static_cast<size_t>(g)]));
      pr_samples[static_cast<size_t>(g)].push_back(detail::precision_at(pw, out.pr.grid[static_cast<size_t>(g)]));
    }
  }

  const double alpha = (1.0 - level) / 2.0;
  auto percentile = [](std::vector<double>& v, double q) {
    std::sort(v.begin(), v.end());
    const double pos_idx = q * (static_cast<double>(v.size()) - 1.0);
    const size_t i = static_cast<size_t>(std::llround(pos_idx));
    return v[std::min(i, v.size() - 1)];
  };
  for (int g = 0; g < grid_size; ++g) {
    out.roc.lo.push_back(percentile(roc_samples[static_cast<size_t>(g)], alpha));
    out.roc.hi.push_back(percentile(roc_samples[static_cast<size_t>(g)], 1.0 - alpha));
    out.pr.lo.push_back(percentile(pr_samples[static_cast<size_t>(g)], alpha));
    out.pr.hi.push_back(percentile(pr_samples[static_cast<size_t>(g)], 1.0 - alpha));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

struct PairedTTest {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
  bool degenerate = false;  // zero-variance differences
};

inline PairedTTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw MetricError("paired_t_test: need n >= 2 pairs");
  const int n = static_cast<int>(a.size());
  PairedTTest r;
  r.df = n - 1;
  double mean_d = 0.0;
  for (int i = 0; i < n; ++i) mean_d += a[static_cast<size_t>(i)] - b[static_cast<size_t>(i)];
  mean_d /= n;
  double ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = a[static_cast<size_t>(i)] - b[static_cast<size_t>(i)] - mean_d;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / (n - 1));
  if (sd == 0.0) {
    if (mean_d == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = mean_d > 0 ? std::numeric_limits<double>::infinity()
                       : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
      r.degenerate = true;
    }
    return r;
  }
  r.t = mean_d / (sd / std::sqrt(static_cast<double>(n)));
  r.p = student_t_two_sided_p(r.t, static_cast<double>(r.df));
  return r;
}

}  // namespace xattn
