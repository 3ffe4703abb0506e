#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "xattn/tensor.hpp"

namespace xattn {

// Imbalance-weighted Smooth L1: per-sample Huber loss scaled by
// w = 1 + lambda * |y - center|, averaged over the batch. The weight is a
// function of the ground truth and carries no gradient.
struct WeightedSmoothL1Config {
  double center = 0.9;  // g/cm^2
  double lambda = 3.0;
  double beta = 1.0;

  void validate() const {
    if (lambda < 0) throw ParamError("loss: lambda must be >= 0");
    if (beta <= 0) throw ParamError("loss: beta must be > 0");
  }
};

// 0.5*e^2/beta for |e| <= beta, |e| - 0.5*beta above.
template <typename T>
T huber(T y, T y_hat, T beta) {
  const T e = y - y_hat;
  const T a = e < T(0) ? -e : e;
  if (a <= beta) return T(0.5) * e * e / beta;
  return a - T(0.5) * beta;
}

template <typename T>
T huber_derivative_wrt_error(T e, T beta) {
  const T a = e < T(0) ? -e : e;
  if (a <= beta) return e / beta;
  return e > T(0) ? T(1) : T(-1);
}

template <typename T>
T sample_weight(T y, const WeightedSmoothL1Config& cfg) {
  const T d = y - static_cast<T>(cfg.center);
  return T(1) + static_cast<T>(cfg.lambda) * (d < T(0) ? -d : d);
}

namespace detail {

template <typename T, typename WeightFn, typename LossFn, typename GradFn>
Tensor<T> reduce_loss(const Tensor<T>& pred, const std::vector<T>& targets, WeightFn wf,
                      LossFn lf, GradFn gf) {
  const auto n = static_cast<std::int64_t>(targets.size());
  if (n == 0) throw ParamError("loss: empty batch");
  if (pred.numel() != n)
    throw ShapeError("loss: " + std::to_string(pred.numel()) + " predictions vs " +
                     std::to_string(n) + " targets");
  auto pn = pred.node();
  auto y = std::make_shared<std::vector<T>>(targets);
  auto out = make_op<T>({1}, {pn}, [pn, y, n, wf, gf](TensorNode<T>& self) {
    const T g = self.grad[0] / static_cast<T>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const T e = (*y)[static_cast<size_t>(i)] - pn->data[static_cast<size_t>(i)];
      pn->grad[static_cast<size_t>(i)] -= g * wf((*y)[static_cast<size_t>(i)]) * gf(e);
    }
  });
  T acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T yi = targets[static_cast<size_t>(i)];
    acc += wf(yi) * lf(yi, pn->data[static_cast<size_t>(i)]);
  }
  out.data()[0] = acc / static_cast<T>(n);
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> weighted_smooth_l1(const Tensor<T>& pred, const std::vector<T>& targets,
                             const WeightedSmoothL1Config& cfg) {
  cfg.validate();
  const T beta = static_cast<T>(cfg.beta);
  return detail::reduce_loss<T>(
      pred, targets, [cfg](T y) { return sample_weight(y, cfg); },
      [beta](T y, T p) { return huber(y, p, beta); },
      [beta](T e) { return huber_derivative_wrt_error(e, beta); });
}

template <typename T>
Tensor<T> huber_loss(const Tensor<T>& pred, const std::vector<T>& targets, double beta = 1.0) {
  WeightedSmoothL1Config cfg;
  cfg.lambda = 0.0;
  cfg.beta = beta;
  return weighted_smooth_l1(pred, targets, cfg);
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const std::vector<T>& targets) {
  return detail::reduce_loss<T>(
      pred, targets, [](T) { return T(1); }, [](T y, T p) { const T e = y - p; return e * e; },
      [](T e) { return T(2) * e; });
}

// lambda1 * sum_i |w_i| over the given tensors, as a graph node so the
// subgradient flows back into each weight (sign convention: 0 at 0).
template <typename T>
Tensor<T> l1_penalty(const std::vector<Tensor<T>>& weights, double lambda1) {
  if (lambda1 < 0) throw ParamError("l1_penalty: lambda must be >= 0");
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  for (const auto& w : weights) parents.push_back(w.node());
  const T lam = static_cast<T>(lambda1);
  auto out = detail::make_op<T>({1}, parents, [parents, lam](TensorNode<T>& self) {
    const T g = self.grad[0] * lam;
    for (auto& p : parents) {
      if (!p->requires_grad) continue;
      for (size_t i = 0; i < p->data.size(); ++i) {
        if (p->data[i] > T(0))
          p->grad[i] += g;
        else if (p->data[i] < T(0))
          p->grad[i] -= g;
      }
    }
  });
  T acc = 0;
  for (const auto& p : parents)
    for (const T v : p->data) acc += v >= T(0) ? v : -v;
  out.data()[0] = acc * lam;
  return out;
}

}  // namespace xattn
