#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "xattn/rng.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

// Parameter classes drive regularization policy: L1 applies to weight
// matrices only, never to biases, norm affines, or fusion scalars.
enum class ParamKind { kWeight, kBias, kNorm, kScalar };

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
  ParamKind kind;
};

template <typename T>
using ParamRegistry = std::vector<NamedParam<T>>;

template <typename T>
void init_uniform_fanin(Tensor<T>& t, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace xattn
