#pragma once

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "libs/tensor.hpp"

namespace libs::testing {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1,
                     double hi = 1);

struct GradCheck {
  double max_error = 0;  // |a - n| / max(|a|, |n|, floor)
  std::string worst;     // "param[index]" of the largest error
  std::size_t checked = 0;
};

// Compares Graph gradients of a scalar loss with central differences for
// every entry of every listed parameter. The loss builder is re-run on a
// fresh graph for each probe.
GradCheck grad_check(std::span<Parameter* const> params,
                     const std::function<Var(Graph&)>& loss, double step = 1e-3,
                     double floor = 1e-2);

}  // namespace libs::testing
