#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kd/grad_check.hpp"

namespace kd {

struct LossGradCheck {
  std::string loss;
  GradCheckResult result;
};

// Finite-difference checks of every loss with respect to all parameters of a
// 2-layer, 2-head float64 student. Teachers are a same-shape model (identity
// head policy) and a 4-layer, 4-head model (layer map with head averaging).
std::vector<LossGradCheck> run_loss_gradchecks(std::uint64_t seed = 0, double eps = 1e-5);

}  // namespace kd
