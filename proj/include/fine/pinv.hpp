#pragma once

#include <array>
#include <stdexcept>
#include <vector>

#include "fine/tensor.hpp"

namespace fine {

struct PinvConfig {
  int max_iters = 50;
  double residual_tol = 1e-8;
  double init_scale_safety = 0.9;
};

// Relative Moore-Penrose residuals:
//   [0] |AXA - A| / |A|        [1] |XAX - X| / |X|
//   [2] |AX - (AX)^T| / |AX|   [3] |XA - (XA)^T| / |XA|
using PenroseResiduals = std::array<double, 4>;

struct PinvResult {
  Tensor inverse;
  PenroseResiduals residuals{};
  int iterations = 0;
  std::vector<double> residual_history;  // |AXA - A| / |A| after each iteration
};

class PinvConvergenceError : public std::runtime_error {
 public:
  PinvConvergenceError(const std::string& what, PenroseResiduals residuals)
      : std::runtime_error(what), residuals(residuals) {}
  PenroseResiduals residuals;
};

class DegenerateActivationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kDegenerateNormFloor = 1e-8;

// Hyperpower (order 2) iteration X <- 2X - XAX from X0 = alpha A^T.
// Operates on values only; no history is recorded.
PinvResult pinv_iterate(const Tensor& a, const PinvConfig& cfg = {});

PenroseResiduals penrose_residuals(const Tensor& a, const Tensor& x);

// Closed-form x^T / |x|^2 as a vector; differentiable in x.
Tensor vector_pinv(const Tensor& x);

// Rank-one query y x^+ of shape [dim(y), dim(x)], so that query * x = y.
// Differentiable in x and y; registers nothing trainable.
Tensor build_query(const Tensor& x, const Tensor& y);

}  // namespace fine
