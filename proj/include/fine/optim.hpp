#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fine/tensor.hpp"

namespace fine {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AdamState {
  std::uint64_t step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

class MissingGradError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Global L2 norm over every gradient; when it exceeds threshold all gradients
// are scaled by threshold / norm. Returns the norm measured before scaling.
double clip_global_norm(std::span<NamedTensor> params, double threshold);

// Bias-corrected Adam without weight decay. Gradients are zeroed afterwards.
void adam_step(std::span<NamedTensor> params, AdamState& state);

}  // namespace fine
