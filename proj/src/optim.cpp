#include "fine/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fine {

double clip_global_norm(std::span<NamedTensor> params, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("clip_global_norm: threshold must be positive");
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > threshold) {
    const double scale = threshold / norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

void adam_step(std::span<NamedTensor> params, AdamState& state) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) {
      throw MissingGradError("adam_step: parameter '" + p.name + "' has no gradient");
    }
  }
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& tensor = params[k].tensor;
    auto w = tensor.mutable_data();
    auto g = tensor.mutable_grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != w.size()) {
      throw std::invalid_argument("adam_step: state does not mirror parameter '" + params[k].name + "'");
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
      g[i] = 0.0;
    }
  }
}

}  // namespace fine
