#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fine/tensor.hpp"

namespace fine::testing {

// Central differences of f at every entry of the given leaves. Returns the
// largest relative error max|a - n| / max(1, |a|, |n|) over all entries.
inline double max_grad_rel_error(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double h = 1e-5) {
  for (auto& t : leaves) t.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& t : leaves) analytic.emplace_back(t.grad().begin(), t.grad().end());
  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto d = leaves[k].mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double keep = d[i];
      double plus, minus;
      {
        NoGradGuard ng;
        d[i] = keep + h;
        plus = f().item();
        d[i] = keep - h;
        minus = f().item();
      }
      d[i] = keep;
      const double num = (plus - minus) / (2 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - num) / std::max({1.0, std::abs(a), std::abs(num)}));
    }
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  std::uint64_t s = seed * 6364136223846793005ULL + 1442695040888963407ULL;
  for (auto& x : v) {
    s = s * 6364136223846793005ULL + 1442695040888963407ULL;
    x = lo + (hi - lo) * static_cast<double>(s >> 11) * 0x1.0p-53;
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace fine::testing
