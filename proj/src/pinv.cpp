#include "fine/pinv.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fine {

namespace {

// Small dense helpers on raw row-major buffers.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

Mat mul(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t p = 0; p < a.cols; ++p) {
      const double av = a.at(i, p);
      for (std::size_t j = 0; j < b.cols; ++j) out.at(i, j) += av * b.at(p, j);
    }
  return out;
}

Mat transposed(const Mat& a) {
  Mat out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

double frob(const Mat& a) {
  double s = 0.0;
  for (double x : a.v) s += x * x;
  return std::sqrt(s);
}

double frob_diff(const Mat& a, const Mat& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) s += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
  return std::sqrt(s);
}

double asym(const Mat& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) {
      const double d = a.at(i, j) - a.at(j, i);
      s += d * d;
    }
  return std::sqrt(s);
}

double rel(double num, double den) { return den > 0.0 ? num / den : num; }

Mat as_mat(const Tensor& t) {
  if (t.dim() == 1) {
    Mat m(1, t.size(0));
    std::copy(t.data().begin(), t.data().end(), m.v.begin());
    return m;
  }
  if (t.dim() != 2) throw ShapeError("pinv: expects a matrix, got " + shape_str(t.shape()));
  Mat m(t.size(0), t.size(1));
  std::copy(t.data().begin(), t.data().end(), m.v.begin());
  return m;
}

PenroseResiduals residuals_of(const Mat& a, const Mat& x) {
  const Mat ax = mul(a, x);
  const Mat xa = mul(x, a);
  const Mat axa = mul(ax, a);
  const Mat xax = mul(xa, x);
  return {rel(frob_diff(axa, a), frob(a)), rel(frob_diff(xax, x), frob(x)),
          rel(asym(ax), frob(ax)), rel(asym(xa), frob(xa))};
}

}  // namespace

PenroseResiduals penrose_residuals(const Tensor& a, const Tensor& x) {
  return residuals_of(as_mat(a), as_mat(x));
}

PinvResult pinv_iterate(const Tensor& a_tensor, const PinvConfig& cfg) {
  if (cfg.max_iters < 1 || !(cfg.residual_tol > 0.0) || !(cfg.init_scale_safety > 0.0) ||
      !(cfg.init_scale_safety < 1.0)) {
    throw std::invalid_argument("pinv_iterate: invalid PinvConfig");
  }
  const Mat a = as_mat(a_tensor);
  for (double v : a.v) {
    if (!std::isfinite(v)) throw NumericError("pinv_iterate: non-finite entry");
  }
  const double a_norm = frob(a);
  if (a_norm == 0.0) throw NumericError("pinv_iterate: zero matrix has no useful pseudo-inverse");

  // sigma_max^2 <= |A|_1 |A|_inf
  double norm1 = 0.0, norm_inf = 0.0;
  for (std::size_t j = 0; j < a.cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) s += std::abs(a.at(i, j));
    norm1 = std::max(norm1, s);
  }
  for (std::size_t i = 0; i < a.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) s += std::abs(a.at(i, j));
    norm_inf = std::max(norm_inf, s);
  }
  const double alpha = cfg.init_scale_safety * 2.0 / (norm1 * norm_inf);

  Mat x = transposed(a);
  for (double& v : x.v) v *= alpha;

  PinvResult result;
  double residual = 0.0;
  for (int k = 0; k < cfg.max_iters; ++k) {
    const Mat xax = mul(mul(x, a), x);
    for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] = 2.0 * x.v[i] - xax.v[i];
    result.residuals = residuals_of(a, x);
    result.residual_history.push_back(result.residuals[0]);
    result.iterations = k + 1;
    // All four conditions, since |XAX - X| lags |AXA - A| by about one step.
    residual = *std::max_element(result.residuals.begin(), result.residuals.end());
    if (residual < cfg.residual_tol) break;
  }
  if (!(residual < cfg.residual_tol)) {
    std::ostringstream os;
    os << "pinv_iterate: no convergence after " << result.iterations
       << " iterations, residuals " << result.residuals[0] << ' ' << result.residuals[1] << ' '
       << result.residuals[2] << ' ' << result.residuals[3];
    throw PinvConvergenceError(os.str(), result.residuals);
  }
  result.inverse = Tensor::from({x.rows, x.cols}, std::move(x.v));
  return result;
}

Tensor vector_pinv(const Tensor& x) {
  if (x.dim() != 1) throw ShapeError("vector_pinv: expects a vector, got " + shape_str(x.shape()));
  double sq = 0.0;
  for (double v : x.data()) sq += v * v;
  if (!(std::sqrt(sq) > kDegenerateNormFloor)) {
    throw DegenerateActivationError("vector_pinv: activation norm " + std::to_string(std::sqrt(sq)) +
                                    " is below the degenerate floor");
  }
  return div(x, dot(x, x));
}

Tensor build_query(const Tensor& x, const Tensor& y) {
  if (y.dim() != 1) throw ShapeError("build_query: target must be a vector, got " + shape_str(y.shape()));
  return outer(y, vector_pinv(x));
}

}  // namespace fine
