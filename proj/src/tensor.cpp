#include "fine/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace fine {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

thread_local bool g_grad_enabled = true;

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

void validate_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor shape " + shape_str(shape) + " has a zero dimension");
  }
}

NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require(bool cond, const char* op, const std::string& detail) {
  if (!cond) shape_fail(op, detail);
}

// Builds a result node; records history only when some input needs grad.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<NodePtr> inputs, std::function<void(Node&)> backward_fn) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite result");
    }
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool any = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                         [](const NodePtr& p) { return p->requires_grad; });
  if (any) {
    n->requires_grad = true;
    n->is_leaf = false;
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

template <class F>
Tensor unary(const char* op, const Tensor& a, F f, std::function<double(double x, double y)> dfdx) {
  const auto& an = a.node();
  std::vector<double> out(an->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(an->data[i]);
  return make_result(op, an->shape, std::move(out), {an}, [dfdx](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * dfdx(in.data[i], self.data[i]);
    }
  });
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

std::string pair_str(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " vs " + shape_str(b.shape());
}

// Elementwise binary op where either operand may be a one-element broadcast.
template <class F, class Da, class Db>
Tensor broadcast_binary(const char* op, const Tensor& a, const Tensor& b, F f, Da da, Db db) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  require(same_shape(a, b) || a_scalar || b_scalar, op, "shape mismatch " + pair_str(a, b));
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  const auto& an = a.node();
  const auto& bn = b.node();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(an->data[a_scalar ? 0 : i], bn->data[b_scalar ? 0 : i]);
  }
  return make_result(op, out_shape, std::move(out), {an, bn},
                     [a_scalar, b_scalar, da, db](Node& self) {
                       auto& x = *self.inputs[0];
                       auto& y = *self.inputs[1];
                       const std::size_t n = self.data.size();
                       if (x.requires_grad) {
                         auto& g = x.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           double xv = x.data[a_scalar ? 0 : i], yv = y.data[b_scalar ? 0 : i];
                           g[a_scalar ? 0 : i] += self.grad[i] * da(xv, yv);
                         }
                       }
                       if (y.requires_grad) {
                         auto& g = y.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           double xv = x.data[a_scalar ? 0 : i], yv = y.data[b_scalar ? 0 : i];
                           g[b_scalar ? 0 : i] += self.grad[i] * db(xv, yv);
                         }
                       }
                     });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf({1}, {value}, requires_grad));
}

Tensor Tensor::vector(std::vector<double> data, bool requires_grad) {
  Shape s{data.size()};
  return Tensor(make_leaf(std::move(s), std::move(data), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!node_) throw GraphError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  shape();
  if (!node_->is_leaf) throw GraphError("requires_grad can only be changed on a leaf");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return node_ && node_->is_leaf; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  shape();
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  shape();
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  shape();
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  shape();
  return Tensor(make_leaf(node_->shape, node_->data, false));
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.dim() == 2, "matmul", "left operand must be a matrix, got " + shape_str(a.shape()));
  require(b.dim() == 1 || b.dim() == 2, "matmul",
          "right operand must be a vector or matrix, got " + shape_str(b.shape()));
  const std::size_t m = a.size(0), k = a.size(1);
  require(b.size(0) == k, "matmul", "inner dims differ " + pair_str(a, b));
  const std::size_t n = b.dim() == 2 ? b.size(1) : 1;
  const auto& A = a.node()->data;
  const auto& B = b.node()->data;
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Shape out_shape = b.dim() == 2 ? Shape{m, n} : Shape{m};
  return make_result("matmul", out_shape, std::move(out), {a.node(), b.node()},
                     [m, k, n](Node& self) {
                       auto& x = *self.inputs[0];
                       auto& y = *self.inputs[1];
                       const auto& G = self.grad;
                       if (x.requires_grad) {
                         auto& gx = x.ensure_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             double acc = 0.0;
                             for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * y.data[p * n + j];
                             gx[i * k + p] += acc;
                           }
                       }
                       if (y.requires_grad) {
                         auto& gy = y.ensure_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double xv = x.data[i * k + p];
                             if (xv == 0.0) continue;
                             for (std::size_t j = 0; j < n; ++j) gy[p * n + j] += xv * G[i * n + j];
                           }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  // Row broadcast: [rows, cols] + [cols].
  if (a.dim() == 2 && b.dim() == 1 && a.size(1) == b.size(0)) {
    const std::size_t rows = a.size(0), cols = a.size(1);
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto& B = b.node()->data;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += B[c];
    return make_result("add", a.shape(), std::move(out), {a.node(), b.node()},
                       [rows, cols](Node& self) {
                         auto& x = *self.inputs[0];
                         auto& y = *self.inputs[1];
                         if (x.requires_grad) {
                           auto& g = x.ensure_grad();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                         }
                         if (y.requires_grad) {
                           auto& g = y.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
                         }
                       });
  }
  require(same_shape(a, b), "add", "shape mismatch " + pair_str(a, b));
  return broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "sub", "shape mismatch " + pair_str(a, b));
  return broadcast_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scalar_mul(const Tensor& a, double c) {
  return unary("scalar_mul", a, [c](double x) { return c * x; },
               [c](double, double) { return c; });
}

Tensor reshape(const Tensor& a, Shape shape) {
  validate_shape(shape);
  require(shape_numel(shape) == a.numel(), "reshape",
          "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return make_result("reshape", std::move(shape), a.node()->data, {a.node()}, [](Node& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor flatten(const Tensor& a) { return reshape(a, {a.numel()}); }

Tensor concat(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat", "no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  std::vector<NodePtr> inputs;
  std::vector<double> out;
  for (const auto& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    require(pt == tail, "concat",
            "trailing dims differ " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    lead += p.size(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
    inputs.push_back(p.node());
  }
  Shape out_shape{lead};
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());
  return make_result("concat", out_shape, std::move(out), std::move(inputs), [](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->data.size();
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

Tensor split(const Tensor& a, std::size_t offset, std::size_t count) {
  require(count >= 1 && offset + count <= a.size(0), "split",
          "slice [" + std::to_string(offset) + "," + std::to_string(offset + count) +
              ") outside leading dim of " + shape_str(a.shape()));
  const std::size_t inner = a.numel() / a.size(0);
  Shape out_shape = a.shape();
  out_shape[0] = count;
  const auto& A = a.node()->data;
  std::vector<double> out(A.begin() + offset * inner, A.begin() + (offset + count) * inner);
  const std::size_t base = offset * inner;
  return make_result("split", out_shape, std::move(out), {a.node()}, [base](Node& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[base + i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  require(a.dim() == 2, "transpose", "expects a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.size(0), c = a.size(1);
  const auto& A = a.node()->data;
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return make_result("transpose", {c, r}, std::move(out), {a.node()}, [r, c](Node& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary("softplus", a,
               [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
               [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
  }
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Tensor negate(const Tensor& a) {
  return unary("negate", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result("sum", {1}, {s}, {a.node()}, [](Node& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result("mean", {1}, {s / n}, {a.node()}, [n](Node& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.ensure_grad();
    for (auto& v : g) v += self.grad[0] / n;
  });
}

Tensor outer(const Tensor& u, const Tensor& v) {
  require(u.dim() == 1 && v.dim() == 1, "outer",
          "expects two vectors, got " + pair_str(u, v));
  const std::size_t m = u.size(0), n = v.size(0);
  const auto& U = u.node()->data;
  const auto& V = v.node()->data;
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = U[i] * V[j];
  return make_result("outer", {m, n}, std::move(out), {u.node(), v.node()}, [m, n](Node& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i] += self.grad[i * n + j] * y.data[j];
    }
    if (y.requires_grad) {
      auto& g = y.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * x.data[i];
    }
  });
}

namespace {

// Applies f to each row of length `last` and records a per-row backward.
Tensor lastdim_op(const char* op, const Tensor& a, bool log_form) {
  const std::size_t last = a.shape().back();
  const std::size_t rows = a.numel() / last;
  const auto& A = a.node()->data;
  std::vector<double> out(A.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &A[r * last];
    double mx = *std::max_element(in, in + last);
    double z = 0.0;
    for (std::size_t j = 0; j < last; ++j) z += std::exp(in[j] - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t j = 0; j < last; ++j) {
      out[r * last + j] = log_form ? in[j] - lz : std::exp(in[j] - lz);
    }
  }
  return make_result(op, a.shape(), std::move(out), {a.node()},
                     [rows, last, log_form](Node& self) {
                       auto& x = *self.inputs[0];
                       if (!x.requires_grad) return;
                       auto& g = x.ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = &self.data[r * last];
                         const double* gy = &self.grad[r * last];
                         if (log_form) {
                           double gs = 0.0;
                           for (std::size_t j = 0; j < last; ++j) gs += gy[j];
                           for (std::size_t j = 0; j < last; ++j)
                             g[r * last + j] += gy[j] - std::exp(y[j]) * gs;
                         } else {
                           double dotp = 0.0;
                           for (std::size_t j = 0; j < last; ++j) dotp += gy[j] * y[j];
                           for (std::size_t j = 0; j < last; ++j)
                             g[r * last + j] += y[j] * (gy[j] - dotp);
                         }
                       }
                     });
}

}  // namespace

Tensor softmax(const Tensor& a) { return lastdim_op("softmax", a, false); }

Tensor log_softmax(const Tensor& a) { return lastdim_op("log_softmax", a, true); }

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  require(input.dim() == 4, "conv2d", "input must be [N,C,H,W], got " + shape_str(input.shape()));
  require(weight.dim() == 4 && weight.size(2) == weight.size(3), "conv2d",
          "weight must be [O,C,K,K], got " + shape_str(weight.shape()));
  require(bias.dim() == 1 && bias.size(0) == weight.size(0), "conv2d",
          "bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  require(weight.size(1) == input.size(1), "conv2d",
          "channel mismatch " + pair_str(input, weight));
  require(stride >= 1, "conv2d", "stride must be positive");
  const std::size_t N = input.size(0), C = input.size(1), H = input.size(2), W = input.size(3);
  const std::size_t O = weight.size(0), K = weight.size(2);
  require(H + 2 * padding >= K && W + 2 * padding >= K, "conv2d",
          "kernel larger than padded input " + pair_str(input, weight));
  const std::size_t Ho = (H + 2 * padding - K) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - K) / stride + 1;
  const auto& X = input.node()->data;
  const auto& Wt = weight.node()->data;
  const auto& B = bias.node()->data;
  const std::size_t R = C * K * K, P = Ho * Wo;

  // im2col per image: cols[n] is [R, P], zero where the tap hits padding.
  auto cols = std::make_shared<std::vector<double>>(N * R * P, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < K; ++kx) {
          double* dst = cols->data() + (n * R + (c * K + ky) * K + kx) * P;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              dst[oy * Wo + ox] = X[((n * C + c) * H + iy) * W + ix];
            }
          }
        }

  std::vector<double> out(N * O * P);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double* y = out.data() + (n * O + o) * P;
      std::fill_n(y, P, B[o]);
      for (std::size_t r = 0; r < R; ++r) {
        const double w = Wt[o * R + r];
        const double* col = cols->data() + (n * R + r) * P;
        for (std::size_t p = 0; p < P; ++p) y[p] += w * col[p];
      }
    }

  return make_result("conv2d", {N, O, Ho, Wo}, std::move(out),
                     {input.node(), weight.node(), bias.node()},
                     [cols, N, C, H, W, O, K, Ho, Wo, R, P, stride, padding](Node& self) {
                       auto& x = *self.inputs[0];
                       auto& w = *self.inputs[1];
                       auto& b = *self.inputs[2];
                       const auto& G = self.grad;
                       if (w.requires_grad) {
                         auto& gw = w.ensure_grad();
                         for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t o = 0; o < O; ++o) {
                             const double* g = G.data() + (n * O + o) * P;
                             for (std::size_t r = 0; r < R; ++r) {
                               const double* col = cols->data() + (n * R + r) * P;
                               double acc = 0.0;
                               for (std::size_t p = 0; p < P; ++p) acc += g[p] * col[p];
                               gw[o * R + r] += acc;
                             }
                           }
                       }
                       if (b.requires_grad) {
                         auto& gb = b.ensure_grad();
                         for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t o = 0; o < O; ++o)
                             for (std::size_t p = 0; p < P; ++p) gb[o] += G[(n * O + o) * P + p];
                       }
                       if (x.requires_grad) {
                         auto& gx = x.ensure_grad();
                         std::vector<double> gcol(R * P);
                         for (std::size_t n = 0; n < N; ++n) {
                           std::fill(gcol.begin(), gcol.end(), 0.0);
                           for (std::size_t o = 0; o < O; ++o) {
                             const double* g = G.data() + (n * O + o) * P;
                             for (std::size_t r = 0; r < R; ++r) {
                               const double wv = w.data[o * R + r];
                               double* dst = gcol.data() + r * P;
                               for (std::size_t p = 0; p < P; ++p) dst[p] += wv * g[p];
                             }
                           }
                           // col2im
                           for (std::size_t c = 0; c < C; ++c)
                             for (std::size_t ky = 0; ky < K; ++ky)
                               for (std::size_t kx = 0; kx < K; ++kx) {
                                 const double* src = gcol.data() + ((c * K + ky) * K + kx) * P;
                                 for (std::size_t oy = 0; oy < Ho; ++oy) {
                                   const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                                   if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                   for (std::size_t ox = 0; ox < Wo; ++ox) {
                                     const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                                     if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                     gx[((n * C + c) * H + iy) * W + ix] += src[oy * Wo + ox];
                                   }
                                 }
                               }
                         }
                       }
                     });
}

Tensor row(const Tensor& a, std::size_t index) {
  require(a.dim() >= 2, "row", "expects rank >= 2, got " + shape_str(a.shape()));
  Shape tail(a.shape().begin() + 1, a.shape().end());
  return reshape(split(a, index, 1), tail);
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "dot", "shape mismatch " + pair_str(a, b));
  return sum(mul(a, b));
}

const char* op_name(Op op) {
  switch (op) {
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::scalar_mul: return "scalar_mul";
    case Op::reshape: return "reshape";
    case Op::flatten: return "flatten";
    case Op::concat: return "concat";
    case Op::split: return "split";
    case Op::transpose: return "transpose";
    case Op::relu: return "relu";
    case Op::tanh: return "tanh";
    case Op::sigmoid: return "sigmoid";
    case Op::softplus: return "softplus";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::outer: return "outer";
    case Op::log: return "log";
    case Op::exp: return "exp";
    case Op::negate: return "negate";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log_softmax";
    case Op::conv2d: return "conv2d";
  }
  return "unknown";
}

Tensor forward_op(Op op, std::span<const Tensor> in, const OpAttrs& attrs) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_name(op)) + ": expects " + std::to_string(n) +
                       " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (op) {
    case Op::matmul: arity(2); return matmul(in[0], in[1]);
    case Op::add: arity(2); return add(in[0], in[1]);
    case Op::sub: arity(2); return sub(in[0], in[1]);
    case Op::mul: arity(2); return mul(in[0], in[1]);
    case Op::div: arity(2); return div(in[0], in[1]);
    case Op::scalar_mul: arity(1); return scalar_mul(in[0], attrs.scalar);
    case Op::reshape: arity(1); return reshape(in[0], attrs.shape);
    case Op::flatten: arity(1); return flatten(in[0]);
    case Op::concat: return concat(in);
    case Op::split: arity(1); return split(in[0], attrs.offset, attrs.count);
    case Op::transpose: arity(1); return transpose(in[0]);
    case Op::relu: arity(1); return relu(in[0]);
    case Op::tanh: arity(1); return tanh(in[0]);
    case Op::sigmoid: arity(1); return sigmoid(in[0]);
    case Op::softplus: arity(1); return softplus(in[0]);
    case Op::sum: arity(1); return sum(in[0]);
    case Op::mean: arity(1); return mean(in[0]);
    case Op::outer: arity(2); return outer(in[0], in[1]);
    case Op::log: arity(1); return log(in[0]);
    case Op::exp: arity(1); return exp(in[0]);
    case Op::negate: arity(1); return negate(in[0]);
    case Op::softmax: arity(1); return softmax(in[0]);
    case Op::log_softmax: arity(1); return log_softmax(in[0]);
    case Op::conv2d: arity(3); return conv2d(in[0], in[1], in[2], attrs.stride, attrs.padding);
  }
  throw ShapeError("forward_op: unknown op");
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw GraphError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  const NodePtr& root = loss.node();
  if (root->consumed) throw GraphError("backward: graph already consumed");
  if (!root->requires_grad) {
    throw GraphError("backward: loss is detached from every trainable tensor");
  }

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !child->is_leaf && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : order) {
    n->backward_fn = nullptr;
    n->inputs.clear();
    n->consumed = true;
  }
}

}  // namespace fine
