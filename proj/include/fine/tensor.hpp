#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fine {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

// Dense row-major float64 tensor. Copies share the underlying node, so a
// Tensor behaves like a handle into the recorded graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> data, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // A new leaf holding a copy of the values with no history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

enum class Op {
  matmul,
  add,
  sub,
  mul,
  div,
  scalar_mul,
  reshape,
  flatten,
  concat,
  split,
  transpose,
  relu,
  tanh,
  sigmoid,
  softplus,
  sum,
  mean,
  outer,
  log,
  exp,
  negate,
  softmax,
  log_softmax,
  conv2d,
};

const char* op_name(Op op);

// Extra arguments for ops that take more than tensors.
struct OpAttrs {
  double scalar = 1.0;           // scalar_mul
  Shape shape;                   // reshape
  std::size_t offset = 0;        // split: first element along axis 0
  std::size_t count = 0;         // split: number of slices along axis 0
  std::size_t stride = 1;        // conv2d
  std::size_t padding = 0;       // conv2d
};

// Uniform dispatch over the primitive set. Each primitive is also exposed as
// a free function below.
Tensor forward_op(Op op, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

// Matrix [m,k] x [k,n] -> [m,n]; matrix [m,k] x vector [k] -> [m].
Tensor matmul(const Tensor& a, const Tensor& b);
// Elementwise, same shape. add additionally broadcasts a trailing-dim vector
// over the rows of a matrix (bias add). mul/div broadcast a one-element operand.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor reshape(const Tensor& a, Shape shape);
Tensor flatten(const Tensor& a);
// Concatenates along axis 0; trailing dims must agree.
Tensor concat(std::span<const Tensor> parts);
// Slices [offset, offset+count) along axis 0.
Tensor split(const Tensor& a, std::size_t offset, std::size_t count);
Tensor transpose(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor outer(const Tensor& u, const Tensor& v);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor negate(const Tensor& a);
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
// input [N,C,H,W], weight [O,C,K,K], bias [O] -> [N,O,H',W'].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return negate(a); }

// Single-index row selection, returned with the leading axis dropped.
Tensor row(const Tensor& a, std::size_t index);
Tensor dot(const Tensor& a, const Tensor& b);

// While alive on a thread, results on that thread record no history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Populates grad on every requires_grad tensor reachable from loss and
// releases the recorded history.
void backward(const Tensor& loss);

}  // namespace fine
