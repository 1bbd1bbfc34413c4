#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sparsefit::autograd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

enum class OpKind {
  kLeaf,
  kMatmul,
  kAdd,
  kMultiply,
  kRelu,
  kEmbedding,
  kRmsNorm,
  kSoftmax,
  kSoftmaxCrossEntropy,
  kReshape,
  kTranspose,
  kConcat,
  kSlice,
};

const char* op_name(OpKind kind);

namespace detail {

// Backward rule: receives d(root)/d(output) and returns one gradient per
// input (an empty vector for inputs that do not need one).
using BackwardFn =
    std::function<std::vector<std::vector<double>>(const std::vector<double>&)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty == no gradient yet
  bool requires_grad = false;
  OpKind op = OpKind::kLeaf;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Handle to a dense float64 array plus its place in the computation graph.
// Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access for leaves (optimizer updates, checkpoint loads).
  // Throws ContractError on non-leaf tensors.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;
  OpKind op() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void clear_grad();

  // A leaf tensor with a copy of this tensor's values.
  Tensor detach() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Primitives. All take and return 2-D tensors unless noted.
Tensor matmul(const Tensor& a, const Tensor& b);
// Elementwise; b may have the same shape as a or hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
// Rows of `table` ([V x d]) selected by `indices`; result [len x d].
Tensor embedding(const Tensor& table, std::span<const std::size_t> indices);
// gain * x / sqrt(mean(x^2) + eps) over the last axis; any rank.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);
// Over the last axis; any rank.
Tensor softmax(const Tensor& x);
// Mean token negative log-likelihood over targets != ignore_index.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                             std::size_t ignore_index);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// Half-open range [begin, end) along `axis` of a 2-D tensor.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

// Composed helpers.
Tensor sum(const Tensor& x);
Tensor scale(const Tensor& x, double factor);

// Accumulates d(root)/d(t) into every reachable tensor that requires a
// gradient. Gradients add up across repeated calls.
void backward(const Tensor& root);

}  // namespace sparsefit::autograd
