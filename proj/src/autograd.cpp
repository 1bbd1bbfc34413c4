#include "sparsefit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "sparsefit/errors.hpp"

namespace sparsefit::autograd {

using detail::Node;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMultiply: return "multiply";
    case OpKind::kRelu: return "relu";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kRmsNorm: return "rmsnorm";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
  }
  return "unknown";
}

namespace {

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value in ") + what);
  }
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
  }
}

void require_2d(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(t.shape()));
  }
}

Tensor make_result(OpKind op, Shape shape, std::vector<double> data,
                   std::vector<std::shared_ptr<Node>> inputs, detail::BackwardFn fn) {
  check_finite(data, op_name(op));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  if (autograd::numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_string(shape));
  }
  check_finite(data, "tensor construction");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  const std::size_t n = autograd::numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) throw ContractError("undefined tensor");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw ContractError("mutable_data is only available on leaf tensors");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a single-element tensor");
  return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  require_2d(*this, "at");
  return node_->data.at(row * node_->shape[1] + col);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = value;
}

bool Tensor::is_leaf() const { return node_ && node_->op == OpKind::kLeaf; }

OpKind Tensor::op() const { return node_ ? node_->op : OpKind::kLeaf; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

void Tensor::clear_grad() {
  if (node_) {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

// ---------------------------------------------------------------------------
// Primitives

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ: " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return make_result(OpKind::kMatmul, {m, n}, std::move(out), {an, bn},
                     [an, bn, m, k, n](const std::vector<double>& g) {
                       std::vector<std::vector<double>> grads(2);
                       if (an->requires_grad) {
                         grads[0].assign(m * k, 0.0);
                         gemm_nt(g.data(), bn->data.data(), grads[0].data(), m, n, k);
                       }
                       if (bn->requires_grad) {
                         grads[1].assign(k * n, 0.0);
                         gemm_tn(an->data.data(), g.data(), grads[1].data(), m, k, n);
                       }
                       return grads;
                     });
}

namespace {

enum class Binary { kAdd, kMultiply };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind) {
  const char* name = kind == Binary::kAdd ? "add" : "multiply";
  if (!a.defined() || !b.defined()) throw ContractError(std::string(name) + ": undefined tensor");
  const bool broadcast = b.numel() == 1 && a.numel() != 1;
  if (!broadcast && a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": shapes differ: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double bv = broadcast ? bd[0] : bd[i];
    out[i] = kind == Binary::kAdd ? ad[i] + bv : ad[i] * bv;
  }
  auto an = a.node(), bn = b.node();
  const OpKind op = kind == Binary::kAdd ? OpKind::kAdd : OpKind::kMultiply;
  return make_result(op, a.shape(), std::move(out), {an, bn},
                     [an, bn, kind, broadcast](const std::vector<double>& g) {
                       std::vector<std::vector<double>> grads(2);
                       const std::size_t n = g.size();
                       if (an->requires_grad) {
                         grads[0].resize(n);
                         for (std::size_t i = 0; i < n; ++i) {
                           const double bv = broadcast ? bn->data[0] : bn->data[i];
                           grads[0][i] = kind == Binary::kAdd ? g[i] : g[i] * bv;
                         }
                       }
                       if (bn->requires_grad) {
                         grads[1].assign(bn->data.size(), 0.0);
                         for (std::size_t i = 0; i < n; ++i) {
                           const double term = kind == Binary::kAdd ? g[i] : g[i] * an->data[i];
                           grads[1][broadcast ? 0 : i] += term;
                         }
                       }
                       return grads;
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kAdd); }

Tensor multiply(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kMultiply); }

Tensor relu(const Tensor& x) {
  if (!x.defined()) throw ContractError("relu: undefined tensor");
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  auto xn = x.node();
  return make_result(OpKind::kRelu, x.shape(), std::move(out), {xn},
                     [xn](const std::vector<double>& g) {
                       std::vector<std::vector<double>> grads(1);
                       grads[0].resize(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         grads[0][i] = xn->data[i] > 0.0 ? g[i] : 0.0;
                       }
                       return grads;
                     });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> indices) {
  require_2d(table, "embedding");
  if (indices.empty()) throw ShapeError("embedding: empty index list");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * width);
  const auto td = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= vocab) {
      throw ShapeError("embedding: index " + std::to_string(idx[r]) + " out of range for " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(idx[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  auto tn = table.node();
  const std::size_t rows = idx.size();
  return make_result(OpKind::kEmbedding, {rows, width}, std::move(out), {tn},
                     [tn, idx = std::move(idx), width](const std::vector<double>& g) {
                       std::vector<std::vector<double>> grads(1);
                       grads[0].assign(tn->data.size(), 0.0);
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         for (std::size_t c = 0; c < width; ++c) {
                           grads[0][idx[r] * width + c] += g[r * width + c];
                         }
                       }
                       return grads;
                     });
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  if (!x.defined() || !gain.defined()) throw ContractError("rmsnorm: undefined tensor");
  if (gain.rank() != 1 || gain.dim(0) != x.shape().back()) {
    throw ShapeError("rmsnorm: gain " + shape_string(gain.shape()) +
                     " does not match last extent of " + shape_string(x.shape()));
  }
  if (eps < 0.0) throw ContractError("rmsnorm: eps must be non-negative");
  const std::size_t width = gain.dim(0);
  const std::size_t rows = x.numel() / width;
  const auto xd = x.data();
  const auto gd = gain.data();
  std::vector<double> out(xd.size());
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t c = 0; c < width; ++c) ms += xd[r * width + c] * xd[r * width + c];
    ms /= static_cast<double>(width);
    const double denom = std::sqrt(ms + eps);
    if (denom == 0.0) throw NonFiniteError("rmsnorm: zero root-mean-square with eps = 0");
    inv_rms[r] = 1.0 / denom;
    for (std::size_t c = 0; c < width; ++c) {
      out[r * width + c] = gd[c] * xd[r * width + c] * inv_rms[r];
    }
  }
  auto xn = x.node(), gn = gain.node();
  return make_result(
      OpKind::kRmsNorm, x.shape(), std::move(out), {xn, gn},
      [xn, gn, width, rows, inv_rms = std::move(inv_rms)](const std::vector<double>& g) {
        std::vector<std::vector<double>> grads(2);
        const auto& xv = xn->data;
        const auto& gv = gn->data;
        if (xn->requires_grad) grads[0].assign(xv.size(), 0.0);
        if (gn->requires_grad) grads[1].assign(width, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double inv = inv_rms[r];
          const std::size_t base = r * width;
          if (xn->requires_grad) {
            double dot = 0.0;
            for (std::size_t c = 0; c < width; ++c) dot += g[base + c] * gv[c] * xv[base + c];
            const double coeff = dot * inv * inv * inv / static_cast<double>(width);
            for (std::size_t c = 0; c < width; ++c) {
              grads[0][base + c] = g[base + c] * gv[c] * inv - xv[base + c] * coeff;
            }
          }
          if (gn->requires_grad) {
            for (std::size_t c = 0; c < width; ++c) grads[1][c] += g[base + c] * xv[base + c] * inv;
          }
        }
        return grads;
      });
}

Tensor softmax(const Tensor& x) {
  if (!x.defined()) throw ContractError("softmax: undefined tensor");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * width;
    double* o = out.data() + r * width;
    const double mx = *std::max_element(in, in + width);
    double total = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < width; ++c) o[c] /= total;
  }
  auto xn = x.node();
  auto result = make_result(OpKind::kSoftmax, x.shape(), std::move(out), {xn}, nullptr);
  if (result.requires_grad()) {
    // The backward rule needs the output itself; hold it weakly to avoid a cycle.
    std::weak_ptr<Node> self = result.node();
    result.node()->backward = [self, width, rows](const std::vector<double>& g) {
      auto y = self.lock();
      std::vector<std::vector<double>> grads(1);
      grads[0].resize(g.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * width;
        double dot = 0.0;
        for (std::size_t c = 0; c < width; ++c) dot += g[base + c] * y->data[base + c];
        for (std::size_t c = 0; c < width; ++c) {
          grads[0][base + c] = y->data[base + c] * (g[base + c] - dot);
        }
      }
      return grads;
    };
  }
  return result;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                             std::size_t ignore_index) {
  require_2d(logits, "softmax_cross_entropy");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  std::size_t counted = 0;
  for (std::size_t t : tgt) {
    if (t == ignore_index) continue;
    if (t >= vocab) throw ShapeError("softmax_cross_entropy: target index out of range");
    ++counted;
  }
  if (counted == 0) throw ContractError("softmax_cross_entropy: every position is ignored");

  const auto ld = logits.data();
  std::vector<double> probs(ld.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = ld.data() + r * vocab;
    double* p = probs.data() + r * vocab;
    const double mx = *std::max_element(in, in + vocab);
    double total = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      p[c] = std::exp(in[c] - mx);
      total += p[c];
    }
    for (std::size_t c = 0; c < vocab; ++c) p[c] /= total;
    if (tgt[r] != ignore_index) loss += -(in[tgt[r]] - mx - std::log(total));
  }
  const double inv_count = 1.0 / static_cast<double>(counted);
  loss *= inv_count;
  auto ln = logits.node();
  return make_result(
      OpKind::kSoftmaxCrossEntropy, {1}, {loss}, {ln},
      [probs = std::move(probs), tgt = std::move(tgt), vocab, rows, ignore_index,
       inv_count](const std::vector<double>& g) {
        std::vector<std::vector<double>> grads(1);
        grads[0].assign(probs.size(), 0.0);
        const double s = g[0] * inv_count;
        for (std::size_t r = 0; r < rows; ++r) {
          if (tgt[r] == ignore_index) continue;
          for (std::size_t c = 0; c < vocab; ++c) grads[0][r * vocab + c] = s * probs[r * vocab + c];
          grads[0][r * vocab + tgt[r]] -= s;
        }
        return grads;
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (!x.defined()) throw ContractError("reshape: undefined tensor");
  validate_shape(shape);
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  auto xn = x.node();
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(OpKind::kReshape, std::move(shape), std::move(out), {xn},
                     [](const std::vector<double>& g) { return std::vector<std::vector<double>>{g}; });
}

Tensor transpose(const Tensor& x) {
  require_2d(x, "transpose");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = xd[r * cols + c];
  }
  auto xn = x.node();
  return make_result(OpKind::kTranspose, {cols, rows}, std::move(out), {xn},
                     [rows, cols](const std::vector<double>& g) {
                       std::vector<std::vector<double>> grads(1);
                       grads[0].resize(g.size());
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < cols; ++c) grads[0][r * cols + c] = g[c * rows + r];
                       }
                       return grads;
                     });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) require_2d(p, "concat");
  const std::size_t other = 1 - axis;
  const std::size_t fixed = parts[0].dim(other);
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    if (p.dim(other) != fixed) throw ShapeError("concat: mismatched extents on the fixed axis");
    extents.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  const Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  std::vector<double> out(total * fixed);
  std::vector<std::shared_ptr<Node>> inputs;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto pd = p.data();
    const std::size_t e = p.dim(axis);
    if (axis == 0) {
      std::copy(pd.begin(), pd.end(), out.begin() + static_cast<std::ptrdiff_t>(offset * fixed));
    } else {
      for (std::size_t r = 0; r < fixed; ++r) {
        std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(r * e), e,
                    out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
      }
    }
    offset += e;
    inputs.push_back(p.node());
  }
  return make_result(OpKind::kConcat, shape, std::move(out), inputs,
                     [extents, axis, fixed, total](const std::vector<double>& g) {
                       std::vector<std::vector<double>> grads(extents.size());
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < extents.size(); ++i) {
                         const std::size_t e = extents[i];
                         grads[i].resize(e * fixed);
                         if (axis == 0) {
                           std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(off * fixed), e * fixed,
                                       grads[i].begin());
                         } else {
                           for (std::size_t r = 0; r < fixed; ++r) {
                             std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(r * total + off), e,
                                         grads[i].begin() + static_cast<std::ptrdiff_t>(r * e));
                           }
                         }
                         off += e;
                       }
                       return grads;
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_2d(x, "slice");
  if (axis > 1) throw ShapeError("slice: axis must be 0 or 1");
  if (begin >= end || end > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for extent " + std::to_string(x.dim(axis)));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const std::size_t len = end - begin;
  const auto xd = x.data();
  Shape shape = axis == 0 ? Shape{len, cols} : Shape{rows, len};
  std::vector<double> out(len * (axis == 0 ? cols : rows));
  if (axis == 0) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(begin * cols), len * cols, out.begin());
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(r * cols + begin), len,
                  out.begin() + static_cast<std::ptrdiff_t>(r * len));
    }
  }
  auto xn = x.node();
  return make_result(OpKind::kSlice, shape, std::move(out), {xn},
                     [axis, begin, len, rows, cols](const std::vector<double>& g) {
                       std::vector<std::vector<double>> grads(1);
                       grads[0].assign(rows * cols, 0.0);
                       if (axis == 0) {
                         std::copy(g.begin(), g.end(),
                                   grads[0].begin() + static_cast<std::ptrdiff_t>(begin * cols));
                       } else {
                         for (std::size_t r = 0; r < rows; ++r) {
                           std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(r * len), len,
                                       grads[0].begin() + static_cast<std::ptrdiff_t>(r * cols + begin));
                         }
                       }
                       return grads;
                     });
}

Tensor sum(const Tensor& x) {
  const std::size_t n = x.numel();
  return matmul(reshape(x, {1, n}), Tensor::full({n, 1}, 1.0));
}

Tensor scale(const Tensor& x, double factor) { return multiply(x, Tensor::scalar(factor)); }

// ---------------------------------------------------------------------------
// Reverse sweep

void backward(const Tensor& root) {
  if (!root.defined()) throw ContractError("backward: undefined root");
  if (root.numel() != 1) {
    throw ContractError("backward: root must be a scalar, got " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Post-order DFS gives a topological order (inputs before consumers).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients live only for this sweep; leaves accumulate.
  std::unordered_map<Node*, std::vector<double>> interior;
  auto accumulate = [&interior](Node* node, const std::vector<double>& g) {
    check_finite(g, "gradient");
    std::vector<double>& slot = node->op == OpKind::kLeaf ? node->grad : interior[node];
    if (slot.empty()) {
      slot = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
    }
  };
  accumulate(root.node().get(), {1.0});

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->op == OpKind::kLeaf) continue;
    auto found = interior.find(node);
    if (found == interior.end()) continue;
    const std::vector<double> upstream = std::move(found->second);
    interior.erase(found);
    auto grads = node->backward(upstream);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      Node* in = node->inputs[i].get();
      if (in->requires_grad && !grads[i].empty()) accumulate(in, grads[i]);
    }
  }
}

}  // namespace sparsefit::autograd
