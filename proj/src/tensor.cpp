#include "msdf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "msdf/kernels.hpp"

namespace msdf {
namespace {

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<void(Node&)>;

void check_finite(const Node& n) {
  for (double v : n.value) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by op '") + n.op +
                         "' with shape " + shape_str(n.shape));
    }
  }
}

// Builds the output node. Parents and the backward closure are only kept when
// recording is on and some parent needs a gradient.
Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                   std::vector<std::shared_ptr<Node>> parents, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  check_finite(*node);
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const auto& p) { return p->requires_grad; });
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Accumulate `g` into the parent's gradient when that parent needs one.
void accumulate(Node* parent, std::span<const double> g) {
  if (!parent->requires_grad) return;
  parent->ensure_grad();
  kernels::axpy(1.0, g.data(), parent->grad.data(), g.size());
}

template <typename F>
Tensor unary(const Tensor& x, const char* op, F&& f,
             std::function<double(double, double)> dfdx) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Node* xn = x.node();
  return make_result(x.shape(), out, op, {x.node_ptr()},
                     [xn, dfdx](Node& self) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         xn->grad[i] += self.grad[i] * dfdx(xn->value[i], self.value[i]);
                       }
                     });
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// --- Tensor -------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  check_finite(*node);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) needs a 2-D tensor");
  return node_->value.at(row * dim(1) + col);
}

Tensor Tensor::detach() const {
  return Tensor::from(shape(), node_->value, false);
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor::from(shape(), node_->value, requires_grad);
}

std::vector<Node*> topological_order(const Tensor& root) {
  std::vector<Node*> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS: (node, next parent index).
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* parent = node->parents[idx++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw DimensionError("backward() needs a single-element tensor, got " +
                         shape_str(shape()));
  }
  if (!requires_grad()) return;
  const auto order = topological_order(*this);
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// --- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  Node* an = a.node();
  Node* bn = b.node();
  return make_result({m, n}, std::move(out), "matmul", {a.node_ptr(), b.node_ptr()},
                     [an, bn, m, k, n](Node& self) {
                       if (an->requires_grad) {  // dA = dC·Bᵀ
                         an->ensure_grad();
                         kernels::gemm_nt(self.grad.data(), bn->value.data(),
                                          an->grad.data(), m, n, k, true);
                       }
                       if (bn->requires_grad) {  // dB = Aᵀ·dC
                         bn->ensure_grad();
                         kernels::gemm_tn(an->value.data(), self.grad.data(),
                                          bn->grad.data(), k, m, n, true);
                       }
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  kernels::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  Node* an = a.node();
  Node* bn = b.node();
  return make_result({m, n}, std::move(out), "matmul_nt",
                     {a.node_ptr(), b.node_ptr()}, [an, bn, m, k, n](Node& self) {
                       if (an->requires_grad) {  // dA = dC·B
                         an->ensure_grad();
                         kernels::gemm_nn(self.grad.data(), bn->value.data(),
                                          an->grad.data(), m, n, k, true);
                       }
                       if (bn->requires_grad) {  // dB = dCᵀ·A
                         bn->ensure_grad();
                         kernels::gemm_tn(self.grad.data(), an->value.data(),
                                          bn->grad.data(), n, m, k, true);
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto in = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  Node* an = a.node();
  return make_result({n, m}, std::move(out), "transpose", {a.node_ptr()},
                     [an, m, n](Node& self) {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           an->grad[i * n + j] += self.grad[j * m + i];
                     });
}

// --- elementwise --------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  kernels::axpy(1.0, b.data().data(), out.data(), out.size());
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(a.shape(), std::move(out), "add", {a.node_ptr(), b.node_ptr()},
                     [an, bn](Node& self) {
                       accumulate(an, self.grad);
                       accumulate(bn, self.grad);
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  kernels::axpy(-1.0, b.data().data(), out.data(), out.size());
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(a.shape(), std::move(out), "sub", {a.node_ptr(), b.node_ptr()},
                     [an, bn](Node& self) {
                       accumulate(an, self.grad);
                       if (bn->requires_grad) {
                         bn->ensure_grad();
                         kernels::axpy(-1.0, self.grad.data(), bn->grad.data(),
                                       self.grad.size());
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(a.shape(), std::move(out), "mul", {a.node_ptr(), b.node_ptr()},
                     [an, bn](Node& self) {
                       if (an->requires_grad) {
                         an->ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           an->grad[i] += self.grad[i] * bn->value[i];
                       }
                       if (bn->requires_grad) {
                         bn->ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           bn->grad[i] += self.grad[i] * an->value[i];
                       }
                     });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match rows of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    kernels::axpy(1.0, bias.data().data(), out.data() + i * n, n);
  Node* xn = x.node();
  Node* bn = bias.node();
  return make_result(x.shape(), std::move(out), "add_bias",
                     {x.node_ptr(), bias.node_ptr()}, [xn, bn, m, n](Node& self) {
                       accumulate(xn, self.grad);
                       if (bn->requires_grad) {
                         bn->ensure_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           kernels::axpy(1.0, self.grad.data() + i * n,
                                         bn->grad.data(), n);
                       }
                     });
}

Tensor mul_rows(const Tensor& x, const Tensor& s) {
  require_rank(x, 2, "mul_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (s.numel() != m) {
    throw DimensionError("mul_rows: scale " + shape_str(s.shape()) +
                         " does not match " + shape_str(x.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = x.data()[i * n + j] * s.data()[i];
  Node* xn = x.node();
  Node* sn = s.node();
  return make_result(x.shape(), std::move(out), "mul_rows",
                     {x.node_ptr(), s.node_ptr()}, [xn, sn, m, n](Node& self) {
                       if (xn->requires_grad) {
                         xn->ensure_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           kernels::axpy(sn->value[i], self.grad.data() + i * n,
                                         xn->grad.data() + i * n, n);
                       }
                       if (sn->requires_grad) {
                         sn->ensure_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           sn->grad[i] += kernels::dot(self.grad.data() + i * n,
                                                       xn->value.data() + i * n, n);
                       }
                     });
}

Tensor scale(const Tensor& x, double factor) { return affine(x, factor, 0.0); }

Tensor affine(const Tensor& x, double alpha, double beta) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * x.data()[i] + beta;
  Node* xn = x.node();
  return make_result(x.shape(), std::move(out), "affine", {x.node_ptr()},
                     [xn, alpha](Node& self) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       kernels::axpy(alpha, self.grad.data(), xn->grad.data(),
                                     self.grad.size());
                     });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        // Branch on sign so exp never overflows.
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; },
      [](double in, double) { return in > 0 ? 1.0 : 0.0; });
}

namespace {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluC = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  return unary(
      x, "gelu",
      [](double v) {
        return 0.5 * v * (1.0 + std::tanh(kSqrt2OverPi * (v + kGeluC * v * v * v)));
      },
      [](double v, double) {
        const double u = kSqrt2OverPi * (v + kGeluC * v * v * v);
        const double t = std::tanh(u);
        const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log_clamped(const Tensor& x, double floor) {
  return unary(
      x, "log_clamped", [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

// --- reductions -----------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Node* xn = x.node();
  return make_result({1}, {s}, "sum", {x.node_ptr()}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (double& g : xn->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < inner; ++r) {
      const std::size_t base = o * len * inner + r;
      double mx = in[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  Node* xn = x.node();
  return make_result(s, std::move(out), "softmax", {x.node_ptr()},
                     [xn, outer, inner, len](Node& self) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t r = 0; r < inner; ++r) {
                           const std::size_t base = o * len * inner + r;
                           double dotv = 0.0;
                           for (std::size_t j = 0; j < len; ++j) {
                             const std::size_t at = base + j * inner;
                             dotv += self.grad[at] * self.value[at];
                           }
                           for (std::size_t j = 0; j < len; ++j) {
                             const std::size_t at = base + j * inner;
                             xn->grad[at] += self.value[at] * (self.grad[at] - dotv);
                           }
                         }
                       }
                     });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * len;
    const double mx = *std::max_element(row, row + len);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = row[j] - lz;
  }
  Node* xn = x.node();
  return make_result(x.shape(), std::move(out), "log_softmax", {x.node_ptr()},
                     [xn, rows, len](Node& self) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                         double gsum = 0.0;
                         for (std::size_t j = 0; j < len; ++j) gsum += self.grad[r * len + j];
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t at = r * len + j;
                           xn->grad[at] += self.grad[at] - std::exp(self.value[at]) * gsum;
                         }
                       }
                     });
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep) {
  require_rank(x, 2, "masked_softmax");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (keep.size() != m * n) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(keep.size()) +
                         " entries for " + shape_str(x.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = 0.0;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep[i * n + j]) continue;
      mx = any ? std::max(mx, in[i * n + j]) : in[i * n + j];
      any = true;
    }
    if (!any) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep[i * n + j]) continue;
      out[i * n + j] = std::exp(in[i * n + j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Node* xn = x.node();
  return make_result(x.shape(), std::move(out), "masked_softmax", {x.node_ptr()},
                     [xn, m, n](Node& self) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i) {
                         const double* y = self.value.data() + i * n;
                         const double* g = self.grad.data() + i * n;
                         const double dotv = kernels::dot(y, g, n);
                         for (std::size_t j = 0; j < n; ++j)
                           xn->grad[i * n + j] += y[j] * (g[j] - dotv);
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto in = x.data();
  const auto g = gain.data();
  const auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * g[j] + b[j];
    }
  }
  Node* xn = x.node();
  Node* gn = gain.node();
  Node* bn = bias.node();
  return make_result(
      x.shape(), std::move(out), "layer_norm",
      {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
      [xn, gn, bn, rows, d, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Node& self) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * d;
          const double* h = xhat.data() + r * d;
          if (gn->requires_grad)
            for (std::size_t j = 0; j < d; ++j) gn->grad[j] += dy[j] * h[j];
          if (bn->requires_grad)
            for (std::size_t j = 0; j < d; ++j) bn->grad[j] += dy[j];
          if (!xn->requires_grad) continue;
          double sum_dh = 0.0, sum_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy[j] * gn->value[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy[j] * gn->value[j];
            xn->grad[r * d + j] +=
                inv_std[r] * (dh - inv_d * sum_dh - h[j] * inv_d * sum_dh_h);
          }
        }
      });
}

// --- shape --------------------------------------------------------------------

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_last");
    if (p.dim(0) != m) {
      throw DimensionError("concat_last: row mismatch " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  std::vector<double> out(m * total);
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<std::pair<Node*, std::size_t>> slots;  // (node, column offset)
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data().data() + i * w, w, out.data() + i * total + off);
    parents.push_back(p.node_ptr());
    slots.emplace_back(p.node(), off);
    off += w;
  }
  return make_result({m, total}, std::move(out), "concat_last", std::move(parents),
                     [slots, m, total](Node& self) {
                       for (auto [pn, offset] : slots) {
                         if (!pn->requires_grad) continue;
                         pn->ensure_grad();
                         const std::size_t w = pn->shape[1];
                         for (std::size_t i = 0; i < m; ++i)
                           kernels::axpy(1.0, self.grad.data() + i * total + offset,
                                         pn->grad.data() + i * w, w);
                       }
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].dim(1);
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != n) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    }
    total += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(total * n);
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<std::pair<Node*, std::size_t>> slots;  // (node, element offset)
  for (const auto& p : parts) {
    slots.emplace_back(p.node(), out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    parents.push_back(p.node_ptr());
  }
  return make_result({total, n}, std::move(out), "concat_rows", std::move(parents),
                     [slots](Node& self) {
                       for (auto [pn, offset] : slots) {
                         if (!pn->requires_grad) continue;
                         pn->ensure_grad();
                         kernels::axpy(1.0, self.grad.data() + offset, pn->grad.data(),
                                       pn->value.size());
                       }
                     });
}

Tensor slice_last(const Tensor& x, std::size_t start, std::size_t length) {
  require_rank(x, 2, "slice_last");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (length == 0 || start + length > n) {
    throw DimensionError("slice_last: [" + std::to_string(start) + ", +" +
                         std::to_string(length) + ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(m * length);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().data() + i * n + start, length, out.data() + i * length);
  Node* xn = x.node();
  return make_result({m, length}, std::move(out), "slice_last", {x.node_ptr()},
                     [xn, m, n, start, length](Node& self) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                         kernels::axpy(1.0, self.grad.data() + i * length,
                                       xn->grad.data() + i * n + start, length);
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t length) {
  require_rank(x, 2, "slice_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (length == 0 || start + length > m) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" +
                         std::to_string(length) + ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin() + start * n,
                          x.data().begin() + (start + length) * n);
  Node* xn = x.node();
  return make_result({length, n}, std::move(out), "slice_rows", {x.node_ptr()},
                     [xn, n, start](Node& self) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       kernels::axpy(1.0, self.grad.data(), xn->grad.data() + start * n,
                                     self.grad.size());
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Node* xn = x.node();
  return make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
                     "reshape", {x.node_ptr()},
                     [xn](Node& self) { accumulate(xn, self.grad); });
}

// --- indexing -------------------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t v = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) +
                       " outside table of " + std::to_string(v) + " rows");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data() + i * d);
  }
  Node* tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), "embedding", {table.node_ptr()},
                     [tn, d, idv = std::move(idv)](Node& self) {
                       if (!tn->requires_grad) return;
                       tn->ensure_grad();
                       for (std::size_t i = 0; i < idv.size(); ++i)
                         kernels::axpy(1.0, self.grad.data() + i * d,
                                       tn->grad.data() + static_cast<std::size_t>(idv[i]) * d,
                                       d);
                     });
}

Tensor index_add_cols(const Tensor& src, std::span<const int> ids, std::size_t width) {
  require_rank(src, 2, "index_add_cols");
  const std::size_t m = src.dim(0), k = src.dim(1);
  if (ids.size() != k) {
    throw DimensionError("index_add_cols: " + std::to_string(ids.size()) +
                         " ids for " + shape_str(src.shape()));
  }
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= width) {
      throw IndexError("index_add_cols: id " + std::to_string(id) +
                       " outside width " + std::to_string(width));
    }
  }
  std::vector<double> out(m * width, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j)
      out[i * width + static_cast<std::size_t>(ids[j])] += src.data()[i * k + j];
  Node* sn = src.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result({m, width}, std::move(out), "index_add_cols", {src.node_ptr()},
                     [sn, m, k, width, idv = std::move(idv)](Node& self) {
                       if (!sn->requires_grad) return;
                       sn->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < k; ++j)
                           sn->grad[i * k + j] +=
                               self.grad[i * width + static_cast<std::size_t>(idv[j])];
                     });
}

// --- training helpers -------------------------------------------------------------

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? inv : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor cross_entropy_nll(const Tensor& log_probs, std::span<const int> targets,
                         int ignore_index) {
  require_rank(log_probs, 2, "cross_entropy_nll");
  const std::size_t l = log_probs.dim(0), v = log_probs.dim(1);
  if (targets.size() != l) {
    throw DimensionError("cross_entropy_nll: " + std::to_string(targets.size()) +
                         " targets for " + shape_str(log_probs.shape()));
  }
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t t = 0; t < l; ++t) {
    if (targets[t] == ignore_index) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= v) {
      throw IndexError("cross_entropy_nll: target " + std::to_string(targets[t]) +
                       " outside vocabulary of " + std::to_string(v));
    }
    total -= log_probs.data()[t * v + static_cast<std::size_t>(targets[t])];
    ++count;
  }
  const double denom = count == 0 ? 0.0 : 1.0 / static_cast<double>(count);
  Node* ln = log_probs.node();
  std::vector<int> tv(targets.begin(), targets.end());
  return make_result({1}, {total * denom}, "cross_entropy_nll", {log_probs.node_ptr()},
                     [ln, v, denom, ignore_index, tv = std::move(tv)](Node& self) {
                       if (!ln->requires_grad || denom == 0.0) return;
                       ln->ensure_grad();
                       for (std::size_t t = 0; t < tv.size(); ++t) {
                         if (tv[t] == ignore_index) continue;
                         ln->grad[t * v + static_cast<std::size_t>(tv[t])] -=
                             self.grad[0] * denom;
                       }
                     });
}

}  // namespace msdf
