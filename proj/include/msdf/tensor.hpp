#pragma once

// Dense f64 tensors with tape-free reverse-mode differentiation. Every op
// records its parents and a backward closure on the output node; backward()
// walks the resulting DAG in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msdf {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Raised when an op produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Direct write access, for parameter initialization and optimizer updates.
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad() { node_->grad.clear(); }

  // Seeds d(self)/d(self) = 1; self must hold one element.
  void backward() const;

  // Same values, no history.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Thread-local switch; while a guard is alive ops skip graph recording.
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

// Nodes reachable from root that participate in differentiation, parents
// before children. backward() visits this list back to front.
std::vector<Node*> topological_order(const Tensor& root);

// --- linear algebra ---------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);     // [m×k]·[k×n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m×k]·[n×k]ᵀ
Tensor transpose(const Tensor& a);                   // 2-D only

// --- elementwise ------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // [m×n] + [n]
Tensor mul_rows(const Tensor& x, const Tensor& s);     // [m×n] * [m×1]
Tensor scale(const Tensor& x, double factor);
Tensor affine(const Tensor& x, double alpha, double beta);  // alpha·x + beta
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor exp(const Tensor& x);
// log(max(x, floor)); gradient is zero where the floor is active.
Tensor log_clamped(const Tensor& x, double floor);

// --- reductions / normalization --------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x);  // last axis
// Row softmax over the last axis of a 2-D tensor. keep[i*n+j] == 0 removes
// key j from row i; removed entries get exactly zero mass, and a row with no
// kept keys is all zeros.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// --- shape ------------------------------------------------------------------
Tensor concat_last(std::span<const Tensor> parts);  // 2-D, equal row counts
Tensor concat_rows(std::span<const Tensor> parts);  // 2-D, equal column counts
Tensor slice_last(const Tensor& x, std::size_t start, std::size_t length);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);

// --- indexing ---------------------------------------------------------------
// rows of table[V×d] picked by ids; gradient scatter-adds back into table.
Tensor embedding(const Tensor& table, std::span<const int> ids);
// out[m×width], out[i, ids[j]] += src[i, j]
Tensor index_add_cols(const Tensor& src, std::span<const int> ids,
                      std::size_t width);

// --- training helpers ---------------------------------------------------------
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool training);
// Mean of -log_probs[t, targets[t]] over positions whose target differs from
// ignore_index; 0 (with zero gradient) when every position is ignored.
Tensor cross_entropy_nll(const Tensor& log_probs, std::span<const int> targets,
                         int ignore_index = -1);

}  // namespace msdf
