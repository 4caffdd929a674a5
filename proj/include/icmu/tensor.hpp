#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "icmu/error.hpp"

namespace icmu {

using Shape = std::vector<int>;

int numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense storage node shared by Tensor handles. Gradients live next to the
// values; for leaves (parameters, inputs) they persist across backward calls,
// for op outputs the tape resets them before each replay.
struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

// Value-semantics handle over a shared node. Copies alias the same storage.
class Tensor {
public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  // 2-d convenience constructor, row-major data
  static Tensor matrix(int rows, int cols, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(node_->values.size()); }
  // 2-d accessors
  int rows() const;
  int cols() const;

  double value() const;  // scalar tensors only
  double at(int i) const { return node_->values[static_cast<size_t>(i)]; }
  double at(int r, int c) const { return node_->values[static_cast<size_t>(r) * cols() + c]; }

  std::vector<double>& values() { return node_->values; }
  const std::vector<double>& values() const { return node_->values; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool v);
  const std::vector<double>& grad() const;
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad();

  const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
  std::shared_ptr<TensorNode> node_;
};

// Define-by-run tape. Constructing a Tape makes it the active recorder for
// the current thread; it is rebuilt for every forward pass. Single-writer:
// exactly one trainer records/backwards at a time.
class Tape {
public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::shared_ptr<TensorNode> output, std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse order.
  // Leaf gradients accumulate across repeated calls; op-output gradients are
  // reset on every call.
  void backward(const Tensor& loss);

  size_t num_ops() const { return ops_.size(); }

private:
  struct Op {
    std::shared_ptr<TensorNode> output;
    std::function<void()> backward_fn;
  };
  std::vector<Op> ops_;
};

// ---- differentiable operations -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
// [n x d] plus a length-d vector broadcast over rows
Tensor add_row_broadcast(const Tensor& m, const Tensor& row);
Tensor scale(const Tensor& a, double c);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);  // -> scalar
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& m, const std::vector<int>& indices);

// Row softmax over the positions whose mask entry is 0; positions with mask
// -inf are excluded from the normalization and emit exactly 0.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(const Tensor& x);
// Mean over rows of -log softmax(logits)[target], max-stabilized.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

// Plain (non-recorded) stable softmax over a vector of values.
std::vector<double> softmax_values(const std::vector<double>& logits);

}  // namespace icmu
