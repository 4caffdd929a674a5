#include "icmu/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace icmu {

namespace {

thread_local std::vector<Tape*> g_tape_stack;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void mm(const double* a, const double* b, double* c, int m, int k, int n) {
  // c[m x n] += a[m x k] * b[k x n]
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void mm_a_bt(const double* a, const double* b, double* c, int m, int n, int k) {
  // c[m x k] += a[m x n] * b[k x n]^T   (rows of a dotted with rows of b)
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * n;
    double* crow = c + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* brow = b + static_cast<size_t>(p) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

void mm_at_b(const double* a, const double* b, double* c, int m, int k, int n) {
  // c[k x n] += a[m x k]^T * b[m x n]
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* brow = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(t.shape()));
  }
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Marks the output differentiable and registers the backward closure.
void record(Tensor& out, std::function<void()> backward_fn) {
  out.set_requires_grad(true);
  Tape::active()->record(out.node(), std::move(backward_fn));
}

void accumulate(const std::shared_ptr<TensorNode>& node, size_t i, double v) {
  node->ensure_grad();
  node->grad[i] += v;
}

}  // namespace

int numel(const Shape& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (numel(shape) != static_cast<int>(values.size())) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  node_ = std::make_shared<TensorNode>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(static_cast<size_t>(numel(shape)), value);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(int rows, int cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

int Tensor::rows() const {
  require_2d(*this, "rows");
  return node_->shape[0];
}

int Tensor::cols() const {
  require_2d(*this, "cols");
  return node_->shape[1];
}

double Tensor::value() const {
  if (size() != 1) throw ContractError("value(): tensor is not scalar, shape " + shape_str(shape()));
  return node_->values[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
  node_->requires_grad = v;
  if (v) node_->ensure_grad();
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (!node_ || node_->grad.empty()) throw ContractError("grad(): no gradient present");
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.assign(node_->values.size(), 0.0);
}

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() { g_tape_stack.pop_back(); }

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::record(std::shared_ptr<TensorNode> output, std::function<void()> backward_fn) {
  ops_.push_back({std::move(output), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not connected to the tape");
  }
  // Op outputs are intermediates by construction; reset them so repeated
  // backward calls accumulate cleanly into the leaves only.
  for (auto& op : ops_) {
    op.output->ensure_grad();
    std::fill(op.output->grad.begin(), op.output->grad.end(), 0.0);
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    it->backward_fn();
  }
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  mm(a.values().data(), b.values().data(), out.values().data(), m, k, n);
  if (should_record({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record(out, [an, bn, on, m, k, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        mm_a_bt(on->grad.data(), bn->values.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        mm_at_b(an->values.data(), on->grad.data(), bn->grad.data(), m, k, n);
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.values()[static_cast<size_t>(j) * m + i] = a.at(i, j);
  if (should_record({&a})) {
    auto an = a.node(), on = out.node();
    record(out, [an, on, m, n] {
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          an->grad[static_cast<size_t>(i) * n + j] += on->grad[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  for (int i = 0; i < a.size(); ++i) out.values()[static_cast<size_t>(i)] = a.at(i) + b.at(i);
  if (should_record({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record(out, [an, bn, on] {
      for (size_t i = 0; i < on->grad.size(); ++i) {
        if (an->requires_grad) accumulate(an, i, on->grad[i]);
        if (bn->requires_grad) accumulate(bn, i, on->grad[i]);
      }
    });
  }
  return out;
}

Tensor add_row_broadcast(const Tensor& m, const Tensor& row) {
  require_2d(m, "add_row_broadcast");
  if (row.ndim() != 1 || row.dim(0) != m.cols()) {
    throw ShapeError("add_row_broadcast: row " + shape_str(row.shape()) + " does not match " +
                     shape_str(m.shape()));
  }
  const int r = m.rows(), c = m.cols();
  Tensor out = Tensor::zeros({r, c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.values()[static_cast<size_t>(i) * c + j] = m.at(i, j) + row.at(j);
  if (should_record({&m, &row})) {
    auto mn = m.node(), rn = row.node(), on = out.node();
    record(out, [mn, rn, on, r, c] {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          const double g = on->grad[static_cast<size_t>(i) * c + j];
          if (mn->requires_grad) accumulate(mn, static_cast<size_t>(i) * c + j, g);
          if (rn->requires_grad) accumulate(rn, static_cast<size_t>(j), g);
        }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  for (int i = 0; i < a.size(); ++i) out.values()[static_cast<size_t>(i)] = c * a.at(i);
  if (should_record({&a})) {
    auto an = a.node(), on = out.node();
    record(out, [an, on, c] {
      for (size_t i = 0; i < on->grad.size(); ++i) accumulate(an, i, c * on->grad[i]);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  for (int i = 0; i < a.size(); ++i) out.values()[static_cast<size_t>(i)] = a.at(i) * b.at(i);
  if (should_record({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record(out, [an, bn, on] {
      for (size_t i = 0; i < on->grad.size(); ++i) {
        if (an->requires_grad) accumulate(an, i, bn->values[i] * on->grad[i]);
        if (bn->requires_grad) accumulate(bn, i, an->values[i] * on->grad[i]);
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (int i = 0; i < a.size(); ++i) acc += a.at(i);
  Tensor out = Tensor::scalar(acc);
  if (should_record({&a})) {
    auto an = a.node(), on = out.node();
    record(out, [an, on] {
      const double g = on->grad[0];
      for (size_t i = 0; i < an->values.size(); ++i) accumulate(an, i, g);
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), a.values());
  if (should_record({&a})) {
    auto an = a.node(), on = out.node();
    record(out, [an, on] {
      for (size_t i = 0; i < on->grad.size(); ++i) accumulate(an, i, on->grad[i]);
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const int c = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != c) {
      throw ShapeError("concat_rows: column counts disagree: " + shape_str(parts[0].shape()) +
                       " vs " + shape_str(p.shape()));
    }
    total += p.rows();
  }
  Tensor out = Tensor::zeros({total, c});
  int at = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(),
              out.values().begin() + static_cast<size_t>(at) * c);
    at += p.rows();
  }
  bool rec = false;
  for (const auto& p : parts) rec = rec || should_record({&p});
  if (rec) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    record(out, [nodes, on, c] {
      size_t at = 0;
      for (const auto& n : nodes) {
        if (n->requires_grad) {
          n->ensure_grad();
          for (size_t i = 0; i < n->values.size(); ++i) n->grad[i] += on->grad[at + i];
        }
        at += n->values.size();
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const int r = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != r) {
      throw ShapeError("concat_cols: row counts disagree: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total += p.cols();
  }
  Tensor out = Tensor::zeros({r, total});
  int at = 0;
  for (const auto& p : parts) {
    const int pc = p.cols();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < pc; ++j)
        out.values()[static_cast<size_t>(i) * total + at + j] = p.at(i, j);
    at += pc;
  }
  bool rec = false;
  for (const auto& p : parts) rec = rec || should_record({&p});
  if (rec) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    record(out, [nodes, on, r, total] {
      int at = 0;
      for (const auto& n : nodes) {
        const int pc = static_cast<int>(n->shape[1]);
        if (n->requires_grad) {
          n->ensure_grad();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < pc; ++j)
              n->grad[static_cast<size_t>(i) * pc + j] +=
                  on->grad[static_cast<size_t>(i) * total + at + j];
        }
        at += pc;
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& m, const std::vector<int>& indices) {
  require_2d(m, "gather_rows");
  const int r = m.rows(), c = m.cols();
  for (int idx : indices) {
    if (idx < 0 || idx >= r) {
      throw IndexError("gather_rows: index " + std::to_string(idx) + " out of range for " +
                       shape_str(m.shape()));
    }
  }
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  Tensor out = Tensor::zeros({static_cast<int>(indices.size()), c});
  for (size_t i = 0; i < indices.size(); ++i) {
    const double* src = m.values().data() + static_cast<size_t>(indices[i]) * c;
    std::copy(src, src + c, out.values().data() + i * c);
  }
  if (should_record({&m})) {
    auto mn = m.node(), on = out.node();
    auto idx = indices;
    record(out, [mn, on, idx, c] {
      mn->ensure_grad();
      for (size_t i = 0; i < idx.size(); ++i) {
        double* dst = mn->grad.data() + static_cast<size_t>(idx[i]) * c;
        const double* src = on->grad.data() + i * c;
        for (int j = 0; j < c; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  require_2d(logits, "masked_softmax");
  if (mask.shape() != logits.shape()) {
    throw ShapeError("masked_softmax: mask " + shape_str(mask.shape()) + " does not match logits " +
                     shape_str(logits.shape()));
  }
  const int r = logits.rows(), c = logits.cols();
  for (int i = 0; i < mask.size(); ++i) {
    const double mv = mask.at(i);
    if (mv != 0.0 && mv != kNegInf) {
      throw ValidationError("masked_softmax: mask entries must be 0 or -inf");
    }
  }
  Tensor out = Tensor::zeros({r, c});
  for (int i = 0; i < r; ++i) {
    double mx = kNegInf;
    for (int j = 0; j < c; ++j) {
      if (mask.at(i, j) == 0.0) mx = std::max(mx, logits.at(i, j));
    }
    if (mx == kNegInf) {
      throw ValidationError("masked_softmax: degenerate row " + std::to_string(i) +
                            " has every position masked");
    }
    double denom = 0.0;
    for (int j = 0; j < c; ++j) {
      if (mask.at(i, j) == 0.0) denom += std::exp(logits.at(i, j) - mx);
    }
    for (int j = 0; j < c; ++j) {
      if (mask.at(i, j) == 0.0) {
        out.values()[static_cast<size_t>(i) * c + j] = std::exp(logits.at(i, j) - mx) / denom;
      }
    }
  }
  if (should_record({&logits})) {
    auto ln = logits.node(), onode = out.node(), mn = mask.node();
    record(out, [ln, onode, mn, r, c] {
      ln->ensure_grad();
      for (int i = 0; i < r; ++i) {
        double dot = 0.0;
        for (int j = 0; j < c; ++j) {
          const size_t p = static_cast<size_t>(i) * c + j;
          if (mn->values[p] == 0.0) dot += onode->grad[p] * onode->values[p];
        }
        for (int j = 0; j < c; ++j) {
          const size_t p = static_cast<size_t>(i) * c + j;
          if (mn->values[p] == 0.0) {
            ln->grad[p] += onode->values[p] * (onode->grad[p] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  const int r = x.rows(), d = x.cols();
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d) {
    throw ShapeError("layer_norm: gain/bias must be length " + std::to_string(d));
  }
  if (eps <= 0.0) throw ValidationError("layer_norm: eps must be positive");
  Tensor out = Tensor::zeros({r, d});
  std::vector<double> inv_sigma(static_cast<size_t>(r));
  std::vector<double> xhat(static_cast<size_t>(r) * d);
  for (int i = 0; i < r; ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x.at(i, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double dv = x.at(i, j) - mean;
      var += dv * dv;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      const size_t p = static_cast<size_t>(i) * d + j;
      xhat[p] = (x.at(i, j) - mean) * is;
      out.values()[p] = gain.at(j) * xhat[p] + bias.at(j);
    }
  }
  if (should_record({&x, &gain, &bias})) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    record(out, [xn, gn, bn, on, r, d, inv_sigma, xhat] {
      for (int i = 0; i < r; ++i) {
        const double is = inv_sigma[static_cast<size_t>(i)];
        // dxhat = dout * gain; then the standard layer-norm input gradient
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
          const size_t p = static_cast<size_t>(i) * d + j;
          const double dxh = on->grad[p] * gn->values[static_cast<size_t>(j)];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhat[p];
        }
        for (int j = 0; j < d; ++j) {
          const size_t p = static_cast<size_t>(i) * d + j;
          const double dxh = on->grad[p] * gn->values[static_cast<size_t>(j)];
          if (xn->requires_grad) {
            xn->ensure_grad();
            xn->grad[p] += is * (dxh - sum_dxhat / d - xhat[p] * sum_dxhat_xhat / d);
          }
          if (gn->requires_grad) accumulate(gn, static_cast<size_t>(j), on->grad[p] * xhat[p]);
          if (bn->requires_grad) accumulate(bn, static_cast<size_t>(j), on->grad[p]);
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < x.size(); ++i) {
    const double v = x.at(i);
    out.values()[static_cast<size_t>(i)] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  }
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record(out, [xn, on] {
      xn->ensure_grad();
      for (size_t i = 0; i < xn->values.size(); ++i) {
        const double v = xn->values[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
        xn->grad[i] += on->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  require_2d(logits, "cross_entropy");
  const int r = logits.rows(), c = logits.cols();
  if (static_cast<int>(targets.size()) != r) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(r) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= c) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(c) + ")");
    }
  }
  double total = 0.0;
  std::vector<double> probs(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i) {
    double mx = logits.at(i, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
    double denom = 0.0;
    for (int j = 0; j < c; ++j) denom += std::exp(logits.at(i, j) - mx);
    const double lse = mx + std::log(denom);
    total += lse - logits.at(i, targets[static_cast<size_t>(i)]);
    for (int j = 0; j < c; ++j) {
      probs[static_cast<size_t>(i) * c + j] = std::exp(logits.at(i, j) - mx) / denom;
    }
  }
  Tensor out = Tensor::scalar(total / r);
  if (should_record({&logits})) {
    auto ln = logits.node(), on = out.node();
    auto tgt = targets;
    record(out, [ln, on, tgt, probs, r, c] {
      ln->ensure_grad();
      const double g = on->grad[0] / r;
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          const size_t p = static_cast<size_t>(i) * c + j;
          const double onehot = (j == tgt[static_cast<size_t>(i)]) ? 1.0 : 0.0;
          ln->grad[p] += g * (probs[p] - onehot);
        }
      }
    });
  }
  return out;
}

std::vector<double> softmax_values(const std::vector<double>& logits) {
  std::vector<double> out(logits.size());
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double denom = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return out;
}

}  // namespace icmu
