#include "modabs/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace modabs {

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("op on invalid Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != a.tape) throw std::invalid_argument("ops require a single tape");
  return t;
}

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Var Tape::leaf(Array value, bool requires_grad) {
  return record(std::move(value), requires_grad, nullptr);
}

Var Tape::record(Array value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward = requires_grad ? std::move(backward) : nullptr;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Array& Tape::grad(Var v) const {
  const Node& n = node(v.id);
  if (!n.grad.empty()) return n.grad;
  zero_like_ = Array::zeros(n.value.shape());
  return zero_like_;
}

Array& Tape::grad_acc(int id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad = Array::zeros(n.value.shape());
  n.touched = true;
  return n.grad;
}

void Tape::backward(Var scalar_loss) {
  if (scalar_loss.tape != this) throw std::invalid_argument("backward: Var not on this tape");
  const Node& loss = node(scalar_loss.id);
  if (loss.value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  if (!std::isfinite(loss.value.at(0))) throw std::runtime_error("backward: non-finite loss");
  grad_acc(scalar_loss.id).at(0) = 1.0;
  for (int id = scalar_loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (n.touched && n.backward) n.backward(*this, id);
  }
}

void Tape::clear() { nodes_.clear(); }

// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Array& A = t.value(a);
  const Array& B = t.value(b);
  require(A.same_shape(B), "add: shape mismatch");
  Array out = A;
  const double* pb = B.data();
  double* po = out.data();
  for (int i = 0; i < out.numel(); ++i) po[i] += pb[i];
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(std::move(out), rg, [a, b](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Array& d = t.grad_acc(v.id);
      for (int i = 0; i < g.numel(); ++i) d.at(i) += g.at(i);
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Array& A = t.value(a);
  const Array& B = t.value(b);
  require(A.same_shape(B), "sub: shape mismatch");
  Array out = A;
  for (int i = 0; i < out.numel(); ++i) out.at(i) -= B.at(i);
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(std::move(out), rg, [a, b](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    if (t.requires_grad(a)) {
      Array& d = t.grad_acc(a.id);
      for (int i = 0; i < g.numel(); ++i) d.at(i) += g.at(i);
    }
    if (t.requires_grad(b)) {
      Array& d = t.grad_acc(b.id);
      for (int i = 0; i < g.numel(); ++i) d.at(i) -= g.at(i);
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Array& A = t.value(a);
  const Array& B = t.value(b);
  require(A.same_shape(B), "mul: shape mismatch");
  Array out = A;
  for (int i = 0; i < out.numel(); ++i) out.at(i) *= B.at(i);
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(std::move(out), rg, [a, b](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    const Array& A = t.value(a);
    const Array& B = t.value(b);
    if (t.requires_grad(a)) {
      Array& d = t.grad_acc(a.id);
      for (int i = 0; i < g.numel(); ++i) d.at(i) += g.at(i) * B.at(i);
    }
    if (t.requires_grad(b)) {
      Array& d = t.grad_acc(b.id);
      for (int i = 0; i < g.numel(); ++i) d.at(i) += g.at(i) * A.at(i);
    }
  });
}

Var scalar_mul(Var a, double c) {
  Tape& t = tape_of(a);
  Array out = t.value(a);
  for (int i = 0; i < out.numel(); ++i) out.at(i) *= c;
  return t.record(std::move(out), t.requires_grad(a), [a, c](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    Array& d = t.grad_acc(a.id);
    for (int i = 0; i < g.numel(); ++i) d.at(i) += g.at(i) * c;
  });
}

Var neg(Var a) { return scalar_mul(a, -1.0); }

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Array& A = t.value(a);
  const Array& B = t.value(b);
  require(A.ndim() == 2 && B.ndim() == 2, "matmul: operands must be 2-D");
  require(A.dim(1) == B.dim(0), "matmul: inner dimension mismatch");
  const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Array out({m, n});
  const double* pa = A.data();
  const double* pb = B.data();
  double* po = out.data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* pbr = pb + kk * n;
      double* por = po + i * n;
      for (int j = 0; j < n; ++j) por[j] += av * pbr[j];
    }
  }
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(std::move(out), rg, [a, b, m, k, n](Tape& t, int self) {
    const double* g = t.grad_of(self).data();
    const double* pa = t.value(a).data();
    const double* pb = t.value(b).data();
    if (t.requires_grad(a)) {
      double* da = t.grad_acc(a.id).data();
      for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
          const double* gr = g + i * n;
          const double* br = pb + kk * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += gr[j] * br[j];
          da[i * k + kk] += acc;
        }
      }
    }
    if (t.requires_grad(b)) {
      double* db = t.grad_acc(b.id).data();
      for (int i = 0; i < m; ++i) {
        const double* gr = g + i * n;
        for (int kk = 0; kk < k; ++kk) {
          const double av = pa[i * k + kk];
          double* dbr = db + kk * n;
          for (int j = 0; j < n; ++j) dbr[j] += av * gr[j];
        }
      }
    }
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const Array& A = t.value(a);
  require(A.ndim() == 2, "transpose: operand must be 2-D");
  const int r = A.dim(0), c = A.dim(1);
  Array out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at2(j, i) = A.at2(i, j);
  return t.record(std::move(out), t.requires_grad(a), [a, r, c](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    Array& d = t.grad_acc(a.id);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) d.at2(i, j) += g.at2(j, i);
  });
}

Var reshape(Var a, std::vector<int> shape) {
  Tape& t = tape_of(a);
  Array out = t.value(a).reshaped(std::move(shape));
  return t.record(std::move(out), t.requires_grad(a), [a](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    Array& d = t.grad_acc(a.id);
    for (int i = 0; i < g.numel(); ++i) d.at(i) += g.at(i);
  });
}

Var slice_rows(Var a, int offset, int count) {
  Tape& t = tape_of(a);
  const Array& A = t.value(a);
  require(A.ndim() == 2, "slice_rows: operand must be 2-D");
  require(offset >= 0 && count > 0 && offset + count <= A.dim(0), "slice_rows: range out of bounds");
  const int c = A.dim(1);
  Array out({count, c});
  std::copy_n(A.data() + static_cast<size_t>(offset) * c, static_cast<size_t>(count) * c, out.data());
  return t.record(std::move(out), t.requires_grad(a), [a, offset, count, c](Tape& t, int self) {
    const double* g = t.grad_of(self).data();
    double* d = t.grad_acc(a.id).data() + static_cast<size_t>(offset) * c;
    for (int i = 0; i < count * c; ++i) d[i] += g[i];
  });
}

Var slice_cols(Var a, int offset, int count) {
  Tape& t = tape_of(a);
  const Array& A = t.value(a);
  require(A.ndim() == 2, "slice_cols: operand must be 2-D");
  require(offset >= 0 && count > 0 && offset + count <= A.dim(1), "slice_cols: range out of bounds");
  const int r = A.dim(0), c = A.dim(1);
  Array out({r, count});
  for (int i = 0; i < r; ++i)
    std::copy_n(A.data() + static_cast<size_t>(i) * c + offset, count, out.data() + static_cast<size_t>(i) * count);
  return t.record(std::move(out), t.requires_grad(a), [a, offset, count, r, c](Tape& t, int self) {
    const double* g = t.grad_of(self).data();
    double* d = t.grad_acc(a.id).data();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < count; ++j) d[static_cast<size_t>(i) * c + offset + j] += g[static_cast<size_t>(i) * count + j];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no parts");
  Tape& t = tape_of(parts[0]);
  int rows = t.value(parts[0]).dim(0);
  int cols = 0;
  bool rg = false;
  for (Var p : parts) {
    require(p.tape == parts[0].tape, "concat_cols: vars on different tapes");
    const Array& V = t.value(p);
    require(V.ndim() == 2 && V.dim(0) == rows, "concat_cols: row count mismatch");
    cols += V.dim(1);
    rg = rg || t.requires_grad(p);
  }
  Array out({rows, cols});
  int off = 0;
  for (Var p : parts) {
    const Array& V = t.value(p);
    for (int i = 0; i < rows; ++i)
      std::copy_n(V.data() + static_cast<size_t>(i) * V.dim(1), V.dim(1),
                  out.data() + static_cast<size_t>(i) * cols + off);
    off += V.dim(1);
  }
  auto parts_copy = parts;
  return t.record(std::move(out), rg, [parts_copy, rows, cols](Tape& t, int self) {
    const double* g = t.grad_of(self).data();
    int off = 0;
    for (Var p : parts_copy) {
      const int w = t.value(p).dim(1);
      if (t.requires_grad(p)) {
        double* d = t.grad_acc(p.id).data();
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < w; ++j) d[static_cast<size_t>(i) * w + j] += g[static_cast<size_t>(i) * cols + off + j];
      }
      off += w;
    }
  });
}

Var gather_rows(Var table, const std::vector<int>& row_ids) {
  Tape& t = tape_of(table);
  const Array& T = t.value(table);
  require(T.ndim() == 2, "gather_rows: table must be 2-D");
  const int c = T.dim(1);
  for (int id : row_ids)
    require(id >= 0 && id < T.dim(0), "gather_rows: row index out of range");
  Array out({static_cast<int>(row_ids.size()), c});
  for (size_t i = 0; i < row_ids.size(); ++i)
    std::copy_n(T.data() + static_cast<size_t>(row_ids[i]) * c, c, out.data() + i * c);
  return t.record(std::move(out), t.requires_grad(table), [table, row_ids, c](Tape& t, int self) {
    const double* g = t.grad_of(self).data();
    double* d = t.grad_acc(table.id).data();
    for (size_t i = 0; i < row_ids.size(); ++i) {
      double* dr = d + static_cast<size_t>(row_ids[i]) * c;
      const double* gr = g + i * c;
      for (int j = 0; j < c; ++j) dr[j] += gr[j];
    }
  });
}

Var add_row_broadcast(Var mat, Var row) {
  Tape& t = tape_of(mat, row);
  const Array& M = t.value(mat);
  const Array& R = t.value(row);
  require(M.ndim() == 2, "add_row_broadcast: mat must be 2-D");
  require(R.numel() == M.dim(1), "add_row_broadcast: row length mismatch");
  const int r = M.dim(0), c = M.dim(1);
  Array out = M;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at2(i, j) += R.at(j);
  bool rg = t.requires_grad(mat) || t.requires_grad(row);
  return t.record(std::move(out), rg, [mat, row, r, c](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    if (t.requires_grad(mat)) {
      Array& d = t.grad_acc(mat.id);
      for (int i = 0; i < g.numel(); ++i) d.at(i) += g.at(i);
    }
    if (t.requires_grad(row)) {
      Array& d = t.grad_acc(row.id);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) d.at(j) += g.at2(i, j);
    }
  });
}

namespace {
const double kSqrt2OverPi = std::sqrt(2.0 / M_PI);
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  const Array& A = t.value(a);
  Array out = A;
  for (int i = 0; i < out.numel(); ++i) {
    const double x = A.at(i);
    const double u = kSqrt2OverPi * (x + 0.044715 * x * x * x);
    out.at(i) = 0.5 * x * (1.0 + std::tanh(u));
  }
  return t.record(std::move(out), t.requires_grad(a), [a](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    const Array& A = t.value(a);
    Array& d = t.grad_acc(a.id);
    for (int i = 0; i < g.numel(); ++i) {
      const double x = A.at(i);
      const double u = kSqrt2OverPi * (x + 0.044715 * x * x * x);
      const double th = std::tanh(u);
      const double du = kSqrt2OverPi * (1.0 + 3.0 * 0.044715 * x * x);
      d.at(i) += g.at(i) * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
    }
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  Array out = t.value(a);
  for (int i = 0; i < out.numel(); ++i) out.at(i) = 1.0 / (1.0 + std::exp(-out.at(i)));
  return t.record(std::move(out), t.requires_grad(a), [a](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    const Array& y = t.value_of(self);
    Array& d = t.grad_acc(a.id);
    for (int i = 0; i < g.numel(); ++i) {
      const double s = y.at(i);
      d.at(i) += g.at(i) * s * (1.0 - s);
    }
  });
}

Var tanh_op(Var a) {
  Tape& t = tape_of(a);
  Array out = t.value(a);
  for (int i = 0; i < out.numel(); ++i) out.at(i) = std::tanh(out.at(i));
  return t.record(std::move(out), t.requires_grad(a), [a](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    const Array& y = t.value_of(self);
    Array& d = t.grad_acc(a.id);
    for (int i = 0; i < g.numel(); ++i) d.at(i) += g.at(i) * (1.0 - y.at(i) * y.at(i));
  });
}

Var sum_all(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  const Array& A = t.value(a);
  for (int i = 0; i < A.numel(); ++i) s += A.at(i);
  return t.record(Array::scalar(s), t.requires_grad(a), [a](Tape& t, int self) {
    const double g = t.grad_of(self).at(0);
    Array& d = t.grad_acc(a.id);
    for (int i = 0; i < d.numel(); ++i) d.at(i) += g;
  });
}

Var mean_all(Var a) {
  Tape& t = tape_of(a);
  const int n = t.value(a).numel();
  return scalar_mul(sum_all(a), 1.0 / n);
}

namespace {

struct AxisSpan {
  int outer, extent, inner;
};

AxisSpan axis_span(const Array& a, int axis) {
  if (axis < 0 || axis >= a.ndim()) throw std::invalid_argument("softmax: invalid axis");
  int outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  return {outer, a.dim(axis), inner};
}

void softmax_fill(const Array& in, Array& out, const AxisSpan& s) {
  for (int o = 0; o < s.outer; ++o) {
    for (int in_ = 0; in_ < s.inner; ++in_) {
      const size_t base = (static_cast<size_t>(o) * s.extent) * s.inner + in_;
      double mx = in.at(static_cast<int>(base));
      for (int k = 1; k < s.extent; ++k)
        mx = std::max(mx, in.at(static_cast<int>(base + static_cast<size_t>(k) * s.inner)));
      double denom = 0.0;
      for (int k = 0; k < s.extent; ++k) {
        const size_t idx = base + static_cast<size_t>(k) * s.inner;
        const double e = std::exp(in.at(static_cast<int>(idx)) - mx);
        out.at(static_cast<int>(idx)) = e;
        denom += e;
      }
      for (int k = 0; k < s.extent; ++k) {
        const size_t idx = base + static_cast<size_t>(k) * s.inner;
        out.at(static_cast<int>(idx)) /= denom;
      }
    }
  }
}

}  // namespace

Array softmax(const Array& logits, int axis) {
  const AxisSpan s = axis_span(logits, axis);
  Array out(logits.shape());
  softmax_fill(logits, out, s);
  return out;
}

Var softmax(Var logits, int axis) {
  Tape& t = tape_of(logits);
  const Array& A = t.value(logits);
  const AxisSpan s = axis_span(A, axis);
  Array out(A.shape());
  softmax_fill(A, out, s);
  return t.record(std::move(out), t.requires_grad(logits), [logits, s](Tape& t, int self) {
    const Array& g = t.grad_of(self);
    const Array& p = t.value_of(self);
    Array& d = t.grad_acc(logits.id);
    for (int o = 0; o < s.outer; ++o) {
      for (int in_ = 0; in_ < s.inner; ++in_) {
        const size_t base = (static_cast<size_t>(o) * s.extent) * s.inner + in_;
        double dot = 0.0;
        for (int k = 0; k < s.extent; ++k) {
          const size_t idx = base + static_cast<size_t>(k) * s.inner;
          dot += g.at(static_cast<int>(idx)) * p.at(static_cast<int>(idx));
        }
        for (int k = 0; k < s.extent; ++k) {
          const size_t idx = base + static_cast<size_t>(k) * s.inner;
          d.at(static_cast<int>(idx)) += p.at(static_cast<int>(idx)) * (g.at(static_cast<int>(idx)) - dot);
        }
      }
    }
  });
}

namespace {

double log_sum_exp(const double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

}  // namespace

double cross_entropy(const Array& logits, int target, bool ignore) {
  if (logits.ndim() != 1 && !(logits.ndim() == 2 && logits.dim(0) == 1))
    throw std::invalid_argument("cross_entropy: logits must be a vector");
  const int v = logits.numel();
  if (target < 0 || target >= v) throw std::invalid_argument("cross_entropy: target index out of range");
  if (ignore) return 0.0;
  return log_sum_exp(logits.data(), v) - logits.at(target);
}

Var cross_entropy(Var logits, int target, bool ignore) {
  Tape& t = tape_of(logits);
  const double val = cross_entropy(t.value(logits), target, ignore);
  if (ignore) return t.constant_scalar(0.0);
  return t.record(Array::scalar(val), t.requires_grad(logits), [logits, target](Tape& t, int self) {
    const double g = t.grad_of(self).at(0);
    const Array& x = t.value(logits);
    const int v = x.numel();
    Array& d = t.grad_acc(logits.id);
    const double lse = log_sum_exp(x.data(), v);
    for (int i = 0; i < v; ++i) {
      const double p = std::exp(x.at(i) - lse);
      d.at(i) += g * (p - (i == target ? 1.0 : 0.0));
    }
  });
}

Var masked_mean_ce(Var logits2d, const std::vector<int>& targets, const std::vector<char>& mask) {
  Tape& t = tape_of(logits2d);
  const Array& X = t.value(logits2d);
  require(X.ndim() == 2, "masked_mean_ce: logits must be 2-D");
  const int rows = X.dim(0), v = X.dim(1);
  require(static_cast<int>(targets.size()) == rows && static_cast<int>(mask.size()) == rows,
          "masked_mean_ce: targets/mask length mismatch");
  int m = 0;
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (targets[r] < 0 || targets[r] >= v)
      throw std::invalid_argument("masked_mean_ce: target index out of range");
    if (!mask[r]) continue;
    ++m;
    const double* row = X.data() + static_cast<size_t>(r) * v;
    total += log_sum_exp(row, v) - row[targets[r]];
  }
  if (m == 0) return t.constant_scalar(0.0);
  const double val = total / m;
  return t.record(Array::scalar(val), t.requires_grad(logits2d),
                  [logits2d, targets, mask, rows, v, m](Tape& t, int self) {
    const double g = t.grad_of(self).at(0) / m;
    const Array& X = t.value(logits2d);
    Array& d = t.grad_acc(logits2d.id);
    for (int r = 0; r < rows; ++r) {
      if (!mask[r]) continue;
      const double* row = X.data() + static_cast<size_t>(r) * v;
      double* drow = d.data() + static_cast<size_t>(r) * v;
      const double lse = log_sum_exp(row, v);
      for (int i = 0; i < v; ++i) {
        const double p = std::exp(row[i] - lse);
        drow[i] += g * (p - (i == targets[r] ? 1.0 : 0.0));
      }
    }
  });
}

namespace {
constexpr double kKlEps = 1e-12;
}

double kl_divergence(const Array& p, const Array& q) {
  if (p.numel() != q.numel()) throw std::invalid_argument("kl_divergence: length mismatch");
  double s = 0.0;
  for (int i = 0; i < p.numel(); ++i) {
    const double pi = p.at(i);
    if (pi < 0.0 || q.at(i) < 0.0) throw std::invalid_argument("kl_divergence: negative entry");
    if (pi == 0.0) continue;
    s += pi * (std::log(pi) - std::log(std::max(q.at(i), kKlEps)));
  }
  return s;
}

Var kl_divergence(Var p, Var q) {
  Tape& t = tape_of(p, q);
  const double val = kl_divergence(t.value(p), t.value(q));
  bool rg = t.requires_grad(p) || t.requires_grad(q);
  return t.record(Array::scalar(val), rg, [p, q](Tape& t, int self) {
    const double g = t.grad_of(self).at(0);
    const Array& P = t.value(p);
    const Array& Q = t.value(q);
    if (t.requires_grad(p)) {
      Array& d = t.grad_acc(p.id);
      for (int i = 0; i < P.numel(); ++i) {
        const double pi = P.at(i);
        if (pi == 0.0) continue;  // zero-mass entries get zero gradient by convention
        d.at(i) += g * (std::log(pi) - std::log(std::max(Q.at(i), kKlEps)) + 1.0);
      }
    }
    if (t.requires_grad(q)) {
      Array& d = t.grad_acc(q.id);
      for (int i = 0; i < Q.numel(); ++i) {
        if (Q.at(i) <= kKlEps) continue;  // clamped region
        d.at(i) += g * (-P.at(i) / Q.at(i));
      }
    }
  });
}

Var masked_mean_kl_logits(Var a2d, Var b2d, const std::vector<char>& mask) {
  Tape& t = tape_of(a2d, b2d);
  const Array& A = t.value(a2d);
  const Array& B = t.value(b2d);
  require(A.ndim() == 2 && A.same_shape(B), "masked_mean_kl_logits: shape mismatch");
  const int rows = A.dim(0), v = A.dim(1);
  require(static_cast<int>(mask.size()) == rows, "masked_mean_kl_logits: mask length mismatch");
  int m = 0;
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++m;
    const double* ar = A.data() + static_cast<size_t>(r) * v;
    const double* br = B.data() + static_cast<size_t>(r) * v;
    const double lse_a = log_sum_exp(ar, v);
    const double lse_b = log_sum_exp(br, v);
    double kl = 0.0;
    for (int i = 0; i < v; ++i) {
      const double lp = ar[i] - lse_a;
      const double lq = br[i] - lse_b;
      kl += std::exp(lp) * (lp - lq);
    }
    total += kl;
  }
  if (m == 0) return t.constant_scalar(0.0);
  bool rg = t.requires_grad(a2d) || t.requires_grad(b2d);
  return t.record(Array::scalar(total / m), rg, [a2d, b2d, mask, rows, v, m](Tape& t, int self) {
    const double g = t.grad_of(self).at(0) / m;
    const Array& A = t.value(a2d);
    const Array& B = t.value(b2d);
    const bool need_a = t.requires_grad(a2d);
    const bool need_b = t.requires_grad(b2d);
    std::vector<double> p(static_cast<size_t>(v)), lpq(static_cast<size_t>(v));
    for (int r = 0; r < rows; ++r) {
      if (!mask[r]) continue;
      const double* ar = A.data() + static_cast<size_t>(r) * v;
      const double* br = B.data() + static_cast<size_t>(r) * v;
      const double lse_a = log_sum_exp(ar, v);
      const double lse_b = log_sum_exp(br, v);
      double kl = 0.0;
      for (int i = 0; i < v; ++i) {
        p[static_cast<size_t>(i)] = std::exp(ar[i] - lse_a);
        lpq[static_cast<size_t>(i)] = (ar[i] - lse_a) - (br[i] - lse_b);
        kl += p[static_cast<size_t>(i)] * lpq[static_cast<size_t>(i)];
      }
      if (need_a) {
        double* da = t.grad_acc(a2d.id).data() + static_cast<size_t>(r) * v;
        for (int i = 0; i < v; ++i) da[i] += g * p[static_cast<size_t>(i)] * (lpq[static_cast<size_t>(i)] - kl);
      }
      if (need_b) {
        double* db = t.grad_acc(b2d.id).data() + static_cast<size_t>(r) * v;
        for (int i = 0; i < v; ++i) {
          const double q = std::exp(br[i] - lse_b);
          db[i] += g * (q - p[static_cast<size_t>(i)]);
        }
      }
    }
  });
}

Var layer_norm(Var x2d, Var gain, Var bias) {
  Tape& t = tape_of(x2d, gain);
  require(bias.tape == x2d.tape, "layer_norm: vars on different tapes");
  const Array& X = t.value(x2d);
  require(X.ndim() == 2, "layer_norm: input must be 2-D");
  const int rows = X.dim(0), c = X.dim(1);
  require(t.value(gain).numel() == c && t.value(bias).numel() == c, "layer_norm: gain/bias length mismatch");
  constexpr double kEps = 1e-5;
  Array out({rows, c});
  const Array& G = t.value(gain);
  const Array& Bi = t.value(bias);
  for (int r = 0; r < rows; ++r) {
    const double* xr = X.data() + static_cast<size_t>(r) * c;
    double* orow = out.data() + static_cast<size_t>(r) * c;
    double mean = 0.0;
    for (int i = 0; i < c; ++i) mean += xr[i];
    mean /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + kEps);
    for (int i = 0; i < c; ++i) orow[i] = G.at(i) * ((xr[i] - mean) * inv) + Bi.at(i);
  }
  bool rg = t.requires_grad(x2d) || t.requires_grad(gain) || t.requires_grad(bias);
  return t.record(std::move(out), rg, [x2d, gain, bias, rows, c](Tape& t, int self) {
    constexpr double kEps = 1e-5;
    const Array& g = t.grad_of(self);
    const Array& X = t.value(x2d);
    const Array& G = t.value(gain);
    const bool need_x = t.requires_grad(x2d);
    const bool need_g = t.requires_grad(gain);
    const bool need_b = t.requires_grad(bias);
    std::vector<double> xhat(static_cast<size_t>(c));
    for (int r = 0; r < rows; ++r) {
      const double* xr = X.data() + static_cast<size_t>(r) * c;
      const double* gr = g.data() + static_cast<size_t>(r) * c;
      double mean = 0.0;
      for (int i = 0; i < c; ++i) mean += xr[i];
      mean /= c;
      double var = 0.0;
      for (int i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
      var /= c;
      const double inv = 1.0 / std::sqrt(var + kEps);
      for (int i = 0; i < c; ++i) xhat[static_cast<size_t>(i)] = (xr[i] - mean) * inv;
      if (need_g) {
        Array& dg = t.grad_acc(gain.id);
        for (int i = 0; i < c; ++i) dg.at(i) += gr[i] * xhat[static_cast<size_t>(i)];
      }
      if (need_b) {
        Array& db = t.grad_acc(bias.id);
        for (int i = 0; i < c; ++i) db.at(i) += gr[i];
      }
      if (need_x) {
        double* dx = t.grad_acc(x2d.id).data() + static_cast<size_t>(r) * c;
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int i = 0; i < c; ++i) {
          const double dy = gr[i] * G.at(i);
          sum_dy += dy;
          sum_dy_xhat += dy * xhat[static_cast<size_t>(i)];
        }
        for (int i = 0; i < c; ++i) {
          const double dy = gr[i] * G.at(i);
          dx[i] += inv * (dy - sum_dy / c - xhat[static_cast<size_t>(i)] * sum_dy_xhat / c);
        }
      }
    }
  });
}

double apply_limit(double x, LimitKind kind) {
  switch (kind) {
    case LimitKind::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case LimitKind::Tanh: return std::tanh(x);
    case LimitKind::None: return x;
  }
  throw std::invalid_argument("apply_limit: unknown kind");
}

Var apply_limit(Var x, LimitKind kind) {
  switch (kind) {
    case LimitKind::Sigmoid: return sigmoid(x);
    case LimitKind::Tanh: return tanh_op(x);
    case LimitKind::None: return x;
  }
  throw std::invalid_argument("apply_limit: unknown kind");
}

}  // namespace modabs
