// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#include "besa/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <utility>

namespace besa {

namespace {

// Fixed four-lane dot product. The lane assignment is part of the code, so
// results are bit-identical across runs; the compiler may not reassociate.
double dot4(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((s0 + s1) + (s2 + s3)) + tail;
}

void axpy(double* out, const double* a, double c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] += c * a[i];
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void require_initialized(const Tensor& t, const char* op) {
  if (t.shape().empty())
    throw UsageError(std::string(op) + ": uninitialized tensor operand");
}

void require_2d(const Tensor& t, const char* op) {
  require_initialized(t, op);
  if (t.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " + t.shape_str());
}

}  // namespace

// --- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  if (shape.empty()) throw UsageError("tensor shape must have at least one dimension");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(shape_numel(t.shape_), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (double& x : *t.data_) x = value;
  return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values) {
  if (shape.empty()) throw UsageError("tensor shape must have at least one dimension");
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + Tensor::zeros(shape).shape_str());
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

std::size_t Tensor::numel() const { return data_ ? data_->size() : 0; }

double Tensor::item() const {
  if (!is_scalar()) throw UsageError("item() on non-scalar tensor " + shape_str());
  return (*data_)[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on && !grad_) grad_ = std::make_shared<std::vector<double>>(numel(), 0.0);
  if (!on) grad_.reset();
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (!grad_) throw UsageError("grad() on a tensor without requires_grad");
  return *grad_;
}

std::vector<double>& Tensor::mutable_grad() {
  if (!grad_) throw UsageError("mutable_grad() on a tensor without requires_grad");
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_)
    for (double& g : *grad_) g = 0.0;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << "x";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

// --- Tape -------------------------------------------------------------------

void Tape::record(Tensor& out, std::function<void()> backward_fn) {
  out.tape_ = this;
  out.tape_generation_ = generation_;
  out.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.is_scalar())
    throw UsageError("backward: loss must be a scalar, got " + loss.shape_str());
  if (loss.tape_ != this || loss.node_ < 0)
    throw UsageError("backward: loss is not recorded on this tape");
  if (loss.tape_generation_ != generation_)
    throw UsageError("backward: tape already consumed; re-record the forward pass");
  (*loss.grad_)[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  clear();
}

void Tape::clear() {
  nodes_.clear();
  ++generation_;
}

// --- Operations ---------------------------------------------------------------
//
// Backward closures capture shared ownership of parent/output buffers by
// copying the tensors themselves (cheap shallow copies), keeping everything
// alive for the duration of the tape.

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw ShapeError("matmul: inner dimensions disagree: " + a.shape_str() + " vs " +
                     b.shape_str());
  Tensor out = Tensor::zeros({m, n});
  {
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* O = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) axpy(O + i * n, B + l * n, A[i * k + l], n);
  }
  if (a.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, cb = b, co = out;
    tape.record(out, [ca, cb, co, m, k, n]() {
      const double* G = co.grad().data();
      if (ca.requires_grad()) {
        double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
        const double* B = cb.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t l = 0; l < k; ++l) dA[i * k + l] += dot4(G + i * n, B + l * n, n);
      }
      if (cb.requires_grad()) {
        double* dB = const_cast<Tensor&>(cb).mutable_grad().data();
        const double* A = ca.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t l = 0; l < k; ++l) axpy(dB + l * n, G + i * n, A[i * k + l], n);
      }
    });
  }
  return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w) {
  require_2d(x, "linear");
  require_2d(w, "linear");
  const std::size_t s = x.shape()[0], in = x.shape()[1];
  const std::size_t out_f = w.shape()[0], in2 = w.shape()[1];
  if (in != in2)
    throw ShapeError("linear: input width disagrees with weight: " + x.shape_str() + " vs " +
                     w.shape_str());
  Tensor out = Tensor::zeros({s, out_f});
  {
    const double* X = x.data().data();
    const double* W = w.data().data();
    double* O = out.mutable_data().data();
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t o = 0; o < out_f; ++o) O[r * out_f + o] = dot4(X + r * in, W + o * in, in);
  }
  if (x.requires_grad() || w.requires_grad()) {
    out.set_requires_grad(true);
    Tensor cx = x, cw = w, co = out;
    tape.record(out, [cx, cw, co, s, in, out_f]() {
      const double* G = co.grad().data();
      if (cx.requires_grad()) {
        double* dX = const_cast<Tensor&>(cx).mutable_grad().data();
        const double* W = cw.data().data();
        for (std::size_t r = 0; r < s; ++r)
          for (std::size_t o = 0; o < out_f; ++o)
            axpy(dX + r * in, W + o * in, G[r * out_f + o], in);
      }
      if (cw.requires_grad()) {
        double* dW = const_cast<Tensor&>(cw).mutable_grad().data();
        const double* X = cx.data().data();
        for (std::size_t r = 0; r < s; ++r)
          for (std::size_t o = 0; o < out_f; ++o)
            axpy(dW + o * in, X + r * in, G[r * out_f + o], in);
      }
    });
  }
  return out;
}

namespace {

enum class EwKind { Add, Sub, Mul };

Tensor elementwise_binary(Tape& tape, const Tensor& a, const Tensor& b, EwKind kind,
                          const char* name) {
  require_initialized(a, name);
  require_initialized(b, name);
  const bool a_scalar = a.is_scalar(), b_scalar = b.is_scalar();
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    throw ShapeError(std::string(name) + ": incompatible shapes " + a.shape_str() + " vs " +
                     b.shape_str());
  const Tensor& shaped = (a_scalar && !b_scalar) ? b : a;
  const std::size_t n = shaped.numel();
  Tensor out = Tensor::zeros(shaped.shape());
  {
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* O = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) {
      const double av = a_scalar ? A[0] : A[i];
      const double bv = b_scalar ? B[0] : B[i];
      O[i] = kind == EwKind::Add ? av + bv : kind == EwKind::Sub ? av - bv : av * bv;
    }
  }
  if (a.requires_grad() || b.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, cb = b, co = out;
    tape.record(out, [ca, cb, co, n, a_scalar, b_scalar, kind]() {
      const double* G = co.grad().data();
      if (ca.requires_grad()) {
        double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
        const double* B = cb.data().data();
        for (std::size_t i = 0; i < n; ++i) {
          double g = G[i];
          if (kind == EwKind::Mul) g *= b_scalar ? B[0] : B[i];
          dA[a_scalar ? 0 : i] += g;
        }
      }
      if (cb.requires_grad()) {
        double* dB = const_cast<Tensor&>(cb).mutable_grad().data();
        const double* A = ca.data().data();
        for (std::size_t i = 0; i < n; ++i) {
          double g = G[i];
          if (kind == EwKind::Sub) g = -g;
          if (kind == EwKind::Mul) g = G[i] * (a_scalar ? A[0] : A[i]);
          dB[b_scalar ? 0 : i] += g;
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_binary(tape, a, b, EwKind::Add, "add");
}
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_binary(tape, a, b, EwKind::Sub, "sub");
}
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_binary(tape, a, b, EwKind::Mul, "mul");
}

Tensor silu(Tape& tape, const Tensor& a) {
  require_initialized(a, "silu");
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* A = a.data().data();
    double* O = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) O[i] = A[i] * sigmoid(A[i]);
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, co = out;
    tape.record(out, [ca, co, n]() {
      const double* G = co.grad().data();
      const double* A = ca.data().data();
      double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
      for (std::size_t i = 0; i < n; ++i) {
        const double s = sigmoid(A[i]);
        dA[i] += G[i] * (s + A[i] * s * (1.0 - s));
      }
    });
  }
  return out;
}

Tensor square(Tape& tape, const Tensor& a) {
  require_initialized(a, "square");
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* A = a.data().data();
    double* O = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) O[i] = A[i] * A[i];
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, co = out;
    tape.record(out, [ca, co, n]() {
      const double* G = co.grad().data();
      const double* A = ca.data().data();
      double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
      for (std::size_t i = 0; i < n; ++i) dA[i] += 2.0 * A[i] * G[i];
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
  require_initialized(a, "scale");
  const std::size_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* A = a.data().data();
    double* O = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) O[i] = c * A[i];
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, co = out;
    tape.record(out, [ca, co, n, c]() {
      const double* G = co.grad().data();
      double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
      for (std::size_t i = 0; i < n; ++i) dA[i] += c * G[i];
    });
  }
  return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& a) {
  require_2d(a, "softmax_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (n < 1) throw ShapeError("softmax_rows: empty rows");
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* A = a.data().data();
    double* O = out.mutable_data().data();
    for (std::size_t r = 0; r < m; ++r) {
      const double* row = A + r * n;
      double mx = row[0];
      for (std::size_t j = 0; j < n; ++j) {
        if (!std::isfinite(row[j]))
          throw NumericError("softmax_rows: non-finite input at row " + std::to_string(r));
        if (row[j] > mx) mx = row[j];
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        O[r * n + j] = std::exp(row[j] - mx);
        sum += O[r * n + j];
      }
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < n; ++j) O[r * n + j] *= inv;
    }
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, co = out;
    tape.record(out, [ca, co, m, n]() {
      const double* G = co.grad().data();
      const double* Y = co.data().data();
      double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
      for (std::size_t r = 0; r < m; ++r) {
        const double gy = dot4(G + r * n, Y + r * n, n);
        for (std::size_t j = 0; j < n; ++j)
          dA[r * n + j] += Y[r * n + j] * (G[r * n + j] - gy);
      }
    });
  }
  return out;
}

Tensor rms_norm(Tape& tape, const Tensor& a, const Tensor& gain) {
  require_2d(a, "rms_norm");
  require_initialized(gain, "rms_norm");
  const std::size_t s = a.shape()[0], d = a.shape()[1];
  if (gain.numel() != d)
    throw ShapeError("rms_norm: gain length " + gain.shape_str() + " does not match width " +
                     std::to_string(d));
  constexpr double kEps = 1e-6;
  Tensor out = Tensor::zeros(a.shape());
  std::vector<double> inv_rms(s);
  {
    const double* A = a.data().data();
    const double* W = gain.data().data();
    double* O = out.mutable_data().data();
    for (std::size_t r = 0; r < s; ++r) {
      const double* row = A + r * d;
      const double ms = dot4(row, row, d) / static_cast<double>(d);
      inv_rms[r] = 1.0 / std::sqrt(ms + kEps);
      for (std::size_t j = 0; j < d; ++j) O[r * d + j] = row[j] * inv_rms[r] * W[j];
    }
  }
  if (a.requires_grad() || gain.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, cg = gain, co = out;
    tape.record(out, [ca, cg, co, s, d, inv_rms = std::move(inv_rms)]() {
      const double* G = co.grad().data();
      const double* A = ca.data().data();
      const double* W = cg.data().data();
      for (std::size_t r = 0; r < s; ++r) {
        const double ir = inv_rms[r];
        if (ca.requires_grad()) {
          double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
          double proj = 0.0;
          for (std::size_t j = 0; j < d; ++j) proj += G[r * d + j] * W[j] * A[r * d + j];
          const double coeff = proj * ir * ir * ir / static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j)
            dA[r * d + j] += G[r * d + j] * W[j] * ir - A[r * d + j] * coeff;
        }
        if (cg.requires_grad()) {
          double* dW = const_cast<Tensor&>(cg).mutable_grad().data();
          for (std::size_t j = 0; j < d; ++j) dW[j] += G[r * d + j] * A[r * d + j] * ir;
        }
      }
    });
  }
  return out;
}

Tensor frobenius_sq(Tape& tape, const Tensor& a) {
  require_initialized(a, "frobenius_sq");
  const std::size_t n = a.numel();
  const double* A = a.data().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += A[i] * A[i];
  Tensor out = Tensor::scalar(acc);
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, co = out;
    tape.record(out, [ca, co, n]() {
      const double g = co.grad()[0];
      const double* A = ca.data().data();
      double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
      for (std::size_t i = 0; i < n; ++i) dA[i] += 2.0 * A[i] * g;
    });
  }
  return out;
}

Tensor sum_all(Tape& tape, const Tensor& a) {
  require_initialized(a, "sum_all");
  const std::size_t n = a.numel();
  const double* A = a.data().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += A[i];
  Tensor out = Tensor::scalar(acc);
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, co = out;
    tape.record(out, [ca, co, n]() {
      const double g = co.grad()[0];
      double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
      for (std::size_t i = 0; i < n; ++i) dA[i] += g;
    });
  }
  return out;
}

Tensor transpose(Tape& tape, const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  {
    const double* A = a.data().data();
    double* O = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) O[j * m + i] = A[i * n + j];
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, co = out;
    tape.record(out, [ca, co, m, n]() {
      const double* G = co.grad().data();
      double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dA[i * n + j] += G[j * m + i];
    });
  }
  return out;
}

Tensor slice_cols(Tape& tape, const Tensor& a, std::size_t c0, std::size_t c1) {
  require_2d(a, "slice_cols");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (c0 >= c1 || c1 > n)
    throw UsageError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                     ") invalid for width " + std::to_string(n));
  const std::size_t w = c1 - c0;
  Tensor out = Tensor::zeros({m, w});
  {
    const double* A = a.data().data();
    double* O = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) O[i * w + j] = A[i * n + c0 + j];
  }
  if (a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ca = a, co = out;
    tape.record(out, [ca, co, m, n, w, c0]() {
      const double* G = co.grad().data();
      double* dA = const_cast<Tensor&>(ca).mutable_grad().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) dA[i * n + c0 + j] += G[i * w + j];
    });
  }
  return out;
}

Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no parts");
  const std::size_t m = parts[0].shape()[0];
  std::size_t total = 0;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.shape()[0] != m)
      throw ShapeError("concat_cols: row count mismatch: " + parts[0].shape_str() + " vs " +
                       p.shape_str());
    total += p.shape()[1];
    any_grad = any_grad || p.requires_grad();
  }
  Tensor out = Tensor::zeros({m, total});
  {
    double* O = out.mutable_data().data();
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      const std::size_t w = p.shape()[1];
      const double* A = p.data().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) O[i * total + off + j] = A[i * w + j];
      off += w;
    }
  }
  if (any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> cp = parts;
    Tensor co = out;
    tape.record(out, [cp, co, m, total]() {
      const double* G = co.grad().data();
      std::size_t off = 0;
      for (const Tensor& p : cp) {
        const std::size_t w = p.shape()[1];
        if (p.requires_grad()) {
          double* dP = const_cast<Tensor&>(p).mutable_grad().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) dP[i * w + j] += G[i * total + off + j];
        }
        off += w;
      }
    });
  }
  return out;
}

}  // namespace besa
