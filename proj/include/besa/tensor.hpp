// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#ifndef BESA_TENSOR_HPP
#define BESA_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "besa/errors.hpp"

namespace besa {

class Tape;

/// Dense row-major tensor of 64-bit floats with optional participation in
/// reverse-mode differentiation. Copies are shallow: the value buffer is
/// shared and treated as immutable after construction; only the gradient
/// buffer is written to after the fact.
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values);
  static Tensor scalar(double value);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t numel() const;
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }
  bool is_scalar() const { return numel() == 1; }

  const std::vector<double>& data() const { return *data_; }
  /// Mutable access for construction only; never mutate a tensor that has
  /// already been consumed by an op.
  std::vector<double>& mutable_data() { return *data_; }

  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double item() const;

  Tensor& set_requires_grad(bool on);
  bool requires_grad() const { return requires_grad_; }

  /// Gradient buffer; UsageError when requires_grad is off.
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();
  void zero_grad();

  /// Handle of the op node that produced this tensor, -1 for leaves.
  int tape_node() const { return node_; }

  std::string shape_str() const;

private:
  friend class Tape;

  std::vector<std::size_t> shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  bool requires_grad_ = false;

  const Tape* tape_ = nullptr;
  std::uint64_t tape_generation_ = 0;
  int node_ = -1;
};

/// Append-only record of differentiable operations. Each node stores a
/// backward rule over the gradient buffers of its parents; nodes are replayed
/// exactly once, in reverse recording order, by backward(). Single-writer:
/// one training run per tape.
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Propagates d(loss)/d(x) into every requires_grad tensor recorded below
  /// the scalar loss, then clears the tape. Gradients accumulate (+=); call
  /// zero_grad on leaves between runs.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t generation() const { return generation_; }
  void clear();

  /// Marks an op output as recorded and appends its backward rule.
  /// Used by the op implementations; not part of the public surface.
  void record(Tensor& out, std::function<void()> backward_fn);

private:
  std::vector<std::function<void()>> nodes_;
  std::uint64_t generation_ = 1;
};

// --- Differentiable operations -------------------------------------------
//
// All ops are pure: inputs are never modified, the result is freshly
// allocated. When any input has requires_grad set, the result does too and a
// backward rule is appended to the tape. Reductions run in a fixed
// sequential order, so repeated runs are bit-identical.

/// General matrix product a[m×k] · b[k×n].
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

/// x[s×in] · wᵀ for a weight stored [out×in]; the layout used by every
/// projection layer, where both operands are traversed row-contiguously.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w);

// Elementwise; shapes must match exactly or one operand must be scalar.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor silu(Tape& tape, const Tensor& a);
Tensor square(Tape& tape, const Tensor& a);

/// y = c · a for a plain constant c.
Tensor scale(Tape& tape, const Tensor& a, double c);

/// Row-wise softmax with max subtraction; rejects non-finite inputs.
Tensor softmax_rows(Tape& tape, const Tensor& a);

/// Row-wise RMS normalization (epsilon 1e-6) followed by a per-column gain.
Tensor rms_norm(Tape& tape, const Tensor& a, const Tensor& gain);

/// Sum of squared entries, as a scalar tensor.
Tensor frobenius_sq(Tape& tape, const Tensor& a);

/// Sum of all entries, as a scalar tensor.
Tensor sum_all(Tape& tape, const Tensor& a);

Tensor transpose(Tape& tape, const Tensor& a);

/// Columns [c0, c1) of a 2-d tensor.
Tensor slice_cols(Tape& tape, const Tensor& a, std::size_t c0, std::size_t c1);

/// Horizontal concatenation of 2-d tensors with equal row counts.
Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts);

}  // namespace besa

#endif  // BESA_TENSOR_HPP
