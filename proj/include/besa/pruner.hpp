// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#ifndef BESA_PRUNER_HPP
#define BESA_PRUNER_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "besa/importance.hpp"
#include "besa/model.hpp"
#include "besa/quant.hpp"
#include "besa/sparsity.hpp"
#include "besa/tensor.hpp"

namespace besa {

/// What one reconstruction problem spans: a single projection, one module
/// (attention or MLP), one block, or two consecutive blocks.
enum class Scope { kLayer, kAttnMlp, kBlock, kTwoBlocks };
Scope scope_from_string(const std::string& s);
const char* to_string(Scope s);

/// How the sparsity penalty reaches the coefficients: through the
/// straight-through zero count (literal), or through the differentiable
/// expected sparsity α (surrogate, for ablation).
enum class PenaltyMode { kSte, kSurrogate };
PenaltyMode penalty_mode_from_string(const std::string& s);
const char* to_string(PenaltyMode m);

/// Single-stream: dense targets are computed from the propagated pruned
/// stream. Two-stream: a separate dense stream feeds the targets.
enum class StreamMode { kSingle, kTwoStream };
StreamMode stream_mode_from_string(const std::string& s);
const char* to_string(StreamMode m);

struct PruneConfig {
  double target_sparsity = 0.5;
  double lambda = 1.0;
  double learning_rate = 0.01;
  std::size_t epochs = 1;
  std::size_t calib_sequences = 128;
  std::size_t calib_seq_len = 2048;
  std::size_t batch_sequences = 8;
  Granularity granularity = Granularity::kPerRow;
  ImportanceMetric metric = ImportanceMetric::kWanda;
  Scope scope = Scope::kBlock;
  std::uint64_t seed = 0;
  double sparsity_step = 0.01;
  PenaltyMode penalty_mode = PenaltyMode::kSte;
  StreamMode stream_mode = StreamMode::kSingle;
  double init_concentration = 6.0;
  double conv_sparsity_tol = 0.002;
  double conv_loss_rel_change = 1e-4;
  std::size_t conv_window = 20;
  bool joint_quant = false;
  std::size_t quant_bits = 4;

  void validate() const;
  std::size_t steps_budget(std::size_t n_sequences) const;
};

struct CurvePoint {
  std::size_t step = 0;
  double recon = 0.0;
  double penalty = 0.0;
  double achieved = 0.0;
};

struct BlockLossReport {
  double recon_loss = 0.0;
  double sparsity_penalty = 0.0;
  double achieved = 0.0;
  std::array<double, kNumPrunableLayers> layer_achieved{};
  std::size_t steps = 0;
  bool converged = false;
  double wall_ms = 0.0;  // informational; kept out of deterministic artifacts
};

/// Eq-style block loss: ‖dense − pruned‖²_F normalized by ‖dense‖²_F, plus
/// λ × the squared sparsity gap of the masks.
struct BlockLoss {
  double total = 0.0;
  double recon = 0.0;
  double penalty = 0.0;
};

BlockLoss block_loss(const std::vector<Tensor>& dense_out, const std::vector<Tensor>& pruned_out,
                     const std::vector<const PruneMask*>& masks, double target, double lambda,
                     std::size_t total_params);

/// Normalized reconstruction error of a mask set over an input set, against
/// precomputed dense targets.
double reconstruction_error(const BlockConfig& bc, const BlockWeights& w,
                            const std::vector<Tensor>& inputs, const std::vector<Tensor>& targets,
                            const std::array<PruneMask, kNumPrunableLayers>& masks,
                            const std::array<Tensor, kNumPrunableLayers>* weights = nullptr);

struct BlockPruneResult {
  std::array<PruneMask, kNumPrunableLayers> masks;
  BlockLossReport report;
  std::vector<CurvePoint> curve;
  std::vector<QuantParams> quant;  // one per layer when joint_quant is set
};

/// Optimizes the mask coefficients (and clip strengths, when joint) of one
/// block against its own inputs. Importance is sorted once, before the loop.
BlockPruneResult prune_block(const BlockConfig& bc, const BlockWeights& w,
                             const std::vector<Tensor>& inputs, const PruneConfig& cfg);

struct PruneResult {
  std::vector<std::array<PruneMask, kNumPrunableLayers>> masks;
  std::vector<BlockLossReport> reports;
  std::vector<std::vector<CurvePoint>> curves;
  std::vector<std::vector<QuantParams>> quant;
  double global_achieved = 0.0;
};

/// Block-sequential pruning of the whole checkpoint: per block, compute the
/// dense-weight target from the propagated stream, sort importance, optimize
/// masks, then propagate the pruned stream.
PruneResult prune_model(const ModelCheckpoint& m,
                        const std::vector<std::vector<std::uint32_t>>& calib,
                        const PruneConfig& cfg);

/// Uniform-rate top-K baseline for one block: every row of every layer drops
/// its ⌊in·α̂⌋ least-important weights. No learning.
std::array<PruneMask, kNumPrunableLayers> uniform_baseline_block(const BlockWeights& w,
                                                                 const ActivationNorms& norms,
                                                                 double alpha_hat,
                                                                 ImportanceMetric metric);

/// Model-wide uniform baseline, propagating the pruned stream block by block.
std::vector<std::array<PruneMask, kNumPrunableLayers>> uniform_baseline(
    const ModelCheckpoint& m, const std::vector<std::vector<std::uint32_t>>& calib,
    double alpha_hat, ImportanceMetric metric);

}  // namespace besa

#endif  // BESA_PRUNER_HPP
