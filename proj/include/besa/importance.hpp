// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#ifndef BESA_IMPORTANCE_HPP
#define BESA_IMPORTANCE_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "besa/model.hpp"
#include "besa/tensor.hpp"

namespace besa {

enum class ImportanceMetric { kWanda, kMagnitude };

ImportanceMetric importance_metric_from_string(const std::string& s);
const char* to_string(ImportanceMetric m);

/// Per-layer ℓ2 norms of each input feature, taken over every calibration
/// token seen at that layer's input. Accumulated as sums of squares and
/// square-rooted once at finalize.
struct ActivationNorms {
  std::array<std::vector<double>, kNumPrunableLayers> per_layer;
  std::size_t token_count = 0;
};

class ActivationNormAccumulator {
public:
  explicit ActivationNormAccumulator(const BlockConfig& cfg);
  /// Folds the layer inputs of one block forward into the running sums.
  void accumulate(const BlockTrace& trace);
  ActivationNorms finalize() const;

private:
  std::array<std::vector<double>, kNumPrunableLayers> sumsq_;
  std::size_t tokens_ = 0;
};

/// Dense forwards of `block_inputs` through block `block_index` of the model,
/// with the block's own weights, collecting input-feature norms for every
/// prunable layer. The inputs are whatever stream the caller is propagating.
ActivationNorms collect_activation_norms(const ModelCheckpoint& m, std::size_t block_index,
                                         const std::vector<Tensor>& block_inputs);

/// δ[o,i] = |W[o,i]| · norms[i] (wanda) or |W[o,i]| (magnitude).
Tensor compute_importance(const Tensor& w, const std::vector<double>& norms,
                          ImportanceMetric metric);

/// Ascending per-row permutation of input indices by importance. perm[o*in + r]
/// holds the original column index at rank r; ties keep ascending column
/// order. Immutable once built: a pruning run sorts each block exactly once.
struct LayerRanking {
  std::size_t out = 0, in = 0;
  std::vector<std::uint32_t> perm;

  std::uint32_t column_at(std::size_t row, std::size_t rank) const {
    return perm[row * in + rank];
  }
};

LayerRanking sort_rows(const Tensor& delta);

struct ImportanceRanking {
  std::array<LayerRanking, kNumPrunableLayers> per_layer;
  ImportanceMetric metric = ImportanceMetric::kWanda;
};

/// Ranks all seven layers of a block from weights and collected norms.
ImportanceRanking rank_block(const BlockWeights& w, const ActivationNorms& norms,
                             ImportanceMetric metric);

// Debug export: 8-byte header (out, in as 32-bit LE) then row-major 32-bit LE
// rank indices.
void write_ranking(const std::string& path, const LayerRanking& ranking);
LayerRanking read_ranking(const std::string& path);

}  // namespace besa

#endif  // BESA_IMPORTANCE_HPP
