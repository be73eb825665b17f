// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#ifndef BESA_SPARSITY_HPP
#define BESA_SPARSITY_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "besa/importance.hpp"
#include "besa/model.hpp"
#include "besa/tensor.hpp"

namespace besa {

/// Candidate pruning rates p_d = d/D for d = 1..D, so p_D = 1 exactly and
/// the implicit boundary p_0 = 0. Bin boundaries are computed in integer
/// arithmetic from d/D, keeping them exact for every layer width.
struct CandidateRates {
  double step = 0.01;
  std::size_t count = 100;  // D
  std::vector<double> rates;

  static CandidateRates from_step(double step);
  double rate(std::size_t d) const { return rates[d - 1]; }  // 1-based d
  void validate() const;
};

enum class Granularity { kPerRow, kPerLayer };
Granularity granularity_from_string(const std::string& s);
const char* to_string(Granularity g);

/// Learnable simplex coefficients over the candidate rates for one layer.
/// Each allocation unit (an output row, or the whole layer) owns D-1 free
/// logits; β is their softmax extended with a structurally pinned β_D = 0,
/// so the top-importance bin can never be pruned.
struct SparsityParams {
  Granularity granularity = Granularity::kPerRow;
  std::size_t units = 1;
  std::size_t d = 100;          // D
  std::vector<double> logits;   // units x (D-1)

  /// Logits start as a bump of size `concentration` on the candidate rate
  /// closest to `target_alpha`, zero elsewhere: the allocation begins at the
  /// target and learning redistributes it.
  static SparsityParams init(Granularity g, std::size_t out_features, const CandidateRates& rates,
                             double target_alpha, double concentration);

  /// β of one unit: softmax over the D-1 free logits plus the pinned zero.
  std::vector<double> beta(std::size_t unit) const;
  double* logits_of(std::size_t unit) { return logits.data() + unit * (d - 1); }
  const double* logits_of(std::size_t unit) const { return logits.data() + unit * (d - 1); }
};

/// α = Σ β_d p_d. `beta` must be a simplex vector of length D with β_D = 0.
double effective_sparsity(const std::vector<double>& beta, const CandidateRates& rates);

/// Rank-space bin boundaries for one layer width: bounds[k] = ⌊in·p_k⌋ with
/// p_0 = 0 and p_D = 1, half-open bins [bounds[k], bounds[k+1]). Bins that
/// collapse to zero width (small layers) merge benignly.
struct BinLayout {
  std::size_t in = 0;
  std::vector<std::size_t> bounds;  // size D+1

  static BinLayout make(std::size_t in, const CandidateRates& rates);
  std::size_t bin_of_rank(std::size_t rank) const;
};

/// P(rank) = Σ_{d>k} β_d for the bin k containing the rank; non-increasing
/// in rank and exactly 0 on the top bin.
double element_prune_prob(const std::vector<double>& beta, const CandidateRates& rates,
                          std::size_t rank, std::size_t in_features);

/// Bit-packed binary mask (1 = keep). Within each row the pruned positions
/// are a prefix of the importance rank order.
struct PruneMask {
  std::string layer_name;
  std::size_t out = 0, in = 0;
  std::vector<std::uint64_t> words;
  std::size_t zero_count = 0;

  static PruneMask all_ones(std::string name, std::size_t out, std::size_t in);
  bool get(std::size_t o, std::size_t j) const {
    const std::size_t idx = o * in + j;
    return (words[idx >> 6] >> (idx & 63)) & 1u;
  }
  void set(std::size_t o, std::size_t j, bool keep);
  std::size_t numel() const { return out * in; }
  double achieved_sparsity() const {
    return numel() == 0 ? 0.0 : static_cast<double>(zero_count) / static_cast<double>(numel());
  }
  /// Recounts zero bits; used after bulk bit edits.
  void recount();
};

/// Dense 0/1 tensor view of a mask, for use as a block_forward override.
Tensor mask_to_tensor(const PruneMask& mask);

/// β and α snapshot taken when a mask was generated; required by the
/// straight-through backward pass.
struct MaskForwardRecord {
  bool valid = false;
  std::size_t units = 0, d = 0;
  std::vector<double> beta;   // units x D
  std::vector<double> alpha;  // per unit
};

/// Generates the layer mask from the current coefficients: in rank space,
/// bit r is cleared iff P(r) ≥ α for its unit, then bits scatter back to
/// original columns through the ranking. The pruned set of every row is a
/// rank prefix by construction.
PruneMask generate_mask(const SparsityParams& params, const CandidateRates& rates,
                        const LayerRanking& ranking, std::string layer_name,
                        MaskForwardRecord* record = nullptr);

struct MaskBackwardResult {
  std::vector<double> grad_logits;  // units x (D-1)
  std::vector<double> grad_beta;    // units x D; pinned β_D slot always 0
};

/// Straight-through gradient: ∂M/∂P := -1 everywhere, α treated as
/// stop-gradient inside the threshold, so ∂L/∂β_d = Σ over ranks in bins
/// below d of -(upstream bit grad), chained through the softmax.
/// `bit_grads` is d(loss)/d(mask bit) in original column coordinates.
MaskBackwardResult mask_backward(const MaskForwardRecord& record, const SparsityParams& params,
                                 const CandidateRates& rates, const LayerRanking& ranking,
                                 const std::vector<double>& bit_grads);

/// ℓ2 penalty between achieved block sparsity and the target, with the STE
/// convention ∂k/∂M = -1 per bit: the backward contribution is one uniform
/// per-bit gradient.
struct SparsityPenalty {
  double loss = 0.0;
  double achieved = 0.0;
  double bit_grad = 0.0;  // add to every mask bit's gradient
};

SparsityPenalty sparsity_penalty(const std::vector<const PruneMask*>& masks, double target,
                                 std::size_t total_params);

/// Extra learnable parameter count for one block at the given granularity.
struct ParamCount {
  std::size_t extra = 0;
  std::size_t block_weights = 0;
  double ratio = 0.0;
};

ParamCount count_learnable_params(const BlockConfig& cfg, Granularity g, std::size_t d);

// Mask file: 16-byte header (magic "BESAMASK", out, in as 32-bit LE),
// row-major packed bits LSB-first, then achieved sparsity as a 64-bit LE
// float footer.
void write_mask(const std::string& path, const PruneMask& mask);
PruneMask read_mask(const std::string& path);

}  // namespace besa

#endif  // BESA_SPARSITY_HPP
