// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#ifndef BESA_MODEL_HPP
#define BESA_MODEL_HPP

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "besa/tensor.hpp"

namespace besa {

/// The seven prunable projection matrices of a block, in report order.
inline constexpr std::array<const char*, 7> kPrunableLayerNames = {
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"};
inline constexpr std::size_t kNumPrunableLayers = 7;

struct BlockConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 172;
  std::size_t seq_len = 128;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

/// One transformer block: pre-norm attention and SiLU-gated MLP. Projections
/// are stored [out_features x in_features]; norm gains are never pruned.
struct BlockWeights {
  Tensor q_proj, k_proj, v_proj, o_proj;   // [d_model x d_model]
  Tensor gate_proj, up_proj;               // [d_ff x d_model]
  Tensor down_proj;                        // [d_model x d_ff]
  Tensor attn_norm_gain, mlp_norm_gain;    // [d_model]

  const Tensor& prunable(std::size_t idx) const;
  Tensor& prunable(std::size_t idx);

  /// Sum of element counts over the seven prunable matrices.
  std::size_t prunable_param_count() const;
};

struct ModelCheckpoint {
  BlockConfig config;
  std::size_t vocab = 256;
  std::vector<BlockWeights> blocks;
  Tensor embed;             // [vocab x d_model]
  Tensor head;              // [vocab x d_model]
  Tensor final_norm_gain;   // [d_model]

  void validate() const;
};

/// Per-layer substitutions applied before each projection is used:
/// effective weight = (weights override or stored weight) ⊙ (mask, if given).
/// Mask tensors are 0/1 valued with the weight's shape; when they carry
/// requires_grad, the tape yields d(loss)/d(mask bit) after backward.
struct BlockOverrides {
  const std::array<Tensor, kNumPrunableLayers>* masks = nullptr;
  const std::array<Tensor, kNumPrunableLayers>* weights = nullptr;
};

/// Intermediate activations of one block forward; the inputs feeding each
/// prunable projection plus the module outputs. Used for importance
/// statistics and for the narrower reconstruction scopes.
struct BlockTrace {
  Tensor attn_in;   // feeds q/k/v
  Tensor o_in;      // feeds o_proj
  Tensor mlp_in;    // feeds gate/up
  Tensor down_in;   // feeds down_proj
  Tensor attn_out;  // x + attention branch
  Tensor out;       // block output
};

/// Pre-norm block forward: x + Attn(RMSNorm(x)), then h + MLP(RMSNorm(h)),
/// with causal multi-head attention scaled by 1/sqrt(head_dim).
Tensor block_forward(Tape& tape, const BlockConfig& cfg, const BlockWeights& w, const Tensor& x,
                     const BlockOverrides& ov = {}, BlockTrace* trace = nullptr);

/// Attention half only: x + Attn(RMSNorm(x)). Mask/weight overrides for the
/// MLP layers are ignored here.
Tensor attn_half_forward(Tape& tape, const BlockConfig& cfg, const BlockWeights& w,
                         const Tensor& x, const BlockOverrides& ov = {},
                         BlockTrace* trace = nullptr);

/// MLP half only: h + MLP(RMSNorm(h)).
Tensor mlp_half_forward(Tape& tape, const BlockConfig& cfg, const BlockWeights& w,
                        const Tensor& h, const BlockOverrides& ov = {},
                        BlockTrace* trace = nullptr);

/// Token embedding plus fixed sinusoidal position offsets.
Tensor embed_tokens(const ModelCheckpoint& m, const std::vector<std::uint32_t>& tokens);

/// Full forward pass to [n_tokens x vocab] logits. Per-block mask sets, when
/// given, must cover every block.
Tensor model_forward(const ModelCheckpoint& m, const std::vector<std::uint32_t>& tokens,
                     const std::vector<std::array<Tensor, kNumPrunableLayers>>* masks = nullptr);

/// exp of mean next-token negative log-likelihood; needs at least 2 tokens.
double perplexity(const ModelCheckpoint& m, const std::vector<std::uint32_t>& tokens,
                  const std::vector<std::array<Tensor, kNumPrunableLayers>>* masks = nullptr);

/// Same, for an already-computed [n_tokens x vocab] logits matrix.
double perplexity_from_logits(const Tensor& logits, const std::vector<std::uint32_t>& tokens);

}  // namespace besa

#endif  // BESA_MODEL_HPP
