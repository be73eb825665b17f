// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#include "besa/model.hpp"

#include <cmath>

namespace besa {

void BlockConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_ff < 1 || seq_len < 1)
    throw ConfigError("block config: all dimensions must be >= 1");
  if (d_model % n_heads != 0)
    throw ConfigError("block config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
}

const Tensor& BlockWeights::prunable(std::size_t idx) const {
  switch (idx) {
    case 0: return q_proj;
    case 1: return k_proj;
    case 2: return v_proj;
    case 3: return o_proj;
    case 4: return gate_proj;
    case 5: return up_proj;
    case 6: return down_proj;
    default: throw UsageError("prunable layer index out of range: " + std::to_string(idx));
  }
}

Tensor& BlockWeights::prunable(std::size_t idx) {
  return const_cast<Tensor&>(static_cast<const BlockWeights*>(this)->prunable(idx));
}

std::size_t BlockWeights::prunable_param_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < kNumPrunableLayers; ++i) n += prunable(i).numel();
  return n;
}

void ModelCheckpoint::validate() const {
  config.validate();
  if (blocks.empty()) throw DataError("checkpoint: block count must be >= 1");
  if (vocab < 1) throw DataError("checkpoint: vocab must be >= 1");
}

namespace {

constexpr double kCausalNegative = -1e30;

Tensor causal_mask(std::size_t s) {
  Tensor m = Tensor::zeros({s, s});
  double* d = m.mutable_data().data();
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = i + 1; j < s; ++j) d[i * s + j] = kCausalNegative;
  return m;
}

void check_mask_shapes(const BlockWeights& w, const std::array<Tensor, kNumPrunableLayers>& masks,
                       std::size_t first, std::size_t last) {
  for (std::size_t i = first; i < last; ++i) {
    if (masks[i].shape() != w.prunable(i).shape())
      throw ShapeError(std::string("mask for ") + kPrunableLayerNames[i] + " has shape " +
                       masks[i].shape_str() + ", weight is " + w.prunable(i).shape_str());
  }
}

}  // namespace

namespace {

Tensor effective_weight(Tape& tape, const BlockWeights& w, const BlockOverrides& ov,
                        std::size_t idx) {
  Tensor base = ov.weights ? (*ov.weights)[idx] : w.prunable(idx);
  if (base.shape() != w.prunable(idx).shape())
    throw ShapeError(std::string("weight override for ") + kPrunableLayerNames[idx] +
                     " has shape " + base.shape_str());
  if (ov.masks) return mul(tape, base, (*ov.masks)[idx]);
  return base;
}

}  // namespace

Tensor attn_half_forward(Tape& tape, const BlockConfig& cfg, const BlockWeights& w,
                         const Tensor& x, const BlockOverrides& ov, BlockTrace* trace) {
  cfg.validate();
  if (x.shape().size() != 2 || x.shape()[1] != cfg.d_model)
    throw ShapeError("block input must be [S x d_model], got " + x.shape_str());
  if (ov.masks) check_mask_shapes(w, *ov.masks, 0, 4);

  const std::size_t s = x.shape()[0];
  const std::size_t dh = cfg.head_dim();

  Tensor attn_in = rms_norm(tape, x, w.attn_norm_gain);
  Tensor q = linear(tape, attn_in, effective_weight(tape, w, ov, 0));
  Tensor k = linear(tape, attn_in, effective_weight(tape, w, ov, 1));
  Tensor v = linear(tape, attn_in, effective_weight(tape, w, ov, 2));

  Tensor causal = causal_mask(s);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(cfg.n_heads);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    Tensor qh = slice_cols(tape, q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(tape, k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(tape, v, h * dh, (h + 1) * dh);
    Tensor scores = add(tape, scale(tape, linear(tape, qh, kh), inv_sqrt_dh), causal);
    heads.push_back(matmul(tape, softmax_rows(tape, scores), vh));
  }
  Tensor o_in = concat_cols(tape, heads);
  Tensor h1 = add(tape, x, linear(tape, o_in, effective_weight(tape, w, ov, 3)));

  if (trace) {
    trace->attn_in = attn_in;
    trace->o_in = o_in;
    trace->attn_out = h1;
  }
  return h1;
}

Tensor mlp_half_forward(Tape& tape, const BlockConfig& cfg, const BlockWeights& w,
                        const Tensor& h, const BlockOverrides& ov, BlockTrace* trace) {
  cfg.validate();
  if (h.shape().size() != 2 || h.shape()[1] != cfg.d_model)
    throw ShapeError("block input must be [S x d_model], got " + h.shape_str());
  if (ov.masks) check_mask_shapes(w, *ov.masks, 4, kNumPrunableLayers);

  Tensor mlp_in = rms_norm(tape, h, w.mlp_norm_gain);
  Tensor gate = linear(tape, mlp_in, effective_weight(tape, w, ov, 4));
  Tensor up = linear(tape, mlp_in, effective_weight(tape, w, ov, 5));
  Tensor down_in = mul(tape, silu(tape, gate), up);
  Tensor out = add(tape, h, linear(tape, down_in, effective_weight(tape, w, ov, 6)));

  if (trace) {
    trace->mlp_in = mlp_in;
    trace->down_in = down_in;
    trace->out = out;
  }
  return out;
}

Tensor block_forward(Tape& tape, const BlockConfig& cfg, const BlockWeights& w, const Tensor& x,
                     const BlockOverrides& ov, BlockTrace* trace) {
  Tensor h1 = attn_half_forward(tape, cfg, w, x, ov, trace);
  return mlp_half_forward(tape, cfg, w, h1, ov, trace);
}

Tensor embed_tokens(const ModelCheckpoint& m, const std::vector<std::uint32_t>& tokens) {
  const std::size_t d = m.config.d_model;
  Tensor x = Tensor::zeros({tokens.size(), d});
  double* X = x.mutable_data().data();
  const double* E = m.embed.data().data();
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= m.vocab)
      throw DataError("token id " + std::to_string(tokens[t]) + " out of range for vocab " +
                      std::to_string(m.vocab) + " at position " + std::to_string(t));
    for (std::size_t j = 0; j < d; ++j) X[t * d + j] = E[tokens[t] * d + j];
    // Fixed sinusoidal position offsets.
    for (std::size_t j = 0; j < d; j += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(d));
      X[t * d + j] += std::sin(static_cast<double>(t) * freq);
      if (j + 1 < d) X[t * d + j + 1] += std::cos(static_cast<double>(t) * freq);
    }
  }
  return x;
}

Tensor model_forward(const ModelCheckpoint& m, const std::vector<std::uint32_t>& tokens,
                     const std::vector<std::array<Tensor, kNumPrunableLayers>>* masks) {
  m.validate();
  if (masks && masks->size() != m.blocks.size())
    throw UsageError("mask sets cover " + std::to_string(masks->size()) + " blocks, model has " +
                     std::to_string(m.blocks.size()));
  Tape tape;
  Tensor x = embed_tokens(m, tokens);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    BlockOverrides ov;
    if (masks) ov.masks = &(*masks)[l];
    x = block_forward(tape, m.config, m.blocks[l], x, ov);
  }
  x = rms_norm(tape, x, m.final_norm_gain);
  return linear(tape, x, m.head);
}

double perplexity_from_logits(const Tensor& logits, const std::vector<std::uint32_t>& tokens) {
  if (tokens.size() < 2) throw UsageError("perplexity needs at least 2 tokens");
  if (logits.shape().size() != 2 || logits.shape()[0] < tokens.size() - 1)
    throw ShapeError("logits shape " + logits.shape_str() + " too small for " +
                     std::to_string(tokens.size()) + " tokens");
  const std::size_t v = logits.shape()[1];
  const double* L = logits.data().data();
  double nll = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    if (tokens[t + 1] >= v) throw DataError("token id out of range in perplexity");
    const double* row = L + t * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j)
      if (row[j] > mx) mx = row[j];
    double lse = 0.0;
    for (std::size_t j = 0; j < v; ++j) lse += std::exp(row[j] - mx);
    nll += -(row[tokens[t + 1]] - mx - std::log(lse));
  }
  return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

double perplexity(const ModelCheckpoint& m, const std::vector<std::uint32_t>& tokens,
                  const std::vector<std::array<Tensor, kNumPrunableLayers>>* masks) {
  if (tokens.size() < 2) throw UsageError("perplexity needs at least 2 tokens");
  return perplexity_from_logits(model_forward(m, tokens, masks), tokens);
}

}  // namespace besa
