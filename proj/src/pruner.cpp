// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#include "besa/pruner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>

namespace besa {

Scope scope_from_string(const std::string& s) {
  if (s == "layer") return Scope::kLayer;
  if (s == "attn_mlp") return Scope::kAttnMlp;
  if (s == "block") return Scope::kBlock;
  if (s == "two_blocks") return Scope::kTwoBlocks;
  throw ConfigError("unknown scope '" + s + "' (expected layer|attn_mlp|block|two_blocks)");
}

const char* to_string(Scope s) {
  switch (s) {
    case Scope::kLayer: return "layer";
    case Scope::kAttnMlp: return "attn_mlp";
    case Scope::kBlock: return "block";
    default: return "two_blocks";
  }
}

PenaltyMode penalty_mode_from_string(const std::string& s) {
  if (s == "ste") return PenaltyMode::kSte;
  if (s == "surrogate") return PenaltyMode::kSurrogate;
  throw ConfigError("unknown penalty mode '" + s + "' (expected ste|surrogate)");
}

const char* to_string(PenaltyMode m) { return m == PenaltyMode::kSte ? "ste" : "surrogate"; }

StreamMode stream_mode_from_string(const std::string& s) {
  if (s == "single") return StreamMode::kSingle;
  if (s == "two_stream") return StreamMode::kTwoStream;
  throw ConfigError("unknown stream mode '" + s + "' (expected single|two_stream)");
}

const char* to_string(StreamMode m) { return m == StreamMode::kSingle ? "single" : "two_stream"; }

void PruneConfig::validate() const {
  if (!(target_sparsity > 0.0 && target_sparsity < 1.0))
    throw ConfigError("target sparsity must lie in (0, 1), got " +
                      std::to_string(target_sparsity));
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (calib_sequences < 1 || calib_seq_len < 2) throw ConfigError("calibration set too small");
  if (batch_sequences < 1) throw ConfigError("batch size must be >= 1");
  if (conv_window < 2) throw ConfigError("convergence window must be >= 2");
  if (joint_quant && (quant_bits < 2 || quant_bits > 8))
    throw ConfigError("quant bits must lie in [2, 8]");
  CandidateRates::from_step(sparsity_step);  // validates the step
}

std::size_t PruneConfig::steps_budget(std::size_t n_sequences) const {
  const std::size_t batches = (n_sequences + batch_sequences - 1) / batch_sequences;
  return epochs * std::max<std::size_t>(batches, 1);
}

BlockLoss block_loss(const std::vector<Tensor>& dense_out, const std::vector<Tensor>& pruned_out,
                     const std::vector<const PruneMask*>& masks, double target, double lambda,
                     std::size_t total_params) {
  if (dense_out.size() != pruned_out.size())
    throw UsageError("dense and pruned output sets differ in size");
  double err = 0.0, denom = 0.0;
  for (std::size_t s = 0; s < dense_out.size(); ++s) {
    if (dense_out[s].shape() != pruned_out[s].shape())
      throw ShapeError("dense and pruned outputs differ in shape: " + dense_out[s].shape_str() +
                       " vs " + pruned_out[s].shape_str());
    const double* d = dense_out[s].data().data();
    const double* p = pruned_out[s].data().data();
    for (std::size_t i = 0; i < dense_out[s].numel(); ++i) {
      const double diff = d[i] - p[i];
      err += diff * diff;
      denom += d[i] * d[i];
    }
  }
  BlockLoss l;
  l.recon = denom > 0.0 ? err / denom : err;
  l.penalty = sparsity_penalty(masks, target, total_params).loss;
  l.total = l.recon + lambda * l.penalty;
  return l;
}

double reconstruction_error(const BlockConfig& bc, const BlockWeights& w,
                            const std::vector<Tensor>& inputs, const std::vector<Tensor>& targets,
                            const std::array<PruneMask, kNumPrunableLayers>& masks,
                            const std::array<Tensor, kNumPrunableLayers>* weights) {
  if (inputs.size() != targets.size()) throw UsageError("inputs/targets size mismatch");
  std::array<Tensor, kNumPrunableLayers> mask_tensors;
  for (std::size_t i = 0; i < kNumPrunableLayers; ++i) mask_tensors[i] = mask_to_tensor(masks[i]);
  BlockOverrides ov;
  ov.masks = &mask_tensors;
  ov.weights = weights;
  double err = 0.0, denom = 0.0;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    Tape tape;
    Tensor out = block_forward(tape, bc, w, inputs[s], ov);
    const double* d = targets[s].data().data();
    const double* p = out.data().data();
    for (std::size_t i = 0; i < out.numel(); ++i) {
      const double diff = d[i] - p[i];
      err += diff * diff;
      denom += d[i] * d[i];
    }
  }
  return denom > 0.0 ? err / denom : err;
}

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

class Adam {
public:
  Adam() = default;
  explicit Adam(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0 - b1) * grads[i];
      v_[i] = b2 * v_[i] + (1.0 - b2) * grads[i] * grads[i];
      params[i] -= lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps);
    }
  }

private:
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

double cosine_lr(double base, std::size_t step, std::size_t budget) {
  if (budget <= 1) return base;
  const double frac = static_cast<double>(step) / static_cast<double>(budget - 1);
  return base * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
}

// One learnable slot: a prunable layer inside a reconstruction group.
struct GroupSlot {
  const BlockWeights* weights = nullptr;
  std::size_t layer = 0;
  std::string name;
  LayerRanking ranking;
  SparsityParams params;
  CandidateRates rates;
  Adam opt;
  // Joint quantization: γ = sigmoid(θ) per output channel.
  bool joint = false;
  std::size_t bits = 4;
  std::vector<double> theta0, theta1;
  Adam theta_opt;
};

// Per-step tensors the group forward consumes, one entry per slot.
struct StepContext {
  std::vector<Tensor> mask_tensors;
  std::vector<Tensor> weight_tensors;
};

struct ReconGroup {
  std::vector<GroupSlot> slots;
  std::size_t total_params = 0;
  std::vector<Tensor> inputs;     // what the masked forward consumes
  std::vector<Tensor> targets;    // dense outputs to reconstruct
  std::vector<double> target_sq;  // per sequence
  std::function<Tensor(Tape&, std::size_t, const StepContext&)> forward;
};

struct GroupResult {
  std::vector<PruneMask> masks;
  std::vector<QuantParams> quant;
  double recon = 0.0;
  double penalty = 0.0;
  double achieved = 0.0;
  std::size_t steps = 0;
  bool converged = false;
  double wall_ms = 0.0;
  std::vector<CurvePoint> curve;
};

QuantParams gamma_of(const GroupSlot& slot) {
  QuantParams q;
  q.bits = slot.bits;
  q.gamma0.resize(slot.theta0.size());
  q.gamma1.resize(slot.theta1.size());
  for (std::size_t c = 0; c < slot.theta0.size(); ++c) {
    q.gamma0[c] = sigmoid(slot.theta0[c]);
    q.gamma1[c] = sigmoid(slot.theta1[c]);
  }
  return q;
}

Tensor slot_weight(const GroupSlot& slot, QuantResult* qr_out) {
  if (!slot.joint) return slot.weights->prunable(slot.layer);
  QuantResult qr = quantize(slot.weights->prunable(slot.layer), gamma_of(slot), qr_out != nullptr);
  Tensor w = qr.dequant;
  if (qr_out) *qr_out = std::move(qr);
  return w;
}

void add_surrogate_penalty(const ReconGroup& g, const std::vector<MaskForwardRecord>& records,
                           std::size_t si, const PruneConfig& cfg,
                           std::vector<double>& grad_logits) {
  // Expected sparsity ᾱ = Σ_units α_u · unit_size / T, differentiable in β.
  double alpha_bar = 0.0;
  for (std::size_t sj = 0; sj < g.slots.size(); ++sj) {
    const GroupSlot& s2 = g.slots[sj];
    const double unit_w = s2.params.granularity == Granularity::kPerRow
                              ? static_cast<double>(s2.ranking.in)
                              : static_cast<double>(s2.ranking.in * s2.ranking.out);
    for (std::size_t u = 0; u < s2.params.units; ++u)
      alpha_bar += unit_w * records[sj].alpha[u];
  }
  alpha_bar /= static_cast<double>(g.total_params);

  const GroupSlot& slot = g.slots[si];
  const std::size_t d = slot.params.d;
  const double unit_w = slot.params.granularity == Granularity::kPerRow
                            ? static_cast<double>(slot.ranking.in)
                            : static_cast<double>(slot.ranking.in * slot.ranking.out);
  const double coeff = 2.0 * cfg.lambda * (alpha_bar - cfg.target_sparsity) * unit_w /
                       static_cast<double>(g.total_params);
  for (std::size_t u = 0; u < slot.params.units; ++u) {
    const double* beta = records[si].beta.data() + u * d;
    double dot = 0.0;
    for (std::size_t e = 0; e + 1 < d; ++e) dot += beta[e] * coeff * slot.rates.rates[e];
    for (std::size_t e = 0; e + 1 < d; ++e)
      grad_logits[u * (d - 1) + e] += beta[e] * (coeff * slot.rates.rates[e] - dot);
  }
}

GroupResult optimize_group(ReconGroup& g, const PruneConfig& cfg) {
  const auto t_start = std::chrono::steady_clock::now();
  const std::size_t n = g.inputs.size();
  const std::size_t budget = cfg.steps_budget(n);
  const std::size_t batch = std::min<std::size_t>(cfg.batch_sequences, n);

  GroupResult res;
  std::vector<MaskForwardRecord> records(g.slots.size());
  std::vector<PruneMask> masks(g.slots.size());
  std::vector<QuantResult> quants(g.slots.size());

  std::vector<double> recon_window;
  double last_finite = 0.0;
  std::size_t seq_cursor = 0;

  for (std::size_t step = 0; step < budget; ++step) {
    StepContext ctx;
    ctx.mask_tensors.resize(g.slots.size());
    ctx.weight_tensors.resize(g.slots.size());
    for (std::size_t si = 0; si < g.slots.size(); ++si) {
      GroupSlot& slot = g.slots[si];
      masks[si] = generate_mask(slot.params, slot.rates, slot.ranking, slot.name, &records[si]);
      ctx.mask_tensors[si] = mask_to_tensor(masks[si]).set_requires_grad(true);
      ctx.weight_tensors[si] = slot_weight(slot, slot.joint ? &quants[si] : nullptr);
      if (slot.joint) ctx.weight_tensors[si].set_requires_grad(true);
    }

    Tape tape;
    Tensor frob_sum;
    double denom = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t s = (seq_cursor + b) % n;
      Tensor out = g.forward(tape, s, ctx);
      Tensor fs = frobenius_sq(tape, sub(tape, out, g.targets[s]));
      frob_sum = b == 0 ? fs : add(tape, frob_sum, fs);
      denom += g.target_sq[s];
    }
    seq_cursor = (seq_cursor + batch) % n;
    Tensor recon = scale(tape, frob_sum, denom > 0.0 ? 1.0 / denom : 1.0);
    const double recon_val = recon.item();

    std::vector<const PruneMask*> mask_ptrs;
    mask_ptrs.reserve(masks.size());
    for (const PruneMask& m : masks) mask_ptrs.push_back(&m);
    const SparsityPenalty pen = sparsity_penalty(mask_ptrs, cfg.target_sparsity, g.total_params);
    const double loss_val = recon_val + cfg.lambda * pen.loss;
    if (!std::isfinite(loss_val))
      throw TrainingError("loss diverged at step " + std::to_string(step), last_finite,
                          static_cast<int>(step));
    last_finite = loss_val;
    res.curve.push_back({step, recon_val, pen.loss, pen.achieved});

    tape.backward(recon);

    const double lr = cosine_lr(cfg.learning_rate, step, budget);
    for (std::size_t si = 0; si < g.slots.size(); ++si) {
      GroupSlot& slot = g.slots[si];
      std::vector<double> bit_grads = ctx.mask_tensors[si].grad();
      if (cfg.penalty_mode == PenaltyMode::kSte) {
        const double add_term = cfg.lambda * pen.bit_grad;
        for (double& v : bit_grads) v += add_term;
      }
      MaskBackwardResult back =
          mask_backward(records[si], slot.params, slot.rates, slot.ranking, bit_grads);
      if (cfg.penalty_mode == PenaltyMode::kSurrogate)
        add_surrogate_penalty(g, records, si, cfg, back.grad_logits);
      slot.opt.step(slot.params.logits, back.grad_logits, lr);

      if (slot.joint) {
        const std::size_t out_ch = slot.ranking.out, in_f = slot.ranking.in;
        ClipGrads cg = clip_gradients(quants[si], out_ch, in_f, ctx.weight_tensors[si].grad());
        std::vector<double> tp(2 * out_ch), tg(2 * out_ch);
        for (std::size_t c = 0; c < out_ch; ++c) {
          const double s0 = sigmoid(slot.theta0[c]), s1 = sigmoid(slot.theta1[c]);
          tp[c] = slot.theta0[c];
          tp[out_ch + c] = slot.theta1[c];
          tg[c] = cg.g0[c] * s0 * (1.0 - s0);
          tg[out_ch + c] = cg.g1[c] * s1 * (1.0 - s1);
        }
        slot.theta_opt.step(tp, tg, lr);
        for (std::size_t c = 0; c < out_ch; ++c) {
          slot.theta0[c] = tp[c];
          slot.theta1[c] = tp[out_ch + c];
        }
      }
    }

    res.steps = step + 1;

    recon_window.push_back(recon_val);
    if (recon_window.size() > cfg.conv_window) recon_window.erase(recon_window.begin());
    if (recon_window.size() == cfg.conv_window &&
        std::fabs(pen.achieved - cfg.target_sparsity) <= cfg.conv_sparsity_tol) {
      const double mx = *std::max_element(recon_window.begin(), recon_window.end());
      const double mn = *std::min_element(recon_window.begin(), recon_window.end());
      if ((mx - mn) / std::max(std::fabs(mx), 1e-12) < cfg.conv_loss_rel_change) {
        res.converged = true;
        break;
      }
    }
  }

  // Final masks, clips, and the full-set reconstruction error.
  StepContext ctx;
  ctx.mask_tensors.resize(g.slots.size());
  ctx.weight_tensors.resize(g.slots.size());
  res.quant.resize(g.slots.size());
  for (std::size_t si = 0; si < g.slots.size(); ++si) {
    GroupSlot& slot = g.slots[si];
    masks[si] = generate_mask(slot.params, slot.rates, slot.ranking, slot.name);
    ctx.mask_tensors[si] = mask_to_tensor(masks[si]);
    ctx.weight_tensors[si] = slot_weight(slot, nullptr);
    if (slot.joint) res.quant[si] = gamma_of(slot);
  }
  double err = 0.0, denom = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    Tape tape;
    Tensor out = g.forward(tape, s, ctx);
    const double* d = g.targets[s].data().data();
    const double* p = out.data().data();
    for (std::size_t i = 0; i < out.numel(); ++i) {
      const double diff = d[i] - p[i];
      err += diff * diff;
    }
    denom += g.target_sq[s];
  }
  res.recon = denom > 0.0 ? err / denom : err;
  std::vector<const PruneMask*> mask_ptrs;
  for (const PruneMask& m : masks) mask_ptrs.push_back(&m);
  const SparsityPenalty pen = sparsity_penalty(mask_ptrs, cfg.target_sparsity, g.total_params);
  res.penalty = pen.loss;
  res.achieved = pen.achieved;
  res.masks = std::move(masks);
  res.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
          .count();
  return res;
}

GroupSlot make_slot(const BlockWeights& w, std::size_t layer, const ActivationNorms& norms,
                    const PruneConfig& cfg, const CandidateRates& rates,
                    const std::string& name) {
  GroupSlot slot;
  slot.weights = &w;
  slot.layer = layer;
  slot.name = name;
  slot.rates = rates;
  slot.joint = cfg.joint_quant;
  slot.bits = cfg.quant_bits;
  const Tensor& weight = w.prunable(layer);
  const std::size_t out = weight.shape()[0];
  if (cfg.joint_quant) {
    // γ starts at ≈1 (no clipping): sigmoid(12) ≈ 1 - 6e-6.
    slot.theta0.assign(out, 12.0);
    slot.theta1.assign(out, 12.0);
    slot.theta_opt = Adam(2 * out);
  }
  // Importance reflects the weights actually pruned: the quantized ones
  // under joint compression. Sorted once; never refreshed afterwards.
  Tensor rank_basis = weight;
  if (cfg.joint_quant)
    rank_basis = quantize(weight, QuantParams::plain(cfg.quant_bits, out)).dequant;
  slot.ranking = sort_rows(compute_importance(rank_basis, norms.per_layer[layer], cfg.metric));
  slot.params = SparsityParams::init(cfg.granularity, out, rates, cfg.target_sparsity,
                                     cfg.init_concentration);
  slot.opt = Adam(slot.params.logits.size());
  return slot;
}

std::vector<double> tensor_sq(const std::vector<Tensor>& ts) {
  std::vector<double> out(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const double* d = ts[i].data().data();
    double s = 0.0;
    for (std::size_t j = 0; j < ts[i].numel(); ++j) s += d[j] * d[j];
    out[i] = s;
  }
  return out;
}

// Full-block group. Targets are dense forwards of `target_inputs`; norms come
// from a dense forward of `pruned_inputs` (the block's actual input stream).
ReconGroup make_block_group(const BlockConfig& bc, const BlockWeights& w,
                            const std::vector<Tensor>& pruned_inputs,
                            const std::vector<Tensor>& target_inputs, const PruneConfig& cfg,
                            const CandidateRates& rates) {
  const bool same_stream = &pruned_inputs == &target_inputs;
  ActivationNormAccumulator acc(bc);
  std::vector<Tensor> targets;
  targets.reserve(target_inputs.size());
  for (std::size_t s = 0; s < pruned_inputs.size(); ++s) {
    Tape tape;
    BlockTrace trace;
    Tensor out = block_forward(tape, bc, w, pruned_inputs[s], {}, &trace);
    acc.accumulate(trace);
    if (same_stream) targets.push_back(out);
  }
  if (!same_stream)
    for (const Tensor& x : target_inputs) {
      Tape tape;
      targets.push_back(block_forward(tape, bc, w, x));
    }
  const ActivationNorms norms = acc.finalize();

  ReconGroup g;
  for (std::size_t layer = 0; layer < kNumPrunableLayers; ++layer) {
    g.slots.push_back(make_slot(w, layer, norms, cfg, rates, kPrunableLayerNames[layer]));
    g.total_params += w.prunable(layer).numel();
  }
  g.inputs = pruned_inputs;
  g.targets = std::move(targets);
  g.target_sq = tensor_sq(g.targets);
  return g;
}

void bind_block_forward(ReconGroup& g, const BlockConfig& bc, const BlockWeights& w) {
  const std::vector<Tensor>* in_ptr = &g.inputs;
  g.forward = [&bc, &w, in_ptr](Tape& tape, std::size_t s, const StepContext& ctx) -> Tensor {
    std::array<Tensor, kNumPrunableLayers> mask_arr, weight_arr;
    for (std::size_t i = 0; i < kNumPrunableLayers; ++i) {
      mask_arr[i] = ctx.mask_tensors[i];
      weight_arr[i] = ctx.weight_tensors[i];
    }
    BlockOverrides ov;
    ov.masks = &mask_arr;
    ov.weights = &weight_arr;
    return block_forward(tape, bc, w, (*in_ptr)[s], ov);
  };
}

void fill_block_report(BlockLossReport& rep, const GroupResult& r,
                       const std::array<PruneMask, kNumPrunableLayers>& masks) {
  for (std::size_t i = 0; i < kNumPrunableLayers; ++i)
    rep.layer_achieved[i] = masks[i].achieved_sparsity();
  rep.recon_loss = r.recon;
  rep.sparsity_penalty = r.penalty;
  rep.achieved = r.achieved;
  rep.steps = r.steps;
  rep.converged = r.converged;
  rep.wall_ms = r.wall_ms;
}

std::vector<Tensor> embed_all(const ModelCheckpoint& m,
                              const std::vector<std::vector<std::uint32_t>>& calib) {
  std::vector<Tensor> xs;
  xs.reserve(calib.size());
  for (const auto& seq : calib) xs.push_back(embed_tokens(m, seq));
  return xs;
}

void propagate(const BlockConfig& bc, const BlockWeights& w, std::vector<Tensor>& stream,
               const std::array<Tensor, kNumPrunableLayers>* masks,
               const std::array<Tensor, kNumPrunableLayers>* weights = nullptr) {
  for (Tensor& x : stream) {
    Tape tape;
    BlockOverrides ov;
    ov.masks = masks;
    ov.weights = weights;
    x = block_forward(tape, bc, w, x, ov);
  }
}

std::array<Tensor, kNumPrunableLayers> mask_tensor_array(
    const std::array<PruneMask, kNumPrunableLayers>& masks) {
  std::array<Tensor, kNumPrunableLayers> t;
  for (std::size_t i = 0; i < kNumPrunableLayers; ++i) t[i] = mask_to_tensor(masks[i]);
  return t;
}

// Effective dense-side weights of a whole block under final joint clips.
std::array<Tensor, kNumPrunableLayers> quantized_weight_array(
    const BlockWeights& w, const std::vector<QuantParams>& qp) {
  std::array<Tensor, kNumPrunableLayers> t;
  for (std::size_t i = 0; i < kNumPrunableLayers; ++i)
    t[i] = quantize(w.prunable(i), qp[i]).dequant;
  return t;
}

}  // namespace

BlockPruneResult prune_block(const BlockConfig& bc, const BlockWeights& w,
                             const std::vector<Tensor>& inputs, const PruneConfig& cfg) {
  cfg.validate();
  const CandidateRates rates = CandidateRates::from_step(cfg.sparsity_step);
  ReconGroup g = make_block_group(bc, w, inputs, inputs, cfg, rates);
  bind_block_forward(g, bc, w);
  GroupResult r = optimize_group(g, cfg);

  BlockPruneResult out;
  for (std::size_t i = 0; i < kNumPrunableLayers; ++i) out.masks[i] = std::move(r.masks[i]);
  fill_block_report(out.report, r, out.masks);
  out.curve = std::move(r.curve);
  if (cfg.joint_quant) out.quant = std::move(r.quant);
  return out;
}

std::array<PruneMask, kNumPrunableLayers> uniform_baseline_block(const BlockWeights& w,
                                                                 const ActivationNorms& norms,
                                                                 double alpha_hat,
                                                                 ImportanceMetric metric) {
  if (!(alpha_hat >= 0.0 && alpha_hat <= 1.0))
    throw ConfigError("baseline rate must lie in [0, 1]");
  std::array<PruneMask, kNumPrunableLayers> masks;
  for (std::size_t layer = 0; layer < kNumPrunableLayers; ++layer) {
    const Tensor& weight = w.prunable(layer);
    LayerRanking rank = sort_rows(compute_importance(weight, norms.per_layer[layer], metric));
    PruneMask m = PruneMask::all_ones(kPrunableLayerNames[layer], rank.out, rank.in);
    const std::size_t k =
        static_cast<std::size_t>(std::floor(static_cast<double>(rank.in) * alpha_hat + 1e-9));
    for (std::size_t o = 0; o < rank.out; ++o)
      for (std::size_t r = 0; r < k; ++r) m.set(o, rank.column_at(o, r), false);
    masks[layer] = std::move(m);
  }
  return masks;
}

PruneResult prune_model(const ModelCheckpoint& m,
                        const std::vector<std::vector<std::uint32_t>>& calib,
                        const PruneConfig& cfg) {
  cfg.validate();
  m.validate();
  if (calib.empty()) throw UsageError("no calibration sequences");
  const CandidateRates rates = CandidateRates::from_step(cfg.sparsity_step);
  const BlockConfig& bc = m.config;
  const std::size_t L = m.blocks.size();

  PruneResult result;
  result.masks.resize(L);
  result.reports.resize(L);
  result.curves.resize(L);
  result.quant.resize(L);

  std::vector<Tensor> xp = embed_all(m, calib);
  std::vector<Tensor> xfp;
  const bool two_stream = cfg.stream_mode == StreamMode::kTwoStream;
  if (two_stream) xfp = xp;

  std::size_t l = 0;
  while (l < L) {
    const std::vector<Tensor>& target_stream = two_stream ? xfp : xp;
    const BlockWeights& w = m.blocks[l];

    if (cfg.scope == Scope::kTwoBlocks && l + 1 < L) {
      const BlockWeights& w1 = m.blocks[l + 1];
      // Norms per block from the pruned stream; the second block's from the
      // dense mid-stream (no masks exist there yet).
      ActivationNormAccumulator acc0(bc), acc1(bc);
      std::vector<Tensor> targets;
      std::vector<Tensor> pair_inputs = xp;
      for (std::size_t s = 0; s < xp.size(); ++s) {
        Tape tape;
        BlockTrace tr0, tr1;
        Tensor mid = block_forward(tape, bc, w, xp[s], {}, &tr0);
        Tensor out = block_forward(tape, bc, w1, mid, {}, &tr1);
        acc0.accumulate(tr0);
        acc1.accumulate(tr1);
        if (!two_stream) targets.push_back(out);
      }
      if (two_stream)
        for (const Tensor& x : xfp) {
          Tape tape;
          targets.push_back(block_forward(tape, bc, w1, block_forward(tape, bc, w, x)));
        }
      const ActivationNorms n0 = acc0.finalize(), n1 = acc1.finalize();

      ReconGroup g;
      for (std::size_t i = 0; i < kNumPrunableLayers; ++i) {
        g.slots.push_back(make_slot(w, i, n0, cfg, rates, kPrunableLayerNames[i]));
        g.total_params += w.prunable(i).numel();
      }
      for (std::size_t i = 0; i < kNumPrunableLayers; ++i) {
        g.slots.push_back(make_slot(w1, i, n1, cfg, rates, kPrunableLayerNames[i]));
        g.total_params += w1.prunable(i).numel();
      }
      g.inputs = std::move(pair_inputs);
      g.targets = std::move(targets);
      g.target_sq = tensor_sq(g.targets);
      const std::vector<Tensor>* in_ptr = &g.inputs;
      g.forward = [&bc, &w, &w1, in_ptr](Tape& tape, std::size_t s,
                                         const StepContext& ctx) -> Tensor {
        std::array<Tensor, kNumPrunableLayers> m0, m1, e0, e1;
        for (std::size_t i = 0; i < kNumPrunableLayers; ++i) {
          m0[i] = ctx.mask_tensors[i];
          e0[i] = ctx.weight_tensors[i];
          m1[i] = ctx.mask_tensors[kNumPrunableLayers + i];
          e1[i] = ctx.weight_tensors[kNumPrunableLayers + i];
        }
        BlockOverrides ov0, ov1;
        ov0.masks = &m0;
        ov0.weights = &e0;
        ov1.masks = &m1;
        ov1.weights = &e1;
        Tensor mid = block_forward(tape, bc, w, (*in_ptr)[s], ov0);
        return block_forward(tape, bc, w1, mid, ov1);
      };

      GroupResult r = optimize_group(g, cfg);
      for (std::size_t b = 0; b < 2; ++b) {
        const std::size_t bl = l + b;
        for (std::size_t i = 0; i < kNumPrunableLayers; ++i)
          result.masks[bl][i] = std::move(r.masks[b * kNumPrunableLayers + i]);
        fill_block_report(result.reports[bl], r, result.masks[bl]);
        result.curves[bl] = r.curve;
        if (cfg.joint_quant)
          result.quant[bl].assign(
              r.quant.begin() + static_cast<std::ptrdiff_t>(b * kNumPrunableLayers),
              r.quant.begin() + static_cast<std::ptrdiff_t>((b + 1) * kNumPrunableLayers));
      }
      for (std::size_t b = 0; b < 2; ++b) {
        const std::size_t bl = l + b;
        auto mt = mask_tensor_array(result.masks[bl]);
        if (cfg.joint_quant) {
          auto wt = quantized_weight_array(m.blocks[bl], result.quant[bl]);
          propagate(bc, m.blocks[bl], xp, &mt, &wt);
        } else {
          propagate(bc, m.blocks[bl], xp, &mt);
        }
        if (two_stream) propagate(bc, m.blocks[bl], xfp, nullptr);
      }
      l += 2;
      continue;
    }

    if (cfg.scope == Scope::kBlock || cfg.scope == Scope::kTwoBlocks) {
      // kTwoBlocks lands here only for a trailing odd block.
      ReconGroup g = make_block_group(bc, w, xp, target_stream, cfg, rates);
      bind_block_forward(g, bc, w);
      GroupResult r = optimize_group(g, cfg);
      for (std::size_t i = 0; i < kNumPrunableLayers; ++i)
        result.masks[l][i] = std::move(r.masks[i]);
      fill_block_report(result.reports[l], r, result.masks[l]);
      result.curves[l] = std::move(r.curve);
      if (cfg.joint_quant) result.quant[l] = std::move(r.quant);
    } else if (cfg.scope == Scope::kAttnMlp) {
      // Attention module first; the MLP learns on the masked-attention
      // stream afterwards (module-sequential, one propagated stream).
      ActivationNormAccumulator acc(bc);
      std::vector<Tensor> attn_targets;
      for (std::size_t s = 0; s < xp.size(); ++s) {
        Tape tape;
        BlockTrace tr;
        Tensor out = attn_half_forward(tape, bc, w, xp[s], {}, &tr);
        acc.accumulate(tr);
        if (!two_stream) attn_targets.push_back(out);
      }
      if (two_stream)
        for (const Tensor& x : xfp) {
          Tape tape;
          attn_targets.push_back(attn_half_forward(tape, bc, w, x));
        }
      ActivationNorms attn_norms = acc.finalize();

      ReconGroup ga;
      for (std::size_t i = 0; i < 4; ++i) {
        ga.slots.push_back(make_slot(w, i, attn_norms, cfg, rates, kPrunableLayerNames[i]));
        ga.total_params += w.prunable(i).numel();
      }
      ga.inputs = xp;
      ga.targets = std::move(attn_targets);
      ga.target_sq = tensor_sq(ga.targets);
      const std::vector<Tensor>* ain = &ga.inputs;
      ga.forward = [&bc, &w, ain](Tape& tape, std::size_t s, const StepContext& ctx) -> Tensor {
        std::array<Tensor, kNumPrunableLayers> masks, weights;
        for (std::size_t i = 0; i < 4; ++i) {
          masks[i] = ctx.mask_tensors[i];
          weights[i] = ctx.weight_tensors[i];
        }
        BlockOverrides ov;
        ov.masks = &masks;
        ov.weights = &weights;
        return attn_half_forward(tape, bc, w, (*ain)[s], ov);
      };
      GroupResult ra = optimize_group(ga, cfg);

      // Masked-attention stream feeding the MLP module.
      std::array<Tensor, kNumPrunableLayers> attn_masks, attn_weights;
      for (std::size_t i = 0; i < 4; ++i) {
        attn_masks[i] = mask_to_tensor(ra.masks[i]);
        attn_weights[i] =
            cfg.joint_quant ? quantize(w.prunable(i), ra.quant[i]).dequant : w.prunable(i);
      }
      for (std::size_t i = 4; i < kNumPrunableLayers; ++i) {
        attn_masks[i] = Tensor::full(w.prunable(i).shape(), 1.0);
        attn_weights[i] = w.prunable(i);
      }
      std::vector<Tensor> h_stream;
      for (const Tensor& x : xp) {
        Tape tape;
        BlockOverrides ov;
        ov.masks = &attn_masks;
        ov.weights = &attn_weights;
        h_stream.push_back(attn_half_forward(tape, bc, w, x, ov));
      }
      std::vector<Tensor> h_fp;
      if (two_stream)
        for (const Tensor& x : xfp) {
          Tape tape;
          h_fp.push_back(attn_half_forward(tape, bc, w, x));
        }
      const std::vector<Tensor>& h_targets_src = two_stream ? h_fp : h_stream;

      ActivationNormAccumulator acc2(bc);
      std::vector<Tensor> mlp_targets;
      for (std::size_t s = 0; s < h_stream.size(); ++s) {
        Tape tape;
        BlockTrace tr;
        Tensor out = mlp_half_forward(tape, bc, w, h_stream[s], {}, &tr);
        acc2.accumulate(tr);
        if (!two_stream) mlp_targets.push_back(out);
      }
      if (two_stream)
        for (const Tensor& h : h_targets_src) {
          Tape tape;
          mlp_targets.push_back(mlp_half_forward(tape, bc, w, h));
        }
      ActivationNorms mlp_norms = acc2.finalize();

      ReconGroup gm;
      for (std::size_t i = 4; i < kNumPrunableLayers; ++i) {
        gm.slots.push_back(make_slot(w, i, mlp_norms, cfg, rates, kPrunableLayerNames[i]));
        gm.total_params += w.prunable(i).numel();
      }
      gm.inputs = std::move(h_stream);
      gm.targets = std::move(mlp_targets);
      gm.target_sq = tensor_sq(gm.targets);
      const std::vector<Tensor>* min_ptr = &gm.inputs;
      gm.forward = [&bc, &w, min_ptr](Tape& tape, std::size_t s,
                                      const StepContext& ctx) -> Tensor {
        std::array<Tensor, kNumPrunableLayers> masks, weights;
        for (std::size_t i = 4; i < kNumPrunableLayers; ++i) {
          masks[i] = ctx.mask_tensors[i - 4];
          weights[i] = ctx.weight_tensors[i - 4];
        }
        BlockOverrides ov;
        ov.masks = &masks;
        ov.weights = &weights;
        return mlp_half_forward(tape, bc, w, (*min_ptr)[s], ov);
      };
      GroupResult rm = optimize_group(gm, cfg);

      for (std::size_t i = 0; i < 4; ++i) result.masks[l][i] = std::move(ra.masks[i]);
      for (std::size_t i = 4; i < kNumPrunableLayers; ++i)
        result.masks[l][i] = std::move(rm.masks[i - 4]);
      for (std::size_t i = 0; i < kNumPrunableLayers; ++i)
        result.reports[l].layer_achieved[i] = result.masks[l][i].achieved_sparsity();
      const double ta = static_cast<double>(ga.total_params);
      const double tm = static_cast<double>(gm.total_params);
      result.reports[l].recon_loss = (ra.recon * ta + rm.recon * tm) / (ta + tm);
      result.reports[l].sparsity_penalty = (ra.penalty * ta + rm.penalty * tm) / (ta + tm);
      result.reports[l].achieved = (ra.achieved * ta + rm.achieved * tm) / (ta + tm);
      result.reports[l].steps = ra.steps + rm.steps;
      result.reports[l].converged = ra.converged && rm.converged;
      result.reports[l].wall_ms = ra.wall_ms + rm.wall_ms;
      result.curves[l] = ra.curve;
      result.curves[l].insert(result.curves[l].end(), rm.curve.begin(), rm.curve.end());
      if (cfg.joint_quant) {
        result.quant[l].resize(kNumPrunableLayers);
        for (std::size_t i = 0; i < 4; ++i) result.quant[l][i] = ra.quant[i];
        for (std::size_t i = 4; i < kNumPrunableLayers; ++i) result.quant[l][i] = rm.quant[i - 4];
      }
    } else {  // Scope::kLayer
      // Per-projection reconstruction on the dense trace of this block.
      ActivationNormAccumulator acc(bc);
      std::vector<BlockTrace> traces(xp.size());
      for (std::size_t s = 0; s < xp.size(); ++s) {
        Tape tape;
        block_forward(tape, bc, w, xp[s], {}, &traces[s]);
        acc.accumulate(traces[s]);
      }
      std::vector<BlockTrace> fp_traces;
      if (two_stream) {
        fp_traces.resize(xfp.size());
        for (std::size_t s = 0; s < xfp.size(); ++s) {
          Tape tape;
          block_forward(tape, bc, w, xfp[s], {}, &fp_traces[s]);
        }
      }
      ActivationNorms norms = acc.finalize();

      auto trace_input = [](const BlockTrace& tr, std::size_t layer) -> const Tensor& {
        return layer <= 2 ? tr.attn_in : layer == 3 ? tr.o_in : layer <= 5 ? tr.mlp_in
                                                                           : tr.down_in;
      };

      double pen_sum = 0.0, ach_sum = 0.0, recon_sum = 0.0;
      std::size_t steps_total = 0;
      bool all_converged = true;
      double wall = 0.0;
      if (cfg.joint_quant) result.quant[l].resize(kNumPrunableLayers);
      for (std::size_t layer = 0; layer < kNumPrunableLayers; ++layer) {
        ReconGroup gl;
        gl.slots.push_back(make_slot(w, layer, norms, cfg, rates, kPrunableLayerNames[layer]));
        gl.total_params = w.prunable(layer).numel();
        for (std::size_t s = 0; s < traces.size(); ++s) {
          gl.inputs.push_back(trace_input(traces[s], layer));
          const Tensor& tin = two_stream ? trace_input(fp_traces[s], layer) : gl.inputs.back();
          Tape tape;
          gl.targets.push_back(linear(tape, tin, w.prunable(layer)));
        }
        gl.target_sq = tensor_sq(gl.targets);
        const std::vector<Tensor>* lin_ptr = &gl.inputs;
        gl.forward = [lin_ptr](Tape& tape, std::size_t s, const StepContext& ctx) -> Tensor {
          Tensor eff = mul(tape, ctx.weight_tensors[0], ctx.mask_tensors[0]);
          return linear(tape, (*lin_ptr)[s], eff);
        };
        GroupResult rl = optimize_group(gl, cfg);
        result.masks[l][layer] = std::move(rl.masks[0]);
        result.reports[l].layer_achieved[layer] = result.masks[l][layer].achieved_sparsity();
        const double tw = static_cast<double>(gl.total_params);
        pen_sum += rl.penalty * tw;
        ach_sum += rl.achieved * tw;
        recon_sum += rl.recon * tw;
        steps_total += rl.steps;
        all_converged = all_converged && rl.converged;
        wall += rl.wall_ms;
        if (cfg.joint_quant) result.quant[l][layer] = rl.quant[0];
        result.curves[l].insert(result.curves[l].end(), rl.curve.begin(), rl.curve.end());
      }
      const double tp = static_cast<double>(w.prunable_param_count());
      result.reports[l].recon_loss = recon_sum / tp;
      result.reports[l].sparsity_penalty = pen_sum / tp;
      result.reports[l].achieved = ach_sum / tp;
      result.reports[l].steps = steps_total;
      result.reports[l].converged = all_converged;
      result.reports[l].wall_ms = wall;
    }

    auto mt = mask_tensor_array(result.masks[l]);
    if (cfg.joint_quant) {
      auto wt = quantized_weight_array(w, result.quant[l]);
      propagate(bc, w, xp, &mt, &wt);
    } else {
      propagate(bc, w, xp, &mt);
    }
    if (two_stream) propagate(bc, w, xfp, nullptr);
    ++l;
  }

  std::size_t zeros = 0, total = 0;
  for (const auto& block_masks : result.masks)
    for (const PruneMask& mk : block_masks) {
      zeros += mk.zero_count;
      total += mk.numel();
    }
  result.global_achieved = static_cast<double>(zeros) / static_cast<double>(total);
  return result;
}

std::vector<std::array<PruneMask, kNumPrunableLayers>> uniform_baseline(
    const ModelCheckpoint& m, const std::vector<std::vector<std::uint32_t>>& calib,
    double alpha_hat, ImportanceMetric metric) {
  m.validate();
  std::vector<std::array<PruneMask, kNumPrunableLayers>> all;
  std::vector<Tensor> xp = embed_all(m, calib);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    ActivationNorms norms = collect_activation_norms(m, l, xp);
    all.push_back(uniform_baseline_block(m.blocks[l], norms, alpha_hat, metric));
    auto mt = mask_tensor_array(all.back());
    propagate(m.config, m.blocks[l], xp, &mt);
  }
  return all;
}

}  // namespace besa
