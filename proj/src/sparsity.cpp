// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#include "besa/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace besa {

CandidateRates CandidateRates::from_step(double step) {
  if (!(step > 0.0 && step < 1.0)) throw ConfigError("sparsity step must lie in (0, 1)");
  const double d_real = 1.0 / step;
  const std::size_t d = static_cast<std::size_t>(std::llround(d_real));
  if (d < 2 || std::fabs(d_real - static_cast<double>(d)) > 1e-9)
    throw ConfigError("sparsity step must evenly divide 1, got " + std::to_string(step));
  CandidateRates r;
  r.step = step;
  r.count = d;
  r.rates.resize(d);
  for (std::size_t i = 1; i <= d; ++i)
    r.rates[i - 1] = static_cast<double>(i) / static_cast<double>(d);
  r.validate();
  return r;
}

void CandidateRates::validate() const {
  if (rates.size() != count || count < 2) throw ConfigError("candidate rates malformed");
  if (rates.back() != 1.0) throw ConfigError("last candidate rate must be exactly 1");
  for (std::size_t i = 0; i < count; ++i) {
    if (rates[i] <= 0.0 || (i > 0 && rates[i] <= rates[i - 1]))
      throw ConfigError("candidate rates must be positive and strictly ascending");
  }
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "row") return Granularity::kPerRow;
  if (s == "layer") return Granularity::kPerLayer;
  throw ConfigError("unknown granularity '" + s + "' (expected row|layer)");
}

const char* to_string(Granularity g) { return g == Granularity::kPerRow ? "row" : "layer"; }

SparsityParams SparsityParams::init(Granularity g, std::size_t out_features,
                                    const CandidateRates& rates, double target_alpha,
                                    double concentration) {
  if (!(target_alpha > 0.0 && target_alpha < 1.0))
    throw ConfigError("target sparsity must lie in (0, 1)");
  SparsityParams p;
  p.granularity = g;
  p.units = g == Granularity::kPerRow ? out_features : 1;
  p.d = rates.count;
  p.logits.assign(p.units * (p.d - 1), 0.0);
  // Bump on the free candidate closest to the target.
  std::size_t best = 0;
  for (std::size_t i = 0; i + 1 < rates.count; ++i)
    if (std::fabs(rates.rates[i] - target_alpha) < std::fabs(rates.rates[best] - target_alpha))
      best = i;
  for (std::size_t u = 0; u < p.units; ++u) p.logits[u * (p.d - 1) + best] = concentration;
  return p;
}

std::vector<double> SparsityParams::beta(std::size_t unit) const {
  const double* l = logits_of(unit);
  const std::size_t free = d - 1;
  double mx = l[0];
  for (std::size_t i = 1; i < free; ++i) mx = std::max(mx, l[i]);
  std::vector<double> b(d, 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < free; ++i) {
    b[i] = std::exp(l[i] - mx);
    sum += b[i];
  }
  const double inv = 1.0 / sum;
  for (std::size_t i = 0; i < free; ++i) b[i] *= inv;
  // b[d-1] stays 0: the pinned β_D slot.
  return b;
}

double effective_sparsity(const std::vector<double>& beta, const CandidateRates& rates) {
  rates.validate();
  if (beta.size() != rates.count)
    throw UsageError("beta length " + std::to_string(beta.size()) + " does not match D = " +
                     std::to_string(rates.count));
  double sum = 0.0;
  for (double b : beta) {
    if (b < -1e-12) throw UsageError("beta has a negative coefficient");
    sum += b;
  }
  if (std::fabs(sum - 1.0) > 1e-9) throw UsageError("beta does not sum to 1");
  if (beta.back() != 0.0) throw UsageError("beta_D must be pinned to 0");
  double alpha = 0.0;
  for (std::size_t i = 0; i < rates.count; ++i) alpha += beta[i] * rates.rates[i];
  return alpha;
}

BinLayout BinLayout::make(std::size_t in, const CandidateRates& rates) {
  BinLayout b;
  b.in = in;
  b.bounds.resize(rates.count + 1);
  // Exact: ⌊in·(k/D)⌋ in integer arithmetic.
  for (std::size_t k = 0; k <= rates.count; ++k) b.bounds[k] = (in * k) / rates.count;
  return b;
}

std::size_t BinLayout::bin_of_rank(std::size_t rank) const {
  if (rank >= in) throw UsageError("rank " + std::to_string(rank) + " out of range for width " +
                                   std::to_string(in));
  // Last k with bounds[k] <= rank; bins of zero width are skipped naturally.
  const auto it = std::upper_bound(bounds.begin(), bounds.end(), rank);
  return static_cast<std::size_t>(it - bounds.begin()) - 1;
}

double element_prune_prob(const std::vector<double>& beta, const CandidateRates& rates,
                          std::size_t rank, std::size_t in_features) {
  if (beta.size() != rates.count) throw UsageError("beta length does not match D");
  const BinLayout bins = BinLayout::make(in_features, rates);
  const std::size_t k = bins.bin_of_rank(rank);
  // Tail sum Σ_{d=k+1}^{D} β_d; the pinned β_D contributes nothing.
  double tail = 0.0;
  for (std::size_t d = k + 1; d <= rates.count; ++d) tail += beta[d - 1];
  return tail;
}

PruneMask PruneMask::all_ones(std::string name, std::size_t out, std::size_t in) {
  PruneMask m;
  m.layer_name = std::move(name);
  m.out = out;
  m.in = in;
  m.words.assign((out * in + 63) / 64, ~std::uint64_t{0});
  const std::size_t used = out * in;
  if (used % 64 != 0) m.words.back() = (std::uint64_t{1} << (used % 64)) - 1;
  m.zero_count = 0;
  return m;
}

void PruneMask::set(std::size_t o, std::size_t j, bool keep) {
  const std::size_t idx = o * in + j;
  const std::uint64_t bit = std::uint64_t{1} << (idx & 63);
  const bool was = words[idx >> 6] & bit;
  if (keep && !was) {
    words[idx >> 6] |= bit;
    --zero_count;
  } else if (!keep && was) {
    words[idx >> 6] &= ~bit;
    ++zero_count;
  }
}

void PruneMask::recount() {
  std::size_t ones = 0;
  for (std::uint64_t w : words) ones += static_cast<std::size_t>(__builtin_popcountll(w));
  zero_count = numel() - ones;
}

Tensor mask_to_tensor(const PruneMask& mask) {
  Tensor t = Tensor::zeros({mask.out, mask.in});
  double* d = t.mutable_data().data();
  for (std::size_t o = 0; o < mask.out; ++o)
    for (std::size_t j = 0; j < mask.in; ++j) d[o * mask.in + j] = mask.get(o, j) ? 1.0 : 0.0;
  return t;
}

PruneMask generate_mask(const SparsityParams& params, const CandidateRates& rates,
                        const LayerRanking& ranking, std::string layer_name,
                        MaskForwardRecord* record) {
  if (params.granularity == Granularity::kPerRow && params.units != ranking.out)
    throw UsageError("per-row params have " + std::to_string(params.units) +
                     " units, layer has " + std::to_string(ranking.out) + " rows");
  const std::size_t d = params.d;
  const BinLayout bins = BinLayout::make(ranking.in, rates);

  PruneMask mask = PruneMask::all_ones(std::move(layer_name), ranking.out, ranking.in);
  if (record) {
    record->valid = true;
    record->units = params.units;
    record->d = d;
    record->beta.assign(params.units * d, 0.0);
    record->alpha.assign(params.units, 0.0);
  }

  std::vector<double> beta, tail(d + 1, 0.0);
  std::size_t prune_upto = 0;  // cached for the per-layer case
  for (std::size_t o = 0; o < ranking.out; ++o) {
    const std::size_t unit = params.granularity == Granularity::kPerRow ? o : 0;
    if (params.granularity == Granularity::kPerRow || o == 0) {
      beta = params.beta(unit);
      double alpha = 0.0;
      for (std::size_t i = 0; i < d; ++i) alpha += beta[i] * rates.rates[i];
      // tail[k] = Σ_{e >= k} β_e, 1-based e; P of bin k is tail[k+1].
      tail[d] = beta[d - 1];
      for (std::size_t e = d; e-- > 1;) tail[e] = tail[e + 1] + beta[e - 1];
      // First bin whose pruning probability falls below α is kept; everything
      // before it is a pruned rank prefix.
      std::size_t kstar = d;  // P of the top bin is exactly 0 < α, so kstar <= d-1
      for (std::size_t k = 0; k < d; ++k) {
        if (tail[k + 1] < alpha) {
          kstar = k;
          break;
        }
      }
      prune_upto = bins.bounds[kstar];
      if (record) {
        std::copy(beta.begin(), beta.end(), record->beta.begin() + unit * d);
        record->alpha[unit] = alpha;
      }
    }
    for (std::size_t r = 0; r < prune_upto; ++r) mask.set(o, ranking.column_at(o, r), false);
  }
  return mask;
}

MaskBackwardResult mask_backward(const MaskForwardRecord& record, const SparsityParams& params,
                                 const CandidateRates& rates, const LayerRanking& ranking,
                                 const std::vector<double>& bit_grads) {
  if (!record.valid)
    throw UsageError("mask_backward without a matching generate_mask forward");
  if (record.units != params.units || record.d != params.d)
    throw UsageError("mask_backward record does not match the given params");
  if (bit_grads.size() != ranking.out * ranking.in)
    throw UsageError("bit gradient size does not match the layer");

  const std::size_t d = params.d;
  const BinLayout bins = BinLayout::make(ranking.in, rates);

  MaskBackwardResult res;
  res.grad_logits.assign(params.units * (d - 1), 0.0);
  res.grad_beta.assign(params.units * d, 0.0);

  // Per unit: S_k = Σ_{ranks in bin k} -g, then ∂L/∂β_e = Σ_{k<e} S_k.
  std::vector<double> bin_sums;
  auto flush_unit = [&](std::size_t unit, const std::vector<double>& sums) {
    double prefix = 0.0;
    double* gb = res.grad_beta.data() + unit * d;
    for (std::size_t e = 1; e < d; ++e) {
      prefix += sums[e - 1];
      gb[e - 1] = prefix;
    }
    // gb[d-1] stays 0: pinned parameter receives no gradient.
    const double* beta = record.beta.data() + unit * d;
    double dot = 0.0;
    for (std::size_t e = 0; e + 1 < d; ++e) dot += beta[e] * gb[e];
    double* gl = res.grad_logits.data() + unit * (d - 1);
    for (std::size_t e = 0; e + 1 < d; ++e) gl[e] = beta[e] * (gb[e] - dot);
  };

  if (params.granularity == Granularity::kPerRow) {
    for (std::size_t o = 0; o < ranking.out; ++o) {
      bin_sums.assign(d, 0.0);
      for (std::size_t k = 0; k < d; ++k)
        for (std::size_t r = bins.bounds[k]; r < bins.bounds[k + 1]; ++r)
          bin_sums[k] -= bit_grads[o * ranking.in + ranking.column_at(o, r)];
      flush_unit(o, bin_sums);
    }
  } else {
    bin_sums.assign(d, 0.0);
    for (std::size_t o = 0; o < ranking.out; ++o)
      for (std::size_t k = 0; k < d; ++k)
        for (std::size_t r = bins.bounds[k]; r < bins.bounds[k + 1]; ++r)
          bin_sums[k] -= bit_grads[o * ranking.in + ranking.column_at(o, r)];
    flush_unit(0, bin_sums);
  }
  return res;
}

SparsityPenalty sparsity_penalty(const std::vector<const PruneMask*>& masks, double target,
                                 std::size_t total_params) {
  std::size_t zeros = 0, numel = 0;
  for (const PruneMask* m : masks) {
    zeros += m->zero_count;
    numel += m->numel();
  }
  if (numel != total_params)
    throw UsageError("total params " + std::to_string(total_params) +
                     " does not match mask sizes " + std::to_string(numel));
  SparsityPenalty p;
  p.achieved = static_cast<double>(zeros) / static_cast<double>(total_params);
  const double gap = p.achieved - target;
  p.loss = gap * gap;
  // k(M) counts zeros, so ∂k/∂M_bit = -1 under the straight-through pass.
  p.bit_grad = -2.0 * gap / static_cast<double>(total_params);
  return p;
}

ParamCount count_learnable_params(const BlockConfig& cfg, Granularity g, std::size_t d) {
  const std::size_t outs[kNumPrunableLayers] = {cfg.d_model, cfg.d_model, cfg.d_model,
                                                cfg.d_model, cfg.d_ff,    cfg.d_ff,
                                                cfg.d_model};
  const std::size_t ins[kNumPrunableLayers] = {cfg.d_model, cfg.d_model, cfg.d_model,
                                               cfg.d_model, cfg.d_model, cfg.d_model,
                                               cfg.d_ff};
  ParamCount c;
  for (std::size_t i = 0; i < kNumPrunableLayers; ++i) {
    c.block_weights += outs[i] * ins[i];
    c.extra += g == Granularity::kPerRow ? d * outs[i] : d;
  }
  c.ratio = static_cast<double>(c.extra) / static_cast<double>(c.block_weights);
  return c;
}

// --- mask file I/O -----------------------------------------------------------

namespace {

constexpr char kMaskMagic[8] = {'B', 'E', 'S', 'A', 'M', 'A', 'S', 'K'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("mask file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw DataError("mask file truncated");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace

void write_mask(const std::string& path, const PruneMask& mask) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os.write(kMaskMagic, 8);
  put_u32(os, static_cast<std::uint32_t>(mask.out));
  put_u32(os, static_cast<std::uint32_t>(mask.in));
  const std::size_t n = mask.numel();
  const std::size_t nbytes = (n + 7) / 8;
  std::vector<unsigned char> bytes(nbytes, 0);
  for (std::size_t idx = 0; idx < n; ++idx) {
    const bool bit = (mask.words[idx >> 6] >> (idx & 63)) & 1u;
    if (bit) bytes[idx >> 3] |= static_cast<unsigned char>(1u << (idx & 7));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(nbytes));
  put_f64(os, mask.achieved_sparsity());
  if (!os) throw DataError("short write to " + path);
}

PruneMask read_mask(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMaskMagic, 8) != 0)
    throw DataError(path + " is not a mask file");
  PruneMask m;
  m.out = get_u32(is);
  m.in = get_u32(is);
  const std::size_t n = m.out * m.in;
  const std::size_t nbytes = (n + 7) / 8;
  std::vector<unsigned char> bytes(nbytes);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(nbytes));
  if (!is) throw DataError("mask file truncated: " + path);
  m.words.assign((n + 63) / 64, 0);
  for (std::size_t idx = 0; idx < n; ++idx)
    if ((bytes[idx >> 3] >> (idx & 7)) & 1u) m.words[idx >> 6] |= std::uint64_t{1} << (idx & 63);
  m.recount();
  const double stored = get_f64(is);
  if (std::fabs(stored - m.achieved_sparsity()) > 1e-12)
    throw DataError("mask file footer sparsity disagrees with bit content: " + path);
  return m;
}

}  // namespace besa
