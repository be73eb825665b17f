// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#include "besa/importance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace besa {

ImportanceMetric importance_metric_from_string(const std::string& s) {
  if (s == "wanda") return ImportanceMetric::kWanda;
  if (s == "magnitude") return ImportanceMetric::kMagnitude;
  throw ConfigError("unknown importance metric '" + s + "' (expected wanda|magnitude)");
}

const char* to_string(ImportanceMetric m) {
  return m == ImportanceMetric::kWanda ? "wanda" : "magnitude";
}

ActivationNormAccumulator::ActivationNormAccumulator(const BlockConfig& cfg) {
  const std::size_t widths[kNumPrunableLayers] = {
      cfg.d_model, cfg.d_model, cfg.d_model,  // q/k/v read the normed input
      cfg.d_model,                            // o reads the head concat
      cfg.d_model, cfg.d_model,               // gate/up read the normed h
      cfg.d_ff};                              // down reads the gated product
  for (std::size_t i = 0; i < kNumPrunableLayers; ++i) sumsq_[i].assign(widths[i], 0.0);
}

void ActivationNormAccumulator::accumulate(const BlockTrace& trace) {
  const Tensor* inputs[kNumPrunableLayers] = {
      &trace.attn_in, &trace.attn_in, &trace.attn_in, &trace.o_in,
      &trace.mlp_in,  &trace.mlp_in,  &trace.down_in};
  std::size_t tokens = 0;
  for (std::size_t layer = 0; layer < kNumPrunableLayers; ++layer) {
    const Tensor& z = *inputs[layer];
    if (z.shape().empty()) continue;  // half-block trace: other half untouched
    const std::size_t s = z.shape()[0], f = z.shape()[1];
    if (f != sumsq_[layer].size())
      throw ShapeError("activation trace width mismatch for layer " +
                       std::string(kPrunableLayerNames[layer]));
    const double* Z = z.data().data();
    for (std::size_t t = 0; t < s; ++t)
      for (std::size_t j = 0; j < f; ++j) sumsq_[layer][j] += Z[t * f + j] * Z[t * f + j];
    tokens = s;
  }
  tokens_ += tokens;
}

ActivationNorms ActivationNormAccumulator::finalize() const {
  ActivationNorms norms;
  norms.token_count = tokens_;
  for (std::size_t i = 0; i < kNumPrunableLayers; ++i) {
    norms.per_layer[i].resize(sumsq_[i].size());
    for (std::size_t j = 0; j < sumsq_[i].size(); ++j)
      norms.per_layer[i][j] = std::sqrt(sumsq_[i][j]);
  }
  return norms;
}

ActivationNorms collect_activation_norms(const ModelCheckpoint& m, std::size_t block_index,
                                         const std::vector<Tensor>& block_inputs) {
  if (block_index >= m.blocks.size())
    throw UsageError("block index " + std::to_string(block_index) + " out of range for " +
                     std::to_string(m.blocks.size()) + " blocks");
  ActivationNormAccumulator acc(m.config);
  for (const Tensor& x : block_inputs) {
    Tape tape;
    BlockTrace trace;
    block_forward(tape, m.config, m.blocks[block_index], x, {}, &trace);
    acc.accumulate(trace);
  }
  return acc.finalize();
}

Tensor compute_importance(const Tensor& w, const std::vector<double>& norms,
                          ImportanceMetric metric) {
  if (w.shape().size() != 2) throw ShapeError("importance expects a 2-d weight");
  const std::size_t out = w.shape()[0], in = w.shape()[1];
  if (metric == ImportanceMetric::kWanda && norms.size() != in)
    throw ShapeError("norms length " + std::to_string(norms.size()) + " does not match " +
                     std::to_string(in) + " input features");
  Tensor delta = Tensor::zeros({out, in});
  const double* W = w.data().data();
  double* D = delta.mutable_data().data();
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) {
      const double base = std::fabs(W[o * in + i]);
      D[o * in + i] = metric == ImportanceMetric::kWanda ? base * norms[i] : base;
    }
  return delta;
}

LayerRanking sort_rows(const Tensor& delta) {
  if (delta.shape().size() != 2) throw ShapeError("sort_rows expects a 2-d tensor");
  LayerRanking r;
  r.out = delta.shape()[0];
  r.in = delta.shape()[1];
  r.perm.resize(r.out * r.in);
  const double* D = delta.data().data();
  for (std::size_t o = 0; o < r.out; ++o) {
    std::uint32_t* row = r.perm.data() + o * r.in;
    std::iota(row, row + r.in, 0u);
    const double* drow = D + o * r.in;
    // Stable: ties keep ascending original column index.
    std::stable_sort(row, row + r.in,
                     [drow](std::uint32_t a, std::uint32_t b) { return drow[a] < drow[b]; });
  }
  return r;
}

ImportanceRanking rank_block(const BlockWeights& w, const ActivationNorms& norms,
                             ImportanceMetric metric) {
  ImportanceRanking r;
  r.metric = metric;
  for (std::size_t layer = 0; layer < kNumPrunableLayers; ++layer)
    r.per_layer[layer] =
        sort_rows(compute_importance(w.prunable(layer), norms.per_layer[layer], metric));
  return r;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("ranking file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_ranking(const std::string& path, const LayerRanking& ranking) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  put_u32(os, static_cast<std::uint32_t>(ranking.out));
  put_u32(os, static_cast<std::uint32_t>(ranking.in));
  for (std::uint32_t v : ranking.perm) put_u32(os, v);
}

LayerRanking read_ranking(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  LayerRanking r;
  r.out = get_u32(is);
  r.in = get_u32(is);
  r.perm.resize(r.out * r.in);
  for (std::uint32_t& v : r.perm) v = get_u32(is);
  for (std::size_t o = 0; o < r.out; ++o) {
    std::vector<bool> seen(r.in, false);
    for (std::size_t i = 0; i < r.in; ++i) {
      const std::uint32_t c = r.perm[o * r.in + i];
      if (c >= r.in || seen[c]) throw DataError("ranking file row " + std::to_string(o) +
                                                " is not a permutation");
      seen[c] = true;
    }
  }
  return r;
}

}  // namespace besa
