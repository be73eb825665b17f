// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#ifndef BESA_QUANT_HPP
#define BESA_QUANT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "besa/tensor.hpp"

namespace besa {

/// Min-max weight-only fake quantization with learnable per-output-channel
/// clipping strengths γ₀, γ₁ ∈ [0,1]. Per channel:
///   h = (γ₁·max − γ₀·min) / (2^N − 1),   z = -⌊γ₀·min / h⌉ clamped to [0, 2^N-1]
///   code = clamp(⌊w/h⌉ + z, 0, 2^N − 1),  dequant = (code − z)·h
/// Rounding is half-to-even throughout.
struct QuantParams {
  std::size_t bits = 4;
  std::vector<double> gamma0, gamma1;  // per output channel

  static QuantParams plain(std::size_t bits, std::size_t out_channels);  // γ = 1
  void validate(std::size_t out_channels) const;
};

struct ChannelQuant {
  double h = 0.0;
  double z = 0.0;
  bool passthrough = false;  // degenerate range: channel left unquantized
};

struct QuantResult {
  Tensor dequant;
  std::vector<ChannelQuant> channels;
  std::vector<std::int32_t> codes;  // row-major; zeros on passthrough rows
  // Per-element clip partials (straight-through round/clamp, analytic h and
  // z chain); filled only when requested.
  std::vector<double> dq_dg0, dq_dg1;
  std::size_t passthrough_count = 0;
};

QuantResult quantize(const Tensor& w, const QuantParams& q, bool with_clip_grads = false);

/// Per-channel γ gradients from d(loss)/d(dequantized weight).
struct ClipGrads {
  std::vector<double> g0, g1;
};
ClipGrads clip_gradients(const QuantResult& r, std::size_t out, std::size_t in,
                         const std::vector<double>& dequant_grad);

// Quantized export: header (magic "BESAQNT1", out/in/bits as 32-bit LE),
// per-channel h (f64 LE), z (i32 LE), passthrough flags (u8), packed N-bit
// codes LSB-first, then raw f64 rows for each passthrough channel.
struct QuantFile {
  std::size_t out = 0, in = 0, bits = 0;
  std::vector<ChannelQuant> channels;
  std::vector<std::int32_t> codes;
  std::vector<double> passthrough_rows;  // concatenated, in passthrough order
};

void write_quant(const std::string& path, const Tensor& w, const QuantResult& r,
                 std::size_t bits);
QuantFile read_quant(const std::string& path);

/// Reconstructs the dequantized weights from a loaded file.
Tensor dequantize(const QuantFile& f);

}  // namespace besa

#endif  // BESA_QUANT_HPP
