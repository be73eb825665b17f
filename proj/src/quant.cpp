// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#include "besa/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace besa {

namespace {

// IEEE default rounding: nearest, ties to even.
double round_half_even(double x) { return std::nearbyint(x); }

constexpr double kDegenerateScale = 1e-300;

}  // namespace

QuantParams QuantParams::plain(std::size_t bits, std::size_t out_channels) {
  QuantParams q;
  q.bits = bits;
  q.gamma0.assign(out_channels, 1.0);
  q.gamma1.assign(out_channels, 1.0);
  return q;
}

void QuantParams::validate(std::size_t out_channels) const {
  if (bits < 2 || bits > 8) throw ConfigError("quant bits must lie in [2, 8]");
  if (gamma0.size() != out_channels || gamma1.size() != out_channels)
    throw ShapeError("quant clip vectors do not match the channel count");
  for (std::size_t c = 0; c < out_channels; ++c)
    if (gamma0[c] < 0.0 || gamma0[c] > 1.0 || gamma1[c] < 0.0 || gamma1[c] > 1.0)
      throw ConfigError("clip strengths must lie in [0, 1]");
}

QuantResult quantize(const Tensor& w, const QuantParams& q, bool with_clip_grads) {
  if (w.shape().size() != 2) throw ShapeError("quantize expects a 2-d weight");
  const std::size_t out = w.shape()[0], in = w.shape()[1];
  q.validate(out);
  const double levels = static_cast<double>((1u << q.bits) - 1);

  QuantResult r;
  r.dequant = Tensor::zeros({out, in});
  r.channels.resize(out);
  r.codes.assign(out * in, 0);
  if (with_clip_grads) {
    r.dq_dg0.assign(out * in, 0.0);
    r.dq_dg1.assign(out * in, 0.0);
  }

  const double* W = w.data().data();
  double* Q = r.dequant.mutable_data().data();

  for (std::size_t c = 0; c < out; ++c) {
    const double* row = W + c * in;
    double mn = row[0], mx = row[0];
    for (std::size_t i = 1; i < in; ++i) {
      mn = std::min(mn, row[i]);
      mx = std::max(mx, row[i]);
    }
    const double g0 = q.gamma0[c], g1 = q.gamma1[c];
    const double h = (g1 * mx - g0 * mn) / levels;
    ChannelQuant& ch = r.channels[c];
    if (!(h > kDegenerateScale)) {
      // Constant (or fully clipped-away) channel: pass through unquantized.
      ch.passthrough = true;
      ++r.passthrough_count;
      for (std::size_t i = 0; i < in; ++i) Q[c * in + i] = row[i];
      continue;
    }
    const double z_raw = -g0 * mn / h;
    double z = round_half_even(z_raw);
    const bool z_clamped = z < 0.0 || z > levels;
    z = std::clamp(z, 0.0, levels);
    ch.h = h;
    ch.z = z;

    const double dh_dg0 = -mn / levels;
    const double dh_dg1 = mx / levels;
    // STE through the z round; a clamped z is locally constant.
    const double dz_dg0 = z_clamped ? 0.0 : -mn / h;
    const double dz_dh = z_clamped ? 0.0 : g0 * mn / (h * h);

    for (std::size_t i = 0; i < in; ++i) {
      const double raw = round_half_even(row[i] / h) + z;
      const bool in_range = raw >= 0.0 && raw <= levels;
      const double code = std::clamp(raw, 0.0, levels);
      r.codes[c * in + i] = static_cast<std::int32_t>(code);
      Q[c * in + i] = (code - z) * h;
      if (with_clip_grads) {
        double dq0, dq1;
        if (in_range) {
          // dQ/dγ = (code − z − w/h) · dh/dγ: the z paths cancel.
          const double resid = (code - z) - row[i] / h;
          dq0 = resid * dh_dg0;
          dq1 = resid * dh_dg1;
        } else {
          // Clamped code is constant; only the explicit h and z paths remain.
          dq0 = (code - z) * dh_dg0 - h * (dz_dg0 + dz_dh * dh_dg0);
          dq1 = (code - z) * dh_dg1 - h * (dz_dh * dh_dg1);
        }
        r.dq_dg0[c * in + i] = dq0;
        r.dq_dg1[c * in + i] = dq1;
      }
    }
  }
  return r;
}

ClipGrads clip_gradients(const QuantResult& r, std::size_t out, std::size_t in,
                         const std::vector<double>& dequant_grad) {
  if (r.dq_dg0.size() != out * in)
    throw UsageError("clip_gradients requires quantize(..., with_clip_grads=true)");
  if (dequant_grad.size() != out * in)
    throw UsageError("dequant gradient size does not match the layer");
  ClipGrads g;
  g.g0.assign(out, 0.0);
  g.g1.assign(out, 0.0);
  for (std::size_t c = 0; c < out; ++c) {
    if (r.channels[c].passthrough) continue;
    double a0 = 0.0, a1 = 0.0;
    for (std::size_t i = 0; i < in; ++i) {
      a0 += dequant_grad[c * in + i] * r.dq_dg0[c * in + i];
      a1 += dequant_grad[c * in + i] * r.dq_dg1[c * in + i];
    }
    g.g0[c] = a0;
    g.g1[c] = a1;
  }
  return g;
}

// --- export ------------------------------------------------------------------

namespace {

constexpr char kQuantMagic[8] = {'B', 'E', 'S', 'A', 'Q', 'N', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("quant file truncated");
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
  if (!is) throw DataError("quant file truncated");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace

void write_quant(const std::string& path, const Tensor& w, const QuantResult& r,
                 std::size_t bits) {
  const std::size_t out = w.shape()[0], in = w.shape()[1];
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os.write(kQuantMagic, 8);
  put_u32(os, static_cast<std::uint32_t>(out));
  put_u32(os, static_cast<std::uint32_t>(in));
  put_u32(os, static_cast<std::uint32_t>(bits));
  for (std::size_t c = 0; c < out; ++c) put_f64(os, r.channels[c].h);
  for (std::size_t c = 0; c < out; ++c)
    put_u32(os, static_cast<std::uint32_t>(static_cast<std::int32_t>(r.channels[c].z)));
  for (std::size_t c = 0; c < out; ++c)
    os.put(r.channels[c].passthrough ? char(1) : char(0));
  // Packed N-bit codes, LSB-first across the byte stream.
  const std::size_t total_bits = out * in * bits;
  std::vector<unsigned char> packed((total_bits + 7) / 8, 0);
  std::size_t bitpos = 0;
  for (std::size_t idx = 0; idx < out * in; ++idx) {
    const std::uint32_t code = static_cast<std::uint32_t>(r.codes[idx]);
    for (std::size_t b = 0; b < bits; ++b, ++bitpos)
      if ((code >> b) & 1u) packed[bitpos >> 3] |= static_cast<unsigned char>(1u << (bitpos & 7));
  }
  os.write(reinterpret_cast<const char*>(packed.data()),
           static_cast<std::streamsize>(packed.size()));
  for (std::size_t c = 0; c < out; ++c)
    if (r.channels[c].passthrough)
      for (std::size_t i = 0; i < in; ++i) put_f64(os, w.at(c, i));
  if (!os) throw DataError("short write to " + path);
}

QuantFile read_quant(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kQuantMagic, 8) != 0)
    throw DataError(path + " is not a quantized-layer file");
  QuantFile f;
  f.out = get_u32(is);
  f.in = get_u32(is);
  f.bits = get_u32(is);
  if (f.bits < 2 || f.bits > 8) throw DataError("quant file has invalid bit width");
  f.channels.resize(f.out);
  for (std::size_t c = 0; c < f.out; ++c) f.channels[c].h = get_f64(is);
  for (std::size_t c = 0; c < f.out; ++c)
    f.channels[c].z = static_cast<double>(static_cast<std::int32_t>(get_u32(is)));
  for (std::size_t c = 0; c < f.out; ++c) {
    int flag = is.get();
    if (flag == EOF) throw DataError("quant file truncated");
    f.channels[c].passthrough = flag != 0;
  }
  const std::size_t total_bits = f.out * f.in * f.bits;
  std::vector<unsigned char> packed((total_bits + 7) / 8);
  is.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
  if (!is) throw DataError("quant file truncated: " + path);
  f.codes.assign(f.out * f.in, 0);
  std::size_t bitpos = 0;
  for (std::size_t idx = 0; idx < f.out * f.in; ++idx) {
    std::uint32_t code = 0;
    for (std::size_t b = 0; b < f.bits; ++b, ++bitpos)
      if ((packed[bitpos >> 3] >> (bitpos & 7)) & 1u) code |= 1u << b;
    f.codes[idx] = static_cast<std::int32_t>(code);
  }
  std::size_t n_pass = 0;
  for (const auto& ch : f.channels) n_pass += ch.passthrough ? 1 : 0;
  f.passthrough_rows.resize(n_pass * f.in);
  for (double& v : f.passthrough_rows) v = get_f64(is);
  return f;
}

Tensor dequantize(const QuantFile& f) {
  Tensor w = Tensor::zeros({f.out, f.in});
  double* W = w.mutable_data().data();
  std::size_t pass_idx = 0;
  for (std::size_t c = 0; c < f.out; ++c) {
    if (f.channels[c].passthrough) {
      for (std::size_t i = 0; i < f.in; ++i)
        W[c * f.in + i] = f.passthrough_rows[pass_idx * f.in + i];
      ++pass_idx;
    } else {
      const double h = f.channels[c].h, z = f.channels[c].z;
      for (std::size_t i = 0; i < f.in; ++i)
        W[c * f.in + i] = (static_cast<double>(f.codes[c * f.in + i]) - z) * h;
    }
  }
  return w;
}

}  // namespace besa
