// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "besa/sparsity.hpp"
#include "support.hpp"

using besa::BinLayout;
using besa::CandidateRates;
using besa::Granularity;
using besa::LayerRanking;
using besa::MaskForwardRecord;
using besa::PruneMask;
using besa::SparsityParams;
using besa::Tensor;
namespace bt = besa::testing;

namespace {

CandidateRates rates4() {
  CandidateRates r;
  r.step = 0.25;
  r.count = 4;
  r.rates = {0.25, 0.5, 0.75, 1.0};
  return r;
}

SparsityParams params_with_beta(std::size_t units, const std::vector<double>& beta_free_log) {
  SparsityParams p;
  p.granularity = units == 1 ? Granularity::kPerLayer : Granularity::kPerRow;
  p.units = units;
  p.d = beta_free_log.size() + 1;
  p.logits.clear();
  for (std::size_t u = 0; u < units; ++u)
    p.logits.insert(p.logits.end(), beta_free_log.begin(), beta_free_log.end());
  return p;
}

// Free logits realizing an (almost) one-hot β at 1-based candidate d.
std::vector<double> one_hot_logits(std::size_t d_count, std::size_t d_star) {
  std::vector<double> l(d_count - 1, 0.0);
  l[d_star - 1] = 60.0;  // exp(60) dwarfs the rest; β is one-hot to ~1e-26
  return l;
}

LayerRanking random_ranking(std::mt19937_64& g, std::size_t out, std::size_t in) {
  return besa::sort_rows(bt::random_tensor(g, {out, in}, 0.0, 10.0));
}

// Brute force: keep-all mask, then clear the K least-important bits of each
// row straight from the importance values.
PruneMask brute_force_topk(const Tensor& delta, std::size_t k) {
  const std::size_t out = delta.shape()[0], in = delta.shape()[1];
  PruneMask m = PruneMask::all_ones("oracle", out, in);
  for (std::size_t o = 0; o < out; ++o) {
    std::vector<std::pair<double, std::size_t>> items;
    for (std::size_t j = 0; j < in; ++j) items.push_back({delta.at(o, j), j});
    std::stable_sort(items.begin(), items.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t r = 0; r < k; ++r) m.set(o, items[r].second, false);
  }
  return m;
}

}  // namespace

TEST_CASE("candidate rates construction") {
  auto r = CandidateRates::from_step(0.01);
  CHECK(r.count == 100);
  CHECK(r.rates.front() == doctest::Approx(0.01));
  CHECK(r.rates.back() == 1.0);
  CHECK_THROWS_AS(CandidateRates::from_step(0.0), besa::ConfigError);
  CHECK_THROWS_AS(CandidateRates::from_step(0.03), besa::ConfigError);
  CHECK_NOTHROW(CandidateRates::from_step(0.1));
  CHECK_NOTHROW(CandidateRates::from_step(0.001));
}

TEST_CASE("effective sparsity hand cases") {
  auto r = rates4();
  CHECK(besa::effective_sparsity({0, 1, 0, 0}, r) == doctest::Approx(0.5));
  CHECK(besa::effective_sparsity({0.2, 0.5, 0.3, 0}, r) == doctest::Approx(0.525));
  // Uniform over the D-1 free rates = their mean.
  const double third = 1.0 / 3.0;
  CHECK(besa::effective_sparsity({third, third, third, 0}, r) == doctest::Approx(0.5));
  CHECK_THROWS_AS(besa::effective_sparsity({0.5, 0.5, 0.5, 0}, r), besa::UsageError);
  CHECK_THROWS_AS(besa::effective_sparsity({0.2, 0.5, 0.2, 0.1}, r), besa::UsageError);
}

TEST_CASE("element prune probability bins") {
  auto r = rates4();
  const std::vector<double> beta = {0.2, 0.5, 0.3, 0.0};
  // in = 4: bounds {0,1,2,3,4}, so rank == bin.
  CHECK(besa::element_prune_prob(beta, r, 0, 4) == doctest::Approx(1.0));
  CHECK(besa::element_prune_prob(beta, r, 1, 4) == doctest::Approx(0.8));
  CHECK(besa::element_prune_prob(beta, r, 2, 4) == doctest::Approx(0.3));
  CHECK(besa::element_prune_prob(beta, r, 3, 4) == doctest::Approx(0.0));

  // One-hot β at d* = 3 is an indicator on bins k < d*.
  const std::vector<double> hot = {0, 0, 1, 0};
  CHECK(besa::element_prune_prob(hot, r, 0, 4) == 1.0);
  CHECK(besa::element_prune_prob(hot, r, 1, 4) == 1.0);
  CHECK(besa::element_prune_prob(hot, r, 2, 4) == 1.0);
  CHECK(besa::element_prune_prob(hot, r, 3, 4) == 0.0);

  CHECK_THROWS_AS(besa::element_prune_prob(beta, r, 4, 4), besa::UsageError);
}

TEST_CASE("bin layout merges on tiny layers") {
  auto r = CandidateRates::from_step(0.01);
  auto bins = BinLayout::make(7, r);
  CHECK(bins.bounds.front() == 0);
  CHECK(bins.bounds.back() == 7);
  // The single element of a 1-wide layer lands in the top bin.
  auto one = BinLayout::make(1, r);
  CHECK(one.bin_of_rank(0) == r.count - 1);
}

TEST_CASE("one-hot masks equal brute-force top-K removal") {
  auto g = bt::rng(41);
  auto rates = CandidateRates::from_step(0.01);
  for (std::size_t in : {7u, 16u, 64u, 100u, 173u}) {
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t out = 3;
      Tensor delta = bt::random_tensor(g, {out, in}, 0.0, 10.0);
      auto ranking = besa::sort_rows(delta);
      const std::size_t d_star = 1 + g() % (rates.count - 1);
      auto params = params_with_beta(out, one_hot_logits(rates.count, d_star));
      PruneMask got = besa::generate_mask(params, rates, ranking, "t");
      const std::size_t k = (in * d_star) / rates.count;
      PruneMask want = brute_force_topk(delta, k);
      CHECK(got.words == want.words);
      CHECK(got.zero_count == out * k);
    }
  }
}

TEST_CASE("worked D=4 mask example achieves 0.5") {
  auto rates = rates4();
  auto g = bt::rng(43);
  const std::size_t in = 8, out = 2;
  auto ranking = random_ranking(g, out, in);
  // β = {0.2, 0.5, 0.3, 0} via log(β) logits (softmax recovers them).
  auto params = params_with_beta(out, {std::log(0.2), std::log(0.5), std::log(0.3)});
  MaskForwardRecord rec;
  PruneMask m = besa::generate_mask(params, rates, ranking, "t", &rec);
  CHECK(rec.alpha[0] == doctest::Approx(0.525));
  // P of bins 0,1 = {1.0, 0.8} >= α, so ranks [0,4) of each row are pruned.
  CHECK(m.achieved_sparsity() == doctest::Approx(0.5));
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t r = 0; r < in; ++r)
      CHECK(m.get(o, ranking.column_at(o, r)) == (r >= 4));
}

TEST_CASE("small-rate case prunes about one percent") {
  auto rates = CandidateRates::from_step(0.01);
  auto g = bt::rng(47);
  auto ranking = random_ranking(g, 4, 200);
  auto params = params_with_beta(4, one_hot_logits(rates.count, 1));
  PruneMask m = besa::generate_mask(params, rates, ranking, "t");
  CHECK(m.achieved_sparsity() == doctest::Approx(0.01));
}

TEST_CASE("mask backward: zero upstream gives zero gradients") {
  auto rates = rates4();
  auto g = bt::rng(53);
  auto ranking = random_ranking(g, 3, 8);
  auto params = params_with_beta(3, {0.2, -0.4, 0.1});
  MaskForwardRecord rec;
  besa::generate_mask(params, rates, ranking, "t", &rec);
  std::vector<double> zeros(3 * 8, 0.0);
  auto res = besa::mask_backward(rec, params, rates, ranking, zeros);
  for (double v : res.grad_logits) CHECK(v == 0.0);
  for (double v : res.grad_beta) CHECK(v == 0.0);
}

TEST_CASE("mask backward matches the hand-expanded STE chain") {
  auto rates = rates4();
  // δ row {1.0, 3.0, 0.5, 2.0} ranks ascending as columns [2, 0, 3, 1].
  Tensor delta = Tensor::from({1, 4}, {1.0, 3.0, 0.5, 2.0});
  auto ranking = besa::sort_rows(delta);
  REQUIRE(ranking.column_at(0, 0) == 2);
  REQUIRE(ranking.column_at(0, 1) == 0);
  REQUIRE(ranking.column_at(0, 2) == 3);
  REQUIRE(ranking.column_at(0, 3) == 1);

  const std::vector<double> l = {0.1, -0.2, 0.3};
  auto params = params_with_beta(1, l);
  MaskForwardRecord rec;
  besa::generate_mask(params, rates, ranking, "t", &rec);

  const std::vector<double> g = {0.5, -1.0, 2.0, 0.25};  // upstream, original columns
  auto res = besa::mask_backward(rec, params, rates, ranking, g);

  // Hand expansion of the declared convention. β from softmax of l:
  double e0 = std::exp(l[0]), e1 = std::exp(l[1]), e2 = std::exp(l[2]);
  double z = e0 + e1 + e2;
  double b[3] = {e0 / z, e1 / z, e2 / z};
  // Sorted-space upstream: gs[r] = g[perm[r]] = {2.0, 0.5, 0.25, -1.0}.
  // S_k = -gs[k]; grad_beta[d] = Σ_{k<d} S_k.
  double gb1 = -2.0;
  double gb2 = -2.0 - 0.5;
  double gb3 = -2.0 - 0.5 - 0.25;
  double dot = b[0] * gb1 + b[1] * gb2 + b[2] * gb3;
  CHECK(res.grad_beta[0] == doctest::Approx(gb1).epsilon(1e-12));
  CHECK(res.grad_beta[1] == doctest::Approx(gb2).epsilon(1e-12));
  CHECK(res.grad_beta[2] == doctest::Approx(gb3).epsilon(1e-12));
  CHECK(res.grad_beta[3] == 0.0);  // pinned slot
  CHECK(res.grad_logits[0] == doctest::Approx(b[0] * (gb1 - dot)).epsilon(1e-12));
  CHECK(res.grad_logits[1] == doctest::Approx(b[1] * (gb2 - dot)).epsilon(1e-12));
  CHECK(res.grad_logits[2] == doctest::Approx(b[2] * (gb3 - dot)).epsilon(1e-12));
}

TEST_CASE("single-element layer: the lone weight sits in the top bin") {
  auto rates = CandidateRates::from_step(0.1);
  Tensor delta = Tensor::from({1, 1}, {3.0});
  auto ranking = besa::sort_rows(delta);
  auto params = params_with_beta(1, {0.5, -0.5, 0.1, 0.2, -0.4, 0.3, 0.0, 0.7, -0.1});
  MaskForwardRecord rec;
  PruneMask m = besa::generate_mask(params, rates, ranking, "t", &rec);
  CHECK(m.get(0, 0));
  CHECK(m.zero_count == 0);
  auto res = besa::mask_backward(rec, params, rates, ranking, {1.7});
  // The element is never pruned, so no gradient path reaches any β.
  for (double v : res.grad_logits) CHECK(v == 0.0);
}

TEST_CASE("mask backward without a forward is a usage error") {
  auto rates = rates4();
  auto g = bt::rng(59);
  auto ranking = random_ranking(g, 2, 8);
  auto params = params_with_beta(2, {0.0, 0.0, 0.0});
  MaskForwardRecord rec;  // never filled by generate_mask
  std::vector<double> grads(16, 1.0);
  CHECK_THROWS_AS(besa::mask_backward(rec, params, rates, ranking, grads), besa::UsageError);
}

TEST_CASE("sparsity penalty values and direction") {
  PruneMask a = PruneMask::all_ones("a", 4, 5);
  PruneMask b = PruneMask::all_ones("b", 2, 5);
  for (std::size_t j = 0; j < 5; ++j) a.set(0, j, false);  // 5 zeros of 20
  for (std::size_t j = 0; j < 5; ++j) b.set(1, j, false);  // 5 zeros of 10
  // achieved = 10/30
  auto p = besa::sparsity_penalty({&a, &b}, 10.0 / 30.0, 30);
  CHECK(p.loss == doctest::Approx(0.0));

  auto q = besa::sparsity_penalty({&a, &b}, 1.0 / 3.0 - 0.1, 30);
  CHECK(q.loss == doctest::Approx(0.01));
  // achieved > target pushes bits up (keep more): d(loss)/d(bit) < 0.
  CHECK(q.bit_grad < 0.0);
  auto u = besa::sparsity_penalty({&a, &b}, 1.0 / 3.0 + 0.1, 30);
  CHECK(u.bit_grad > 0.0);

  CHECK_THROWS_AS(besa::sparsity_penalty({&a}, 0.5, 30), besa::UsageError);
}

TEST_CASE("one plain gradient step moves achieved sparsity toward the target") {
  auto rates = CandidateRates::from_step(0.1);
  auto g = bt::rng(61);
  const std::size_t out = 8, in = 40;
  auto ranking = random_ranking(g, out, in);
  SparsityParams params =
      SparsityParams::init(Granularity::kPerRow, out, rates, 0.3, 4.0);

  MaskForwardRecord rec;
  PruneMask m = besa::generate_mask(params, rates, ranking, "t", &rec);
  const double target = 0.6;
  auto pen = besa::sparsity_penalty({&m}, target, out * in);
  const double gap0 = std::fabs(pen.achieved - target);

  std::vector<double> bit_grads(out * in, pen.bit_grad);
  auto back = besa::mask_backward(rec, params, rates, ranking, bit_grads);
  for (std::size_t i = 0; i < params.logits.size(); ++i)
    params.logits[i] -= 2000.0 * back.grad_logits[i];  // one large plain GD step

  PruneMask m2 = besa::generate_mask(params, rates, ranking, "t");
  auto pen2 = besa::sparsity_penalty({&m2}, target, out * in);
  CHECK(std::fabs(pen2.achieved - target) < gap0);
}

TEST_CASE("random-β properties: monotone P, prefix masks, quantized sparsity, safe top bin") {
  auto g = bt::rng(67);
  auto rates = CandidateRates::from_step(0.01);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t in = 5 + g() % 200;
    const std::size_t out = 1 + g() % 4;
    auto ranking = random_ranking(g, out, in);
    SparsityParams params;
    params.granularity = Granularity::kPerRow;
    params.units = out;
    params.d = rates.count;
    params.logits = bt::random_values(g, out * (rates.count - 1), -6.0, 6.0);

    MaskForwardRecord rec;
    PruneMask m = besa::generate_mask(params, rates, ranking, "t", &rec);
    const BinLayout bins = BinLayout::make(in, rates);

    for (std::size_t o = 0; o < out; ++o) {
      const std::vector<double> beta = params.beta(o);
      // Simplex closure with the pinned slot.
      double sum = 0.0;
      for (double b : beta) sum += b;
      CHECK(std::fabs(sum - 1.0) <= 1e-12);
      CHECK(beta.back() == 0.0);
      const double alpha = rec.alpha[o];
      CHECK(alpha > 0.0);
      CHECK(alpha <= rates.rates[rates.count - 2]);

      // P non-increasing in rank.
      double prev = 2.0;
      for (std::size_t r = 0; r < in; ++r) {
        const double p = besa::element_prune_prob(beta, rates, r, in);
        CHECK(p <= prev + 1e-15);
        prev = p;
      }
      // Pruned set is a rank prefix; top bin realized at the row tail is kept.
      std::size_t first_kept = in;
      for (std::size_t r = 0; r < in; ++r) {
        if (m.get(o, ranking.column_at(o, r))) {
          first_kept = r;
          break;
        }
      }
      for (std::size_t r = first_kept; r < in; ++r)
        CHECK(m.get(o, ranking.column_at(o, r)));
      CHECK(first_kept <= bins.bounds[rates.count - 1]);  // most-important bin survives

      // Achieved row sparsity is one of the candidate quantiles.
      std::size_t zeros = 0;
      for (std::size_t j = 0; j < in; ++j) zeros += m.get(o, j) ? 0 : 1;
      bool quantile = false;
      for (std::size_t k = 0; k <= rates.count; ++k)
        if (bins.bounds[k] == zeros) quantile = true;
      CHECK(quantile);
    }
  }
}

TEST_CASE("parameter counting matches the published arithmetic") {
  // Shapes of the block the published 2.10% figure describes
  // (d_model 4096, d_ff 11008, seven projections).
  besa::BlockConfig b7{4096, 32, 11008, 2048};
  auto per_row = besa::count_learnable_params(b7, Granularity::kPerRow, 100);
  CHECK(per_row.block_weights == 202375168);
  CHECK(per_row.ratio * 100.0 == doctest::Approx(2.10).epsilon(0.01));
  auto per_layer = besa::count_learnable_params(b7, Granularity::kPerLayer, 100);
  CHECK(per_layer.extra == 700);
  CHECK(per_layer.ratio * 100.0 == doctest::Approx(0.000346).epsilon(0.01));

  // Toy config, exact hand count: extra = 100·(4·64 + 2·172 + 64) = 66400,
  // weights = 4·64² + 3·64·172 = 49408.
  besa::BlockConfig toy{64, 4, 172, 128};
  auto t = besa::count_learnable_params(toy, Granularity::kPerRow, 100);
  CHECK(t.extra == 66400);
  CHECK(t.block_weights == 49408);
  auto tl = besa::count_learnable_params(toy, Granularity::kPerLayer, 100);
  CHECK(tl.extra == 700);
}

TEST_CASE("mask file round-trip is exact") {
  auto g = bt::rng(71);
  auto rates = CandidateRates::from_step(0.1);
  auto ranking = random_ranking(g, 6, 37);
  SparsityParams params = SparsityParams::init(Granularity::kPerRow, 6, rates, 0.4, 6.0);
  PruneMask m = besa::generate_mask(params, rates, ranking, "q_proj");

  const auto path = (std::filesystem::temp_directory_path() / "besa_mask_test.bin").string();
  besa::write_mask(path, m);
  // 16-byte header + packed bits + 8-byte footer.
  CHECK(std::filesystem::file_size(path) == 16 + (6 * 37 + 7) / 8 + 8);
  PruneMask back = besa::read_mask(path);
  CHECK(back.out == m.out);
  CHECK(back.in == m.in);
  CHECK(back.words == m.words);
  CHECK(back.zero_count == m.zero_count);

  std::filesystem::resize_file(path, 20);
  CHECK_THROWS_AS(besa::read_mask(path), besa::DataError);
  std::filesystem::remove(path);
}

TEST_CASE("per-layer granularity shares one β across rows") {
  auto g = bt::rng(73);
  auto rates = CandidateRates::from_step(0.1);
  auto ranking = random_ranking(g, 5, 30);
  SparsityParams layer_params = SparsityParams::init(Granularity::kPerLayer, 5, rates, 0.5, 8.0);
  CHECK(layer_params.units == 1);
  PruneMask m = besa::generate_mask(layer_params, rates, ranking, "t");
  // Every row prunes the same count.
  std::size_t per_row = 0;
  for (std::size_t j = 0; j < 30; ++j) per_row += m.get(0, j) ? 0 : 1;
  for (std::size_t o = 1; o < 5; ++o) {
    std::size_t z = 0;
    for (std::size_t j = 0; j < 30; ++j) z += m.get(o, j) ? 0 : 1;
    CHECK(z == per_row);
  }
}
