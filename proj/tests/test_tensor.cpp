// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "besa/tensor.hpp"
#include "support.hpp"

using besa::Tape;
using besa::Tensor;
namespace bt = besa::testing;

TEST_CASE("matmul identity and hand cases") {
  Tape tape;
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 2}, {3, -1, 2, 5});
  Tensor r = besa::matmul(tape, eye, a);
  CHECK(r.data() == a.data());

  Tensor b = Tensor::from({2, 1}, {0, 1});
  Tensor c = besa::matmul(tape, Tensor::from({2, 2}, {1, 2, 3, 4}), b);
  CHECK(c.at(0, 0) == doctest::Approx(2));
  CHECK(c.at(1, 0) == doctest::Approx(4));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    besa::matmul(tape, a, b);
    FAIL("expected ShapeError");
  } catch (const besa::ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central finite differences") {
  auto g = bt::rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t m = 3, k = 4, n = 2;
    std::vector<double> a0 = bt::random_values(g, m * k);
    Tensor b = bt::random_tensor(g, {k, n});

    auto loss_of = [&](const std::vector<double>& av) {
      Tape t;
      Tensor a = Tensor::from({m, k}, av);
      return besa::sum_all(t, besa::matmul(t, a, b)).item();
    };
    std::vector<double> fd = bt::central_differences(loss_of, a0);

    Tape tape;
    Tensor a = Tensor::from({m, k}, a0).set_requires_grad(true);
    Tensor loss = besa::sum_all(tape, besa::matmul(tape, a, b));
    tape.backward(loss);
    CHECK(bt::max_rel_error(a.grad(), fd) <= 1e-6);
  }
}

TEST_CASE("linear equals matmul against transposed weight") {
  auto g = bt::rng(5);
  Tape tape;
  Tensor x = bt::random_tensor(g, {3, 4});
  Tensor w = bt::random_tensor(g, {5, 4});
  Tensor via_linear = besa::linear(tape, x, w);
  Tensor via_matmul = besa::matmul(tape, x, besa::transpose(tape, w));
  for (std::size_t i = 0; i < via_linear.numel(); ++i)
    CHECK(via_linear.data()[i] == doctest::Approx(via_matmul.data()[i]).epsilon(1e-12));
}

TEST_CASE("linear gradients match finite differences for both operands") {
  auto g = bt::rng(17);
  const std::size_t s = 2, in = 5, out = 3;
  std::vector<double> x0 = bt::random_values(g, s * in);
  std::vector<double> w0 = bt::random_values(g, out * in);

  auto loss_x = [&](const std::vector<double>& xv) {
    Tape t;
    return besa::frobenius_sq(t, besa::linear(t, Tensor::from({s, in}, xv), Tensor::from({out, in}, w0))).item();
  };
  auto loss_w = [&](const std::vector<double>& wv) {
    Tape t;
    return besa::frobenius_sq(t, besa::linear(t, Tensor::from({s, in}, x0), Tensor::from({out, in}, wv))).item();
  };
  std::vector<double> fdx = bt::central_differences(loss_x, x0);
  std::vector<double> fdw = bt::central_differences(loss_w, w0);

  Tape tape;
  Tensor x = Tensor::from({s, in}, x0).set_requires_grad(true);
  Tensor w = Tensor::from({out, in}, w0).set_requires_grad(true);
  tape.backward(besa::frobenius_sq(tape, besa::linear(tape, x, w)));
  CHECK(bt::max_rel_error(x.grad(), fdx) <= 1e-6);
  CHECK(bt::max_rel_error(w.grad(), fdw) <= 1e-6);
}

TEST_CASE("elementwise basics") {
  Tape tape;
  CHECK(besa::silu(tape, Tensor::scalar(0.0)).item() == 0.0);
  CHECK(besa::square(tape, Tensor::scalar(3.0)).item() == 9.0);

  Tensor a = Tensor::from({2}, {1, 2});
  Tensor s = besa::mul(tape, a, Tensor::scalar(3.0));
  CHECK(s.data()[0] == 3);
  CHECK(s.data()[1] == 6);

  CHECK_THROWS_AS(besa::add(tape, Tensor::zeros({2, 2}), Tensor::zeros({3})), besa::ShapeError);
}

TEST_CASE("silu gradient matches finite differences") {
  auto g = bt::rng(23);
  std::vector<double> a0 = bt::random_values(g, 12, -3.0, 3.0);
  auto loss_of = [&](const std::vector<double>& av) {
    Tape t;
    return besa::sum_all(t, besa::silu(t, Tensor::from({12}, av))).item();
  };
  std::vector<double> fd = bt::central_differences(loss_of, a0);

  Tape tape;
  Tensor a = Tensor::from({12}, a0).set_requires_grad(true);
  tape.backward(besa::sum_all(tape, besa::silu(tape, a)));
  CHECK(bt::max_rel_error(a.grad(), fd) <= 1e-6);
}

TEST_CASE("softmax rows") {
  Tape tape;
  Tensor eq = besa::softmax_rows(tape, Tensor::from({1, 4}, {0.7, 0.7, 0.7, 0.7}));
  for (std::size_t j = 0; j < 4; ++j) CHECK(eq.data()[j] == doctest::Approx(0.25).epsilon(1e-14));

  Tensor t = besa::softmax_rows(tape, Tensor::from({1, 2}, {0.0, std::log(3.0)}));
  CHECK(t.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(t.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

  auto g = bt::rng(3);
  Tensor r = besa::softmax_rows(tape, bt::random_tensor(g, {5, 7}, -30.0, 30.0));
  for (std::size_t i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 7; ++j) sum += r.at(i, j);
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
  }

  Tensor bad = Tensor::from({1, 2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(besa::softmax_rows(tape, bad), besa::NumericError);
}

TEST_CASE("softmax vector-Jacobian product matches finite differences") {
  auto g = bt::rng(31);
  const std::size_t m = 3, n = 5;
  std::vector<double> a0 = bt::random_values(g, m * n, -2.0, 2.0);
  Tensor v = bt::random_tensor(g, {m, n});

  auto loss_of = [&](const std::vector<double>& av) {
    Tape t;
    return besa::sum_all(t, besa::mul(t, besa::softmax_rows(t, Tensor::from({m, n}, av)), v)).item();
  };
  std::vector<double> fd = bt::central_differences(loss_of, a0);

  Tape tape;
  Tensor a = Tensor::from({m, n}, a0).set_requires_grad(true);
  tape.backward(besa::sum_all(tape, besa::mul(tape, besa::softmax_rows(tape, a), v)));
  CHECK(bt::max_rel_error(a.grad(), fd) <= 1e-6);
}

TEST_CASE("rms_norm basics") {
  Tape tape;
  Tensor ones = Tensor::full({3}, 1.0);
  Tensor row = besa::rms_norm(tape, Tensor::from({1, 3}, {2, 2, 2}), ones);
  for (std::size_t j = 0; j < 3; ++j) CHECK(row.data()[j] == doctest::Approx(1.0).epsilon(1e-6));
  Tensor neg = besa::rms_norm(tape, Tensor::from({1, 3}, {-2, -2, -2}), ones);
  for (std::size_t j = 0; j < 3; ++j) CHECK(neg.data()[j] == doctest::Approx(-1.0).epsilon(1e-6));

  Tensor zero_gain = besa::rms_norm(tape, Tensor::from({1, 3}, {4, -1, 7}), Tensor::zeros({3}));
  for (double x : zero_gain.data()) CHECK(x == 0.0);
}

TEST_CASE("rms_norm gradient matches finite differences") {
  auto g = bt::rng(41);
  const std::size_t s = 2, d = 6;
  std::vector<double> a0 = bt::random_values(g, s * d);
  std::vector<double> w0 = bt::random_values(g, d, 0.5, 1.5);

  auto loss_a = [&](const std::vector<double>& av) {
    Tape t;
    return besa::frobenius_sq(t, besa::rms_norm(t, Tensor::from({s, d}, av), Tensor::from({d}, w0))).item();
  };
  auto loss_w = [&](const std::vector<double>& wv) {
    Tape t;
    return besa::frobenius_sq(t, besa::rms_norm(t, Tensor::from({s, d}, a0), Tensor::from({d}, wv))).item();
  };
  std::vector<double> fda = bt::central_differences(loss_a, a0);
  std::vector<double> fdw = bt::central_differences(loss_w, w0);

  Tape tape;
  Tensor a = Tensor::from({s, d}, a0).set_requires_grad(true);
  Tensor w = Tensor::from({d}, w0).set_requires_grad(true);
  tape.backward(besa::frobenius_sq(tape, besa::rms_norm(tape, a, w)));
  CHECK(bt::max_rel_error(a.grad(), fda) <= 1e-6);
  CHECK(bt::max_rel_error(w.grad(), fdw) <= 1e-6);
}

TEST_CASE("frobenius_sq") {
  Tape tape;
  CHECK(besa::frobenius_sq(tape, Tensor::zeros({3, 3})).item() == 0.0);
  CHECK(besa::frobenius_sq(tape, Tensor::from({1, 2}, {3, 4})).item() == 25.0);

  Tensor a = Tensor::from({2, 2}, {1, -2, 0.5, 3}).set_requires_grad(true);
  tape.backward(besa::frobenius_sq(tape, a));
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.grad()[i] == 2.0 * a.data()[i]);
}

TEST_CASE("backward seeds ones through sum and enforces the contract") {
  Tape tape;
  Tensor w = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
  Tensor loss = besa::sum_all(tape, w);
  tape.backward(loss);
  for (double gi : w.grad()) CHECK(gi == 1.0);

  // Re-running backward on a consumed tape is a usage error.
  CHECK_THROWS_AS(tape.backward(loss), besa::UsageError);

  Tensor mat = Tensor::from({2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
  Tape t2;
  Tensor nonscalar = besa::square(t2, mat);
  CHECK_THROWS_AS(t2.backward(nonscalar), besa::UsageError);
}

TEST_CASE("composite matmul+softmax chain matches finite differences") {
  auto g = bt::rng(57);
  const std::size_t m = 3, k = 4, n = 3;
  std::vector<double> a0 = bt::random_values(g, m * k);
  Tensor b = bt::random_tensor(g, {k, n});
  Tensor v = bt::random_tensor(g, {m, n});

  auto loss_of = [&](const std::vector<double>& av) {
    Tape t;
    Tensor y = besa::softmax_rows(t, besa::matmul(t, Tensor::from({m, k}, av), b));
    return besa::sum_all(t, besa::mul(t, y, v)).item();
  };
  std::vector<double> fd = bt::central_differences(loss_of, a0);

  Tape tape;
  Tensor a = Tensor::from({m, k}, a0).set_requires_grad(true);
  Tensor y = besa::softmax_rows(tape, besa::matmul(tape, a, b));
  tape.backward(besa::sum_all(tape, besa::mul(tape, y, v)));
  CHECK(bt::max_rel_error(a.grad(), fd) <= 1e-5);
}

TEST_CASE("slice, concat and transpose round gradients correctly") {
  auto g = bt::rng(71);
  const std::size_t m = 3, n = 6;
  std::vector<double> a0 = bt::random_values(g, m * n);
  Tensor v = bt::random_tensor(g, {n, m});

  auto loss_of = [&](const std::vector<double>& av) {
    Tape t;
    Tensor a = Tensor::from({m, n}, av);
    Tensor left = besa::slice_cols(t, a, 0, 2);
    Tensor right = besa::slice_cols(t, a, 2, n);
    Tensor back = besa::concat_cols(t, {left, right});
    return besa::sum_all(t, besa::mul(t, besa::transpose(t, back), v)).item();
  };
  std::vector<double> fd = bt::central_differences(loss_of, a0);

  Tape tape;
  Tensor a = Tensor::from({m, n}, a0).set_requires_grad(true);
  Tensor left = besa::slice_cols(tape, a, 0, 2);
  Tensor right = besa::slice_cols(tape, a, 2, n);
  Tensor back = besa::concat_cols(tape, {left, right});
  tape.backward(besa::sum_all(tape, besa::mul(tape, besa::transpose(tape, back), v)));
  CHECK(bt::max_rel_error(a.grad(), fd) <= 1e-6);
}

TEST_CASE("forward results are bit-identical across repeated runs") {
  auto g = bt::rng(101);
  Tensor a = bt::random_tensor(g, {7, 9});
  Tensor b = bt::random_tensor(g, {9, 5});
  Tensor gain = bt::random_tensor(g, {5}, 0.5, 1.5);

  auto run = [&]() {
    Tape t;
    Tensor y = besa::softmax_rows(t, besa::matmul(t, a, b));
    return besa::rms_norm(t, y, gain).data();
  };
  std::vector<double> first = run();
  for (int i = 0; i < 3; ++i) {
    std::vector<double> again = run();
    REQUIRE(again.size() == first.size());
    for (std::size_t j = 0; j < first.size(); ++j) CHECK(again[j] == first[j]);
  }
}
