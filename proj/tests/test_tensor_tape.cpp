#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "sopssl/tape.hpp"
#include "test_helpers.hpp"

using namespace sopssl;
using namespace sopssl::testing;

namespace {
struct ChecksOn {
  ChecksOn() { Tape::set_finite_checks(true); }
} force_checks;
}  // namespace

TEST_CASE("matmul identity and hand-forced arithmetic") {
  Tape tape;
  std::mt19937_64 rng(1);
  Tensor m = randn({3, 5}, rng);
  Tensor out = tape.matmul(Tensor::identity(3), m);
  CHECK(bit_equal(out, m));

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  Tensor c = tape.matmul(a, b);
  CHECK(c.at(0, 0) == 19);
  CHECK(c.at(0, 1) == 22);
  CHECK(c.at(1, 0) == 43);
  CHECK(c.at(1, 1) == 50);
}

TEST_CASE("matmul gradient vs finite differences") {
  std::mt19937_64 rng(2);
  Tensor b0 = randn({3, 2}, rng);
  double err = fd_max_rel(randn({4, 3}, rng), [&](Tape& t, Tensor& x) {
    return t.sum(t.matmul(x, b0));
  });
  CHECK(err <= 1e-6);
  // and wrt the right operand
  Tensor a0 = randn({4, 3}, rng);
  err = fd_max_rel(randn({3, 2}, rng), [&](Tape& t, Tensor& x) {
    return t.sum(t.matmul(a0, x));
  });
  CHECK(err <= 1e-6);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Tensor a({2, 3}), b({2, 3});
  try {
    tape.matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("conv2d pointwise identity and all-ones analytic case") {
  Tape tape;
  std::mt19937_64 rng(3);
  Tensor x = randn({2, 4, 4}, rng);
  Tensor k({2, 2, 1, 1});
  k[0] = 1.0;  // k[0][0][0][0]
  k[3] = 1.0;  // k[1][1][0][0]
  Tensor out = tape.conv2d(x, k, 1, 0);
  CHECK(bit_equal(out, x));

  Tensor ones = Tensor::full({1, 5, 5}, 1.0);
  Tensor k9 = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor o9 = tape.conv2d(ones, k9, 1, 0);
  CHECK(o9.shape() == Shape{1, 3, 3});
  for (int i = 0; i < o9.numel(); ++i) CHECK(o9[i] == doctest::Approx(9.0).epsilon(1e-15));
}

TEST_CASE("conv2d gradients vs finite differences") {
  std::mt19937_64 rng(4);
  Tensor k0 = randn({3, 2, 3, 3}, rng, 0.5);
  double err = fd_max_rel(randn({2, 8, 8}, rng), [&](Tape& t, Tensor& x) {
    return t.sum(t.conv2d(x, k0, 1, 1));
  });
  CHECK(err <= 1e-5);
  Tensor x0 = randn({2, 8, 8}, rng);
  err = fd_max_rel(randn({3, 2, 3, 3}, rng, 0.5), [&](Tape& t, Tensor& k) {
    return t.frobenius_norm(t.conv2d(x0, k, 2, 1));
  });
  CHECK(err <= 1e-5);
}

TEST_CASE("conv2d kernel larger than padded input") {
  Tape tape;
  Tensor x({1, 3, 3});
  Tensor k({1, 1, 5, 5});
  CHECK_THROWS_AS(tape.conv2d(x, k, 1, 0), DimensionError);
}

TEST_CASE("softmax rows: uniform, forced values, shift invariance, row sums") {
  Tape tape;
  Tensor eq({1, 4}, {2.5, 2.5, 2.5, 2.5});
  Tensor p = tape.softmax_rows(eq);
  for (int j = 0; j < 4; ++j) CHECK(p.at(0, j) == doctest::Approx(0.25).epsilon(1e-14));

  Tensor two({1, 2}, {0.0, std::log(3.0)});
  Tensor p2 = tape.softmax_rows(two);
  CHECK(p2.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p2.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));

  std::mt19937_64 rng(5);
  Tensor logits = randn({6, 9}, rng, 3.0);
  Tensor base = tape.softmax_rows(logits);
  for (double c : {1.0, -3.5, 100.0}) {
    Tensor shifted = logits;
    for (int i = 0; i < shifted.numel(); ++i) shifted[i] += c;
    Tensor ps = tape.softmax_rows(shifted);
    CHECK(max_abs_diff(ps, base) <= 1e-12);
  }

  // rows sum to 1 even for extreme logits
  Tensor big({2, 3}, {500.0, -500.0, 499.0, -1000.0, -1000.0, -1000.0});
  Tensor pb = tape.softmax_rows(big);
  for (int i = 0; i < 2; ++i) {
    double s = 0.0;
    for (int j = 0; j < 3; ++j) {
      s += pb.at(i, j);
      CHECK(pb.at(i, j) >= 0.0);
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("softmax and log_softmax gradients") {
  std::mt19937_64 rng(6);
  double err = fd_max_rel(randn({3, 5}, rng, 2.0), [](Tape& t, Tensor& x) {
    return t.frobenius_norm(t.softmax_rows(x));
  });
  CHECK(err <= 1e-6);
  err = fd_max_rel(randn({3, 5}, rng, 2.0), [](Tape& t, Tensor& x) {
    return t.sum(t.hadamard(t.log_softmax_rows(x), x));
  });
  CHECK(err <= 1e-6);
}

TEST_CASE("reverse sweep basics") {
  // loss = sum(x): gradient is exactly all-ones
  Tape tape;
  std::mt19937_64 rng(8);
  Tensor x = tape.leaf(randn({4, 3}, rng));
  tape.backward(tape.sum(x));
  const Tensor& g = tape.grad(x);
  for (int i = 0; i < g.numel(); ++i) CHECK(g[i] == 1.0);

  // loss = tr(X^T X): gradient is 2X
  Tape t2;
  Tensor x2 = t2.leaf(randn({5, 5}, rng));
  t2.backward(t2.trace(t2.matmul(t2.transpose(x2), x2)));
  const Tensor& g2 = t2.grad(x2);
  for (int i = 0; i < g2.numel(); ++i) CHECK(g2[i] == doctest::Approx(2.0 * x2[i]).epsilon(1e-12));
}

TEST_CASE("non-scalar backward seed is a contract error") {
  Tape tape;
  Tensor x = tape.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
  Tensor y = tape.scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("duplicated input edge doubles its gradient exactly") {
  std::mt19937_64 rng(9);
  Tensor x0 = randn({3, 3}, rng);
  Tape ta;
  Tensor xa = ta.leaf(x0);
  ta.backward(ta.sum(xa));
  Tape tb;
  Tensor xb = tb.leaf(x0);
  tb.backward(tb.sum(tb.add(xb, xb)));
  for (int i = 0; i < x0.numel(); ++i) CHECK(tb.grad(xb)[i] == 2.0 * ta.grad(xa)[i]);
}

TEST_CASE("elementwise and reduction ops: analytic cases") {
  Tape tape;
  std::mt19937_64 rng(10);
  Tensor x = randn({3, 4}, rng);

  Tensor tr = tape.transpose(x);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) CHECK(tr.at(j, i) == x.at(i, j));

  CHECK(bit_equal(tape.add(x, Tensor(x.shape())), x));  // x + 0 = x
  CHECK(bit_equal(tape.sub(x, Tensor(x.shape())), x));  // x - 0 = x
  Tensor half = tape.scale(x, 0.5);
  for (int i = 0; i < x.numel(); ++i) CHECK(half[i] == 0.5 * x[i]);
  Tensor ones = Tensor::full(x.shape(), 1.0);
  CHECK(bit_equal(tape.hadamard(x, ones), x));

  Tensor neg({1, 3}, {-2.0, 0.0, 3.0});
  Tensor r = tape.relu(neg);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 3.0);

  Tensor e = tape.exp_elem(Tensor({2}, {0.0, 1.0}));
  CHECK(e[0] == 1.0);
  CHECK(e[1] == doctest::Approx(std::exp(1.0)).epsilon(1e-15));
  Tensor l = tape.log_elem(Tensor({2}, {1.0, std::exp(2.0)}));
  CHECK(l[0] == 0.0);
  CHECK(l[1] == doctest::Approx(2.0).epsilon(1e-12));
  Tensor s = tape.sqrt_elem(Tensor({2}, {4.0, 9.0}));
  CHECK(s[0] == 2.0);
  CHECK(s[1] == 3.0);

  Tensor v({2, 2}, {1, 2, 3, 4});
  CHECK(tape.sum(v).value() == 10.0);
  CHECK(tape.mean(v).value() == 2.5);
  CHECK(tape.trace(v).value() == 5.0);
  CHECK(tape.frobenius_norm(v).value() == doctest::Approx(std::sqrt(30.0)).epsilon(1e-15));

  Tensor cm = tape.col_means(v);
  CHECK(cm.at(0, 0) == 2.0);
  CHECK(cm.at(0, 1) == 3.0);
  Tensor rs = tape.row_sums(v);
  CHECK(rs.at(0, 0) == 3.0);
  CHECK(rs.at(1, 0) == 7.0);
}

TEST_CASE("remaining op gradients vs finite differences") {
  std::mt19937_64 rng(11);
  auto pos = [&](Shape s) {
    Tensor t = randn(std::move(s), rng);
    for (int i = 0; i < t.numel(); ++i) t[i] = std::abs(t[i]) + 0.5;
    return t;
  };

  CHECK(fd_max_rel(randn({4, 3}, rng), [](Tape& t, Tensor& x) {
          return t.frobenius_norm(t.transpose(x));
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({3, 3}, rng), [](Tape& t, Tensor& x) {
          return t.sum(t.add(x, t.scale(x, -0.25)));
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({3, 3}, rng), [](Tape& t, Tensor& x) {
          return t.sum(t.sub(t.hadamard(x, x), t.add_const(x, 2.0)));
        }) <= 1e-6);
  CHECK(fd_max_rel(pos({3, 3}), [](Tape& t, Tensor& x) {
          return t.sum(t.log_elem(x));
        }) <= 1e-6);
  CHECK(fd_max_rel(pos({3, 3}), [](Tape& t, Tensor& x) {
          return t.sum(t.sqrt_elem(x));
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({3, 3}, rng, 0.5), [](Tape& t, Tensor& x) {
          return t.sum(t.exp_elem(x));
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({4, 4}, rng), [](Tape& t, Tensor& x) {
          return t.trace(x);
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({4, 4}, rng), [](Tape& t, Tensor& x) {
          return t.mean(x);
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({4, 4}, rng), [](Tape& t, Tensor& x) {
          return t.frobenius_norm(x);
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({5, 3}, rng), [](Tape& t, Tensor& x) {
          return t.frobenius_norm(t.sub_rowvec(x, t.col_means(x)));
        }) <= 1e-6);
  CHECK(fd_max_rel(pos({4, 3}), [](Tape& t, Tensor& x) {
          return t.frobenius_norm(t.div_rows(x, t.row_sums(x)));
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({3, 3}, rng), [](Tape& t, Tensor& x) {
          return t.sum(t.mul_scalar(x, t.trace(x)));
        }) <= 1e-6);
  CHECK(fd_max_rel(pos({3, 3}), [](Tape& t, Tensor& x) {
          return t.sum(t.div_scalar(x, t.frobenius_norm(x)));
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({4, 5}, rng), [](Tape& t, Tensor& x) {
          return t.mean(t.pick_rows(x, {1, 0, 4, 2}));
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({3, 8}, rng), [](Tape& t, Tensor& x) {
          return t.frobenius_norm(t.reshape(x, {4, 6}));
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({6}, rng), [](Tape& t, Tensor& x) {
          Tensor stacked = t.stack_rows({x, x, t.scale(x, 2.0)});
          return t.frobenius_norm(stacked);
        }) <= 1e-6);
  CHECK(fd_max_rel(randn({3, 4}, rng), [](Tape& t, Tensor& x) {
          return t.sum(t.relu(x));
        }) <= 1e-5);
}

TEST_CASE("grl: forward identity, backward scaling") {
  Tape tape;
  std::mt19937_64 rng(12);
  Tensor x = tape.leaf(randn({2, 5}, rng));
  Tensor y = tape.grl(x, -1.0);
  CHECK(bit_equal(y, x));
  tape.backward(tape.sum(y));
  const Tensor& g = tape.grad(x);
  for (int i = 0; i < g.numel(); ++i) CHECK(g[i] == -1.0);
}

TEST_CASE("forward results are bit-identical across repeated runs") {
  std::mt19937_64 rng(13);
  Tensor x0 = randn({4, 6, 6}, rng);
  Tensor k0 = randn({3, 4, 3, 3}, rng);
  auto run = [&]() {
    Tape tape;
    Tensor c = tape.conv2d(x0, k0, 1, 1);
    Tensor f = tape.reshape(c, {3, 36});
    return tape.softmax_rows(tape.matmul(f, tape.transpose(f)));
  };
  CHECK(bit_equal(run(), run()));
}

TEST_CASE("NaN detection surfaces as NumericError when checks are on") {
  Tape tape;
  Tensor neg({2}, {-1.0, 2.0});
  CHECK_THROWS_AS(tape.log_elem(neg), NumericError);
}

TEST_CASE("composite graph gradient matches finite differences") {
  std::mt19937_64 rng(14);
  Tensor w0 = randn({4, 9}, rng, 0.4);
  double err = fd_max_rel(randn({3, 9}, rng), [&](Tape& t, Tensor& x) {
    Tensor h = t.relu(t.matmul(x, t.transpose(w0)));
    Tensor logp = t.log_softmax_rows(h);
    return t.scale(t.mean(t.pick_rows(logp, {0, 1, 2})), -1.0);
  });
  CHECK(err <= 1e-4);
}
