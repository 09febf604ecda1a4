#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "sopssl/oracle.hpp"
#include "sopssl/sop.hpp"
#include "test_helpers.hpp"

using namespace sopssl;
using namespace sopssl::testing;

namespace {

struct ChecksOn {
  ChecksOn() { Tape::set_finite_checks(true); }
} force_checks;

// textbook two-pass covariance, written independently of the tape path
Tensor two_pass_covariance(const Tensor& x) {
  const int n = x.dim(0), d = x.dim(1);
  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += x.at(i, j);
  for (double& m : mean) m /= n;
  Tensor cov({d, d});
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b)
        cov.at(a, b) += (x.at(i, a) - mean[static_cast<size_t>(a)]) * (x.at(i, b) - mean[static_cast<size_t>(b)]);
  for (int i = 0; i < cov.numel(); ++i) cov[i] /= n;
  return cov;
}

FeatureMap fm_of(Tape& tape, const Tensor& x, int w, int h) {
  FeatureMap fm;
  fm.x = tape.leaf(x);
  fm.w = w;
  fm.h = h;
  fm.d = x.dim(1);
  return fm;
}

double rel_fro_diff(const Tensor& z, const oracle::Mat& ref) {
  double num = 0.0, den = 0.0;
  for (int i = 0; i < z.dim(0); ++i)
    for (int j = 0; j < z.dim(1); ++j) {
      num += (z.at(i, j) - ref(i, j)) * (z.at(i, j) - ref(i, j));
      den += ref(i, j) * ref(i, j);
    }
  return std::sqrt(num / den);
}

Tensor ns_pipeline(const Tensor& sigma, int iterations) {
  Tape tape;
  auto [a, scale] = pre_normalize(tape, sigma, PreNorm::trace, 1e-12);
  return post_compensate(tape, newton_schulz(tape, a, iterations), scale);
}

}  // namespace

TEST_CASE("covariance: constant features and n=1 give zero") {
  Tape tape;
  FeatureMap fm = fm_of(tape, Tensor::full({6, 4}, 3.7), 3, 2);
  Tensor sigma = covariance(tape, fm);
  // centering kills the constant signal down to rounding of the mean
  for (int i = 0; i < sigma.numel(); ++i) CHECK(std::abs(sigma[i]) <= 1e-25);

  Tape t2;
  std::mt19937_64 rng(1);
  FeatureMap single = fm_of(t2, randn({1, 4}, rng), 1, 1);
  Tensor s1 = covariance(t2, single);
  for (int i = 0; i < s1.numel(); ++i) CHECK(s1[i] == 0.0);
}

TEST_CASE("covariance matches the two-pass textbook oracle") {
  std::mt19937_64 rng(2);
  Tensor x = randn({6, 4}, rng);
  Tape tape;
  Tensor sigma = covariance(tape, fm_of(tape, x, 3, 2));
  Tensor ref = two_pass_covariance(x);
  CHECK(max_abs_diff(sigma, ref) <= 1e-12);
}

TEST_CASE("covariance is symmetric PSD under the eigen oracle") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = randn({12, 5}, rng);
    Tape tape;
    Tensor sigma = covariance(tape, fm_of(tape, x, 4, 3));
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) CHECK(std::abs(sigma.at(i, j) - sigma.at(j, i)) <= 1e-12);
    auto eig = oracle::jacobi_eigh(to_mat(sigma));
    for (double lam : eig.eigenvalues) CHECK(lam >= -1e-10);
  }
}

TEST_CASE("pre_normalize: analytic identity cases and trace invariant") {
  const double c = 2.5;
  Tensor sigma({4, 4});
  for (int i = 0; i < 4; ++i) sigma.at(i, i) = c;

  Tape tape;
  auto [a_tr, s_tr] = pre_normalize(tape, sigma, PreNorm::trace, 1e-12);
  CHECK(s_tr.value() == doctest::Approx(4.0 * c).epsilon(1e-15));
  for (int i = 0; i < 4; ++i) CHECK(a_tr.at(i, i) == doctest::Approx(0.25).epsilon(1e-15));

  auto [a_fr, s_fr] = pre_normalize(tape, sigma, PreNorm::frobenius, 1e-12);
  CHECK(s_fr.value() == doctest::Approx(2.0 * c).epsilon(1e-14));  // ||I4||_F = 2
  for (int i = 0; i < 4; ++i) CHECK(a_fr.at(i, i) == doctest::Approx(0.5).epsilon(1e-14));

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor spd = random_spd(6, rng);
    Tape t2;
    auto [a, s] = pre_normalize(t2, spd, PreNorm::trace, 1e-12);
    double tr = 0.0;
    for (int i = 0; i < 6; ++i) tr += a.at(i, i);
    CHECK(std::abs(tr - 1.0) <= 1e-12);
  }
}

TEST_CASE("pre_normalize: degenerate covariance carries the sample id") {
  Tape tape;
  Tensor zero({3, 3});
  try {
    pre_normalize(tape, zero, PreNorm::trace, 1e-10, 42);
    FAIL("expected DegenerateCovariance");
  } catch (const DegenerateCovariance& e) {
    CHECK(e.sample_id == 42);
    CHECK(std::string(e.what()).find("42") != std::string::npos);
  }
}

TEST_CASE("newton_schulz: identity is a fixed point") {
  Tape tape;
  Tensor y = newton_schulz(tape, Tensor::identity(5), 5);
  CHECK(bit_equal(y, Tensor::identity(5)));
}

TEST_CASE("newton_schulz: (1/d) I converges to (1/sqrt(d)) I") {
  Tape tape;
  const int d = 4;
  Tensor a({d, d});
  for (int i = 0; i < d; ++i) a.at(i, i) = 1.0 / d;
  Tensor y = newton_schulz(tape, a, 5);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(std::abs(y.at(i, j) - (i == j ? 0.5 : 0.0)) <= 1e-3);
}

TEST_CASE("newton_schulz: rejects asymmetric input") {
  Tape tape;
  Tensor a({2, 2}, {1.0, 0.5, 0.1, 1.0});
  CHECK_THROWS_AS(newton_schulz(tape, a, 5), ContractError);
}

TEST_CASE("newton_schulz: Y_k stays symmetric at every step") {
  std::mt19937_64 rng(5);
  for (int d : {4, 8, 16}) {
    Tensor sigma = random_spd(d, rng);
    Tape tape;
    auto [a, s] = pre_normalize(tape, sigma, PreNorm::trace, 1e-12);
    for (int k = 1; k <= 5; ++k) {
      Tensor y = newton_schulz(tape, a, k);
      double asym = 0.0;
      for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) asym = std::max(asym, std::abs(y.at(i, j) - y.at(j, i)));
      CHECK(asym <= 1e-8);
    }
  }
}

TEST_CASE("newton_schulz: residual decreases monotonically for bounded spectra") {
  std::mt19937_64 rng(6);
  for (int d : {4, 8, 16, 32}) {
    for (int trial = 0; trial < 5; ++trial) {
      // eigenvalues in [0.02, 1], so after trace normalization the smallest
      // stays above 0.01/d
      std::uniform_real_distribution<double> lam_dist(0.02, 1.0);
      std::vector<double> lam(static_cast<size_t>(d));
      for (double& l : lam) l = lam_dist(rng);
      Tensor b = randn({d, d}, rng);
      oracle::Mat q_src = to_mat(b);
      auto qr = oracle::jacobi_eigh(oracle::multiply(q_src, oracle::transpose(q_src)));
      Tensor a({d, d});
      double tr = 0.0;
      for (double l : lam) tr += l;
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int k = 0; k < d; ++k)
            acc += qr.eigenvectors(i, k) * (lam[static_cast<size_t>(k)] / tr) * qr.eigenvectors(j, k);
          a.at(i, j) = acc;
        }
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < i; ++j) {  // symmetrize rounding
          const double v = 0.5 * (a.at(i, j) + a.at(j, i));
          a.at(i, j) = v;
          a.at(j, i) = v;
        }

      Tape tape;
      double prev = -1.0;
      for (int k = 1; k <= 5; ++k) {
        Tensor y = newton_schulz(tape, a, k);
        Tensor yy = tape.matmul(y, y);
        double res = 0.0;
        for (int i = 0; i < yy.numel(); ++i) res += (yy[i] - a[i]) * (yy[i] - a[i]);
        res = std::sqrt(res);
        if (k > 1) CHECK(res < prev);
        prev = res;
      }
    }
  }
}

TEST_CASE("compensated output agrees with the eigendecomposition square root") {
  std::mt19937_64 rng(7);
  for (int d : {4, 8, 16}) {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      Tensor sigma = random_spd(d, rng);
      oracle::Mat exact = oracle::matrix_sqrt_exact(to_mat(sigma));
      const double e5 = rel_fro_diff(ns_pipeline(sigma, 5), exact);
      const double e1 = rel_fro_diff(ns_pipeline(sigma, 1), exact);
      worst = std::max(worst, e5);
      CHECK(e5 < e1);
    }
    CHECK(worst <= 0.05);
  }
}

TEST_CASE("post_compensate: analytic and identity cases") {
  const double c = 2.5;
  const int d = 4;
  Tensor sigma({d, d});
  for (int i = 0; i < d; ++i) sigma.at(i, i) = c;
  Tensor z = ns_pipeline(sigma, 5);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(std::abs(z.at(i, j) - (i == j ? std::sqrt(c) : 0.0)) <= 1e-3);

  Tape tape;
  std::mt19937_64 rng(8);
  Tensor y = randn({3, 3}, rng);
  Tensor one = tape.leaf(Tensor::scalar(1.0));
  CHECK(bit_equal(post_compensate(tape, tape.leaf(y), one), y));

  Tensor bad = Tensor::scalar(0.0);
  CHECK_THROWS_AS(post_compensate(tape, tape.leaf(y), bad), ContractError);
}

TEST_CASE("upper_tri_vec: layout, length, round trip") {
  Tape tape;
  Tensor z4 = Tensor::identity(4);
  CHECK(upper_tri_vec(tape, z4).numel() == 10);  // d(d+1)/2

  Tensor v3 = upper_tri_vec(tape, Tensor::identity(3));
  const double expect[6] = {1, 0, 0, 1, 0, 1};
  for (int i = 0; i < 6; ++i) CHECK(v3[i] == expect[i]);

  // reconstruct a symmetric matrix from v and re-extract, bit-identically
  std::mt19937_64 rng(9);
  Tensor sym = random_spd(5, rng);
  Tensor v = upper_tri_vec(tape, sym);
  Tensor rebuilt({5, 5});
  int t = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = i; j < 5; ++j) {
      rebuilt.at(i, j) = v[t];
      rebuilt.at(j, i) = v[t];
      ++t;
    }
  CHECK(bit_equal(upper_tri_vec(tape, rebuilt), v));

  Tensor asym({2, 2}, {1.0, 0.3, -0.3, 1.0});
  CHECK_THROWS_AS(upper_tri_vec(tape, asym), ContractError);
}

TEST_CASE("sop_forward: degenerate input, determinism, gradient, scaling") {
  SopConfig cfg;

  // constant feature map -> degenerate covariance
  {
    Tape tape;
    FeatureMap fm = fm_of(tape, Tensor::full({9, 6}, 1.0), 3, 3);
    CHECK_THROWS_AS(sop_forward(tape, fm, cfg), DegenerateCovariance);
  }

  std::mt19937_64 rng(10);
  Tensor x0 = randn({9, 6}, rng);

  // identical input twice -> bit-identical output
  {
    Tape t1, t2;
    Tensor v1 = sop_forward(t1, fm_of(t1, x0, 3, 3), cfg);
    Tensor v2 = sop_forward(t2, fm_of(t2, x0, 3, 3), cfg);
    CHECK(bit_equal(v1, v2));
  }

  // gradient of sum(v) wrt X matches finite differences (d=6, n=9, N=5)
  {
    double err = fd_max_rel(x0, [&](Tape& t, Tensor& x) {
      FeatureMap fm;
      fm.x = x;
      fm.w = 3;
      fm.h = 3;
      fm.d = 6;
      return t.sum(sop_forward(t, fm, cfg));
    });
    CHECK(err <= 1e-4);
  }

  // scale relation: c * X scales the compensated output by c
  {
    const double c = 3.0;
    Tape t1, t2;
    Tensor v1 = sop_forward(t1, fm_of(t1, x0, 3, 3), cfg);
    Tensor xc = x0;
    for (int i = 0; i < xc.numel(); ++i) xc[i] *= c;
    Tensor v2 = sop_forward(t2, fm_of(t2, xc, 3, 3), cfg);
    for (int i = 0; i < v1.numel(); ++i)
      CHECK(std::abs(v2[i] - c * v1[i]) <= 1e-6 * std::max(1.0, std::abs(c * v1[i])));
  }
}

TEST_CASE("sop config validation") {
  SopConfig cfg;
  cfg.alpha = 0.4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = SopConfig{};
  cfg.iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("frobenius pre-normalization drives the same pipeline") {
  std::mt19937_64 rng(11);
  Tensor sigma = random_spd(6, rng);
  Tape tape;
  auto [a, s] = pre_normalize(tape, sigma, PreNorm::frobenius, 1e-12);
  double fro = 0.0;
  for (int i = 0; i < a.numel(); ++i) fro += a[i] * a[i];
  CHECK(std::sqrt(fro) == doctest::Approx(1.0).epsilon(1e-12));
  Tensor z = post_compensate(tape, newton_schulz(tape, a, 5), s);
  CHECK(rel_fro_diff(z, oracle::matrix_sqrt_exact(to_mat(sigma))) <= 0.05);
}
