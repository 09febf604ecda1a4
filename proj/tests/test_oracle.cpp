#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "sopssl/oracle.hpp"

using namespace sopssl::oracle;

namespace {

Mat random_sym(int d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Mat m(d);
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j) {
      const double v = dist(rng);
      m(i, j) = v;
      m(j, i) = v;
    }
  return m;
}

Mat random_psd(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat b(d);
  for (auto& v : b.a) v = dist(rng);
  return multiply(b, transpose(b));
}

double rel_fro(const Mat& a, const Mat& b) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.a.size(); ++i) {
    num += (a.a[i] - b.a[i]) * (a.a[i] - b.a[i]);
    den += b.a[i] * b.a[i];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

}  // namespace

TEST_CASE("jacobi: diagonal input returns its diagonal, descending") {
  Mat s(3);
  s(0, 0) = 2.0;
  s(1, 1) = 7.0;
  s(2, 2) = -1.0;
  EigResult r = jacobi_eigh(s);
  CHECK(r.eigenvalues[0] == doctest::Approx(7.0).epsilon(1e-14));
  CHECK(r.eigenvalues[1] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(r.eigenvalues[2] == doctest::Approx(-1.0).epsilon(1e-14));
  // eigenvectors form a signed permutation of the identity
  for (int j = 0; j < 3; ++j) {
    double sum = 0.0;
    for (int i = 0; i < 3; ++i) sum += std::abs(r.eigenvectors(i, j));
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("jacobi: [[2,1],[1,2]] has eigenvalues {3,1}") {
  Mat s(2);
  s(0, 0) = 2;
  s(0, 1) = 1;
  s(1, 0) = 1;
  s(1, 1) = 2;
  EigResult r = jacobi_eigh(s);
  CHECK(r.eigenvalues[0] == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(r.eigenvalues[1] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("jacobi: reconstruction and orthonormality on random symmetric d=16") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    Mat s = random_sym(16, rng);
    EigResult r = jacobi_eigh(s);

    Mat utu(16);
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 16; ++k) acc += r.eigenvectors(k, i) * r.eigenvectors(k, j);
        utu(i, j) = acc;
      }
    CHECK(rel_fro(utu, Mat::identity(16)) * frobenius(Mat::identity(16)) <= 1e-10);

    Mat rec(16);
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 16; ++k)
          acc += r.eigenvectors(i, k) * r.eigenvalues[static_cast<size_t>(k)] * r.eigenvectors(j, k);
        rec(i, j) = acc;
      }
    CHECK(rel_fro(rec, s) <= 1e-9);
  }
}

TEST_CASE("jacobi preserves trace and frobenius norm") {
  std::mt19937_64 rng(2);
  Mat s = random_sym(12, rng, 2.0);
  EigResult r = jacobi_eigh(s);
  double tr = 0.0, sum_lam = 0.0, sq = 0.0;
  for (int i = 0; i < 12; ++i) tr += s(i, i);
  for (double l : r.eigenvalues) {
    sum_lam += l;
    sq += l * l;
  }
  CHECK(std::abs(tr - sum_lam) <= 1e-10 * std::abs(tr));
  CHECK(std::abs(frobenius(s) - std::sqrt(sq)) <= 1e-10 * frobenius(s));
}

TEST_CASE("jacobi rejects asymmetric input") {
  Mat s(2);
  s(0, 1) = 1.0;
  s(1, 0) = 0.5;
  CHECK_THROWS_AS(jacobi_eigh(s), OracleError);
}

TEST_CASE("matrix_sqrt_exact: identity and scaled identity") {
  Mat r1 = matrix_sqrt_exact(Mat::identity(4));
  CHECK(rel_fro(r1, Mat::identity(4)) <= 1e-12);

  Mat four = Mat::identity(3);
  for (int i = 0; i < 3; ++i) four(i, i) = 4.0;
  Mat two = Mat::identity(3);
  for (int i = 0; i < 3; ++i) two(i, i) = 2.0;
  CHECK(rel_fro(matrix_sqrt_exact(four), two) <= 1e-12);
}

TEST_CASE("matrix_sqrt_exact squares back to the input") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Mat s = random_psd(8, rng);
    Mat r = matrix_sqrt_exact(s);
    CHECK(rel_fro(multiply(r, r), s) <= 1e-8);
  }
}

TEST_CASE("matrix_sqrt_exact rejects materially negative eigenvalues") {
  Mat s = Mat::identity(3);
  s(2, 2) = -0.5;
  CHECK_THROWS_AS(matrix_sqrt_exact(s), OracleError);
  // a tiny negative eigenvalue is clamped instead
  Mat near = Mat::identity(3);
  near(2, 2) = -5e-11;
  Mat r = matrix_sqrt_exact(near);
  CHECK(r(2, 2) >= 0.0);
}

TEST_CASE("finite_diff_grad: analytic cases") {
  auto square = [](const std::vector<double>& p) { return p[0] * p[0]; };
  auto rep = finite_diff_grad(square, {3.0});
  CHECK(std::abs(rep.estimate[0] - 6.0) <= 1e-7);

  auto constant = [](const std::vector<double>&) { return 4.2; };
  rep = finite_diff_grad(constant, {1.0, -2.0, 0.5});
  for (double g : rep.estimate) CHECK(std::abs(g) <= 1e-9);
}

TEST_CASE("finite_diff_grad: relative error report against analytic gradient") {
  auto f = [](const std::vector<double>& p) { return p[0] * p[0] + 3.0 * p[1]; };
  std::vector<double> analytic = {2.0 * 1.5, 3.0};
  auto rep = finite_diff_grad(f, {1.5, -0.7}, 1e-5, &analytic);
  CHECK(rep.max_rel_err <= 1e-9);
  std::vector<double> wrong = {2.0 * 1.5, 4.0};
  rep = finite_diff_grad(f, {1.5, -0.7}, 1e-5, &wrong);
  CHECK(rep.max_rel_err > 0.2);
}

TEST_CASE("finite_diff_grad: non-finite evaluation is an error") {
  auto f = [](const std::vector<double>& p) { return std::log(p[0]); };
  CHECK_THROWS_AS(finite_diff_grad(f, {0.0}), OracleError);
}
