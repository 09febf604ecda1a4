#ifndef SOPSSL_ORACLE_HPP
#define SOPSSL_ORACLE_HPP

// Ground-truth machinery for checking the main pipeline. Deliberately
// self-contained: no tensor/tape includes, own dense kernels, so oracle and
// implementation cannot share a bug.

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sopssl::oracle {

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense square matrix, row-major.
struct Mat {
  int d = 0;
  std::vector<double> a;

  Mat() = default;
  explicit Mat(int d) : d(d), a(static_cast<size_t>(d) * d, 0.0) {}
  double& operator()(int i, int j) { return a[static_cast<size_t>(i) * d + j]; }
  double operator()(int i, int j) const { return a[static_cast<size_t>(i) * d + j]; }
  static Mat identity(int d);
};

Mat multiply(const Mat& x, const Mat& y);
Mat transpose(const Mat& x);
double frobenius(const Mat& x);
double max_abs_offdiag(const Mat& x);

struct EigResult {
  std::vector<double> eigenvalues;  // descending
  Mat eigenvectors;                 // orthonormal columns
};

// Cyclic Jacobi rotations until max |off-diagonal| <= 1e-12 * ||S||_F
// or 100 sweeps.
EigResult jacobi_eigh(const Mat& s);

// U diag(sqrt(clamped eigenvalues)) U^T. Eigenvalues below -1e-6 are a
// not-PSD error; values in [-1e-10, 0) are clamped to 0.
Mat matrix_sqrt_exact(const Mat& s);

struct FiniteDiffReport {
  std::vector<double> estimate;
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
};

// Central differences per coordinate of a pure scalar function. When an
// analytic gradient is supplied, reports relative error per
// |a-n| / max(|a|,|n|,1e-8).
FiniteDiffReport finite_diff_grad(const std::function<double(const std::vector<double>&)>& fn,
                                  std::vector<double> params, double h = 1e-5,
                                  const std::vector<double>* analytic = nullptr);

}  // namespace sopssl::oracle

#endif
