#include "sopssl/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sopssl::oracle {

Mat Mat::identity(int d) {
  Mat m(d);
  for (int i = 0; i < d; ++i) m(i, i) = 1.0;
  return m;
}

Mat multiply(const Mat& x, const Mat& y) {
  if (x.d != y.d) throw OracleError("multiply: dimension mismatch");
  Mat out(x.d);
  for (int i = 0; i < x.d; ++i)
    for (int k = 0; k < x.d; ++k) {
      const double v = x(i, k);
      if (v == 0.0) continue;
      for (int j = 0; j < x.d; ++j) out(i, j) += v * y(k, j);
    }
  return out;
}

Mat transpose(const Mat& x) {
  Mat out(x.d);
  for (int i = 0; i < x.d; ++i)
    for (int j = 0; j < x.d; ++j) out(j, i) = x(i, j);
  return out;
}

double frobenius(const Mat& x) {
  double acc = 0.0;
  for (double v : x.a) acc += v * v;
  return std::sqrt(acc);
}

double max_abs_offdiag(const Mat& x) {
  double m = 0.0;
  for (int i = 0; i < x.d; ++i)
    for (int j = 0; j < x.d; ++j)
      if (i != j) m = std::max(m, std::abs(x(i, j)));
  return m;
}

EigResult jacobi_eigh(const Mat& s) {
  const int d = s.d;
  double asym = 0.0;
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) asym = std::max(asym, std::abs(s(i, j) - s(j, i)));
  if (asym > 1e-8) throw OracleError("jacobi_eigh: input asymmetric by " + std::to_string(asym));

  Mat a = s;
  Mat u = Mat::identity(d);
  const double stop = 1e-12 * std::max(frobenius(s), 1e-300);
  const int max_sweeps = 100;

  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    if (max_abs_offdiag(a) <= stop) break;
    for (int p = 0; p < d - 1; ++p)
      for (int q = p + 1; q < d; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= stop * 1e-2) continue;
        const double app = a(p, p), aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        // stable tangent of the rotation angle
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (int k = 0; k < d; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (int k = 0; k < d; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        for (int k = 0; k < d; ++k) {
          const double ukp = u(k, p), ukq = u(k, q);
          u(k, p) = c * ukp - sn * ukq;
          u(k, q) = sn * ukp + c * ukq;
        }
      }
  }
  if (sweep == max_sweeps && max_abs_offdiag(a) > stop)
    throw OracleError("jacobi_eigh: no convergence after " + std::to_string(max_sweeps) + " sweeps");

  std::vector<int> order(static_cast<size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) { return a(i, i) > a(j, j); });

  EigResult res;
  res.eigenvalues.resize(static_cast<size_t>(d));
  res.eigenvectors = Mat(d);
  for (int j = 0; j < d; ++j) {
    res.eigenvalues[static_cast<size_t>(j)] = a(order[static_cast<size_t>(j)], order[static_cast<size_t>(j)]);
    for (int i = 0; i < d; ++i) res.eigenvectors(i, j) = u(i, order[static_cast<size_t>(j)]);
  }
  return res;
}

Mat matrix_sqrt_exact(const Mat& s) {
  EigResult eig = jacobi_eigh(s);
  const int d = s.d;
  for (double& lam : eig.eigenvalues) {
    if (lam < -1e-6) throw OracleError("matrix_sqrt_exact: eigenvalue " + std::to_string(lam) + " is materially negative");
    if (lam < 0.0) lam = 0.0;
  }
  Mat out(d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k)
        acc += eig.eigenvectors(i, k) * std::sqrt(eig.eigenvalues[static_cast<size_t>(k)]) *
               eig.eigenvectors(j, k);
      out(i, j) = acc;
    }
  return out;
}

FiniteDiffReport finite_diff_grad(const std::function<double(const std::vector<double>&)>& fn,
                                  std::vector<double> params, double h,
                                  const std::vector<double>* analytic) {
  FiniteDiffReport report;
  report.estimate.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + h;
    const double fp = fn(params);
    params[i] = orig - h;
    const double fm = fn(params);
    params[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw OracleError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
    report.estimate[i] = (fp - fm) / (2.0 * h);
  }
  if (analytic) {
    if (analytic->size() != params.size())
      throw OracleError("finite_diff_grad: analytic gradient size mismatch");
    double sum = 0.0;
    for (size_t i = 0; i < params.size(); ++i) {
      const double a = (*analytic)[i], n = report.estimate[i];
      const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
      report.max_rel_err = std::max(report.max_rel_err, rel);
      sum += rel;
    }
    report.mean_rel_err = params.empty() ? 0.0 : sum / static_cast<double>(params.size());
  }
  return report;
}

}  // namespace sopssl::oracle
