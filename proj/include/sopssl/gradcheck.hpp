#ifndef SOPSSL_GRADCHECK_HPP
#define SOPSSL_GRADCHECK_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "sopssl/model.hpp"

namespace sopssl {

struct GradCheckRow {
  std::string name;  // "<parameter>:<ce|entropy|grl>"
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double max_rel_err = 0.0;
  bool passed(double tol = 1e-4) const { return max_rel_err <= tol; }
};

// Seeded toy model (conv -> relu -> SOP(N from cfg) -> classifier), checked
// on three scalars: labeled cross-entropy, unlabeled entropy, and the
// GRL-weighted entropy head whose tape gradient must equal -lambda (resp.
// +lambda after reversal) times the finite-difference entropy gradient.
// inject_backward_bug perturbs one analytic gradient (negative control).
GradCheckReport run_gradcheck(const SopConfig& sop, std::uint64_t seed = 42,
                              bool inject_backward_bug = false);

}  // namespace sopssl

#endif
