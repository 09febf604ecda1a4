#ifndef SOPSSL_UPDATE_ORACLE_HPP
#define SOPSSL_UPDATE_ORACLE_HPP

#include <vector>

#include "sopssl/trainer.hpp"

namespace sopssl::oracle {

// Expected per-parameter SGD updates assembled from two independent
// GRL-free backward passes with explicit sign bookkeeping:
//   theta_F: -lr_F * (grad L + lambda * grad H)
//   theta_C: -lr_C * (grad L - lambda * grad H)
struct UpdateOracleResult {
  std::vector<Tensor> expected_update;  // aligned with model.params()
  std::vector<Tensor> grad_ce;
  std::vector<Tensor> grad_entropy;
};

UpdateOracleResult eq67_update_oracle(SopModel& model, const Batch& labeled, const Batch& unlabeled,
                                      const TrainConfig& cfg);

}  // namespace sopssl::oracle

#endif
