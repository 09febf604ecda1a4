#include "sopssl/update_oracle.hpp"

namespace sopssl::oracle {

namespace {

std::vector<Tensor> grads_of(SopModel& model, Tape& tape, const Tensor& loss) {
  tape.backward(loss);
  std::vector<Tensor> out;
  for (Parameter* p : model.params())
    out.push_back(tape.has_grad(p->node) ? tape.grad(p->node) : Tensor(p->value.shape()));
  return out;
}

}  // namespace

UpdateOracleResult eq67_update_oracle(SopModel& model, const Batch& labeled, const Batch& unlabeled,
                                      const TrainConfig& cfg) {
  UpdateOracleResult res;
  {
    Tape tape;
    model.bind(tape);
    Tensor ce = model.labeled_loss(tape, labeled.images, labeled.labels, &labeled.sample_ids);
    res.grad_ce = grads_of(model, tape, ce);
  }
  const bool unlabeled_active = cfg.uses_unlabeled() && cfg.lambda > 0.0 && !unlabeled.images.empty();
  if (unlabeled_active) {
    Tape tape;
    model.bind(tape);
    Tensor h = model.unlabeled_entropy(tape, unlabeled.images, /*through_grl=*/false,
                                       &unlabeled.sample_ids);
    res.grad_entropy = grads_of(model, tape, h);
  }

  auto params = model.params();
  res.expected_update.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    const double lr = p.group == ParamGroup::feature_extractor ? cfg.lr_feature : cfg.lr_classifier;
    const double sign = p.group == ParamGroup::feature_extractor ? 1.0 : -1.0;
    Tensor upd(p.value.shape());
    const Tensor& gl = res.grad_ce[i];
    for (int k = 0; k < upd.numel(); ++k) {
      double g = gl[k];
      if (unlabeled_active) g += sign * cfg.lambda * res.grad_entropy[i][k];
      upd[k] = -lr * g;
    }
    res.expected_update[i] = std::move(upd);
  }
  return res;
}

}  // namespace sopssl::oracle
