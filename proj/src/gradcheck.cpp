#include "sopssl/gradcheck.hpp"

#include <cmath>
#include <random>

#include "sopssl/oracle.hpp"

namespace sopssl {

namespace {

struct FixedBatches {
  std::vector<Tensor> labeled_images, unlabeled_images;
  std::vector<int> labels;
  std::vector<const Tensor*> labeled_ptrs() const {
    std::vector<const Tensor*> v;
    for (const Tensor& t : labeled_images) v.push_back(&t);
    return v;
  }
  std::vector<const Tensor*> unlabeled_ptrs() const {
    std::vector<const Tensor*> v;
    for (const Tensor& t : unlabeled_images) v.push_back(&t);
    return v;
  }
};

double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

}  // namespace

GradCheckReport run_gradcheck(const SopConfig& sop, std::uint64_t seed, bool inject_backward_bug) {
  const bool checks_were_on = Tape::finite_checks();
  Tape::set_finite_checks(true);

  ModelConfig cfg;
  cfg.extractor.in_channels = 2;
  cfg.extractor.in_h = 6;
  cfg.extractor.in_w = 6;
  cfg.extractor.layers = {LayerSpec::conv(5, 3, 1, 1), LayerSpec::relu_spec()};
  cfg.sop = sop;
  cfg.pooling = PoolingKind::sop;
  cfg.normalized_classifier = true;
  cfg.classes = 3;
  SopModel model(cfg, seed);
  const double lambda = 0.3;

  std::mt19937_64 rng(seed ^ 0xabcdef12345ull);
  std::normal_distribution<double> dist(0.0, 1.0);
  FixedBatches b;
  for (int s = 0; s < 3; ++s) {
    Tensor img({2, 6, 6});
    for (int i = 0; i < img.numel(); ++i) img[i] = dist(rng);
    b.labeled_images.push_back(img);
    b.labels.push_back(s);
    Tensor uimg({2, 6, 6});
    for (int i = 0; i < uimg.numel(); ++i) uimg[i] = dist(rng);
    b.unlabeled_images.push_back(uimg);
  }

  auto params = model.params();

  // tape gradients of the three scalars
  std::vector<Tensor> grad_ce, grad_h, grad_grl;
  {
    Tape tape;
    model.bind(tape);
    Tensor ce = model.labeled_loss(tape, b.labeled_ptrs(), b.labels);
    tape.backward(ce);
    for (Parameter* p : params) grad_ce.push_back(tape.grad(p->node));
  }
  {
    Tape tape;
    model.bind(tape);
    Tensor h = model.unlabeled_entropy(tape, b.unlabeled_ptrs(), /*through_grl=*/false);
    tape.backward(h);
    for (Parameter* p : params) grad_h.push_back(tape.grad(p->node));
  }
  {
    Tape tape;
    model.bind(tape);
    Tensor h = model.unlabeled_entropy(tape, b.unlabeled_ptrs(), /*through_grl=*/true);
    Tensor head = tape.scale(h, -lambda);
    tape.backward(head);
    for (Parameter* p : params) grad_grl.push_back(tape.grad(p->node));
  }

  if (inject_backward_bug && !grad_ce.empty() && grad_ce[0].numel() > 0)
    grad_ce[0][0] = grad_ce[0][0] * 1.01 + 1e-3;

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const std::vector<double> saved = p.value.values();

    auto scalar_of = [&](bool labeled_path) {
      return [&, labeled_path](const std::vector<double>& flat) {
        p.value.values() = flat;
        Tape tape;
        model.bind(tape);
        double out;
        if (labeled_path)
          out = model.labeled_loss(tape, b.labeled_ptrs(), b.labels).value();
        else
          out = model.unlabeled_entropy(tape, b.unlabeled_ptrs(), false).value();
        p.value.values() = saved;
        return out;
      };
    };

    const auto fd_ce = oracle::finite_diff_grad(scalar_of(true), saved, 1e-5, &grad_ce[pi].values());
    const auto fd_h = oracle::finite_diff_grad(scalar_of(false), saved, 1e-5, &grad_h[pi].values());

    // the reversal hands theta_F +lambda*dH and theta_C -lambda*dH
    const double factor = p.group == ParamGroup::feature_extractor ? lambda : -lambda;
    double grl_max = 0.0, grl_sum = 0.0;
    for (size_t k = 0; k < fd_h.estimate.size(); ++k) {
      const double expect = factor * fd_h.estimate[k];
      const double r = rel_err(grad_grl[pi][static_cast<int>(k)], expect);
      grl_max = std::max(grl_max, r);
      grl_sum += r;
    }

    report.rows.push_back({p.name + ":ce", fd_ce.max_rel_err, fd_ce.mean_rel_err});
    report.rows.push_back({p.name + ":entropy", fd_h.max_rel_err, fd_h.mean_rel_err});
    report.rows.push_back({p.name + ":grl", grl_max, grl_sum / fd_h.estimate.size()});
    report.max_rel_err =
        std::max({report.max_rel_err, fd_ce.max_rel_err, fd_h.max_rel_err, grl_max});
  }

  Tape::set_finite_checks(checks_were_on);
  return report;
}

}  // namespace sopssl
