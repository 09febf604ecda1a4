#include "sopssl/sop.hpp"

#include <cmath>
#include <string>

namespace sopssl {

void SopConfig::validate() const {
  if (alpha != 0.5) throw ConfigError("sop: only alpha = 0.5 is supported");
  if (iterations < 1) throw ConfigError("sop: iterations must be >= 1");
  if (degenerate_eps <= 0.0) throw ConfigError("sop: degenerate_eps must be > 0");
}

FeatureMap FeatureMap::from_chw(Tape& tape, const Tensor& map) {
  if (map.rank() != 3)
    throw DimensionError("feature map must be c x H x W, got " + shape_str(map.shape()));
  const int d = map.dim(0), h = map.dim(1), w = map.dim(2);
  if (d < 2) throw ConfigError("feature map needs d >= 2 channels, got " + std::to_string(d));
  FeatureMap fm;
  fm.w = w;
  fm.h = h;
  fm.d = d;
  // (c, H, W) -> (c, n) view, then transpose to n x d
  Tensor flat = tape.reshape(map, {d, h * w});
  fm.x = tape.transpose(flat);
  return fm;
}

Tensor covariance(Tape& tape, const FeatureMap& fm) {
  if (fm.d < 2) throw ConfigError("covariance needs d >= 2 channels");
  const int n = fm.n();
  Tensor cm = tape.col_means(fm.x);
  Tensor centered = tape.sub_rowvec(fm.x, cm);
  Tensor gram = tape.matmul(tape.transpose(centered), centered);
  return tape.scale(gram, 1.0 / n);
}

std::pair<Tensor, Tensor> pre_normalize(Tape& tape, const Tensor& sigma, PreNorm mode,
                                        double degenerate_eps, int sample_id) {
  Tensor scale = mode == PreNorm::trace ? tape.trace(sigma) : tape.frobenius_norm(sigma);
  if (scale.value() <= degenerate_eps) {
    std::string where = sample_id >= 0 ? " (sample " + std::to_string(sample_id) + ")" : "";
    throw DegenerateCovariance("degenerate covariance: " +
                                   std::string(mode == PreNorm::trace ? "trace" : "frobenius norm") +
                                   " = " + std::to_string(scale.value()) + where,
                               sample_id);
  }
  return {tape.div_scalar(sigma, scale), scale};
}

Tensor newton_schulz(Tape& tape, const Tensor& a, int iterations) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1))
    throw DimensionError("newton_schulz: square matrix required, got " + shape_str(a.shape()));
  const int d = a.dim(0);
  double asym = 0.0;
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) asym = std::max(asym, std::abs(a.at(i, j) - a.at(j, i)));
  if (asym > 1e-8)
    throw ContractError("newton_schulz: input asymmetric by " + std::to_string(asym));

  Tensor three_i = Tensor({d, d});
  for (int i = 0; i < d; ++i) three_i.at(i, i) = 3.0;

  Tensor y = a;
  Tensor z = Tensor::identity(d);  // Z_0 = I, constant
  for (int k = 0; k < iterations; ++k) {
    Tensor t = tape.sub(three_i, tape.matmul(z, y));
    Tensor y_next = tape.scale(tape.matmul(y, t), 0.5);
    Tensor z_next = tape.scale(tape.matmul(t, z), 0.5);
    y = y_next;
    z = z_next;
  }
  return y;
}

Tensor post_compensate(Tape& tape, const Tensor& y_n, const Tensor& scale) {
  if (scale.value() <= 0.0)
    throw ContractError("post_compensate: scale must be > 0, got " + std::to_string(scale.value()));
  return tape.mul_scalar(y_n, tape.sqrt_elem(scale));
}

Tensor upper_tri_vec(Tape& tape, const Tensor& z) { return tape.sym_upper_vec(z); }

Tensor sop_forward(Tape& tape, const FeatureMap& fm, const SopConfig& cfg, int sample_id) {
  cfg.validate();
  Tensor sigma = covariance(tape, fm);
  auto [a, scale] = pre_normalize(tape, sigma, cfg.pre_norm, cfg.degenerate_eps, sample_id);
  Tensor y_n = newton_schulz(tape, a, cfg.iterations);
  Tensor z = post_compensate(tape, y_n, scale);
  return upper_tri_vec(tape, z);
}

}  // namespace sopssl
