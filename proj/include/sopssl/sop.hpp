#ifndef SOPSSL_SOP_HPP
#define SOPSSL_SOP_HPP

#include "sopssl/tape.hpp"
#include "sopssl/tensor.hpp"

namespace sopssl {

enum class PreNorm { trace, frobenius };

struct SopConfig {
  int iterations = 5;            // N
  PreNorm pre_norm = PreNorm::trace;
  double alpha = 0.5;            // only the square root is supported
  double degenerate_eps = 1e-10;

  void validate() const;
};

// A w x h x d convolutional output viewed as n x d with n = w*h spatial
// rows. The reshape is a pure view of the row-major (h, w) flattening.
struct FeatureMap {
  Tensor x;  // n x d, on the tape
  int w = 0, h = 0, d = 0;
  int n() const { return w * h; }

  // map is c x H x W; produces the (H*W) x c feature matrix.
  static FeatureMap from_chw(Tape& tape, const Tensor& map);
};

struct CovarianceBundle {
  Tensor sigma;       // d x d
  Tensor scale;       // scalar on the tape: tr(sigma) or ||sigma||_F
  Tensor normalized;  // A = sigma / scale
  PreNorm mode = PreNorm::trace;
};

// Sigma = (1/n) Xc^T Xc with per-channel spatial mean removed; equals
// X^T Ibar X for Ibar = (1/n)(I - (1/n) 1 1^T).
Tensor covariance(Tape& tape, const FeatureMap& fm);

// A = Sigma/tr(Sigma) or Sigma/||Sigma||_F; returns (A, scale). The scale
// stays on the tape so the magnitude compensation is differentiated too.
std::pair<Tensor, Tensor> pre_normalize(Tape& tape, const Tensor& sigma, PreNorm mode,
                                        double degenerate_eps, int sample_id = -1);

// Coupled iteration, Y_0 = A, Z_0 = I:
//   Y_k = 1/2 Y_{k-1} (3I - Z_{k-1} Y_{k-1})
//   Z_k = 1/2 (3I - Z_{k-1} Y_{k-1}) Z_{k-1}
// Unrolled on the tape; Y_N approximates A^{1/2}.
Tensor newton_schulz(Tape& tape, const Tensor& a, int iterations);

// Z = sqrt(scale) * Y_N
Tensor post_compensate(Tape& tape, const Tensor& y_n, const Tensor& scale);

// Row-major upper triangle including the diagonal; length d(d+1)/2.
Tensor upper_tri_vec(Tape& tape, const Tensor& z);

// covariance -> pre_normalize -> newton_schulz -> post_compensate ->
// upper_tri_vec, everything recorded.
Tensor sop_forward(Tape& tape, const FeatureMap& fm, const SopConfig& cfg, int sample_id = -1);

}  // namespace sopssl

#endif
