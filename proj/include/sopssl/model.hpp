#ifndef SOPSSL_MODEL_HPP
#define SOPSSL_MODEL_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sopssl/sop.hpp"
#include "sopssl/tape.hpp"
#include "sopssl/tensor.hpp"

namespace sopssl {

struct LayerSpec {
  enum class Kind { conv2d, relu, pointwise_linear };
  Kind kind = Kind::relu;
  int out_channels = 0;  // conv2d, pointwise_linear
  int kernel = 0;        // conv2d
  int stride = 1;
  int padding = 0;

  static LayerSpec conv(int out_channels, int kernel, int stride = 1, int padding = 0);
  static LayerSpec relu_spec();
  static LayerSpec pointwise(int out_channels);
};

struct FeatureExtractorConfig {
  int in_channels = 0, in_h = 0, in_w = 0;
  std::vector<LayerSpec> layers;

  struct OutShape {
    int d = 0, h = 0, w = 0;
  };
  // Shape inference over the layer list; throws ConfigError when the
  // output collapses below 1x1 or fewer than 2 channels remain.
  OutShape infer() const;
};

// Stack of conv/relu/pointwise layers; all weights in group
// feature_extractor. No bias terms.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(FeatureExtractorConfig cfg, std::uint64_t seed);

  FeatureMap forward(Tape& tape, const Tensor& image) const;

  const FeatureExtractorConfig& config() const { return cfg_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

 private:
  FeatureExtractorConfig cfg_;
  std::vector<Parameter> params_;   // one per conv/pointwise layer
  std::vector<int> layer_param_;    // layer index -> param index (-1 for relu)
};

// Prototype classifier. When normalized, logits use w'_i = w_i/(||w_i||+eps)
// so they only depend on each row's direction; the stored rows stay
// unconstrained. No bias, features are not normalized.
struct ClassifierConfig {
  int classes = 0;
  int feature_dim = 0;
  bool normalized = true;
  double eps_norm = 1e-8;
  double logit_scale = 1.0;
};

class Classifier {
 public:
  Classifier() = default;
  Classifier(ClassifierConfig cfg, std::uint64_t seed);

  // v: b x m batch of feature vectors -> b x K logits.
  Tensor logits(Tape& tape, const Tensor& v) const;

  const ClassifierConfig& config() const { return cfg_; }
  Parameter& weight() { return weight_; }
  const Parameter& weight() const { return weight_; }

 private:
  ClassifierConfig cfg_;
  Parameter weight_;  // K x m, group classifier
};

// Identity forward, gradient scaled by backward_factor (-1 on the
// unlabeled path; lambda lives in the loss weighting).
struct GrlSpec {
  double backward_factor = -1.0;
};

Tensor grl(Tape& tape, const Tensor& v, const GrlSpec& spec);

// L = -(1/b) sum_j log p(y_j = label_j), via stable log-softmax.
Tensor cross_entropy_loss(Tape& tape, const Tensor& logits, const std::vector<int>& labels);

// H = -(1/b) sum_j sum_i p_ji log p_ji, from logits via log-softmax.
Tensor entropy_loss(Tape& tape, const Tensor& logits);

// Same quantities evaluated directly on a probability matrix, with the
// 0 log 0 := 0 convention. Used for metrics and analytic checks.
double entropy_of_probs(const Tensor& p);
double cross_entropy_of_probs(const Tensor& p, const std::vector<int>& labels);

enum class PoolingKind { sop, gap };

struct ModelConfig {
  FeatureExtractorConfig extractor;
  SopConfig sop;
  PoolingKind pooling = PoolingKind::sop;
  bool normalized_classifier = true;
  int classes = 0;
  double eps_norm = 1e-8;
  double logit_scale = 1.0;

  // d(d+1)/2 under SOP pooling, d under global average pooling.
  int feature_dim() const;
};

// The full network: extractor F, pooling, classifier C. Parameters are
// partitioned into theta_F (feature_extractor) and theta_C (classifier).
class SopModel {
 public:
  SopModel() = default;
  SopModel(ModelConfig cfg, std::uint64_t seed);

  // Registers every parameter as a leaf of this tape. Must be called once
  // per tape before any forward.
  void bind(Tape& tape);

  // Pooled feature vector for one image ({m} under sop, {d} under gap).
  Tensor pooled_features(Tape& tape, const Tensor& image, int sample_id = -1) const;

  // b x K logits for a batch; through_grl inserts the reversal between
  // pooled features and the classifier.
  Tensor logits(Tape& tape, const std::vector<const Tensor*>& images, bool through_grl,
                const std::vector<int>* sample_ids = nullptr) const;

  Tensor labeled_loss(Tape& tape, const std::vector<const Tensor*>& images,
                      const std::vector<int>& labels,
                      const std::vector<int>* sample_ids = nullptr) const;
  Tensor unlabeled_entropy(Tape& tape, const std::vector<const Tensor*>& images, bool through_grl,
                           const std::vector<int>* sample_ids = nullptr) const;

  std::vector<Parameter*> params();
  std::vector<const Parameter*> params() const;

  const ModelConfig& config() const { return cfg_; }
  FeatureExtractor& extractor() { return extractor_; }
  Classifier& classifier() { return classifier_; }
  const Classifier& classifier() const { return classifier_; }

  // Flat little-endian float64 blob + JSON sidecar (names, shapes, groups,
  // embedded model config).
  void save_checkpoint(const std::string& path_base) const;
  void load_checkpoint(const std::string& path_base);
  static SopModel from_checkpoint(const std::string& path_base);

 private:
  ModelConfig cfg_;
  FeatureExtractor extractor_;
  Classifier classifier_;
  const Tape* bound_tape_ = nullptr;
};

nlohmann::json layers_to_json(const std::vector<LayerSpec>& layers);
std::vector<LayerSpec> layers_from_json(const nlohmann::json& j, const std::string& where);
nlohmann::json sop_config_to_json(const SopConfig& cfg);
SopConfig sop_config_from_json(const nlohmann::json& j, const std::string& where);
nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace sopssl

#endif
