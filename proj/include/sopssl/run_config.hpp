#ifndef SOPSSL_RUN_CONFIG_HPP
#define SOPSSL_RUN_CONFIG_HPP

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sopssl/data.hpp"
#include "sopssl/model.hpp"
#include "sopssl/trainer.hpp"

namespace sopssl {

// The full run document: synthetic spec + train config + sop config +
// extractor layers + sweep grids + output directory. Unknown keys are
// rejected at every level; defaults fill everything else and the resolved
// document is echoed back to the output directory.
struct RunConfig {
  SyntheticSpec data;
  TrainConfig train;
  SopConfig sop;
  std::vector<LayerSpec> extractor_layers;  // input shape comes from `data`
  double eps_norm = 1e-8;
  double logit_scale = 1.0;
  std::vector<double> lambda_grid = {0.025, 0.05, 0.1, 0.2, 0.5, 1.0};
  std::vector<double> label_rates = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::string out_dir = "out";

  RunConfig();

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::string& path);
  nlohmann::json to_json() const;

  // Base model config with the extractor input shape taken from an image
  // shape {c, H, W}; pooling/classifier layout still comes from the mode.
  ModelConfig base_model_config(const Shape& image_shape) const;

  void write_resolved(const std::string& dir) const;
};

}  // namespace sopssl

#endif
