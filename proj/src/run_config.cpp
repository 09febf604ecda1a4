#include "sopssl/run_config.hpp"

#include <filesystem>
#include <fstream>

#include "sopssl/json_util.hpp"

namespace sopssl {

using nlohmann::json;
using jsonutil::maybe;
using jsonutil::reject_unknown;

RunConfig::RunConfig() {
  extractor_layers = default_extractor(1, 8, 8).layers;  // input shape filled later
}

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j, {"data", "train", "sop", "extractor", "model", "sweep", "out_dir"}, "top level");
  RunConfig cfg;
  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d,
                   {"classes", "parts", "grid_h", "grid_w", "channels", "pair_radius", "min_center_dist",
                    "part_amplitude", "noise_std", "labeled_per_class", "unlabeled_per_class",
                    "test_per_class", "validation_per_class", "seed"},
                   "data");
    json merged = json(cfg.data);  // defaults underneath
    for (auto it = d.begin(); it != d.end(); ++it) merged[it.key()] = it.value();
    cfg.data = merged.get<SyntheticSpec>();
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    reject_unknown(t,
                   {"mode", "lambda", "lr_feature", "lr_classifier", "batch_labeled", "batch_unlabeled",
                    "iterations", "seed", "eval_every", "early_stop_patience", "sequential_updates",
                    "momentum", "weight_decay"},
                   "train");
    if (t.contains("mode")) cfg.train.mode = train_mode_from(t.at("mode").get<std::string>());
    maybe(t, "lambda", cfg.train.lambda);
    maybe(t, "lr_feature", cfg.train.lr_feature);
    maybe(t, "lr_classifier", cfg.train.lr_classifier);
    maybe(t, "batch_labeled", cfg.train.batch_labeled);
    maybe(t, "batch_unlabeled", cfg.train.batch_unlabeled);
    maybe(t, "iterations", cfg.train.iterations);
    maybe(t, "seed", cfg.train.seed);
    maybe(t, "eval_every", cfg.train.eval_every);
    maybe(t, "early_stop_patience", cfg.train.early_stop_patience);
    maybe(t, "sequential_updates", cfg.train.sequential_updates);
    maybe(t, "momentum", cfg.train.momentum);
    maybe(t, "weight_decay", cfg.train.weight_decay);
  }
  if (j.contains("sop")) cfg.sop = sop_config_from_json(j.at("sop"), "sop");
  if (j.contains("extractor")) cfg.extractor_layers = layers_from_json(j.at("extractor"), "extractor");
  if (j.contains("model")) {
    const json& m = j.at("model");
    reject_unknown(m, {"eps_norm", "logit_scale"}, "model");
    maybe(m, "eps_norm", cfg.eps_norm);
    maybe(m, "logit_scale", cfg.logit_scale);
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    reject_unknown(s, {"lambda_grid", "label_rates"}, "sweep");
    maybe(s, "lambda_grid", cfg.lambda_grid);
    maybe(s, "label_rates", cfg.label_rates);
  }
  maybe(j, "out_dir", cfg.out_dir);
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot read " + path);
  // parse exceptions carry line/column on malformed documents
  json j = json::parse(f);
  return from_json(j);
}

json RunConfig::to_json() const {
  json j;
  j["out_dir"] = out_dir;
  j["data"] = data;
  j["train"] = {{"mode", train_mode_name(train.mode)},
                {"lambda", train.lambda},
                {"lr_feature", train.lr_feature},
                {"lr_classifier", train.lr_classifier},
                {"batch_labeled", train.batch_labeled},
                {"batch_unlabeled", train.batch_unlabeled},
                {"iterations", train.iterations},
                {"seed", train.seed},
                {"eval_every", train.eval_every},
                {"early_stop_patience", train.early_stop_patience},
                {"sequential_updates", train.sequential_updates},
                {"momentum", train.momentum},
                {"weight_decay", train.weight_decay}};
  j["sop"] = sop_config_to_json(sop);
  j["extractor"] = layers_to_json(extractor_layers);
  j["model"] = {{"eps_norm", eps_norm}, {"logit_scale", logit_scale}};
  j["sweep"] = {{"lambda_grid", lambda_grid}, {"label_rates", label_rates}};
  return j;
}

ModelConfig RunConfig::base_model_config(const Shape& image_shape) const {
  if (image_shape.size() != 3) throw ConfigError("config: image shape must be {c, H, W}");
  ModelConfig cfg;
  cfg.extractor.in_channels = image_shape[0];
  cfg.extractor.in_h = image_shape[1];
  cfg.extractor.in_w = image_shape[2];
  cfg.extractor.layers = extractor_layers;
  cfg.sop = sop;
  cfg.eps_norm = eps_norm;
  cfg.logit_scale = logit_scale;
  cfg.classes = data.classes;
  return cfg;
}

void RunConfig::write_resolved(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream f(std::filesystem::path(dir) / "resolved-config.json", std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write resolved-config.json in " + dir);
  f << to_json().dump(2) << "\n";
}

}  // namespace sopssl
