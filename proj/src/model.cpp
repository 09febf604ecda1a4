#include "sopssl/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "sopssl/json_util.hpp"

namespace sopssl {

using nlohmann::json;
using jsonutil::maybe;
using jsonutil::reject_unknown;

LayerSpec LayerSpec::conv(int out_channels, int kernel, int stride, int padding) {
  LayerSpec s;
  s.kind = Kind::conv2d;
  s.out_channels = out_channels;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::relu_spec() {
  LayerSpec s;
  s.kind = Kind::relu;
  return s;
}

LayerSpec LayerSpec::pointwise(int out_channels) {
  LayerSpec s;
  s.kind = Kind::pointwise_linear;
  s.out_channels = out_channels;
  s.kernel = 1;
  s.stride = 1;
  s.padding = 0;
  return s;
}

FeatureExtractorConfig::OutShape FeatureExtractorConfig::infer() const {
  if (in_channels < 1 || in_h < 1 || in_w < 1)
    throw ConfigError("extractor: input shape must be positive, got " +
                      shape_str({in_channels, in_h, in_w}));
  OutShape cur{in_channels, in_h, in_w};
  for (const LayerSpec& l : layers) {
    switch (l.kind) {
      case LayerSpec::Kind::relu:
        break;
      case LayerSpec::Kind::pointwise_linear:
        if (l.out_channels < 1) throw ConfigError("extractor: pointwise_linear needs out_channels >= 1");
        cur.d = l.out_channels;
        break;
      case LayerSpec::Kind::conv2d: {
        if (l.out_channels < 1 || l.kernel < 1 || l.stride < 1 || l.padding < 0)
          throw ConfigError("extractor: bad conv2d spec");
        const int ph = cur.h + 2 * l.padding, pw = cur.w + 2 * l.padding;
        if (l.kernel > ph || l.kernel > pw)
          throw ConfigError("extractor: conv kernel " + std::to_string(l.kernel) +
                            " exceeds padded input " + shape_str({cur.d, ph, pw}));
        cur.h = (ph - l.kernel) / l.stride + 1;
        cur.w = (pw - l.kernel) / l.stride + 1;
        cur.d = l.out_channels;
        break;
      }
    }
  }
  if (cur.h < 1 || cur.w < 1)
    throw ConfigError("extractor: output spatial extent collapsed to " + shape_str({cur.d, cur.h, cur.w}));
  if (cur.d < 2) throw ConfigError("extractor: output needs d >= 2 channels, got " + std::to_string(cur.d));
  return cur;
}

FeatureExtractor::FeatureExtractor(FeatureExtractorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.infer();  // validates
  std::mt19937_64 rng(seed);
  int c_in = cfg_.in_channels;
  int idx = 0;
  for (const LayerSpec& l : cfg_.layers) {
    if (l.kind == LayerSpec::Kind::relu) {
      layer_param_.push_back(-1);
      continue;
    }
    const int k = l.kind == LayerSpec::Kind::conv2d ? l.kernel : 1;
    const int fan_in = c_in * k * k;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    Tensor w({l.out_channels, c_in, k, k});
    for (int i = 0; i < w.numel(); ++i) w[i] = dist(rng);
    params_.emplace_back("extractor.layer" + std::to_string(idx), ParamGroup::feature_extractor,
                         std::move(w));
    layer_param_.push_back(static_cast<int>(params_.size()) - 1);
    c_in = l.out_channels;
    ++idx;
  }
}

namespace {

Tensor bound_value(const Parameter& p) {
  if (p.node < 0) throw ContractError("parameter " + p.name + " not bound to a tape");
  Tensor t = p.value;
  t.node = p.node;
  t.requires_grad = true;
  return t;
}

}  // namespace

FeatureMap FeatureExtractor::forward(Tape& tape, const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != cfg_.in_channels || image.dim(1) != cfg_.in_h ||
      image.dim(2) != cfg_.in_w)
    throw DimensionError("extractor: image shape " + shape_str(image.shape()) + " does not match config " +
                         shape_str({cfg_.in_channels, cfg_.in_h, cfg_.in_w}));
  Tensor cur = image;
  for (size_t i = 0; i < cfg_.layers.size(); ++i) {
    const LayerSpec& l = cfg_.layers[i];
    switch (l.kind) {
      case LayerSpec::Kind::relu:
        cur = tape.relu(cur);
        break;
      case LayerSpec::Kind::conv2d:
      case LayerSpec::Kind::pointwise_linear: {
        const Parameter& p = params_[static_cast<size_t>(layer_param_[i])];
        cur = tape.conv2d(cur, bound_value(p), l.stride, l.padding);
        break;
      }
    }
  }
  return FeatureMap::from_chw(tape, cur);
}

Classifier::Classifier(ClassifierConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.classes < 2) throw ConfigError("classifier: needs >= 2 classes");
  if (cfg_.feature_dim < 1) throw ConfigError("classifier: needs feature_dim >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(cfg_.feature_dim)));
  Tensor w({cfg_.classes, cfg_.feature_dim});
  for (int i = 0; i < w.numel(); ++i) w[i] = dist(rng);
  weight_ = Parameter("classifier.weight", ParamGroup::classifier, std::move(w));
}

Tensor Classifier::logits(Tape& tape, const Tensor& v) const {
  if (v.rank() != 2 || v.dim(1) != cfg_.feature_dim)
    throw DimensionError("classifier: features " + shape_str(v.shape()) + " do not match feature_dim " +
                         std::to_string(cfg_.feature_dim));
  Tensor w = bound_value(weight_);
  Tensor effective = w;
  if (cfg_.normalized) {
    Tensor norms = tape.sqrt_elem(tape.row_sums(tape.hadamard(w, w)));
    effective = tape.div_rows(w, tape.add_const(norms, cfg_.eps_norm));
  }
  Tensor out = tape.matmul(v, tape.transpose(effective));
  if (cfg_.logit_scale != 1.0) out = tape.scale(out, cfg_.logit_scale);
  return out;
}

Tensor grl(Tape& tape, const Tensor& v, const GrlSpec& spec) {
  return tape.grl(v, spec.backward_factor);
}

Tensor cross_entropy_loss(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
  const int k = logits.dim(1);
  for (int y : labels)
    if (y < 0 || y >= k)
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
  Tensor logp = tape.log_softmax_rows(logits);
  Tensor picked = tape.pick_rows(logp, labels);
  return tape.scale(tape.mean(picked), -1.0);
}

Tensor entropy_loss(Tape& tape, const Tensor& logits) {
  Tensor logp = tape.log_softmax_rows(logits);
  Tensor p = tape.exp_elem(logp);
  Tensor plogp = tape.hadamard(p, logp);
  Tensor per_sample = tape.row_sums(plogp);
  return tape.scale(tape.mean(per_sample), -1.0);
}

double entropy_of_probs(const Tensor& p) {
  if (p.rank() != 2) throw DimensionError("entropy_of_probs: rank-2 tensor required");
  const int b = p.dim(0), k = p.dim(1);
  double acc = 0.0;
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < k; ++j) {
      const double v = p.at(i, j);
      if (v > 0.0) acc += v * std::log(v);
    }
  return -acc / b;
}

double cross_entropy_of_probs(const Tensor& p, const std::vector<int>& labels) {
  const int b = p.dim(0), k = p.dim(1);
  if (static_cast<int>(labels.size()) != b)
    throw DimensionError("cross_entropy_of_probs: one label per row required");
  double acc = 0.0;
  for (int i = 0; i < b; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= k) throw ContractError("cross_entropy_of_probs: label out of range");
    acc += std::log(p.at(i, y));
  }
  return -acc / b;
}

int ModelConfig::feature_dim() const {
  const auto out = extractor.infer();
  return pooling == PoolingKind::sop ? out.d * (out.d + 1) / 2 : out.d;
}

SopModel::SopModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.classes < 2) throw ConfigError("model: needs >= 2 classes");
  cfg_.sop.validate();
  extractor_ = FeatureExtractor(cfg_.extractor, seed);
  ClassifierConfig cc;
  cc.classes = cfg_.classes;
  cc.feature_dim = cfg_.feature_dim();
  cc.normalized = cfg_.normalized_classifier;
  cc.eps_norm = cfg_.eps_norm;
  cc.logit_scale = cfg_.logit_scale;
  classifier_ = Classifier(cc, seed ^ 0x9e3779b97f4a7c15ull);
}

void SopModel::bind(Tape& tape) {
  for (Parameter* p : params()) tape.leaf(*p);
  bound_tape_ = &tape;
}

Tensor SopModel::pooled_features(Tape& tape, const Tensor& image, int sample_id) const {
  if (bound_tape_ != &tape) throw ContractError("model: bind(tape) required before forward");
  FeatureMap fm = extractor_.forward(tape, image);
  if (cfg_.pooling == PoolingKind::sop) return sop_forward(tape, fm, cfg_.sop, sample_id);
  return tape.reshape(tape.col_means(fm.x), {fm.d});
}

Tensor SopModel::logits(Tape& tape, const std::vector<const Tensor*>& images, bool through_grl,
                        const std::vector<int>* sample_ids) const {
  if (images.empty()) throw ContractError("model: empty batch");
  std::vector<Tensor> feats;
  feats.reserve(images.size());
  for (size_t i = 0; i < images.size(); ++i) {
    const int sid = sample_ids ? (*sample_ids)[i] : -1;
    feats.push_back(pooled_features(tape, *images[i], sid));
  }
  Tensor v = tape.stack_rows(feats);
  if (through_grl) v = grl(tape, v, GrlSpec{});
  return classifier_.logits(tape, v);
}

Tensor SopModel::labeled_loss(Tape& tape, const std::vector<const Tensor*>& images,
                              const std::vector<int>& labels,
                              const std::vector<int>* sample_ids) const {
  return cross_entropy_loss(tape, logits(tape, images, false, sample_ids), labels);
}

Tensor SopModel::unlabeled_entropy(Tape& tape, const std::vector<const Tensor*>& images,
                                   bool through_grl, const std::vector<int>* sample_ids) const {
  return entropy_loss(tape, logits(tape, images, through_grl, sample_ids));
}

std::vector<Parameter*> SopModel::params() {
  std::vector<Parameter*> out;
  for (Parameter& p : extractor_.params()) out.push_back(&p);
  out.push_back(&classifier_.weight());
  return out;
}

std::vector<const Parameter*> SopModel::params() const {
  std::vector<const Parameter*> out;
  for (const Parameter& p : extractor_.params()) out.push_back(&p);
  out.push_back(&classifier_.weight());
  return out;
}

json layers_to_json(const std::vector<LayerSpec>& layers) {
  json arr = json::array();
  for (const LayerSpec& l : layers) {
    json e;
    switch (l.kind) {
      case LayerSpec::Kind::relu:
        e["type"] = "relu";
        break;
      case LayerSpec::Kind::conv2d:
        e["type"] = "conv2d";
        e["out_channels"] = l.out_channels;
        e["kernel"] = l.kernel;
        e["stride"] = l.stride;
        e["padding"] = l.padding;
        break;
      case LayerSpec::Kind::pointwise_linear:
        e["type"] = "pointwise_linear";
        e["out_channels"] = l.out_channels;
        break;
    }
    arr.push_back(e);
  }
  return arr;
}

std::vector<LayerSpec> layers_from_json(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError("config: " + where + " must be an array of layers");
  std::vector<LayerSpec> out;
  int idx = 0;
  for (const json& e : j) {
    const std::string at = where + "[" + std::to_string(idx++) + "]";
    if (!e.is_object() || !e.contains("type")) throw ConfigError("config: " + at + " needs a 'type'");
    const std::string type = e.at("type").get<std::string>();
    if (type == "relu") {
      reject_unknown(e, {"type"}, at);
      out.push_back(LayerSpec::relu_spec());
    } else if (type == "conv2d") {
      reject_unknown(e, {"type", "out_channels", "kernel", "stride", "padding"}, at);
      LayerSpec l = LayerSpec::conv(0, 1, 1, 0);
      maybe(e, "out_channels", l.out_channels);
      maybe(e, "kernel", l.kernel);
      maybe(e, "stride", l.stride);
      maybe(e, "padding", l.padding);
      out.push_back(l);
    } else if (type == "pointwise_linear") {
      reject_unknown(e, {"type", "out_channels"}, at);
      LayerSpec l = LayerSpec::pointwise(0);
      maybe(e, "out_channels", l.out_channels);
      out.push_back(l);
    } else {
      throw ConfigError("config: " + at + " has unknown layer type '" + type + "'");
    }
  }
  return out;
}

json sop_config_to_json(const SopConfig& cfg) {
  return json{{"iterations", cfg.iterations},
              {"pre_norm", cfg.pre_norm == PreNorm::trace ? "trace" : "frobenius"},
              {"alpha", cfg.alpha},
              {"degenerate_eps", cfg.degenerate_eps}};
}

SopConfig sop_config_from_json(const json& j, const std::string& where) {
  reject_unknown(j, {"iterations", "pre_norm", "alpha", "degenerate_eps"}, where);
  SopConfig sop;
  maybe(j, "iterations", sop.iterations);
  if (j.contains("pre_norm")) {
    const std::string pn = j.at("pre_norm").get<std::string>();
    if (pn == "trace")
      sop.pre_norm = PreNorm::trace;
    else if (pn == "frobenius")
      sop.pre_norm = PreNorm::frobenius;
    else
      throw ConfigError("config: " + where + ".pre_norm must be 'trace' or 'frobenius'");
  }
  maybe(j, "alpha", sop.alpha);
  maybe(j, "degenerate_eps", sop.degenerate_eps);
  sop.validate();
  return sop;
}

json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["classes"] = cfg.classes;
  j["pooling"] = cfg.pooling == PoolingKind::sop ? "sop" : "gap";
  j["normalized_classifier"] = cfg.normalized_classifier;
  j["eps_norm"] = cfg.eps_norm;
  j["logit_scale"] = cfg.logit_scale;
  j["sop"] = sop_config_to_json(cfg.sop);
  j["extractor"] = {{"in_channels", cfg.extractor.in_channels},
                    {"in_h", cfg.extractor.in_h},
                    {"in_w", cfg.extractor.in_w},
                    {"layers", layers_to_json(cfg.extractor.layers)}};
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j, {"classes", "pooling", "normalized_classifier", "eps_norm", "logit_scale", "sop", "extractor"},
                 "model");
  ModelConfig cfg;
  maybe(j, "classes", cfg.classes);
  if (j.contains("pooling")) {
    const std::string p = j.at("pooling").get<std::string>();
    if (p == "sop")
      cfg.pooling = PoolingKind::sop;
    else if (p == "gap")
      cfg.pooling = PoolingKind::gap;
    else
      throw ConfigError("config: model.pooling must be 'sop' or 'gap'");
  }
  maybe(j, "normalized_classifier", cfg.normalized_classifier);
  maybe(j, "eps_norm", cfg.eps_norm);
  maybe(j, "logit_scale", cfg.logit_scale);
  if (j.contains("sop")) cfg.sop = sop_config_from_json(j.at("sop"), "model.sop");
  if (j.contains("extractor")) {
    const json& e = j.at("extractor");
    reject_unknown(e, {"in_channels", "in_h", "in_w", "layers"}, "model.extractor");
    maybe(e, "in_channels", cfg.extractor.in_channels);
    maybe(e, "in_h", cfg.extractor.in_h);
    maybe(e, "in_w", cfg.extractor.in_w);
    if (e.contains("layers")) cfg.extractor.layers = layers_from_json(e.at("layers"), "model.extractor.layers");
  }
  return cfg;
}

void SopModel::save_checkpoint(const std::string& path_base) const {
  json sidecar;
  sidecar["format"] = "float64-le";
  sidecar["model"] = model_config_to_json(cfg_);
  sidecar["params"] = json::array();
  std::ofstream bin(path_base + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot open " + path_base + ".bin for writing");
  std::int64_t offset = 0;
  for (const Parameter* p : params()) {
    json entry;
    entry["name"] = p->name;
    entry["group"] = param_group_name(p->group);
    entry["shape"] = p->value.shape();
    entry["offset"] = offset;
    sidecar["params"].push_back(entry);
    bin.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(p->value.numel())));
    offset += p->value.numel();
  }
  bin.close();
  std::ofstream js(path_base + ".json", std::ios::trunc);
  js << sidecar.dump(2) << "\n";
}

void SopModel::load_checkpoint(const std::string& path_base) {
  std::ifstream js(path_base + ".json");
  if (!js) throw std::runtime_error("cannot open " + path_base + ".json");
  json sidecar = json::parse(js);
  std::ifstream bin(path_base + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + path_base + ".bin");
  auto ps = params();
  const auto& entries = sidecar.at("params");
  if (entries.size() != ps.size())
    throw std::runtime_error("checkpoint has " + std::to_string(entries.size()) + " params, model has " +
                             std::to_string(ps.size()));
  for (size_t i = 0; i < ps.size(); ++i) {
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != ps[i]->name)
      throw std::runtime_error("checkpoint param " + e.at("name").get<std::string>() +
                               " does not match model param " + ps[i]->name);
    Shape shape = e.at("shape").get<Shape>();
    if (shape != ps[i]->value.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + ps[i]->name);
    bin.seekg(static_cast<std::streamoff>(e.at("offset").get<std::int64_t>() * static_cast<std::int64_t>(sizeof(double))));
    bin.read(reinterpret_cast<char*>(ps[i]->value.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(ps[i]->value.numel())));
    if (!bin) throw std::runtime_error("checkpoint binary truncated at " + ps[i]->name);
  }
}

SopModel SopModel::from_checkpoint(const std::string& path_base) {
  std::ifstream js(path_base + ".json");
  if (!js) throw std::runtime_error("cannot open " + path_base + ".json");
  json sidecar = json::parse(js);
  ModelConfig cfg = model_config_from_json(sidecar.at("model"));
  SopModel model(cfg, 0);
  model.load_checkpoint(path_base);
  return model;
}

}  // namespace sopssl
