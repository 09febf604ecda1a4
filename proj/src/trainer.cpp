#include "sopssl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

namespace sopssl {

const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::sup: return "sup";
    case TrainMode::sup_cov: return "sup_cov";
    case TrainMode::ent_cov: return "ent_cov";
    case TrainMode::ours_no_cov: return "ours_no_cov";
    case TrainMode::ours: return "ours";
  }
  return "?";
}

TrainMode train_mode_from(const std::string& name) {
  if (name == "sup") return TrainMode::sup;
  if (name == "sup_cov") return TrainMode::sup_cov;
  if (name == "ent_cov") return TrainMode::ent_cov;
  if (name == "ours_no_cov") return TrainMode::ours_no_cov;
  if (name == "ours") return TrainMode::ours;
  throw ConfigError("unknown train mode '" + name + "'");
}

void TrainConfig::validate(int n_labeled, int n_unlabeled) const {
  if (lambda < 0.0) throw ConfigError("train: lambda must be >= 0");
  if (lr_feature <= 0.0 || lr_classifier <= 0.0) throw ConfigError("train: learning rates must be > 0");
  if (batch_labeled < 1) throw ConfigError("train: batch_labeled must be >= 1");
  if (iterations < 1) throw ConfigError("train: iterations must be >= 1");
  if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (n_labeled < 1) throw ConfigError("train: labeled split is empty");
  if (uses_unlabeled()) {
    if (batch_unlabeled < 1) throw ConfigError("train: batch_unlabeled must be >= 1");
    if (n_unlabeled < 1)
      throw ConfigError(std::string("train: mode ") + train_mode_name(mode) + " needs unlabeled data");
  }
}

void Sgd::update(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw ContractError("sgd: one gradient per parameter required");
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    const Tensor& g = grads[i];
    if (g.numel() == 0) throw ContractError("sgd: missing gradient for " + p.name);
    if (!g.same_shape(p.value))
      throw DimensionError("sgd: gradient shape " + shape_str(g.shape()) + " vs parameter " +
                           shape_str(p.value.shape()) + " for " + p.name);
    const double lr = lr_.of(p.group);
    if (momentum_ == 0.0 && weight_decay_ == 0.0) {
      for (int k = 0; k < p.value.numel(); ++k) p.value[k] -= lr * g[k];
      continue;
    }
    Tensor& vel = velocity_[p.name];
    if (vel.numel() == 0) vel = Tensor(p.value.shape());
    for (int k = 0; k < p.value.numel(); ++k) {
      double gk = g[k] + weight_decay_ * p.value[k];
      vel[k] = momentum_ * vel[k] + gk;
      p.value[k] -= lr * vel[k];
    }
  }
}

namespace {

std::vector<Tensor> collect_grads(Tape& tape, const std::vector<Parameter*>& params) {
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const Parameter* p : params)
    grads.push_back(tape.has_grad(p->node) ? tape.grad(p->node) : Tensor());
  return grads;
}

}  // namespace

MetricsRecord train_step(SopModel& model, const Batch& labeled, const Batch& unlabeled,
                         const TrainConfig& cfg, Sgd& sgd) {
  const auto t0 = std::chrono::steady_clock::now();
  if (labeled.images.empty()) throw ContractError("train_step: empty labeled batch");
  const bool unlabeled_active = cfg.uses_unlabeled() && cfg.lambda > 0.0;
  if (unlabeled_active && unlabeled.images.empty())
    throw ContractError("train_step: empty unlabeled batch");

  MetricsRecord rec;
  auto params = model.params();

  auto labeled_pass = [&](Tape& tape) {
    return model.labeled_loss(tape, labeled.images, labeled.labels, &labeled.sample_ids);
  };
  auto unlabeled_head = [&](Tape& tape) {
    // adversarial modes: -lambda * H through the GRL, so theta_C ascends H
    // while the reversal hands theta_F the descent direction (Eqs. of the
    // min/max objective). ent_cov: +lambda * H straight through.
    const bool adversarial = cfg.mode != TrainMode::ent_cov;
    Tensor h = model.unlabeled_entropy(tape, unlabeled.images, adversarial, &unlabeled.sample_ids);
    rec.entropy = h.value();
    return tape.scale(h, adversarial ? -cfg.lambda : cfg.lambda);
  };

  if (cfg.sequential_updates && unlabeled_active) {
    // ablation variant: two optimizer updates per iteration
    {
      Tape tape;
      model.bind(tape);
      Tensor loss = labeled_pass(tape);
      rec.ce_loss = loss.value();
      tape.backward(loss);
      sgd.update(params, collect_grads(tape, params));
    }
    {
      Tape tape;
      model.bind(tape);
      Tensor head = unlabeled_head(tape);
      tape.backward(head);
      sgd.update(params, collect_grads(tape, params));
    }
  } else {
    Tape tape;
    model.bind(tape);
    Tensor total = labeled_pass(tape);
    rec.ce_loss = total.value();
    if (unlabeled_active) total = tape.add(total, unlabeled_head(tape));
    tape.backward(total);
    sgd.update(params, collect_grads(tape, params));
  }

  rec.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

double evaluate(SopModel& model, const std::vector<SampleRecord>& split) {
  if (split.empty()) throw ContractError("evaluate: empty split");
  const int batch = 64;
  int correct = 0;
  for (size_t start = 0; start < split.size(); start += batch) {
    const size_t end = std::min(split.size(), start + batch);
    Tape tape;
    model.bind(tape);
    std::vector<const Tensor*> images;
    for (size_t i = start; i < end; ++i) images.push_back(&split[i].image);
    Tensor logits = model.logits(tape, images, false);
    for (size_t i = start; i < end; ++i) {
      const int row = static_cast<int>(i - start);
      int arg = 0;
      for (int j = 1; j < logits.dim(1); ++j)
        if (logits.at(row, j) > logits.at(row, arg)) arg = j;
      if (arg == split[i].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

ModelConfig model_config_for(TrainMode mode, const ModelConfig& base, int classes) {
  ModelConfig cfg = base;
  cfg.classes = classes;
  switch (mode) {
    case TrainMode::sup:
      cfg.pooling = PoolingKind::gap;
      cfg.normalized_classifier = false;
      break;
    case TrainMode::ours_no_cov:
      cfg.pooling = PoolingKind::gap;
      cfg.normalized_classifier = true;
      break;
    default:
      cfg.pooling = PoolingKind::sop;
      cfg.normalized_classifier = true;
      break;
  }
  return cfg;
}

FeatureExtractorConfig default_extractor(int channels, int h, int w) {
  FeatureExtractorConfig fe;
  fe.in_channels = channels;
  fe.in_h = h;
  fe.in_w = w;
  fe.layers = {LayerSpec::conv(8, 3, 1, 1), LayerSpec::relu_spec(), LayerSpec::conv(8, 3, 2, 1),
               LayerSpec::relu_spec()};
  return fe;
}

void TrainResult::restore_best(SopModel& m) const {
  auto params = m.params();
  if (params.size() != best_params.size()) throw ContractError("restore_best: parameter count mismatch");
  for (size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
}

namespace {

std::vector<Tensor> snapshot(SopModel& m) {
  std::vector<Tensor> out;
  for (Parameter* p : m.params()) out.push_back(p->value);
  return out;
}

Batch make_batch(const std::vector<SampleRecord>& pool, const std::vector<int>& idx) {
  Batch b;
  for (int i : idx) {
    const SampleRecord& rec = pool[static_cast<size_t>(i)];
    b.images.push_back(&rec.image);
    b.sample_ids.push_back(rec.id);
    if (rec.label >= 0) b.labels.push_back(rec.label);
  }
  return b;
}

}  // namespace

TrainResult run_baseline(TrainMode mode, const Dataset& data, const ModelConfig& base,
                         const TrainConfig& cfg_in) {
  TrainConfig cfg = cfg_in;
  cfg.mode = mode;
  cfg.validate(data.n_labeled(), data.n_unlabeled());
  for (const SampleRecord& rec : data.labeled)
    if (rec.label < 0 || rec.label >= data.num_classes)
      throw ConfigError("dataset: labeled sample " + std::to_string(rec.id) + " has label " +
                        std::to_string(rec.label));

  TrainResult result;
  result.model = SopModel(model_config_for(mode, base, data.num_classes), cfg.seed);
  Sgd sgd(LrByGroup{cfg.lr_feature, cfg.lr_classifier}, cfg.momentum, cfg.weight_decay);

  // independent streams so supervised modes see identical labeled batches
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  std::mt19937_64 rng_labeled(mix(cfg.seed ^ 0x11ull)), rng_unlabeled(mix(cfg.seed ^ 0x22ull));
  std::uniform_int_distribution<int> pick_labeled(0, data.n_labeled() - 1);
  std::uniform_int_distribution<int> pick_unlabeled(0, std::max(1, data.n_unlabeled()) - 1);

  const bool unlabeled_active = cfg.uses_unlabeled() && cfg.lambda > 0.0;
  double cur_val = 0.0, cur_test = 0.0;
  int rounds_since_best = 0;
  result.best_params = snapshot(result.model);

  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    std::vector<int> li(static_cast<size_t>(cfg.batch_labeled));
    for (int& v : li) v = pick_labeled(rng_labeled);
    Batch lb = make_batch(data.labeled, li);

    Batch ub;
    if (unlabeled_active) {
      std::vector<int> ui(static_cast<size_t>(cfg.batch_unlabeled));
      for (int& v : ui) v = pick_unlabeled(rng_unlabeled);
      ub = make_batch(data.unlabeled, ui);
    }

    MetricsRecord rec = train_step(result.model, lb, ub, cfg, sgd);
    rec.iteration = iter;

    if (iter % cfg.eval_every == 0 || iter == cfg.iterations) {
      cur_val = evaluate(result.model, data.validation);
      if (cur_val > result.best_val_acc || result.best_iteration == 0) {
        result.best_val_acc = cur_val;
        result.best_iteration = iter;
        result.best_params = snapshot(result.model);
        cur_test = evaluate(result.model, data.test);
        result.test_at_best = cur_test;
        rounds_since_best = 0;
      } else {
        ++rounds_since_best;
      }
    }
    rec.val_acc = cur_val;
    rec.test_acc = cur_test;
    result.series.push_back(rec);

    if (cfg.early_stop_patience > 0 && rounds_since_best >= cfg.early_stop_patience) break;
  }
  return result;
}

std::vector<LambdaSweepRow> lambda_sweep(const Dataset& data, const ModelConfig& base,
                                         const TrainConfig& cfg, const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("lambda_sweep: empty grid");
  for (double l : grid)
    if (l <= 0.0) throw ConfigError("lambda_sweep: lambda must be > 0, got " + std::to_string(l));
  std::vector<LambdaSweepRow> rows;
  for (double l : grid) {
    TrainConfig c = cfg;
    c.lambda = l;
    TrainResult r = run_baseline(c.mode, data, base, c);
    rows.push_back({l, r.best_val_acc, r.test_at_best});
  }
  return rows;
}

std::vector<LabelRateSweepRow> label_rate_sweep(const Dataset& data, const ModelConfig& base,
                                                const TrainConfig& cfg,
                                                const std::vector<double>& rates) {
  if (rates.empty()) throw ConfigError("label_rate_sweep: empty rate list");
  std::vector<LabelRateSweepRow> rows;
  for (double rate : rates) {
    if (rate < 0.0 || rate > 1.0) throw ConfigError("label_rate_sweep: rate must be in [0,1]");
    Dataset subset = split_by_rate(data, rate);
    const TrainMode mode = subset.n_unlabeled() == 0 ? TrainMode::sup_cov : cfg.mode;
    TrainResult r = run_baseline(mode, subset, base, cfg);
    rows.push_back({rate, subset.n_unlabeled(), r.best_val_acc, r.test_at_best});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV output ('.' decimal, LF endings, shortest round-trip doubles)

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& series) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "iteration,L,H,val_acc,test_acc,ms\n";
  for (const MetricsRecord& r : series)
    f << r.iteration << ',' << fmt(r.ce_loss) << ',' << fmt(r.entropy) << ',' << fmt(r.val_acc) << ','
      << fmt(r.test_acc) << ',' << fmt(r.ms) << '\n';
}

void write_lambda_sweep_csv(const std::string& path, const std::vector<LambdaSweepRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "lambda,val_acc,test_acc\n";
  for (const auto& r : rows) f << fmt(r.lambda) << ',' << fmt(r.best_val_acc) << ',' << fmt(r.test_at_best) << '\n';
}

void write_label_rate_sweep_csv(const std::string& path, const std::vector<LabelRateSweepRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "rate,n_unlabeled,val_acc,test_acc\n";
  for (const auto& r : rows)
    f << fmt(r.rate) << ',' << r.n_unlabeled << ',' << fmt(r.best_val_acc) << ',' << fmt(r.test_at_best) << '\n';
}

}  // namespace sopssl
