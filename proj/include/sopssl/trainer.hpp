#ifndef SOPSSL_TRAINER_HPP
#define SOPSSL_TRAINER_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sopssl/data.hpp"
#include "sopssl/model.hpp"

namespace sopssl {

enum class TrainMode { sup, sup_cov, ent_cov, ours_no_cov, ours };

const char* train_mode_name(TrainMode m);
TrainMode train_mode_from(const std::string& name);

struct TrainConfig {
  TrainMode mode = TrainMode::ours;
  double lambda = 0.025;
  double lr_feature = 0.0012;
  double lr_classifier = 0.003;
  int batch_labeled = 10;
  int batch_unlabeled = 10;
  int iterations = 2000;
  std::uint64_t seed = 0;
  int eval_every = 100;
  int early_stop_patience = 0;  // evaluation rounds; 0 disables
  bool sequential_updates = false;
  double momentum = 0.0;
  double weight_decay = 0.0;

  bool uses_unlabeled() const {
    return mode == TrainMode::ent_cov || mode == TrainMode::ours_no_cov || mode == TrainMode::ours;
  }
  // lambda == 0 is the supervised limit: the unlabeled path is skipped
  // entirely. Sweeps reject it separately.
  void validate(int n_labeled, int n_unlabeled) const;
};

struct MetricsRecord {
  int iteration = 0;
  double ce_loss = 0.0;   // L
  double entropy = 0.0;   // H on the unlabeled batch (0 for supervised modes)
  double val_acc = 0.0;
  double test_acc = 0.0;
  double ms = 0.0;
};

struct LrByGroup {
  double feature = 0.0012;
  double classifier = 0.003;
  double of(ParamGroup g) const { return g == ParamGroup::feature_extractor ? feature : classifier; }
};

// Plain SGD; momentum/weight decay only when configured.
class Sgd {
 public:
  Sgd(LrByGroup lr, double momentum = 0.0, double weight_decay = 0.0)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  // grads aligned with params; a missing (empty) gradient is an error.
  void update(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads);

 private:
  LrByGroup lr_;
  double momentum_, weight_decay_;
  std::map<std::string, Tensor> velocity_;
};

struct Batch {
  std::vector<const Tensor*> images;
  std::vector<int> labels;      // empty for unlabeled batches
  std::vector<int> sample_ids;
};

// One optimization step: labeled CE for every group, plus the mode's
// unlabeled head (entropy through the GRL for the adversarial modes,
// plain weighted entropy for ent_cov). Gradients from both paths
// accumulate on one tape, then a single SGD update realizes descent on
// L + lambda*H for theta_F and L - lambda*H for theta_C.
MetricsRecord train_step(SopModel& model, const Batch& labeled, const Batch& unlabeled,
                         const TrainConfig& cfg, Sgd& sgd);

double evaluate(SopModel& model, const std::vector<SampleRecord>& split);

// Pooling/classifier layout for a mode: sup = gap + unnormalized linear,
// ours_no_cov = gap + normalized, everything else = sop + normalized.
ModelConfig model_config_for(TrainMode mode, const ModelConfig& base, int classes);

// conv(8,3,s1,p1) relu conv(8,3,s2,p1) relu -> d=8, 8x8 spatial
FeatureExtractorConfig default_extractor(int channels, int h, int w);

struct TrainResult {
  std::vector<MetricsRecord> series;
  SopModel model;                    // final state
  std::vector<Tensor> best_params;   // snapshot at best validation accuracy
  double best_val_acc = 0.0;
  double test_at_best = 0.0;
  int best_iteration = 0;

  void restore_best(SopModel& m) const;
};

TrainResult run_baseline(TrainMode mode, const Dataset& data, const ModelConfig& base,
                         const TrainConfig& cfg);

struct LambdaSweepRow {
  double lambda = 0.0;
  double best_val_acc = 0.0;
  double test_at_best = 0.0;
};

std::vector<LambdaSweepRow> lambda_sweep(const Dataset& data, const ModelConfig& base,
                                         const TrainConfig& cfg, const std::vector<double>& grid);

struct LabelRateSweepRow {
  double rate = 0.0;
  int n_unlabeled = 0;
  double best_val_acc = 0.0;
  double test_at_best = 0.0;
};

// rate 0 retains no unlabeled data and runs mode sup_cov.
std::vector<LabelRateSweepRow> label_rate_sweep(const Dataset& data, const ModelConfig& base,
                                                const TrainConfig& cfg,
                                                const std::vector<double>& rates);

// header: iteration,L,H,val_acc,test_acc,ms
void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& series);
void write_lambda_sweep_csv(const std::string& path, const std::vector<LambdaSweepRow>& rows);
void write_label_rate_sweep_csv(const std::string& path, const std::vector<LabelRateSweepRow>& rows);

}  // namespace sopssl

#endif
