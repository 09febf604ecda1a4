#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sopssl/data.hpp"
#include "sopssl/gradcheck.hpp"
#include "sopssl/model.hpp"
#include "sopssl/oracle.hpp"
#include "sopssl/run_config.hpp"
#include "sopssl/trainer.hpp"

namespace fs = std::filesystem;
using namespace sopssl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

RunConfig load_config(const std::string& path) {
  if (path.empty()) return RunConfig();
  return RunConfig::from_file(path);
}

const std::vector<SampleRecord>& pick_split(const Dataset& ds, const std::string& name) {
  if (name == "labeled") return ds.labeled;
  if (name == "validation") return ds.validation;
  if (name == "test") return ds.test;
  throw ConfigError("unknown split '" + name + "' (labeled|validation|test)");
}

int cmd_generate(const std::string& config_path, std::string out) {
  RunConfig cfg = load_config(config_path);
  if (out.empty()) out = cfg.out_dir + "/dataset";
  Dataset ds = generate(cfg.data);
  save_dataset(ds, out);
  cfg.write_resolved(out);
  std::cout << "dataset: " << out << "  n_l=" << ds.n_labeled() << " n_u=" << ds.n_unlabeled()
            << " val=" << ds.validation.size() << " test=" << ds.test.size() << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, const std::string& data_dir, std::string out) {
  if (out.empty()) out = cfg.out_dir;
  Dataset ds = load_dataset(data_dir);
  ModelConfig base = cfg.base_model_config(ds.image_shape);
  cfg.train.validate(ds.n_labeled(), ds.n_unlabeled());
  fs::create_directories(out);
  cfg.write_resolved(out);

  TrainResult result = run_baseline(cfg.train.mode, ds, base, cfg.train);
  write_metrics_csv((fs::path(out) / "metrics.csv").string(), result.series);
  result.model.save_checkpoint((fs::path(out) / "checkpoint_final").string());
  SopModel best = result.model;
  result.restore_best(best);
  best.save_checkpoint((fs::path(out) / "checkpoint_best").string());

  std::cout << "mode=" << train_mode_name(cfg.train.mode) << " iterations=" << result.series.size()
            << " best_val=" << fmt(result.best_val_acc) << " test_at_best=" << fmt(result.test_at_best)
            << " (iteration " << result.best_iteration << ")\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& split) {
  SopModel model = SopModel::from_checkpoint(checkpoint);
  Dataset ds = load_dataset(data_dir);
  const double acc = evaluate(model, pick_split(ds, split));
  std::cout << "accuracy(" << split << ") = " << fmt(acc) << "\n";
  return kExitOk;
}

int cmd_sweep(const RunConfig& cfg, const std::string& data_dir, const std::string& kind,
              std::string out) {
  if (out.empty()) out = cfg.out_dir;
  Dataset ds = load_dataset(data_dir);
  ModelConfig base = cfg.base_model_config(ds.image_shape);
  fs::create_directories(out);
  cfg.write_resolved(out);
  const std::string csv = (fs::path(out) / "sweep.csv").string();
  if (kind == "lambda") {
    auto rows = lambda_sweep(ds, base, cfg.train, cfg.lambda_grid);
    write_lambda_sweep_csv(csv, rows);
    for (const auto& r : rows)
      std::cout << "lambda=" << fmt(r.lambda) << " val=" << fmt(r.best_val_acc)
                << " test=" << fmt(r.test_at_best) << "\n";
  } else if (kind == "label_rate") {
    auto rows = label_rate_sweep(ds, base, cfg.train, cfg.label_rates);
    write_label_rate_sweep_csv(csv, rows);
    for (const auto& r : rows)
      std::cout << "rate=" << fmt(r.rate) << " n_u=" << r.n_unlabeled << " test=" << fmt(r.test_at_best)
                << "\n";
  } else {
    throw ConfigError("sweep kind must be 'lambda' or 'label_rate', got '" + kind + "'");
  }
  std::cout << "wrote " << csv << "\n";
  return kExitOk;
}

int cmd_gradcheck(const std::string& config_path, std::uint64_t seed, bool inject_bug) {
  RunConfig cfg = load_config(config_path);
  GradCheckReport report = run_gradcheck(cfg.sop, seed, inject_bug);
  std::printf("%-28s %14s %14s\n", "check", "max_rel_err", "mean_rel_err");
  for (const GradCheckRow& row : report.rows)
    std::printf("%-28s %14.3e %14.3e\n", row.name.c_str(), row.max_rel_err, row.mean_rel_err);
  std::printf("overall max relative error: %.3e (tolerance 1e-4)\n", report.max_rel_err);
  if (!report.passed()) {
    std::printf("FAIL\n");
    return kExitCheckFailed;
  }
  std::printf("PASS\n");
  return kExitOk;
}

// Wall-clock of the tape Newton-Schulz path against the Jacobi square root,
// plus accuracy columns, on covariance-style random SPD matrices.
int cmd_bench(const std::vector<int>& dims, int trials, const std::string& out_csv) {
  if (dims.empty()) throw ConfigError("bench: empty dimension list");
  if (trials < 1) throw ConfigError("bench: trials must be >= 1");
  std::ostringstream rows;
  rows << "d,ns_ms_per_call,eig_ms_per_call,rel_err_n5,rel_err_n1\n";
  std::mt19937_64 rng(17);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int d : dims) {
    if (d < 2) throw ConfigError("bench: d must be >= 2");
    double ns_ms = 0.0, eig_ms = 0.0, err5 = 0.0, err1 = 0.0;
    for (int t = 0; t < trials; ++t) {
      const int n = 8 * d;
      Tensor b({d, n});
      for (int i = 0; i < b.numel(); ++i) b[i] = dist(rng);
      Tensor sigma({d, d});
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int k = 0; k < n; ++k) acc += b.at(i, k) * b.at(j, k);
          sigma.at(i, j) = acc / n;
        }

      auto run_ns = [&](int iters) {
        Tape tape;
        auto [a, scale] = pre_normalize(tape, sigma, PreNorm::trace, 1e-10);
        return post_compensate(tape, newton_schulz(tape, a, iters), scale);
      };

      const auto t0 = std::chrono::steady_clock::now();
      Tensor z5 = run_ns(5);
      const auto t1 = std::chrono::steady_clock::now();
      oracle::Mat s(d);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) s(i, j) = sigma.at(i, j);
      oracle::Mat exact = oracle::matrix_sqrt_exact(s);
      const auto t2 = std::chrono::steady_clock::now();
      Tensor z1 = run_ns(1);

      ns_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
      eig_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();
      double num5 = 0.0, num1 = 0.0, den = 0.0;
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          num5 += (z5.at(i, j) - exact(i, j)) * (z5.at(i, j) - exact(i, j));
          num1 += (z1.at(i, j) - exact(i, j)) * (z1.at(i, j) - exact(i, j));
          den += exact(i, j) * exact(i, j);
        }
      err5 += std::sqrt(num5 / den);
      err1 += std::sqrt(num1 / den);
    }
    rows << d << ',' << fmt(ns_ms / trials) << ',' << fmt(eig_ms / trials) << ',' << fmt(err5 / trials)
         << ',' << fmt(err1 / trials) << '\n';
  }
  if (out_csv.empty()) {
    std::cout << rows.str();
  } else {
    std::ofstream f(out_csv, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + out_csv);
    f << rows.str();
    std::cout << "wrote " << out_csv << "\n";
  }
  return kExitOk;
}

int cmd_export_features(const std::string& checkpoint, const std::string& data_dir,
                        const std::string& split, const std::string& out_csv) {
  SopModel model = SopModel::from_checkpoint(checkpoint);
  Dataset ds = load_dataset(data_dir);
  const auto& samples = pick_split(ds, split);
  const int m = model.config().feature_dim();
  std::ofstream f(out_csv, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + out_csv);
  f << "label";
  for (int j = 0; j < m; ++j) f << ",f" << j;
  f << "\n";
  for (const SampleRecord& rec : samples) {
    Tape tape;
    model.bind(tape);
    Tensor v = model.pooled_features(tape, rec.image, rec.id);
    f << rec.label;
    for (int j = 0; j < m; ++j) f << ',' << fmt(v[j]);
    f << "\n";
  }
  std::cout << "wrote " << out_csv << " (" << samples.size() << " rows, " << (m + 1) << " columns)\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial semi-supervised learning with second-order pooling"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, checkpoint, split = "test", kind, bench_csv;
  std::string mode_override;
  double lambda_override = -1.0;
  std::int64_t seed_override = -1, iterations_override = -1;
  std::uint64_t gradcheck_seed = 42;
  bool inject_bug = false;
  std::vector<int> bench_dims = {4, 8, 16};
  int bench_trials = 20;

  auto* gen = app.add_subcommand("generate", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "JSON run config");
  gen->add_option("--out", out_dir, "output dataset directory");

  auto* train = app.add_subcommand("train", "train one model");
  train->add_option("--config", config_path, "JSON run config");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "output directory");
  train->add_option("--mode", mode_override, "override train.mode");
  train->add_option("--lambda", lambda_override, "override train.lambda");
  train->add_option("--seed", seed_override, "override train.seed");
  train->add_option("--iterations", iterations_override, "override train.iterations");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "checkpoint path base (no extension)")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--split", split, "labeled|validation|test");

  auto* sweep = app.add_subcommand("sweep", "lambda or label-rate sweep");
  sweep->add_option("--config", config_path, "JSON run config");
  sweep->add_option("--data", data_dir, "dataset directory")->required();
  sweep->add_option("--kind", kind, "lambda|label_rate")->required();
  sweep->add_option("--out", out_dir, "output directory");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient gate");
  gc->add_option("--config", config_path, "JSON run config (sop settings honored)");
  gc->add_option("--seed", gradcheck_seed, "toy model seed");
  gc->add_flag("--inject-backward-bug", inject_bug, "negative-control hook")->group("");

  auto* bench = app.add_subcommand("bench", "newton-schulz vs eigendecomposition timing");
  bench->add_option("--dims", bench_dims, "matrix sizes")->delimiter(',');
  bench->add_option("--trials", bench_trials, "matrices per size");
  bench->add_option("--out", bench_csv, "CSV output path (default stdout)");

  auto* exp = app.add_subcommand("export-features", "dump pooled feature vectors as CSV");
  exp->add_option("--checkpoint", checkpoint, "checkpoint path base")->required();
  exp->add_option("--data", data_dir, "dataset directory")->required();
  exp->add_option("--split", split, "labeled|validation|test");
  exp->add_option("--out", out_dir, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_generate(config_path, out_dir);
    if (train->parsed()) {
      RunConfig cfg = load_config(config_path);
      if (!mode_override.empty()) cfg.train.mode = train_mode_from(mode_override);
      if (lambda_override >= 0.0) cfg.train.lambda = lambda_override;
      if (seed_override >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed_override);
      if (iterations_override >= 0) cfg.train.iterations = static_cast<int>(iterations_override);
      return cmd_train(cfg, data_dir, out_dir);
    }
    if (ev->parsed()) return cmd_eval(checkpoint, data_dir, split);
    if (sweep->parsed()) return cmd_sweep(load_config(config_path), data_dir, kind, out_dir);
    if (gc->parsed()) return cmd_gradcheck(config_path, gradcheck_seed, inject_bug);
    if (bench->parsed()) return cmd_bench(bench_dims, bench_trials, bench_csv);
    if (exp->parsed()) return cmd_export_features(checkpoint, data_dir, split, out_dir);
  } catch (const DegenerateCovariance& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
