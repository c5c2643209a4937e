// Command-line front end: each subcommand resolves one ExperimentConfig
// (defaults, then config file, then flag overrides), runs a pipeline from the
// library, and writes its artifacts plus the resolved config into --out.
// Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O.

#include <CLI11.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ntkgp/config_io.hpp"
#include "ntkgp/covariance.hpp"
#include "ntkgp/dataset.hpp"
#include "ntkgp/errors.hpp"
#include "ntkgp/experiment.hpp"
#include "ntkgp/gp.hpp"
#include "ntkgp/mlp.hpp"
#include "ntkgp/rng.hpp"
#include "ntkgp/svd.hpp"
#include "ntkgp/train.hpp"

namespace {

using namespace ntkgp;

struct Overrides {
  std::optional<std::string> function;
  std::optional<int> n;
  std::optional<double> noise_std;
  std::optional<std::uint64_t> dataset_seed;
  std::optional<int> hidden_width;
  std::optional<int> hidden_layers;
  std::optional<std::uint64_t> mlp_seed;
  std::optional<double> mean_lr;
  std::optional<double> cov_lr;
  std::optional<double> beta_n;
  std::optional<int> patience;
  std::optional<int> max_epochs;
  std::optional<std::string> optimizer;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::string> mode;
  std::optional<int> k;
  std::optional<int> k_prime;
  std::optional<double> grid_min;
  std::optional<double> grid_max;
  std::optional<int> grid_count;
  std::optional<std::string> out;
};

void add_common_flags(CLI::App* sub, std::string& config_path, Overrides& o) {
  sub->add_option("--config", config_path, "JSON config file; defaults are used when absent");
  sub->add_option("--out", o.out, "output directory (overrides output_dir)");
  sub->add_option("--function", o.function, "target function id");
  sub->add_option("--n", o.n, "number of training points");
  sub->add_option("--noise-std", o.noise_std, "observation noise std");
  sub->add_option("--dataset-seed", o.dataset_seed, "dataset RNG seed");
  sub->add_option("--width", o.hidden_width, "hidden layer width");
  sub->add_option("--hidden-layers", o.hidden_layers, "number of hidden layers");
  sub->add_option("--mlp-seed", o.mlp_seed, "parameter init seed");
  sub->add_option("--mean-lr", o.mean_lr, "mean head learning rate");
  sub->add_option("--cov-lr", o.cov_lr, "covariance head learning rate");
  sub->add_option("--beta-n", o.beta_n, "regularizer weight; sigma2 = N * beta_n");
  sub->add_option("--patience", o.patience, "epochs without improvement before stopping");
  sub->add_option("--max-epochs", o.max_epochs, "epoch cap");
  sub->add_option("--optimizer", o.optimizer, "adam or gd");
  sub->add_option("--train-seed", o.train_seed, "noise-draw / SVD seed");
  sub->add_option("--mode", o.mode, "linearized or full");
  sub->add_option("--k", o.k, "eigen heads / truncation rank");
  sub->add_option("--k-prime", o.k_prime, "noise heads (0 = upper-bound mode)");
  sub->add_option("--grid-min", o.grid_min, "query grid lower edge");
  sub->add_option("--grid-max", o.grid_max, "query grid upper edge");
  sub->add_option("--grid-count", o.grid_count, "query grid size");
}

ExperimentConfig resolve_config(const std::string& config_path, const Overrides& o) {
  ExperimentConfig cfg =
      config_path.empty() ? default_experiment_config() : load_experiment_config(config_path);

  if (o.function)
    cfg.dataset.function = detail::parse_target_function(*o.function, "--function");
  if (o.n) cfg.dataset.n = *o.n;
  if (o.noise_std) cfg.dataset.noise_std = *o.noise_std;
  if (o.dataset_seed) cfg.dataset.seed = *o.dataset_seed;
  if (o.hidden_width || o.hidden_layers) {
    const int layers = o.hidden_layers ? *o.hidden_layers
                                       : static_cast<int>(cfg.mlp.layer_sizes.size()) - 2;
    const int width = o.hidden_width ? *o.hidden_width : cfg.mlp.layer_sizes[1];
    if (layers < 1) throw ConfigError("--hidden-layers must be at least 1");
    if (width < 1) throw ConfigError("--width must be at least 1");
    cfg.mlp.layer_sizes.assign(static_cast<size_t>(layers) + 2, width);
    cfg.mlp.layer_sizes.front() = 2;
    cfg.mlp.layer_sizes.back() = 1;
  }
  if (o.mlp_seed) cfg.mlp.seed = *o.mlp_seed;
  if (o.mean_lr) cfg.train.learning_rate = *o.mean_lr;
  if (o.cov_lr) cfg.cov_learning_rate = *o.cov_lr;
  if (o.beta_n) cfg.train.beta_n = *o.beta_n;
  if (o.patience) cfg.train.patience = *o.patience;
  if (o.max_epochs) cfg.train.max_epochs = *o.max_epochs;
  if (o.optimizer) cfg.train.optimizer = detail::parse_optimizer(*o.optimizer, "--optimizer");
  if (o.train_seed) cfg.train.seed = *o.train_seed;
  if (o.mode) cfg.mode = detail::parse_mode(*o.mode, "--mode");
  if (o.k) cfg.k = *o.k;
  if (o.k_prime) cfg.k_prime = *o.k_prime;
  if (o.grid_min) cfg.grid.min = *o.grid_min;
  if (o.grid_max) cfg.grid.max = *o.grid_max;
  if (o.grid_count) cfg.grid.count = *o.grid_count;
  if (o.out) cfg.output_dir = *o.out;

  // When the dataset changed but beta_n was not pinned anywhere, keep the
  // noise-matched default sigma2 = noise_std^2.
  if (!o.beta_n && config_path.empty())
    cfg.train.beta_n = cfg.dataset.noise_std * cfg.dataset.noise_std / cfg.dataset.n;

  cfg.validate();
  return cfg;
}

std::string prepare_out_dir(const ExperimentConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec)
    throw IoError("cannot create output directory " + cfg.output_dir + ": " + ec.message());
  write_resolved_config(cfg, cfg.output_dir + "/config.resolved.json");
  return cfg.output_dir;
}

double clamped_std(double var) { return std::sqrt(std::max(var, 0.0)); }

int run_analytic(const ExperimentConfig& cfg) {
  const std::string dir = prepare_out_dir(cfg);
  const ProblemInputs in = prepare_inputs(cfg);
  const KernelBundle kernels = prepare_kernels(in, cfg.mlp);
  const PosteriorMoments moments =
      analytic_posterior(kernels, in.data.y, Eigen::VectorXd::Zero(in.data.x.size()),
                         Eigen::VectorXd::Zero(in.grid_x.size()), in.sigma2);
  const AnalyticVariants variants = assemble_analytic_variants(kernels, in.sigma2, cfg.k);

  std::ostringstream s;
  s << "x,mean,std,ub_full_std,ub_k_std\n";
  for (Eigen::Index i = 0; i < in.grid_x.size(); ++i)
    s << detail::format17(in.grid_x[i]) << ',' << detail::format17(moments.mean[i]) << ','
      << detail::format17(clamped_std(moments.cov(i, i))) << ','
      << detail::format17(clamped_std(variants.ub_full(i, i))) << ','
      << detail::format17(clamped_std(variants.ub_k(i, i))) << '\n';
  detail::write_text_file(dir + "/analytic.csv", s.str());

  std::cout << "analytic posterior on " << in.grid_x.size() << " grid points (N = "
            << in.data.x.size() << ", sigma2 = " << in.sigma2 << ", k = " << cfg.k
            << ") -> " << dir << "/analytic.csv\n";
  return 0;
}

int run_fit_mean(const ExperimentConfig& cfg, const std::string& loss_log) {
  const std::string dir = prepare_out_dir(cfg);
  const ProblemInputs in = prepare_inputs(cfg);
  const KernelBundle kernels = prepare_kernels(in, cfg.mlp);
  const PosteriorMoments moments =
      analytic_posterior(kernels, in.data.y, Eigen::VectorXd::Zero(in.data.x.size()),
                         Eigen::VectorXd::Zero(in.grid_x.size()), in.sigma2);

  TrainConfig tc = cfg.train;
  tc.log_path = loss_log;
  const MeanHead head =
      train_posterior_mean(in.train_features, in.data.y, in.theta_zero, cfg.mlp, tc, cfg.mode);
  const Eigen::VectorXd gd_mean = query_posterior_mean(head, in.grid_features, cfg.mlp);

  const double rmse = std::sqrt((gd_mean - moments.mean).squaredNorm() /
                                static_cast<double>(in.grid_x.size()));
  std::ostringstream s;
  s << "x,analytic_mean,gd_mean\n";
  for (Eigen::Index i = 0; i < in.grid_x.size(); ++i)
    s << detail::format17(in.grid_x[i]) << ',' << detail::format17(moments.mean[i]) << ','
      << detail::format17(gd_mean[i]) << '\n';
  detail::write_text_file(dir + "/mean.csv", s.str());

  std::cout << "mean head (" << to_string(cfg.mode) << ", " << to_string(cfg.train.optimizer)
            << "): " << head.epochs_run << " epochs, final loss " << head.final_loss
            << ", RMSE vs analytic mean " << rmse << " -> " << dir << "/mean.csv\n";
  return 0;
}

int run_fit_cov(const ExperimentConfig& cfg, const std::string& bank_path,
                const std::string& method_name) {
  const std::string dir = prepare_out_dir(cfg);
  const ProblemInputs in = prepare_inputs(cfg);
  const KernelBundle kernels = prepare_kernels(in, cfg.mlp);
  const PosteriorMoments moments =
      analytic_posterior(kernels, in.data.y, Eigen::VectorXd::Zero(in.data.x.size()),
                         Eigen::VectorXd::Zero(in.grid_x.size()), in.sigma2);

  SvdMethod method = pick_svd_method(cfg.mlp, in.data.x.size());
  if (method_name == "dense") method = SvdMethod::dense;
  else if (method_name == "matrix-free") method = SvdMethod::matrix_free;
  else if (method_name != "auto")
    throw ConfigError("--method must be auto, dense, or matrix-free");

  TrainConfig cov_cfg = cfg.train;
  cov_cfg.learning_rate = cfg.cov_learning_rate;
  const PredictorBank bank =
      train_posterior_covariance(in.train_features, cfg.k, cfg.k_prime, in.theta_zero,
                                 cfg.mlp, cov_cfg, method, cfg.mode);
  const CovEstimate estimate = query_posterior_covariance(bank, in.grid_features, cfg.mlp);

  const double frob =
      (estimate.cov - moments.cov).norm() / std::max(moments.cov.norm(), 1e-300);
  std::ostringstream s;
  s << "x,analytic_std,gd_std\n";
  for (Eigen::Index i = 0; i < in.grid_x.size(); ++i)
    s << detail::format17(in.grid_x[i]) << ','
      << detail::format17(clamped_std(moments.cov(i, i))) << ','
      << detail::format17(clamped_std(estimate.cov(i, i))) << '\n';
  detail::write_text_file(dir + "/cov.csv", s.str());

  if (!bank_path.empty()) save_bank(bank, bank_path);

  std::cout << "covariance bank (k = " << bank.k() << ", k' = " << bank.k_prime() << ", "
            << (estimate.mode == CovMode::upper_bound ? "upper-bound" : "monte-carlo")
            << " mode): Frobenius error vs exact " << frob << " -> " << dir << "/cov.csv";
  if (!bank_path.empty()) std::cout << ", bank -> " << bank_path;
  std::cout << "\n";
  return 0;
}

int run_figure1_cmd(const ExperimentConfig& cfg) {
  const ComparisonReport report = run_figure1(cfg);
  std::cout << "figure1: " << report.records.size() << " grid points, N = "
            << report.train_x.size() << ", sigma2 = " << report.sigma2 << "\n"
            << "  mean RMSE (gd vs analytic):   " << report.mean_rmse << "\n"
            << "  std RMSE ub_full / ub_k / gd: " << report.std_rmse_ub_full << " / "
            << report.std_rmse_ub_k << " / " << report.std_rmse_gd << "\n"
            << "  ordering violations:          " << report.violations_exact_ub_full
            << " (exact vs ub_full), " << report.violations_ub_full_ub_k
            << " (ub_full vs ub_k)\n"
            << "  artifacts in " << cfg.output_dir << ": curves.csv summary.json "
               "analytic.svg ub_full.svg ub_k.svg gd.svg config.resolved.json\n";
  return 0;
}

struct BoundCheckFlags {
  int instances = 20;
  int max_train = 12;
  int max_test = 8;
  double sigma2_min = 1e-3;
  double sigma2_max = 10.0;
  std::uint64_t seed = 1;
  double slack = 1e-10;
};

/// Random-instance checks of the covariance decomposition identity and both
/// tightness bounds, against a direct solve. Violations exit with code 3.
int run_check_bounds(const BoundCheckFlags& f) {
  if (f.instances < 1) throw ConfigError("--instances must be at least 1");
  if (f.max_train < 2 || f.max_test < 1)
    throw ConfigError("--max-train must be at least 2 and --max-test at least 1");
  if (!(f.sigma2_min > 0.0) || !(f.sigma2_max < std::numeric_limits<double>::infinity()) ||
      !(f.sigma2_max >= f.sigma2_min))
    throw ConfigError("sigma2 range must satisfy 0 < min <= max");

  GaussianStream gen(mix_seed(f.seed, 0xb0bd));
  double worst_identity = 0.0, worst_train = 0.0, worst_spectral = 0.0;

  for (int t = 0; t < f.instances; ++t) {
    const int n = 2 + static_cast<int>(gen.next_uniform() * (f.max_train - 1));
    const int j = 1 + static_cast<int>(gen.next_uniform() * f.max_test);
    const int d = n + j + 2;
    const Eigen::MatrixXd jt = gen.matrix(n, d);
    const Eigen::MatrixXd jq = gen.matrix(j, d);
    KernelBundle kernels;
    kernels.k_train_train = jt * jt.transpose();
    kernels.k_test_train = jq * jt.transpose();
    kernels.k_test_test = jq * jq.transpose();
    const double sigma2 =
        f.sigma2_min * std::pow(f.sigma2_max / f.sigma2_min, gen.next_uniform());

    const Prop1Decomp decomp = prop1_decompose(kernels, sigma2);
    const Eigen::MatrixXd reconstructed =
        decomp.mu_term * decomp.lambda.asDiagonal() * decomp.mu_term.transpose() +
        sigma2 * decomp.m * decomp.m.transpose();
    const Eigen::MatrixXd direct =
        kernels.k_test_train *
        solve_spd(kernels.k_train_train +
                      sigma2 * Eigen::MatrixXd::Identity(n, n),
                  kernels.k_test_train.transpose());
    worst_identity = std::max(worst_identity, (reconstructed - direct).norm() /
                                                  std::max(direct.norm(), 1e-300));

    const BoundGap gap = bound_gap(kernels, sigma2);
    worst_train = std::max(worst_train, gap.train_eigen_max - sigma2);
    worst_spectral =
        std::max(worst_spectral, gap.spectral_norm - 0.25 * gap.lambda_max_test);
  }

  // Scalar equality case: one train point with kernel value lambda = sigma2
  // makes the dropped term exactly lambda_max / 4.
  KernelBundle scalar;
  scalar.k_train_train = Eigen::MatrixXd::Constant(1, 1, 0.7);
  scalar.k_test_train = scalar.k_train_train;
  scalar.k_test_test = scalar.k_train_train;
  const BoundGap scalar_gap = bound_gap(scalar, 0.7);
  const double equality_dev =
      std::abs(scalar_gap.spectral_norm - 0.25 * scalar_gap.lambda_max_test);

  const bool ok = worst_identity <= f.slack && worst_train <= f.slack &&
                  worst_spectral <= f.slack && equality_dev <= 1e-12;
  std::cout << (ok ? "PASS" : "FAIL") << " over " << f.instances << " instances\n"
            << "  max identity residual (Frobenius-relative): " << worst_identity
            << " (slack " << f.slack << ")\n"
            << "  max train-point eigenvalue excess over sigma2: " << worst_train << "\n"
            << "  max spectral norm excess over lambda_max/4:    " << worst_spectral << "\n"
            << "  scalar equality-case deviation:                " << equality_dev
            << " (slack 1e-12)\n";
  return ok ? 0 : 3;
}

int run_svd(const ExperimentConfig& cfg, const std::string& method_name, int iters) {
  if (iters < 1) throw ConfigError("--iters must be at least 1");
  const bool want_dense = method_name == "both" || method_name == "dense";
  const bool want_mf = method_name == "both" || method_name == "matrix-free";
  if (!want_dense && !want_mf)
    throw ConfigError("--method must be both, dense, or matrix-free");

  const std::string dir = prepare_out_dir(cfg);
  const ProblemInputs in = prepare_inputs(cfg);
  const JacobianView jac = jacobian(in.theta_zero, in.train_features, cfg.mlp);

  std::optional<PartialSvd> dense, mf;
  if (want_dense) dense = dense_partial_svd(jac, cfg.k);
  if (want_mf) mf = matrix_free_partial_svd(jac, cfg.k, iters, cfg.train.seed);

  std::ostringstream s;
  std::cout << "training Jacobian: " << jac.rows() << " x " << jac.param_count()
            << ", top " << cfg.k << " singular values\n";
  if (dense && mf) {
    s << "i,sigma_dense,sigma_matrix_free,rel_err\n";
    for (int i = 0; i < cfg.k; ++i) {
      const double rel = std::abs(mf->sigma[i] - dense->sigma[i]) /
                         std::max(std::abs(dense->sigma[i]), 1e-300);
      s << i << ',' << detail::format17(dense->sigma[i]) << ','
        << detail::format17(mf->sigma[i]) << ',' << detail::format17(rel) << '\n';
      std::printf("  sigma[%d]  dense %.12e  matrix-free %.12e  rel err %.3e\n", i,
                  dense->sigma[i], mf->sigma[i], rel);
    }
    const Eigen::VectorXd angles = principal_angles(dense->u, mf->u);
    std::cout << "  max principal angle between subspaces: " << angles.maxCoeff()
              << " rad\n";
  } else {
    const PartialSvd& one = dense ? *dense : *mf;
    s << (dense ? "i,sigma_dense\n" : "i,sigma_matrix_free\n");
    for (int i = 0; i < cfg.k; ++i) {
      s << i << ',' << detail::format17(one.sigma[i]) << '\n';
      std::printf("  sigma[%d]  %.12e\n", i, one.sigma[i]);
    }
  }
  detail::write_text_file(dir + "/svd.csv", s.str());
  std::cout << "  -> " << dir << "/svd.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NTK Gaussian process regression toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides o;

  CLI::App* analytic = app.add_subcommand(
      "analytic", "closed-form posterior and upper-bound variants on the query grid");
  add_common_flags(analytic, config_path, o);

  CLI::App* fit_mean = app.add_subcommand(
      "fit-mean", "train the regularized mean head and compare to the analytic mean");
  add_common_flags(fit_mean, config_path, o);
  std::string loss_log;
  fit_mean->add_option("--loss-log", loss_log, "write per-epoch loss CSV to this path");

  CLI::App* fit_cov = app.add_subcommand(
      "fit-cov", "train the covariance predictor bank and compare to the exact posterior");
  add_common_flags(fit_cov, config_path, o);
  std::string bank_path;
  std::string cov_method = "auto";
  fit_cov->add_option("--save-bank", bank_path, "serialize the trained bank to this path");
  fit_cov->add_option("--method", cov_method, "partial SVD route: auto, dense, matrix-free");

  CLI::App* figure1 = app.add_subcommand(
      "figure1", "full four-panel comparison with CSV/JSON/SVG artifacts");
  add_common_flags(figure1, config_path, o);

  CLI::App* check = app.add_subcommand(
      "check-bounds", "random-instance decomposition identity and tightness bound checks");
  BoundCheckFlags bf;
  check->add_option("--instances", bf.instances, "number of random instances");
  check->add_option("--max-train", bf.max_train, "max training points per instance");
  check->add_option("--max-test", bf.max_test, "max query points per instance");
  check->add_option("--sigma2-min", bf.sigma2_min, "noise range lower edge");
  check->add_option("--sigma2-max", bf.sigma2_max, "noise range upper edge");
  check->add_option("--seed", bf.seed, "instance RNG seed");
  check->add_option("--slack", bf.slack, "allowed excess before failing");

  CLI::App* svd = app.add_subcommand(
      "svd", "partial SVD of the training Jacobian, dense vs matrix-free");
  add_common_flags(svd, config_path, o);
  std::string svd_method = "both";
  int svd_iters = 200;
  svd->add_option("--method", svd_method, "both, dense, or matrix-free");
  svd->add_option("--iters", svd_iters, "subspace iteration cap");

  try {
    app.parse(argc, argv);
    if (check->parsed()) return run_check_bounds(bf);

    const ExperimentConfig cfg = resolve_config(config_path, o);
    if (analytic->parsed()) return run_analytic(cfg);
    if (fit_mean->parsed()) return run_fit_mean(cfg, loss_log);
    if (fit_cov->parsed()) return run_fit_cov(cfg, bank_path, cov_method);
    if (figure1->parsed()) return run_figure1_cmd(cfg);
    if (svd->parsed()) return run_svd(cfg, svd_method, svd_iters);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const ntkgp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ntkgp::ArgumentError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ntkgp::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ntkgp::IncompatibilityError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ntkgp::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const ntkgp::Error& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
