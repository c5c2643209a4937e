#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntkgp/config_io.hpp"
#include "ntkgp/covariance.hpp"
#include "ntkgp/dataset.hpp"
#include "ntkgp/errors.hpp"
#include "ntkgp/gp.hpp"
#include "ntkgp/mlp.hpp"
#include "ntkgp/train.hpp"

namespace ntkgp {

/// Pointwise slack for the exact <= ub_full <= ub_k ordering check on the
/// emitted std curves; violations beyond it are counted in the summary.
inline constexpr double kOrderingSlack = 1e-6;

inline constexpr const char* kCurvesHeader =
    "x,analytic_mean,analytic_std,ub_full_std,ub_k_std,gd_mean,gd_std";

struct GridRecord {
  double x = 0.0;
  double analytic_mean = 0.0;
  double analytic_std = 0.0;
  double ub_full_std = 0.0;
  double ub_k_std = 0.0;
  double gd_mean = 0.0;
  double gd_std = 0.0;
};

struct StageTiming {
  std::string name;
  double seconds = 0.0;
};

struct ComparisonReport {
  std::vector<GridRecord> records;
  Eigen::VectorXd train_x, train_y;  // scatter for the panels
  double sigma2 = 0.0;
  int k = 0;
  int k_prime = 0;

  // All curve metrics are against the analytic posterior.
  double mean_rmse = 0.0;
  double std_rmse_ub_full = 0.0;
  double std_rmse_ub_k = 0.0;
  double std_rmse_gd = 0.0;
  int violations_exact_ub_full = 0;  // analytic_std > ub_full_std + slack
  int violations_ub_full_ub_k = 0;   // ub_full_std > ub_k_std + slack
  int analytic_std_clamped = 0;      // negative variances zeroed for reporting
  int gd_std_clamped = 0;
  double mean_head_final_loss = std::numeric_limits<double>::quiet_NaN();
  int mean_head_epochs = 0;

  std::vector<StageTiming> stages;
};

namespace detail {

/// 17 significant digits round-trip a double exactly through decimal text.
inline std::string format17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_general(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << content;
  if (!out) throw IoError("failed writing " + path);
}

/// Rethrows the in-flight error with the stage name prepended, preserving
/// its type so exit-code mapping still sees the original class. Exceptions
/// outside the library hierarchy pass through untouched.
[[noreturn]] inline void rethrow_with_stage(const std::string& stage) {
  const std::string tag = "stage " + stage + ": ";
  try {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigError(tag + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(tag + e.what());
  } catch (const ArgumentError& e) {
    throw ArgumentError(tag + e.what());
  } catch (const CapacityError& e) {
    throw CapacityError(tag + e.what());
  } catch (const DivergenceError& e) {
    throw DivergenceError(tag + e.what());
  } catch (const SingularityError& e) {
    throw SingularityError(tag + e.what());
  } catch (const IncompatibilityError& e) {
    throw IncompatibilityError(tag + e.what());
  } catch (const IoError& e) {
    throw IoError(tag + e.what());
  }
}

template <typename Fn>
void run_stage(std::vector<StageTiming>& stages, const std::string& name, Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fn();
  } catch (...) {
    rethrow_with_stage(name);
  }
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
  stages.push_back({name, dt.count()});
}

}  // namespace detail

/// Everything downstream stages share: the drawn dataset, sin/cos features
/// for train and query points, the anchor parameters, and the induced
/// observation noise sigma2 = N beta_n.
struct ProblemInputs {
  Dataset data;
  Eigen::VectorXd grid_x;
  Eigen::MatrixXd train_features;
  Eigen::MatrixXd grid_features;
  NetworkParams theta_zero;
  double sigma2 = 0.0;
};

inline ProblemInputs prepare_inputs(const ExperimentConfig& cfg) {
  cfg.validate();
  ProblemInputs p;
  p.data = make_dataset(cfg.dataset);
  p.grid_x = cfg.grid.points();
  p.train_features = trig_normalize(p.data.x, cfg.dataset.domain);
  p.grid_features = trig_normalize(p.grid_x, cfg.dataset.domain);
  p.theta_zero = init_params(cfg.mlp);
  p.sigma2 = cfg.dataset.n * cfg.train.beta_n;
  return p;
}

inline KernelBundle prepare_kernels(const ProblemInputs& p, const MlpConfig& mlp) {
  const JacobianView jac_train = jacobian(p.theta_zero, p.train_features, mlp);
  const JacobianView jac_grid = jacobian(p.theta_zero, p.grid_features, mlp);
  return build_kernels(jac_train, jac_grid);
}

/// Dense partial SVD when the training Jacobian fits the dense budget,
/// matrix-free subspace iteration otherwise.
inline SvdMethod pick_svd_method(const MlpConfig& mlp, Eigen::Index n_train) {
  const double bytes = 8.0 * static_cast<double>(n_train) *
                       static_cast<double>(mlp.param_count());
  return bytes <= static_cast<double>(kDenseJacobianBudgetBytes) ? SvdMethod::dense
                                                                 : SvdMethod::matrix_free;
}

inline void write_curves_csv(const std::vector<GridRecord>& records,
                             const std::string& path) {
  std::ostringstream s;
  s << kCurvesHeader << '\n';
  for (const GridRecord& r : records) {
    s << detail::format17(r.x) << ',' << detail::format17(r.analytic_mean) << ','
      << detail::format17(r.analytic_std) << ',' << detail::format17(r.ub_full_std) << ','
      << detail::format17(r.ub_k_std) << ',' << detail::format17(r.gd_mean) << ','
      << detail::format17(r.gd_std) << '\n';
  }
  detail::write_text_file(path, s.str());
}

inline std::vector<GridRecord> read_curves_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError(path + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCurvesHeader)
    throw IoError(path + ": unexpected header \"" + line + "\"");

  std::vector<GridRecord> out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    double v[7];
    const char* p = line.c_str();
    for (int f = 0; f < 7; ++f) {
      char* end = nullptr;
      v[f] = std::strtod(p, &end);
      if (end == p) throw IoError(path + ": malformed row \"" + line + "\"");
      p = end;
      if (f < 6) {
        if (*p != ',') throw IoError(path + ": malformed row \"" + line + "\"");
        ++p;
      }
    }
    if (*p != '\0') throw IoError(path + ": trailing characters in row \"" + line + "\"");
    out.push_back({v[0], v[1], v[2], v[3], v[4], v[5], v[6]});
  }
  return out;
}

/// Flat metric map written as summary.json. Stage wall clocks cover the
/// stages completed before artifact emission.
inline nlohmann::ordered_json summary_metrics(const ComparisonReport& report) {
  nlohmann::ordered_json m;
  m["n_train"] = static_cast<int>(report.train_x.size());
  m["k"] = report.k;
  m["k_prime"] = report.k_prime;
  m["sigma2"] = report.sigma2;
  m["mean_rmse"] = report.mean_rmse;
  m["std_rmse_ub_full"] = report.std_rmse_ub_full;
  m["std_rmse_ub_k"] = report.std_rmse_ub_k;
  m["std_rmse_gd"] = report.std_rmse_gd;
  m["violations_exact_ub_full"] = report.violations_exact_ub_full;
  m["violations_ub_full_ub_k"] = report.violations_ub_full_ub_k;
  m["analytic_std_clamped"] = report.analytic_std_clamped;
  m["gd_std_clamped"] = report.gd_std_clamped;
  m["mean_head_final_loss"] = report.mean_head_final_loss;
  m["mean_head_epochs"] = report.mean_head_epochs;
  for (const StageTiming& st : report.stages)
    m["stage_seconds_" + st.name] = st.seconds;
  return m;
}

namespace detail {

/// Self-contained static panel: ±2 std band, mean line, training points.
inline std::string render_panel_svg(const std::string& title, const std::vector<double>& x,
                                    const std::vector<double>& mean,
                                    const std::vector<double>& stdv,
                                    const Eigen::VectorXd& train_x,
                                    const Eigen::VectorXd& train_y) {
  constexpr double w = 640.0, h = 480.0;
  constexpr double ml = 56.0, mr = 16.0, mt = 36.0, mb = 44.0;

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (double v : x) {
    xmin = std::min(xmin, v);
    xmax = std::max(xmax, v);
  }
  for (Eigen::Index i = 0; i < train_x.size(); ++i) {
    xmin = std::min(xmin, train_x[i]);
    xmax = std::max(xmax, train_x[i]);
    ymin = std::min(ymin, train_y[i]);
    ymax = std::max(ymax, train_y[i]);
  }
  for (size_t i = 0; i < mean.size(); ++i) {
    ymin = std::min(ymin, mean[i] - 2.0 * stdv[i]);
    ymax = std::max(ymax, mean[i] + 2.0 * stdv[i]);
  }
  if (!(xmax > xmin)) {
    xmin -= 1.0;
    xmax += 1.0;
  }
  const double ypad = ymax > ymin ? 0.08 * (ymax - ymin) : 1.0;
  ymin -= ypad;
  ymax += ypad;

  const auto sx = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * (w - ml - mr); };
  const auto sy = [&](double v) {
    return (h - mb) - (v - ymin) / (ymax - ymin) * (h - mt - mb);
  };
  const auto px = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
       "viewBox=\"0 0 640 480\">\n"
    << "<rect x=\"0\" y=\"0\" width=\"640\" height=\"480\" fill=\"#ffffff\"/>\n"
    << "<rect x=\"" << px(ml) << "\" y=\"" << px(mt) << "\" width=\"" << px(w - ml - mr)
    << "\" height=\"" << px(h - mt - mb)
    << "\" fill=\"none\" stroke=\"#555555\" stroke-width=\"1\"/>\n";

  for (int i = 0; i <= 4; ++i) {
    const double tv = xmin + (xmax - xmin) * i / 4.0;
    const double tx = sx(tv);
    s << "<line x1=\"" << px(tx) << "\" y1=\"" << px(h - mb) << "\" x2=\"" << px(tx)
      << "\" y2=\"" << px(h - mb + 5) << "\" stroke=\"#555555\" stroke-width=\"1\"/>\n"
      << "<text x=\"" << px(tx) << "\" y=\"" << px(h - mb + 18)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
      << format_general(tv, 3) << "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double tv = ymin + (ymax - ymin) * i / 4.0;
    const double ty = sy(tv);
    s << "<line x1=\"" << px(ml - 5) << "\" y1=\"" << px(ty) << "\" x2=\"" << px(ml)
      << "\" y2=\"" << px(ty) << "\" stroke=\"#555555\" stroke-width=\"1\"/>\n"
      << "<text x=\"" << px(ml - 8) << "\" y=\"" << px(ty + 3)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
      << format_general(tv, 3) << "</text>\n";
  }

  if (!x.empty()) {
    s << "<path d=\"M";
    for (size_t i = 0; i < x.size(); ++i)
      s << ' ' << px(sx(x[i])) << ' ' << px(sy(mean[i] + 2.0 * stdv[i]));
    s << " L";
    for (size_t i = x.size(); i-- > 0;)
      s << ' ' << px(sx(x[i])) << ' ' << px(sy(mean[i] - 2.0 * stdv[i]));
    s << " Z\" fill=\"#9ecae1\" fill-opacity=\"0.45\" stroke=\"none\"/>\n";

    s << "<polyline fill=\"none\" stroke=\"#1f63a8\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < x.size(); ++i) {
      if (i) s << ' ';
      s << px(sx(x[i])) << ',' << px(sy(mean[i]));
    }
    s << "\"/>\n";
  }

  for (Eigen::Index i = 0; i < train_x.size(); ++i)
    s << "<circle cx=\"" << px(sx(train_x[i])) << "\" cy=\"" << px(sy(train_y[i]))
      << "\" r=\"2.5\" fill=\"#c44e52\"/>\n";

  s << "<text x=\"320\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"14\">"
    << title << "</text>\n</svg>\n";
  return s.str();
}

}  // namespace detail

/// Writes curves.csv, summary.json, and the four panels into out_dir
/// (created if missing). Identical reports produce identical bytes except
/// for the stage timings inside summary.json. Returns the paths written.
inline std::vector<std::string> emit_artifacts(const ComparisonReport& report,
                                               const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());

  std::vector<std::string> files;
  const auto emit = [&](const std::string& name, const std::string& content) {
    const std::string path = out_dir + "/" + name;
    detail::write_text_file(path, content);
    files.push_back(path);
  };

  const std::string csv_path = out_dir + "/curves.csv";
  write_curves_csv(report.records, csv_path);
  files.push_back(csv_path);

  emit("summary.json", summary_metrics(report).dump(2) + "\n");

  const size_t q = report.records.size();
  std::vector<double> x(q), am(q), as(q), uf(q), uk(q), gm(q), gs(q);
  for (size_t i = 0; i < q; ++i) {
    const GridRecord& r = report.records[i];
    x[i] = r.x;
    am[i] = r.analytic_mean;
    as[i] = r.analytic_std;
    uf[i] = r.ub_full_std;
    uk[i] = r.ub_k_std;
    gm[i] = r.gd_mean;
    gs[i] = r.gd_std;
  }
  emit("analytic.svg", detail::render_panel_svg("Analytic posterior", x, am, as,
                                                report.train_x, report.train_y));
  emit("ub_full.svg",
       detail::render_panel_svg("Analytic upper bound (all eigenvectors)", x, am, uf,
                                report.train_x, report.train_y));
  emit("ub_k.svg", detail::render_panel_svg(
                       "Analytic upper bound (k = " + std::to_string(report.k) +
                           " eigenvectors)",
                       x, am, uk, report.train_x, report.train_y));
  emit("gd.svg", detail::render_panel_svg(
                     "Gradient descent (K = " + std::to_string(report.k) +
                         ", K' = " + std::to_string(report.k_prime) + ")",
                     x, gm, gs, report.train_x, report.train_y));
  return files;
}

/// The four-panel comparison end to end: analytic posterior, both
/// upper-bound variants, the trained mean head, and the trained predictor
/// bank, all on one dataset and anchor. The resolved config is written
/// first, so a failed run leaves its configuration next to whatever
/// artifacts it managed; stage failures carry the stage name.
inline ComparisonReport run_figure1(const ExperimentConfig& cfg) {
  cfg.validate();

  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec)
    throw IoError("cannot create output directory " + cfg.output_dir + ": " + ec.message());
  write_resolved_config(cfg, cfg.output_dir + "/config.resolved.json");

  ComparisonReport report;
  report.k = cfg.k;
  report.k_prime = cfg.k_prime;

  ProblemInputs in;
  detail::run_stage(report.stages, "init", [&] { in = prepare_inputs(cfg); });
  report.sigma2 = in.sigma2;
  report.train_x = in.data.x;
  report.train_y = in.data.y;

  KernelBundle kernels;
  detail::run_stage(report.stages, "jacobians",
                    [&] { kernels = prepare_kernels(in, cfg.mlp); });

  PosteriorMoments moments;
  detail::run_stage(report.stages, "analytic", [&] {
    moments = analytic_posterior(kernels, in.data.y,
                                 Eigen::VectorXd::Zero(in.data.x.size()),
                                 Eigen::VectorXd::Zero(in.grid_x.size()), in.sigma2);
  });

  Prop1Decomp decomp;
  Eigen::MatrixXd ub_full;
  detail::run_stage(report.stages, "ub_full", [&] {
    decomp = prop1_decompose(kernels, in.sigma2);
    const Eigen::MatrixXd c =
        kernels.k_test_test -
        decomp.mu_term * decomp.lambda.asDiagonal() * decomp.mu_term.transpose();
    ub_full = 0.5 * (c + c.transpose());
  });

  Eigen::MatrixXd ub_k;
  detail::run_stage(report.stages, "ub_k", [&] {
    const auto mu_k = decomp.mu_term.leftCols(cfg.k);
    const Eigen::MatrixXd c =
        kernels.k_test_test -
        mu_k * decomp.lambda.head(cfg.k).asDiagonal() * mu_k.transpose();
    ub_k = 0.5 * (c + c.transpose());
  });

  MeanHead head;
  Eigen::VectorXd gd_mean;
  detail::run_stage(report.stages, "mean_head", [&] {
    head = train_posterior_mean(in.train_features, in.data.y, in.theta_zero, cfg.mlp,
                                cfg.train, cfg.mode);
    gd_mean = query_posterior_mean(head, in.grid_features, cfg.mlp);
  });
  report.mean_head_final_loss = head.final_loss;
  report.mean_head_epochs = head.epochs_run;

  CovEstimate estimate;
  detail::run_stage(report.stages, "cov_bank", [&] {
    TrainConfig cov_cfg = cfg.train;
    cov_cfg.learning_rate = cfg.cov_learning_rate;
    const PredictorBank bank = train_posterior_covariance(
        in.train_features, cfg.k, cfg.k_prime, in.theta_zero, cfg.mlp, cov_cfg,
        pick_svd_method(cfg.mlp, in.data.x.size()), cfg.mode);
    estimate = query_posterior_covariance(bank, in.grid_features, cfg.mlp);
  });

  detail::run_stage(report.stages, "report", [&] {
    const Eigen::Index q = in.grid_x.size();
    report.records.resize(static_cast<size_t>(q));
    const auto clamped_std = [](double var, int& clamped) {
      if (var < 0.0) {
        ++clamped;
        var = 0.0;
      }
      return std::sqrt(var);
    };
    double se_mean = 0.0, se_uf = 0.0, se_uk = 0.0, se_gd = 0.0;
    for (Eigen::Index i = 0; i < q; ++i) {
      GridRecord& r = report.records[static_cast<size_t>(i)];
      r.x = in.grid_x[i];
      r.analytic_mean = moments.mean[i];
      r.analytic_std = clamped_std(moments.cov(i, i), report.analytic_std_clamped);
      r.ub_full_std = clamped_std(ub_full(i, i), report.analytic_std_clamped);
      r.ub_k_std = clamped_std(ub_k(i, i), report.analytic_std_clamped);
      r.gd_mean = gd_mean[i];
      r.gd_std = clamped_std(estimate.cov(i, i), report.gd_std_clamped);

      se_mean += (r.gd_mean - r.analytic_mean) * (r.gd_mean - r.analytic_mean);
      se_uf += (r.ub_full_std - r.analytic_std) * (r.ub_full_std - r.analytic_std);
      se_uk += (r.ub_k_std - r.analytic_std) * (r.ub_k_std - r.analytic_std);
      se_gd += (r.gd_std - r.analytic_std) * (r.gd_std - r.analytic_std);
      if (r.analytic_std > r.ub_full_std + kOrderingSlack) ++report.violations_exact_ub_full;
      if (r.ub_full_std > r.ub_k_std + kOrderingSlack) ++report.violations_ub_full_ub_k;
    }
    const double dq = static_cast<double>(q);
    report.mean_rmse = std::sqrt(se_mean / dq);
    report.std_rmse_ub_full = std::sqrt(se_uf / dq);
    report.std_rmse_ub_k = std::sqrt(se_uk / dq);
    report.std_rmse_gd = std::sqrt(se_gd / dq);
  });

  detail::run_stage(report.stages, "artifacts",
                    [&] { emit_artifacts(report, cfg.output_dir); });
  return report;
}

}  // namespace ntkgp
