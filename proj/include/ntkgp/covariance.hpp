#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntkgp/errors.hpp"
#include "ntkgp/gp.hpp"
#include "ntkgp/mlp.hpp"
#include "ntkgp/rng.hpp"
#include "ntkgp/svd.hpp"
#include "ntkgp/train.hpp"

namespace ntkgp {

enum class SvdMethod { dense, matrix_free };

/// Everything needed to evaluate the GD covariance estimate away from the
/// training process: the partial SVD, one trained head per eigen target and
/// per recorded noise draw, and the shared anchor.
struct PredictorBank {
  PartialSvd svd;
  std::vector<MeanHead> eigen_heads;  // k, targets = columns of svd.u
  std::vector<MeanHead> noise_heads;  // k_prime, targets = noise_draws columns
  Eigen::MatrixXd noise_draws;        // N x k_prime, recorded exactly as trained
  double sigma2 = 0.0;                // N * beta_n of the heads' TrainConfig
  NetworkParams theta_zero;
  MlpConfig mlp;
  TrainConfig train;
  ModelMode mode = ModelMode::linearized;

  int k() const { return static_cast<int>(eigen_heads.size()); }
  int k_prime() const { return static_cast<int>(noise_heads.size()); }
};

enum class CovMode { upper_bound, monte_carlo };

struct CovEstimate {
  Eigen::MatrixXd cov;  // J x J, symmetrized
  CovMode mode = CovMode::upper_bound;
  int k_used = 0;
  int k_prime_used = 0;
};

/// The three closed-form covariance panels: the exact posterior, the upper
/// bound that drops the sigma2 M M^T correction, and its rank-k truncation.
struct AnalyticVariants {
  Eigen::MatrixXd exact;
  Eigen::MatrixXd ub_full;
  Eigen::MatrixXd ub_k;
};

namespace detail {

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string config_fingerprint(const MlpConfig& mlp, const TrainConfig& train,
                                      ModelMode mode) {
  std::ostringstream ss;
  ss.precision(17);
  for (int n : mlp.layer_sizes) ss << n << ',';
  ss << mlp.softplus_beta << ',' << mlp.output_scale << ',' << mlp.sigma_w << ','
     << mlp.sigma_b << ',' << mlp.seed << '|' << train.learning_rate << ','
     << train.beta_n << ',' << train.patience << ',' << train.max_epochs << ','
     << train.adam_beta1 << ',' << train.adam_beta2 << ',' << train.adam_eps << ','
     << (train.optimizer == OptimizerKind::adam ? "adam" : "gd") << ',' << train.seed
     << '|' << (mode == ModelMode::linearized ? "linearized" : "full");
  return ss.str();
}

inline MeanHead head_from_displacement(const NetworkParams& theta_zero,
                                       const Eigen::VectorXd& displacement,
                                       double final_loss, int epochs_run,
                                       ModelMode mode) {
  MeanHead h;
  h.theta_zero = theta_zero;
  h.theta_star = theta_zero;
  h.theta_star.flat() += displacement;
  h.final_loss = final_loss;
  h.epochs_run = epochs_run;
  h.mode = mode;
  return h;
}

/// Prior kernel K(xq, xq) through the view, dense when it fits.
inline Eigen::MatrixXd prior_kernel(const JacobianView& jac) {
  const Eigen::Index j = jac.rows();
  const std::size_t need = static_cast<std::size_t>(j) *
                           static_cast<std::size_t>(jac.param_count()) * sizeof(double);
  Eigen::MatrixXd k;
  if (need <= kDenseJacobianBudgetBytes) {
    const Eigen::MatrixXd& d = jac.dense();
    k = d * d.transpose();
  } else {
    k.resize(j, j);
    for (Eigen::Index r = 0; r < j; ++r) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(j);
      e[r] = 1.0;
      k.col(r) = jac.jvp(jac.vjp(e));
    }
  }
  return ((k + k.transpose()) / 2.0).eval();
}

}  // namespace detail

/// Algorithm: partial SVD of the training Jacobian at the anchor, then one
/// mean head per U column and one per N(0, sigma2 I) draw. Draws are seeded
/// from train_config.seed and recorded in the bank.
inline PredictorBank train_posterior_covariance(const Eigen::MatrixXd& x, int k,
                                                int k_prime,
                                                const NetworkParams& theta_zero,
                                                const MlpConfig& mlp_config,
                                                const TrainConfig& train_config,
                                                SvdMethod svd_method,
                                                ModelMode mode = ModelMode::linearized) {
  mlp_config.validate();
  train_config.validate();
  const Eigen::Index n = x.rows();
  if (n == 0) throw ArgumentError("training set must not be empty");
  if (k < 1 || k > n) {
    std::ostringstream msg;
    msg << "k = " << k << " must lie in [1, " << n << "]";
    throw ArgumentError(msg.str());
  }
  if (k_prime < 0) throw ArgumentError("k_prime must be nonnegative");
  if (!theta_zero.compatible_with(mlp_config))
    throw IncompatibilityError("anchor parameters do not match the network config");

  PredictorBank bank;
  bank.sigma2 = static_cast<double>(n) * train_config.beta_n;
  bank.theta_zero = theta_zero;
  bank.mlp = mlp_config;
  bank.train = train_config;
  bank.train.log_path.clear();  // per-head logs are not part of the bank
  bank.mode = mode;

  const JacobianView jac = jacobian(theta_zero, x, mlp_config);
  bank.svd = (svd_method == SvdMethod::dense)
                 ? dense_partial_svd(jac, k)
                 : matrix_free_partial_svd(jac, k, /*iters=*/200, train_config.seed);

  bank.noise_draws.resize(n, k_prime);
  const double noise_std = std::sqrt(bank.sigma2);
  for (int i = 0; i < k_prime; ++i) {
    GaussianStream stream(mix_seed(train_config.seed, 1000 + static_cast<std::uint64_t>(i)));
    bank.noise_draws.col(i) = noise_std * stream.vector(n);
  }

  const auto train_group = [&](const Eigen::MatrixXd& targets,
                               const std::string& label) {
    std::vector<MeanHead> heads;
    heads.reserve(static_cast<size_t>(targets.cols()));
    if (mode == ModelMode::linearized) {
      const detail::HeadBatch batch =
          detail::train_linearized_heads(jac, targets, bank.train, label);
      for (Eigen::Index i = 0; i < targets.cols(); ++i)
        heads.push_back(detail::head_from_displacement(
            theta_zero, batch.displacement.col(i), batch.final_loss[i],
            batch.epochs_run[static_cast<size_t>(i)], mode));
    } else {
      for (Eigen::Index i = 0; i < targets.cols(); ++i) {
        try {
          heads.push_back(train_posterior_mean(x, targets.col(i), theta_zero,
                                               mlp_config, bank.train, mode));
        } catch (const DivergenceError& e) {
          std::ostringstream msg;
          msg << label << " " << i << ": " << e.what();
          throw DivergenceError(msg.str());
        }
      }
    }
    return heads;
  };

  bank.eigen_heads = train_group(bank.svd.u, "eigen head");
  bank.noise_heads = train_group(bank.noise_draws, "noise head");
  return bank;
}

/// GD covariance estimate at the query points:
/// K(xq,xq) - P Sigma^2 P^T - P' P'^T / k_prime, the last term only when
/// noise heads exist (upper-bound mode otherwise).
inline CovEstimate query_posterior_covariance(const PredictorBank& bank,
                                              const Eigen::MatrixXd& x_query,
                                              const MlpConfig& mlp_config) {
  if (!(mlp_config == bank.mlp))
    throw IncompatibilityError("query config does not match the bank's config");

  CovEstimate out;
  out.k_used = bank.k();
  out.k_prime_used = bank.k_prime();
  out.mode = bank.k_prime() == 0 ? CovMode::upper_bound : CovMode::monte_carlo;
  if (x_query.rows() == 0) {
    out.cov.resize(0, 0);
    return out;
  }

  const JacobianView jac = jacobian(bank.theta_zero, x_query, bank.mlp);
  Eigen::MatrixXd cov = detail::prior_kernel(jac);

  const auto head_outputs = [&](const std::vector<MeanHead>& heads) {
    Eigen::MatrixXd p(x_query.rows(), static_cast<Eigen::Index>(heads.size()));
    for (size_t i = 0; i < heads.size(); ++i) {
      if (bank.mode == ModelMode::linearized)
        p.col(static_cast<Eigen::Index>(i)) =
            jac.jvp(heads[i].theta_star.flat() - heads[i].theta_zero.flat());
      else
        p.col(static_cast<Eigen::Index>(i)) =
            forward(heads[i].theta_star, x_query, bank.mlp) -
            forward(heads[i].theta_zero, x_query, bank.mlp);
    }
    return p;
  };

  const Eigen::MatrixXd p = head_outputs(bank.eigen_heads);
  cov -= p * bank.svd.sigma.array().square().matrix().asDiagonal() * p.transpose();
  if (bank.k_prime() > 0) {
    const Eigen::MatrixXd pn = head_outputs(bank.noise_heads);
    cov -= pn * pn.transpose() / static_cast<double>(bank.k_prime());
  }
  out.cov = ((cov + cov.transpose()) / 2.0).eval();
  return out;
}

/// Closed-form reference panels from the kernel blocks alone.
inline AnalyticVariants assemble_analytic_variants(const KernelBundle& kernels,
                                                   double sigma2, int k) {
  kernels.validate_shapes();
  if (!(sigma2 > 0.0)) throw ArgumentError("sigma2 must be positive");
  if (k < 1 || k > kernels.n_train()) {
    std::ostringstream msg;
    msg << "k = " << k << " must lie in [1, " << kernels.n_train() << "]";
    throw ArgumentError(msg.str());
  }

  const Prop1Decomp d = prop1_decompose(kernels, sigma2);
  const auto sym = [](Eigen::MatrixXd m) {
    return ((m + m.transpose()) / 2.0).eval();
  };
  const Eigen::MatrixXd eig_full =
      d.mu_term * d.lambda.asDiagonal() * d.mu_term.transpose();
  const Eigen::MatrixXd eig_k = d.mu_term.leftCols(k) *
                                d.lambda.head(k).asDiagonal() *
                                d.mu_term.leftCols(k).transpose();
  const Eigen::MatrixXd noise = sigma2 * d.m * d.m.transpose();

  AnalyticVariants out;
  out.exact = sym(kernels.k_test_test - eig_full - noise);
  out.ub_full = sym(kernels.k_test_test - eig_full);
  out.ub_k = sym(kernels.k_test_test - eig_k);
  return out;
}

// ---------------------------------------------------------------------------
// Bank serialization: 8-byte magic, u32 version, u64 manifest length, JSON
// manifest, then raw column-major double blobs at the offsets the manifest
// declares. Lets covariance queries run in a separate process from training.

namespace detail {

constexpr char kBankMagic[8] = {'N', 'T', 'K', 'G', 'P', 'B', 'N', 'K'};
constexpr std::uint32_t kBankVersion = 1;

inline nlohmann::json mlp_to_json(const MlpConfig& c) {
  return {{"layer_sizes", c.layer_sizes}, {"softplus_beta", c.softplus_beta},
          {"output_scale", c.output_scale}, {"sigma_w", c.sigma_w},
          {"sigma_b", c.sigma_b}, {"seed", c.seed}};
}

inline MlpConfig mlp_from_json(const nlohmann::json& j) {
  MlpConfig c;
  c.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
  c.softplus_beta = j.at("softplus_beta").get<double>();
  c.output_scale = j.at("output_scale").get<double>();
  c.sigma_w = j.at("sigma_w").get<double>();
  c.sigma_b = j.at("sigma_b").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline nlohmann::json train_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"beta_n", c.beta_n},
          {"patience", c.patience}, {"max_epochs", c.max_epochs},
          {"adam_beta1", c.adam_beta1}, {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "gd"},
          {"seed", c.seed}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta_n = j.at("beta_n").get<double>();
  c.patience = j.at("patience").get<int>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.adam_beta1 = j.at("adam_beta1").get<double>();
  c.adam_beta2 = j.at("adam_beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.optimizer = j.at("optimizer").get<std::string>() == "adam" ? OptimizerKind::adam
                                                               : OptimizerKind::gd;
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace detail

inline void save_bank(const PredictorBank& bank, const std::string& path) {
  const Eigen::Index p = bank.theta_zero.size();
  const Eigen::Index n = bank.svd.u.rows();

  // Blob layout, offsets in doubles from the start of the data section.
  nlohmann::json blobs = nlohmann::json::array();
  std::vector<const double*> sources;
  std::vector<std::size_t> counts;
  std::size_t offset = 0;
  const auto add_blob = [&](const std::string& name, const double* data,
                            Eigen::Index rows, Eigen::Index cols) {
    const std::size_t count = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    blobs.push_back({{"name", name}, {"rows", rows}, {"cols", cols}, {"offset", offset}});
    sources.push_back(data);
    counts.push_back(count);
    offset += count;
  };

  Eigen::MatrixXd eigen_theta(p, bank.k());
  for (int i = 0; i < bank.k(); ++i)
    eigen_theta.col(i) = bank.eigen_heads[static_cast<size_t>(i)].theta_star.flat();
  Eigen::MatrixXd noise_theta(p, bank.k_prime());
  for (int i = 0; i < bank.k_prime(); ++i)
    noise_theta.col(i) = bank.noise_heads[static_cast<size_t>(i)].theta_star.flat();

  add_blob("theta_zero", bank.theta_zero.flat().data(), p, 1);
  add_blob("svd_u", bank.svd.u.data(), n, bank.svd.u.cols());
  add_blob("svd_sigma", bank.svd.sigma.data(), bank.svd.sigma.size(), 1);
  add_blob("eigen_theta_star", eigen_theta.data(), p, bank.k());
  add_blob("noise_theta_star", noise_theta.data(), p, bank.k_prime());
  add_blob("noise_draws", bank.noise_draws.data(), bank.noise_draws.rows(),
           bank.noise_draws.cols());

  const auto losses = [](const std::vector<MeanHead>& heads) {
    std::vector<double> v;
    for (const auto& h : heads) v.push_back(h.final_loss);
    return v;
  };
  const auto epochs = [](const std::vector<MeanHead>& heads) {
    std::vector<int> v;
    for (const auto& h : heads) v.push_back(h.epochs_run);
    return v;
  };

  nlohmann::json manifest = {
      {"version", detail::kBankVersion},
      {"order", "column_major"},
      {"mlp", detail::mlp_to_json(bank.mlp)},
      {"train", detail::train_to_json(bank.train)},
      {"mode", bank.mode == ModelMode::linearized ? "linearized" : "full"},
      {"sigma2", bank.sigma2},
      {"k", bank.k()},
      {"k_prime", bank.k_prime()},
      {"n_train", n},
      {"param_count", p},
      {"svd_k", bank.svd.k},
      {"eigen_final_loss", losses(bank.eigen_heads)},
      {"eigen_epochs", epochs(bank.eigen_heads)},
      {"noise_final_loss", losses(bank.noise_heads)},
      {"noise_epochs", epochs(bank.noise_heads)},
      {"config_hash",
       detail::fnv1a64(detail::config_fingerprint(bank.mlp, bank.train, bank.mode))},
      {"blobs", blobs}};
  const std::string manifest_bytes = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open bank file for writing: " + path);
  out.write(detail::kBankMagic, sizeof detail::kBankMagic);
  const std::uint32_t version = detail::kBankVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  const std::uint64_t mlen = manifest_bytes.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof mlen);
  out.write(manifest_bytes.data(), static_cast<std::streamsize>(mlen));
  for (size_t i = 0; i < sources.size(); ++i)
    out.write(reinterpret_cast<const char*>(sources[i]),
              static_cast<std::streamsize>(counts[i] * sizeof(double)));
  if (!out) throw IoError("short write while saving bank: " + path);
}

inline PredictorBank load_bank(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open bank file: " + path);

  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, detail::kBankMagic, sizeof magic) != 0)
    throw IoError("not a predictor bank file: " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || version != detail::kBankVersion) {
    std::ostringstream msg;
    msg << "unsupported bank version " << version << " in " << path;
    throw IoError(msg.str());
  }
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof mlen);
  if (!in || mlen == 0 || mlen > (1ull << 30))
    throw IoError("corrupt manifest length in " + path);
  std::string manifest_bytes(mlen, '\0');
  in.read(manifest_bytes.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw IoError("truncated manifest in " + path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed bank manifest: ") + e.what());
  }

  PredictorBank bank;
  Eigen::MatrixXd eigen_theta, noise_theta, theta_zero_blob, svd_u, svd_sigma;
  try {
    bank.mlp = detail::mlp_from_json(manifest.at("mlp"));
    bank.train = detail::train_from_json(manifest.at("train"));
    bank.mode = manifest.at("mode").get<std::string>() == "linearized"
                    ? ModelMode::linearized
                    : ModelMode::full;
    bank.sigma2 = manifest.at("sigma2").get<double>();

    const std::uint64_t want_hash =
        detail::fnv1a64(detail::config_fingerprint(bank.mlp, bank.train, bank.mode));
    if (manifest.at("config_hash").get<std::uint64_t>() != want_hash)
      throw IoError("bank manifest config hash mismatch: " + path);

    const Eigen::Index p = manifest.at("param_count").get<Eigen::Index>();
    if (p != bank.mlp.param_count())
      throw IoError("bank manifest parameter count disagrees with its config");

    std::vector<Eigen::MatrixXd*> dests = {&theta_zero_blob, &svd_u, &svd_sigma,
                                           &eigen_theta, &noise_theta,
                                           &bank.noise_draws};
    const std::vector<std::string> names = {"theta_zero", "svd_u", "svd_sigma",
                                            "eigen_theta_star", "noise_theta_star",
                                            "noise_draws"};
    const auto& blobs = manifest.at("blobs");
    if (blobs.size() != names.size()) throw IoError("unexpected bank blob table");
    for (size_t i = 0; i < names.size(); ++i) {
      const auto& b = blobs.at(i);
      if (b.at("name").get<std::string>() != names[i])
        throw IoError("unexpected bank blob order");
      const Eigen::Index rows = b.at("rows").get<Eigen::Index>();
      const Eigen::Index cols = b.at("cols").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw IoError("negative blob shape");
      dests[i]->resize(rows, cols);
      in.read(reinterpret_cast<char*>(dests[i]->data()),
              static_cast<std::streamsize>(static_cast<std::size_t>(rows) *
                                           static_cast<std::size_t>(cols) *
                                           sizeof(double)));
      if (!in) throw IoError("truncated blob '" + names[i] + "' in " + path);
    }

    bank.theta_zero = NetworkParams(bank.mlp);
    bank.theta_zero.flat() = theta_zero_blob.col(0);
    bank.svd.u = svd_u;
    bank.svd.sigma = svd_sigma.col(0);
    bank.svd.k = manifest.at("svd_k").get<int>();

    const auto el = manifest.at("eigen_final_loss").get<std::vector<double>>();
    const auto ee = manifest.at("eigen_epochs").get<std::vector<int>>();
    const auto nl = manifest.at("noise_final_loss").get<std::vector<double>>();
    const auto ne = manifest.at("noise_epochs").get<std::vector<int>>();
    if (static_cast<Eigen::Index>(el.size()) != eigen_theta.cols() ||
        static_cast<Eigen::Index>(nl.size()) != noise_theta.cols())
      throw IoError("bank head metadata does not match blob shapes");

    for (Eigen::Index i = 0; i < eigen_theta.cols(); ++i)
      bank.eigen_heads.push_back(detail::head_from_displacement(
          bank.theta_zero, eigen_theta.col(i) - bank.theta_zero.flat(),
          el[static_cast<size_t>(i)], ee[static_cast<size_t>(i)], bank.mode));
    for (Eigen::Index i = 0; i < noise_theta.cols(); ++i)
      bank.noise_heads.push_back(detail::head_from_displacement(
          bank.theta_zero, noise_theta.col(i) - bank.theta_zero.flat(),
          nl[static_cast<size_t>(i)], ne[static_cast<size_t>(i)], bank.mode));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed bank manifest: ") + e.what());
  }
  return bank;
}

}  // namespace ntkgp
