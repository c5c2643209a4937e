#pragma once

// Fixed-architecture softplus MLP in NTK parameterization: deterministic
// initialization, batched forward, exact reverse-mode gradients, full
// Jacobian rows, matrix-free JVP/VJP, and a linearized twin model.

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <utility>
#include <vector>

#include "ntkgp/errors.hpp"
#include "ntkgp/rng.hpp"

namespace ntkgp {

/// Numerically stable softplus(z; beta) = log(1 + exp(beta*z)) / beta.
/// For beta*z above the cutoff the identity branch avoids overflow; the
/// default beta here (87.09) overflows a naive exp at |z| ~ 8.
inline double stable_softplus(double z, double beta) {
  const double bz = beta * z;
  if (bz > 30.0) return z + std::log1p(std::exp(-bz)) / beta;
  return std::log1p(std::exp(bz)) / beta;
}

/// d/dz softplus(z; beta) = sigmoid(beta*z), evaluated without overflow.
inline double softplus_derivative(double z, double beta) {
  const double bz = beta * z;
  if (bz >= 0.0) return 1.0 / (1.0 + std::exp(-bz));
  const double e = std::exp(bz);
  return e / (1.0 + e);
}

struct MlpConfig {
  std::vector<int> layer_sizes;  // n_0 .. n_L; n_L must be 1
  double softplus_beta = 87.09;
  double output_scale = 3.5;  // c_out
  double sigma_w = 1.0;
  double sigma_b = 1.0;
  std::uint64_t seed = 0;

  int input_dim() const { return layer_sizes.front(); }
  int depth() const { return static_cast<int>(layer_sizes.size()) - 1; }  // L

  /// Trainable parameter count: weights for every layer, biases for hidden
  /// layers only (the output layer is bias-free).
  Eigen::Index param_count() const {
    Eigen::Index p = 0;
    const int L = depth();
    for (int l = 1; l <= L; ++l) {
      p += static_cast<Eigen::Index>(layer_sizes[l]) * layer_sizes[l - 1];
      if (l < L) p += layer_sizes[l];
    }
    return p;
  }

  void validate() const {
    if (layer_sizes.size() < 3)
      throw ConfigError("layer_sizes needs at least one hidden layer (length >= 3)");
    for (int n : layer_sizes)
      if (n <= 0) throw ConfigError("layer sizes must be positive");
    if (layer_sizes.back() != 1) throw ConfigError("output dimension must be 1");
    if (!(softplus_beta > 0.0)) throw ConfigError("softplus_beta must be positive");
    if (!(output_scale > 0.0)) throw ConfigError("output_scale must be positive");
    if (sigma_w < 0.0 || sigma_b < 0.0)
      throw ConfigError("sigma_w and sigma_b must be non-negative");
  }

  bool same_architecture(const MlpConfig& other) const {
    return layer_sizes == other.layer_sizes && softplus_beta == other.softplus_beta &&
           output_scale == other.output_scale;
  }

  friend bool operator==(const MlpConfig&, const MlpConfig&) = default;
};

/// Per-layer weights and biases, addressable as one flat vector. Layout per
/// layer l = 1..L: W^(l) column-major (n_l x n_{l-1}), then b^(l) for l < L.
class NetworkParams {
 public:
  NetworkParams() = default;

  explicit NetworkParams(const MlpConfig& config)
      : layer_sizes_(config.layer_sizes) {
    config.validate();
    build_offsets();
    flat_ = Eigen::VectorXd::Zero(total_);
  }

  const Eigen::VectorXd& flat() const { return flat_; }
  Eigen::VectorXd& flat() { return flat_; }

  Eigen::Index size() const { return total_; }
  const std::vector<int>& layer_sizes() const { return layer_sizes_; }
  int depth() const { return static_cast<int>(layer_sizes_.size()) - 1; }

  bool compatible_with(const MlpConfig& config) const {
    return layer_sizes_ == config.layer_sizes;
  }

  Eigen::Map<const Eigen::MatrixXd> weight(int l) const {
    return {flat_.data() + weight_offset_[l], rows(l), cols(l)};
  }
  Eigen::Map<Eigen::MatrixXd> weight(int l) {
    return {flat_.data() + weight_offset_[l], rows(l), cols(l)};
  }
  Eigen::Map<const Eigen::VectorXd> bias(int l) const {
    return {flat_.data() + bias_offset_[l], rows(l)};
  }
  Eigen::Map<Eigen::VectorXd> bias(int l) {
    return {flat_.data() + bias_offset_[l], rows(l)};
  }

 private:
  Eigen::Index rows(int l) const { return layer_sizes_[l]; }
  Eigen::Index cols(int l) const { return layer_sizes_[l - 1]; }

  void build_offsets() {
    const int L = depth();
    weight_offset_.assign(L + 1, 0);
    bias_offset_.assign(L + 1, 0);
    Eigen::Index at = 0;
    for (int l = 1; l <= L; ++l) {
      weight_offset_[l] = at;
      at += rows(l) * cols(l);
      if (l < L) {
        bias_offset_[l] = at;
        at += rows(l);
      }
    }
    total_ = at;
  }

  std::vector<int> layer_sizes_;
  std::vector<Eigen::Index> weight_offset_, bias_offset_;
  Eigen::Index total_ = 0;
  Eigen::VectorXd flat_;
};

/// Gaussian initialization: W_ij ~ N(0, sigma_w^2), b_j ~ N(0, sigma_b^2),
/// drawn in flat layout order from a stream keyed by config.seed.
inline NetworkParams init_params(const MlpConfig& config) {
  NetworkParams params(config);
  GaussianStream stream(mix_seed(config.seed, 0x696e6974));  // "init"
  const int L = params.depth();
  for (int l = 1; l <= L; ++l) {
    auto w = params.weight(l);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = config.sigma_w * stream.next();
    if (l < L) {
      auto b = params.bias(l);
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = config.sigma_b * stream.next();
    }
  }
  return params;
}

namespace detail {

/// Activations and pre-activations of one batched forward pass.
/// acts[0] is the input batch; acts[l], preacts[l] for hidden layers l>=1.
struct ForwardTrace {
  std::vector<Eigen::MatrixXd> acts;
  std::vector<Eigen::MatrixXd> preacts;
  Eigen::VectorXd output;
};

inline void check_input_shape(const Eigen::MatrixXd& inputs, const MlpConfig& config) {
  if (inputs.cols() != config.input_dim()) {
    std::ostringstream msg;
    msg << "input has " << inputs.cols() << " columns, network expects "
        << config.input_dim();
    throw ShapeError(msg.str());
  }
}

inline ForwardTrace forward_trace(const NetworkParams& params, const Eigen::MatrixXd& inputs,
                                  const MlpConfig& config) {
  check_input_shape(inputs, config);
  if (!params.compatible_with(config))
    throw IncompatibilityError("parameters do not match the network architecture");

  const int L = config.depth();
  const double beta = config.softplus_beta;
  ForwardTrace trace;
  trace.acts.resize(L);
  trace.preacts.resize(L);
  trace.acts[0] = inputs;
  for (int l = 1; l < L; ++l) {
    const double inv_sqrt_fan = 1.0 / std::sqrt(static_cast<double>(config.layer_sizes[l - 1]));
    Eigen::MatrixXd z = inv_sqrt_fan * (trace.acts[l - 1] * params.weight(l).transpose());
    z.rowwise() += params.bias(l).transpose();
    trace.acts[l] = z.unaryExpr([beta](double v) { return stable_softplus(v, beta); });
    trace.preacts[l] = std::move(z);
  }
  const double out_scale =
      config.output_scale / std::sqrt(static_cast<double>(config.layer_sizes[L - 1]));
  trace.output = out_scale * (trace.acts[L - 1] * params.weight(L).transpose());
  return trace;
}

/// Accumulates J^T u over the whole batch in one reverse pass.
inline Eigen::VectorXd vjp_from_trace(const NetworkParams& params, const MlpConfig& config,
                                      const ForwardTrace& trace,
                                      const Eigen::VectorXd& cotangent) {
  const int L = config.depth();
  const double beta = config.softplus_beta;
  NetworkParams grad(config);

  const double out_scale =
      config.output_scale / std::sqrt(static_cast<double>(config.layer_sizes[L - 1]));
  grad.weight(L).noalias() = out_scale * (cotangent.transpose() * trace.acts[L - 1]);
  // G = d(u.f)/d(acts[l]), one row per batch element.
  Eigen::MatrixXd g = out_scale * (cotangent * params.weight(L));
  for (int l = L - 1; l >= 1; --l) {
    const double inv_sqrt_fan = 1.0 / std::sqrt(static_cast<double>(config.layer_sizes[l - 1]));
    const Eigen::MatrixXd s =
        g.array() * trace.preacts[l].unaryExpr([beta](double v) {
                        return softplus_derivative(v, beta);
                      }).array();
    grad.weight(l).noalias() = inv_sqrt_fan * (s.transpose() * trace.acts[l - 1]);
    grad.bias(l) = s.colwise().sum().transpose();
    if (l > 1) g.noalias() = inv_sqrt_fan * (s * params.weight(l));
  }
  return std::move(grad.flat());
}

/// Gradient of one output row w.r.t. the flat parameter vector.
inline Eigen::VectorXd row_gradient(const NetworkParams& params, const MlpConfig& config,
                                    const ForwardTrace& trace, Eigen::Index row) {
  const int L = config.depth();
  const double beta = config.softplus_beta;
  NetworkParams grad(config);

  const double out_scale =
      config.output_scale / std::sqrt(static_cast<double>(config.layer_sizes[L - 1]));
  grad.weight(L) = out_scale * trace.acts[L - 1].row(row);
  Eigen::VectorXd g = out_scale * params.weight(L).transpose();
  for (int l = L - 1; l >= 1; --l) {
    const double inv_sqrt_fan = 1.0 / std::sqrt(static_cast<double>(config.layer_sizes[l - 1]));
    const Eigen::VectorXd s =
        g.array() * trace.preacts[l].row(row).transpose().unaryExpr([beta](double v) {
                        return softplus_derivative(v, beta);
                      }).array();
    grad.weight(l).noalias() = inv_sqrt_fan * (s * trace.acts[l - 1].row(row));
    grad.bias(l) = s;
    if (l > 1) g.noalias() = inv_sqrt_fan * (params.weight(l).transpose() * s);
  }
  return std::move(grad.flat());
}

/// Forward-mode tangent propagation: J * dtheta for the whole batch.
inline Eigen::VectorXd jvp_from_trace(const NetworkParams& params, const MlpConfig& config,
                                      const ForwardTrace& trace,
                                      const NetworkParams& tangent) {
  const int L = config.depth();
  const double beta = config.softplus_beta;
  const Eigen::Index batch = trace.acts[0].rows();

  Eigen::MatrixXd da = Eigen::MatrixXd::Zero(batch, config.layer_sizes[0]);
  for (int l = 1; l < L; ++l) {
    const double inv_sqrt_fan = 1.0 / std::sqrt(static_cast<double>(config.layer_sizes[l - 1]));
    Eigen::MatrixXd dz = inv_sqrt_fan * (trace.acts[l - 1] * tangent.weight(l).transpose() +
                                         da * params.weight(l).transpose());
    dz.rowwise() += tangent.bias(l).transpose();
    da = dz.array() * trace.preacts[l].unaryExpr([beta](double v) {
                          return softplus_derivative(v, beta);
                        }).array();
  }
  const double out_scale =
      config.output_scale / std::sqrt(static_cast<double>(config.layer_sizes[L - 1]));
  return out_scale * (trace.acts[L - 1] * tangent.weight(L).transpose() +
                      da * params.weight(L).transpose());
}

}  // namespace detail

/// f(x; theta) for a batch of inputs (one row per point).
inline Eigen::VectorXd forward(const NetworkParams& params, const Eigen::MatrixXd& inputs,
                               const MlpConfig& config) {
  return detail::forward_trace(params, inputs, config).output;
}

/// Default budget for dense Jacobian materialization.
inline constexpr std::size_t kDenseJacobianBudgetBytes = std::size_t{512} << 20;

/// The Jacobian d f(inputs) / d theta at fixed (params, inputs), usable
/// either matrix-free through jvp/vjp or as a dense (rows x p) matrix when
/// it fits the memory budget.
class JacobianView {
 public:
  JacobianView(NetworkParams params, Eigen::MatrixXd inputs, MlpConfig config)
      : params_(std::move(params)), inputs_(std::move(inputs)), config_(std::move(config)),
        trace_(detail::forward_trace(params_, inputs_, config_)) {}

  Eigen::Index rows() const { return inputs_.rows(); }
  Eigen::Index param_count() const { return params_.size(); }

  const NetworkParams& params() const { return params_; }
  const Eigen::MatrixXd& inputs() const { return inputs_; }
  const MlpConfig& config() const { return config_; }
  const Eigen::VectorXd& output() const { return trace_.output; }

  /// J * v, v in R^p.
  Eigen::VectorXd jvp(const Eigen::VectorXd& v) const {
    if (v.size() != param_count()) throw ShapeError("jvp: tangent has wrong length");
    NetworkParams tangent(config_);
    tangent.flat() = v;
    return detail::jvp_from_trace(params_, config_, trace_, tangent);
  }

  /// J^T u, u in R^rows.
  Eigen::VectorXd vjp(const Eigen::VectorXd& u) const {
    if (u.size() != rows()) throw ShapeError("vjp: cotangent has wrong length");
    return detail::vjp_from_trace(params_, config_, trace_, u);
  }

  /// Dense Jacobian, materialized on first use. Throws CapacityError when
  /// rows * p * 8 bytes exceeds the budget; use jvp/vjp instead then.
  const Eigen::MatrixXd& dense(std::size_t budget_bytes = kDenseJacobianBudgetBytes) const {
    if (!dense_) {
      const std::size_t need =
          static_cast<std::size_t>(rows()) * static_cast<std::size_t>(param_count()) * sizeof(double);
      if (need > budget_bytes) {
        std::ostringstream msg;
        msg << "dense Jacobian needs " << need << " bytes, budget is " << budget_bytes
            << "; use the matrix-free jvp/vjp interface";
        throw CapacityError(msg.str());
      }
      Eigen::MatrixXd j(rows(), param_count());
      for (Eigen::Index i = 0; i < rows(); ++i)
        j.row(i) = detail::row_gradient(params_, config_, trace_, i).transpose();
      dense_ = std::move(j);
      ++dense_count_;
    }
    return *dense_;
  }

  bool dense_ready() const { return dense_.has_value(); }

  /// Process-wide count of dense materializations; lets tests assert that a
  /// matrix-free code path never touched a dense Jacobian.
  static std::int64_t dense_materializations() { return dense_count_.load(); }

 private:
  NetworkParams params_;
  Eigen::MatrixXd inputs_;
  MlpConfig config_;
  detail::ForwardTrace trace_;
  mutable std::optional<Eigen::MatrixXd> dense_;
  inline static std::atomic<std::int64_t> dense_count_{0};
};

inline JacobianView jacobian(const NetworkParams& params, const Eigen::MatrixXd& inputs,
                             const MlpConfig& config) {
  return {params, inputs, config};
}

struct LossGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;
};

/// Regularized empirical loss (1/N) sum (y_i - f(x_i))^2 + beta_n |theta - theta0|^2
/// and its exact gradient (2/N) J^T (f - y) + 2 beta_n (theta - theta0).
inline LossGrad loss_grad(const NetworkParams& params, const NetworkParams& theta0,
                          const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                          double beta_n, const MlpConfig& config) {
  const Eigen::Index n = inputs.rows();
  if (n == 0) throw ArgumentError("loss_grad: empty dataset");
  if (targets.size() != n) throw ShapeError("loss_grad: |targets| != |inputs|");
  if (beta_n < 0.0) throw ArgumentError("loss_grad: beta_n must be non-negative");

  const auto trace = detail::forward_trace(params, inputs, config);
  const Eigen::VectorXd residual = trace.output - targets;
  const Eigen::VectorXd displacement = params.flat() - theta0.flat();

  LossGrad out;
  out.loss = residual.squaredNorm() / static_cast<double>(n) +
             beta_n * displacement.squaredNorm();
  out.grad = (2.0 / static_cast<double>(n)) *
                 detail::vjp_from_trace(params, config, trace, residual) +
             (2.0 * beta_n) * displacement;
  return out;
}

/// First-order model f(x; theta0) + J_{theta0}(x) (theta - theta0).
inline Eigen::VectorXd linearized_forward(const NetworkParams& params,
                                          const NetworkParams& theta0,
                                          const Eigen::MatrixXd& inputs,
                                          const MlpConfig& config) {
  const auto trace = detail::forward_trace(theta0, inputs, config);
  NetworkParams tangent(config);
  tangent.flat() = params.flat() - theta0.flat();
  return trace.output + detail::jvp_from_trace(theta0, config, trace, tangent);
}

}  // namespace ntkgp
