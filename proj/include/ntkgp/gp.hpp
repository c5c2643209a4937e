#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <sstream>

#include "ntkgp/errors.hpp"
#include "ntkgp/mlp.hpp"

namespace ntkgp {

/// Gram blocks of the tangent kernel: K[i,j] = k(a_i, b_j) with
/// k(a, b) = grad_theta f(a) . grad_theta f(b) evaluated at the anchor.
struct KernelBundle {
  Eigen::MatrixXd k_train_train;  // N x N
  Eigen::MatrixXd k_test_train;   // J x N
  Eigen::MatrixXd k_test_test;    // J x J

  Eigen::Index n_train() const { return k_train_train.rows(); }
  Eigen::Index n_test() const { return k_test_train.rows(); }

  void validate_shapes() const {
    if (k_train_train.rows() != k_train_train.cols())
      throw ShapeError("k_train_train must be square");
    if (k_test_test.rows() != k_test_test.cols())
      throw ShapeError("k_test_test must be square");
    if (k_test_train.cols() != k_train_train.rows() ||
        k_test_train.rows() != k_test_test.rows())
      throw ShapeError("kernel block shapes disagree");
  }
};

struct PosteriorMoments {
  Eigen::VectorXd mean;   // J
  Eigen::MatrixXd cov;    // J x J
  double noise_sigma2 = 0.0;
};

/// Eigendecomposition of the train kernel, eigenvalues descending.
struct EigenDecomp {
  Eigen::MatrixXd u;       // N x N orthogonal
  Eigen::VectorXd lambda;  // N, descending, clamped at 0
};

/// M = K(test,train) (K + sigma2 I)^-1 and its eigenbasis product.
/// Identity: mu_term diag(lambda) mu_term^T + sigma2 m m^T
///         = K(test,train) (K + sigma2 I)^-1 K(test,train)^T.
struct Prop1Decomp {
  Eigen::MatrixXd mu_term;  // J x N  (M U)
  Eigen::VectorXd lambda;   // N
  Eigen::MatrixXd m;        // J x N
};

/// The exact correction dropped by the upper-bound variance mode,
/// with the quantities its two bounds are stated against.
struct BoundGap {
  Eigen::MatrixXd gap;            // J x J, sigma2 M M^T
  double train_eigen_max = 0.0;   // max eig of sigma2 M0 M0^T at test == train
  double spectral_norm = 0.0;     // ||sigma2 M M^T||_2 on the given test block
  double lambda_max_test = 0.0;   // max eig of K(test,test)
};

struct SolveDiagnostics {
  double jitter = 0.0;  // diagonal shift that made the factorization succeed
  int escalations = 0;
};

namespace detail {

inline double sym_eig_max(const Eigen::MatrixXd& s) {
  if (s.rows() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s, Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

}  // namespace detail

/// Solve s * X = b for symmetric positive (semi)definite s via Cholesky.
/// On factorization failure adds trace-scaled diagonal jitter, escalating
/// tenfold from 1e-12*trace to 1e-6*trace before giving up.
inline Eigen::MatrixXd solve_spd(const Eigen::MatrixXd& s, const Eigen::MatrixXd& b,
                                 SolveDiagnostics* diag = nullptr) {
  if (s.rows() != s.cols()) throw ShapeError("solve_spd needs a square matrix");
  if (s.rows() != b.rows()) throw ShapeError("solve_spd rhs row mismatch");
  if (s.rows() == 0) return Eigen::MatrixXd(0, b.cols());

  const double trace_scale = std::max(s.trace(), 0.0);
  double jitter = 0.0;
  for (int attempt = 0; attempt <= 7; ++attempt) {
    Eigen::MatrixXd shifted = s;
    if (jitter > 0.0) shifted.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(shifted);
    if (llt.info() == Eigen::Success) {
      if (diag) {
        diag->jitter = jitter;
        diag->escalations = attempt;
      }
      if (attempt > 0)
        std::clog << "solve_spd: added diagonal jitter " << jitter
                  << " after " << attempt << " failed factorization(s)\n";
      return llt.solve(b);
    }
    jitter = (attempt == 0) ? 1e-12 * trace_scale : jitter * 10.0;
    if (trace_scale == 0.0) jitter = std::max(jitter, 1e-12);
    if (jitter > 1e-6 * std::max(trace_scale, 1.0)) break;
  }
  std::ostringstream msg;
  msg << "Cholesky factorization failed even with jitter up to "
      << 1e-6 * std::max(trace_scale, 1.0);
  throw SingularityError(msg.str());
}

/// Gram blocks from two Jacobian views taken at the same anchor.
inline KernelBundle build_kernels(const JacobianView& jac_train,
                                  const JacobianView& jac_test) {
  if (jac_train.param_count() != jac_test.param_count())
    throw IncompatibilityError("Jacobian views disagree on parameter count");

  KernelBundle out;
  const Eigen::Index n = jac_train.rows();
  const Eigen::Index j = jac_test.rows();

  const auto bytes = [](const JacobianView& v) {
    return static_cast<std::size_t>(v.rows()) *
           static_cast<std::size_t>(v.param_count()) * sizeof(double);
  };
  const bool dense_ok = bytes(jac_train) + bytes(jac_test) <= kDenseJacobianBudgetBytes;
  if (dense_ok) {
    const Eigen::MatrixXd& jt = jac_train.dense();
    const Eigen::MatrixXd& je = jac_test.dense();
    out.k_train_train = jt * jt.transpose();
    out.k_test_train = je * jt.transpose();
    out.k_test_test = je * je.transpose();
  } else {
    // Column-by-column assembly through products only; never forms J.
    out.k_train_train.resize(n, n);
    out.k_test_train.resize(j, n);
    out.k_test_test.resize(j, j);
    for (Eigen::Index r = 0; r < n; ++r) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
      e[r] = 1.0;
      const Eigen::VectorXd g = jac_train.vjp(e);  // row r of the train Jacobian
      out.k_train_train.col(r) = jac_train.jvp(g);
      out.k_test_train.col(r) = jac_test.jvp(g);
    }
    for (Eigen::Index r = 0; r < j; ++r) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(j);
      e[r] = 1.0;
      out.k_test_test.col(r) = jac_test.jvp(jac_test.vjp(e));
    }
  }
  out.k_train_train = ((out.k_train_train + out.k_train_train.transpose()) / 2.0).eval();
  out.k_test_test = ((out.k_test_test + out.k_test_test.transpose()) / 2.0).eval();
  return out;
}

/// Eigendecomposition of the train kernel, eigenvalues descending,
/// tiny negative values clamped to zero, columns sign-fixed so the
/// largest-magnitude entry is positive.
inline EigenDecomp eigendecompose(const Eigen::MatrixXd& k) {
  if (k.rows() != k.cols()) throw ShapeError("eigendecompose needs a square matrix");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k);
  if (es.info() != Eigen::Success)
    throw SingularityError("symmetric eigendecomposition did not converge");
  const Eigen::Index n = k.rows();
  EigenDecomp out;
  out.u.resize(n, n);
  out.lambda.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.lambda[i] = std::max(es.eigenvalues()[n - 1 - i], 0.0);
    out.u.col(i) = es.eigenvectors().col(n - 1 - i);
    Eigen::Index at = 0;
    out.u.col(i).cwiseAbs().maxCoeff(&at);
    if (out.u(at, i) < 0) out.u.col(i) = -out.u.col(i);
  }
  return out;
}

/// Closed-form posterior moments. Solves through a Cholesky factorization
/// of K + sigma2 I; never forms an explicit inverse.
inline PosteriorMoments analytic_posterior(const KernelBundle& kernels,
                                           const Eigen::VectorXd& y,
                                           const Eigen::VectorXd& prior_mean_train,
                                           const Eigen::VectorXd& prior_mean_test,
                                           double sigma2,
                                           SolveDiagnostics* diag = nullptr) {
  kernels.validate_shapes();
  const Eigen::Index n = kernels.n_train();
  const Eigen::Index j = kernels.n_test();
  if (y.size() != n) throw ShapeError("target vector length mismatch");
  if (prior_mean_train.size() != n) throw ShapeError("train prior mean length mismatch");
  if (prior_mean_test.size() != j) throw ShapeError("test prior mean length mismatch");
  if (!(sigma2 >= 0.0)) throw ArgumentError("sigma2 must be nonnegative");

  PosteriorMoments out;
  out.noise_sigma2 = sigma2;
  if (n == 0) {
    out.mean = prior_mean_test;
    out.cov = kernels.k_test_test;
    return out;
  }

  if (sigma2 == 0.0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(kernels.k_train_train,
                                                      Eigen::EigenvaluesOnly);
    const double min_eig = es.eigenvalues().minCoeff();
    const double floor = 1e-10 * kernels.k_train_train.trace();
    if (min_eig <= floor) {
      std::ostringstream msg;
      msg << "train kernel singular at sigma2 = 0: min eigenvalue " << min_eig
          << " below " << floor;
      throw SingularityError(msg.str());
    }
  }

  Eigen::MatrixXd shifted = kernels.k_train_train;
  shifted.diagonal().array() += sigma2;

  // x = (K + sigma2 I)^-1 [ (y - m) | K(test,train)^T ], one factorization.
  Eigen::MatrixXd rhs(n, 1 + j);
  rhs.col(0) = y - prior_mean_train;
  rhs.rightCols(j) = kernels.k_test_train.transpose();
  const Eigen::MatrixXd x = solve_spd(shifted, rhs, diag);

  out.mean = prior_mean_test + kernels.k_test_train * x.col(0);
  Eigen::MatrixXd cov = kernels.k_test_test - kernels.k_test_train * x.rightCols(j);
  out.cov = ((cov + cov.transpose()) / 2.0).eval();
  return out;
}

/// Split of the posterior-variance subtrahend into its eigenvalue part and
/// the sigma2-weighted part the upper-bound mode drops.
inline Prop1Decomp prop1_decompose(const KernelBundle& kernels, double sigma2,
                                   SolveDiagnostics* diag = nullptr) {
  kernels.validate_shapes();
  if (!(sigma2 >= 0.0)) throw ArgumentError("sigma2 must be nonnegative");
  const Eigen::Index n = kernels.n_train();

  if (sigma2 == 0.0 && n > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(kernels.k_train_train,
                                                      Eigen::EigenvaluesOnly);
    const double floor = 1e-10 * kernels.k_train_train.trace();
    if (es.eigenvalues().minCoeff() <= floor) {
      std::ostringstream msg;
      msg << "train kernel singular at sigma2 = 0: min eigenvalue "
          << es.eigenvalues().minCoeff() << " below " << floor;
      throw SingularityError(msg.str());
    }
  }

  Eigen::MatrixXd shifted = kernels.k_train_train;
  shifted.diagonal().array() += sigma2;

  Prop1Decomp out;
  out.m = solve_spd(shifted, kernels.k_test_train.transpose(), diag).transpose();
  const EigenDecomp ed = eigendecompose(kernels.k_train_train);
  out.lambda = ed.lambda;
  out.mu_term = out.m * ed.u;
  return out;
}

/// sigma2 M M^T and the three scalars its bounds are stated against.
inline BoundGap bound_gap(const KernelBundle& kernels, double sigma2,
                          SolveDiagnostics* diag = nullptr) {
  kernels.validate_shapes();
  if (!(sigma2 > 0.0)) throw ArgumentError("bound_gap requires sigma2 > 0");

  Eigen::MatrixXd shifted = kernels.k_train_train;
  shifted.diagonal().array() += sigma2;

  BoundGap out;
  const Eigen::MatrixXd mt = solve_spd(shifted, kernels.k_test_train.transpose(), diag);
  Eigen::MatrixXd gap = sigma2 * (mt.transpose() * mt);
  out.gap = ((gap + gap.transpose()) / 2.0).eval();
  out.spectral_norm = detail::sym_eig_max(out.gap);
  out.lambda_max_test = detail::sym_eig_max(kernels.k_test_test);

  // Same correction evaluated at test == train.
  const Eigen::MatrixXd m0t = solve_spd(shifted, kernels.k_train_train);
  Eigen::MatrixXd gap0 = sigma2 * (m0t.transpose() * m0t);
  out.train_eigen_max = detail::sym_eig_max(((gap0 + gap0.transpose()) / 2.0).eval());
  return out;
}

}  // namespace ntkgp
