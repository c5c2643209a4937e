#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>

#include "ntkgp/errors.hpp"
#include "ntkgp/mlp.hpp"
#include "ntkgp/rng.hpp"

namespace ntkgp {

/// Top-k left singular triplets of a Jacobian: u has orthonormal columns,
/// sigma is descending. sigma^2 are eigenvalues of the train kernel J J^T.
struct PartialSvd {
  Eigen::MatrixXd u;       // N x k
  Eigen::VectorXd sigma;   // k, descending, >= 0
  int k = 0;
};

using LinearMap = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

namespace detail {

inline void fix_column_signs(Eigen::MatrixXd& u) {
  for (Eigen::Index c = 0; c < u.cols(); ++c) {
    Eigen::Index at = 0;
    u.col(c).cwiseAbs().maxCoeff(&at);
    if (u(at, c) < 0) u.col(c) = -u.col(c);
  }
}

inline Eigen::MatrixXd thin_q(const Eigen::MatrixXd& m) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  return qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), m.cols());
}

}  // namespace detail

/// Reference path: full SVD of an explicit Jacobian matrix, truncated to k.
inline PartialSvd dense_partial_svd(const Eigen::MatrixXd& j, int k) {
  if (k <= 0) throw ArgumentError("k must be positive");
  if (k > j.rows()) {
    std::ostringstream msg;
    msg << "k = " << k << " exceeds the " << j.rows() << " Jacobian rows";
    throw ArgumentError(msg.str());
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(j, Eigen::ComputeThinU);
  PartialSvd out;
  out.k = k;
  out.u = svd.matrixU().leftCols(k);
  out.sigma = svd.singularValues().head(k);
  detail::fix_column_signs(out.u);
  return out;
}

inline PartialSvd dense_partial_svd(const JacobianView& jac, int k,
                                    std::size_t budget_bytes = kDenseJacobianBudgetBytes) {
  if (k <= 0) throw ArgumentError("k must be positive");
  return dense_partial_svd(jac.dense(budget_bytes), k);
}

/// Block subspace iteration on v -> jvp(vjp(v)), the N x N train kernel
/// operator, using only the two products. Rayleigh-Ritz extracts the top-k
/// pairs from a (k + oversample)-dimensional block; iteration stops early
/// once the top-k Ritz values move less than rtol relative per step.
inline PartialSvd matrix_free_partial_svd(const LinearMap& jvp, const LinearMap& vjp,
                                          Eigen::Index n_rows, int k,
                                          int iters = 200, std::uint64_t seed = 0,
                                          int oversample = 8, double rtol = 1e-10) {
  if (k <= 0) throw ArgumentError("k must be positive");
  if (k > n_rows) {
    std::ostringstream msg;
    msg << "k = " << k << " exceeds the " << n_rows << " operator rows";
    throw ArgumentError(msg.str());
  }
  if (iters < 1) throw ArgumentError("iters must be at least 1");

  const Eigen::Index block = std::min<Eigen::Index>(n_rows, k + oversample);
  GaussianStream stream(mix_seed(seed, 0x737664));  // "svd"
  Eigen::MatrixXd v = detail::thin_q(stream.matrix(n_rows, block));

  const auto apply_block = [&](const Eigen::MatrixXd& in) {
    Eigen::MatrixXd out(in.rows(), in.cols());
    for (Eigen::Index c = 0; c < in.cols(); ++c) out.col(c) = jvp(vjp(in.col(c)));
    return out;
  };

  Eigen::VectorXd prev_ritz;
  for (int iter = 0; iter < iters; ++iter) {
    const Eigen::MatrixXd w = apply_block(v);
    if (!w.allFinite()) {
      std::ostringstream msg;
      msg << "non-finite values in subspace iteration " << iter;
      throw DivergenceError(msg.str());
    }
    Eigen::MatrixXd t = v.transpose() * w;
    t = ((t + t.transpose()) / 2.0).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t, Eigen::EigenvaluesOnly);
    const Eigen::VectorXd ritz = es.eigenvalues().tail(k).reverse();

    if (prev_ritz.size() == k) {
      double worst = 0.0;
      for (int i = 0; i < k; ++i)
        worst = std::max(worst, std::abs(ritz[i] - prev_ritz[i]) /
                                    std::max(std::abs(ritz[i]), 1e-300));
      if (worst < rtol) break;
    }
    prev_ritz = ritz;
    v = detail::thin_q(w);
  }

  // Final Rayleigh-Ritz extraction on the converged block.
  const Eigen::MatrixXd w = apply_block(v);
  if (!w.allFinite()) throw DivergenceError("non-finite values in final extraction");
  Eigen::MatrixXd t = v.transpose() * w;
  t = ((t + t.transpose()) / 2.0).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t);

  PartialSvd out;
  out.k = k;
  out.u.resize(n_rows, k);
  out.sigma.resize(k);
  for (int i = 0; i < k; ++i) {
    const Eigen::Index src = block - 1 - i;  // ascending -> descending
    out.sigma[i] = std::sqrt(std::max(es.eigenvalues()[src], 0.0));
    out.u.col(i) = v * es.eigenvectors().col(src);
  }
  detail::fix_column_signs(out.u);
  return out;
}

inline PartialSvd matrix_free_partial_svd(const JacobianView& jac, int k,
                                          int iters = 200, std::uint64_t seed = 0,
                                          int oversample = 8, double rtol = 1e-10) {
  return matrix_free_partial_svd(
      [&jac](const Eigen::VectorXd& v) { return jac.jvp(v); },
      [&jac](const Eigen::VectorXd& u) { return jac.vjp(u); }, jac.rows(), k, iters,
      seed, oversample, rtol);
}

/// Principal angles (radians, ascending) between the column spaces of a and b.
/// Subspace-level comparison; insensitive to rotations within either basis.
inline Eigen::VectorXd principal_angles(const Eigen::MatrixXd& a,
                                        const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows()) throw ShapeError("principal_angles: row mismatch");
  if (a.cols() == 0 || b.cols() == 0) return Eigen::VectorXd(0);
  const Eigen::MatrixXd qa = detail::thin_q(a);
  const Eigen::MatrixXd qb = detail::thin_q(b);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(qa.transpose() * qb);
  Eigen::VectorXd cosines = svd.singularValues();
  Eigen::VectorXd angles(cosines.size());
  for (Eigen::Index i = 0; i < cosines.size(); ++i)
    angles[i] = std::acos(std::clamp(cosines[i], -1.0, 1.0));
  std::sort(angles.data(), angles.data() + angles.size());
  return angles;
}

}  // namespace ntkgp
