#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "ntkgp/errors.hpp"
#include "ntkgp/rng.hpp"

namespace ntkgp {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  double width() const { return hi - lo; }
  bool empty() const { return !(width() > 0.0); }
  bool contains(double x) const { return x >= lo && x <= hi; }

  friend bool operator==(const Interval&, const Interval&) = default;
};

enum class TargetFunction { sinusoid, sinusoid_plus_trend };

/// Ground-truth regression target, before observation noise.
inline double target_value(TargetFunction fn, double x) {
  switch (fn) {
    case TargetFunction::sinusoid:
      return std::sin(2.0 * x);
    case TargetFunction::sinusoid_plus_trend:
      return std::sin(2.0 * x) + 0.5 * x;
  }
  throw ArgumentError("unknown target function");
}

struct DatasetSpec {
  TargetFunction function = TargetFunction::sinusoid;
  Interval domain{-2.0, 2.0};
  Interval gap{-0.5, 0.5};  // excluded from sampling; zero width disables it
  int n = 30;
  double noise_std = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    if (domain.empty()) throw ConfigError("dataset domain must have positive width");
    if (!gap.empty()) {
      if (gap.lo < domain.lo || gap.hi > domain.hi)
        throw ConfigError("dataset gap must lie inside the domain");
      if (!(gap.lo > domain.lo || gap.hi < domain.hi))
        throw ConfigError("dataset gap leaves an empty sampling region");
    }
    if (n < 1) throw ConfigError("dataset size must be at least 1");
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be nonnegative");
  }

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct Dataset {
  Eigen::VectorXd x;  // ascending
  Eigen::VectorXd y;
};

/// Draws x uniformly from domain minus gap (inverse CDF over the one or two
/// remaining segments, no rejection loop), sorts ascending, then adds
/// Gaussian observation noise. Input draws and noise draws come from separate
/// sub-streams of the spec seed so changing n perturbs only what it must.
inline Dataset make_dataset(const DatasetSpec& spec) {
  spec.validate();

  const bool has_gap = !spec.gap.empty();
  const double left = has_gap ? spec.gap.lo - spec.domain.lo : spec.domain.width();
  const double right = has_gap ? spec.domain.hi - spec.gap.hi : 0.0;
  const double total = left + right;

  Dataset out;
  out.x.resize(spec.n);
  GaussianStream xs(mix_seed(spec.seed, 1));
  for (int i = 0; i < spec.n; ++i) {
    const double u = xs.next_uniform() * total;
    out.x[i] = u < left ? spec.domain.lo + u : spec.gap.hi + (u - left);
  }
  std::sort(out.x.begin(), out.x.end());

  out.y.resize(spec.n);
  GaussianStream noise(mix_seed(spec.seed, 2));
  for (int i = 0; i < spec.n; ++i)
    out.y[i] = target_value(spec.function, out.x[i]) + spec.noise_std * noise.next();
  return out;
}

/// Maps x affinely so the domain lands on [0, pi] and encodes each point as
/// [sin x', cos x']. Points outside the domain pass through the same affine
/// map, which is what makes extrapolation queries well defined.
inline Eigen::MatrixXd trig_normalize(const Eigen::VectorXd& x, const Interval& domain) {
  if (domain.empty()) throw ConfigError("trig_normalize needs a domain of positive width");
  Eigen::MatrixXd out(x.size(), 2);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xp = std::numbers::pi * (x[i] - domain.lo) / domain.width();
    out(i, 0) = std::sin(xp);
    out(i, 1) = std::cos(xp);
  }
  return out;
}

}  // namespace ntkgp
