#pragma once

// Splits a 3D Gaussian, for an axis-aligned slice family, into a 1D marginal
// along the slice normal and a 2D Gaussian in the slice plane conditioned on
// the slice depth. The unnormalized responses multiply back to the joint one:
//
//   G(u, v, t) = G(t) * G(u, v | t)
//
// cond_cov is the Schur complement of the normal block and does not depend on
// t; only the conditional mean moves with depth.

#include <cmath>
#include <limits>

#include "slicegs/core.hpp"

namespace slicegs {

inline constexpr double kDefaultSigmaCutoff = 3.0;

template <class Real> struct FactorizedGaussian {
  Real marginal_mean = 0;
  Real marginal_var = 1;
  Vec2<Real> inplane_mean = Vec2<Real>::Zero();  // mean restricted to the (u, v) axes
  Vec2<Real> regression = Vec2<Real>::Zero();    // Sigma_pn / Sigma_nn
  Mat2<Real> cond_cov = Mat2<Real>::Identity();
  Mat2<Real> cond_precision = Mat2<Real>::Identity();
  std::size_t source_index = 0;

  Vec2<Real> cond_mean_at(Real t) const { return inplane_mean + regression * (t - marginal_mean); }
};

template <class Real>
FactorizedGaussian<Real> factorize(const Vec3<Real>& mean, const Covariance3<Real>& cov, Axis axis,
                                   std::size_t source_index = 0) {
  const PlaneAxes ax = plane_axes(axis);
  const Real snn = cov(ax.n, ax.n);
  if (!(snn > Real(0))) throw NumericError("degenerate covariance: non-positive variance along slice normal");

  FactorizedGaussian<Real> fg;
  fg.source_index = source_index;
  fg.marginal_mean = mean[ax.n];
  fg.marginal_var = snn;
  fg.inplane_mean = Vec2<Real>(mean[ax.u], mean[ax.v]);

  const Vec2<Real> cross(cov(ax.u, ax.n), cov(ax.v, ax.n));
  fg.regression = cross / snn;
  Mat2<Real> inplane;
  inplane << cov(ax.u, ax.u), cov(ax.u, ax.v), cov(ax.v, ax.u), cov(ax.v, ax.v);
  fg.cond_cov = inplane - cross * cross.transpose() / snn;
  fg.cond_cov(0, 1) = fg.cond_cov(1, 0) = Real(0.5) * (fg.cond_cov(0, 1) + fg.cond_cov(1, 0));

  const Real det = fg.cond_cov.determinant();
  if (!(det > Real(0)) || !(fg.cond_cov(0, 0) > Real(0)))
    throw NumericError("degenerate covariance: conditional in-plane block is not positive definite");
  fg.cond_precision << fg.cond_cov(1, 1) / det, -fg.cond_cov(0, 1) / det, -fg.cond_cov(1, 0) / det,
      fg.cond_cov(0, 0) / det;
  return fg;
}

/// Squared normalized distance of depth t from the marginal mean.
template <class Real> Real marginal_quadratic(const FactorizedGaussian<Real>& fg, Real t) {
  const Real d = t - fg.marginal_mean;
  return d * d / fg.marginal_var;
}

template <class Real> Real marginal_response(const FactorizedGaussian<Real>& fg, Real t) {
  return std::exp(Real(-0.5) * marginal_quadratic(fg, t));
}

/// True when the slice at depth t lies within k_sigma marginal standard
/// deviations of the Gaussian (boundary inclusive). An infinite k_sigma keeps
/// everything.
template <class Real> bool slice_cull(const FactorizedGaussian<Real>& fg, Real t, double k_sigma = kDefaultSigmaCutoff) {
  if (std::isinf(k_sigma)) return true;
  return std::abs(t - fg.marginal_mean) <= static_cast<Real>(k_sigma) * std::sqrt(fg.marginal_var);
}

template <class Real> Real conditional_quadratic(const FactorizedGaussian<Real>& fg, Real u, Real v, Real t) {
  const Vec2<Real> d = Vec2<Real>(u, v) - fg.cond_mean_at(t);
  return d.dot(fg.cond_precision * d);
}

template <class Real> Real conditional_response(const FactorizedGaussian<Real>& fg, Real u, Real v, Real t) {
  return std::exp(Real(-0.5) * conditional_quadratic(fg, u, v, t));
}

}  // namespace slicegs
