#pragma once

// Gaussian scene representation: raw (unconstrained) parameters, activations
// and covariance construction.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "slicegs/errors.hpp"

namespace slicegs {

template <class Real> using Vec2 = Eigen::Matrix<Real, 2, 1>;
template <class Real> using Vec3 = Eigen::Matrix<Real, 3, 1>;
template <class Real> using Vec4 = Eigen::Matrix<Real, 4, 1>;
template <class Real> using Mat2 = Eigen::Matrix<Real, 2, 2>;
template <class Real> using Mat3 = Eigen::Matrix<Real, 3, 3>;

/// Symmetric positive-definite 3x3 covariance in normalized volume units squared.
template <class Real> using Covariance3 = Mat3<Real>;

inline constexpr int kColorChannels = 3;
inline constexpr int kDefaultSemanticDim = 3;

enum class Axis : std::uint8_t { x = 0, y = 1, z = 2 };

inline Axis parse_axis(std::string_view s) {
  if (s == "x") return Axis::x;
  if (s == "y") return Axis::y;
  if (s == "z") return Axis::z;
  throw ValidationError("axis must be one of x, y, z (got '" + std::string(s) + "')");
}

inline const char* axis_name(Axis a) {
  switch (a) {
    case Axis::x: return "x";
    case Axis::y: return "y";
    case Axis::z: return "z";
  }
  return "?";
}

/// World-axis indices of a slice plane. Pixel columns run along `u`, rows
/// along `v`; `n` is the slice normal.
struct PlaneAxes {
  int u, v, n;
};

inline PlaneAxes plane_axes(Axis a) {
  switch (a) {
    case Axis::x: return {1, 2, 0};
    case Axis::y: return {0, 2, 1};
    case Axis::z: return {0, 1, 2};
  }
  return {0, 1, 2};
}

template <class Real> Real sigmoid(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <class Real> Real logit(Real p) { return std::log(p / (Real(1) - p)); }

/// One Gaussian's unconstrained parameters. Rotation is a (w, x, y, z) quaternion.
template <class Real> struct RawGaussianParams {
  Vec3<Real> position = Vec3<Real>::Zero();
  Vec3<Real> log_scale = Vec3<Real>::Zero();
  Vec4<Real> rotation = Vec4<Real>(1, 0, 0, 0);
  Real raw_opacity = 0;
  Vec3<Real> base_color = Vec3<Real>::Zero();
  std::vector<Real> base_semantic = std::vector<Real>(kDefaultSemanticDim, Real(0));

  bool finite() const {
    if (!position.allFinite() || !log_scale.allFinite() || !rotation.allFinite() ||
        !std::isfinite(raw_opacity) || !base_color.allFinite())
      return false;
    for (Real s : base_semantic)
      if (!std::isfinite(s)) return false;
    return true;
  }
};

/// Parameter groups of a GaussianSet, in storage order.
enum class GaussianField : std::uint8_t { position, log_scale, rotation, opacity, color, semantic };

inline constexpr std::array<GaussianField, 6> kGaussianFields = {
    GaussianField::position, GaussianField::log_scale, GaussianField::rotation,
    GaussianField::opacity,  GaussianField::color,     GaussianField::semantic};

inline const char* field_name(GaussianField f) {
  switch (f) {
    case GaussianField::position: return "position";
    case GaussianField::log_scale: return "scale";
    case GaussianField::rotation: return "rotation";
    case GaussianField::opacity: return "opacity";
    case GaussianField::color: return "color";
    case GaussianField::semantic: return "semantic";
  }
  return "?";
}

/// Structure-of-arrays storage for N Gaussians sharing one semantic width K.
/// Also used, co-shaped, for gradients and Adam moments.
template <class Real> class GaussianSet {
 public:
  GaussianSet() = default;
  explicit GaussianSet(int semantic_dim, std::size_t count = 0) : semantic_dim_(semantic_dim) {
    if (semantic_dim < 1) throw ValidationError("semantic_dim must be >= 1");
    resize(count);
  }

  std::size_t size() const { return opacity_.size(); }
  bool empty() const { return opacity_.empty(); }
  int semantic_dim() const { return semantic_dim_; }

  int width(GaussianField f) const {
    switch (f) {
      case GaussianField::position: return 3;
      case GaussianField::log_scale: return 3;
      case GaussianField::rotation: return 4;
      case GaussianField::opacity: return 1;
      case GaussianField::color: return kColorChannels;
      case GaussianField::semantic: return semantic_dim_;
    }
    return 0;
  }

  std::vector<Real>& data(GaussianField f) { return *field_ptr(f); }
  const std::vector<Real>& data(GaussianField f) const {
    return *const_cast<GaussianSet*>(this)->field_ptr(f);
  }

  void resize(std::size_t n) {
    for (GaussianField f : kGaussianFields) data(f).resize(n * width(f), Real(0));
  }

  void set_zero() {
    for (GaussianField f : kGaussianFields) std::fill(data(f).begin(), data(f).end(), Real(0));
  }

  GaussianSet zeros_like() const { return GaussianSet(semantic_dim_, size()); }

  Vec3<Real> position(std::size_t i) const { return Vec3<Real>(&position_[3 * i]); }
  Vec3<Real> log_scale(std::size_t i) const { return Vec3<Real>(&log_scale_[3 * i]); }
  Vec4<Real> rotation(std::size_t i) const { return Vec4<Real>(&rotation_[4 * i]); }
  Real raw_opacity(std::size_t i) const { return opacity_[i]; }
  Vec3<Real> base_color(std::size_t i) const { return Vec3<Real>(&color_[3 * i]); }
  std::span<const Real> base_semantic(std::size_t i) const {
    return {semantic_.data() + i * semantic_dim_, static_cast<std::size_t>(semantic_dim_)};
  }

  RawGaussianParams<Real> get(std::size_t i) const {
    RawGaussianParams<Real> p;
    p.position = position(i);
    p.log_scale = log_scale(i);
    p.rotation = rotation(i);
    p.raw_opacity = opacity_[i];
    p.base_color = base_color(i);
    auto s = base_semantic(i);
    p.base_semantic.assign(s.begin(), s.end());
    return p;
  }

  void set(std::size_t i, const RawGaussianParams<Real>& p) {
    if (static_cast<int>(p.base_semantic.size()) != semantic_dim_)
      throw ValidationError("semantic width mismatch");
    for (int k = 0; k < 3; ++k) {
      position_[3 * i + k] = p.position[k];
      log_scale_[3 * i + k] = p.log_scale[k];
      color_[3 * i + k] = p.base_color[k];
    }
    for (int k = 0; k < 4; ++k) rotation_[4 * i + k] = p.rotation[k];
    opacity_[i] = p.raw_opacity;
    std::copy(p.base_semantic.begin(), p.base_semantic.end(), semantic_.begin() + i * semantic_dim_);
  }

  void push_back(const RawGaussianParams<Real>& p) {
    resize(size() + 1);
    set(size() - 1, p);
  }

  /// Copies the listed members, in the given order, into a new set.
  GaussianSet select(std::span<const std::size_t> indices) const {
    GaussianSet out(semantic_dim_, indices.size());
    for (GaussianField f : kGaussianFields) {
      const int w = width(f);
      const auto& src = data(f);
      auto& dst = out.data(f);
      for (std::size_t j = 0; j < indices.size(); ++j)
        std::copy_n(src.begin() + indices[j] * w, w, dst.begin() + j * w);
    }
    return out;
  }

  bool all_finite() const {
    for (GaussianField f : kGaussianFields)
      for (Real v : data(f))
        if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::vector<Real>* field_ptr(GaussianField f) {
    switch (f) {
      case GaussianField::position: return &position_;
      case GaussianField::log_scale: return &log_scale_;
      case GaussianField::rotation: return &rotation_;
      case GaussianField::opacity: return &opacity_;
      case GaussianField::color: return &color_;
      case GaussianField::semantic: return &semantic_;
    }
    return &position_;
  }

  int semantic_dim_ = kDefaultSemanticDim;
  std::vector<Real> position_, log_scale_, rotation_, opacity_, color_, semantic_;
};

/// Rotation matrix of a unit (w, x, y, z) quaternion.
template <class Real> Mat3<Real> rotation_matrix(const Vec4<Real>& q) {
  const Real w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3<Real> r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

template <class Real> Vec4<Real> normalized_quaternion(const Vec4<Real>& q) {
  const Real n = q.norm();
  if (!(n > Real(0)) || !std::isfinite(n)) throw NumericError("degenerate rotation: zero-norm quaternion");
  return q / n;
}

/// R diag(exp(log_scale))^2 R^T with R from the normalized quaternion.
template <class Real>
Covariance3<Real> build_covariance(const Vec3<Real>& log_scale, const Vec4<Real>& rotation) {
  const Mat3<Real> r = rotation_matrix(normalized_quaternion(rotation));
  const Vec3<Real> s = log_scale.array().exp().matrix();
  const Mat3<Real> m = r * s.asDiagonal();
  Mat3<Real> cov = m * m.transpose();
  // exact symmetry; the product is symmetric only up to rounding
  cov = Real(0.5) * (cov + cov.transpose()).eval();
  return cov;
}

template <class Real> bool is_spd(const Mat3<Real>& m) {
  if (!m.allFinite()) return false;
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > Real(1e-12) * std::max(Real(1), m.cwiseAbs().maxCoeff()))
    return false;
  Eigen::LLT<Mat3<Real>> llt(m);
  return llt.info() == Eigen::Success;
}

/// Unnormalized response exp(-0.5 d^T cov^-1 d) with d = x - mean.
template <class Real>
Real evaluate_response(const Vec3<Real>& mean, const Covariance3<Real>& cov, const Vec3<Real>& x) {
  Eigen::LLT<Mat3<Real>> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericError("covariance is not positive definite");
  const Vec3<Real> d = x - mean;
  const Real q = d.dot(llt.solve(d));
  return std::exp(Real(-0.5) * q);
}

template <class Real> struct ActivatedGaussian {
  Vec3<Real> mean;
  Covariance3<Real> cov;
  Real opacity;
  Vec3<Real> color;
  std::vector<Real> semantic;
};

template <class Real> ActivatedGaussian<Real> activate(const RawGaussianParams<Real>& raw) {
  if (!raw.finite()) throw ValidationError("raw Gaussian parameters must be finite");
  ActivatedGaussian<Real> g;
  g.mean = raw.position;
  g.cov = build_covariance(raw.log_scale, raw.rotation);
  g.opacity = sigmoid(raw.raw_opacity);
  for (int c = 0; c < kColorChannels; ++c) g.color[c] = sigmoid(raw.base_color[c]);
  g.semantic.resize(raw.base_semantic.size());
  for (std::size_t k = 0; k < raw.base_semantic.size(); ++k) g.semantic[k] = sigmoid(raw.base_semantic[k]);
  return g;
}

/// Reverse-mode of build_covariance: maps dL/dcov (any 3x3, symmetrized here)
/// onto dL/dlog_scale and dL/drotation (w.r.t. the unnormalized quaternion).
template <class Real>
void covariance_backward(const Vec3<Real>& log_scale, const Vec4<Real>& rotation,
                         const Mat3<Real>& grad_cov, Vec3<Real>& grad_log_scale,
                         Vec4<Real>& grad_rotation) {
  const Real qn = rotation.norm();
  const Vec4<Real> q = rotation / qn;
  const Mat3<Real> r = rotation_matrix(q);
  const Vec3<Real> s = log_scale.array().exp().matrix();
  const Mat3<Real> m = r * s.asDiagonal();
  // cov = M M^T  =>  dL/dM = (G + G^T) M
  const Mat3<Real> g_m = (grad_cov + grad_cov.transpose()) * m;
  for (int k = 0; k < 3; ++k) grad_log_scale[k] = g_m.col(k).dot(r.col(k)) * s[k];
  const Mat3<Real> g_r = g_m * s.asDiagonal();

  const Real w = q[0], x = q[1], y = q[2], z = q[3];
  Vec4<Real> gq;
  gq[0] = 2 * (-z * g_r(0, 1) + y * g_r(0, 2) + z * g_r(1, 0) - x * g_r(1, 2) - y * g_r(2, 0) + x * g_r(2, 1));
  gq[1] = 2 * (y * g_r(0, 1) + z * g_r(0, 2) + y * g_r(1, 0) - 2 * x * g_r(1, 1) - w * g_r(1, 2) +
               z * g_r(2, 0) + w * g_r(2, 1) - 2 * x * g_r(2, 2));
  gq[2] = 2 * (-2 * y * g_r(0, 0) + x * g_r(0, 1) + w * g_r(0, 2) + x * g_r(1, 0) + z * g_r(1, 2) -
               w * g_r(2, 0) + z * g_r(2, 1) - 2 * y * g_r(2, 2));
  gq[3] = 2 * (-2 * z * g_r(0, 0) - w * g_r(0, 1) + x * g_r(0, 2) + w * g_r(1, 0) - 2 * z * g_r(1, 1) +
               y * g_r(1, 2) + x * g_r(2, 0) + y * g_r(2, 1));
  grad_rotation = (gq - q * q.dot(gq)) / qn;
}

}  // namespace slicegs
