#pragma once

// Tri-plane global feature field and the decoder that turns fused features
// into residuals on Gaussian appearance parameters.
//
// Planes are R x R x C grids indexed (row, col, channel) with texel centers at
// (i + 0.5) / R. Plane 0 is sampled at (x, y), plane 1 at (y, z), plane 2 at
// (x, z); the first coordinate selects the column.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "slicegs/core.hpp"

namespace slicegs {

enum class FuseMode : std::uint8_t { concat = 0, sum = 1 };

inline constexpr std::array<std::array<int, 2>, 3> kPlaneCoordinates = {{{0, 1}, {1, 2}, {0, 2}}};

template <class Real> class TriPlaneField {
 public:
  TriPlaneField() = default;
  TriPlaneField(int resolution, int channels) : resolution_(resolution), channels_(channels) {
    if (resolution < 1 || channels < 1) throw ValidationError("tri-plane resolution and channels must be >= 1");
    for (auto& p : planes_) p.assign(plane_size(), Real(0));
  }

  int resolution() const { return resolution_; }
  int channels() const { return channels_; }
  std::size_t plane_size() const {
    return static_cast<std::size_t>(resolution_) * resolution_ * channels_;
  }
  /// Allocated texel scalars over all three planes: 3 R^2 C.
  std::size_t texel_count() const {
    std::size_t n = 0;
    for (const auto& p : planes_) n += p.size();
    return n;
  }

  std::vector<Real>& plane(int i) { return planes_[i]; }
  const std::vector<Real>& plane(int i) const { return planes_[i]; }

  Real& at(int plane_id, int row, int col, int channel) {
    return planes_[plane_id][(static_cast<std::size_t>(row) * resolution_ + col) * channels_ + channel];
  }
  Real at(int plane_id, int row, int col, int channel) const {
    return planes_[plane_id][(static_cast<std::size_t>(row) * resolution_ + col) * channels_ + channel];
  }

  void set_zero() {
    for (auto& p : planes_) std::fill(p.begin(), p.end(), Real(0));
  }
  TriPlaneField zeros_like() const { return TriPlaneField(resolution_, channels_); }

  bool all_finite() const {
    for (const auto& p : planes_)
      for (Real v : p)
        if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  int resolution_ = 1;
  int channels_ = 1;
  std::array<std::vector<Real>, 3> planes_;
};

/// Four texel taps of one bilinear lookup plus the weight derivatives with
/// respect to the two continuous query coordinates.
template <class Real> struct BilinearTaps {
  std::array<std::size_t, 4> offset{};  // texel start offsets (times C already applied)
  std::array<Real, 4> weight{};
  std::array<Real, 4> d_weight_da{};
  std::array<Real, 4> d_weight_db{};
};

namespace detail {

template <class Real> void axis_taps(Real coord, int resolution, int& i0, int& i1, Real& frac, Real& dfrac) {
  const Real r = static_cast<Real>(resolution);
  Real f = std::clamp(coord, Real(0), Real(1)) * r - Real(0.5);
  dfrac = (coord > Real(0) && coord < Real(1)) ? r : Real(0);
  if (f <= Real(0)) {
    f = 0;
    dfrac = 0;
  } else if (f >= r - 1) {
    f = r - 1;
    dfrac = 0;
  }
  if (resolution == 1) {
    i0 = i1 = 0;
    frac = 0;
    dfrac = 0;
    return;
  }
  i0 = std::min(static_cast<int>(std::floor(f)), resolution - 2);
  i1 = i0 + 1;
  frac = f - static_cast<Real>(i0);
}

}  // namespace detail

template <class Real> BilinearTaps<Real> bilinear_taps(int resolution, int channels, Real a, Real b) {
  int c0, c1, r0, r1;
  Real fa, fb, dfa, dfb;
  detail::axis_taps(a, resolution, c0, c1, fa, dfa);
  detail::axis_taps(b, resolution, r0, r1, fb, dfb);
  BilinearTaps<Real> t;
  const auto off = [&](int row, int col) {
    return (static_cast<std::size_t>(row) * resolution + col) * channels;
  };
  t.offset = {off(r0, c0), off(r0, c1), off(r1, c0), off(r1, c1)};
  t.weight = {(1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb};
  t.d_weight_da = {-(1 - fb) * dfa, (1 - fb) * dfa, -fb * dfa, fb * dfa};
  t.d_weight_db = {-(1 - fa) * dfb, -fa * dfb, (1 - fa) * dfb, fa * dfb};
  return t;
}

/// Bilinear lookup of one plane; coordinates outside [0, 1] clamp to the edge texels.
template <class Real>
void sample_plane(std::span<const Real> plane, int resolution, int channels, Real a, Real b, std::span<Real> out) {
  const auto taps = bilinear_taps<Real>(resolution, channels, a, b);
  for (int c = 0; c < channels; ++c) {
    Real v = 0;
    for (int k = 0; k < 4; ++k) v += taps.weight[k] * plane[taps.offset[k] + c];
    out[c] = v;
  }
}

inline int fused_width(FuseMode mode, int channels) { return mode == FuseMode::concat ? 3 * channels : channels; }

/// Feature of point p: per-plane samples concatenated (xy, yz, xz) or summed.
template <class Real>
void fuse(const Vec3<Real>& p, const TriPlaneField<Real>& field, FuseMode mode, std::span<Real> out) {
  const int c = field.channels();
  std::vector<Real> tmp(c);
  if (mode == FuseMode::sum) std::fill(out.begin(), out.begin() + c, Real(0));
  for (int pl = 0; pl < 3; ++pl) {
    const auto [ia, ib] = kPlaneCoordinates[pl];
    sample_plane<Real>(field.plane(pl), field.resolution(), c, p[ia], p[ib], tmp);
    for (int k = 0; k < c; ++k) {
      if (mode == FuseMode::concat)
        out[pl * c + k] = tmp[k];
      else
        out[k] += tmp[k];
    }
  }
}

/// One-hidden-layer ReLU network: input -> hidden -> (3 color, K semantic, 1 opacity) residuals.
template <class Real> struct DecoderMlp {
  int input = 0;
  int hidden = 0;
  int output = 0;
  std::vector<Real> w1, b1, w2, b2;  // w1: hidden x input, w2: output x hidden (row-major)

  DecoderMlp() = default;
  DecoderMlp(int input_dim, int hidden_dim, int semantic_dim)
      : input(input_dim), hidden(hidden_dim), output(kColorChannels + semantic_dim + 1) {
    if (input_dim < 1 || hidden_dim < 1 || semantic_dim < 1) throw ValidationError("decoder dimensions must be >= 1");
    w1.assign(static_cast<std::size_t>(hidden) * input, Real(0));
    b1.assign(hidden, Real(0));
    w2.assign(static_cast<std::size_t>(output) * hidden, Real(0));
    b2.assign(output, Real(0));
  }

  int semantic_dim() const { return output - kColorChannels - 1; }
  std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

  /// Small seeded uniform weights. The output layer is scaled down so the
  /// initial residuals are close to zero.
  void init_random(std::uint64_t seed, Real output_scale = Real(0.01)) {
    std::mt19937_64 rng(seed);
    const Real s1 = Real(1) / std::sqrt(static_cast<Real>(input));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& w : w1) w = s1 * static_cast<Real>(u(rng));
    for (auto& b : b1) b = s1 * static_cast<Real>(u(rng));
    for (auto& w : w2) w = output_scale * static_cast<Real>(u(rng));
    std::fill(b2.begin(), b2.end(), Real(0));
  }

  void set_zero() {
    for (auto* v : {&w1, &b1, &w2, &b2}) std::fill(v->begin(), v->end(), Real(0));
  }
  DecoderMlp zeros_like() const {
    DecoderMlp z = *this;
    z.set_zero();
    return z;
  }

  std::array<std::vector<Real>*, 4> tensors() { return {&w1, &b1, &w2, &b2}; }
  std::array<const std::vector<Real>*, 4> tensors() const { return {&w1, &b1, &w2, &b2}; }

  bool all_finite() const {
    for (const auto* v : tensors())
      for (Real x : *v)
        if (!std::isfinite(x)) return false;
    return true;
  }
};

/// Runs the decoder. `hidden_pre` (length hidden) receives pre-activations for
/// the backward pass.
template <class Real>
void decode(std::span<const Real> feature, const DecoderMlp<Real>& mlp, std::span<Real> residuals,
            std::span<Real> hidden_pre) {
  if (static_cast<int>(feature.size()) != mlp.input || static_cast<int>(residuals.size()) != mlp.output ||
      static_cast<int>(hidden_pre.size()) != mlp.hidden)
    throw ValidationError("decoder shape mismatch");
  for (int h = 0; h < mlp.hidden; ++h) {
    Real acc = mlp.b1[h];
    const Real* row = mlp.w1.data() + static_cast<std::size_t>(h) * mlp.input;
    for (int i = 0; i < mlp.input; ++i) acc += row[i] * feature[i];
    hidden_pre[h] = acc;
  }
  for (int o = 0; o < mlp.output; ++o) {
    Real acc = mlp.b2[o];
    const Real* row = mlp.w2.data() + static_cast<std::size_t>(o) * mlp.hidden;
    for (int h = 0; h < mlp.hidden; ++h) acc += row[h] * std::max(hidden_pre[h], Real(0));
    residuals[o] = acc;
  }
}

template <class Real> std::vector<Real> decode(std::span<const Real> feature, const DecoderMlp<Real>& mlp) {
  std::vector<Real> out(mlp.output), pre(mlp.hidden);
  decode<Real>(feature, mlp, out, pre);
  return out;
}

/// Adds decoder residuals in raw (pre-activation) space. Geometry is untouched.
template <class Real>
RawGaussianParams<Real> modulate(RawGaussianParams<Real> raw, std::span<const Real> residuals) {
  const int k = static_cast<int>(raw.base_semantic.size());
  if (static_cast<int>(residuals.size()) != kColorChannels + k + 1) throw ValidationError("residual width mismatch");
  for (int c = 0; c < kColorChannels; ++c) raw.base_color[c] += residuals[c];
  for (int s = 0; s < k; ++s) raw.base_semantic[s] += residuals[kColorChannels + s];
  raw.raw_opacity += residuals[kColorChannels + k];
  return raw;
}

/// Reverse mode of fuse + decode at one query point. Gradients accumulate
/// into `grad_field` / `grad_mlp`; `grad_point`, if non-null, receives
/// dL/dp through the bilinear weights.
template <class Real>
void triplane_backward(const Vec3<Real>& p, const TriPlaneField<Real>& field, FuseMode mode,
                       const DecoderMlp<Real>& mlp, std::span<const Real> feature,
                       std::span<const Real> hidden_pre, std::span<const Real> grad_residuals,
                       TriPlaneField<Real>& grad_field, DecoderMlp<Real>& grad_mlp, Vec3<Real>* grad_point) {
  std::vector<Real> g_hidden(mlp.hidden, Real(0));
  for (int o = 0; o < mlp.output; ++o) {
    const Real g = grad_residuals[o];
    if (g == Real(0)) continue;
    grad_mlp.b2[o] += g;
    Real* grow = grad_mlp.w2.data() + static_cast<std::size_t>(o) * mlp.hidden;
    const Real* row = mlp.w2.data() + static_cast<std::size_t>(o) * mlp.hidden;
    for (int h = 0; h < mlp.hidden; ++h) {
      grow[h] += g * std::max(hidden_pre[h], Real(0));
      g_hidden[h] += g * row[h];
    }
  }
  std::vector<Real> g_feature(mlp.input, Real(0));
  for (int h = 0; h < mlp.hidden; ++h) {
    if (!(hidden_pre[h] > Real(0))) continue;
    const Real g = g_hidden[h];
    grad_mlp.b1[h] += g;
    Real* grow = grad_mlp.w1.data() + static_cast<std::size_t>(h) * mlp.input;
    const Real* row = mlp.w1.data() + static_cast<std::size_t>(h) * mlp.input;
    for (int i = 0; i < mlp.input; ++i) {
      grow[i] += g * feature[i];
      g_feature[i] += g * row[i];
    }
  }

  const int c = field.channels();
  for (int pl = 0; pl < 3; ++pl) {
    const auto [ia, ib] = kPlaneCoordinates[pl];
    const auto taps = bilinear_taps<Real>(field.resolution(), c, p[ia], p[ib]);
    const Real* gf = g_feature.data() + (mode == FuseMode::concat ? pl * c : 0);
    auto& gplane = grad_field.plane(pl);
    const auto& plane = field.plane(pl);
    Real ga = 0, gb = 0;
    for (int k = 0; k < 4; ++k) {
      for (int ch = 0; ch < c; ++ch) {
        gplane[taps.offset[k] + ch] += taps.weight[k] * gf[ch];
        if (grad_point) {
          const Real v = plane[taps.offset[k] + ch] * gf[ch];
          ga += taps.d_weight_da[k] * v;
          gb += taps.d_weight_db[k] * v;
        }
      }
    }
    if (grad_point) {
      (*grad_point)[ia] += ga;
      (*grad_point)[ib] += gb;
    }
  }
}

}  // namespace slicegs
