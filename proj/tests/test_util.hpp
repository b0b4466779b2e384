#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "slicegs/core.hpp"
#include "slicegs/dataio.hpp"
#include "slicegs/optimizer.hpp"
#include "slicegs/scene.hpp"

namespace slicegs::testing {

/// A Aᵀ + shift·I with Gaussian A: symmetric positive definite.
inline Mat3<double> random_spd(std::mt19937_64& rng, double shift = 0.05) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat3<double> a;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a(r, c) = n(rng);
  Mat3<double> s = a * a.transpose() + shift * Mat3<double>::Identity();
  return 0.5 * (s + s.transpose());
}

/// Joint response exp(-q/2) computed with an explicit inverse, independent of
/// the library's Cholesky path.
inline double joint_response_direct(const Vec3<double>& mu, const Mat3<double>& cov, const Vec3<double>& x) {
  const Vec3<double> d = x - mu;
  return std::exp(-0.5 * d.dot(cov.inverse() * d));
}

inline RawGaussianParams<double> gaussian_at(double x, double y, double z, double sigma, double raw_opacity = 0.0) {
  RawGaussianParams<double> p;
  p.position = Vec3<double>(x, y, z);
  p.log_scale.setConstant(std::log(sigma));
  p.raw_opacity = raw_opacity;
  return p;
}

/// Scene whose decoder outputs exactly zero residuals.
inline Scene<double> plain_scene(GaussianSet<double> gs, int resolution = 4, int channels = 2, int hidden = 4) {
  Scene<double> s = make_scene<double>(std::move(gs), resolution, channels, hidden, 1);
  s.decoder.set_zero();
  return s;
}

/// Seeded scene of anisotropic, rotated Gaussians inside the unit cube, with
/// non-trivial tri-plane texels and decoder so modulation is exercised.
template <class Real = double>
Scene<Real> random_scene(std::size_t n, std::uint64_t seed, int semantic_dim = 3, int resolution = 8, int channels = 4,
                         int hidden = 8) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.15, 0.85), lsc(std::log(0.015), std::log(0.07)), raw(-2.5, 2.5);
  std::normal_distribution<double> nrm(0.0, 1.0);
  GaussianSet<Real> gs(semantic_dim);
  for (std::size_t i = 0; i < n; ++i) {
    RawGaussianParams<Real> p;
    p.position = Vec3<Real>(Real(pos(rng)), Real(pos(rng)), Real(pos(rng)));
    p.log_scale = Vec3<Real>(Real(lsc(rng)), Real(lsc(rng)), Real(lsc(rng)));
    p.rotation = Vec4<Real>(Real(nrm(rng)), Real(nrm(rng)), Real(nrm(rng)), Real(nrm(rng)));
    p.raw_opacity = Real(raw(rng));
    for (int c = 0; c < 3; ++c) p.base_color[c] = Real(raw(rng));
    p.base_semantic.assign(semantic_dim, Real(0));
    for (auto& s : p.base_semantic) s = Real(raw(rng));
    gs.push_back(p);
  }
  Scene<Real> s = make_scene<Real>(std::move(gs), resolution, channels, hidden, seed + 1);
  s.decoder.init_random(seed + 2, Real(0.3));
  std::uniform_real_distribution<double> tex(-0.5, 0.5);
  for (int pl = 0; pl < 3; ++pl)
    for (auto& v : s.field.plane(pl)) v = Real(tex(rng));
  return s;
}

/// n Gaussians drawn (seeded) from the standard initialization of a 64^3
/// phantom's z slices, so scales and opacities are the ones training starts
/// from.
inline Scene<double> phantom_scene(std::size_t n, std::uint64_t seed) {
  const Phantom ph = generate_phantom(seed, {64, 64, 64});
  SliceStack stack = extract_slices(ph.intensity, Axis::z, &ph.labels, &ph.palette);
  make_split(stack, 0.5);
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.plane_resolution = 8;
  cfg.plane_channels = 4;
  cfg.decoder_hidden = 8;
  Scene<double> full = initialize_scene<double>(stack, cfg);
  std::vector<std::size_t> idx(full.gaussians.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, idx.size()));
  std::sort(idx.begin(), idx.end());
  full.gaussians = full.gaussians.select(idx);
  return full;
}

}  // namespace slicegs::testing
