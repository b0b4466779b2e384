#pragma once

// Slice rasterizer. For a plane at depth t along one axis, every Gaussian that
// survives the marginal cull is composited front to back, nearest marginal
// mean first:
//
//   I(u,v,t) = sum_i p_i a_i c_i prod_{j<i} (1 - p_j a_j)
//   S(u,v,t) = sum_i p_i a_i s_i prod_{j<i} (1 - p_j a_j)
//
// with p_i = G_i(t) G_i(u,v|t). Appearance (a, c, s) is taken after tri-plane
// modulation and activation. The image is split into square tiles; each
// Gaussian is binned into the tiles its k-sigma conditional ellipse touches.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <span>
#include <vector>

#include "slicegs/core.hpp"
#include "slicegs/factorization.hpp"
#include "slicegs/parallel.hpp"
#include "slicegs/scene.hpp"
#include "slicegs/triplane.hpp"

namespace slicegs {

inline constexpr double kMaxAlpha = 1.0 - 1e-6;
/// Compositing stops once transmittance falls below this.
inline constexpr double kTransmittanceStop = 1e-9;

struct SlicePlaneSpec {
  Axis axis = Axis::z;
  double depth = 0.5;
  int width = 64;
  int height = 64;
  double k_sigma = kDefaultSigmaCutoff;  // +inf disables culling

  void validate() const {
    if (width < 1 || height < 1) throw ValidationError("slice width and height must be >= 1");
    if (!(depth >= 0.0 && depth <= 1.0)) throw ValidationError("slice depth must lie in [0, 1]");
    if (!(k_sigma > 0.0)) throw ValidationError("k_sigma must be positive");
  }
};

struct RenderOptions {
  int tile_size = 16;
  int threads = 1;
  bool deterministic = true;
  bool tiled = true;

  void validate() const {
    if (tiled && tile_size < 8) throw ValidationError("tile size must be >= 8 pixels");
  }
};

/// A Gaussian that survived the marginal cull, with everything the per-pixel
/// loops need.
template <class Real> struct PreparedGaussian {
  std::size_t index = 0;
  FactorizedGaussian<Real> fg;
  Vec2<Real> cond_mean = Vec2<Real>::Zero();  // conditional mean at this slice's depth
  Real marginal = 1;                          // G(t)
  Real opacity = 0;
  Vec3<Real> color = Vec3<Real>::Zero();
  Mat3<Real> precision = Mat3<Real>::Identity();
  Real distance = 0;  // |marginal mean - t|, the compositing key
};

/// Everything the backward pass needs from a forward render.
template <class Real> struct RenderCache {
  SlicePlaneSpec spec;
  RenderOptions options;
  std::uint64_t fingerprint = 0;
  int semantic_dim = 0;
  int feature_dim = 0;
  int hidden_dim = 0;
  std::vector<PreparedGaussian<Real>> prepared;  // compositing order
  std::vector<Real> semantic;                    // prepared.size() x K, activated
  std::vector<Real> features;                    // prepared.size() x feature_dim
  std::vector<Real> hidden_pre;                  // prepared.size() x hidden_dim
  int tiles_x = 1, tiles_y = 1, tile_w = 1, tile_h = 1;
  std::vector<std::vector<std::uint32_t>> tiles;  // indices into prepared, in compositing order

  std::span<const Real> semantic_of(std::size_t i) const {
    return {semantic.data() + i * semantic_dim, static_cast<std::size_t>(semantic_dim)};
  }
};

template <class Real> struct RenderedSlice {
  int width = 0, height = 0, semantic_dim = 0;
  std::vector<Real> intensity;                  // H x W x 3
  std::vector<Real> semantic;                   // H x W x K
  std::vector<double> final_transmittance;      // H x W
  std::vector<double> weight_sum;               // H x W, sum of compositing weights
  std::vector<std::uint32_t> contributor_end;   // H x W, one past the last processed tile-list entry
  std::shared_ptr<const RenderCache<Real>> cache;

  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
};

/// Normalized in-plane coordinates of pixel centers.
inline double pixel_u(int col, int width) { return (col + 0.5) / width; }
inline double pixel_v(int row, int height) { return (row + 0.5) / height; }

template <class Real> Vec3<Real> slice_point(Axis axis, Real u, Real v, Real t) {
  const PlaneAxes ax = plane_axes(axis);
  Vec3<Real> x;
  x[ax.u] = u;
  x[ax.v] = v;
  x[ax.n] = t;
  return x;
}

namespace detail {

template <class Real> bool compositing_before(const PreparedGaussian<Real>& a, const PreparedGaussian<Real>& b) {
  if (a.distance != b.distance) return a.distance < b.distance;
  return a.index < b.index;
}

template <class Real> Real cutoff_squared(double k_sigma) {
  return std::isinf(k_sigma) ? std::numeric_limits<Real>::infinity() : static_cast<Real>(k_sigma * k_sigma);
}

}  // namespace detail

/// Culls, activates and orders the Gaussians for one slice.
template <class Real>
std::shared_ptr<RenderCache<Real>> prepare_slice(const Scene<Real>& scene, const SlicePlaneSpec& spec,
                                                 const RenderOptions& options) {
  scene.validate();
  spec.validate();
  options.validate();
  auto cache = std::make_shared<RenderCache<Real>>();
  cache->spec = spec;
  cache->options = options;
  cache->fingerprint = scene_fingerprint(scene);
  const int k = scene.semantic_dim();
  cache->semantic_dim = k;
  cache->feature_dim = scene.decoder.input;
  cache->hidden_dim = scene.decoder.hidden;

  const auto& gs = scene.gaussians;
  const Real t = static_cast<Real>(spec.depth);
  std::vector<Real> residual(scene.decoder.output);
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const Vec3<Real> mean = gs.position(i);
    const Covariance3<Real> cov = build_covariance(gs.log_scale(i), gs.rotation(i));
    PreparedGaussian<Real> g;
    g.fg = factorize(mean, cov, spec.axis, i);
    if (!slice_cull(g.fg, t, spec.k_sigma)) continue;
    g.index = i;
    g.cond_mean = g.fg.cond_mean_at(t);
    g.marginal = marginal_response(g.fg, t);
    g.precision = cov.inverse();
    g.distance = std::abs(g.fg.marginal_mean - t);

    const std::size_t fo = cache->features.size(), ho = cache->hidden_pre.size();
    cache->features.resize(fo + cache->feature_dim);
    cache->hidden_pre.resize(ho + cache->hidden_dim);
    std::span<Real> feature(cache->features.data() + fo, cache->feature_dim);
    fuse(mean, scene.field, scene.fuse_mode, feature);
    decode<Real>(feature, scene.decoder, residual, std::span<Real>(cache->hidden_pre.data() + ho, cache->hidden_dim));

    g.opacity = sigmoid(gs.raw_opacity(i) + residual[kColorChannels + k]);
    for (int c = 0; c < kColorChannels; ++c) g.color[c] = sigmoid(gs.base_color(i)[c] + residual[c]);
    const auto sem = gs.base_semantic(i);
    for (int s = 0; s < k; ++s) cache->semantic.push_back(sigmoid(sem[s] + residual[kColorChannels + s]));
    cache->prepared.push_back(g);
  }

  // Sort through a permutation so the side arrays follow.
  const std::size_t n = cache->prepared.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detail::compositing_before(cache->prepared[a], cache->prepared[b]);
  });
  auto permute = [&](auto& v, std::size_t width) {
    auto src = v;
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(src.begin() + order[j] * width, width, v.begin() + j * width);
  };
  permute(cache->prepared, 1);
  permute(cache->semantic, static_cast<std::size_t>(k));
  permute(cache->features, static_cast<std::size_t>(cache->feature_dim));
  permute(cache->hidden_pre, static_cast<std::size_t>(cache->hidden_dim));
  return cache;
}

/// Bins prepared Gaussians into tiles. Lists keep compositing order. Without
/// tiling there is one tile covering the image and holding every Gaussian.
template <class Real> void tile_partition(RenderCache<Real>& cache) {
  const auto& spec = cache.spec;
  const int w = spec.width, h = spec.height;
  cache.tiles.clear();
  if (!cache.options.tiled) {
    cache.tiles_x = cache.tiles_y = 1;
    cache.tile_w = w;
    cache.tile_h = h;
    cache.tiles.resize(1);
    cache.tiles[0].resize(cache.prepared.size());
    std::iota(cache.tiles[0].begin(), cache.tiles[0].end(), std::uint32_t{0});
    return;
  }
  const int ts = cache.options.tile_size;
  cache.tile_w = cache.tile_h = ts;
  cache.tiles_x = (w + ts - 1) / ts;
  cache.tiles_y = (h + ts - 1) / ts;
  cache.tiles.assign(static_cast<std::size_t>(cache.tiles_x) * cache.tiles_y, {});
  const bool unbounded = std::isinf(spec.k_sigma);

  for (std::uint32_t gi = 0; gi < cache.prepared.size(); ++gi) {
    const auto& g = cache.prepared[gi];
    int c0 = 0, c1 = w - 1, r0 = 0, r1 = h - 1;
    if (!unbounded) {
      // Exact bounding box of the k-sigma ellipse, widened by one pixel so
      // rounding never drops a pixel the per-pixel test would keep.
      const double hu = spec.k_sigma * std::sqrt(static_cast<double>(g.fg.cond_cov(0, 0)));
      const double hv = spec.k_sigma * std::sqrt(static_cast<double>(g.fg.cond_cov(1, 1)));
      const double cu = g.cond_mean[0], cv = g.cond_mean[1];
      const double lo_u = std::ceil((cu - hu) * w - 0.5) - 1, hi_u = std::floor((cu + hu) * w - 0.5) + 1;
      const double lo_v = std::ceil((cv - hv) * h - 0.5) - 1, hi_v = std::floor((cv + hv) * h - 0.5) + 1;
      if (hi_u < 0 || hi_v < 0 || lo_u > w - 1 || lo_v > h - 1) continue;
      c0 = static_cast<int>(std::max(lo_u, 0.0));
      c1 = static_cast<int>(std::min(hi_u, double(w - 1)));
      r0 = static_cast<int>(std::max(lo_v, 0.0));
      r1 = static_cast<int>(std::min(hi_v, double(h - 1)));
    }
    for (int ty = r0 / ts; ty <= r1 / ts; ++ty)
      for (int tx = c0 / ts; tx <= c1 / ts; ++tx) cache.tiles[static_cast<std::size_t>(ty) * cache.tiles_x + tx].push_back(gi);
  }
}

/// One compositing step as seen by a pixel visitor.
template <class Real> struct CompositeStep {
  std::uint32_t list_position;
  std::uint32_t prepared_index;
  Real response;      // p
  Real alpha;         // clamped p * opacity
  double transmittance;  // before this step
};

/// Walks one pixel's compositing sequence. Returns (final transmittance,
/// weight sum, end position). `visit` sees every contributing step.
template <class Real, class Visit>
void composite_pixel(const RenderCache<Real>& cache, const std::vector<std::uint32_t>& list, int col, int row,
                     double& out_transmittance, double& out_weight_sum, std::uint32_t& out_end, Visit&& visit) {
  const auto& spec = cache.spec;
  const Real u = static_cast<Real>(pixel_u(col, spec.width));
  const Real v = static_cast<Real>(pixel_v(row, spec.height));
  const Real cutoff = detail::cutoff_squared<Real>(spec.k_sigma);
  double trans = 1.0, wsum = 0.0;
  std::uint32_t end = 0;
  for (std::uint32_t pos = 0; pos < list.size(); ++pos) {
    const auto& g = cache.prepared[list[pos]];
    const Vec2<Real> d(u - g.cond_mean[0], v - g.cond_mean[1]);
    const Real qc = d.dot(g.fg.cond_precision * d);
    if (!(qc <= cutoff)) continue;
    const Real p = g.marginal * std::exp(Real(-0.5) * qc);
    const Real a = std::min(p * g.opacity, static_cast<Real>(kMaxAlpha));
    visit(CompositeStep<Real>{pos, list[pos], p, a, trans});
    const double w = static_cast<double>(a) * trans;
    wsum += w;
    trans *= 1.0 - static_cast<double>(a);
    end = pos + 1;
    if (trans < kTransmittanceStop) break;
  }
  out_transmittance = trans;
  out_weight_sum = wsum;
  out_end = end;
}

template <class Real> std::size_t tile_of_pixel(const RenderCache<Real>& cache, int col, int row) {
  if (!cache.options.tiled) return 0;
  return static_cast<std::size_t>(row / cache.tile_h) * cache.tiles_x + col / cache.tile_w;
}

template <class Real>
RenderedSlice<Real> render_slice(const Scene<Real>& scene, const SlicePlaneSpec& spec,
                                 const RenderOptions& options = {}) {
  auto cache = prepare_slice(scene, spec, options);
  tile_partition(*cache);
  const int k = cache->semantic_dim;

  RenderedSlice<Real> out;
  out.width = spec.width;
  out.height = spec.height;
  out.semantic_dim = k;
  const std::size_t npix = out.pixels();
  out.intensity.assign(npix * kColorChannels, Real(0));
  out.semantic.assign(npix * k, Real(0));
  out.final_transmittance.assign(npix, 1.0);
  out.weight_sum.assign(npix, 0.0);
  out.contributor_end.assign(npix, 0);

  const auto& c = *cache;
  parallel_for(c.tiles.size(), options.threads, [&](std::size_t tile, std::size_t) {
    const int tx = static_cast<int>(tile % c.tiles_x), ty = static_cast<int>(tile / c.tiles_x);
    const int col_end = std::min(spec.width, (tx + 1) * c.tile_w);
    const int row_end = std::min(spec.height, (ty + 1) * c.tile_h);
    const auto& list = c.tiles[tile];
    std::vector<double> color(kColorChannels), sem(k);
    for (int row = ty * c.tile_h; row < row_end; ++row) {
      for (int col = tx * c.tile_w; col < col_end; ++col) {
        std::fill(color.begin(), color.end(), 0.0);
        std::fill(sem.begin(), sem.end(), 0.0);
        const std::size_t pix = static_cast<std::size_t>(row) * spec.width + col;
        composite_pixel(c, list, col, row, out.final_transmittance[pix], out.weight_sum[pix],
                        out.contributor_end[pix], [&](const CompositeStep<Real>& s) {
                          const double w = static_cast<double>(s.alpha) * s.transmittance;
                          const auto& g = c.prepared[s.prepared_index];
                          for (int ch = 0; ch < kColorChannels; ++ch) color[ch] += w * g.color[ch];
                          const auto gs = c.semantic_of(s.prepared_index);
                          for (int ch = 0; ch < k; ++ch) sem[ch] += w * gs[ch];
                        });
        for (int ch = 0; ch < kColorChannels; ++ch) out.intensity[pix * kColorChannels + ch] = static_cast<Real>(color[ch]);
        for (int ch = 0; ch < k; ++ch) out.semantic[pix * k + ch] = static_cast<Real>(sem[ch]);
      }
    }
  });
  out.cache = std::move(cache);
  return out;
}

/// Per-pixel compositing trace for tests and diagnostics.
template <class Real>
std::vector<CompositeStep<Real>> trace_pixel(const RenderedSlice<Real>& rendered, int col, int row) {
  const auto& c = *rendered.cache;
  std::vector<CompositeStep<Real>> steps;
  double t, w;
  std::uint32_t end;
  composite_pixel(c, c.tiles[tile_of_pixel(c, col, row)], col, row, t, w, end,
                  [&](const CompositeStep<Real>& s) { steps.push_back(s); });
  return steps;
}

/// Reference renderer: joint 3D response of every Gaussian at every pixel, no
/// culling, tiling or factorization, activation through the plain
/// activate()/modulate() path. Same ordering rule. Meant for small scenes.
template <class Real> RenderedSlice<Real> render_slice_bruteforce(const Scene<Real>& scene, const SlicePlaneSpec& spec) {
  scene.validate();
  spec.validate();
  const int k = scene.semantic_dim();
  const auto& gs = scene.gaussians;
  const Real t = static_cast<Real>(spec.depth);
  const int n_axis = plane_axes(spec.axis).n;

  std::vector<ActivatedGaussian<Real>> act;
  act.reserve(gs.size());
  std::vector<Real> feature(scene.decoder.input);
  for (std::size_t i = 0; i < gs.size(); ++i) {
    fuse(gs.position(i), scene.field, scene.fuse_mode, std::span<Real>(feature));
    const auto residual = decode<Real>(feature, scene.decoder);
    act.push_back(activate(modulate(gs.get(i), std::span<const Real>(residual))));
  }
  std::vector<std::size_t> order(gs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Real da = std::abs(act[a].mean[n_axis] - t), db = std::abs(act[b].mean[n_axis] - t);
    if (da != db) return da < db;
    return a < b;
  });

  RenderedSlice<Real> out;
  out.width = spec.width;
  out.height = spec.height;
  out.semantic_dim = k;
  const std::size_t npix = out.pixels();
  out.intensity.assign(npix * kColorChannels, Real(0));
  out.semantic.assign(npix * k, Real(0));
  out.final_transmittance.assign(npix, 1.0);
  out.weight_sum.assign(npix, 0.0);
  out.contributor_end.assign(npix, 0);
  for (int row = 0; row < spec.height; ++row) {
    for (int col = 0; col < spec.width; ++col) {
      const Vec3<Real> x = slice_point<Real>(spec.axis, static_cast<Real>(pixel_u(col, spec.width)),
                                             static_cast<Real>(pixel_v(row, spec.height)), t);
      const std::size_t pix = static_cast<std::size_t>(row) * spec.width + col;
      double trans = 1.0, wsum = 0.0;
      std::vector<double> color(kColorChannels, 0.0), sem(k, 0.0);
      for (std::size_t i : order) {
        const auto& g = act[i];
        const Real p = evaluate_response(g.mean, g.cov, x);
        const double a = std::min(static_cast<double>(p * g.opacity), kMaxAlpha);
        const double w = a * trans;
        for (int ch = 0; ch < kColorChannels; ++ch) color[ch] += w * g.color[ch];
        for (int ch = 0; ch < k; ++ch) sem[ch] += w * g.semantic[ch];
        wsum += w;
        trans *= 1.0 - a;
      }
      for (int ch = 0; ch < kColorChannels; ++ch) out.intensity[pix * kColorChannels + ch] = static_cast<Real>(color[ch]);
      for (int ch = 0; ch < k; ++ch) out.semantic[pix * k + ch] = static_cast<Real>(sem[ch]);
      out.final_transmittance[pix] = trans;
      out.weight_sum[pix] = wsum;
    }
  }
  return out;
}

namespace detail {

/// Per-Gaussian backward accumulator layout: alpha, color[3], A (6, upper
/// triangle of sum gq d d^T), b[3] (sum gq d), semantic[K].
inline constexpr int kAccAlpha = 0;
inline constexpr int kAccColor = 1;
inline constexpr int kAccQuad = 4;
inline constexpr int kAccLin = 10;
inline constexpr int kAccSemantic = 13;

template <class Real>
void backward_tile(const RenderCache<Real>& c, const RenderedSlice<Real>& rendered, std::size_t tile,
                   std::span<const Real> up_intensity, std::span<const Real> up_semantic, bool per_position,
                   std::vector<double>& acc) {
  const int k = c.semantic_dim;
  const int stride = kAccSemantic + k;
  const auto& spec = c.spec;
  const int tx = static_cast<int>(tile % c.tiles_x), ty = static_cast<int>(tile / c.tiles_x);
  const int col_end = std::min(spec.width, (tx + 1) * c.tile_w);
  const int row_end = std::min(spec.height, (ty + 1) * c.tile_h);
  const auto& list = c.tiles[tile];
  const Real cutoff = cutoff_squared<Real>(spec.k_sigma);
  const Real t = static_cast<Real>(spec.depth);
  const PlaneAxes ax = plane_axes(spec.axis);
  std::vector<double> suffix_c(kColorChannels), suffix_s(k);

  for (int row = ty * c.tile_h; row < row_end; ++row) {
    for (int col = tx * c.tile_w; col < col_end; ++col) {
      const std::size_t pix = static_cast<std::size_t>(row) * spec.width + col;
      const std::uint32_t end = rendered.contributor_end[pix];
      if (end == 0) continue;
      const Real* dc = up_intensity.data() + pix * kColorChannels;
      const Real* ds = up_semantic.data() + pix * k;
      bool any = false;
      for (int ch = 0; ch < kColorChannels; ++ch) any |= dc[ch] != Real(0);
      for (int ch = 0; ch < k; ++ch) any |= ds[ch] != Real(0);
      if (!any) continue;

      const Real u = static_cast<Real>(pixel_u(col, spec.width));
      const Real v = static_cast<Real>(pixel_v(row, spec.height));
      std::fill(suffix_c.begin(), suffix_c.end(), 0.0);
      std::fill(suffix_s.begin(), suffix_s.end(), 0.0);
      double trans = rendered.final_transmittance[pix];  // transmittance after the current step

      for (std::uint32_t pos = end; pos-- > 0;) {
        const std::uint32_t gi = list[pos];
        const auto& g = c.prepared[gi];
        const Vec2<Real> d2(u - g.cond_mean[0], v - g.cond_mean[1]);
        const Real qc = d2.dot(g.fg.cond_precision * d2);
        if (!(qc <= cutoff)) continue;
        const Real p = g.marginal * std::exp(Real(-0.5) * qc);
        const Real raw_a = p * g.opacity;
        const bool clamped = raw_a > static_cast<Real>(kMaxAlpha);
        const double a = clamped ? kMaxAlpha : static_cast<double>(raw_a);
        const double t_before = trans / (1.0 - a);
        const double w = a * t_before;

        double* slot = acc.data() + (per_position ? pos : gi) * stride;
        const auto sem = c.semantic_of(gi);
        double d_alpha_pix = 0.0;
        for (int ch = 0; ch < kColorChannels; ++ch) {
          slot[kAccColor + ch] += w * dc[ch];
          d_alpha_pix += dc[ch] * (g.color[ch] - suffix_c[ch]);
          suffix_c[ch] = a * g.color[ch] + (1.0 - a) * suffix_c[ch];
        }
        for (int ch = 0; ch < k; ++ch) {
          slot[kAccSemantic + ch] += w * ds[ch];
          d_alpha_pix += ds[ch] * (sem[ch] - suffix_s[ch]);
          suffix_s[ch] = a * sem[ch] + (1.0 - a) * suffix_s[ch];
        }
        d_alpha_pix *= t_before;
        trans = t_before;
        if (clamped) continue;

        slot[kAccAlpha] += d_alpha_pix * p;
        // p = exp(-q / 2), q = d^T P d over the joint quadratic form
        const double gq = -0.5 * static_cast<double>(p) * d_alpha_pix * static_cast<double>(g.opacity);
        double dx[3];
        dx[ax.u] = static_cast<double>(u) - g.fg.inplane_mean[0];
        dx[ax.v] = static_cast<double>(v) - g.fg.inplane_mean[1];
        dx[ax.n] = static_cast<double>(t) - g.fg.marginal_mean;
        slot[kAccQuad + 0] += gq * dx[0] * dx[0];
        slot[kAccQuad + 1] += gq * dx[0] * dx[1];
        slot[kAccQuad + 2] += gq * dx[0] * dx[2];
        slot[kAccQuad + 3] += gq * dx[1] * dx[1];
        slot[kAccQuad + 4] += gq * dx[1] * dx[2];
        slot[kAccQuad + 5] += gq * dx[2] * dx[2];
        for (int e = 0; e < 3; ++e) slot[kAccLin + e] += gq * dx[e];
      }
    }
  }
}

}  // namespace detail

/// Reverse mode of render_slice. `up_intensity` / `up_semantic` hold dL/d of
/// every rendered channel. Gradients are added into `grads`, which must be
/// co-shaped with `scene`.
template <class Real>
void backward_slice(const Scene<Real>& scene, const RenderedSlice<Real>& rendered, std::span<const Real> up_intensity,
                    std::span<const Real> up_semantic, GradientBuffer<Real>& grads) {
  if (!rendered.cache) throw ContractError("rendered slice carries no forward cache");
  const auto& c = *rendered.cache;
  if (scene_fingerprint(scene) != c.fingerprint)
    throw ContractError("stale render cache: scene was modified after the forward pass");
  const int k = c.semantic_dim;
  if (up_intensity.size() != rendered.intensity.size() || up_semantic.size() != rendered.semantic.size())
    throw ValidationError("upstream gradient shape does not match the rendered slice");
  if (grads.gaussians.size() != scene.gaussians.size() || grads.gaussians.semantic_dim() != k)
    throw ValidationError("gradient buffer is not co-shaped with the scene");

  const int stride = detail::kAccSemantic + k;
  const std::size_t n = c.prepared.size();
  std::vector<double> total(n * stride, 0.0);

  if (c.options.deterministic) {
    // Tile-local buffers reduced in tile order: independent of thread count.
    std::vector<std::vector<double>> per_tile(c.tiles.size());
    parallel_for(c.tiles.size(), c.options.threads, [&](std::size_t tile, std::size_t) {
      per_tile[tile].assign(c.tiles[tile].size() * stride, 0.0);
      detail::backward_tile(c, rendered, tile, up_intensity, up_semantic, true, per_tile[tile]);
    });
    for (std::size_t tile = 0; tile < c.tiles.size(); ++tile) {
      const auto& list = c.tiles[tile];
      for (std::size_t pos = 0; pos < list.size(); ++pos)
        for (int e = 0; e < stride; ++e) total[list[pos] * stride + e] += per_tile[tile][pos * stride + e];
    }
  } else {
    const std::size_t workers = parallel_workers(c.tiles.size(), c.options.threads);
    std::vector<std::vector<double>> per_worker(workers, std::vector<double>(n * stride, 0.0));
    parallel_for(c.tiles.size(), c.options.threads, [&](std::size_t tile, std::size_t worker) {
      detail::backward_tile(c, rendered, tile, up_intensity, up_semantic, false, per_worker[worker]);
    });
    for (const auto& buf : per_worker)
      for (std::size_t e = 0; e < total.size(); ++e) total[e] += buf[e];
  }

  // Per-Gaussian chain: activations, modulation residuals, covariance, tri-plane.
  auto& gg = scene.gaussians;
  auto& gpos = grads.gaussians.data(GaussianField::position);
  auto& gscale = grads.gaussians.data(GaussianField::log_scale);
  auto& grot = grads.gaussians.data(GaussianField::rotation);
  auto& gop = grads.gaussians.data(GaussianField::opacity);
  auto& gcol = grads.gaussians.data(GaussianField::color);
  auto& gsem = grads.gaussians.data(GaussianField::semantic);
  std::vector<Real> g_res(scene.decoder.output);
  for (std::size_t j = 0; j < n; ++j) {
    const auto& g = c.prepared[j];
    const double* slot = total.data() + j * stride;
    const std::size_t i = g.index;

    const Real ga = static_cast<Real>(slot[detail::kAccAlpha] * g.opacity * (1 - g.opacity));
    gop[i] += ga;
    g_res[kColorChannels + k] = ga;
    for (int ch = 0; ch < kColorChannels; ++ch) {
      const Real gc = static_cast<Real>(slot[detail::kAccColor + ch] * g.color[ch] * (1 - g.color[ch]));
      gcol[3 * i + ch] += gc;
      g_res[ch] = gc;
    }
    const auto sem = c.semantic_of(j);
    for (int ch = 0; ch < k; ++ch) {
      const Real gs = static_cast<Real>(slot[detail::kAccSemantic + ch] * sem[ch] * (1 - sem[ch]));
      gsem[i * k + ch] += gs;
      g_res[kColorChannels + ch] = gs;
    }

    // q = d^T P d:  dL/dmu = -2 P b,  dL/dP = A,  dL/dSigma = -P A P
    Mat3<Real> a_mat;
    a_mat << Real(slot[4]), Real(slot[5]), Real(slot[6]), Real(slot[5]), Real(slot[7]), Real(slot[8]), Real(slot[6]),
        Real(slot[8]), Real(slot[9]);
    const Vec3<Real> b{Real(slot[10]), Real(slot[11]), Real(slot[12])};
    Vec3<Real> g_mu = Real(-2) * (g.precision * b);
    const Mat3<Real> g_cov = -(g.precision * a_mat * g.precision);
    Vec3<Real> g_ls;
    Vec4<Real> g_q;
    covariance_backward(gg.log_scale(i), gg.rotation(i), g_cov, g_ls, g_q);

    triplane_backward<Real>(gg.position(i), scene.field, scene.fuse_mode, scene.decoder,
                            std::span<const Real>(c.features.data() + j * c.feature_dim, c.feature_dim),
                            std::span<const Real>(c.hidden_pre.data() + j * c.hidden_dim, c.hidden_dim), g_res,
                            grads.field, grads.decoder, &g_mu);
    for (int e = 0; e < 3; ++e) {
      gpos[3 * i + e] += g_mu[e];
      gscale[3 * i + e] += g_ls[e];
    }
    for (int e = 0; e < 4; ++e) grot[4 * i + e] += g_q[e];
  }
}

}  // namespace slicegs
