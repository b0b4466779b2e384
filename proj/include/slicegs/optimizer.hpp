#pragma once

// Training: slice losses, Adam over every parameter group, opacity pruning,
// gradient-driven densification, scene initialization from training slices,
// held-out evaluation and the finite-difference gradient check.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "slicegs/core.hpp"
#include "slicegs/dataio.hpp"
#include "slicegs/metrics.hpp"
#include "slicegs/rasterizer.hpp"
#include "slicegs/scene.hpp"

namespace slicegs {

/// Parameter groups addressed by learning rates and the gradient check.
enum class ParamGroup : std::uint8_t { position, scale, rotation, opacity, color, semantic, texels, decoder };

inline constexpr std::array<ParamGroup, 8> kParamGroups = {
    ParamGroup::position, ParamGroup::scale,    ParamGroup::rotation, ParamGroup::opacity,
    ParamGroup::color,    ParamGroup::semantic, ParamGroup::texels,   ParamGroup::decoder};

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::position: return "position";
    case ParamGroup::scale: return "scale";
    case ParamGroup::rotation: return "rotation";
    case ParamGroup::opacity: return "opacity";
    case ParamGroup::color: return "color";
    case ParamGroup::semantic: return "semantic";
    case ParamGroup::texels: return "texels";
    case ParamGroup::decoder: return "decoder";
  }
  return "?";
}

inline GaussianField gaussian_field_of(ParamGroup g) {
  switch (g) {
    case ParamGroup::position: return GaussianField::position;
    case ParamGroup::scale: return GaussianField::log_scale;
    case ParamGroup::rotation: return GaussianField::rotation;
    case ParamGroup::opacity: return GaussianField::opacity;
    case ParamGroup::color: return GaussianField::color;
    case ParamGroup::semantic: return GaussianField::semantic;
    default: break;
  }
  throw ValidationError("parameter group has no Gaussian field");
}

struct TrainConfig {
  int iterations = 2000;
  std::array<double, 8> learning_rate = {2e-3, 5e-3, 1e-3, 5e-2, 2.5e-2, 2.5e-2, 1e-2, 1e-3};
  double ssim_weight = 0.2;      // lambda
  double semantic_weight = 1.0;  // beta
  int prune_interval = 500;
  double prune_alpha_threshold = 0.005;
  int densify_interval = 500;
  double densify_grad_threshold = 1.5e-3;
  int max_gaussians = 50000;
  int min_gaussians = 16;
  std::uint64_t seed = 0;

  int init_gaussians = 20000;
  double init_intensity_threshold = 0.05;
  double init_opacity = 0.1;
  int plane_resolution = 32;
  int plane_channels = 8;
  int decoder_hidden = 64;
  FuseMode fuse_mode = FuseMode::concat;
  int semantic_dim = kDefaultSemanticDim;

  double k_sigma = kDefaultSigmaCutoff;
  int tile_size = 16;
  int threads = 1;
  bool deterministic = true;
  int eval_interval = 250;

  double& lr(ParamGroup g) { return learning_rate[static_cast<int>(g)]; }
  double lr(ParamGroup g) const { return learning_rate[static_cast<int>(g)]; }

  void validate() const {
    if (iterations < 0) throw ValidationError("iterations must be >= 0");
    if (!(ssim_weight >= 0.0 && ssim_weight <= 1.0)) throw ValidationError("ssim weight must lie in [0, 1]");
    if (!(semantic_weight >= 0.0)) throw ValidationError("semantic weight must be >= 0");
    if (!(prune_alpha_threshold > 0.0) || !(densify_grad_threshold > 0.0) || !(k_sigma > 0.0))
      throw ValidationError("thresholds must be positive");
    for (double lr : learning_rate)
      if (!(lr >= 0.0)) throw ValidationError("learning rates must be >= 0");
    if (max_gaussians < 1 || init_gaussians < 1 || min_gaussians < 1) throw ValidationError("Gaussian counts must be >= 1");
    if (plane_resolution < 1 || plane_channels < 1 || decoder_hidden < 1 || semantic_dim < 1)
      throw ValidationError("model dimensions must be >= 1");
    if (threads < 1) throw ValidationError("threads must be >= 1");
    if (tile_size < 8) throw ValidationError("tile size must be >= 8");
  }

  RenderOptions render_options() const {
    RenderOptions o;
    o.tile_size = tile_size;
    o.threads = threads;
    o.deterministic = deterministic;
    return o;
  }
};

// ---------------------------------------------------------------------------
// Loss

struct LossReport {
  double l1 = 0.0;
  double ssim_term = 0.0;  // 1 - SSIM
  double semantic_mse = 0.0;
  double total = 0.0;
};

/// Gray target replicated across the rendered color channels.
inline std::vector<float> replicate_gray(const Image<float>& gray) {
  std::vector<float> out(gray.shape.pixels() * kColorChannels);
  for (std::size_t p = 0; p < gray.shape.pixels(); ++p)
    for (int c = 0; c < kColorChannels; ++c) out[p * kColorChannels + c] = gray.data[p];
  return out;
}

/// total = (1 - lambda) L1 + lambda (1 - SSIM) + beta MSE_semantic. When the
/// gradient spans are non-empty they receive dTotal/d(rendered channel).
template <class Real>
LossReport compute_loss(const RenderedSlice<Real>& rendered, const Image<float>& target_intensity,
                        const Image<float>* target_semantic, double ssim_weight, double semantic_weight,
                        std::span<Real> grad_intensity = {}, std::span<Real> grad_semantic = {}) {
  const ImageShape shape{rendered.height, rendered.width, kColorChannels};
  if (target_intensity.shape != ImageShape{rendered.height, rendered.width, 1})
    throw ValidationError("loss: target intensity shape does not match the rendered slice");
  const auto target = replicate_gray(target_intensity);
  const bool want_grad = !grad_intensity.empty();
  const std::size_t n = rendered.intensity.size();

  LossReport r;
  double l1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) l1 += std::abs(static_cast<double>(rendered.intensity[i]) - target[i]);
  r.l1 = l1 / static_cast<double>(n);

  std::vector<double> g_ssim;
  if (want_grad && ssim_weight > 0.0) g_ssim.resize(n);
  const double s = ssim<Real, float>(rendered.intensity, target, shape, g_ssim);
  r.ssim_term = 1.0 - s;

  if (target_semantic) {
    if (target_semantic->shape != ImageShape{rendered.height, rendered.width, rendered.semantic_dim})
      throw ValidationError("loss: target semantic shape does not match the rendered slice");
    r.semantic_mse = semantic_mse<Real, float>(rendered.semantic, target_semantic->data);
  }
  r.total = (1.0 - ssim_weight) * r.l1 + ssim_weight * r.ssim_term + semantic_weight * r.semantic_mse;

  if (want_grad) {
    if (grad_intensity.size() != n || grad_semantic.size() != rendered.semantic.size())
      throw ValidationError("loss: gradient buffers do not match the rendered slice");
    const double w_l1 = (1.0 - ssim_weight) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(rendered.intensity[i]) - target[i];
      double g = d > 0 ? w_l1 : (d < 0 ? -w_l1 : 0.0);
      if (!g_ssim.empty()) g -= ssim_weight * g_ssim[i];
      grad_intensity[i] = static_cast<Real>(g);
    }
    std::fill(grad_semantic.begin(), grad_semantic.end(), Real(0));
    if (target_semantic) {
      const double w = 2.0 * semantic_weight / static_cast<double>(rendered.semantic.size());
      for (std::size_t i = 0; i < rendered.semantic.size(); ++i)
        grad_semantic[i] = static_cast<Real>(w * (static_cast<double>(rendered.semantic[i]) - target_semantic->data[i]));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update over a flat group. A group whose gradient
/// holds any non-finite value is left untouched and reported as skipped.
template <class Real>
bool adam_update(std::span<Real> params, std::span<const Real> grads, std::span<Real> m, std::span<Real> v, double lr,
                 std::uint64_t step, const AdamHyper& hp = {}) {
  if (params.size() != grads.size() || m.size() != params.size() || v.size() != params.size())
    throw ValidationError("adam: parameter, gradient and moment shapes differ");
  if (step < 1) throw ValidationError("adam: step must be >= 1");
  for (Real g : grads)
    if (!std::isfinite(g)) return false;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double mi = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
    const double vi = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
    m[i] = static_cast<Real>(mi);
    v[i] = static_cast<Real>(vi);
    params[i] -= static_cast<Real>(lr * (mi / c1) / (std::sqrt(vi / c2) + hp.epsilon));
  }
  return true;
}

/// First and second moments for every parameter group.
template <class Real> struct AdamState {
  GradientBuffer<Real> m, v;
  std::uint64_t step = 0;
  std::uint64_t skipped = 0;

  AdamState() = default;
  explicit AdamState(const Scene<Real>& scene) : m(scene), v(scene) {}
};

namespace detail {

template <class Real, class Fn> void for_each_group_tensor(ParamGroup g, Scene<Real>& scene, const GradientBuffer<Real>& grads,
                                                           AdamState<Real>& st, Fn&& fn) {
  switch (g) {
    case ParamGroup::texels:
      for (int p = 0; p < 3; ++p) fn(scene.field.plane(p), grads.field.plane(p), st.m.field.plane(p), st.v.field.plane(p));
      return;
    case ParamGroup::decoder: {
      auto ps = scene.decoder.tensors();
      auto gs = grads.decoder.tensors();
      auto ms = st.m.decoder.tensors();
      auto vs = st.v.decoder.tensors();
      for (int t = 0; t < 4; ++t) fn(*ps[t], *gs[t], *ms[t], *vs[t]);
      return;
    }
    default: {
      const GaussianField f = gaussian_field_of(g);
      fn(scene.gaussians.data(f), grads.gaussians.data(f), st.m.gaussians.data(f), st.v.gaussians.data(f));
    }
  }
}

}  // namespace detail

/// Adam over every parameter group; returns the number of skipped groups.
template <class Real>
int adam_step(Scene<Real>& scene, const GradientBuffer<Real>& grads, AdamState<Real>& state, const TrainConfig& cfg,
              const AdamHyper& hp = {}) {
  ++state.step;
  int skipped = 0;
  for (ParamGroup g : kParamGroups) {
    bool ok = true;
    detail::for_each_group_tensor(g, scene, grads, state, [&](auto& p, const auto& gr, auto& m, auto& v) {
      ok = ok && std::all_of(gr.begin(), gr.end(), [](Real x) { return std::isfinite(x); });
    });
    if (!ok) {
      ++skipped;
      continue;
    }
    detail::for_each_group_tensor(g, scene, grads, state, [&](auto& p, const auto& gr, auto& m, auto& v) {
      adam_update<Real>(p, gr, m, v, cfg.lr(g), state.step, hp);
    });
  }
  state.skipped += skipped;
  return skipped;
}

// ---------------------------------------------------------------------------
// Scene housekeeping

/// Opacity after tri-plane modulation for every Gaussian.
template <class Real> std::vector<Real> effective_opacity(const Scene<Real>& scene) {
  const auto& gs = scene.gaussians;
  std::vector<Real> out(gs.size()), feature(scene.decoder.input), res(scene.decoder.output), pre(scene.decoder.hidden);
  for (std::size_t i = 0; i < gs.size(); ++i) {
    fuse(gs.position(i), scene.field, scene.fuse_mode, std::span<Real>(feature));
    decode<Real>(feature, scene.decoder, res, pre);
    out[i] = sigmoid(gs.raw_opacity(i) + res.back());
  }
  return out;
}

/// Densification statistics: summed position-gradient norms and the number
/// of iterations each Gaussian received a gradient.
struct DensifyStats {
  std::vector<double> grad_norm_sum;
  std::vector<std::uint32_t> count;

  void reset(std::size_t n) {
    grad_norm_sum.assign(n, 0.0);
    count.assign(n, 0);
  }
  template <class Real> void accumulate(const GaussianSet<Real>& grads) {
    const auto& gp = grads.data(GaussianField::position);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const double n = std::sqrt(double(gp[3 * i]) * gp[3 * i] + double(gp[3 * i + 1]) * gp[3 * i + 1] +
                                 double(gp[3 * i + 2]) * gp[3 * i + 2]);
      if (n == 0.0) continue;
      grad_norm_sum[i] += n;
      ++count[i];
    }
  }
  double mean(std::size_t i) const { return count[i] ? grad_norm_sum[i] / count[i] : 0.0; }
};

template <class Real> void select_gaussians(Scene<Real>& scene, AdamState<Real>* state, DensifyStats* stats,
                                            std::span<const std::size_t> keep) {
  scene.gaussians = scene.gaussians.select(keep);
  if (state) {
    state->m.gaussians = state->m.gaussians.select(keep);
    state->v.gaussians = state->v.gaussians.select(keep);
  }
  if (stats) {
    DensifyStats s;
    for (std::size_t i : keep) {
      s.grad_norm_sum.push_back(stats->grad_norm_sum[i]);
      s.count.push_back(stats->count[i]);
    }
    *stats = std::move(s);
  }
}

/// Drops Gaussians whose modulated opacity is below `threshold`, but always
/// keeps at least min(N, min_keep), highest opacity first. Survivors keep
/// their relative order. Returns the number removed.
template <class Real>
std::size_t prune(Scene<Real>& scene, double threshold, AdamState<Real>* state = nullptr, DensifyStats* stats = nullptr,
                  std::size_t min_keep = 16) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ValidationError("prune threshold must lie in (0, 1]");
  const std::size_t n = scene.gaussians.size();
  const auto alpha = effective_opacity(scene);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (static_cast<double>(alpha[i]) >= threshold) keep.push_back(i);
  const std::size_t floor = std::min(n, min_keep);
  if (keep.size() < floor) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return alpha[a] > alpha[b]; });
    keep.assign(order.begin(), order.begin() + floor);
    std::sort(keep.begin(), keep.end());
  }
  if (keep.size() == n) return 0;
  select_gaussians(scene, state, stats, keep);
  return n - keep.size();
}

inline constexpr double kSplitScaleShrink = 1.6;

/// Splits every Gaussian whose mean position-gradient norm exceeds
/// `threshold` (largest first) into two children at mu +- 0.5 sigma_max along
/// the principal axis, each with log_scale reduced by ln 1.6. The first child
/// replaces the parent, the second is appended. Stops at max_gaussians.
/// Moments of both children restart at zero; statistics are reset.
template <class Real>
std::size_t densify(Scene<Real>& scene, DensifyStats& stats, double threshold, std::size_t max_gaussians,
                    AdamState<Real>* state = nullptr) {
  auto& gs = scene.gaussians;
  const std::size_t n = gs.size();
  if (stats.grad_norm_sum.size() != n) throw ValidationError("densify statistics are not co-shaped with the scene");
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < n; ++i)
    if (stats.mean(i) > threshold) cand.push_back(i);
  std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return stats.mean(a) > stats.mean(b); });

  std::size_t splits = 0;
  for (std::size_t i : cand) {
    if (gs.size() >= max_gaussians) break;
    RawGaussianParams<Real> parent = gs.get(i);
    const Mat3<Real> r = rotation_matrix(normalized_quaternion(parent.rotation));
    int axis = 0;
    parent.log_scale.maxCoeff(&axis);
    const Real sigma_max = std::exp(parent.log_scale[axis]);
    const Vec3<Real> offset = Real(0.5) * sigma_max * r.col(axis);
    RawGaussianParams<Real> a = parent, b = parent;
    a.position += offset;
    b.position -= offset;
    const Real shrink = static_cast<Real>(std::log(kSplitScaleShrink));
    a.log_scale.array() -= shrink;
    b.log_scale.array() -= shrink;
    gs.set(i, a);
    gs.push_back(b);
    if (state) {
      for (auto* mom : {&state->m.gaussians, &state->v.gaussians}) {
        RawGaussianParams<Real> zero;
        zero.rotation.setZero();
        zero.base_semantic.assign(gs.semantic_dim(), Real(0));
        mom->set(i, zero);
        mom->push_back(zero);
      }
    }
    ++splits;
  }
  stats.reset(gs.size());
  return splits;
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

/// Mean distance from each point to its k nearest neighbours, via a uniform
/// hash grid searched in growing Chebyshev rings.
inline std::vector<double> mean_knn_distance(const std::vector<std::array<double, 3>>& pts, int k, double fallback) {
  const std::size_t n = pts.size();
  std::vector<double> out(n, fallback);
  if (n < 2) return out;
  const int kk = std::min<int>(k, static_cast<int>(n) - 1);
  const double cell = std::clamp(std::cbrt(4.0 / static_cast<double>(n)), 1.0 / 256.0, 1.0);
  const int g = static_cast<int>(std::ceil(1.0 / cell));
  auto cell_of = [&](double x) { return std::clamp(static_cast<int>(std::floor(x / cell)), -1, g); };
  auto key = [&](int x, int y, int z) {
    return (static_cast<std::int64_t>(x + 2) * (g + 4) + (y + 2)) * (g + 4) + (z + 2);
  };
  std::unordered_map<std::int64_t, std::vector<std::uint32_t>> grid;
  for (std::uint32_t i = 0; i < n; ++i)
    grid[key(cell_of(pts[i][0]), cell_of(pts[i][1]), cell_of(pts[i][2]))].push_back(i);

  std::vector<double> best;
  for (std::size_t i = 0; i < n; ++i) {
    const int cx = cell_of(pts[i][0]), cy = cell_of(pts[i][1]), cz = cell_of(pts[i][2]);
    best.clear();
    for (int ring = 0; ring <= g + 2; ++ring) {
      for (int dx = -ring; dx <= ring; ++dx)
        for (int dy = -ring; dy <= ring; ++dy)
          for (int dz = -ring; dz <= ring; ++dz) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            const auto it = grid.find(key(cx + dx, cy + dy, cz + dz));
            if (it == grid.end()) continue;
            for (std::uint32_t j : it->second) {
              if (j == i) continue;
              const double ex = pts[j][0] - pts[i][0], ey = pts[j][1] - pts[i][1], ez = pts[j][2] - pts[i][2];
              best.push_back(std::sqrt(ex * ex + ey * ey + ez * ez));
            }
          }
      if (static_cast<int>(best.size()) >= kk) {
        std::nth_element(best.begin(), best.begin() + (kk - 1), best.end());
        // everything closer than ring * cell has been visited
        if (best[kk - 1] <= ring * cell) break;
      }
    }
    std::partial_sort(best.begin(), best.begin() + kk, best.end());
    double sum = 0.0;
    for (int j = 0; j < kk; ++j) sum += best[j];
    out[i] = sum / kk;
  }
  return out;
}

}  // namespace detail

/// Seeds one Gaussian per (subsampled) bright training voxel. Falls back to a
/// uniform 16^3 grid when no voxel passes the intensity threshold.
template <class Real> GaussianSet<Real> initialize_gaussians(const SliceStack& stack, const TrainConfig& cfg) {
  const auto train = stack.indices(SplitLabel::train);
  if (train.empty()) throw ValidationError("initialization needs at least one training slice");
  const int k = cfg.semantic_dim;
  if (stack.has_semantic() && k != 3) throw ValidationError("RGB semantic targets need semantic_dim = 3");

  struct Candidate {
    std::array<double, 3> pos;
    std::size_t slice;
    int row, col;
  };
  std::vector<Candidate> cand;
  for (std::size_t si : train) {
    const Slice& s = stack.slices[si];
    for (int row = 0; row < stack.height; ++row)
      for (int col = 0; col < stack.width; ++col)
        if (s.intensity.at(row, col) > cfg.init_intensity_threshold) {
          const Vec3<double> x = slice_point<double>(stack.axis, pixel_u(col, stack.width), pixel_v(row, stack.height), s.depth);
          cand.push_back({{x[0], x[1], x[2]}, si, row, col});
        }
  }

  if (cand.empty()) {
    // nearest training slice supplies the colors
    constexpr int kGrid = 16;
    const PlaneAxes ax = plane_axes(stack.axis);
    for (int z = 0; z < kGrid; ++z)
      for (int y = 0; y < kGrid; ++y)
        for (int x = 0; x < kGrid; ++x) {
          const std::array<double, 3> p{(x + 0.5) / kGrid, (y + 0.5) / kGrid, (z + 0.5) / kGrid};
          std::size_t nearest = train.front();
          for (std::size_t si : train)
            if (std::abs(stack.slices[si].depth - p[ax.n]) < std::abs(stack.slices[nearest].depth - p[ax.n])) nearest = si;
          const int col = std::min(stack.width - 1, static_cast<int>(p[ax.u] * stack.width));
          const int row = std::min(stack.height - 1, static_cast<int>(p[ax.v] * stack.height));
          cand.push_back({p, nearest, row, col});
        }
  } else if (cand.size() > static_cast<std::size_t>(cfg.init_gaussians)) {
    std::mt19937_64 rng(cfg.seed ^ 0x5eed1417ULL);
    std::vector<std::size_t> idx(cand.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.init_gaussians); ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(cfg.init_gaussians);
    std::sort(idx.begin(), idx.end());
    std::vector<Candidate> chosen;
    chosen.reserve(idx.size());
    for (std::size_t i : idx) chosen.push_back(cand[i]);
    cand = std::move(chosen);
  }

  std::vector<std::array<double, 3>> pts;
  pts.reserve(cand.size());
  for (const auto& c : cand) pts.push_back(c.pos);
  const double voxel = 1.0 / std::max({stack.volume_dims[0], stack.volume_dims[1], stack.volume_dims[2], 1});
  const auto dist = detail::mean_knn_distance(pts, 8, voxel);

  auto squash = [](double v) { return static_cast<Real>(logit(std::clamp(v, 0.01, 0.99))); };
  GaussianSet<Real> gs(k, cand.size());
  for (std::size_t i = 0; i < cand.size(); ++i) {
    const auto& c = cand[i];
    const Slice& s = stack.slices[c.slice];
    RawGaussianParams<Real> p;
    p.position = Vec3<Real>(Real(c.pos[0]), Real(c.pos[1]), Real(c.pos[2]));
    p.log_scale.setConstant(static_cast<Real>(std::log(std::max(dist[i], 1e-6))));
    p.rotation = Vec4<Real>(1, 0, 0, 0);
    p.raw_opacity = static_cast<Real>(logit(cfg.init_opacity));
    p.base_color.setConstant(squash(s.intensity.at(c.row, c.col)));
    p.base_semantic.assign(k, Real(0));
    if (s.semantic)
      for (int ch = 0; ch < k; ++ch) p.base_semantic[ch] = squash(s.semantic->at(c.row, c.col, ch));
    gs.set(i, p);
  }
  return gs;
}

template <class Real> Scene<Real> initialize_scene(const SliceStack& stack, const TrainConfig& cfg) {
  cfg.validate();
  return make_scene<Real>(initialize_gaussians<Real>(stack, cfg), cfg.plane_resolution, cfg.plane_channels,
                          cfg.decoder_hidden, cfg.seed ^ 0xdec0de5ULL, cfg.fuse_mode);
}

// ---------------------------------------------------------------------------
// Evaluation

template <class Real> SlicePlaneSpec slice_spec(const SliceStack& st, const Slice& s, double k_sigma) {
  SlicePlaneSpec spec;
  spec.axis = st.axis;
  spec.depth = s.depth;
  spec.width = st.width;
  spec.height = st.height;
  spec.k_sigma = k_sigma;
  return spec;
}

/// Renders every slice of `which` and scores it. Label accuracy needs a palette.
template <class Real>
MetricReport evaluate_split(const Scene<Real>& scene, const SliceStack& st, SplitLabel which, double k_sigma,
                            const RenderOptions& options, const SemanticPalette* palette = nullptr) {
  if (st.has_semantic() && scene.semantic_dim() != 3)
    throw ValidationError("checkpoint semantic width " + std::to_string(scene.semantic_dim()) +
                          " is incompatible with RGB semantic slices");
  MetricReport rep;
  for (std::size_t si : st.indices(which)) {
    const Slice& s = st.slices[si];
    const auto r = render_slice(scene, slice_spec<Real>(st, s, k_sigma), options);
    const auto target = replicate_gray(s.intensity);
    SliceMetrics m;
    m.slice_index = s.index;
    m.depth = s.depth;
    m.psnr = psnr<Real, float>(r.intensity, target);
    m.ssim = ssim<Real, float>(r.intensity, target, {st.height, st.width, kColorChannels});
    if (s.semantic) {
      m.semantic_mse = semantic_mse<Real, float>(r.semantic, s.semantic->data);
      if (palette) {
        const ImageShape sh{st.height, st.width, 3};
        const auto got = rgb_to_label<Real>(r.semantic, sh, *palette);
        const auto want = rgb_to_label<float>(s.semantic->data, sh, *palette);
        std::size_t hit = 0;
        for (std::size_t p = 0; p < got.data.size(); ++p) hit += got.data[p] == want.data[p];
        m.label_accuracy = static_cast<double>(hit) / static_cast<double>(got.data.size());
      }
    }
    rep.slices.push_back(m);
  }
  rep.aggregate();
  return rep;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRow {
  int iteration = 0;
  LossReport loss;
  std::size_t gaussians = 0;
  std::optional<double> heldout_psnr;
  std::optional<double> heldout_ssim;
};

/// Owns the scene and optimizer state across iterations.
template <class Real> class Trainer {
 public:
  Trainer(const SliceStack& stack, TrainConfig cfg, const SemanticPalette* palette = nullptr)
      : stack_(stack), cfg_(std::move(cfg)), palette_(palette) {
    cfg_.validate();
    if (stack_.indices(SplitLabel::train).empty()) throw ValidationError("training needs at least one training slice");
    scene_ = initialize_scene<Real>(stack_, cfg_);
    state_ = AdamState<Real>(scene_);
    rng_.seed(cfg_.seed);
  }

  /// Resumes from a restored scene and optimizer state. The slice schedule is
  /// replayed up to `iteration`; densification statistics start empty, so a
  /// resume is exact at housekeeping boundaries.
  Trainer(const SliceStack& stack, TrainConfig cfg, Scene<Real> scene, AdamState<Real> state, int iteration,
          const SemanticPalette* palette = nullptr)
      : stack_(stack), cfg_(std::move(cfg)), palette_(palette), scene_(std::move(scene)), state_(std::move(state)),
        iteration_(iteration) {
    cfg_.validate();
    if (stack_.indices(SplitLabel::train).empty()) throw ValidationError("training needs at least one training slice");
    rng_.seed(cfg_.seed);
    for (int i = 0; i < iteration_; ++i) next_slice();
  }

  const Scene<Real>& scene() const { return scene_; }
  Scene<Real>& scene() { return scene_; }
  const AdamState<Real>& state() const { return state_; }
  const TrainConfig& config() const { return cfg_; }
  int iteration() const { return iteration_; }
  const std::vector<TrainLogRow>& log() const { return log_; }
  const DensifyStats& densify_stats() const { return stats_; }

  /// Called with the failing iteration before a non-finite loss aborts training.
  std::function<void(const Trainer&)> on_failure;
  /// Called after every logged row.
  std::function<void(const TrainLogRow&)> on_row;

  TrainLogRow step() {
    const std::size_t si = next_slice();
    const Slice& s = stack_.slices[si];
    const auto spec = slice_spec<Real>(stack_, s, cfg_.k_sigma);
    const auto rendered = render_slice(scene_, spec, cfg_.render_options());
    std::vector<Real> g_int(rendered.intensity.size()), g_sem(rendered.semantic.size());
    const Image<float>* sem = s.semantic ? &*s.semantic : nullptr;
    if (sem && scene_.semantic_dim() != sem->shape.channels)
      throw ValidationError("semantic width of the scene does not match the slice semantics");
    const LossReport loss =
        compute_loss<Real>(rendered, s.intensity, sem, cfg_.ssim_weight, cfg_.semantic_weight, g_int, g_sem);
    ++iteration_;
    if (!std::isfinite(loss.total)) {
      if (on_failure) on_failure(*this);
      throw NumericError("non-finite loss at iteration " + std::to_string(iteration_) + " (slice " +
                         std::to_string(s.index) + ", N = " + std::to_string(scene_.gaussians.size()) + ")");
    }

    if (grads_.gaussians.size() != scene_.gaussians.size()) grads_ = GradientBuffer<Real>(scene_);
    grads_.set_zero();
    backward_slice<Real>(scene_, rendered, g_int, g_sem, grads_);
    if (stats_.grad_norm_sum.size() != scene_.gaussians.size()) stats_.reset(scene_.gaussians.size());
    stats_.accumulate(grads_.gaussians);
    adam_step(scene_, grads_, state_, cfg_);

    // housekeeping only while optimization steps remain to settle it
    const bool more = iteration_ < cfg_.iterations;
    if (more && cfg_.densify_interval > 0 && iteration_ % cfg_.densify_interval == 0)
      densify(scene_, stats_, cfg_.densify_grad_threshold, static_cast<std::size_t>(cfg_.max_gaussians), &state_);
    if (more && cfg_.prune_interval > 0 && iteration_ % cfg_.prune_interval == 0)
      prune(scene_, cfg_.prune_alpha_threshold, &state_, &stats_, static_cast<std::size_t>(cfg_.min_gaussians));

    TrainLogRow row;
    row.iteration = iteration_;
    row.loss = loss;
    row.gaussians = scene_.gaussians.size();
    const bool eval_now = (cfg_.eval_interval > 0 && iteration_ % cfg_.eval_interval == 0) || iteration_ == cfg_.iterations;
    if (eval_now && !stack_.indices(SplitLabel::test).empty()) {
      const auto rep = evaluate_split(scene_, stack_, SplitLabel::test, cfg_.k_sigma, cfg_.render_options());
      row.heldout_psnr = rep.psnr.mean;
      row.heldout_ssim = rep.ssim.mean;
    }
    log_.push_back(row);
    if (on_row) on_row(row);
    return row;
  }

  void run() {
    while (iteration_ < cfg_.iterations) step();
  }

 private:
  std::size_t next_slice() {
    if (cursor_ >= order_.size()) {
      order_ = stack_.indices(SplitLabel::train);
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    return order_[cursor_++];
  }

  const SliceStack& stack_;
  TrainConfig cfg_;
  const SemanticPalette* palette_ = nullptr;
  Scene<Real> scene_;
  AdamState<Real> state_;
  GradientBuffer<Real> grads_;
  DensifyStats stats_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int iteration_ = 0;
  std::vector<TrainLogRow> log_;
};

// ---------------------------------------------------------------------------
// Gradient check

struct GroupCheck {
  ParamGroup group;
  std::size_t parameters = 0;
  double max_relative_error = 0.0;
  double max_abs_gradient = 0.0;
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  double tolerance = 1e-4;

  double max_relative_error() const {
    double m = 0.0;
    for (const auto& g : groups) m = std::max(m, g.max_relative_error);
    return m;
  }
  bool passed() const { return max_relative_error() <= tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Gradients smaller than this are compared absolutely.
  double relative_floor = 1e-4;
  /// Test hook: perturbs one analytic position gradient before comparing.
  bool corrupt_analytic = false;
  RenderOptions render;
};

/// Scalar loss of the check: the sum of every rendered channel.
template <class Real> double sum_of_outputs(const RenderedSlice<Real>& r) {
  double s = 0.0;
  for (Real v : r.intensity) s += v;
  for (Real v : r.semantic) s += v;
  return s;
}

/// Central finite differences against the analytic backward pass, per group.
template <class Real>
GradCheckReport grad_check(const Scene<Real>& scene_in, const SlicePlaneSpec& spec, const GradCheckOptions& opt = {}) {
  Scene<Real> scene = scene_in;
  const auto rendered = render_slice(scene, spec, opt.render);
  std::vector<Real> up_i(rendered.intensity.size(), Real(1)), up_s(rendered.semantic.size(), Real(1));
  GradientBuffer<Real> analytic(scene);
  backward_slice<Real>(scene, rendered, up_i, up_s, analytic);
  if (opt.corrupt_analytic) {
    auto& gp = analytic.gaussians.data(GaussianField::position);
    gp[0] += static_cast<Real>(0.1 * std::abs(gp[0]) + 1e-2);
  }

  GradCheckReport rep;
  rep.tolerance = opt.tolerance;
  auto loss_at = [&] { return sum_of_outputs(render_slice(scene, spec, opt.render)); };
  GradientBuffer<Real> dummy_grad(scene);
  AdamState<Real> dummy_state(scene);
  for (ParamGroup g : kParamGroups) {
    GroupCheck gc;
    gc.group = g;
    // pair each parameter tensor with its analytic gradient tensor
    std::vector<std::pair<std::vector<Real>*, const std::vector<Real>*>> tensors;
    detail::for_each_group_tensor(g, scene, analytic, dummy_state,
                                  [&](auto& p, const auto& gr, auto&, auto&) { tensors.emplace_back(&p, &gr); });
    for (auto [param, grad] : tensors) {
      for (std::size_t e = 0; e < param->size(); ++e) {
        const Real orig = (*param)[e];
        (*param)[e] = orig + static_cast<Real>(opt.step);
        const double lp = loss_at();
        (*param)[e] = orig - static_cast<Real>(opt.step);
        const double lm = loss_at();
        (*param)[e] = orig;
        const double numeric = (lp - lm) / (2.0 * opt.step);
        const double a = static_cast<double>((*grad)[e]);
        const double denom = std::max({std::abs(a), std::abs(numeric), opt.relative_floor});
        gc.max_relative_error = std::max(gc.max_relative_error, std::abs(a - numeric) / denom);
        gc.max_abs_gradient = std::max(gc.max_abs_gradient, std::abs(a));
        ++gc.parameters;
      }
    }
    rep.groups.push_back(gc);
  }
  return rep;
}

/// The standard small fixture: five Gaussians near the z = 0.5 plane, an
/// 8x8 slice, a random R = 8, C = 4 tri-plane and an H = 16 decoder, culling
/// disabled so the loss is smooth.
inline std::pair<Scene<double>, SlicePlaneSpec> gradcheck_fixture(std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  GaussianSet<double> gs(3);
  for (int i = 0; i < 5; ++i) {
    RawGaussianParams<double> p;
    p.position = Vec3<double>(0.5 + 0.3 * u(rng), 0.5 + 0.3 * u(rng), 0.5 + 0.08 * u(rng));
    p.log_scale = Vec3<double>(std::log(0.16 + 0.05 * u(rng)), std::log(0.14 + 0.05 * u(rng)),
                               std::log(0.12 + 0.04 * u(rng)));
    p.rotation = Vec4<double>(1.0 + 0.3 * u(rng), 0.4 * u(rng), 0.4 * u(rng), 0.4 * u(rng));
    p.raw_opacity = 0.8 * u(rng);
    p.base_color = Vec3<double>(u(rng), u(rng), u(rng));
    p.base_semantic = {u(rng), u(rng), u(rng)};
    gs.push_back(p);
  }
  Scene<double> scene = make_scene<double>(std::move(gs), 8, 4, 16, seed + 1);
  scene.decoder.init_random(seed + 2, 0.5);
  for (int pl = 0; pl < 3; ++pl)
    for (auto& t : scene.field.plane(pl)) t = 0.5 * u(rng);
  SlicePlaneSpec spec;
  spec.axis = Axis::z;
  spec.depth = 0.5;
  spec.width = spec.height = 8;
  spec.k_sigma = std::numeric_limits<double>::infinity();
  return {std::move(scene), spec};
}

inline GradCheckOptions gradcheck_fixture_options() {
  GradCheckOptions o;
  o.render.tile_size = 8;
  return o;
}

}  // namespace slicegs
