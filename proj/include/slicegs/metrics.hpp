#pragma once

// Image quality metrics for held-out evaluation: PSNR, SSIM (with its
// gradient, used by the training loss) and semantic MSE.

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "slicegs/image.hpp"

namespace slicegs {

namespace detail {

template <class A, class B> double mean_squared(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) throw ValidationError("metric inputs differ in size");
  if (a.empty()) throw ValidationError("metric inputs are empty");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace detail

/// 10 log10(peak^2 / MSE). Identical inputs give +infinity, which aggregates
/// count separately instead of averaging.
template <class A, class B> double psnr(std::span<const A> a, std::span<const B> b, double peak = 1.0) {
  const double mse = detail::mean_squared(a, b);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

/// Mean squared error over every pixel and channel.
template <class A, class B> double semantic_mse(std::span<const A> a, std::span<const B> b) {
  return detail::mean_squared(a, b);
}

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline const std::array<double, kSsimWindow>& ssim_kernel() {
  static const std::array<double, kSsimWindow> k = [] {
    std::array<double, kSsimWindow> w{};
    double sum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
      const double x = i - kSsimWindow / 2;
      w[i] = std::exp(-x * x / (2.0 * kSsimSigma * kSsimSigma));
      sum += w[i];
    }
    for (auto& v : w) v /= sum;
    return w;
  }();
  return k;
}

namespace detail {

/// Separable valid-region filtering of one channel (h x w) with the SSIM window.
inline std::vector<double> filter_valid(const std::vector<double>& img, int h, int w) {
  const auto& k = ssim_kernel();
  const int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int o = 0; o < kSsimWindow; ++o) acc += k[o] * img[static_cast<std::size_t>(r) * w + c + o];
      tmp[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int o = 0; o < kSsimWindow; ++o) acc += k[o] * tmp[static_cast<std::size_t>(r + o) * ow + c];
      out[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  return out;
}

/// Transpose of filter_valid: scatters an (h-10) x (w-10) map back to h x w.
inline std::vector<double> filter_valid_transpose(const std::vector<double>& map, int h, int w) {
  const auto& k = ssim_kernel();
  const int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0);
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      const double v = map[static_cast<std::size_t>(r) * ow + c];
      for (int o = 0; o < kSsimWindow; ++o) tmp[static_cast<std::size_t>(r + o) * ow + c] += k[o] * v;
    }
  std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < ow; ++c) {
      const double v = tmp[static_cast<std::size_t>(r) * ow + c];
      for (int o = 0; o < kSsimWindow; ++o) out[static_cast<std::size_t>(r) * w + c + o] += k[o] * v;
    }
  return out;
}

template <class T> std::vector<double> channel_plane(std::span<const T> img, const ImageShape& s, int ch) {
  std::vector<double> out(s.pixels());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = static_cast<double>(img[p * s.channels + ch]);
  return out;
}

}  // namespace detail

/// Mean local SSIM: 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 =
/// 0.03^2 for peak 1, valid region only, averaged over channels. When
/// `grad_a` is non-empty it receives d(SSIM)/d(a).
template <class A, class B>
double ssim(std::span<const A> a, std::span<const B> b, const ImageShape& shape, std::span<double> grad_a = {}) {
  if (a.size() != shape.size() || b.size() != shape.size()) throw ValidationError("ssim: inputs do not match shape");
  if (shape.height < kSsimWindow || shape.width < kSsimWindow)
    throw ValidationError("ssim: image is smaller than the 11x11 window");
  const int h = shape.height, w = shape.width;
  const std::size_t map_size = static_cast<std::size_t>(h - kSsimWindow + 1) * (w - kSsimWindow + 1);
  const bool want_grad = !grad_a.empty();
  if (want_grad && grad_a.size() != shape.size()) throw ValidationError("ssim: gradient buffer does not match shape");

  double total = 0.0;
  for (int ch = 0; ch < shape.channels; ++ch) {
    const auto x = detail::channel_plane(a, shape, ch);
    const auto y = detail::channel_plane(b, shape, ch);
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t p = 0; p < x.size(); ++p) {
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    const auto mx = detail::filter_valid(x, h, w), my = detail::filter_valid(y, h, w);
    const auto exx = detail::filter_valid(xx, h, w), eyy = detail::filter_valid(yy, h, w);
    const auto exy = detail::filter_valid(xy, h, w);

    std::vector<double> g_mu, g_exx, g_exy;
    if (want_grad) {
      g_mu.resize(map_size);
      g_exx.resize(map_size);
      g_exy.resize(map_size);
    }
    double sum = 0.0;
    for (std::size_t q = 0; q < map_size; ++q) {
      const double a1 = 2 * mx[q] * my[q] + kSsimC1;
      const double a2 = 2 * (exy[q] - mx[q] * my[q]) + kSsimC2;
      const double b1 = mx[q] * mx[q] + my[q] * my[q] + kSsimC1;
      const double b2 = (exx[q] - mx[q] * mx[q]) + (eyy[q] - my[q] * my[q]) + kSsimC2;
      const double s = (a1 * a2) / (b1 * b2);
      sum += s;
      if (want_grad) {
        g_mu[q] = 2 * my[q] * (a2 - a1) / (b1 * b2) - s * 2 * mx[q] * (1 / b1 - 1 / b2);
        g_exx[q] = -s / b2;
        g_exy[q] = 2 * a1 / (b1 * b2);
      }
    }
    total += sum / static_cast<double>(map_size);

    if (want_grad) {
      const double scale = 1.0 / (static_cast<double>(map_size) * shape.channels);
      for (std::size_t q = 0; q < map_size; ++q) {
        g_mu[q] *= scale;
        g_exx[q] *= scale;
        g_exy[q] *= scale;
      }
      const auto t_mu = detail::filter_valid_transpose(g_mu, h, w);
      const auto t_xx = detail::filter_valid_transpose(g_exx, h, w);
      const auto t_xy = detail::filter_valid_transpose(g_exy, h, w);
      for (std::size_t p = 0; p < x.size(); ++p)
        grad_a[p * shape.channels + ch] = t_mu[p] + 2 * x[p] * t_xx[p] + y[p] * t_xy[p];
    }
  }
  return total / shape.channels;
}

/// Mean and population standard deviation (divisor n).
struct Summary {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t count = 0;
};

inline Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

struct SliceMetrics {
  int slice_index = 0;
  double depth = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> semantic_mse;
  std::optional<double> label_accuracy;
};

/// Per-slice metrics plus aggregates over exactly those slices.
struct MetricReport {
  std::vector<SliceMetrics> slices;
  Summary psnr;                    // finite values only
  std::size_t infinite_psnr = 0;   // excluded from `psnr`
  Summary ssim;
  std::optional<Summary> semantic_mse;
  std::optional<Summary> label_accuracy;

  void aggregate() {
    std::vector<double> p, s, m, acc;
    infinite_psnr = 0;
    for (const auto& r : slices) {
      if (std::isinf(r.psnr))
        ++infinite_psnr;
      else
        p.push_back(r.psnr);
      s.push_back(r.ssim);
      if (r.semantic_mse) m.push_back(*r.semantic_mse);
      if (r.label_accuracy) acc.push_back(*r.label_accuracy);
    }
    psnr = summarize(p);
    ssim = summarize(s);
    semantic_mse.reset();
    label_accuracy.reset();
    if (!m.empty()) semantic_mse = summarize(m);
    if (!acc.empty()) label_accuracy = summarize(acc);
  }
};

}  // namespace slicegs
