#pragma once

#include <cstdint>
#include <cstring>
#include <span>

#include "slicegs/core.hpp"
#include "slicegs/triplane.hpp"

namespace slicegs {

/// Everything a slice render depends on: explicit Gaussians, the tri-plane
/// field and its decoder.
template <class Real> struct Scene {
  GaussianSet<Real> gaussians;
  TriPlaneField<Real> field;
  DecoderMlp<Real> decoder;
  FuseMode fuse_mode = FuseMode::concat;

  int semantic_dim() const { return gaussians.semantic_dim(); }

  void validate() const {
    if (gaussians.empty()) throw ValidationError("scene has no Gaussians");
    if (decoder.input != fused_width(fuse_mode, field.channels()))
      throw ValidationError("decoder input width does not match the fused tri-plane feature");
    if (decoder.semantic_dim() != gaussians.semantic_dim())
      throw ValidationError("decoder output width does not match the semantic dimension");
  }
};

/// Builds a scene with zero planes and a seeded decoder around `gaussians`.
template <class Real>
Scene<Real> make_scene(GaussianSet<Real> gaussians, int resolution, int channels, int hidden, std::uint64_t seed,
                       FuseMode mode = FuseMode::concat) {
  Scene<Real> s;
  const int k = gaussians.semantic_dim();
  s.gaussians = std::move(gaussians);
  s.field = TriPlaneField<Real>(resolution, channels);
  s.decoder = DecoderMlp<Real>(fused_width(mode, channels), hidden, k);
  s.decoder.init_random(seed);
  s.fuse_mode = mode;
  return s;
}

/// Gradient storage co-shaped with a Scene.
template <class Real> struct GradientBuffer {
  GaussianSet<Real> gaussians;
  TriPlaneField<Real> field;
  DecoderMlp<Real> decoder;

  GradientBuffer() = default;
  explicit GradientBuffer(const Scene<Real>& scene)
      : gaussians(scene.gaussians.zeros_like()), field(scene.field.zeros_like()), decoder(scene.decoder.zeros_like()) {}

  void set_zero() {
    gaussians.set_zero();
    field.set_zero();
    decoder.set_zero();
  }
  bool all_finite() const { return gaussians.all_finite() && field.all_finite() && decoder.all_finite(); }
};

namespace detail {

/// FNV-1a style mixing over 64-bit words, bytes for the tail.
inline void fnv1a(std::uint64_t& h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::size_t i = 0;
  for (; i + 8 <= bytes; i += 8) {
    std::uint64_t word;
    std::memcpy(&word, p + i, 8);
    h ^= word;
    h *= 0x100000001b3ULL;
  }
  for (; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

template <class Real> void hash_vector(std::uint64_t& h, const std::vector<Real>& v) {
  const std::uint64_t n = v.size();
  fnv1a(h, &n, sizeof n);
  fnv1a(h, v.data(), v.size() * sizeof(Real));
}

}  // namespace detail

/// Content fingerprint over every parameter; used to detect a render cache
/// that no longer matches the scene it came from.
template <class Real> std::uint64_t scene_fingerprint(const Scene<Real>& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (GaussianField f : kGaussianFields) detail::hash_vector(h, s.gaussians.data(f));
  for (int p = 0; p < 3; ++p) detail::hash_vector(h, s.field.plane(p));
  for (const auto* t : s.decoder.tensors()) detail::hash_vector(h, *t);
  const auto mode = static_cast<std::uint8_t>(s.fuse_mode);
  detail::fnv1a(h, &mode, 1);
  return h;
}

}  // namespace slicegs
