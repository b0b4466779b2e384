#pragma once

// Versioned binary checkpoint: scene parameters, Adam moments, iteration and
// the training configuration. Little-endian, terminated by an FNV-1a checksum
// of everything before it.
//
//   magic "SLGSCKPT" | u32 version | u32 scalar bytes
//   u64 N | u32 K | u32 R | u32 C | u32 D | u32 H | u8 fuse
//   u64 iteration | u64 adam step | u64 adam skipped
//   u64 config length | config text (threads stored as 1)
//   parameters, first moments, second moments (Gaussian fields, planes, decoder)
//   u64 checksum

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "slicegs/config.hpp"
#include "slicegs/dataio.hpp"
#include "slicegs/optimizer.hpp"
#include "slicegs/scene.hpp"

namespace slicegs {

inline constexpr char kCheckpointMagic[8] = {'S', 'L', 'G', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class Real> struct Checkpoint {
  Scene<Real> scene;
  AdamState<Real> state;
  std::uint64_t iteration = 0;
  TrainConfig config;
};

namespace detail {

class ByteWriter {
 public:
  template <class T> void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  template <class Real> void put_vector(const std::vector<Real>& v) { put_bytes(v.data(), v.size() * sizeof(Real)); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}
  template <class T> T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  template <class Real> void get_vector(std::vector<Real>& v) { get_bytes(v.data(), v.size() * sizeof(Real)); }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError(origin_ + ": checkpoint is truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline std::uint64_t checksum(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  fnv1a(h, bytes.data(), bytes.size());
  return h;
}

template <class Real, class Fn> void for_each_tensor(GaussianSet<Real>& g, TriPlaneField<Real>& f, DecoderMlp<Real>& d, Fn&& fn) {
  for (GaussianField field : kGaussianFields) fn(g.data(field));
  for (int p = 0; p < 3; ++p) fn(f.plane(p));
  for (auto* t : d.tensors()) fn(*t);
}

}  // namespace detail

template <class Real>
std::vector<std::uint8_t> save_checkpoint(const Scene<Real>& scene, const AdamState<Real>& state, std::uint64_t iteration,
                                          const TrainConfig& config) {
  scene.validate();
  if (!scene.gaussians.all_finite() || !scene.field.all_finite() || !scene.decoder.all_finite())
    throw NumericError("refusing to checkpoint non-finite parameters");
  if (state.m.gaussians.size() != scene.gaussians.size() || state.v.gaussians.size() != scene.gaussians.size())
    throw ValidationError("optimizer moments are not co-shaped with the scene");

  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(sizeof(Real));
  w.put<std::uint64_t>(scene.gaussians.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(scene.semantic_dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(scene.field.resolution()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(scene.field.channels()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(scene.decoder.input));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(scene.decoder.hidden));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(scene.fuse_mode));
  w.put<std::uint64_t>(iteration);
  w.put<std::uint64_t>(state.step);
  w.put<std::uint64_t>(state.skipped);
  // the thread count is an execution setting; results do not depend on it
  TrainConfig stored = config;
  stored.threads = 1;
  const std::string text = config_to_text(stored);
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text.data(), text.size());

  auto emit = [&](const GaussianSet<Real>& g, const TriPlaneField<Real>& f, const DecoderMlp<Real>& d) {
    for (GaussianField field : kGaussianFields) w.put_vector(g.data(field));
    for (int p = 0; p < 3; ++p) w.put_vector(f.plane(p));
    for (const auto* t : d.tensors()) w.put_vector(*t);
  };
  emit(scene.gaussians, scene.field, scene.decoder);
  emit(state.m.gaussians, state.m.field, state.m.decoder);
  emit(state.v.gaussians, state.v.field, state.v.decoder);
  w.put<std::uint64_t>(detail::checksum(w.bytes()));
  return std::move(w.bytes());
}

template <class Real>
Checkpoint<Real> load_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "checkpoint") {
  if (bytes.size() < sizeof kCheckpointMagic + 8 + 8) throw DataError(origin + ": checkpoint is truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw DataError(origin + ": not a checkpoint (bad magic)");
  detail::ByteReader r(bytes.first(bytes.size() - 8), origin);
  char magic[8];
  r.get_bytes(magic, sizeof magic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw DataError(origin + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  const auto scalar = r.get<std::uint32_t>();
  if (scalar != sizeof(Real))
    throw DataError(origin + ": checkpoint stores " + std::to_string(scalar) + "-byte scalars, expected " +
                    std::to_string(sizeof(Real)));
  std::uint64_t stored_sum = 0;
  std::memcpy(&stored_sum, bytes.data() + bytes.size() - 8, 8);
  if (stored_sum != detail::checksum(bytes.first(bytes.size() - 8)))
    throw DataError(origin + ": checkpoint checksum mismatch (corrupted)");

  const auto n = r.get<std::uint64_t>();
  const auto k = r.get<std::uint32_t>();
  const auto res = r.get<std::uint32_t>();
  const auto ch = r.get<std::uint32_t>();
  const auto d_in = r.get<std::uint32_t>();
  const auto hidden = r.get<std::uint32_t>();
  const auto fuse = r.get<std::uint8_t>();
  if (n == 0 || k == 0 || res == 0 || ch == 0 || hidden == 0 || fuse > 1)
    throw DataError(origin + ": checkpoint shape header is invalid");
  const auto mode = static_cast<FuseMode>(fuse);
  if (d_in != static_cast<std::uint32_t>(fused_width(mode, static_cast<int>(ch))))
    throw DataError(origin + ": checkpoint decoder width does not match its tri-plane");

  Checkpoint<Real> c;
  c.iteration = r.get<std::uint64_t>();
  const auto step = r.get<std::uint64_t>();
  const auto skipped = r.get<std::uint64_t>();
  const auto text_len = r.get<std::uint64_t>();
  if (text_len > r.remaining()) throw DataError(origin + ": checkpoint is truncated");
  std::string text(text_len, '\0');
  r.get_bytes(text.data(), text.size());
  c.config = config_from_text(text, origin + " (embedded config)");

  // expected payload size before allocating anything large
  const std::size_t per_gaussian = 3 + 3 + 4 + 1 + 3 + k;
  const std::size_t planes = 3ull * res * res * ch;
  const std::size_t decoder = static_cast<std::size_t>(hidden) * d_in + hidden +
                              static_cast<std::size_t>(kColorChannels + k + 1) * (hidden + 1);
  const std::size_t expect = 3 * (per_gaussian * n + planes + decoder) * sizeof(Real);
  if (n > r.remaining() || expect != r.remaining())
    throw DataError(origin + ": checkpoint payload does not match its shape header");

  GaussianSet<Real> gs(static_cast<int>(k), n);
  c.scene = make_scene<Real>(std::move(gs), static_cast<int>(res), static_cast<int>(ch), static_cast<int>(hidden), 0, mode);
  c.state = AdamState<Real>(c.scene);
  c.state.step = step;
  c.state.skipped = skipped;
  auto fill = [&](std::vector<Real>& v) { r.get_vector(v); };
  detail::for_each_tensor(c.scene.gaussians, c.scene.field, c.scene.decoder, fill);
  detail::for_each_tensor(c.state.m.gaussians, c.state.m.field, c.state.m.decoder, fill);
  detail::for_each_tensor(c.state.v.gaussians, c.state.v.field, c.state.v.decoder, fill);
  return c;
}

template <class Real>
void write_checkpoint(const std::filesystem::path& path, const Scene<Real>& scene, const AdamState<Real>& state,
                      std::uint64_t iteration, const TrainConfig& config) {
  write_file_bytes(path, save_checkpoint(scene, state, iteration, config));
}

template <class Real> Checkpoint<Real> read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return load_checkpoint<Real>(bytes, path.string());
}

}  // namespace slicegs
