#pragma once

// Volume and slice ingestion, train/test splits, semantic palettes, the
// synthetic phantom and 8-bit image export.
//
// On-disk volume: a raw little-endian payload plus a key = value descriptor:
//
//   format = slicegs-volume
//   data = volume.raw        (path relative to the descriptor)
//   dims = 64 64 64
//   dtype = u8               (u8 or f32)
//   spacing = 1 1 1
//   semantic = false
//
// Voxel (x, y, z) lives at index x + nx * (y + ny * z).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "slicegs/core.hpp"
#include "slicegs/image.hpp"

namespace slicegs {

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

enum class VoxelType : std::uint8_t { u8, f32 };

inline std::size_t voxel_bytes(VoxelType t) { return t == VoxelType::u8 ? 1 : 4; }

struct VolumeMeta {
  std::array<int, 3> dims{1, 1, 1};
  VoxelType dtype = VoxelType::f32;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  bool semantic_present = false;

  std::size_t voxel_count() const { return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]; }

  void validate() const {
    for (int d : dims)
      if (d < 1) throw DataError("volume dims must be >= 1");
    for (double s : spacing)
      if (!(s > 0.0)) throw DataError("volume spacing must be positive");
  }
};

/// Dense scalar volume; u8 payloads are normalized to [0, 1].
struct Volume {
  VolumeMeta meta;
  std::vector<float> data;

  int nx() const { return meta.dims[0]; }
  int ny() const { return meta.dims[1]; }
  int nz() const { return meta.dims[2]; }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) + static_cast<std::size_t>(nx()) * (y + static_cast<std::size_t>(ny()) * z);
  }
  float& at(int x, int y, int z) { return data[index(x, y, z)]; }
  float at(int x, int y, int z) const { return data[index(x, y, z)]; }
};

// ---------------------------------------------------------------------------
// Descriptor and payload

inline std::map<std::string, std::string> parse_key_values(std::istream& in, const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw DataError(origin + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline VolumeMeta parse_volume_meta(const std::map<std::string, std::string>& kv, const std::string& origin) {
  auto need = [&](const char* key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw DataError(origin + ": missing key '" + key + "'");
    return it->second;
  };
  VolumeMeta m;
  {
    std::istringstream s(need("dims"));
    if (!(s >> m.dims[0] >> m.dims[1] >> m.dims[2])) throw DataError(origin + ": malformed dims");
  }
  const std::string& dt = need("dtype");
  if (dt == "u8")
    m.dtype = VoxelType::u8;
  else if (dt == "f32")
    m.dtype = VoxelType::f32;
  else
    throw DataError(origin + ": unknown dtype '" + dt + "'");
  if (auto it = kv.find("spacing"); it != kv.end()) {
    std::istringstream s(it->second);
    if (!(s >> m.spacing[0] >> m.spacing[1] >> m.spacing[2])) throw DataError(origin + ": malformed spacing");
  }
  if (auto it = kv.find("semantic"); it != kv.end()) {
    if (it->second == "true")
      m.semantic_present = true;
    else if (it->second == "false")
      m.semantic_present = false;
    else
      throw DataError(origin + ": semantic must be true or false");
  }
  m.validate();
  return m;
}

/// Decodes a raw payload according to `meta`.
inline Volume decode_volume(std::span<const std::uint8_t> payload, const VolumeMeta& meta) {
  meta.validate();
  const std::size_t expected = meta.voxel_count() * voxel_bytes(meta.dtype);
  if (payload.size() != expected)
    throw DataError("volume payload has " + std::to_string(payload.size()) + " bytes, expected " +
                    std::to_string(expected));
  Volume v;
  v.meta = meta;
  v.data.resize(meta.voxel_count());
  if (meta.dtype == VoxelType::u8) {
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(payload[i]) / 255.0f;
  } else {
    std::memcpy(v.data.data(), payload.data(), expected);
  }
  return v;
}

/// Encodes to the payload layout of `v.meta.dtype`; u8 rounds [0, 1] to 0..255.
inline std::vector<std::uint8_t> encode_volume(const Volume& v) {
  std::vector<std::uint8_t> out(v.data.size() * voxel_bytes(v.meta.dtype));
  if (v.meta.dtype == VoxelType::u8) {
    for (std::size_t i = 0; i < v.data.size(); ++i)
      out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v.data[i], 0.0f, 1.0f) * 255.0f));
  } else {
    std::memcpy(out.data(), v.data.data(), out.size());
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for '" + p.string() + "'");
}

inline Volume read_volume(const std::filesystem::path& descriptor) {
  std::ifstream in(descriptor);
  if (!in) throw DataError("cannot open volume descriptor '" + descriptor.string() + "'");
  const auto kv = parse_key_values(in, descriptor.string());
  const VolumeMeta meta = parse_volume_meta(kv, descriptor.string());
  const auto it = kv.find("data");
  if (it == kv.end()) throw DataError(descriptor.string() + ": missing key 'data'");
  const auto payload = read_file_bytes(descriptor.parent_path() / it->second);
  return decode_volume(payload, meta);
}

/// Writes `<stem>.raw` and the `<stem>.vol` descriptor into `dir`.
inline std::filesystem::path write_volume(const Volume& v, const std::filesystem::path& dir, const std::string& stem) {
  const auto raw = dir / (stem + ".raw");
  const auto desc = dir / (stem + ".vol");
  write_file_bytes(raw, encode_volume(v));
  std::ofstream out(desc, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + desc.string() + "'");
  char spacing[96];
  std::snprintf(spacing, sizeof spacing, "%.17g %.17g %.17g", v.meta.spacing[0], v.meta.spacing[1], v.meta.spacing[2]);
  out << "format = slicegs-volume\n"
      << "data = " << stem << ".raw\n"
      << "dims = " << v.meta.dims[0] << ' ' << v.meta.dims[1] << ' ' << v.meta.dims[2] << '\n'
      << "dtype = " << (v.meta.dtype == VoxelType::u8 ? "u8" : "f32") << '\n'
      << "spacing = " << spacing << '\n'
      << "semantic = " << (v.meta.semantic_present ? "true" : "false") << '\n';
  if (!out) throw DataError("write failed for '" + desc.string() + "'");
  return desc;
}

// ---------------------------------------------------------------------------
// Semantic palette

struct PaletteEntry {
  std::string name;
  std::uint8_t gray = 0;
  std::array<std::uint8_t, 3> rgb{};
};

struct SemanticPalette {
  std::vector<PaletteEntry> entries;

  std::size_t size() const { return entries.size(); }

  void validate() const {
    if (entries.empty()) throw ValidationError("semantic palette is empty");
    std::set<int> grays;
    std::set<std::array<std::uint8_t, 3>> colors;
    for (const auto& e : entries) {
      if (!grays.insert(e.gray).second) throw DataError("palette grayscale values must be distinct");
      if (!colors.insert(e.rgb).second) throw DataError("palette RGB triples must be distinct");
    }
  }
};

/// Background plus three tissue classes.
inline SemanticPalette default_palette() {
  return {{{"background", 0, {0, 0, 0}},
           {"outer", 85, {230, 60, 40}},
           {"middle", 170, {40, 200, 70}},
           {"inner", 255, {50, 90, 240}}}};
}

/// Text format, one label per line: `name gray r g b`; '#' starts a comment.
inline SemanticPalette read_palette(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open palette '" + path.string() + "'");
  SemanticPalette p;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream s(line);
    PaletteEntry e;
    int g, r, gg, b;
    if (!(s >> e.name)) continue;
    if (!(s >> g >> r >> gg >> b) || g < 0 || g > 255 || r < 0 || r > 255 || gg < 0 || gg > 255 || b < 0 || b > 255)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 'name gray r g b' with 0..255 values");
    e.gray = static_cast<std::uint8_t>(g);
    e.rgb = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(gg), static_cast<std::uint8_t>(b)};
    p.entries.push_back(e);
  }
  p.validate();
  return p;
}

inline void write_palette(const SemanticPalette& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "# name gray r g b\n";
  for (const auto& e : p.entries)
    out << e.name << ' ' << int(e.gray) << ' ' << int(e.rgb[0]) << ' ' << int(e.rgb[1]) << ' ' << int(e.rgb[2]) << '\n';
}

/// Maps a grayscale label image (values gray/255) to RGB in [0, 1]. Every
/// value must match a palette entry exactly.
inline Image<float> semantic_to_rgb(const Image<float>& gray, const SemanticPalette& palette) {
  palette.validate();
  if (gray.shape.channels != 1) throw ValidationError("semantic_to_rgb expects a single-channel image");
  std::array<int, 256> lut;
  lut.fill(-1);
  for (std::size_t i = 0; i < palette.size(); ++i) lut[palette.entries[i].gray] = static_cast<int>(i);
  Image<float> out(gray.shape.height, gray.shape.width, 3);
  std::set<float> unmatched;
  for (std::size_t p = 0; p < gray.shape.pixels(); ++p) {
    const float v = gray.data[p];
    const float scaled = v * 255.0f;
    const long g = std::lround(scaled);
    if (g < 0 || g > 255 || std::abs(scaled - static_cast<float>(g)) > 1e-3f || lut[g] < 0) {
      if (unmatched.size() < 16) unmatched.insert(v);
      continue;
    }
    const auto& e = palette.entries[lut[g]];
    for (int c = 0; c < 3; ++c) out.data[p * 3 + c] = e.rgb[c] / 255.0f;
  }
  if (!unmatched.empty()) {
    std::string msg = "semantic values with no palette entry:";
    for (float v : unmatched) msg += " " + std::to_string(static_cast<int>(std::lround(v * 255.0f))) + "/255";
    throw DataError(msg);
  }
  return out;
}

/// Nearest palette color (Euclidean, in [0, 1] RGB); ties go to the lower label index.
template <class T> int nearest_label(std::span<const T> rgb, const SemanticPalette& palette) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < palette.size(); ++i) {
    double d = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double diff = static_cast<double>(rgb[c]) - palette.entries[i].rgb[c] / 255.0;
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

template <class T> Image<int> rgb_to_label(std::span<const T> rgb, const ImageShape& shape, const SemanticPalette& palette) {
  palette.validate();
  if (shape.channels != 3 || rgb.size() != shape.size()) throw ValidationError("rgb_to_label expects an RGB image");
  Image<int> out(shape.height, shape.width, 1);
  for (std::size_t p = 0; p < shape.pixels(); ++p) out.data[p] = nearest_label(rgb.subspan(p * 3, 3), palette);
  return out;
}

/// Label index image from grayscale semantic values.
inline Image<int> gray_to_label(const Image<float>& gray, const SemanticPalette& palette) {
  const auto rgb = semantic_to_rgb(gray, palette);
  return rgb_to_label<float>(rgb.data, rgb.shape, palette);
}

// ---------------------------------------------------------------------------
// Slice stacks

enum class SplitLabel : std::uint8_t { train, test };

struct Slice {
  int index = 0;
  double depth = 0.0;  // (index + 0.5) / n_axis
  Image<float> intensity;               // H x W x 1
  std::optional<Image<float>> semantic;  // H x W x 3, RGB in [0, 1]
  SplitLabel split = SplitLabel::train;
};

struct SliceStack {
  Axis axis = Axis::z;
  int width = 0, height = 0;
  std::array<int, 3> volume_dims{0, 0, 0};
  std::vector<Slice> slices;

  bool has_semantic() const { return !slices.empty() && slices.front().semantic.has_value(); }

  std::vector<std::size_t> indices(SplitLabel which) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < slices.size(); ++i)
      if (slices[i].split == which) out.push_back(i);
    return out;
  }
};

/// One slice per index along `axis`; pixel (row, col) reads the voxel at
/// (u, v) = (col, row) on the plane's in-plane axes. When `labels` is given it
/// must be a grayscale label volume matched through `palette`.
inline SliceStack extract_slices(const Volume& volume, Axis axis, const Volume* labels = nullptr,
                                 const SemanticPalette* palette = nullptr) {
  if (labels && (labels->meta.dims != volume.meta.dims))
    throw DataError("semantic volume dims do not match the intensity volume");
  if (labels && !palette) throw ValidationError("a semantic volume needs a palette");
  const PlaneAxes ax = plane_axes(axis);
  const auto& dims = volume.meta.dims;
  SliceStack st;
  st.axis = axis;
  st.width = dims[ax.u];
  st.height = dims[ax.v];
  st.volume_dims = dims;
  const int n = dims[ax.n];
  st.slices.resize(n);
  for (int k = 0; k < n; ++k) {
    Slice& s = st.slices[k];
    s.index = k;
    s.depth = (k + 0.5) / n;
    s.intensity = Image<float>(st.height, st.width, 1);
    Image<float> gray;
    if (labels) gray = Image<float>(st.height, st.width, 1);
    for (int row = 0; row < st.height; ++row)
      for (int col = 0; col < st.width; ++col) {
        std::array<int, 3> c{};
        c[ax.u] = col;
        c[ax.v] = row;
        c[ax.n] = k;
        s.intensity.at(row, col) = volume.at(c[0], c[1], c[2]);
        if (labels) gray.at(row, col) = labels->at(c[0], c[1], c[2]);
      }
    if (labels) s.semantic = semantic_to_rgb(gray, *palette);
  }
  return st;
}

/// Inverse of extract_slices for the intensity channel.
inline Volume restack(const SliceStack& st) {
  Volume v;
  v.meta.dims = st.volume_dims;
  v.meta.dtype = VoxelType::f32;
  v.data.assign(v.meta.voxel_count(), 0.0f);
  const PlaneAxes ax = plane_axes(st.axis);
  for (const auto& s : st.slices)
    for (int row = 0; row < st.height; ++row)
      for (int col = 0; col < st.width; ++col) {
        std::array<int, 3> c{};
        c[ax.u] = col;
        c[ax.v] = row;
        c[ax.n] = s.index;
        v.at(c[0], c[1], c[2]) = s.intensity.at(row, col);
      }
  return v;
}

/// Evenly spaced training indices round(k (n-1) / (m-1)), m = round(f n),
/// k = 0..m-1, deduplicated and sorted.
inline std::vector<int> split_train_indices(int n, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("split fraction must lie in (0, 1)");
  const long m = std::lround(fraction * n);
  if (m < 2) throw ValidationError("split fraction selects fewer than 2 training slices");
  std::vector<int> idx;
  idx.reserve(m);
  for (long k = 0; k < m; ++k) {
    // round-half-up of k (n-1) / (m-1) in exact integer arithmetic
    const long num = 2 * k * (n - 1) + (m - 1);
    idx.push_back(static_cast<int>(num / (2 * (m - 1))));
  }
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

inline void make_split(SliceStack& st, double fraction) {
  const auto train = split_train_indices(static_cast<int>(st.slices.size()), fraction);
  for (auto& s : st.slices) s.split = SplitLabel::test;
  for (int i : train) st.slices[i].split = SplitLabel::train;
}

// ---------------------------------------------------------------------------
// Phantom

struct Phantom {
  Volume intensity;
  Volume labels;  // grayscale label values (palette gray / 255)
  SemanticPalette palette;
};

inline constexpr std::array<float, 4> kPhantomIntensities = {0.0f, 0.35f, 0.65f, 0.9f};

namespace detail {

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;
  double angle;  // rotation about z

  bool contains(double x, double y, double z) const {
    const double dx = x - center[0], dy = y - center[1], dz = z - center[2];
    const double c = std::cos(angle), s = std::sin(angle);
    const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
    const double q = (lx * lx) / (radii[0] * radii[0]) + (ly * ly) / (radii[1] * radii[1]) +
                     (dz * dz) / (radii[2] * radii[2]);
    return q <= 1.0;
  }
};

/// Separable Gaussian blur (sigma in voxels), edge-clamped.
inline std::vector<float> blur3(const std::vector<float>& in, const std::array<int, 3>& dims, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& w : k) w /= sum;
  std::vector<float> cur = in, next(in.size());
  const std::array<std::size_t, 3> stride{1, static_cast<std::size_t>(dims[0]),
                                          static_cast<std::size_t>(dims[0]) * dims[1]};
  for (int axis = 0; axis < 3; ++axis) {
    for (int z = 0; z < dims[2]; ++z)
      for (int y = 0; y < dims[1]; ++y)
        for (int x = 0; x < dims[0]; ++x) {
          const std::array<int, 3> c{x, y, z};
          const std::size_t base = x + stride[1] * y + stride[2] * z;
          double acc = 0;
          for (int o = -radius; o <= radius; ++o) {
            const int p = std::clamp(c[axis] + o, 0, dims[axis] - 1);
            acc += k[o + radius] * cur[base + (static_cast<std::ptrdiff_t>(p) - c[axis]) * static_cast<std::ptrdiff_t>(stride[axis])];
          }
          next[base] = static_cast<float>(acc);
        }
    std::swap(cur, next);
  }
  return cur;
}

}  // namespace detail

/// Nested ellipsoids (background + 3 tissue classes) with seeded jitter.
/// The outer shell spans the full z extent. Intensity gets a 1-voxel Gaussian
/// blur; labels stay sharp.
inline Phantom generate_phantom(std::uint64_t seed, std::array<int, 3> dims) {
  for (int d : dims)
    if (d < 32) throw ValidationError("phantom dims must be >= 32 per axis");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  auto j = [&](double amp) { return amp * jitter(rng); };

  // elongated along z and truncated by the volume, so every axial slice holds tissue
  const std::array<double, 3> outer_r{0.36 * (1 + j(0.06)), 0.30 * (1 + j(0.06)), 0.56 * (1 + j(0.03))};
  const double angle = j(0.35);
  detail::Ellipsoid outer{{0.5 + j(0.02), 0.5 + j(0.02), 0.5 + j(0.02)}, outer_r, angle};
  detail::Ellipsoid middle{{outer.center[0] + j(0.02), outer.center[1] + j(0.02), outer.center[2] + j(0.02)},
                           {outer_r[0] * 0.62, outer_r[1] * 0.66, outer_r[2] * 0.6},
                           angle + j(0.3)};
  detail::Ellipsoid inner{{0.5 + j(0.015), 0.5 + j(0.015), 0.5 + j(0.015)},
                          {outer_r[0] * 0.33, outer_r[1] * 0.36, outer_r[2] * 0.32},
                          angle + j(0.5)};

  Phantom ph;
  ph.palette = default_palette();
  VolumeMeta meta;
  meta.dims = dims;
  meta.dtype = VoxelType::f32;
  ph.intensity.meta = meta;
  ph.labels.meta = meta;
  ph.labels.meta.dtype = VoxelType::u8;
  ph.labels.meta.semantic_present = true;
  const std::size_t n = meta.voxel_count();
  ph.intensity.data.resize(n);
  ph.labels.data.resize(n);
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const double px = (x + 0.5) / dims[0], py = (y + 0.5) / dims[1], pz = (z + 0.5) / dims[2];
        int cls = 0;
        if (inner.contains(px, py, pz))
          cls = 3;
        else if (middle.contains(px, py, pz))
          cls = 2;
        else if (outer.contains(px, py, pz))
          cls = 1;
        const std::size_t i = ph.intensity.index(x, y, z);
        ph.intensity.data[i] = kPhantomIntensities[cls];
        ph.labels.data[i] = ph.palette.entries[cls].gray / 255.0f;
      }
  ph.intensity.data = detail::blur3(ph.intensity.data, dims, 1.0);
  return ph;
}

// ---------------------------------------------------------------------------
// 8-bit PGM / PPM images

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

/// Writes a 1-channel image as binary PGM or a 3-channel image as binary PPM.
template <class T> void write_pnm(const std::filesystem::path& path, std::span<const T> data, const ImageShape& shape) {
  if (shape.channels != 1 && shape.channels != 3) throw ValidationError("PNM export needs 1 or 3 channels");
  if (data.size() != shape.size()) throw ValidationError("image data does not match its shape");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << (shape.channels == 1 ? "P5" : "P6") << '\n' << shape.width << ' ' << shape.height << "\n255\n";
  std::vector<char> bytes(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) bytes[i] = static_cast<char>(to_u8(static_cast<double>(data[i])));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

inline Image<float> read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic;
  auto next_int = [&](int& v) {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    in >> v;
  };
  next_int(w);
  next_int(h);
  next_int(maxval);
  if (!in || (magic != "P5" && magic != "P6") || w < 1 || h < 1 || maxval != 255)
    throw DataError("'" + path.string() + "' is not an 8-bit binary PGM/PPM");
  in.get();
  const int ch = magic == "P5" ? 1 : 3;
  Image<float> img(h, w, ch);
  std::vector<unsigned char> bytes(img.data.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw DataError("'" + path.string() + "' is truncated");
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0f;
  return img;
}

inline std::string slice_filename(const char* prefix, int index, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d.%s", prefix, index, ext);
  return buf;
}

/// Writes slice_NNNN.pgm (and semantic_NNNN.ppm when present) into `dir`.
inline void export_slice_images(const SliceStack& st, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& s : st.slices) {
    write_pnm<float>(dir / slice_filename("slice", s.index, "pgm"), s.intensity.data, s.intensity.shape);
    if (s.semantic) write_pnm<float>(dir / slice_filename("semantic", s.index, "ppm"), s.semantic->data, s.semantic->shape);
  }
}

/// Reads a directory written by export_slice_images. Slice indices must be
/// contiguous from zero.
inline SliceStack import_slice_images(const std::filesystem::path& dir, Axis axis) {
  SliceStack st;
  st.axis = axis;
  for (int k = 0;; ++k) {
    const auto p = dir / slice_filename("slice", k, "pgm");
    if (!std::filesystem::exists(p)) break;
    Slice s;
    s.index = k;
    s.intensity = read_pnm(p);
    if (s.intensity.shape.channels != 1) throw DataError("'" + p.string() + "' must be grayscale");
    const auto sp = dir / slice_filename("semantic", k, "ppm");
    if (std::filesystem::exists(sp)) s.semantic = read_pnm(sp);
    if (k == 0) {
      st.width = s.intensity.shape.width;
      st.height = s.intensity.shape.height;
    } else if (s.intensity.shape.width != st.width || s.intensity.shape.height != st.height) {
      throw DataError("slice images in '" + dir.string() + "' differ in size");
    }
    st.slices.push_back(std::move(s));
  }
  if (st.slices.empty()) throw DataError("no slice_0000.pgm in '" + dir.string() + "'");
  const int n = static_cast<int>(st.slices.size());
  for (auto& s : st.slices) s.depth = (s.index + 0.5) / n;
  const PlaneAxes ax = plane_axes(axis);
  st.volume_dims[ax.u] = st.width;
  st.volume_dims[ax.v] = st.height;
  st.volume_dims[ax.n] = n;
  return st;
}

}  // namespace slicegs
