#pragma once

// Text form of TrainConfig: one "key = value" per line, comments with '#'.
// Used by config files on the command line and embedded in checkpoints.

#include <charconv>
#include <map>
#include <sstream>
#include <string>
#include <system_error>

#include "slicegs/optimizer.hpp"

namespace slicegs {

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ValidationError("config: '" + key + "' expects a number, got '" + s + "'");
  return v;
}

inline long long parse_integer(const std::string& key, const std::string& s) {
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ValidationError("config: '" + key + "' expects an integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw ValidationError("config: '" + key + "' expects a boolean, got '" + s + "'");
}

}  // namespace detail

inline std::map<std::string, std::string> config_to_map(const TrainConfig& c) {
  using detail::format_double;
  std::map<std::string, std::string> m;
  m["iterations"] = std::to_string(c.iterations);
  for (ParamGroup g : kParamGroups) m[std::string("lr_") + group_name(g)] = format_double(c.lr(g));
  m["ssim_weight"] = format_double(c.ssim_weight);
  m["semantic_weight"] = format_double(c.semantic_weight);
  m["prune_interval"] = std::to_string(c.prune_interval);
  m["prune_alpha_threshold"] = format_double(c.prune_alpha_threshold);
  m["densify_interval"] = std::to_string(c.densify_interval);
  m["densify_grad_threshold"] = format_double(c.densify_grad_threshold);
  m["max_gaussians"] = std::to_string(c.max_gaussians);
  m["min_gaussians"] = std::to_string(c.min_gaussians);
  m["seed"] = std::to_string(c.seed);
  m["init_gaussians"] = std::to_string(c.init_gaussians);
  m["init_intensity_threshold"] = format_double(c.init_intensity_threshold);
  m["init_opacity"] = format_double(c.init_opacity);
  m["plane_resolution"] = std::to_string(c.plane_resolution);
  m["plane_channels"] = std::to_string(c.plane_channels);
  m["decoder_hidden"] = std::to_string(c.decoder_hidden);
  m["fuse_mode"] = c.fuse_mode == FuseMode::concat ? "concat" : "sum";
  m["semantic_dim"] = std::to_string(c.semantic_dim);
  m["k_sigma"] = format_double(c.k_sigma);
  m["tile_size"] = std::to_string(c.tile_size);
  m["threads"] = std::to_string(c.threads);
  m["deterministic"] = c.deterministic ? "true" : "false";
  m["eval_interval"] = std::to_string(c.eval_interval);
  return m;
}

/// Applies recognised keys to `c`; returns the keys it did not recognise.
inline std::map<std::string, std::string> apply_config(TrainConfig& c, const std::map<std::string, std::string>& kv) {
  using namespace detail;
  std::map<std::string, std::string> rest;
  for (const auto& [k, v] : kv) {
    bool matched = false;
    for (ParamGroup g : kParamGroups)
      if (k == std::string("lr_") + group_name(g)) {
        c.lr(g) = parse_double(k, v);
        matched = true;
      }
    if (matched) continue;
    if (k == "iterations") c.iterations = static_cast<int>(parse_integer(k, v));
    else if (k == "ssim_weight") c.ssim_weight = parse_double(k, v);
    else if (k == "semantic_weight") c.semantic_weight = parse_double(k, v);
    else if (k == "prune_interval") c.prune_interval = static_cast<int>(parse_integer(k, v));
    else if (k == "prune_alpha_threshold") c.prune_alpha_threshold = parse_double(k, v);
    else if (k == "densify_interval") c.densify_interval = static_cast<int>(parse_integer(k, v));
    else if (k == "densify_grad_threshold") c.densify_grad_threshold = parse_double(k, v);
    else if (k == "max_gaussians") c.max_gaussians = static_cast<int>(parse_integer(k, v));
    else if (k == "min_gaussians") c.min_gaussians = static_cast<int>(parse_integer(k, v));
    else if (k == "seed") c.seed = static_cast<std::uint64_t>(parse_integer(k, v));
    else if (k == "init_gaussians") c.init_gaussians = static_cast<int>(parse_integer(k, v));
    else if (k == "init_intensity_threshold") c.init_intensity_threshold = parse_double(k, v);
    else if (k == "init_opacity") c.init_opacity = parse_double(k, v);
    else if (k == "plane_resolution") c.plane_resolution = static_cast<int>(parse_integer(k, v));
    else if (k == "plane_channels") c.plane_channels = static_cast<int>(parse_integer(k, v));
    else if (k == "decoder_hidden") c.decoder_hidden = static_cast<int>(parse_integer(k, v));
    else if (k == "fuse_mode") {
      if (v == "concat") c.fuse_mode = FuseMode::concat;
      else if (v == "sum") c.fuse_mode = FuseMode::sum;
      else throw ValidationError("config: fuse_mode must be concat or sum, got '" + v + "'");
    } else if (k == "semantic_dim") c.semantic_dim = static_cast<int>(parse_integer(k, v));
    else if (k == "k_sigma") c.k_sigma = parse_double(k, v);
    else if (k == "tile_size") c.tile_size = static_cast<int>(parse_integer(k, v));
    else if (k == "threads") c.threads = static_cast<int>(parse_integer(k, v));
    else if (k == "deterministic") c.deterministic = parse_bool(k, v);
    else if (k == "eval_interval") c.eval_interval = static_cast<int>(parse_integer(k, v));
    else rest[k] = v;
  }
  return rest;
}

inline std::string config_to_text(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_to_map(c)) out += k + " = " + v + "\n";
  return out;
}

inline TrainConfig config_from_text(const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  TrainConfig c;
  const auto rest = apply_config(c, parse_key_values(in, origin));
  if (!rest.empty()) throw ValidationError(origin + ": unknown key '" + rest.begin()->first + "'");
  return c;
}

}  // namespace slicegs
