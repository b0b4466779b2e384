// slicegs: phantom generation, training, rendering, evaluation, gradient
// checking and slice export from the command line.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "slicegs/checkpoint.hpp"
#include "slicegs/config.hpp"
#include "slicegs/dataio.hpp"
#include "slicegs/optimizer.hpp"
#include "slicegs/rasterizer.hpp"

namespace fs = std::filesystem;
using namespace slicegs;
using Real = float;

namespace {

struct Shared {
  std::string axis = "z";
  double fraction = 0.5;
  std::uint64_t seed = 0;
  int threads = 1;
  bool deterministic = true;
  std::string out = ".";
  std::string config;
};

struct DatasetArgs {
  std::string volume;
  std::string labels;
  std::string palette;
  std::string slices;
};

void add_shared(CLI::App* cmd, Shared& s) {
  cmd->add_option("--axis", s.axis, "slice axis: x, y or z");
  cmd->add_option("--fraction", s.fraction, "fraction of slices used for training, in (0, 1)");
  cmd->add_option("--seed", s.seed, "random seed");
  cmd->add_option("--threads", s.threads, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--deterministic,!--nondeterministic", s.deterministic,
                "fixed-order gradient reduction (default on)");
  cmd->add_option("--out", s.out, "output directory");
}

void add_dataset(CLI::App* cmd, DatasetArgs& d) {
  cmd->add_option("--volume", d.volume, "intensity volume descriptor (.vol)");
  cmd->add_option("--labels", d.labels, "grayscale label volume descriptor (.vol)");
  cmd->add_option("--palette", d.palette, "semantic palette (defaults to the phantom palette)");
  cmd->add_option("--slices", d.slices, "directory of exported slice images instead of a volume");
}

bool given(const CLI::App* cmd, const char* flag) { return cmd->count(flag) > 0; }

void check_fraction(double f) {
  if (!(f > 0.0 && f < 1.0)) throw ValidationError("--fraction must lie in (0, 1), got " + std::to_string(f));
}

/// Config file values first, then explicitly given flags on top.
TrainConfig resolve_config(const CLI::App* cmd, Shared& s, DatasetArgs* d) {
  TrainConfig cfg;
  if (!s.config.empty()) {
    std::ifstream in(s.config);
    if (!in) throw DataError("cannot open config '" + s.config + "'");
    auto rest = apply_config(cfg, parse_key_values(in, s.config));
    auto take = [&](const char* key, const char* flag, auto&& assign) {
      const auto it = rest.find(key);
      if (it == rest.end()) return;
      if (!given(cmd, flag)) assign(it->second);
      rest.erase(it);
    };
    take("axis", "--axis", [&](const std::string& v) { s.axis = v; });
    take("fraction", "--fraction", [&](const std::string& v) { s.fraction = detail::parse_double("fraction", v); });
    take("out", "--out", [&](const std::string& v) { s.out = v; });
    if (d) {
      take("volume", "--volume", [&](const std::string& v) { d->volume = v; });
      take("labels", "--labels", [&](const std::string& v) { d->labels = v; });
      take("palette", "--palette", [&](const std::string& v) { d->palette = v; });
      take("slices", "--slices", [&](const std::string& v) { d->slices = v; });
    }
    if (!rest.empty()) throw ValidationError(s.config + ": unknown key '" + rest.begin()->first + "'");
    if (!given(cmd, "--seed")) s.seed = cfg.seed;
    if (!given(cmd, "--threads")) s.threads = cfg.threads;
    if (!given(cmd, "--deterministic")) s.deterministic = cfg.deterministic;
  }
  cfg.seed = s.seed;
  cfg.threads = s.threads;
  cfg.deterministic = s.deterministic;
  return cfg;
}

struct Dataset {
  SliceStack stack;
  std::optional<SemanticPalette> palette;
};

Dataset load_dataset(const DatasetArgs& d, Axis axis) {
  Dataset ds;
  if (!d.palette.empty())
    ds.palette = read_palette(d.palette);
  else if (!d.labels.empty() || !d.slices.empty())
    ds.palette = default_palette();
  if (!d.slices.empty()) {
    if (!d.volume.empty()) throw ValidationError("give either --volume or --slices, not both");
    ds.stack = import_slice_images(d.slices, axis);
    return ds;
  }
  if (d.volume.empty()) throw ValidationError("a dataset is required: --volume or --slices");
  const Volume vol = read_volume(d.volume);
  std::optional<Volume> labels;
  if (!d.labels.empty()) labels = read_volume(d.labels);
  ds.stack = extract_slices(vol, axis, labels ? &*labels : nullptr, labels ? &*ds.palette : nullptr);
  return ds;
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw DataError("cannot create output directory '" + p.string() + "'");
}

/// Ground truth on the left, render on the right.
std::vector<float> side_by_side(std::span<const float> left, std::span<const float> right, int h, int w, int ch) {
  std::vector<float> out(static_cast<std::size_t>(h) * 2 * w * ch);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int k = 0; k < ch; ++k) {
        out[(static_cast<std::size_t>(r) * 2 * w + c) * ch + k] = left[(static_cast<std::size_t>(r) * w + c) * ch + k];
        out[(static_cast<std::size_t>(r) * 2 * w + w + c) * ch + k] = right[(static_cast<std::size_t>(r) * w + c) * ch + k];
      }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_phantom(const Shared& s, const std::vector<int>& dims_arg) {
  std::array<int, 3> dims{};
  if (dims_arg.size() == 1)
    dims = {dims_arg[0], dims_arg[0], dims_arg[0]};
  else if (dims_arg.size() == 3)
    dims = {dims_arg[0], dims_arg[1], dims_arg[2]};
  else
    throw ValidationError("--dims takes one or three values");
  const Phantom ph = generate_phantom(s.seed, dims);
  ensure_dir(s.out);
  write_volume(ph.intensity, s.out, "phantom");
  write_volume(ph.labels, s.out, "labels");
  write_palette(ph.palette, fs::path(s.out) / "palette.txt");
  std::printf("phantom %dx%dx%d written to %s\n", dims[0], dims[1], dims[2], s.out.c_str());
  return 0;
}

int cmd_train(const CLI::App* cmd, Shared& s, DatasetArgs& d, std::optional<int> iterations, bool renders) {
  TrainConfig cfg = resolve_config(cmd, s, &d);
  if (iterations) cfg.iterations = *iterations;
  check_fraction(s.fraction);
  cfg.validate();
  const Axis axis = parse_axis(s.axis);

  Dataset ds = load_dataset(d, axis);
  make_split(ds.stack, s.fraction);
  ensure_dir(s.out);
  const fs::path out(s.out);
  const bool sem = ds.stack.has_semantic();

  std::ofstream csv(out / "metrics.csv", std::ios::trunc);
  if (!csv) throw DataError("cannot write '" + (out / "metrics.csv").string() + "'");
  csv << "iteration,l1,ssim_term,semantic_mse,total,N,heldout_psnr,heldout_ssim\n";

  Trainer<Real> trainer(ds.stack, cfg, ds.palette ? &*ds.palette : nullptr);
  trainer.on_row = [&](const TrainLogRow& r) {
    csv << r.iteration << ',' << fmt(r.loss.l1) << ',' << fmt(r.loss.ssim_term) << ','
        << (sem ? fmt(r.loss.semantic_mse) : std::string()) << ',' << fmt(r.loss.total) << ',' << r.gaussians << ','
        << fmt(r.heldout_psnr) << ',' << fmt(r.heldout_ssim) << '\n';
    if (r.heldout_psnr)
      std::printf("iteration %d  loss %.5f  N %zu  held-out PSNR %.2f dB  SSIM %.4f\n", r.iteration, r.loss.total,
                  r.gaussians, *r.heldout_psnr, *r.heldout_ssim);
  };
  trainer.on_failure = [&](const Trainer<Real>& t) {
    std::ofstream dump(out / "failure_state.txt", std::ios::trunc);
    dump << "iteration = " << t.iteration() << "\nN = " << t.scene().gaussians.size() << '\n';
    for (GaussianField f : kGaussianFields) {
      std::size_t bad = 0;
      for (Real v : t.scene().gaussians.data(f)) bad += !std::isfinite(v);
      dump << "nonfinite_" << field_name(f) << " = " << bad << '\n';
    }
    dump << "nonfinite_texels = " << (t.scene().field.all_finite() ? 0 : 1) << '\n';
    dump << "nonfinite_decoder = " << (t.scene().decoder.all_finite() ? 0 : 1) << '\n';
    dump << "adam_step = " << t.state().step << "\nadam_skipped = " << t.state().skipped << '\n';
    for (const auto& r : t.log()) dump << "loss[" << r.iteration << "] = " << fmt(r.loss.total) << '\n';
    dump << config_to_text(t.config());
  };
  trainer.run();
  csv.close();

  write_checkpoint(out / "checkpoint.bin", trainer.scene(), trainer.state(), trainer.iteration(), trainer.config());
  {
    std::ofstream c(out / "config.txt", std::ios::trunc);
    c << config_to_text(trainer.config()) << "axis = " << axis_name(axis) << "\nfraction = " << fmt(s.fraction) << '\n';
  }

  if (renders) {
    const fs::path dir = out / "renders";
    ensure_dir(dir);
    const int h = ds.stack.height, w = ds.stack.width;
    for (std::size_t si : ds.stack.indices(SplitLabel::test)) {
      const Slice& sl = ds.stack.slices[si];
      const auto r = render_slice(trainer.scene(), slice_spec<Real>(ds.stack, sl, cfg.k_sigma), cfg.render_options());
      const auto gt = replicate_gray(sl.intensity);
      write_pnm<float>(dir / slice_filename("heldout", sl.index, "ppm"), side_by_side(gt, r.intensity, h, w, 3),
                       {h, 2 * w, 3});
      if (sl.semantic && r.semantic_dim == 3)
        write_pnm<float>(dir / slice_filename("heldout_semantic", sl.index, "ppm"),
                         side_by_side(sl.semantic->data, r.semantic, h, w, 3), {h, 2 * w, 3});
    }
  }
  std::printf("trained %d iterations, N = %zu, checkpoint %s\n", trainer.iteration(), trainer.scene().gaussians.size(),
              (out / "checkpoint.bin").string().c_str());
  return 0;
}

struct RenderArgs {
  std::string checkpoint;
  std::vector<double> depths;
  int count = 0;
  int first = 0;
  int last = -1;
  int width = 64, height = 64;
  bool raw = false;
};

int cmd_render(const CLI::App* cmd, Shared& s, const RenderArgs& a) {
  TrainConfig run = resolve_config(cmd, s, nullptr);
  const Axis axis = parse_axis(s.axis);
  if (a.width < 1 || a.height < 1) throw ValidationError("--width and --height must be >= 1");
  std::vector<double> depths = a.depths;
  if (a.count > 0) {
    const int last = a.last < 0 ? a.count - 1 : a.last;
    if (a.first < 0 || last >= a.count || a.first > last) throw ValidationError("slice index range is outside --count");
    for (int k = a.first; k <= last; ++k) depths.push_back((k + 0.5) / a.count);
  }
  if (depths.empty()) throw ValidationError("nothing to render: give --depth or --count");
  for (double t : depths)
    if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("depth " + fmt(t) + " is outside [0, 1]");

  const auto ck = read_checkpoint<Real>(a.checkpoint);
  RenderOptions opt = ck.config.render_options();
  opt.threads = run.threads;
  opt.deterministic = run.deterministic;
  ensure_dir(s.out);
  const fs::path out(s.out);
  std::ofstream manifest(out / "renders.csv", std::ios::trunc);
  manifest << "file,axis,depth\n";
  for (std::size_t i = 0; i < depths.size(); ++i) {
    SlicePlaneSpec spec;
    spec.axis = axis;
    spec.depth = depths[i];
    spec.width = a.width;
    spec.height = a.height;
    spec.k_sigma = ck.config.k_sigma;
    const auto r = render_slice(ck.scene, spec, opt);
    const int idx = static_cast<int>(i);
    const auto name = slice_filename("render", idx, "ppm");
    write_pnm<Real>(out / name, r.intensity, {a.height, a.width, 3});
    if (r.semantic_dim == 3 || r.semantic_dim == 1)
      write_pnm<Real>(out / slice_filename("render_semantic", idx, r.semantic_dim == 3 ? "ppm" : "pgm"), r.semantic,
                      {a.height, a.width, r.semantic_dim});
    if (a.raw) {
      const auto* bytes = reinterpret_cast<const std::uint8_t*>(r.intensity.data());
      write_file_bytes(out / slice_filename("render", idx, "f32"), {bytes, r.intensity.size() * sizeof(Real)});
      const auto* sbytes = reinterpret_cast<const std::uint8_t*>(r.semantic.data());
      write_file_bytes(out / slice_filename("render_semantic", idx, "f32"), {sbytes, r.semantic.size() * sizeof(Real)});
    }
    manifest << name << ',' << axis_name(axis) << ',' << fmt(depths[i]) << '\n';
  }
  std::printf("rendered %zu slices into %s\n", depths.size(), s.out.c_str());
  return 0;
}

int cmd_eval(const CLI::App* cmd, Shared& s, DatasetArgs& d, const std::string& checkpoint, const std::string& split) {
  resolve_config(cmd, s, &d);
  const Axis axis = parse_axis(s.axis);
  if (split != "test" && split != "train" && split != "all")
    throw ValidationError("--split must be test, train or all");
  if (split != "all") check_fraction(s.fraction);
  const auto ck = read_checkpoint<Real>(checkpoint);
  Dataset ds = load_dataset(d, axis);
  if (split == "all")
    for (auto& sl : ds.stack.slices) sl.split = SplitLabel::test;
  else
    make_split(ds.stack, s.fraction);
  if (ds.stack.has_semantic() && ck.scene.semantic_dim() != 3)
    throw ValidationError("incompatible checkpoint: semantic width " + std::to_string(ck.scene.semantic_dim()) +
                          " cannot be compared with RGB semantic slices");
  RenderOptions opt = ck.config.render_options();
  opt.threads = s.threads;
  opt.deterministic = s.deterministic;
  const MetricReport rep = evaluate_split(ck.scene, ds.stack, split == "train" ? SplitLabel::train : SplitLabel::test,
                                          ck.config.k_sigma, opt, ds.palette ? &*ds.palette : nullptr);

  ensure_dir(s.out);
  const fs::path path = fs::path(s.out) / "eval.csv";
  std::ofstream csv(path, std::ios::trunc);
  if (!csv) throw DataError("cannot write '" + path.string() + "'");
  csv << "row,slice,depth,psnr,ssim,semantic_mse,label_accuracy\n";
  for (const auto& m : rep.slices)
    csv << "slice," << m.slice_index << ',' << fmt(m.depth) << ',' << fmt(m.psnr) << ',' << fmt(m.ssim) << ','
        << fmt(m.semantic_mse) << ',' << fmt(m.label_accuracy) << '\n';
  auto opt_field = [](const std::optional<Summary>& x, auto get) { return x ? fmt(get(*x)) : std::string(); };
  csv << "mean,,," << fmt(rep.psnr.mean) << ',' << fmt(rep.ssim.mean) << ','
      << opt_field(rep.semantic_mse, [](const Summary& v) { return v.mean; }) << ','
      << opt_field(rep.label_accuracy, [](const Summary& v) { return v.mean; }) << '\n';
  csv << "std,,," << fmt(rep.psnr.stddev) << ',' << fmt(rep.ssim.stddev) << ','
      << opt_field(rep.semantic_mse, [](const Summary& v) { return v.stddev; }) << ','
      << opt_field(rep.label_accuracy, [](const Summary& v) { return v.stddev; }) << '\n';
  csv << "count,,," << rep.psnr.count << ',' << rep.ssim.count << ','
      << (rep.semantic_mse ? std::to_string(rep.semantic_mse->count) : std::string()) << ','
      << (rep.label_accuracy ? std::to_string(rep.label_accuracy->count) : std::string()) << '\n';
  csv << "infinite_psnr,,," << rep.infinite_psnr << ",,,\n";
  std::printf("%zu slices: PSNR %s dB (%zu infinite), SSIM %s\n", rep.slices.size(), fmt(rep.psnr.mean).c_str(),
              rep.infinite_psnr, fmt(rep.ssim.mean).c_str());
  return 0;
}

int cmd_gradcheck(const Shared& s, double step, bool corrupt) {
  auto [scene, spec] = gradcheck_fixture(s.seed == 0 ? 7 : s.seed);
  GradCheckOptions opt = gradcheck_fixture_options();
  opt.step = step;
  opt.corrupt_analytic = corrupt;
  opt.render.threads = s.threads;
  opt.render.deterministic = s.deterministic;
  const auto rep = grad_check(scene, spec, opt);
  std::printf("%-10s %8s %14s\n", "group", "params", "max_rel_err");
  for (const auto& g : rep.groups)
    std::printf("%-10s %8zu %14.3e\n", group_name(g.group), g.parameters, g.max_relative_error);
  const bool ok = rep.passed();
  std::printf("%s (tolerance %.0e)\n", ok ? "PASS" : "FAIL", rep.tolerance);
  return ok ? 0 : exit_code_for(ErrorKind::numeric);
}

int cmd_export(Shared& s, DatasetArgs& d) {
  const Axis axis = parse_axis(s.axis);
  Dataset ds = load_dataset(d, axis);
  export_slice_images(ds.stack, s.out);
  std::printf("exported %zu slices to %s\n", ds.stack.slices.size(), s.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slice-based 3D Gaussian reconstruction with a tri-plane feature field"};
  app.require_subcommand(1);

  Shared shared;
  DatasetArgs data;

  auto* phantom = app.add_subcommand("phantom", "write a synthetic phantom volume, labels and palette");
  add_shared(phantom, shared);
  std::vector<int> dims{64};
  phantom->add_option("--dims", dims, "edge length, or three dims");

  auto* train = app.add_subcommand("train", "fit a scene to the training slices");
  add_shared(train, shared);
  add_dataset(train, data);
  train->add_option("--config", shared.config, "key = value config file (flags win)");
  std::optional<int> iterations;
  train->add_option("--iterations", iterations, "training iterations");
  bool no_renders = false;
  train->add_flag("--no-renders", no_renders, "skip held-out side-by-side images");

  auto* render = app.add_subcommand("render", "render slices of a checkpoint at arbitrary depths");
  add_shared(render, shared);
  RenderArgs rargs;
  render->add_option("--checkpoint", rargs.checkpoint, "checkpoint file")->required();
  render->add_option("--config", shared.config, "key = value config file (flags win)");
  render->add_option("--depth", rargs.depths, "slice depth(s) in [0, 1]");
  render->add_option("--count", rargs.count, "render slices (k + 0.5) / count for k in [first, last]");
  render->add_option("--first", rargs.first, "first slice index");
  render->add_option("--last", rargs.last, "last slice index (default count - 1)");
  render->add_option("--width", rargs.width, "image width");
  render->add_option("--height", rargs.height, "image height");
  render->add_flag("--raw", rargs.raw, "also write raw 32-bit float arrays");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  add_shared(eval, shared);
  add_dataset(eval, data);
  std::string checkpoint, split = "test";
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--config", shared.config, "key = value config file (flags win)");
  eval->add_option("--split", split, "test, train or all");

  auto* gradcheck = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  add_shared(gradcheck, shared);
  double step = 1e-5;
  bool corrupt = false;
  gradcheck->add_option("--step", step, "finite-difference step");
  gradcheck->add_flag("--corrupt-gradient", corrupt, "perturb one analytic gradient (harness self-test)");

  auto* exp = app.add_subcommand("export", "write a volume as 8-bit slice images");
  add_shared(exp, shared);
  add_dataset(exp, data);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code_for(ErrorKind::validation);
  }

  try {
    if (*phantom) return cmd_phantom(shared, dims);
    if (*train) return cmd_train(train, shared, data, iterations, !no_renders);
    if (*render) return cmd_render(render, shared, rargs);
    if (*eval) return cmd_eval(eval, shared, data, checkpoint, split);
    if (*gradcheck) return cmd_gradcheck(shared, step, corrupt);
    if (*exp) return cmd_export(shared, data);
  } catch (const slicegs::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(ErrorKind::data);
  }
  return 0;
}
