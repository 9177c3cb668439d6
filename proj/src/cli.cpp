#include "mamat/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mamat/clip.hpp"
#include "mamat/eval.hpp"
#include "mamat/gradsuite.hpp"
#include "mamat/mten.hpp"
#include "mamat/sim.hpp"
#include "mamat/training.hpp"

namespace mamat::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Bad invocation detected after parsing (exit 2).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(double v, int precision = 4) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

void write_run_manifest(const fs::path& dir, const std::string& command, const json& flags, std::uint64_t seed) {
  json m;
  m["command"] = command;
  m["flags"] = flags;
  m["seed"] = seed;
  m["version"] = kVersion;
  write_text(dir / kRunManifest, m.dump(2) + "\n");
}

fs::path dir_of(const fs::path& file) { return file.has_parent_path() ? file.parent_path() : fs::path("."); }

// ---- simulate ---------------------------------------------------------------

struct SimulateArgs {
  std::string clean, out;
  sim::SimParams params;
};

int simulate(const SimulateArgs& a, std::ostream& out) {
  a.params.validate();
  const auto clean = read_clip(a.clean);
  const auto distorted = sim::simulate_clip(clean, a.params);
  write_clip(a.out, distorted, {{"simulation", a.params.to_json()}});
  json flags{{"clean", a.clean}, {"out", a.out}};
  flags.update(a.params.to_json());
  write_run_manifest(a.out, "simulate", flags, a.params.seed);
  out << "wrote " << distorted.frames() << " frames to " << a.out << "\n";
  return ok;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string data, out;
  TrainConfig cfg;
  std::size_t width = 8;
};

// DIR holding distorted/ and clean/, or subdirectories that each do.
std::vector<ClipPair> load_pairs(const fs::path& root) {
  auto is_pair = [](const fs::path& d) { return fs::is_directory(d / "distorted") && fs::is_directory(d / "clean"); };
  std::vector<fs::path> dirs;
  if (!fs::is_directory(root)) throw IoError("data directory " + root.string() + " does not exist");
  if (is_pair(root)) {
    dirs.push_back(root);
  } else {
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && is_pair(e.path())) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
  }
  if (dirs.empty()) throw IoError("no distorted/clean clip pair under " + root.string());
  std::vector<ClipPair> pairs;
  for (const auto& d : dirs) {
    ClipPair p{read_clip(d / "distorted"), read_clip(d / "clean")};
    if (p.distorted.data.shape() != p.clean.data.shape())
      throw IoError("distorted and clean clips differ in geometry under " + d.string());
    if (!pairs.empty() && p.clean.channels() != pairs.front().clean.channels())
      throw IoError("clip pairs differ in channel count under " + d.string());
    pairs.push_back(std::move(p));
  }
  return pairs;
}

fs::path loss_csv_path(const fs::path& weights) {
  return dir_of(weights) / (weights.stem().string() + "-loss.csv");
}

int train_cmd(const TrainArgs& a, std::ostream& out) {
  a.cfg.validate();
  const auto pairs = load_pairs(a.data);
  ModelConfig mcfg;
  mcfg.channels = pairs.front().clean.channels();
  mcfg.frames = a.cfg.frames;
  mcfg.width = a.width;
  mcfg.seed = a.cfg.seed;
  mcfg.validate();

  const std::size_t every = std::max<std::size_t>(1, a.cfg.steps / 20);
  auto result = train(mcfg, init_model(mcfg), pairs, a.cfg, [&](std::size_t step, double loss) {
    if (step % every == 0 || step + 1 == a.cfg.steps) out << "step " << step << " loss " << fmt(loss, 6) << "\n";
  });

  const fs::path weights(a.out);
  if (weights.has_parent_path()) fs::create_directories(weights.parent_path());
  {
    std::ofstream f(weights, std::ios::binary);
    if (!f) throw IoError("cannot write " + weights.string());
    save_weights(result.weights, mcfg, f);
    if (!f) throw IoError("failed writing " + weights.string());
  }
  std::ostringstream csv;
  write_loss_csv(result.losses, csv);
  write_text(loss_csv_path(weights), csv.str());

  json flags{{"data", a.data}, {"out", a.out},   {"steps", a.cfg.steps}, {"crop", a.cfg.crop},
             {"width", a.width}, {"lr", a.cfg.lr}, {"frames", a.cfg.frames}, {"seed", a.cfg.seed}};
  write_run_manifest(dir_of(weights), "train", flags, a.cfg.seed);
  out << "wrote " << weights.string() << " (" << parameter_count(result.weights) << " parameters, "
      << result.losses.size() << " steps)\n";
  return ok;
}

// ---- restore ----------------------------------------------------------------

struct RestoreArgs {
  std::string in, weights, out;
};

// Replicates the last row and column of 1 x C x T x H x W up to hp x wp.
Tensor<float> pad_edges(const Tensor<float>& x, std::size_t hp, std::size_t wp) {
  const auto& s = x.shape();
  const std::size_t planes = s[0] * s[1] * s[2], h = s[3], w = s[4];
  if (h == hp && w == wp) return x;
  Tensor<float> y({s[0], s[1], s[2], hp, wp}, 0.0f);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < hp; ++i)
      for (std::size_t j = 0; j < wp; ++j)
        y[(p * hp + i) * wp + j] = x[(p * h + std::min(i, h - 1)) * w + std::min(j, w - 1)];
  return y;
}

int restore_cmd(const RestoreArgs& a, std::ostream& out) {
  LoadedModel model;
  {
    std::ifstream f(a.weights, std::ios::binary);
    if (!f) throw IoError("cannot read " + a.weights);
    try {
      model = load_weights(f);
    } catch (const std::invalid_argument& e) {
      throw IoError(std::string("weights do not match their configuration: ") + e.what());
    }
  }
  const auto clip = read_clip(a.in);
  const auto& cfg = model.config;
  if (clip.channels() != cfg.channels)
    throw IoError("clip has " + std::to_string(clip.channels()) + " channels, weights expect " +
                  std::to_string(cfg.channels));

  const std::size_t h = clip.height(), w = clip.width();
  const std::size_t hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;
  VideoClip restored(clip.frames(), clip.channels(), h, w);
  sliding_window_iter(clip, cfg.frames, [&](const Window& win) {
    const auto y = restore_window(pad_edges(win.frames, hp, wp), cfg, model.weights);
    Tensor<float> frame({clip.channels(), h, w}, 0.0f);
    for (std::size_t c = 0; c < clip.channels(); ++c)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) frame[(c * h + i) * w + j] = y[(c * hp + i) * wp + j];
    restored.set_frame(win.center, frame);
  });
  write_clip(a.out, restored, {{"weights", a.weights}});
  write_run_manifest(a.out, "restore", {{"in", a.in}, {"weights", a.weights}, {"out", a.out}}, cfg.seed);
  out << "restored " << restored.frames() << " frames to " << a.out << "\n";
  return ok;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string ref, test, dets, gts, out = ".";
  bool small = false;
};

int eval_cmd(const EvalArgs& a, std::ostream& out) {
  if (a.dets.empty() != a.gts.empty()) throw UsageError("--dets and --gts must be given together");
  const auto ref = read_clip(a.ref);
  const auto test = read_clip(a.test);
  if (ref.frames() != test.frames())
    throw UsageError("clips differ in length: " + std::to_string(ref.frames()) + " vs " +
                     std::to_string(test.frames()) + " frames");
  if (ref.data.shape() != test.data.shape()) throw UsageError("clips differ in frame geometry");

  std::ostringstream csv;
  csv << std::setprecision(17) << "frame,psnr,ssim\n";
  out << "frame  psnr(dB)  ssim\n";
  double sum_p = 0, sum_s = 0;
  for (std::size_t i = 0; i < ref.frames(); ++i) {
    const auto fr = ref.frame(i), ft = test.frame(i);
    const double p = eval::psnr(fr, ft), s = eval::ssim(fr, ft);
    sum_p += p;
    sum_s += s;
    csv << i << "," << p << "," << s << "\n";
    out << std::setw(5) << i << "  " << std::setw(8) << fmt(p) << "  " << fmt(s) << "\n";
  }
  const double n = double(ref.frames());
  csv << "mean," << sum_p / n << "," << sum_s / n << "\n";
  out << "mean   " << std::setw(8) << fmt(sum_p / n) << "  " << fmt(sum_s / n) << "\n";
  const fs::path dir(a.out);
  write_text(dir / "metrics.csv", csv.str());

  json flags{{"ref", a.ref}, {"test", a.test}, {"out", a.out}, {"small", a.small}};
  if (!a.dets.empty()) {
    const auto dets = eval::read_boxes(fs::path(a.dets), true);
    const auto gts = eval::read_boxes(fs::path(a.gts), false);
    const auto ap = eval::map_evaluate(dets, gts, a.small ? eval::SizeFilter::small : eval::SizeFilter::all);
    json report;
    report["filter"] = a.small ? "small" : "all";
    report["mean"] = std::isnan(ap.mean) ? json(nullptr) : json(ap.mean);
    for (std::size_t k = 0; k < eval::kIouThresholds.size(); ++k) {
      const double v = ap.per_threshold[k];
      report["per_threshold"][fmt(eval::kIouThresholds[k], 2)] = std::isnan(ap.mean) ? json(nullptr) : json(v);
    }
    for (const auto& [cls, v] : ap.per_class) report["per_class"][std::to_string(cls)] = v;
    out << "AP@[.50:.95]" << (a.small ? " (small)" : "") << " " << fmt(ap.mean, 3) << "\n";
    for (std::size_t k = 0; k < eval::kIouThresholds.size(); ++k)
      out << "  AP@" << fmt(eval::kIouThresholds[k], 2) << " "
          << fmt(std::isnan(ap.mean) ? ap.mean : ap.per_threshold[k], 3) << "\n";
    write_text(dir / "ap.json", report.dump(2) + "\n");
    flags["dets"] = a.dets;
    flags["gts"] = a.gts;
  }
  write_run_manifest(dir, "eval", flags, 0);
  return ok;
}

// ---- gradcheck --------------------------------------------------------------

struct GradcheckArgs {
  std::string config = "tiny", out = ".";
  double eps = 1e-5;
};

int gradcheck_cmd(const GradcheckArgs& a, std::ostream& out, std::ostream& err) {
  if (!(a.eps > 0)) throw UsageError("--eps must be positive");
  const auto config = a.config == "tiny" ? SuiteConfig::tiny : SuiteConfig::standard;
  out << "op                          worst rel err  coords  unresolved  seconds\n";
  const auto report = run_gradient_suite(config, a.eps, 1e-4, [&](const CaseResult& c) {
    char line[160];
    std::snprintf(line, sizeof line, "%-26s  %13.3e  %6zu  %10zu  %7.2f  %s", c.name.c_str(), c.report.worst,
                  c.report.coords_checked, c.report.unresolved, c.seconds, c.passed ? "ok" : "FAIL");
    out << line << (c.error.empty() ? "" : "  " + c.error) << "\n" << std::flush;
  });
  std::ostringstream csv;
  csv << std::setprecision(17) << "op,worst_rel_error,coords,unresolved,seconds,passed\n";
  for (const auto& c : report.cases)
    csv << c.name << "," << c.report.worst << "," << c.report.coords_checked << "," << c.report.unresolved << ","
        << c.seconds << "," << (c.passed ? 1 : 0) << "\n";
  write_text(fs::path(a.out) / "gradcheck.csv", csv.str());
  write_run_manifest(a.out, "gradcheck", {{"config", a.config}, {"eps", a.eps}, {"out", a.out}}, 0);
  out << report.cases.size() << " ops checked in " << fmt(report.seconds, 1) << " s\n";
  if (!report.passed) {
    err << "gradcheck failed for:";
    for (const auto& name : report.failures()) err << " " << name;
    err << "\n";
    return gradcheck_failed;
  }
  out << "all ops within 1e-4\n";
  return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Turbulence mitigation toolkit: simulate, train, restore, eval, gradcheck", "mamat"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1, 1);

  SimulateArgs sa;
  auto* sim_cmd = app.add_subcommand("simulate", "Apply synthetic tilt and blur to a clean clip");
  sim_cmd->add_option("--clean", sa.clean, "Clean clip directory")->required();
  sim_cmd->add_option("--out", sa.out, "Output clip directory")->required();
  sim_cmd->add_option("--alpha", sa.params.alpha, "Tilt amplitude in pixels")->capture_default_str();
  sim_cmd->add_option("--sigma-s", sa.params.sigma_s, "Tilt correlation length in pixels")->capture_default_str();
  sim_cmd->add_option("--rho", sa.params.rho, "Frame-to-frame tilt correlation")->capture_default_str();
  sim_cmd->add_option("--sigma-b", sa.params.sigma_b, "Blur in pixels")->capture_default_str();
  sim_cmd->add_option("--seed", sa.params.seed, "Random seed")->capture_default_str();

  TrainArgs ta;
  auto* train_app = app.add_subcommand("train", "Train a model on distorted/clean clip pairs");
  train_app->add_option("--data", ta.data, "Directory with distorted/ and clean/ (or subdirectories of such pairs)")
      ->required();
  train_app->add_option("--out", ta.out, "Weights file (.mwts)")->required();
  train_app->add_option("--steps", ta.cfg.steps, "Optimisation steps")->capture_default_str();
  train_app->add_option("--crop", ta.cfg.crop, "Square crop size, multiple of 8")->capture_default_str();
  train_app->add_option("--width", ta.width, "Base channel width")->capture_default_str();
  train_app->add_option("--lr", ta.cfg.lr, "Adam learning rate")->capture_default_str();
  train_app->add_option("--frames", ta.cfg.frames, "Frames per window (odd)")->capture_default_str();
  train_app->add_option("--seed", ta.cfg.seed, "Random seed")->capture_default_str();

  RestoreArgs ra;
  auto* restore_app = app.add_subcommand("restore", "Restore every frame of a clip with sliding windows");
  restore_app->add_option("--in", ra.in, "Distorted clip directory")->required();
  restore_app->add_option("--weights", ra.weights, "Weights file (.mwts)")->required();
  restore_app->add_option("--out", ra.out, "Output clip directory")->required();

  EvalArgs ea;
  auto* eval_app = app.add_subcommand("eval", "PSNR/SSIM per frame and optional detection AP");
  eval_app->add_option("--ref", ea.ref, "Reference clip directory")->required();
  eval_app->add_option("--test", ea.test, "Clip directory to score")->required();
  eval_app->add_option("--dets", ea.dets, "Detections CSV (image_id,class_id,x_min,y_min,x_max,y_max,score)");
  eval_app->add_option("--gts", ea.gts, "Ground-truth CSV (image_id,class_id,x_min,y_min,x_max,y_max)");
  eval_app->add_flag("--small", ea.small, "Only ground truth with area below 32x32 counts");
  eval_app->add_option("--out", ea.out, "Directory for metrics.csv, ap.json and the run manifest")
      ->capture_default_str();

  GradcheckArgs ga;
  auto* grad_app = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  grad_app->add_option("--config", ga.config, "Network size for the full-model case")
      ->check(CLI::IsMember({"tiny", "default"}))
      ->capture_default_str();
  grad_app->add_option("--eps", ga.eps, "Central-difference step")->capture_default_str();
  grad_app->add_option("--out", ga.out, "Directory for gradcheck.csv and the run manifest")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return usage;
  }

  try {
    if (sim_cmd->parsed()) return simulate(sa, out);
    if (train_app->parsed()) return train_cmd(ta, out);
    if (restore_app->parsed()) return restore_cmd(ra, out);
    if (eval_app->parsed()) return eval_cmd(ea, out);
    return gradcheck_cmd(ga, out, err);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return numerical;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return usage;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return io;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return io;
  } catch (const eval::FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return io;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return io;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return usage;
  } catch (const std::domain_error& e) {
    err << "error: " << e.what() << "\n";
    return usage;
  }
}

}  // namespace mamat::cli
