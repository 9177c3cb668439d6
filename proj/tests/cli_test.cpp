#include <gtest/gtest.h>

#include <unistd.h>

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mamat/cli.hpp"
#include "mamat/clip.hpp"
#include "mamat/sim.hpp"
#include "mamat/training.hpp"

namespace mamat {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Every regular file under dir, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) m[fs::relative(e.path(), dir).string()] = bytes(e.path());
  return m;
}

json read_json(const fs::path& p) { return json::parse(bytes(p)); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mamat_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // dir/clean and dir/distorted: 6 frames of 16 x 16.
  fs::path make_pair_dir(std::size_t h = 16, std::size_t w = 16) {
    const auto d = dir_ / "data";
    const auto clean = sim::synthetic_pattern(6, 1, h, w, 3);
    write_clip(d / "clean", clean);
    sim::SimParams p;
    p.seed = 5;
    write_clip(d / "distorted", sim::simulate_clip(clean, p));
    return d;
  }

  std::vector<std::string> tiny_train(const fs::path& data, const fs::path& out) {
    return {"train", "--data", data.string(), "--out", out.string(), "--steps", "3", "--crop", "16",
            "--width", "2", "--frames", "3", "--seed", "4"};
  }

  fs::path dir_;
};

TEST_F(Cli, NoSubcommandIsUsageError) {
  const auto r = run({});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST_F(Cli, HelpAndVersionSucceed) {
  EXPECT_EQ(run({"--help"}).code, 0);
  const auto v = run({"--version"});
  EXPECT_EQ(v.code, 0);
  EXPECT_EQ(v.out, std::string(cli::kVersion) + "\n");
}

TEST_F(Cli, UnknownFlagIsUsageError) {
  EXPECT_EQ(run({"simulate", "--clean", "a", "--out", "b", "--bogus", "1"}).code, 2);
}

TEST_F(Cli, SimulateMissingCleanPrintsUsage) {
  const auto r = run({"simulate", "--out", (dir_ / "o").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--clean"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST_F(Cli, SimulateNoOpParamsCopyFramesByteForByte) {
  const auto clean = sim::synthetic_pattern(4, 1, 16, 16, 1);
  write_clip(dir_ / "clean", clean);
  const auto r = run({"simulate", "--clean", (dir_ / "clean").string(), "--out", (dir_ / "out").string(), "--alpha",
                      "0", "--sigma-b", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto name = frame_file_name(i, 1);
    EXPECT_EQ(bytes(dir_ / "clean" / name), bytes(dir_ / "out" / name)) << name;
  }
}

TEST_F(Cli, SimulateWritesRunManifest) {
  write_clip(dir_ / "clean", sim::synthetic_pattern(3, 1, 16, 16));
  ASSERT_EQ(run({"simulate", "--clean", (dir_ / "clean").string(), "--out", (dir_ / "out").string(), "--seed", "9",
                 "--rho", "0.5"})
                .code,
            0);
  const auto m = read_json(dir_ / "out" / cli::kRunManifest);
  EXPECT_EQ(m["command"], "simulate");
  EXPECT_EQ(m["seed"], 9);
  EXPECT_EQ(m["version"], cli::kVersion);
  EXPECT_EQ(m["flags"]["rho"], 0.5);
  EXPECT_EQ(m["flags"]["alpha"], 2.0);
  EXPECT_EQ(read_manifest(dir_ / "out")["frames"], 3);
}

TEST_F(Cli, SimulateIsDeterministicPerSeed) {
  write_clip(dir_ / "clean", sim::synthetic_pattern(4, 1, 16, 16));
  auto sim_to = [&](const std::string& out, const std::string& seed) {
    return run({"simulate", "--clean", (dir_ / "clean").string(), "--out", (dir_ / out).string(), "--seed", seed}).code;
  };
  ASSERT_EQ(sim_to("a", "7"), 0);
  ASSERT_EQ(sim_to("b", "7"), 0);
  ASSERT_EQ(sim_to("c", "8"), 0);
  auto a = tree(dir_ / "a"), b = tree(dir_ / "b"), c = tree(dir_ / "c");
  a.erase(cli::kRunManifest);
  b.erase(cli::kRunManifest);
  c.erase(cli::kRunManifest);
  a.erase(kManifestName);
  b.erase(kManifestName);
  c.erase(kManifestName);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST_F(Cli, SimulateRejectsBadParameters) {
  write_clip(dir_ / "clean", sim::synthetic_pattern(2, 1, 16, 16));
  EXPECT_EQ(run({"simulate", "--clean", (dir_ / "clean").string(), "--out", (dir_ / "o").string(), "--rho", "1.5"}).code,
            2);
  EXPECT_EQ(run({"simulate", "--clean", (dir_ / "clean").string(), "--out", (dir_ / "o").string(), "--alpha", "x"}).code,
            2);
}

TEST_F(Cli, SimulateMissingInputIsIoError) {
  const auto r = run({"simulate", "--clean", (dir_ / "absent").string(), "--out", (dir_ / "o").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(Cli, TrainZeroStepsWritesInitialWeights) {
  const auto data = make_pair_dir();
  auto args = tiny_train(data, dir_ / "run" / "w.mwts");
  args[6] = "0";
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream f(dir_ / "run" / "w.mwts", std::ios::binary);
  const auto loaded = load_weights(f);
  EXPECT_EQ(loaded.config.width, 2u);
  EXPECT_EQ(loaded.config.frames, 3u);
  EXPECT_EQ(loaded.config.seed, 4u);
  EXPECT_EQ(loaded.weights, init_model(loaded.config));
  EXPECT_EQ(bytes(dir_ / "run" / "w-loss.csv"), "step,loss\n");
  EXPECT_TRUE(fs::exists(dir_ / "run" / cli::kRunManifest));
}

TEST_F(Cli, TrainDefaultLearningRate) {
  const auto data = make_pair_dir();
  auto args = tiny_train(data, dir_ / "w.mwts");
  args[6] = "0";
  ASSERT_EQ(run(args).code, 0);
  const auto m = read_json(dir_ / cli::kRunManifest);
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["flags"]["lr"], 1e-4);
  EXPECT_EQ(m["flags"]["steps"], 0);
}

TEST_F(Cli, TrainIsBitIdenticalAcrossRuns) {
  const auto data = make_pair_dir();
  ASSERT_EQ(run(tiny_train(data, dir_ / "a" / "w.mwts")).code, 0);
  ASSERT_EQ(run(tiny_train(data, dir_ / "b" / "w.mwts")).code, 0);
  EXPECT_EQ(bytes(dir_ / "a" / "w.mwts"), bytes(dir_ / "b" / "w.mwts"));
  EXPECT_EQ(bytes(dir_ / "a" / "w-loss.csv"), bytes(dir_ / "b" / "w-loss.csv"));
  std::istringstream csv(bytes(dir_ / "a" / "w-loss.csv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4u);
}

TEST_F(Cli, TrainReadsPairSubdirectories) {
  make_pair_dir();
  fs::rename(dir_ / "data", dir_ / "pair1");
  fs::create_directories(dir_ / "set");
  fs::rename(dir_ / "pair1", dir_ / "set" / "pair1");
  EXPECT_EQ(run(tiny_train(dir_ / "set", dir_ / "w.mwts")).code, 0);
}

TEST_F(Cli, TrainNonFiniteLossExitsFour) {
  const auto data = make_pair_dir();
  auto args = tiny_train(data, dir_ / "w.mwts");
  args.insert(args.end(), {"--lr", "1e30"});
  const auto r = run(args);
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("non-finite loss at step"), std::string::npos);
}

TEST_F(Cli, TrainWithoutPairsIsIoError) {
  fs::create_directories(dir_ / "empty");
  EXPECT_EQ(run(tiny_train(dir_ / "empty", dir_ / "w.mwts")).code, 3);
  EXPECT_EQ(run(tiny_train(dir_ / "absent", dir_ / "w.mwts")).code, 3);
}

TEST_F(Cli, TrainRejectsBadCrop) {
  const auto data = make_pair_dir();
  auto args = tiny_train(data, dir_ / "w.mwts");
  args[8] = "12";
  EXPECT_EQ(run(args).code, 2);
}

class CliRestore : public Cli {
 protected:
  fs::path save(const ModelWeights<float>& w, const ModelConfig& cfg) {
    const auto p = dir_ / "w.mwts";
    std::ofstream f(p, std::ios::binary);
    save_weights(w, cfg, f);
    return p;
  }
  static ModelConfig tiny() {
    ModelConfig cfg;
    cfg.width = 2;
    cfg.state_dim = 2;
    cfg.frames = 3;
    return cfg;
  }
};

TEST_F(CliRestore, ZeroResidualWeightsReproduceInput) {
  const auto cfg = tiny();
  auto w = init_model(cfg);
  for (const char* name : {"sdat.out.weight", "sdat.out.bias", "edp.head.weight", "edp.head.bias"})
    for (auto& v : w.at(name).data()) v = 0.0f;
  const auto weights = save(w, cfg);
  write_clip(dir_ / "in", sim::synthetic_pattern(5, 1, 16, 16, 2));
  const auto r = run({"restore", "--in", (dir_ / "in").string(), "--weights", weights.string(), "--out",
                      (dir_ / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto name = frame_file_name(i, 1);
    EXPECT_EQ(bytes(dir_ / "in" / name), bytes(dir_ / "out" / name)) << name;
  }
}

TEST_F(CliRestore, KeepsLengthAndGeometryAndIsDeterministic) {
  const auto cfg = tiny();
  const auto weights = save(init_model(cfg), cfg);
  write_clip(dir_ / "in", sim::synthetic_pattern(7, 1, 12, 20, 2));
  for (const char* out : {"a", "b"}) {
    const auto r = run({"restore", "--in", (dir_ / "in").string(), "--weights", weights.string(), "--out",
                        (dir_ / out).string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const auto back = read_clip(dir_ / "a");
  EXPECT_EQ(back.frames(), 7u);
  EXPECT_EQ(back.height(), 12u);
  EXPECT_EQ(back.width(), 20u);
  auto a = tree(dir_ / "a"), b = tree(dir_ / "b");
  a.erase(cli::kRunManifest);
  b.erase(cli::kRunManifest);
  a.erase(kManifestName);
  b.erase(kManifestName);
  EXPECT_EQ(a, b);
}

TEST_F(CliRestore, MismatchesExitThree) {
  const auto cfg = tiny();
  const auto weights = save(init_model(cfg), cfg);
  write_clip(dir_ / "rgb", VideoClip(3, 3, 16, 16));
  EXPECT_EQ(run({"restore", "--in", (dir_ / "rgb").string(), "--weights", weights.string(), "--out",
                 (dir_ / "o").string()})
                .code,
            3);
  std::string blob = bytes(weights);
  blob[0] = 'X';
  std::ofstream(dir_ / "bad.mwts", std::ios::binary) << blob;
  write_clip(dir_ / "grey", VideoClip(3, 1, 16, 16));
  EXPECT_EQ(run({"restore", "--in", (dir_ / "grey").string(), "--weights", (dir_ / "bad.mwts").string(), "--out",
                 (dir_ / "o").string()})
                .code,
            3);
}

TEST_F(Cli, EvalIdenticalClipsHitTheCaps) {
  write_clip(dir_ / "a", sim::synthetic_pattern(3, 1, 16, 16));
  const auto r = run({"eval", "--ref", (dir_ / "a").string(), "--test", (dir_ / "a").string(), "--out",
                      (dir_ / "rep").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mean   100.0000  1.0000"), std::string::npos) << r.out;
  const auto csv = bytes(dir_ / "rep" / "metrics.csv");
  EXPECT_EQ(csv.rfind("frame,psnr,ssim\n", 0), 0u);
  EXPECT_NE(csv.find("mean,100,1\n"), std::string::npos) << csv;
  EXPECT_TRUE(fs::exists(dir_ / "rep" / cli::kRunManifest));
}

TEST_F(Cli, EvalLengthMismatchIsUsageError) {
  write_clip(dir_ / "a", sim::synthetic_pattern(3, 1, 16, 16));
  write_clip(dir_ / "b", sim::synthetic_pattern(4, 1, 16, 16));
  const auto r = run({"eval", "--ref", (dir_ / "a").string(), "--test", (dir_ / "b").string(), "--out",
                      (dir_ / "rep").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("length"), std::string::npos);
}

TEST_F(Cli, EvalApFixture) {
  write_clip(dir_ / "a", sim::synthetic_pattern(1, 1, 16, 16));
  std::ofstream(dir_ / "gts.csv") << "image_id,class_id,x_min,y_min,x_max,y_max\nimg,3,0,0,10,10\n";
  std::ofstream(dir_ / "dets.csv") << "image_id,class_id,x_min,y_min,x_max,y_max,score\nimg,3,0,0,10,6,0.7\n";
  const std::vector<std::string> base{"eval",   "--ref", (dir_ / "a").string(), "--test", (dir_ / "a").string(),
                                      "--dets", (dir_ / "dets.csv").string(), "--gts", (dir_ / "gts.csv").string(),
                                      "--out",  (dir_ / "rep").string()};
  const auto r = run(base);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("AP@[.50:.95] 0.300"), std::string::npos) << r.out;
  EXPECT_EQ(read_json(dir_ / "rep" / "ap.json")["mean"], 0.3);

  std::ofstream(dir_ / "gts.csv") << "image_id,class_id,x_min,y_min,x_max,y_max\nimg,3,0,0,40,40\n";
  auto small = base;
  small.push_back("--small");
  const auto s = run(small);
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_NE(s.out.find("AP@[.50:.95] (small) n/a"), std::string::npos) << s.out;
}

TEST_F(Cli, EvalRejectsHalfADetectionPairAndBadCsv) {
  write_clip(dir_ / "a", sim::synthetic_pattern(1, 1, 16, 16));
  const auto a = (dir_ / "a").string();
  std::ofstream(dir_ / "gts.csv") << "image_id,class\n";
  EXPECT_EQ(run({"eval", "--ref", a, "--test", a, "--gts", (dir_ / "gts.csv").string()}).code, 2);
  std::ofstream(dir_ / "dets.csv") << "image_id,class_id,x_min,y_min,x_max,y_max,score\n";
  EXPECT_EQ(run({"eval", "--ref", a, "--test", a, "--dets", (dir_ / "dets.csv").string(), "--gts",
                 (dir_ / "gts.csv").string(), "--out", (dir_ / "rep").string()})
                .code,
            3);
}

TEST_F(Cli, GradcheckAbsurdStepFailsListingOps) {
  const auto r = run({"gradcheck", "--config", "tiny", "--eps", "10", "--out", dir_.string()});
  EXPECT_EQ(r.code, 5);
  EXPECT_NE(r.err.find("gradcheck failed for:"), std::string::npos);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
  std::istringstream csv(bytes(dir_ / "gradcheck.csv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 1u + 38u);
}

TEST_F(Cli, GradcheckRejectsUnknownConfig) {
  EXPECT_EQ(run({"gradcheck", "--config", "huge"}).code, 2);
  EXPECT_EQ(run({"gradcheck", "--eps", "-1", "--out", dir_.string()}).code, 2);
}

}  // namespace
}  // namespace mamat
