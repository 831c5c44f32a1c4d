#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "sul/manifest.hpp"

using namespace sul;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("sul_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Exit status of the CLI; stdout goes to out.txt, stderr to err.txt.
  int run(const std::string& args) const {
    const std::string cmd = std::string("\"") + SUL_CLI_PATH + "\" " + args + " > \"" + (dir_ / "out.txt").string() +
                            "\" 2> \"" + (dir_ / "err.txt").string() + "\"";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }

  fs::path write(const std::string& name, const std::string& text) const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }

  std::string read(const fs::path& p) const {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  }

  std::string out() const { return read(dir_ / "out.txt"); }
  std::string err() const { return read(dir_ / "err.txt"); }

  fs::path dir_;
};

const char* kOverlap = R"({"experiment": "overlap-curve", "seed": 3, "curve": {"grid": 9}})";

// Small enough to train in a second or two.
const char* kScaling = R"({
  "experiment": "scaling-line", "seed": 1,
  "train": {"iterations": 40, "batch_size": 16},
  "sweep": {"iterations": [10, 20, 40], "samples": 20, "projections": 8, "loss_n": 20, "loss_timesteps": 5},
  "solver": {"kind": "heun", "fixed_steps": 10}
})";

}  // namespace

TEST_F(Cli, RunWritesArtifactsAndVerifiableManifest) {
  const fs::path cfg = write("c.json", kOverlap);
  const fs::path o = dir_ / "run";
  ASSERT_EQ(run("run --config " + cfg.string() + " --format csv+svg --threads 1 --quiet --out " + o.string()), 0) << err();
  for (const char* f : {"overlap.csv", "overlap.svg", "config.json", "manifest.json"}) EXPECT_TRUE(fs::exists(o / f)) << f;
  EXPECT_TRUE(verify_manifest(o).empty());

  const Json m = Json::parse(read(o / "manifest.json"));
  EXPECT_EQ(m["threads"], 1);
  // The digest covers the compact form of the resolved config, which carries every default.
  const Json resolved = Json::parse(read(o / "config.json"));
  EXPECT_EQ(m["config_sha256"], sha256_hex(resolved.dump()));
  EXPECT_EQ(resolved["seed"], 3);
  EXPECT_EQ(resolved["dataset"]["dim"], 32);

  std::ofstream(o / "overlap.csv", std::ios::app) << "tampered\n";
  EXPECT_EQ(verify_manifest(o), std::vector<std::string>{"overlap.csv"});
}

TEST_F(Cli, PositionalConfigAndCsvOnlyFormat) {
  const fs::path cfg = write("c.json", kOverlap);
  const fs::path o = dir_ / "run";
  ASSERT_EQ(run("run " + cfg.string() + " --quiet --out " + o.string()), 0) << err();
  EXPECT_TRUE(fs::exists(o / "overlap.csv"));
  EXPECT_FALSE(fs::exists(o / "overlap.svg"));
}

TEST_F(Cli, ConfigErrorsExitTwoWithoutArtifacts) {
  const std::pair<const char*, const char*> cases[] = {
      {R"({"experiment": "overlap-curve", "seed": 0, "curve": {"gird": 9}})", "curve.gird"},
      {R"({"experiment": "overlap-curve"})", "seed"},
      {R"({"experiment": "overlap-curve", "seed": 0, "curve": {"grid": "nine"}})", "curve.grid"},
      {R"({"experiment": "overlap-curve", "seed": 0, "curve": {"grid": 0}})", "curve.grid"},
      {R"({"experiment": "no-such-thing", "seed": 0})", "experiment"},
      {R"({"experiment": "overlap-curve", "seed": 0,)", "parse"},
  };
  int k = 0;
  for (const auto& [text, needle] : cases) {
    const fs::path cfg = write("bad" + std::to_string(k) + ".json", text);
    const fs::path o = dir_ / ("out" + std::to_string(k++));
    EXPECT_EQ(run("run --config " + cfg.string() + " --out " + o.string()), 2) << text;
    EXPECT_NE(err().find(needle), std::string::npos) << err();
    EXPECT_FALSE(fs::exists(o)) << text;
  }
  EXPECT_EQ(run("run --config " + (dir_ / "missing.json").string()), 2);
  EXPECT_EQ(run("run"), 2);
  EXPECT_EQ(run("run --config x.json --format pdf"), 2);
  EXPECT_EQ(run("frobnicate"), 2);
}

TEST_F(Cli, SeedOverrideAndThreadCountKeepOutputs) {
  const fs::path cfg = write("c.json", kScaling);
  const fs::path a = dir_ / "a", b = dir_ / "b", c = dir_ / "c", d = dir_ / "d";
  ASSERT_EQ(run("run --config " + cfg.string() + " --quiet --threads 1 --out " + a.string()), 0) << err();
  ASSERT_EQ(run("run --config " + cfg.string() + " --quiet --threads 1 --out " + b.string()), 0) << err();
  ASSERT_EQ(run("run --config " + cfg.string() + " --quiet --threads 3 --out " + c.string()), 0) << err();
  ASSERT_EQ(run("run --config " + cfg.string() + " --quiet --threads 1 --seed 2 --out " + d.string()), 0) << err();
  for (const char* f : {"points.csv", "line.csv", "loss.csv"}) {
    EXPECT_EQ(read(a / f), read(b / f)) << f;
    EXPECT_EQ(read(a / f), read(c / f)) << f;
  }
  EXPECT_NE(read(a / "loss.csv"), read(d / "loss.csv"));
  EXPECT_EQ(Json::parse(read(d / "config.json"))["seed"], 2);
}

TEST_F(Cli, TrainSampleDiagnose) {
  std::string pts = "x,y\n";
  for (int i = 0; i < 12; ++i) pts += std::to_string(0.3 * i - 1.5) + "," + std::to_string((i % 3) - 1.0) + "\n";
  const fs::path data = write("pts.csv", pts);
  const fs::path cfg =
      write("t.json", R"({"experiment": "train", "seed": 4, "model": {"hidden": [16]}, "train": {"iterations": 30}})");
  const fs::path t = dir_ / "train";
  ASSERT_EQ(run("train --config " + cfg.string() + " --data " + data.string() + " --quiet --out " + t.string()), 0)
      << err();
  ASSERT_TRUE(fs::exists(t / "checkpoint.bin"));
  EXPECT_TRUE(verify_manifest(t).empty());

  const fs::path s = dir_ / "sample";
  ASSERT_EQ(run("sample " + (t / "checkpoint.bin").string() + " --n 5 --solver heun --steps 8 --seed 1 --out " +
                s.string()),
            0)
      << err();
  const std::string samples = read(s / "samples.csv");
  EXPECT_EQ(std::count(samples.begin(), samples.end(), '\n'), 6);
  EXPECT_EQ(samples.substr(0, 6), "z0,z1\n");

  ASSERT_EQ(run("diagnose " + (t / "checkpoint.bin").string() + " " + data.string() +
                " supervision-loss --n 10 --timesteps 4"),
            0)
      << err();
  EXPECT_NE(out().find("metric,region,t,value,n,seed"), std::string::npos);

  EXPECT_EQ(run("diagnose " + (t / "checkpoint.bin").string() + " " + data.string() + " fid"), 2);
  EXPECT_NE(err().find("supervision-loss"), std::string::npos);
  EXPECT_EQ(run("sample " + (dir_ / "nope.bin").string()), 2);
  EXPECT_EQ(run("sample " + (t / "checkpoint.bin").string() + " --class 0"), 2);
}

TEST_F(Cli, PrintDefaultsRoundTrips) {
  ASSERT_EQ(run("print-defaults gaussian"), 0);
  const fs::path cfg = write("g.json", out());
  const Json j = Json::parse(read(cfg));
  EXPECT_EQ(j["experiment"], "gaussian");
  EXPECT_EQ(j["dataset"]["dim"], 20);
  EXPECT_EQ(j["model"]["hidden"].size(), 4u);
  EXPECT_EQ(run("print-defaults nope"), 2);
}
