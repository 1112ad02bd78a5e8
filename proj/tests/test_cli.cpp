#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "bmlab/grid.hpp"
#include "bmlab/lattice.hpp"
#include "bmlab/report.hpp"

using namespace bml;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const char* bin = std::getenv("BMLAB_BIN");
    if (!bin) GTEST_SKIP() << "BMLAB_BIN not set";
    bin_ = bin;
    dir_ = fs::temp_directory_path() /
           ("bmlab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override {
    if (!dir_.empty()) fs::remove_all(dir_);
  }

  Result run(const std::string& args, bool with_stderr = false) {
    const std::string cmd = "BMLAB_CACHE='" + (dir_ / "cache").string() + "' '" + bin_ + "' " + args +
                            (with_stderr ? " 2>&1" : " 2>/dev/null");
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf;
    std::size_t got;
    while ((got = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), got);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }
  json run_json(const std::string& args, int expected_code = 0) {
    auto r = run(args);
    EXPECT_EQ(r.code, expected_code) << args << "\n" << r.out;
    return json::parse(r.out);
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string bin_;
  fs::path dir_;
};

json without_timing(json j) {
  j.erase("timing");
  return j;
}

}  // namespace

TEST_F(CliTest, RegionsReportExactVertices) {
  auto j = run_json("regions --svg " + path("r.svg"));
  EXPECT_EQ(j["constants"]["S2"], json({"25/49", "25/49"}));
  EXPECT_TRUE(j["passed"]);
  std::ifstream svg(path("r.svg"));
  std::string first;
  std::getline(svg, first);
  EXPECT_EQ(first, "<!-- config_hash=" + j["config_hash"].get<std::string>() + " -->");
}

TEST_F(CliTest, SelftestPasses) {
  auto j = run_json("selftest");
  EXPECT_TRUE(j["passed"]);
  EXPECT_GE(j["checks"].size(), 4u);
}

TEST_F(CliTest, RepeatedRunsAgreeExceptTiming) {
  const std::string args = "sparse improving --form sphere-3 --lambda 9 16 --trials 20 --seed 7";
  auto a = run_json(args);
  auto b = run_json(args);
  auto c = run_json(args + " --workers 2");
  EXPECT_EQ(without_timing(a), without_timing(b));
  EXPECT_EQ(without_timing(a), without_timing(c));
  auto d = run_json("sparse improving --form sphere-3 --lambda 9 16 --trials 20 --seed 8");
  EXPECT_NE(a["config_hash"], d["config_hash"]);
}

TEST_F(CliTest, CsvRoundTripsDoubles) {
  auto j = run_json("arith weyl --form sphere-3 --q 5 --csv " + path("w.csv"));
  auto t = read_csv(path("w.csv"));
  EXPECT_EQ(t.config_hash, j["config_hash"]);
  ASSERT_EQ(t.header.size(), 7u);
  ASSERT_EQ(t.rows.size(), 5u * 125u);
  double best = 0;
  for (auto& r : t.rows)
    if (static_cast<int>(r[1]) != 0) best = std::max(best, std::hypot(r[5], r[6]));
  EXPECT_EQ(best, j["constants"]["max_coprime"].get<double>());
}

TEST_F(CliTest, CacheLifecycle) {
  EXPECT_TRUE(run_json("cache list")["constants"]["entries"].empty());
  auto e = run_json("lattice enumerate --form sphere-3 --lambda 26");
  auto listed = run_json("cache list")["constants"]["entries"];
  ASSERT_EQ(listed.size(), 1u);
  EXPECT_EQ(listed[0]["points"], e["constants"]["points"]);
  EXPECT_EQ(e["constants"]["points"].get<std::size_t>(),
            enumerate_shell(sphere_form(3), CutoffFunction::one(), 26).size());
  EXPECT_TRUE(run_json("cache verify")["passed"]);
  run_json("cache purge");
  EXPECT_TRUE(run_json("cache list")["constants"]["entries"].empty());
}

TEST_F(CliTest, ConfigFileAndFlagPrecedence) {
  {
    std::ofstream c(path("c.json"));
    c << R"({"experiment": "arith congruence", "form": "sphere-5", "L": [2, 3], "bound": 4})";
  }
  auto j = run_json("--config " + path("c.json"));
  EXPECT_EQ(j["experiment"], "arith congruence");
  EXPECT_EQ(j["constants"]["counts"].size(), 2u);
  auto k = run_json("arith congruence --L 5 --config " + path("c.json"));
  EXPECT_EQ(k["constants"]["counts"].size(), 1u);
  EXPECT_TRUE(k["constants"]["counts"].contains("5"));
}

TEST_F(CliTest, AverageWritesGridWithHash) {
  run_json("ops random --dim 2 --side 12 --out " + path("f.bmg"));
  auto j = run_json("ops average --form sphere-2 --lambda 25 --in " + path("f.bmg") + " --out " + path("g.bmg"));
  auto direct = GridFunction::read(path("g.bmg"));
  run_json("ops average --form sphere-2 --lambda 25 --mode fft --in " + path("f.bmg") + " --out " + path("h.bmg"));
  auto fft = GridFunction::read(path("h.bmg"));
  ASSERT_EQ(direct.size(), fft.size());
  for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_NEAR(std::abs(direct.values()[i] - fft.values()[i]), 0.0, 1e-10);
  EXPECT_TRUE(j["passed"]);
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run("run no-such-experiment").code, 2);
  EXPECT_EQ(run("arith weyl --q").code, 2);
  EXPECT_EQ(run("lattice enumerate --lambda 0").code, 2);
  EXPECT_EQ(run("arith weyl --form sphere-5 --q 400").code, 3);
  EXPECT_EQ(run("arith congruence --form sphere-5 --L 2 --bound 0.5").code, 1);
  auto r = run("run no-such-experiment", true);
  auto err = json::parse(r.out);
  EXPECT_EQ(err["exit_code"], 2);
  EXPECT_EQ(err["error"], "usage");
}
