#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "qsim/model.hpp"
#include "qsim/tns_io.hpp"

#ifndef QSIM_CLI_PATH
#error "QSIM_CLI_PATH must point at the built CLI"
#endif

using namespace qsim;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(QSIM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("qsim_cli_" + name);
  fs::remove_all(p);
  return p;
}

const char* kSmall = " --seed 3 --iters 2";

}  // namespace

TEST(Cli, GenDataCalibrateDilate) {
  auto data = scratch("data"), cal = scratch("cal"), dil = scratch("dil");
  ASSERT_EQ(run("gen-data --out " + data.string()), 0);
  EXPECT_TRUE(fs::exists(data / "act_t10.tns"));
  EXPECT_EQ(run("calibrate --method maxmin --bits-a 4 --data " + data.string() + " --out " +
                cal.string()),
            0);
  EXPECT_TRUE(fs::exists(cal / "tpq.json"));

  auto wdir = scratch("w");
  fs::create_directories(wdir);
  save_tns(wdir / "w.tns", Tensor::matrix(3, 2, {1, -2, 0.5f, -1, -0.25f, 0.5f}));
  EXPECT_EQ(run("dilate --weight-file " + (wdir / "w.tns").string() + " --out " + dil.string()),
            0);
  EXPECT_TRUE(fs::exists(dil / "plan.json"));
  for (auto& p : {data, cal, dil, wdir}) fs::remove_all(p);
}

TEST(Cli, TrainAnalyzeCompare) {
  auto cfg = scratch("cfg.json");
  std::ofstream(cfg) << R"({"gen": {"T": 3, "N": 16, "C": 4}, "width": 4, "batch_size": 8})";
  auto tr = scratch("train"), an = scratch("analyze"), cmp = scratch("cmp");
  const std::string base = " --config " + cfg.string() + kSmall;
  EXPECT_EQ(run("train-bkd" + base + " --out " + tr.string()), 0);
  EXPECT_TRUE(fs::exists(tr / "summary.json"));
  EXPECT_EQ(run("analyze" + base + " --scaler none --out " + an.string()), 0);
  EXPECT_TRUE(fs::exists(an / "errors.csv"));
  EXPECT_EQ(run("compare-scalers" + base + " --out " + cmp.string()), 0);
  EXPECT_TRUE(fs::exists(cmp / "comparison.csv"));
  for (auto& p : {cfg, tr, an, cmp}) fs::remove_all(p);
}

TEST(Cli, ValidationFailuresExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("no-such-command"), 1);
  auto out = scratch("v");
  EXPECT_EQ(run("train-bkd --bits-w 0 --out " + out.string()), 1);
  EXPECT_EQ(run("train-bkd --scaler awq --out " + out.string()), 1);
  EXPECT_EQ(run("train-bkd --seed 1"), 1);  // --out missing
  fs::remove_all(out);
}

TEST(Cli, IoFailuresExitTwo) {
  auto out = scratch("io");
  EXPECT_EQ(run("train-bkd --data /nonexistent/qsim --out " + out.string()), 2);
  EXPECT_EQ(run("train-bkd --config /nonexistent/qsim.json --out " + out.string()), 2);

  fs::create_directories(out);
  std::ofstream(out / "keep.txt") << "occupied";
  EXPECT_EQ(run("gen-data --out " + out.string()), 2);
  fs::remove_all(out);
}

TEST(Cli, NumericalFailureExitsThree) {
  // Finite but enormous weights overflow the forward pass.
  auto wdir = scratch("bigw"), out = scratch("nan");
  auto m = standard_model(10, 2, 32);
  for (auto& b : m.blocks)
    for (auto& l : b.layers) {
      l.weight = Tensor(l.weight.shape(), 1e30f);
      std::fill(l.bias.begin(), l.bias.end(), 0.0f);
    }
  fs::create_directories(wdir);
  save_weights(m, wdir);
  EXPECT_EQ(run("train-bkd --iters 1 --weights " + wdir.string() + " --out " + out.string()), 3);
  fs::remove_all(wdir);
  fs::remove_all(out);
}
