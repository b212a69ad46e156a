// Command-line front end: data generation, scaling, calibration, block-wise
// distillation and report emission.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qsim/errors.hpp"
#include "qsim/pipeline.hpp"
#include "qsim/scaling.hpp"
#include "qsim/synth.hpp"
#include "qsim/tns_io.hpp"
#include "qsim/tpq.hpp"

namespace fs = std::filesystem;
using namespace qsim;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> bits_w;
  std::optional<int> bits_a;
  std::string scaler;
  std::optional<double> alpha;
  std::optional<int> iters;
  std::string data;
  std::string model;
  std::string weights;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "experiment config JSON");
  cmd->add_option("--seed", o.seed, "root seed");
  cmd->add_option("--out", o.out, "output directory (must be new or empty)");
  cmd->add_option("--bits-w", o.bits_w, "weight bit-width");
  cmd->add_option("--bits-a", o.bits_a, "activation bit-width");
  cmd->add_option("--scaler", o.scaler, "none | smoothquant | wd");
  cmd->add_option("--alpha", o.alpha, "SmoothQuant smoothing factor");
  cmd->add_option("--iters", o.iters, "training iterations per block");
  cmd->add_option("--data", o.data, "directory of act_t{t}.tns files");
  cmd->add_option("--model", o.model, "model spec JSON");
  cmd->add_option("--weights", o.weights, "directory of w_b{k}_l{j}.tns files");
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(fmt::format("cannot open {}", path));
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("{}: {}", path, e.what()));
  }
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_experiment(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  if (o.bits_w) c.bits_w = *o.bits_w;
  if (o.bits_a) c.bits_a = *o.bits_a;
  if (!o.scaler.empty()) c.scaler = parse_scaler(o.scaler);
  if (o.alpha) c.alpha = *o.alpha;
  if (o.iters) c.iters = *o.iters;
  if (!o.data.empty()) c.data_dir = o.data;
  if (!o.model.empty()) c.model_path = o.model;
  if (!o.weights.empty()) c.weights_dir = o.weights;
  if (c.out_dir.empty()) throw ValidationError("--out is required");
  c.validate();
  return c;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(fmt::format("cannot write {}", p.string()));
  f << text;
}

void cmd_gen_data(const Overrides& o) {
  GenConfig g;
  if (!o.config.empty()) {
    const auto j = read_json(o.config);
    g = gen_config_from_json(j.contains("gen") ? j.at("gen") : j);
  }
  if (o.seed) g.seed = *o.seed;
  if (o.out.empty()) throw ValidationError("--out is required");
  prepare_fresh_dir(o.out);
  write_dataset(o.out, gen_data(g), gen_config_to_json(g));
  fmt::print("wrote {} timesteps to {}\n", g.T, o.out);
}

void cmd_calibrate(const Overrides& o, const std::string& method) {
  if (o.data.empty() || o.out.empty()) throw ValidationError("--data and --out are required");
  const int bits = o.bits_a.value_or(4);
  const auto steps = load_dataset(o.data);
  const auto q = tpq_init(steps, bits, parse_calib_method(method));
  prepare_fresh_dir(o.out);
  write_file(fs::path(o.out) / "tpq.json", tpq_to_json(q).dump(2) + "\n");
  std::string csv = error_csv_header() + "\n";
  for (std::uint32_t t = 1; t <= q.T(); ++t) {
    csv += error_csv_row(fmt::format("t{}", t), error_decompose(steps[t - 1], q.at(t))) + "\n";
  }
  write_file(fs::path(o.out) / "calib_errors.csv", csv);
  fmt::print("calibrated {} timesteps at {} bits\n", q.T(), bits);
}

void cmd_dilate(const Overrides& o, const std::string& weight_file) {
  if (weight_file.empty() || o.out.empty()) {
    throw ValidationError("--weight-file and --out are required");
  }
  const Tensor w = load_tns(weight_file);
  require_rank2(w, "weight");
  const ScalingPlan plan = wd_plan(w);
  prepare_fresh_dir(o.out);
  write_file(fs::path(o.out) / "plan.json", plan_to_json(plan).dump(2) + "\n");
  save_tns(fs::path(o.out) / "w_scaled.tns", scale_weight(w, plan));
  if (!o.data.empty()) {
    const auto stacked = stack_timesteps(load_dataset(o.data));
    const WdEffect e = wd_effect_stats(stacked.x, w, plan, o.bits_a.value_or(4));
    write_file(fs::path(o.out) / "wd_effects.csv",
               wd_effect_csv_header() + "\n" + wd_effect_csv_row("input", e) + "\n");
  }
  fmt::print("dilated {} of {} in-channels\n",
             plan.s.size() - plan.saturated.size(), plan.s.size());
}

void cmd_train(const Overrides& o, bool analyze_only) {
  ExperimentConfig c = resolve(o);
  if (analyze_only) c.iters = 0;
  const PipelineResult r = run_pipeline(c);
  for (std::size_t k = 0; k < r.train.loss_before.size(); ++k) {
    fmt::print("block {}: calib mse {:.6g} -> final mse {:.6g}\n", k + 1,
               r.train.loss_before[k], r.train.loss_after[k]);
  }
}

void cmd_compare(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  prepare_fresh_dir(c.out_dir);
  const auto rows = compare_scalers(c);
  write_file(c.out_dir / "comparison.csv", compare_csv(rows));
  fmt::print("wrote {} rows to {}\n", rows.size(), (c.out_dir / "comparison.csv").string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization simulation toolkit"};
  app.require_subcommand(1);

  Overrides gen_o, cal_o, dil_o, train_o, cmp_o, ana_o;
  std::string method = "mse";
  std::string weight_file;

  auto* gen = app.add_subcommand("gen-data", "generate synthetic per-timestep activations");
  add_common(gen, gen_o);
  auto* cal = app.add_subcommand("calibrate", "fit a temporal activation quantizer to data");
  add_common(cal, cal_o);
  cal->add_option("--method", method, "maxmin | mse");
  auto* dil = app.add_subcommand("dilate", "compute a weight dilation plan for one weight");
  add_common(dil, dil_o);
  dil->add_option("--weight-file", weight_file, "rank-2 weight TNS file");
  auto* train = app.add_subcommand("train-bkd", "scale, calibrate and distill block by block");
  add_common(train, train_o);
  auto* cmp = app.add_subcommand("compare-scalers", "compare none / smoothquant / wd arms");
  add_common(cmp, cmp_o);
  auto* ana = app.add_subcommand("analyze", "post-calibration error and scaling reports");
  add_common(ana, ana_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) cmd_gen_data(gen_o);
    else if (*cal) cmd_calibrate(cal_o, method);
    else if (*dil) cmd_dilate(dil_o, weight_file);
    else if (*train) cmd_train(train_o, false);
    else if (*cmp) cmd_compare(cmp_o);
    else if (*ana) cmd_train(ana_o, true);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
