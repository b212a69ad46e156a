#include "qsim/pipeline.hpp"

#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qsim/errors.hpp"
#include "qsim/rng.hpp"

namespace qsim {

namespace {

// Prefixes the stage name while keeping the exception family, so the CLI exit
// code still reflects the original failure.
[[noreturn]] void rethrow_in_stage(const std::string& stage, const Error& e) {
  const std::string msg = fmt::format("{}: {}", stage, e.what());
  if (dynamic_cast<const NumericalError*>(&e)) throw NumericalError(msg);
  if (dynamic_cast<const IoError*>(&e)) throw IoError(msg);
  if (dynamic_cast<const ShapeError*>(&e)) throw ShapeError(msg);
  throw ValidationError(msg);
}

}  // namespace

void ExperimentConfig::validate() const {
  if (bits_w < 1 || bits_w > kMaxBits || bits_a < 1 || bits_a > kMaxBits) {
    throw ValidationError(fmt::format("bit-widths must lie in [1,{}]", kMaxBits));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0,1]");
  if (iters < 0) throw ValidationError("iters must be >= 0");
  if (batch_size == 0) throw ValidationError("batch_size must be positive");
  if (!(lr_qparams >= 0.0) || !(lr_weights >= 0.0)) {
    throw ValidationError("learning rates must be nonnegative");
  }
  if (blocks == 0 || width == 0) throw ValidationError("blocks and width must be positive");
  for (const auto* p : {&data_dir, &model_path, &weights_dir}) {
    if (!p->empty() && !std::filesystem::exists(*p)) {
      throw IoError(fmt::format("path does not exist: {}", p->string()));
    }
  }
  gen.validate();
}

QuantConfig ExperimentConfig::quant_config() const {
  return QuantConfig{bits_w, bits_a, calib, scaler, alpha, sq_floor};
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.iters = iters;
  t.batch_size = batch_size;
  t.lr_qparams = lr_qparams;
  t.lr_weights = lr_weights;
  t.input_source = input_source;
  t.seed = seed;
  return t;
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("gen")) c.gen = gen_config_from_json(j.at("gen"));
    c.data_dir = j.value("data_dir", std::string());
    c.model_path = j.value("model", std::string());
    c.weights_dir = j.value("weights_dir", std::string());
    c.out_dir = j.value("out", std::string());
    c.bits_w = j.value("bits_w", c.bits_w);
    c.bits_a = j.value("bits_a", c.bits_a);
    c.scaler = parse_scaler(j.value("scaler", std::string(to_string(c.scaler))));
    c.alpha = j.value("alpha", c.alpha);
    c.sq_floor = j.value("sq_floor", c.sq_floor);
    c.calib = parse_calib_method(j.value("calibration", std::string(to_string(c.calib))));
    c.iters = j.value("iters", c.iters);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_qparams = j.value("lr_qparams", c.lr_qparams);
    c.lr_weights = j.value("lr_weights", c.lr_weights);
    c.seed = j.value("seed", c.seed);
    c.seeds = j.value("seeds", c.seeds);
    c.input_source =
        parse_input_source(j.value("input_source", std::string(to_string(c.input_source))));
    c.blocks = j.value("blocks", c.blocks);
    c.width = j.value("width", c.width);
    c.row_gain_sigma = j.value("row_gain_sigma", c.row_gain_sigma);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("invalid experiment config: {}", e.what()));
  }
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(fmt::format("cannot open config {}", path.string()));
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return experiment_from_json(j);
}

nlohmann::json experiment_to_json(const ExperimentConfig& c) {
  return {{"gen", gen_config_to_json(c.gen)},
          {"data_dir", c.data_dir.string()},
          {"model", c.model_path.string()},
          {"weights_dir", c.weights_dir.string()},
          {"bits_w", c.bits_w},
          {"bits_a", c.bits_a},
          {"scaler", std::string(to_string(c.scaler))},
          {"alpha", c.alpha},
          {"sq_floor", c.sq_floor},
          {"calibration", std::string(to_string(c.calib))},
          {"iters", c.iters},
          {"batch_size", c.batch_size},
          {"lr_qparams", c.lr_qparams},
          {"lr_weights", c.lr_weights},
          {"seed", c.seed},
          {"seeds", c.seeds},
          {"input_source", std::string(to_string(c.input_source))},
          {"blocks", c.blocks},
          {"width", c.width},
          {"row_gain_sigma", c.row_gain_sigma}};
}

Workload load_workload(const ExperimentConfig& cfg) {
  Workload w;
  std::vector<Tensor> steps;
  if (!cfg.data_dir.empty()) {
    steps = load_dataset(cfg.data_dir);
  } else {
    GenConfig g = cfg.gen;
    g.seed = cfg.seed;
    steps = gen_data(g);
  }
  if (!cfg.model_path.empty()) {
    std::ifstream f(cfg.model_path);
    if (!f) throw IoError(fmt::format("cannot open model {}", cfg.model_path.string()));
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(fmt::format("{}: {}", cfg.model_path.string(), e.what()));
    }
    w.model = model_from_json(j);
  } else {
    w.model = standard_model(steps.size(), cfg.blocks, steps.front().cols());
  }
  if (w.model.T != steps.size()) {
    throw ValidationError(fmt::format("model expects T={} but data has {} timesteps",
                                      w.model.T, steps.size()));
  }
  if (!cfg.weights_dir.empty()) {
    load_weights(w.model, cfg.weights_dir);
  } else {
    RngStream rng(cfg.seed, kStreamInit);
    init_weights(w.model, rng, cfg.row_gain_sigma);
  }
  w.data = stack_timesteps(steps);
  if (w.data.x.cols() != w.model.blocks.front().in_dim()) {
    throw ShapeError(fmt::format("data has {} channels, model expects {}", w.data.x.cols(),
                                 w.model.blocks.front().in_dim()));
  }
  return w;
}

std::vector<Tensor> fp_layer_inputs(const ModelSpec& m, const Tensor& x) {
  std::vector<Tensor> out;
  Tensor a = x;
  for (const auto& b : m.blocks) {
    for (const auto& l : b.layers) {
      out.push_back(a);
      a = layer_forward_fp(l, a);
    }
  }
  return out;
}

LayerAnalysis analyze_layer(std::string name, const LinearLayer& fp, const QuantLayer& q,
                            const Tensor& x_fp, const TimestepIndex& idx) {
  ScalingPlan plan = identity_plan(q.scale.size());
  plan.s = q.scale;
  const ScaledPair sp = apply_scaling(x_fp, fp.weight, plan);

  const Tensor qx = tpq_quantize(sp.x, idx, q.act);
  const std::vector<std::int64_t> wz(q.w_zero.begin(), q.w_zero.end());
  const QuantParams qw = QuantParams::per_out_channel(q.bits_w, q.w_delta, wz);
  const Tensor qwt = quantize(sp.w, qw);

  // Round/clip split of X, one timestep group at a time.
  ErrorReport x_split;
  const auto steps = split_by_timestep(sp.x, idx, q.act.T());
  for (std::uint32_t t = 1; t <= q.act.T(); ++t) {
    const ErrorReport r = error_decompose(steps[t - 1], q.act.at(t));
    x_split.round_error += r.round_error;
    x_split.clip_error += r.clip_error;
  }
  LayerAnalysis a;
  a.name = std::move(name);
  a.error = product_error(sp.x, qx, sp.w, qwt, x_split, error_decompose(sp.w, qw));

  a.effect = wd_effect_stats(x_fp, fp.weight, plan, q.act.bits);
  const auto fp_steps = split_by_timestep(x_fp, idx, q.act.T());
  double ratio_sum = 0.0;
  for (std::size_t t = 0; t < fp_steps.size(); ++t) {
    const Tensor xs = scale_activation(fp_steps[t], plan);
    ratio_sum += calibrate_maxmin(xs, q.act.bits, Granularity::kPerTensor).delta[0] /
                 calibrate_maxmin(fp_steps[t], q.act.bits, Granularity::kPerTensor).delta[0];
  }
  a.effect.dx_ratio = ratio_sum / static_cast<double>(fp_steps.size());
  return a;
}

PipelineResult run_experiment(const ExperimentConfig& cfg, const Workload& w) {
  const ModelSpec& m = w.model;
  const auto& idx = w.data.idx;
  PipelineResult r;

  const QuantConfig qc = cfg.quant_config();
  std::vector<Tensor> inputs;
  try {
    inputs = fp_layer_inputs(m, w.data.x);
  } catch (const Error& e) {
    rethrow_in_stage("fp forward", e);
  }
  std::size_t li = 0;
  Tensor block_in = w.data.x;
  for (std::size_t k = 0; k < m.blocks.size(); ++k) {
    QuantBlock qb;
    try {
      qb = calibrate_block(m.blocks[k], block_in, idx, m.T, qc);
    } catch (const Error& e) {
      rethrow_in_stage(fmt::format("calibration: block {}", k + 1), e);
    }
    for (std::size_t j = 0; j < qb.layers.size(); ++j, ++li) {
      const std::string name = fmt::format("b{}.l{}", k + 1, j + 1);
      try {
        r.layers.push_back(
            analyze_layer(name, m.blocks[k].layers[j], qb.layers[j], inputs[li], idx));
      } catch (const Error& e) {
        rethrow_in_stage(fmt::format("analyze: {}", name), e);
      }
    }
    const Tensor out = block_forward_fp(m.blocks[k], block_in);
    double sq = 0.0;
    for (float v : out.data()) sq += static_cast<double>(v) * v;
    r.fp_second_moment.push_back(sq / static_cast<double>(out.numel()));
    block_in = out;
    r.calibrated.push_back(std::move(qb));
  }

  try {
    r.train = bkd_train(m, r.calibrated, w.data.x, idx, cfg.train_config());
  } catch (const Error& e) {
    rethrow_in_stage("train-bkd", e);
  }
  return r;
}

void prepare_fresh_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir) || !fs::is_empty(dir)) {
      throw IoError(fmt::format("output directory {} already exists and is not empty",
                                dir.string()));
    }
    return;
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
}

namespace {

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(fmt::format("cannot write {}", p.string()));
  f << s;
  if (!f) throw IoError(fmt::format("write failed for {}", p.string()));
}

}  // namespace

void write_reports(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                   const PipelineResult& r) {
  std::string loss = "step,block,loss\n";
  for (const auto& h : r.train.history) loss += fmt::format("{},{},{}\n", h.step, h.block, h.loss);
  write_text(dir / "loss_history.csv", loss);

  std::string effects = wd_effect_csv_header() + "\n";
  std::string errors = error_csv_header() + "\n";
  for (const auto& l : r.layers) {
    effects += wd_effect_csv_row(l.name, l.effect) + "\n";
    errors += error_csv_row(l.name, l.error) + "\n";
  }
  write_text(dir / "wd_effects.csv", effects);
  write_text(dir / "errors.csv", errors);

  nlohmann::json qparams = nlohmann::json::array();
  for (std::size_t k = 0; k < r.train.blocks.size(); ++k) {
    const auto& b = r.train.blocks[k];
    for (std::size_t j = 0; j < b.layers.size(); ++j) {
      const auto& l = b.layers[j];
      std::vector<std::int64_t> wz;
      for (double z : l.w_zero) wz.push_back(static_cast<std::int64_t>(z));
      qparams.push_back({{"layer", fmt::format("b{}.l{}", k + 1, j + 1)},
                         {"scale", l.scale},
                         {"act", tpq_to_json(l.act)},
                         {"w_bits", l.bits_w},
                         {"w_delta", l.w_delta},
                         {"w_zero_point", wz}});
    }
  }
  write_text(dir / "qparams.json", qparams.dump(2) + "\n");

  nlohmann::json blocks = nlohmann::json::array();
  for (std::size_t k = 0; k < r.train.loss_before.size(); ++k) {
    blocks.push_back({{"block", k + 1},
                      {"calib_mse", r.train.loss_before[k]},
                      {"final_mse", r.train.loss_after[k]},
                      {"fp_second_moment", r.fp_second_moment[k]}});
  }
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"layer", l.name},
                      {"calib_error", l.error.total_error},
                      {"prop_s_gt_1", l.effect.prop_s_gt_1},
                      {"dx_ratio", l.effect.dx_ratio},
                      {"dw_ratio", l.effect.dw_ratio_mean()}});
  }
  nlohmann::json summary = {{"config", experiment_to_json(cfg)},
                            {"blocks", blocks},
                            {"layers", layers}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
}

PipelineResult run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.out_dir.empty()) throw ValidationError("run_pipeline needs an output directory");
  prepare_fresh_dir(cfg.out_dir);
  Workload w;
  try {
    w = load_workload(cfg);
  } catch (const Error& e) {
    rethrow_in_stage("load", e);
  }
  PipelineResult r = run_experiment(cfg, w);
  write_reports(cfg.out_dir, cfg, r);
  return r;
}

std::vector<ArmRow> compare_scalers(const ExperimentConfig& cfg,
                                    const std::vector<ScalerKind>& arms) {
  cfg.validate();
  const std::vector<std::uint64_t> seeds =
      cfg.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.seeds;
  std::vector<ArmRow> rows;
  for (const auto seed : seeds) {
    ExperimentConfig base = cfg;
    base.seed = seed;
    const Workload w = load_workload(base);
    for (const auto arm : arms) {
      ExperimentConfig c = base;
      c.scaler = arm;
      c.sq_floor = false;
      const PipelineResult r = run_experiment(c, w);
      std::size_t li = 0;
      for (std::size_t k = 0; k < w.model.blocks.size(); ++k) {
        for (std::size_t j = 0; j < w.model.blocks[k].layers.size(); ++j, ++li) {
          rows.push_back({seed, std::string(to_string(arm)), r.layers[li].name,
                          r.layers[li].error.total_error, k + 1, r.train.loss_after[k]});
        }
      }
    }
  }
  return rows;
}

std::string compare_csv(const std::vector<ArmRow>& rows) {
  std::string s = "seed,arm,layer,calib_error,block,block_mse\n";
  for (const auto& r : rows) {
    s += fmt::format("{},{},{},{},{},{}\n", r.seed, r.arm, r.layer, r.calib_error, r.block,
                     r.block_mse);
  }
  return s;
}

}  // namespace qsim
