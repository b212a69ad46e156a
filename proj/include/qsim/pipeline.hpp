#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qsim/bkd.hpp"
#include "qsim/model.hpp"
#include "qsim/synth.hpp"

namespace qsim {

/// Everything one run needs. Empty paths fall back to synthetic data and the
/// standard model drawn from `seed`.
struct ExperimentConfig {
  GenConfig gen;
  std::filesystem::path data_dir;
  std::filesystem::path model_path;
  std::filesystem::path weights_dir;
  std::filesystem::path out_dir;

  int bits_w = 4;
  int bits_a = 4;
  ScalerKind scaler = ScalerKind::kWeightDilation;
  double alpha = 0.5;
  bool sq_floor = true;
  CalibMethod calib = CalibMethod::kMse;
  int iters = 500;
  std::size_t batch_size = 32;
  double lr_qparams = 1e-4;
  double lr_weights = 1e-2;
  std::uint64_t seed = 42;
  std::vector<std::uint64_t> seeds;  // compare-scalers trials; empty means {seed}
  InputSource input_source = InputSource::kQuantized;

  std::size_t blocks = 2;
  std::size_t width = 32;
  double row_gain_sigma = 0.75;

  void validate() const;
  QuantConfig quant_config() const;
  TrainConfig train_config() const;
};

ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);
nlohmann::json experiment_to_json(const ExperimentConfig& c);

struct Workload {
  ModelSpec model;
  StackedData data;
};

/// Loads or synthesizes data and weights. Data comes from stream 0 of the
/// root seed and weights from stream 1.
Workload load_workload(const ExperimentConfig& cfg);

struct LayerAnalysis {
  std::string name;  // "b{k}.l{j}", 1-based
  ErrorReport error;
  WdEffect effect;
};

struct PipelineResult {
  std::vector<QuantBlock> calibrated;
  std::vector<LayerAnalysis> layers;
  TrainResult train;
  std::vector<double> fp_second_moment;  // per block output
};

/// FP inputs to every layer, ordered block by block.
std::vector<Tensor> fp_layer_inputs(const ModelSpec& m, const Tensor& x);

/// Post-calibration analysis of one layer: E(X,W) with X quantized by the
/// layer's temporal quantizer and W per out-channel. The activation scale
/// ratio is averaged over timesteps, matching how activations are quantized.
LayerAnalysis analyze_layer(std::string name, const LinearLayer& fp, const QuantLayer& q,
                            const Tensor& x_fp, const TimestepIndex& idx);

/// Scale -> calibrate -> analyze -> train, without touching the filesystem.
PipelineResult run_experiment(const ExperimentConfig& cfg, const Workload& w);

/// run_experiment plus report files in cfg.out_dir, which must be new or empty:
/// loss_history.csv, wd_effects.csv, errors.csv, qparams.json, summary.json.
PipelineResult run_pipeline(const ExperimentConfig& cfg);

void write_reports(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                   const PipelineResult& r);

/// Creates `dir`, failing if it already exists with content.
void prepare_fresh_dir(const std::filesystem::path& dir);

struct ArmRow {
  std::uint64_t seed = 0;
  std::string arm;
  std::string layer;
  double calib_error = 0.0;
  std::size_t block = 0;
  double block_mse = 0.0;
};

/// Runs each arm on identical inputs per seed. SmoothQuant arms are unfloored.
std::vector<ArmRow> compare_scalers(const ExperimentConfig& cfg,
                                    const std::vector<ScalerKind>& arms = {
                                        ScalerKind::kNone, ScalerKind::kSmoothQuant,
                                        ScalerKind::kWeightDilation});

std::string compare_csv(const std::vector<ArmRow>& rows);

}  // namespace qsim
