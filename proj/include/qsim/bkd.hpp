#pragma once

#include <cstdint>
#include <vector>

#include "qsim/model.hpp"
#include "qsim/quantizer.hpp"
#include "qsim/scaling.hpp"
#include "qsim/tpq.hpp"

namespace qsim {

/// Row-major float64 matrix used on the training path.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}
  static Mat from(const Tensor& t);
  Tensor to_tensor() const;
  double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

inline constexpr double kMinDelta = 1e-8;

/// Trainable state of one quantized linear layer. `scale` is the fixed
/// equivalent-scaling vector: the layer computes Q(x / s) Q(s W) + b, and
/// `weight` already holds s W.
struct QuantLayer {
  LayerSpec spec;
  std::vector<float> scale;
  Mat weight;
  std::vector<double> bias;
  std::vector<double> w_delta;  // per out-channel
  std::vector<double> w_zero;   // per out-channel, integer-valued, not trained
  int bits_w = 4;
  TemporalQuantParams act;
};

struct QuantBlock {
  std::vector<QuantLayer> layers;
};

/// Gradients with the same layout as the trainables of a QuantBlock.
struct LayerGrads {
  Mat weight;
  std::vector<double> bias;
  std::vector<double> w_delta;
  std::vector<double> act_delta;
  std::vector<double> act_zero;
};

struct BlockGrads {
  double loss = 0.0;
  std::vector<LayerGrads> layers;
};

struct QuantConfig {
  int bits_w = 4;
  int bits_a = 4;
  CalibMethod method = CalibMethod::kMse;
  ScalerKind scaler = ScalerKind::kNone;
  double sq_alpha = 0.5;
  bool sq_floor = true;
};

/// Builds the scaling plan for one layer from its weight and FP input.
ScalingPlan make_plan(ScalerKind kind, const Tensor& w, const Tensor& x_fp, double alpha,
                      bool floor_at_one);

/// Scales and calibrates every layer of `fp`; `x` holds the block's
/// calibration inputs with their timestep labels.
QuantBlock calibrate_block(const BlockSpec& fp, const Tensor& x, const TimestepIndex& idx,
                           std::size_t T, const QuantConfig& cfg);

Tensor block_forward_q(const QuantBlock& q, const Tensor& x, const TimestepIndex& idx);

double mse(const Tensor& a, const Tensor& b);

/// Mean squared difference between B_k(x) and its quantized counterpart.
double bkd_loss(const BlockSpec& fp, const QuantBlock& q, const Tensor& x,
                const TimestepIndex& idx);

/// Reverse-mode gradients of mean((Q-block(x) - target)^2). Rounding uses the
/// straight-through estimator, scale factors use the LSQ rule and zero-points
/// receive -delta on clipped elements only.
BlockGrads bkd_backward(const QuantBlock& q, const Tensor& x, const TimestepIndex& idx,
                        const Tensor& target);
BlockGrads bkd_backward(const BlockSpec& fp, const QuantBlock& q, const Tensor& x,
                        const TimestepIndex& idx);

enum class InputSource { kQuantized, kFullPrecision };

InputSource parse_input_source(std::string_view name);
std::string_view to_string(InputSource s);

struct TrainConfig {
  int iters = 500;
  std::size_t batch_size = 32;
  double lr_qparams = 1e-4;
  double lr_weights = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  InputSource input_source = InputSource::kQuantized;
  std::uint64_t seed = 42;
};

struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
};

/// Adam moments for every trainable of one block.
struct BlockMoments {
  struct Layer {
    AdamSlot weight, bias, w_delta, act_delta, act_zero;
  };
  std::vector<Layer> layers;
};

struct LossRecord {
  int step = 0;
  std::size_t block = 0;  // 1-based
  double loss = 0.0;
};

/// Trainables, optimizer moments and loss history for one block.
struct TrainState {
  QuantBlock block;
  BlockMoments moments;
  int step = 0;
  double lr_qparams = 1e-4;
  double lr_weights = 1e-2;
  std::vector<double> loss_history;
};

TrainState make_train_state(QuantBlock block, const TrainConfig& cfg);

/// One Adam step. Temporal quantizer lanes move only for timesteps present in
/// `present` (size T); scale factors are projected to >= kMinDelta.
void adam_step(TrainState& st, const BlockGrads& g, const std::vector<bool>& present,
               const TrainConfig& cfg);

struct TrainResult {
  std::vector<QuantBlock> blocks;
  std::vector<LossRecord> history;
  std::vector<double> loss_before;  // full-set block MSE before training block k
  std::vector<double> loss_after;   // full-set block MSE after training block k
};

/// Trains blocks 1..K in order against their FP counterparts. Block k's input
/// comes from the trained quantized predecessors (or the FP chain, per
/// cfg.input_source); its target is B_k of the FP chain.
TrainResult bkd_train(const ModelSpec& model, std::vector<QuantBlock> init, const Tensor& x,
                      const TimestepIndex& idx, const TrainConfig& cfg);

}  // namespace qsim
