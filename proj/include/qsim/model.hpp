#pragma once

#include <cstddef>
#include <filesystem>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qsim/rng.hpp"
#include "qsim/tensor.hpp"

namespace qsim {

enum class Activation { kNone, kRelu, kSilu };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation a);

struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  bool bias = true;
  Activation act = Activation::kNone;
};

/// y = act(x W + b) with W stored in-by-out.
struct LinearLayer {
  LayerSpec spec;
  Tensor weight;
  std::vector<float> bias;  // empty when spec.bias is false
};

struct BlockSpec {
  std::vector<LinearLayer> layers;

  std::size_t in_dim() const { return layers.front().spec.in; }
  std::size_t out_dim() const { return layers.back().spec.out; }
};

struct ModelSpec {
  std::size_t T = 1;
  std::vector<BlockSpec> blocks;

  /// Throws unless K >= 1, every block is nonempty and all dimensions chain.
  void validate() const;
};

/// Architecture only; weights start at zero.
ModelSpec model_from_json(const nlohmann::json& j);
nlohmann::json model_to_json(const ModelSpec& m);

/// `width`-wide blocks of [linear+relu, linear] pairs.
ModelSpec standard_model(std::size_t T, std::size_t blocks, std::size_t width);

/// Gaussian init with fan-in scaling. Each in-channel row also gets a
/// log-normal gain exp(row_gain_sigma * N(0,1)) so that a handful of rows
/// carry most per-column extremes, as in trained networks.
void init_weights(ModelSpec& m, RngStream& rng, double row_gain_sigma = 0.75);

/// Weight files are w_b{k}_l{j}.tns and b_b{k}_l{j}.tns, 1-based.
void save_weights(const ModelSpec& m, const std::filesystem::path& dir);
void load_weights(ModelSpec& m, const std::filesystem::path& dir);

float apply_activation(Activation a, float y);

Tensor layer_forward_fp(const LinearLayer& layer, const Tensor& x);
Tensor block_forward_fp(const BlockSpec& block, const Tensor& x);

}  // namespace qsim
