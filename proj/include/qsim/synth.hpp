#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qsim/tensor.hpp"
#include "qsim/tpq.hpp"

namespace qsim {

/// Synthetic timestep-conditioned activations. Step t draws every channel
/// from N(0, (sigma_base * (1 + gamma * t / T))^2); each element is then
/// multiplied by outlier_scale with probability outlier_prob, in all channels.
struct GenConfig {
  std::size_t T = 10;
  std::size_t N = 256;
  std::size_t C = 32;
  double sigma_base = 1.0;
  double gamma = 1.0;
  double outlier_prob = 0.01;
  double outlier_scale = 10.0;
  std::uint64_t seed = 42;

  void validate() const;
};

GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig base = {});
nlohmann::json gen_config_to_json(const GenConfig& g);

/// One N x C tensor per timestep, drawn from the data stream of cfg.seed.
std::vector<Tensor> gen_data(const GenConfig& cfg);

/// Writes act_t{t}.tns for t = 1..T plus manifest.json.
void write_dataset(const std::filesystem::path& dir, const std::vector<Tensor>& steps,
                   const nlohmann::json& manifest);
/// Reads act_t{t}.tns for t = 1, 2, ... until the first missing file.
std::vector<Tensor> load_dataset(const std::filesystem::path& dir);

struct StackedData {
  Tensor x;
  TimestepIndex idx;
};

/// Concatenates per-timestep tensors, labelling rows with 1-based timesteps.
StackedData stack_timesteps(const std::vector<Tensor>& steps);

}  // namespace qsim
