#include "qsim/synth.hpp"

#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qsim/errors.hpp"
#include "qsim/rng.hpp"
#include "qsim/tns_io.hpp"

namespace qsim {

void GenConfig::validate() const {
  if (T < 1 || N < 1 || C < 1) throw ValidationError("gen config: T, N and C must be positive");
  if (!(sigma_base > 0.0)) throw ValidationError("gen config: sigma_base must be positive");
  if (!(gamma >= 0.0)) throw ValidationError("gen config: gamma must be nonnegative");
  if (!(outlier_prob >= 0.0 && outlier_prob <= 1.0)) {
    throw ValidationError("gen config: outlier_prob must lie in [0,1]");
  }
  if (!(outlier_scale >= 1.0)) throw ValidationError("gen config: outlier_scale must be >= 1");
}

GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig g) {
  try {
    g.T = j.value("T", g.T);
    g.N = j.value("N", g.N);
    g.C = j.value("C", g.C);
    g.sigma_base = j.value("sigma_base", g.sigma_base);
    g.gamma = j.value("gamma", g.gamma);
    g.outlier_prob = j.value("outlier_prob", g.outlier_prob);
    g.outlier_scale = j.value("outlier_scale", g.outlier_scale);
    g.seed = j.value("seed", g.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("invalid gen config: {}", e.what()));
  }
  g.validate();
  return g;
}

nlohmann::json gen_config_to_json(const GenConfig& g) {
  return {{"T", g.T},         {"N", g.N},
          {"C", g.C},         {"sigma_base", g.sigma_base},
          {"gamma", g.gamma}, {"outlier_prob", g.outlier_prob},
          {"outlier_scale", g.outlier_scale}, {"seed", g.seed}};
}

std::vector<Tensor> gen_data(const GenConfig& cfg) {
  cfg.validate();
  RngStream rng(cfg.seed, kStreamData);
  std::vector<Tensor> steps;
  steps.reserve(cfg.T);
  for (std::size_t t = 1; t <= cfg.T; ++t) {
    const double sigma =
        cfg.sigma_base * (1.0 + cfg.gamma * static_cast<double>(t) / static_cast<double>(cfg.T));
    Tensor x({cfg.N, cfg.C});
    for (float& v : x.data()) {
      double val = sigma * rng.normal();
      // The outlier draw is consumed unconditionally so streams line up for any p.
      if (rng.uniform() < cfg.outlier_prob) val *= cfg.outlier_scale;
      v = static_cast<float>(val);
    }
    steps.push_back(std::move(x));
  }
  return steps;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<Tensor>& steps,
                   const nlohmann::json& manifest) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  for (std::size_t t = 0; t < steps.size(); ++t) {
    save_tns(dir / fmt::format("act_t{}.tns", t + 1), steps[t]);
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError(fmt::format("cannot write manifest in {}", dir.string()));
  f << manifest.dump(2) << '\n';
}

std::vector<Tensor> load_dataset(const std::filesystem::path& dir) {
  std::vector<Tensor> steps;
  for (std::size_t t = 1;; ++t) {
    const auto p = dir / fmt::format("act_t{}.tns", t);
    if (!std::filesystem::exists(p)) break;
    steps.push_back(load_tns(p));
  }
  if (steps.empty()) throw IoError(fmt::format("no act_t*.tns files in {}", dir.string()));
  return steps;
}

StackedData stack_timesteps(const std::vector<Tensor>& steps) {
  if (steps.empty()) throw ValidationError("no timesteps to stack");
  StackedData out;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    require_rank2(steps[t], "timestep tensor");
    out.idx.t.insert(out.idx.t.end(), steps[t].rows(), static_cast<std::uint32_t>(t + 1));
  }
  out.x = concat_rows(steps);
  return out;
}

}  // namespace qsim
