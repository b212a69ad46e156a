#include "qsim/model.hpp"

#include <cmath>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qsim/errors.hpp"
#include "qsim/tns_io.hpp"

namespace qsim {

Activation parse_activation(std::string_view name) {
  if (name == "none") return Activation::kNone;
  if (name == "relu") return Activation::kRelu;
  if (name == "silu") return Activation::kSilu;
  throw ValidationError(fmt::format("unknown activation '{}'", name));
}

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kNone: return "none";
    case Activation::kRelu: return "relu";
    case Activation::kSilu: return "silu";
  }
  return "none";
}

void ModelSpec::validate() const {
  if (T < 1) throw ValidationError("model needs T >= 1");
  if (blocks.empty()) throw ValidationError("model needs at least one block");
  std::size_t prev_out = 0;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& b = blocks[k];
    if (b.layers.empty()) throw ValidationError(fmt::format("block {} has no layers", k + 1));
    if (k > 0 && b.in_dim() != prev_out) {
      throw ShapeError(fmt::format("block {} input {} does not match block {} output {}", k + 1,
                                   b.in_dim(), k, prev_out));
    }
    for (std::size_t j = 0; j < b.layers.size(); ++j) {
      const auto& l = b.layers[j];
      if (l.spec.in == 0 || l.spec.out == 0) {
        throw ValidationError(fmt::format("block {} layer {} has a zero dimension", k + 1, j + 1));
      }
      if (j > 0 && l.spec.in != b.layers[j - 1].spec.out) {
        throw ShapeError(fmt::format("block {} layer {} input {} does not chain", k + 1, j + 1,
                                     l.spec.in));
      }
      if (l.weight.shape() != Shape{l.spec.in, l.spec.out}) {
        throw ShapeError(fmt::format("block {} layer {} weight shape {} != [{}x{}]", k + 1,
                                     j + 1, shape_str(l.weight.shape()), l.spec.in, l.spec.out));
      }
      if (l.bias.size() != (l.spec.bias ? l.spec.out : 0)) {
        throw ShapeError(fmt::format("block {} layer {} bias length mismatch", k + 1, j + 1));
      }
    }
    prev_out = b.out_dim();
  }
}

namespace {

LinearLayer make_layer(const LayerSpec& spec) {
  LinearLayer l;
  l.spec = spec;
  l.weight = Tensor({spec.in, spec.out});
  if (spec.bias) l.bias.assign(spec.out, 0.0f);
  return l;
}

}  // namespace

ModelSpec model_from_json(const nlohmann::json& j) {
  ModelSpec m;
  try {
    j.at("T").get_to(m.T);
    for (const auto& jb : j.at("blocks")) {
      BlockSpec b;
      for (const auto& jl : jb.at("layers")) {
        LayerSpec s;
        jl.at("in").get_to(s.in);
        jl.at("out").get_to(s.out);
        s.bias = jl.value("bias", true);
        s.act = parse_activation(jl.value("act", std::string("none")));
        if (s.in == 0 || s.out == 0) throw ValidationError("layer dimensions must be positive");
        b.layers.push_back(make_layer(s));
      }
      m.blocks.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("invalid model JSON: {}", e.what()));
  }
  m.validate();
  return m;
}

nlohmann::json model_to_json(const ModelSpec& m) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : m.blocks) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : b.layers) {
      layers.push_back({{"in", l.spec.in},
                        {"out", l.spec.out},
                        {"bias", l.spec.bias},
                        {"act", std::string(to_string(l.spec.act))}});
    }
    blocks.push_back({{"layers", layers}});
  }
  return {{"T", m.T}, {"blocks", blocks}};
}

ModelSpec standard_model(std::size_t T, std::size_t blocks, std::size_t width) {
  ModelSpec m;
  m.T = T;
  for (std::size_t k = 0; k < blocks; ++k) {
    BlockSpec b;
    b.layers.push_back(make_layer({width, width, true, Activation::kRelu}));
    b.layers.push_back(make_layer({width, width, true, Activation::kNone}));
    m.blocks.push_back(std::move(b));
  }
  m.validate();
  return m;
}

void init_weights(ModelSpec& m, RngStream& rng, double row_gain_sigma) {
  for (auto& b : m.blocks) {
    for (auto& l : b.layers) {
      const double fan = 1.0 / std::sqrt(static_cast<double>(l.spec.in));
      for (std::size_t i = 0; i < l.spec.in; ++i) {
        const double gain = std::exp(row_gain_sigma * rng.normal());
        for (float& v : l.weight.row(i)) v = static_cast<float>(fan * gain * rng.normal());
      }
      for (float& v : l.bias) v = static_cast<float>(0.05 * rng.normal());
    }
  }
}

namespace {

std::filesystem::path weight_path(const std::filesystem::path& dir, char kind, std::size_t k,
                                  std::size_t j) {
  return dir / fmt::format("{}_b{}_l{}.tns", kind, k + 1, j + 1);
}

}  // namespace

void save_weights(const ModelSpec& m, const std::filesystem::path& dir) {
  for (std::size_t k = 0; k < m.blocks.size(); ++k) {
    for (std::size_t j = 0; j < m.blocks[k].layers.size(); ++j) {
      const auto& l = m.blocks[k].layers[j];
      save_tns(weight_path(dir, 'w', k, j), l.weight);
      if (l.spec.bias) save_tns(weight_path(dir, 'b', k, j), Tensor::vector(l.bias));
    }
  }
}

void load_weights(ModelSpec& m, const std::filesystem::path& dir) {
  for (std::size_t k = 0; k < m.blocks.size(); ++k) {
    for (std::size_t j = 0; j < m.blocks[k].layers.size(); ++j) {
      auto& l = m.blocks[k].layers[j];
      Tensor w = load_tns(weight_path(dir, 'w', k, j));
      if (w.shape() != Shape{l.spec.in, l.spec.out}) {
        throw ShapeError(fmt::format("weight file for block {} layer {} has shape {}", k + 1,
                                     j + 1, shape_str(w.shape())));
      }
      l.weight = std::move(w);
      if (l.spec.bias) {
        const auto bpath = weight_path(dir, 'b', k, j);
        if (std::filesystem::exists(bpath)) {
          const Tensor b = load_tns(bpath);
          if (b.numel() != l.spec.out) throw ShapeError(fmt::format("bias file {} has wrong length", bpath.string()));
          l.bias.assign(b.data().begin(), b.data().end());
        }
      }
    }
  }
  m.validate();
}

float apply_activation(Activation a, float y) {
  switch (a) {
    case Activation::kNone: return y;
    case Activation::kRelu: return y > 0.0f ? y : 0.0f;
    case Activation::kSilu: {
      const double yd = y;
      return static_cast<float>(yd / (1.0 + std::exp(-yd)));
    }
  }
  return y;
}

Tensor layer_forward_fp(const LinearLayer& layer, const Tensor& x) {
  Tensor y = matmul(x, layer.weight);
  for (std::size_t n = 0; n < y.rows(); ++n) {
    auto r = y.row(n);
    for (std::size_t j = 0; j < r.size(); ++j) {
      const float pre = layer.bias.empty() ? r[j] : r[j] + layer.bias[j];
      r[j] = apply_activation(layer.spec.act, pre);
    }
  }
  return y;
}

Tensor block_forward_fp(const BlockSpec& block, const Tensor& x) {
  Tensor a = x;
  for (const auto& l : block.layers) a = layer_forward_fp(l, a);
  return a;
}

}  // namespace qsim
