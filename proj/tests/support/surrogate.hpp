#pragma once

// Test-only reference for the training gradients.
//
// The real forward is piecewise constant in w and x (rounding), so finite
// differences on it are zero almost everywhere. The surrogate below freezes the
// rounding residual r - u of every quantization site at a base point and keeps
// the clip exact:
//
//   Q(v) = delta * (clip(v / delta + rho + z, 0, qmax) - z),  rho = round(u0) - u0
//
// At the base point it reproduces the real forward, and its true derivatives
// are the straight-through / LSQ rules the trainer uses. Finite differences on
// it therefore check the backward pass independently of the trainer's code.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qsim/bkd.hpp"
#include "qsim/rng.hpp"

namespace qsim::testing {

struct FrozenResidue {
  std::vector<std::vector<double>> x;  // per layer, n * ci
  std::vector<std::vector<double>> w;  // per layer, ci * co
};

// Records clip masks and relu signs so callers can reject perturbations that
// cross a kink of the surrogate.
struct Signature {
  std::vector<std::uint8_t> bits;
  bool operator==(const Signature&) const = default;
};

inline double surrogate_site(double v, double delta, double z, double qmax, double rho,
                             Signature* sig) {
  double code = v / delta + rho + z;
  std::uint8_t state = 0;
  if (code < 0.0) {
    code = 0.0;
    state = 1;
  } else if (code > qmax) {
    code = qmax;
    state = 2;
  }
  if (sig) sig->bits.push_back(state);
  return delta * (code - z);
}

inline double surrogate_act(Activation a, double y, Signature* sig) {
  switch (a) {
    case Activation::kNone: return y;
    case Activation::kRelu:
      if (sig) sig->bits.push_back(y > 0.0);
      return y > 0.0 ? y : 0.0;
    case Activation::kSilu: return y / (1.0 + std::exp(-y));
  }
  return y;
}

// Evaluates the block, freezing residues when `capture` is set.
inline Mat surrogate_forward(const QuantBlock& q, const Mat& x, const TimestepIndex& idx,
                             FrozenResidue& fr, bool capture, Signature* sig) {
  if (capture) {
    fr.x.assign(q.layers.size(), {});
    fr.w.assign(q.layers.size(), {});
  }
  Mat a = x;
  for (std::size_t l = 0; l < q.layers.size(); ++l) {
    const QuantLayer& L = q.layers[l];
    const std::size_t n = a.rows, ci = L.spec.in, co = L.spec.out;
    const double qa = std::ldexp(1.0, L.act.bits) - 1, qw = std::ldexp(1.0, L.bits_w) - 1;
    if (capture) {
      fr.x[l].resize(n * ci);
      fr.w[l].resize(ci * co);
    }
    Mat xq(n, ci), wq(ci, co);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t t = idx.t[r] - 1;
      const double d = L.act.delta[t], z = L.act.zero_point[t];
      for (std::size_t i = 0; i < ci; ++i) {
        const double v = a.at(r, i) / double(L.scale[i]);
        if (capture) {
          const double u = v / d;
          fr.x[l][r * ci + i] = std::nearbyint(u) - u;
        }
        xq.at(r, i) = surrogate_site(v, d, z, qa, fr.x[l][r * ci + i], sig);
      }
    }
    for (std::size_t i = 0; i < ci; ++i)
      for (std::size_t j = 0; j < co; ++j) {
        const double v = L.weight.at(i, j), d = L.w_delta[j];
        if (capture) {
          const double u = v / d;
          fr.w[l][i * co + j] = std::nearbyint(u) - u;
        }
        wq.at(i, j) = surrogate_site(v, d, L.w_zero[j], qw, fr.w[l][i * co + j], sig);
      }
    Mat out(n, co);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < co; ++j) {
        double acc = L.bias.empty() ? 0.0 : L.bias[j];
        for (std::size_t i = 0; i < ci; ++i) acc += xq.at(r, i) * wq.at(i, j);
        out.at(r, j) = surrogate_act(L.spec.act, acc, sig);
      }
    a = std::move(out);
  }
  return a;
}

inline double surrogate_loss(const QuantBlock& q, const Mat& x, const TimestepIndex& idx,
                             const Mat& target, FrozenResidue& fr, bool capture,
                             Signature* sig) {
  const Mat out = surrogate_forward(q, x, idx, fr, capture, sig);
  double acc = 0.0;
  for (std::size_t k = 0; k < out.v.size(); ++k) {
    const double d = out.v[k] - target.v[k];
    acc += d * d;
  }
  return acc / double(out.v.size());
}

// A small random quantized block with real-valued zero-points and moderate
// clipping, so every gradient branch is exercised.
struct RandomCase {
  QuantBlock block;
  Tensor x;
  TimestepIndex idx;
  Tensor target;
};

inline RandomCase random_case(RngStream& rng, std::size_t T, std::size_t n, std::size_t width,
                              int bits) {
  RandomCase rc;
  const std::size_t dims[3] = {width, width + 1, width};
  const Activation acts[2] = {Activation::kRelu, Activation::kNone};
  for (std::size_t l = 0; l < 2; ++l) {
    QuantLayer L;
    L.spec = LayerSpec{dims[l], dims[l + 1], true, acts[l]};
    L.scale.resize(dims[l]);
    for (auto& s : L.scale) s = float(1.0 + rng.uniform());
    L.weight = Mat(dims[l], dims[l + 1]);
    for (auto& v : L.weight.v) v = rng.normal() / std::sqrt(double(dims[l]));
    L.bias.resize(dims[l + 1]);
    for (auto& v : L.bias) v = 0.1 * rng.normal();
    L.bits_w = bits;
    const double qmax = std::ldexp(1.0, bits) - 1;
    for (std::size_t j = 0; j < dims[l + 1]; ++j) {
      L.w_delta.push_back(1.6 / std::sqrt(double(dims[l])) / qmax);
      L.w_zero.push_back(std::round(qmax / 2));
    }
    L.act.bits = bits;
    for (std::size_t t = 0; t < T; ++t) {
      L.act.delta.push_back((1.5 + rng.uniform()) / qmax);
      L.act.zero_point.push_back(qmax / 2 + rng.uniform() - 0.5);
    }
    rc.block.layers.push_back(std::move(L));
  }
  rc.x = rng_normal(rng, {n, width}, 0.0f, 1.0f);
  for (std::size_t r = 0; r < n; ++r) rc.idx.t.push_back(1 + std::uint32_t(rng.uniform_index(T)));
  rc.target = rng_normal(rng, {n, width}, 0.0f, 1.0f);
  return rc;
}

// Which trainable a finite-difference probe perturbs.
enum class Param { kWeight, kBias, kWDelta, kActDelta, kActZero };

inline double& param_ref(QuantBlock& q, Param p, std::size_t layer, std::size_t k) {
  QuantLayer& L = q.layers[layer];
  switch (p) {
    case Param::kWeight: return L.weight.v[k];
    case Param::kBias: return L.bias[k];
    case Param::kWDelta: return L.w_delta[k];
    case Param::kActDelta: return L.act.delta[k];
    case Param::kActZero: return L.act.zero_point[k];
  }
  return L.weight.v[k];
}

inline double grad_ref(const BlockGrads& g, Param p, std::size_t layer, std::size_t k) {
  const LayerGrads& L = g.layers[layer];
  switch (p) {
    case Param::kWeight: return L.weight.v[k];
    case Param::kBias: return L.bias[k];
    case Param::kWDelta: return L.w_delta[k];
    case Param::kActDelta: return L.act_delta[k];
    case Param::kActZero: return L.act_zero[k];
  }
  return 0.0;
}

struct FdOutcome {
  bool usable = false;  // false when +-h crosses a clip or relu kink
  double fd = 0.0;
  double analytic = 0.0;
};

// Central difference of the surrogate loss for one coordinate.
inline FdOutcome fd_probe(const RandomCase& rc, const BlockGrads& g, Param p, std::size_t layer,
                          std::size_t k, double h) {
  const Mat x = Mat::from(rc.x), target = Mat::from(rc.target);
  FrozenResidue fr;
  Signature base_sig;
  surrogate_loss(rc.block, x, rc.idx, target, fr, true, &base_sig);

  QuantBlock plus = rc.block, minus = rc.block;
  param_ref(plus, p, layer, k) += h;
  param_ref(minus, p, layer, k) -= h;
  Signature sp, sm;
  const double lp = surrogate_loss(plus, x, rc.idx, target, fr, false, &sp);
  const double lm = surrogate_loss(minus, x, rc.idx, target, fr, false, &sm);
  FdOutcome out;
  out.usable = sp == base_sig && sm == base_sig;
  out.fd = (lp - lm) / (2 * h);
  out.analytic = grad_ref(g, p, layer, k);
  return out;
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

// Distance of w / delta from the nearest rounding boundary (a half-integer).
inline double boundary_margin(double w, double delta) {
  const double u = w / delta;
  return std::fabs(u - std::floor(u) - 0.5);
}

}  // namespace qsim::testing
