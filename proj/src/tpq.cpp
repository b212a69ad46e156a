#include "qsim/tpq.hpp"

#include <cmath>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qsim/errors.hpp"

namespace qsim {

void TimestepIndex::validate(std::size_t T, std::size_t rows) const {
  if (t.size() != rows) {
    throw ShapeError(fmt::format("timestep index has {} entries for {} rows", t.size(), rows));
  }
  for (std::size_t n = 0; n < t.size(); ++n) {
    if (t[n] < 1 || t[n] > T) {
      throw ValidationError(
          fmt::format("timestep {} at row {} outside [1,{}]", t[n], n, T));
    }
  }
}

void TemporalQuantParams::validate() const {
  if (delta.empty()) throw ValidationError("temporal quantizer needs T >= 1");
  if (zero_point.size() != delta.size()) {
    throw ValidationError("temporal quantizer delta/zero-point length mismatch");
  }
  if (bits < 1 || bits > kMaxBits) {
    throw ValidationError(fmt::format("bit-width {} outside [1,{}]", bits, kMaxBits));
  }
  for (std::size_t t = 0; t < delta.size(); ++t) {
    if (!(delta[t] > 0.0) || !std::isfinite(delta[t])) {
      throw ValidationError(fmt::format("timestep {} scale factor {} is not positive", t + 1,
                                        delta[t]));
    }
    if (!std::isfinite(zero_point[t])) {
      throw ValidationError(fmt::format("timestep {} zero-point is not finite", t + 1));
    }
  }
}

QuantParams TemporalQuantParams::at(std::uint32_t t) const {
  if (t < 1 || t > T()) throw ValidationError(fmt::format("timestep {} outside [1,{}]", t, T()));
  return QuantParams::per_tensor(bits, delta[t - 1],
                                 static_cast<std::int64_t>(std::nearbyint(zero_point[t - 1])));
}

TemporalQuantParams tpq_init(std::span<const Tensor> per_step, int bits, CalibMethod method) {
  if (per_step.empty()) throw ValidationError("tpq_init needs at least one timestep");
  TemporalQuantParams q;
  q.bits = bits;
  for (std::size_t t = 0; t < per_step.size(); ++t) {
    if (per_step[t].numel() == 0) {
      throw ValidationError(fmt::format("empty calibration set for timestep {}", t + 1));
    }
    const QuantParams p = calibrate(per_step[t], bits, Granularity::kPerTensor, method);
    q.delta.push_back(p.delta[0]);
    q.zero_point.push_back(static_cast<double>(p.zero_point[0]));
  }
  q.validate();
  return q;
}

Tensor tpq_quantize(const Tensor& x, const TimestepIndex& idx, const TemporalQuantParams& q) {
  require_rank2(x, "tpq_quantize input");
  q.validate();
  idx.validate(q.T(), x.rows());
  const double qmax = code_max(q.bits);
  Tensor out = x;
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const std::size_t t = idx.t[n] - 1;
    const double delta = q.delta[t];
    const double z = q.zero_point[t];
    for (float& v : out.row(n)) v = static_cast<float>(fake_quant(v, delta, z, qmax));
  }
  return out;
}

std::vector<Tensor> split_by_timestep(const Tensor& x, const TimestepIndex& idx, std::size_t T) {
  require_rank2(x, "split_by_timestep input");
  idx.validate(T, x.rows());
  std::vector<std::vector<float>> parts(T);
  for (std::size_t n = 0; n < x.rows(); ++n) {
    auto& p = parts[idx.t[n] - 1];
    p.insert(p.end(), x.row(n).begin(), x.row(n).end());
  }
  std::vector<Tensor> out;
  out.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    if (parts[t].empty()) {
      throw ValidationError(fmt::format("no calibration rows for timestep {}", t + 1));
    }
    const std::size_t rows = parts[t].size() / x.cols();
    out.push_back(Tensor({rows, x.cols()}, std::move(parts[t])));
  }
  return out;
}

nlohmann::json tpq_to_json(const TemporalQuantParams& q) {
  std::vector<std::int64_t> zps;
  zps.reserve(q.T());
  for (double z : q.zero_point) zps.push_back(static_cast<std::int64_t>(std::nearbyint(z)));
  return nlohmann::json{{"T", q.T()}, {"bits", q.bits}, {"delta", q.delta}, {"zero_point", zps}};
}

TemporalQuantParams tpq_from_json(const nlohmann::json& j) {
  TemporalQuantParams q;
  std::size_t T = 0;
  try {
    j.at("T").get_to(T);
    j.at("bits").get_to(q.bits);
    j.at("delta").get_to(q.delta);
    j.at("zero_point").get_to(q.zero_point);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("invalid temporal quantizer JSON: {}", e.what()));
  }
  if (q.delta.size() != T) throw ValidationError("temporal quantizer JSON: T does not match delta");
  q.validate();
  return q;
}

}  // namespace qsim
