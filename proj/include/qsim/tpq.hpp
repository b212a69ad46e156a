#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qsim/quantizer.hpp"
#include "qsim/tensor.hpp"

namespace qsim {

/// Per-row timestep labels, 1-based (t in [1, T]).
struct TimestepIndex {
  std::vector<std::uint32_t> t;

  std::size_t size() const noexcept { return t.size(); }
  /// Throws unless there are exactly `rows` entries, each in [1, T].
  void validate(std::size_t T, std::size_t rows) const;
};

/// One activation quantizer with a (delta, zero-point) pair per timestep.
/// Zero-points are real-valued while training and rounded on export.
struct TemporalQuantParams {
  int bits = 8;
  std::vector<double> delta;
  std::vector<double> zero_point;

  std::size_t T() const noexcept { return delta.size(); }
  void validate() const;
  /// Per-tensor parameters for timestep t (1-based); z is rounded.
  QuantParams at(std::uint32_t t) const;
};

TemporalQuantParams tpq_init(std::span<const Tensor> per_step, int bits, CalibMethod method);

/// Quantizes row n of x with the parameters of timestep idx.t[n], in one pass.
Tensor tpq_quantize(const Tensor& x, const TimestepIndex& idx, const TemporalQuantParams& q);

/// Groups the rows of x by timestep; entry t-1 holds the rows labelled t.
/// Throws if some timestep in [1, T] has no rows.
std::vector<Tensor> split_by_timestep(const Tensor& x, const TimestepIndex& idx, std::size_t T);

nlohmann::json tpq_to_json(const TemporalQuantParams& q);
TemporalQuantParams tpq_from_json(const nlohmann::json& j);

}  // namespace qsim
