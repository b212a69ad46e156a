#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qsim/tensor.hpp"

namespace qsim {

enum class Granularity { kPerTensor, kPerOutChannel };
enum class CalibMethod { kMaxMin, kMse };

CalibMethod parse_calib_method(std::string_view name);
std::string_view to_string(CalibMethod m);

inline constexpr int kMaxBits = 24;
inline constexpr int kDefaultMseGrid = 100;
inline constexpr double kMseAlphaMin = 0.01;

/// Largest integer code, 2^b - 1.
inline double code_max(int bits) { return std::ldexp(1.0, bits) - 1.0; }

/// Asymmetric fake-quantization of a single value:
///   delta * (clip(round(x / delta) + z, 0, 2^b - 1) - z)
/// with round-half-to-even. Shared by every quantizing code path so that the
/// batched and per-group routes are bit-identical.
inline double fake_quant(double x, double delta, double z, double qmax) {
  const double code = std::nearbyint(x / delta) + z;
  const double clipped = code < 0.0 ? 0.0 : (code > qmax ? qmax : code);
  return delta * (clipped - z);
}

inline bool is_clipped(double x, double delta, double z, double qmax) {
  const double code = std::nearbyint(x / delta) + z;
  return code < 0.0 || code > qmax;
}

/// Scale factor and integer zero-point, either one lane (per-tensor) or one
/// lane per output column of a rank-2 weight.
struct QuantParams {
  int bits = 8;
  Granularity granularity = Granularity::kPerTensor;
  std::vector<double> delta;
  std::vector<std::int64_t> zero_point;

  static QuantParams per_tensor(int bits, double delta, std::int64_t zero_point);
  static QuantParams per_out_channel(int bits, std::vector<double> delta,
                                     std::vector<std::int64_t> zero_point);

  std::size_t lanes() const noexcept { return delta.size(); }
  double qmax() const { return code_max(bits); }
  /// Throws ValidationError unless bits are in range, every delta is positive
  /// and finite, and lane vectors agree in length.
  void validate() const;
};

/// Value-level L1 error split into the part from clipped elements and the
/// part from rounding alone. For single-tensor reports total_error equals
/// round_error + clip_error. For product reports (error_bound) total_error is
/// E(X,W), bound_rhs/bound_terms are filled, and round/clip aggregate the X
/// and W decompositions.
struct ErrorReport {
  double total_error = 0.0;
  std::optional<double> bound_rhs;
  // ||X|| ||W-Q(W)||, ||X-Q(X)|| ||W||, ||X-Q(X)|| ||W-Q(W)||
  std::optional<std::array<double, 3>> bound_terms;
  double round_error = 0.0;
  double clip_error = 0.0;
  double clip_share = 0.0;
};

QuantParams calibrate_maxmin(const Tensor& x, int bits, Granularity g);
QuantParams calibrate_mse(const Tensor& x, int bits, Granularity g,
                          int grid_points = kDefaultMseGrid);
QuantParams calibrate(const Tensor& x, int bits, Granularity g, CalibMethod method);

/// Max-Min parameters for an explicit range; handles the degenerate lo == hi case.
void range_params(double lo, double hi, int bits, double& delta, std::int64_t& zero_point);

Tensor quantize(const Tensor& x, const QuantParams& q);

/// Mean squared reconstruction error of quantize(x, q).
double quant_mse(const Tensor& x, const QuantParams& q);

ErrorReport error_decompose(const Tensor& x, const QuantParams& q);
ErrorReport error_bound(const Tensor& x, const Tensor& w, const QuantParams& qx,
                        const QuantParams& qw);

/// error_bound over already-quantized operands; x_split/w_split supply the
/// per-operand round/clip decompositions.
ErrorReport product_error(const Tensor& x, const Tensor& qx, const Tensor& w,
                          const Tensor& qw, const ErrorReport& x_split,
                          const ErrorReport& w_split);

std::string error_csv_header();
std::string error_csv_row(std::string_view layer, const ErrorReport& r);

}  // namespace qsim
