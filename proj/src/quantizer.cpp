#include "qsim/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "qsim/errors.hpp"

namespace qsim {

CalibMethod parse_calib_method(std::string_view name) {
  if (name == "maxmin") return CalibMethod::kMaxMin;
  if (name == "mse") return CalibMethod::kMse;
  throw ValidationError(fmt::format("unknown calibration method '{}'", name));
}

std::string_view to_string(CalibMethod m) {
  return m == CalibMethod::kMaxMin ? "maxmin" : "mse";
}

QuantParams QuantParams::per_tensor(int bits, double delta, std::int64_t zero_point) {
  QuantParams q{bits, Granularity::kPerTensor, {delta}, {zero_point}};
  q.validate();
  return q;
}

QuantParams QuantParams::per_out_channel(int bits, std::vector<double> delta,
                                         std::vector<std::int64_t> zero_point) {
  QuantParams q{bits, Granularity::kPerOutChannel, std::move(delta), std::move(zero_point)};
  q.validate();
  return q;
}

void QuantParams::validate() const {
  if (bits < 1 || bits > kMaxBits) {
    throw ValidationError(fmt::format("bit-width {} outside [1,{}]", bits, kMaxBits));
  }
  if (delta.empty() || delta.size() != zero_point.size()) {
    throw ValidationError("quant params: delta/zero-point lane count mismatch");
  }
  if (granularity == Granularity::kPerTensor && delta.size() != 1) {
    throw ValidationError("per-tensor quant params must have exactly one lane");
  }
  for (double d : delta) {
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw ValidationError(fmt::format("scale factor must be positive and finite, got {}", d));
    }
  }
}

void range_params(double lo, double hi, int bits, double& delta,
                  std::int64_t& zero_point) {
  if (hi > lo) {
    delta = (hi - lo) / code_max(bits);
    zero_point = static_cast<std::int64_t>(std::nearbyint(-lo / delta));
  } else {
    // Constant range: unit step, zero-point chosen so the constant maps to itself.
    delta = 1.0;
    zero_point = static_cast<std::int64_t>(std::nearbyint(-lo));
  }
}

namespace {

void check_bits(int bits) {
  if (bits < 1 || bits > kMaxBits) {
    throw ValidationError(fmt::format("bit-width {} outside [1,{}]", bits, kMaxBits));
  }
}

std::vector<float> column(const Tensor& x, std::size_t j) {
  std::vector<float> c(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) c[i] = x.at(i, j);
  return c;
}

template <typename Fn>
QuantParams per_lane(const Tensor& x, int bits, Granularity g, Fn&& fit) {
  check_bits(bits);
  if (g == Granularity::kPerTensor) {
    double d;
    std::int64_t z;
    fit(x.data(), d, z);
    return QuantParams::per_tensor(bits, d, z);
  }
  require_rank2(x, "per-out-channel calibration input");
  std::vector<double> deltas(x.cols());
  std::vector<std::int64_t> zps(x.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) {
    const auto c = column(x, j);
    fit(std::span<const float>(c), deltas[j], zps[j]);
  }
  return QuantParams::per_out_channel(bits, std::move(deltas), std::move(zps));
}

double lane_sq_error(std::span<const float> v, double delta, double z, double qmax) {
  double acc = 0.0;
  for (float xf : v) {
    const double x = xf;
    const double q = static_cast<float>(fake_quant(x, delta, z, qmax));
    acc += (x - q) * (x - q);
  }
  return acc;
}

std::size_t lane_of(const QuantParams& q, std::size_t flat, std::size_t cols) {
  return q.granularity == Granularity::kPerTensor ? 0 : flat % cols;
}

void check_compat(const Tensor& x, const QuantParams& q) {
  q.validate();
  if (q.granularity == Granularity::kPerOutChannel) {
    require_rank2(x, "per-out-channel quantization input");
    if (x.cols() != q.lanes()) {
      throw ShapeError(fmt::format("per-out-channel params have {} lanes, tensor has {} columns",
                                   q.lanes(), x.cols()));
    }
  }
}

}  // namespace

QuantParams calibrate_maxmin(const Tensor& x, int bits, Granularity g) {
  return per_lane(x, bits, g, [bits](std::span<const float> v, double& d, std::int64_t& z) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    range_params(*lo, *hi, bits, d, z);
  });
}

QuantParams calibrate_mse(const Tensor& x, int bits, Granularity g, int grid_points) {
  if (grid_points < 2) throw ValidationError("MSE calibration needs at least 2 grid points");
  const double qmax = code_max(bits);
  return per_lane(x, bits, g, [&](std::span<const float> v, double& d, std::int64_t& z) {
    const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    const double lo = *lo_it, hi = *hi_it;
    range_params(lo, hi, bits, d, z);
    if (!(hi > lo)) return;
    double best = lane_sq_error(v, d, static_cast<double>(z), qmax);
    // Walk from alpha = 1 downwards; strict improvement keeps ties at larger alpha.
    for (int i = grid_points - 2; i >= 0; --i) {
      const double alpha =
          kMseAlphaMin + (1.0 - kMseAlphaMin) * static_cast<double>(i) / (grid_points - 1);
      double cd;
      std::int64_t cz;
      range_params(alpha * lo, alpha * hi, bits, cd, cz);
      const double err = lane_sq_error(v, cd, static_cast<double>(cz), qmax);
      if (err < best) {
        best = err;
        d = cd;
        z = cz;
      }
    }
  });
}

QuantParams calibrate(const Tensor& x, int bits, Granularity g, CalibMethod method) {
  return method == CalibMethod::kMaxMin ? calibrate_maxmin(x, bits, g)
                                        : calibrate_mse(x, bits, g);
}

Tensor quantize(const Tensor& x, const QuantParams& q) {
  check_compat(x, q);
  const double qmax = q.qmax();
  const std::size_t cols = x.shape().back();
  std::vector<float> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t lane = lane_of(q, i, cols);
    out[i] = static_cast<float>(
        fake_quant(in[i], q.delta[lane], static_cast<double>(q.zero_point[lane]), qmax));
  }
  return Tensor(x.shape(), std::move(out));
}

double quant_mse(const Tensor& x, const QuantParams& q) {
  const Tensor y = quantize(x, q);
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x.data()[i]) - y.data()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(x.numel());
}

ErrorReport error_decompose(const Tensor& x, const QuantParams& q) {
  check_compat(x, q);
  const double qmax = q.qmax();
  const std::size_t cols = x.shape().back();
  ErrorReport r;
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t lane = lane_of(q, i, cols);
    const double delta = q.delta[lane];
    const double z = static_cast<double>(q.zero_point[lane]);
    const double v = in[i];
    const double e = std::fabs(v - static_cast<float>(fake_quant(v, delta, z, qmax)));
    if (is_clipped(v, delta, z, qmax)) {
      r.clip_error += e;
    } else {
      r.round_error += e;
    }
  }
  r.total_error = r.round_error + r.clip_error;
  r.clip_share = r.total_error > 0.0 ? r.clip_error / r.total_error : 0.0;
  return r;
}

ErrorReport product_error(const Tensor& x, const Tensor& qx, const Tensor& w,
                          const Tensor& qw, const ErrorReport& x_split,
                          const ErrorReport& w_split) {
  require_rank2(x, "error_bound activation");
  require_rank2(w, "error_bound weight");
  if (x.cols() != w.rows() || qx.shape() != x.shape() || qw.shape() != w.shape()) {
    throw ShapeError(fmt::format("error_bound shape mismatch: X {} W {}",
                                 shape_str(x.shape()), shape_str(w.shape())));
  }
  const std::size_t n = x.rows(), k_dim = x.cols(), m = w.cols();
  double lhs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double exact = 0.0, approx = 0.0;
      for (std::size_t k = 0; k < k_dim; ++k) {
        exact += static_cast<double>(x.at(i, k)) * w.at(k, j);
        approx += static_cast<double>(qx.at(i, k)) * qw.at(k, j);
      }
      lhs += std::fabs(exact - approx);
    }
  }
  double x_norm = 0.0, w_norm = 0.0, x_err = 0.0, w_err = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    x_norm += std::fabs(static_cast<double>(x.data()[i]));
    x_err += std::fabs(static_cast<double>(x.data()[i]) - qx.data()[i]);
  }
  for (std::size_t i = 0; i < w.numel(); ++i) {
    w_norm += std::fabs(static_cast<double>(w.data()[i]));
    w_err += std::fabs(static_cast<double>(w.data()[i]) - qw.data()[i]);
  }
  ErrorReport r;
  r.total_error = lhs;
  r.bound_terms = std::array<double, 3>{x_norm * w_err, x_err * w_norm, x_err * w_err};
  r.bound_rhs = (*r.bound_terms)[0] + (*r.bound_terms)[1] + (*r.bound_terms)[2];
  r.round_error = x_split.round_error + w_split.round_error;
  r.clip_error = x_split.clip_error + w_split.clip_error;
  const double split_total = r.round_error + r.clip_error;
  r.clip_share = split_total > 0.0 ? r.clip_error / split_total : 0.0;
  return r;
}

ErrorReport error_bound(const Tensor& x, const Tensor& w, const QuantParams& qx,
                        const QuantParams& qw) {
  require_rank2(x, "error_bound activation");
  require_rank2(w, "error_bound weight");
  if (x.cols() != w.rows()) {
    throw ShapeError(fmt::format("error_bound shape mismatch: X {} W {}",
                                 shape_str(x.shape()), shape_str(w.shape())));
  }
  return product_error(x, quantize(x, qx), w, quantize(w, qw), error_decompose(x, qx),
                       error_decompose(w, qw));
}

std::string error_csv_header() {
  return "layer,total_error,bound_rhs,round_error,clip_error,clip_share";
}

std::string error_csv_row(std::string_view layer, const ErrorReport& r) {
  const std::string rhs = r.bound_rhs ? fmt::format("{}", *r.bound_rhs) : std::string();
  return fmt::format("{},{},{},{},{},{}", layer, r.total_error, rhs, r.round_error,
                     r.clip_error, r.clip_share);
}

}  // namespace qsim
