#include "qsim/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qsim/errors.hpp"
#include "qsim/quantizer.hpp"

namespace qsim {

ScalerKind parse_scaler(std::string_view name) {
  if (name == "none") return ScalerKind::kNone;
  if (name == "smoothquant") return ScalerKind::kSmoothQuant;
  if (name == "wd") return ScalerKind::kWeightDilation;
  throw ValidationError(fmt::format("unknown scaler '{}'", name));
}

std::string_view to_string(ScalerKind k) {
  switch (k) {
    case ScalerKind::kNone: return "none";
    case ScalerKind::kSmoothQuant: return "smoothquant";
    case ScalerKind::kWeightDilation: return "wd";
  }
  return "none";
}

ScalingPlan identity_plan(std::size_t c_in) {
  ScalingPlan p;
  p.s.assign(c_in, 1.0f);
  return p;
}

bool wd_contained(const Tensor& w, std::size_t row, float s, std::span<const float> col_min,
                  std::span<const float> col_max) {
  const auto r = w.row(row);
  for (std::size_t j = 0; j < r.size(); ++j) {
    const float v = s * r[j];
    if (v > col_max[j] || v < col_min[j]) return false;
  }
  return true;
}

ScalingPlan wd_plan(const Tensor& w) {
  require_rank2(w, "wd_plan weight");
  const std::size_t c_in = w.rows(), c_out = w.cols();
  const MinMax mm = channel_minmax(w, Axis::kOut);
  constexpr double kInf = std::numeric_limits<double>::infinity();

  ScalingPlan p;
  p.w_max = mm.max;
  p.w_min = mm.min;
  p.s.assign(c_in, 1.0f);
  p.s1.assign(c_in, kInf);
  p.s2.assign(c_in, kInf);

  for (std::size_t i = 0; i < c_in; ++i) {
    const auto r = w.row(i);
    bool hosts_extreme = false;
    for (std::size_t j = 0; j < c_out; ++j) {
      if (r[j] == mm.max[j] || r[j] == mm.min[j]) {
        hosts_extreme = true;
        break;
      }
    }
    if (hosts_extreme) p.saturated.push_back(i);
  }

  std::size_t next_sat = 0;
  for (std::size_t i = 0; i < c_in; ++i) {
    if (next_sat < p.saturated.size() && p.saturated[next_sat] == i) {
      ++next_sat;
      continue;
    }
    const auto r = w.row(i);
    double s1 = kInf, s2 = kInf;
    for (std::size_t j = 0; j < c_out; ++j) {
      // Clamp only inside the division so zero entries cannot flip sign.
      const double v = r[j] >= 0.0f ? std::max(r[j], kWdClamp) : std::min(r[j], -kWdClamp);
      if (v > 0.0) {
        s1 = std::min(s1, mm.max[j] / v);
      } else {
        s2 = std::min(s2, mm.min[j] / v);
      }
    }
    p.s1[i] = s1;
    p.s2[i] = s2;
    const double best = std::min(s1, s2);
    if (!std::isfinite(best) || best <= 1.0) continue;
    // Pull s back by ulps until the float products land inside the boundary.
    float s = static_cast<float>(best);
    while (s > 1.0f && !wd_contained(w, i, s, mm.min, mm.max)) {
      s = std::nextafter(s, 1.0f);
    }
    p.s[i] = s;
  }
  return p;
}

std::vector<float> column_absmax(const Tensor& x) {
  require_rank2(x, "column_absmax input");
  std::vector<float> out(x.cols(), 0.0f);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[j] = std::max(out[j], std::fabs(r[j]));
  }
  return out;
}

ScalingPlan smoothquant_plan(std::span<const float> x_absmax, const Tensor& w, double alpha,
                             bool floor_at_one) {
  require_rank2(w, "smoothquant_plan weight");
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ValidationError(fmt::format("smoothing factor {} outside [0,1]", alpha));
  }
  if (x_absmax.size() != w.rows()) {
    throw ShapeError(fmt::format("activation stats length {} != in-channels {}",
                                 x_absmax.size(), w.rows()));
  }
  ScalingPlan p;
  p.s.resize(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    if (!(x_absmax[i] >= 0.0f)) throw ValidationError("activation stats must be nonnegative");
    double w_absmax = 0.0;
    for (float v : w.row(i)) w_absmax = std::max(w_absmax, static_cast<double>(std::fabs(v)));
    const double xa = std::max(static_cast<double>(x_absmax[i]), kSmoothQuantEps);
    const double wa = std::max(w_absmax, kSmoothQuantEps);
    double s = std::pow(xa, alpha) / std::pow(wa, 1.0 - alpha);
    if (floor_at_one) s = std::max(s, 1.0);
    p.s[i] = static_cast<float>(s);
  }
  return p;
}

namespace {

void check_plan(const ScalingPlan& plan, std::size_t c_in) {
  if (plan.s.size() != c_in) {
    throw ShapeError(fmt::format("scaling vector length {} != in-channels {}", plan.s.size(), c_in));
  }
  for (float v : plan.s) {
    if (!(v > 0.0f) || !std::isfinite(v)) {
      throw ValidationError(fmt::format("scaling factors must be positive and finite, got {}", v));
    }
  }
}

}  // namespace

Tensor scale_weight(const Tensor& w, const ScalingPlan& plan) {
  require_rank2(w, "scaled weight");
  check_plan(plan, w.rows());
  return scale_rows(w, plan.s);
}

Tensor scale_activation(const Tensor& x, const ScalingPlan& plan) {
  require_rank2(x, "scaled activation");
  check_plan(plan, x.cols());
  return divide_cols(x, plan.s);
}

ScaledPair apply_scaling(const Tensor& x, const Tensor& w, const ScalingPlan& plan) {
  require_rank2(x, "scaled activation");
  require_rank2(w, "scaled weight");
  if (x.cols() != w.rows()) {
    throw ShapeError(fmt::format("apply_scaling shape mismatch: X {} W {}",
                                 shape_str(x.shape()), shape_str(w.shape())));
  }
  return {scale_activation(x, plan), scale_weight(w, plan)};
}

double WdEffect::dw_ratio_mean() const {
  if (dw_ratio.empty()) return 1.0;
  return std::accumulate(dw_ratio.begin(), dw_ratio.end(), 0.0) /
         static_cast<double>(dw_ratio.size());
}

WdEffect wd_effect_stats(const Tensor& x, const Tensor& w, const ScalingPlan& plan, int bits) {
  const ScaledPair scaled = apply_scaling(x, w, plan);
  WdEffect e;
  e.prop_s_gt_1 =
      static_cast<double>(std::count_if(plan.s.begin(), plan.s.end(),
                                        [](float v) { return v > 1.0f; })) /
      static_cast<double>(plan.s.size());
  const auto qx = calibrate_maxmin(x, bits, Granularity::kPerTensor);
  const auto qx2 = calibrate_maxmin(scaled.x, bits, Granularity::kPerTensor);
  e.dx_ratio = qx2.delta[0] / qx.delta[0];
  const auto qw = calibrate_maxmin(w, bits, Granularity::kPerOutChannel);
  const auto qw2 = calibrate_maxmin(scaled.w, bits, Granularity::kPerOutChannel);
  e.dw_ratio.resize(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) e.dw_ratio[j] = qw2.delta[j] / qw.delta[j];
  return e;
}

nlohmann::json plan_to_json(const ScalingPlan& plan) {
  return nlohmann::json{{"s", plan.s},
                        {"saturated", plan.saturated},
                        {"w_max", plan.w_max},
                        {"w_min", plan.w_min}};
}

ScalingPlan plan_from_json(const nlohmann::json& j) {
  ScalingPlan p;
  try {
    j.at("s").get_to(p.s);
    j.at("saturated").get_to(p.saturated);
    j.at("w_max").get_to(p.w_max);
    j.at("w_min").get_to(p.w_min);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("invalid scaling plan JSON: {}", e.what()));
  }
  return p;
}

std::string wd_effect_csv_header() { return "layer,prop_s_gt_1,dx_ratio,dw_ratio"; }

std::string wd_effect_csv_row(std::string_view layer, const WdEffect& e) {
  return fmt::format("{},{},{},{}", layer, e.prop_s_gt_1, e.dx_ratio, e.dw_ratio_mean());
}

}  // namespace qsim
