#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "qsim/tensor.hpp"

namespace qsim {

enum class ScalerKind { kNone, kSmoothQuant, kWeightDilation };

ScalerKind parse_scaler(std::string_view name);
std::string_view to_string(ScalerKind k);

/// Smallest magnitude used when dividing by a weight entry in the WD solve.
inline constexpr float kWdClamp = 1e-5f;
inline constexpr double kSmoothQuantEps = 1e-5;

/// Per-in-channel scaling factors plus the bookkeeping that produced them.
/// For WD plans, `saturated` lists (ascending) every in-channel that hosts a
/// per-column extreme, and s1/s2 hold the max/min-side bounds (+inf when the
/// row has no entry of that sign). For other policies those fields are empty.
struct ScalingPlan {
  std::vector<float> s;
  std::vector<std::size_t> saturated;
  std::vector<float> w_max;
  std::vector<float> w_min;
  std::vector<double> s1;
  std::vector<double> s2;
};

ScalingPlan identity_plan(std::size_t c_in);

/// Weight Dilation: dilate every unsaturated row of W as far as possible
/// while keeping each column inside its original [min, max].
ScalingPlan wd_plan(const Tensor& w);

/// s_i = max|X_i|^alpha / max|W_i|^(1-alpha), optionally floored at 1.
ScalingPlan smoothquant_plan(std::span<const float> x_absmax, const Tensor& w, double alpha,
                             bool floor_at_one = true);

/// Per-column max |x|, the activation statistic SmoothQuant consumes.
std::vector<float> column_absmax(const Tensor& x);

struct ScaledPair {
  Tensor x;
  Tensor w;
};

/// X / s column-wise and s * W row-wise; the product is unchanged.
ScaledPair apply_scaling(const Tensor& x, const Tensor& w, const ScalingPlan& plan);
Tensor scale_weight(const Tensor& w, const ScalingPlan& plan);
Tensor scale_activation(const Tensor& x, const ScalingPlan& plan);

/// True when every entry of s * W stays within its column's original range.
bool wd_contained(const Tensor& w, std::size_t row, float s, std::span<const float> col_min,
                  std::span<const float> col_max);

struct WdEffect {
  double prop_s_gt_1 = 0.0;
  /// Layer-wise Max-Min scale of X/s over that of X.
  double dx_ratio = 1.0;
  /// Per-out-channel Max-Min scale of s*W over that of W.
  std::vector<double> dw_ratio;
  double dw_ratio_mean() const;
};

WdEffect wd_effect_stats(const Tensor& x, const Tensor& w, const ScalingPlan& plan, int bits);

nlohmann::json plan_to_json(const ScalingPlan& plan);
ScalingPlan plan_from_json(const nlohmann::json& j);

std::string wd_effect_csv_header();
std::string wd_effect_csv_row(std::string_view layer, const WdEffect& e);

}  // namespace qsim
