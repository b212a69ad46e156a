#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace qsim {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float32 array. Construction rejects non-finite values and
/// data/shape size mismatches, so every live Tensor is finite.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<float> data);
  static Tensor vector(std::vector<float> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  // Rank-2 conveniences; callers validate rank first.
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const float> data() const noexcept { return data_; }
  std::span<float> data() noexcept { return data_; }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * cols(), cols());
  }
  std::span<float> row(std::size_t r) {
    return std::span<float>(data_).subspan(r * cols(), cols());
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

enum class Axis { kIn, kOut };

struct MinMax {
  std::vector<float> min;
  std::vector<float> max;
};

void require_rank2(const Tensor& t, const char* what);

/// Matrix product with float64 accumulation in ascending-k order.
Tensor matmul(const Tensor& x, const Tensor& w);

/// Sum of absolute values, accumulated in float64 in storage order.
double l1_norm(const Tensor& x);

/// Per-column (kOut) or per-row (kIn) extremes of a rank-2 tensor.
MinMax channel_minmax(const Tensor& w, Axis axis);

Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale_cols(const Tensor& x, std::span<const float> s);
Tensor scale_rows(const Tensor& w, std::span<const float> s);
/// Divides column i of x by s[i].
Tensor divide_cols(const Tensor& x, std::span<const float> s);

/// Stacks rank-2 tensors with equal column counts along the row axis.
Tensor concat_rows(std::span<const Tensor> parts);

std::pair<float, float> minmax_all(const Tensor& x);

}  // namespace qsim
