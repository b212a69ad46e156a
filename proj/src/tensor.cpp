#include "qsim/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "qsim/errors.hpp"

namespace qsim {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, "x"));
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) {
      throw ShapeError(
          fmt::format("tensor dims must be positive, got {}", shape_str(shape)));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  if (!std::isfinite(fill)) throw NumericalError("tensor fill value is not finite");
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError(fmt::format("data length {} does not match shape {}",
                                 data_.size(), shape_str(shape_)));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw NumericalError(fmt::format("non-finite tensor value at flat index {}", i));
    }
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<float> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::vector(std::vector<float> data) {
  const std::size_t n = data.size();
  return Tensor({n}, std::move(data));
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(fmt::format("{} must be rank 2, got shape {}", what,
                                 shape_str(t.shape())));
  }
}

Tensor matmul(const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows()) {
    throw ShapeError(fmt::format("matmul shape mismatch: {} x {}",
                                 shape_str(x.shape()), shape_str(w.shape())));
  }
  const std::size_t n = x.rows(), k_dim = x.cols(), m = w.cols();
  Tensor y({n, m});
  std::vector<double> acc(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double a = x.at(i, k);
      const auto wr = w.row(k);
      for (std::size_t j = 0; j < m; ++j) acc[j] += a * static_cast<double>(wr[j]);
    }
    auto yr = y.row(i);
    for (std::size_t j = 0; j < m; ++j) yr[j] = static_cast<float>(acc[j]);
  }
  return y;
}

double l1_norm(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += std::fabs(static_cast<double>(v));
  return s;
}

MinMax channel_minmax(const Tensor& w, Axis axis) {
  require_rank2(w, "channel_minmax input");
  const std::size_t rows = w.rows(), cols = w.cols();
  MinMax out;
  if (axis == Axis::kOut) {
    out.min.assign(w.row(0).begin(), w.row(0).end());
    out.max = out.min;
    for (std::size_t i = 1; i < rows; ++i) {
      const auto r = w.row(i);
      for (std::size_t j = 0; j < cols; ++j) {
        out.min[j] = std::min(out.min[j], r[j]);
        out.max[j] = std::max(out.max[j], r[j]);
      }
    }
  } else {
    out.min.resize(rows);
    out.max.resize(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      const auto [lo, hi] = std::minmax_element(w.row(i).begin(), w.row(i).end());
      out.min[i] = *lo;
      out.max[i] = *hi;
    }
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("sub shape mismatch: {} vs {}",
                                 shape_str(a.shape()), shape_str(b.shape())));
  }
  std::vector<float> d(a.numel());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] - b.data()[i];
  return Tensor(a.shape(), std::move(d));
}

namespace {

void check_len(std::size_t have, std::size_t want, const char* what) {
  if (have != want) {
    throw ShapeError(fmt::format("{}: scale vector length {} != {}", what, have, want));
  }
}

}  // namespace

Tensor scale_cols(const Tensor& x, std::span<const float> s) {
  require_rank2(x, "scale_cols input");
  check_len(s.size(), x.cols(), "scale_cols");
  Tensor out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] *= s[j];
  }
  return out;
}

Tensor divide_cols(const Tensor& x, std::span<const float> s) {
  require_rank2(x, "divide_cols input");
  check_len(s.size(), x.cols(), "divide_cols");
  Tensor out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] /= s[j];
  }
  return out;
}

Tensor scale_rows(const Tensor& w, std::span<const float> s) {
  require_rank2(w, "scale_rows input");
  check_len(s.size(), w.rows(), "scale_rows");
  Tensor out = w;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (float& v : out.row(i)) v *= s[i];
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of an empty list");
  std::size_t rows = 0;
  const std::size_t cols = parts.front().cols();
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows part");
    if (p.cols() != cols) throw ShapeError("concat_rows column count mismatch");
    rows += p.rows();
  }
  std::vector<float> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor({rows, cols}, std::move(data));
}

std::pair<float, float> minmax_all(const Tensor& x) {
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  return {*lo, *hi};
}

}  // namespace qsim
