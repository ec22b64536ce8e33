#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cnnscope/error.hpp"

namespace cnnscope {

using Vector = std::vector<double>;

/// Dense row-major tensor of fixed rank holding 64-bit floats.
///
/// Weights use [w, w, c, f] (window, window, input channel, filter) and
/// activations use [b, m, m, f] (sample, row, column, filter).
template <std::size_t Rank>
class Tensor {
 public:
  using Shape = std::array<std::size_t, Rank>;

  Tensor() { shape_.fill(0); }

  explicit Tensor(const Shape& shape, double fill = 0.0)
      : shape_(shape), data_(element_count(shape), fill) {}

  Tensor(const Shape& shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape product " + std::to_string(element_count(shape_)));
    }
  }

  static std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  template <typename... Idx>
    requires(sizeof...(Idx) == Rank)
  std::size_t offset(Idx... idx) const noexcept {
    const std::array<std::size_t, Rank> ix{static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t a = 0; a < Rank; ++a) off = off * shape_[a] + ix[a];
    return off;
  }

  template <typename... Idx>
    requires(sizeof...(Idx) == Rank)
  double& operator()(Idx... idx) noexcept {
    return data_[offset(idx...)];
  }

  template <typename... Idx>
    requires(sizeof...(Idx) == Rank)
  double operator()(Idx... idx) const noexcept {
    return data_[offset(idx...)];
  }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

using Tensor2 = Tensor<2>;
using Tensor3 = Tensor<3>;
using Tensor4 = Tensor<4>;

template <std::size_t Rank>
std::string shape_string(const std::array<std::size_t, Rank>& shape) {
  std::string s = "[";
  for (std::size_t a = 0; a < Rank; ++a) {
    if (a) s += ",";
    s += std::to_string(shape[a]);
  }
  return s + "]";
}

/// Sums activations [b, m, m, f] over the batch axis, pixel by pixel.
inline Tensor3 batch_sum(const Tensor4& acts) {
  const auto [b, m, n, f] = acts.shape();
  if (b == 0) throw DomainError("empty batch");
  Tensor3 out({m, n, f});
  const std::size_t plane = m * n * f;
  auto src = acts.data();
  auto dst = out.data();
  for (std::size_t s = 0; s < b; ++s) {
    const double* row = src.data() + s * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] += row[i];
  }
  return out;
}

/// Row-major flattening of the m x m plane belonging to filter `k`.
inline Vector flatten_window(const Tensor3& map, std::size_t k) {
  const auto [m, n, f] = map.shape();
  if (k >= f) {
    throw IndexError("filter index " + std::to_string(k) + " out of range for " +
                     std::to_string(f) + " filters");
  }
  Vector out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = map(i, j, k);
  return out;
}

/// Scales non-negative values into [0, 1] by a positive reference magnitude.
inline Vector normalize_unit(std::span<const double> v, double max_abs) {
  if (!(max_abs > 0.0)) throw DomainError("degenerate scale");
  Vector out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [max_abs](double x) { return x / max_abs; });
  return out;
}

}  // namespace cnnscope
