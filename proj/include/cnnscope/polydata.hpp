#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cnnscope/error.hpp"

namespace cnnscope {

struct NamedArray {
  std::string name;
  std::vector<float> values;
  bool operator==(const NamedArray&) const = default;
};

/// Polygon geometry modeled on vtkPolyData: points, single-point vertex cells,
/// quads, and per-point float scalars. The first scalar array is the active one.
struct PolyData {
  std::vector<std::array<float, 3>> points;
  std::vector<std::int64_t> verts;
  std::vector<std::array<std::int64_t, 4>> quads;
  std::vector<NamedArray> scalars;

  std::size_t point_count() const noexcept { return points.size(); }

  NamedArray& add_scalar(std::string name) {
    scalars.push_back({std::move(name), std::vector<float>(points.size(), 0.0f)});
    return scalars.back();
  }

  const std::vector<float>* scalar(const std::string& name) const {
    for (const auto& s : scalars)
      if (s.name == name) return &s.values;
    return nullptr;
  }

  /// Throws ShapeError when a cell references a missing point or a scalar
  /// array length differs from the point count.
  void validate() const {
    const auto n = static_cast<std::int64_t>(points.size());
    for (auto v : verts)
      if (v < 0 || v >= n) throw ShapeError("vertex cell index out of range");
    for (const auto& q : quads)
      for (auto v : q)
        if (v < 0 || v >= n) throw ShapeError("quad cell index out of range");
    for (const auto& s : scalars)
      if (s.values.size() != points.size()) {
        throw ShapeError("scalar array '" + s.name + "' length differs from point count");
      }
  }

  bool operator==(const PolyData&) const = default;
};

}  // namespace cnnscope
