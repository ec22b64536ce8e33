#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cnnscope/error.hpp"
#include "cnnscope/polydata.hpp"
#include "cnnscope/similarity.hpp"
#include "cnnscope/tensor.hpp"

namespace cnnscope {

enum class View { weight_grid, image_grid, distribution_grid, trajectory, accumulated_image_grid };

inline std::string_view view_name(View v) {
  switch (v) {
    case View::weight_grid: return "weight_grid";
    case View::image_grid: return "image_grid";
    case View::distribution_grid: return "distribution_grid";
    case View::trajectory: return "trajectory";
    case View::accumulated_image_grid: return "accumulated_image_grid";
  }
  return "?";
}

inline View parse_view(std::string_view s) {
  for (View v : {View::weight_grid, View::image_grid, View::distribution_grid, View::trajectory,
                 View::accumulated_image_grid})
    if (view_name(v) == s) return v;
  throw DomainError("unknown view '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Grid layout
// ---------------------------------------------------------------------------

/// Window k sits at row k / cols, column k % cols; row 0 is the bottom row.
struct GridLayout {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t window_count = 0;

  std::size_t row_of(std::size_t k) const { return k / cols; }
  std::size_t col_of(std::size_t k) const { return k % cols; }
  bool operator==(const GridLayout&) const = default;
};

/// rows = largest power of two not above floor(sqrt(f)), cols = ceil(f / rows).
/// 16 -> 4x4, 32 -> 4x8, 192 -> 8x24.
inline GridLayout grid_layout(std::size_t f) {
  if (f == 0) throw DomainError("grid layout needs at least one window");
  std::size_t root = static_cast<std::size_t>(std::sqrt(static_cast<double>(f)));
  while (root * root > f) --root;
  while ((root + 1) * (root + 1) <= f) ++root;
  const std::size_t rows = std::bit_floor(root);
  return {rows, (f + rows - 1) / rows, f};
}

// Window pitch of activation grids; windows span the unit cell and the rest is gap.
inline constexpr double kActivationPitch = 1.2;

// ---------------------------------------------------------------------------
// Weight grid
// ---------------------------------------------------------------------------

/// One raised quad per weight. Window n = filter * c + channel; block (p, q)
/// of a window occupies the unit square at column q and row (w - 1 - p) inside
/// the window, with a one-block gap between windows. All four corners sit at
/// z = weight and carry the "weight" scalar.
inline PolyData build_weight_grid(const Tensor4& weights, const GridLayout& layout) {
  const auto [w, w2, c, f] = weights.shape();
  if (w != w2) throw ShapeError("weight windows must be square");
  if (layout.window_count != c * f || layout.rows * layout.cols < layout.window_count) {
    throw ShapeError("layout has " + std::to_string(layout.window_count) + " windows, weights need " +
                     std::to_string(c * f));
  }
  PolyData pd;
  const std::size_t blocks = w * w * c * f;
  pd.points.reserve(4 * blocks);
  pd.quads.reserve(blocks);
  std::vector<float> scalar;
  scalar.reserve(4 * blocks);
  const std::size_t pitch = w + 1;
  for (std::size_t k = 0; k < f; ++k)
    for (std::size_t r = 0; r < c; ++r) {
      const std::size_t n = k * c + r;
      const double x0 = static_cast<double>(layout.col_of(n) * pitch);
      const double y0 = static_cast<double>(layout.row_of(n) * pitch);
      for (std::size_t p = 0; p < w; ++p)
        for (std::size_t q = 0; q < w; ++q) {
          const auto z = static_cast<float>(weights(p, q, r, k));
          const double x = x0 + static_cast<double>(q);
          const double y = y0 + static_cast<double>(w - 1 - p);
          const auto base = static_cast<std::int64_t>(pd.points.size());
          pd.points.push_back({static_cast<float>(x), static_cast<float>(y), z});
          pd.points.push_back({static_cast<float>(x + 1), static_cast<float>(y), z});
          pd.points.push_back({static_cast<float>(x + 1), static_cast<float>(y + 1), z});
          pd.points.push_back({static_cast<float>(x), static_cast<float>(y + 1), z});
          pd.quads.push_back({base, base + 1, base + 2, base + 3});
          scalar.insert(scalar.end(), 4, z);
        }
    }
  pd.scalars.push_back({"weight", std::move(scalar)});
  return pd;
}

// ---------------------------------------------------------------------------
// Activation grids
// ---------------------------------------------------------------------------

/// Summed feature maps as a point image: one point per pixel per window at the
/// pixel center, each window spanning a unit cell (image row 0 at the top).
/// Scalar "intensity" is the summed activation. No cells are emitted: at
/// VGG scale (3.2M points) vertex cells would triple the file size.
inline PolyData build_image_grid(const Tensor3& summed, const GridLayout& layout) {
  const auto [m, n, f] = summed.shape();
  if (m != n) throw ShapeError("feature maps must be square");
  if (layout.window_count != f || layout.rows * layout.cols < f) {
    throw ShapeError("layout has " + std::to_string(layout.window_count) + " windows, maps have " +
                     std::to_string(f));
  }
  PolyData pd;
  pd.points.reserve(m * m * f);
  std::vector<float> intensity;
  intensity.reserve(m * m * f);
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t k = 0; k < f; ++k) {
    const double x0 = static_cast<double>(layout.col_of(k)) * kActivationPitch;
    const double y0 = static_cast<double>(layout.row_of(k)) * kActivationPitch;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double x = x0 + (static_cast<double>(j) + 0.5) * inv;
        const double y = y0 + (static_cast<double>(m - 1 - i) + 0.5) * inv;
        pd.points.push_back({static_cast<float>(x), static_cast<float>(y), 0.0f});
        intensity.push_back(static_cast<float>(summed(i, j, k)));
      }
  }
  pd.scalars.push_back({"intensity", std::move(intensity)});
  return pd;
}

/// Flattened feature maps as distributions. Window k holds m*m vertices at
/// local x = pixel / (m*m - 1), local y = value / global max, both in [0, 1].
/// Scalars: "group" (see group_labels), "activation" (raw summed value) and
/// "degenerate" (1 everywhere when the whole grid is zero).
inline PolyData build_distribution_grid(const Tensor3& summed, const GridLayout& layout,
                                        const std::vector<Group>* groups = nullptr) {
  const auto [m, n, f] = summed.shape();
  if (layout.window_count != f || layout.rows * layout.cols < f) {
    throw ShapeError("layout has " + std::to_string(layout.window_count) + " windows, maps have " +
                     std::to_string(f));
  }
  const std::size_t len = m * n;
  double global_max = 0.0;
  for (double v : summed.data()) global_max = std::max(global_max, v);
  const bool degenerate = !(global_max > 0.0);
  const auto labels = group_labels(groups ? *groups : std::vector<Group>{}, f);

  PolyData pd;
  pd.points.reserve(len * f);
  std::vector<float> group, activation;
  group.reserve(len * f);
  activation.reserve(len * f);
  for (std::size_t k = 0; k < f; ++k) {
    const double x0 = static_cast<double>(layout.col_of(k)) * kActivationPitch;
    const double y0 = static_cast<double>(layout.row_of(k)) * kActivationPitch;
    const Vector flat = flatten_window(summed, k);
    const Vector ys = degenerate ? Vector(len, 0.0) : normalize_unit(flat, global_max);
    for (std::size_t i = 0; i < len; ++i) {
      const double x = len > 1 ? static_cast<double>(i) / static_cast<double>(len - 1) : 0.0;
      pd.verts.push_back(static_cast<std::int64_t>(pd.points.size()));
      pd.points.push_back({static_cast<float>(x0 + x), static_cast<float>(y0 + ys[i]), 0.0f});
      group.push_back(static_cast<float>(labels[k]));
      activation.push_back(static_cast<float>(flat[i]));
    }
  }
  pd.scalars.push_back({"group", std::move(group)});
  pd.scalars.push_back({"activation", std::move(activation)});
  pd.scalars.push_back({"degenerate", std::vector<float>(pd.points.size(), degenerate ? 1.0f : 0.0f)});
  return pd;
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// Path of three weight coordinates (row-major flat indices into a kernel).
struct TrajectoryTrace {
  std::array<std::size_t, 3> dims{0, 1, 2};
  std::vector<std::array<double, 3>> points;
  std::vector<std::int64_t> steps;

  TrajectoryTrace() = default;
  explicit TrajectoryTrace(std::array<std::size_t, 3> d) : dims(d) {
    if (d[0] == d[1] || d[0] == d[2] || d[1] == d[2]) {
      throw DomainError("trajectory dimensions must be distinct");
    }
  }

  std::size_t size() const { return steps.size(); }
  bool operator==(const TrajectoryTrace&) const = default;
};

/// Appends the selected coordinates of `weights` at `step`. Takes the trace by
/// value so long runs can move it through without copying.
inline TrajectoryTrace append_trajectory(TrajectoryTrace trace, const Tensor4& weights,
                                         std::int64_t step) {
  if (!trace.steps.empty() && step <= trace.steps.back()) {
    throw DomainError("trajectory steps must increase (got " + std::to_string(step) + " after " +
                      std::to_string(trace.steps.back()) + ")");
  }
  for (std::size_t d : trace.dims)
    if (d >= weights.size()) {
      throw IndexError("trajectory dimension " + std::to_string(d) + " exceeds weight count " +
                       std::to_string(weights.size()));
    }
  trace.points.push_back({weights[trace.dims[0]], weights[trace.dims[1]], weights[trace.dims[2]]});
  trace.steps.push_back(step);
  return trace;
}

/// One vertex per recorded step, scalar "step".
inline PolyData trajectory_polydata(const TrajectoryTrace& trace) {
  PolyData pd;
  pd.points.reserve(trace.size());
  std::vector<float> step;
  step.reserve(trace.size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& p = trace.points[i];
    pd.verts.push_back(static_cast<std::int64_t>(i));
    pd.points.push_back({static_cast<float>(p[0]), static_cast<float>(p[1]), static_cast<float>(p[2])});
    step.push_back(static_cast<float>(trace.steps[i]));
  }
  pd.scalars.push_back({"step", std::move(step)});
  return pd;
}

/// Euclidean length of the path over points with step >= from_step.
inline double path_length(const TrajectoryTrace& trace, std::int64_t from_step = 0) {
  double total = 0.0;
  for (std::size_t i = 1; i < trace.size(); ++i) {
    if (trace.steps[i - 1] < from_step) continue;
    const auto& a = trace.points[i - 1];
    const auto& b = trace.points[i];
    total += std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) +
                       (a[2] - b[2]) * (a[2] - b[2]));
  }
  return total;
}

/// Elementwise running sum of batch-summed maps (accumulated image-grid).
inline Tensor3 accumulate(const Tensor3& running, const Tensor3& summed) {
  if (running.shape() != summed.shape()) {
    throw ShapeError("accumulate shape mismatch " + shape_string(running.shape()) + " vs " +
                     shape_string(summed.shape()));
  }
  Tensor3 out = running;
  auto dst = out.data();
  auto src = summed.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  return out;
}

}  // namespace cnnscope
