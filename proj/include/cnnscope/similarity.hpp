#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cnnscope/error.hpp"
#include "cnnscope/tensor.hpp"

namespace cnnscope {

inline constexpr double kDefaultPccThreshold = 0.97;
inline constexpr double kDegenerateStddev = 1e-12;

/// Pearson correlation coefficient of two equal-length vectors.
///
/// When either vector has a (population) standard deviation below 1e-12 the
/// coefficient is undefined; such pairs score 1 if the vectors agree
/// elementwise within 1e-12 and 0 otherwise, so dead filters group with each
/// other and with nothing else.
inline double pcc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("pcc length mismatch");
  if (x.size() < 2) throw DomainError("pcc needs at least two samples");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (std::sqrt(sxx / n) < kDegenerateStddev || std::sqrt(syy / n) < kDegenerateStddev) {
    for (std::size_t i = 0; i < x.size(); ++i)
      if (std::abs(x[i] - y[i]) > kDegenerateStddev) return 0.0;
    return 1.0;
  }
  return std::clamp(sxy / (std::sqrt(sxx) * std::sqrt(syy)), -1.0, 1.0);
}

/// Pairwise similarity of the flattened filter planes of `summed` [m, m, f].
/// Only the upper triangle is evaluated; the lower one is mirrored and the
/// diagonal is exactly 1.
template <typename Metric>
Tensor2 similarity_matrix(const Tensor3& summed, Metric&& metric) {
  const std::size_t f = summed.extent(2);
  if (f < 2) throw DomainError("similarity needs at least two filters");
  if (summed.extent(0) * summed.extent(1) < 2) throw DomainError("feature maps need >= 2 pixels");
  std::vector<Vector> planes;
  planes.reserve(f);
  for (std::size_t k = 0; k < f; ++k) planes.push_back(flatten_window(summed, k));
  Tensor2 out({f, f});
  for (std::size_t i = 0; i < f; ++i) {
    out(i, i) = 1.0;
    for (std::size_t j = i + 1; j < f; ++j) out(i, j) = out(j, i) = metric(planes[i], planes[j]);
  }
  return out;
}

inline Tensor2 pcc_matrix(const Tensor3& summed) {
  return similarity_matrix(summed, [](const Vector& a, const Vector& b) { return pcc(a, b); });
}

struct Group {
  std::vector<std::size_t> members;  // sorted ascending
  std::size_t keep = 0;              // smallest member
  bool operator==(const Group&) const = default;
};

/// Connected components (size >= 2) of the graph whose edges are the pairs
/// with similarity >= threshold. Groups are ordered by their kept filter.
inline std::vector<Group> group_filters(const Tensor2& matrix, double threshold) {
  const std::size_t f = matrix.extent(0);
  if (matrix.extent(1) != f) throw ShapeError("similarity matrix must be square");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw DomainError("threshold must lie in (0, 1]");

  std::vector<std::size_t> parent(f);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = i + 1; j < f; ++j)
      if (matrix(i, j) >= threshold) {
        // Root at the smaller index so each root is its component's minimum.
        const std::size_t a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }

  std::vector<std::vector<std::size_t>> comps(f);
  for (std::size_t v = 0; v < f; ++v) comps[find(v)].push_back(v);
  std::vector<Group> groups;
  for (std::size_t root = 0; root < f; ++root)
    if (comps[root].size() >= 2) groups.push_back(Group{comps[root], comps[root].front()});
  return groups;
}

struct SimilarityReport {
  std::int64_t step = 0;
  std::size_t layer_id = 0;
  Tensor2 matrix;
  double threshold = kDefaultPccThreshold;
  std::vector<Group> groups;

  std::size_t filters() const { return matrix.extent(0); }
  bool operator==(const SimilarityReport&) const = default;
};

inline SimilarityReport analyze_similarity(const Tensor3& summed, double threshold,
                                           std::int64_t step, std::size_t layer_id) {
  SimilarityReport r{step, layer_id, pcc_matrix(summed), threshold, {}};
  r.groups = group_filters(r.matrix, threshold);
  return r;
}

/// Per-filter group label: 0 for ungrouped filters, otherwise 1 + group index.
inline std::vector<int> group_labels(const std::vector<Group>& groups, std::size_t filters) {
  std::vector<int> out(filters, 0);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t m : groups[g].members)
      if (m < filters) out[m] = static_cast<int>(g + 1);
  return out;
}

template <typename Json>
void to_json(Json& j, const Group& g) {
  j = Json{{"members", g.members}, {"keep", g.keep}};
}

template <typename Json>
void from_json(const Json& j, Group& g) {
  j.at("members").get_to(g.members);
  j.at("keep").get_to(g.keep);
}

template <typename Json>
void to_json(Json& j, const SimilarityReport& r) {
  const std::size_t f = r.filters();
  Json rows = Json::array();
  for (std::size_t i = 0; i < f; ++i) {
    std::vector<double> row(r.matrix.values().begin() + static_cast<std::ptrdiff_t>(i * f),
                            r.matrix.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * f));
    rows.push_back(std::move(row));
  }
  j = Json{{"step", r.step},           {"layer", r.layer_id}, {"threshold", r.threshold},
                     {"matrix", std::move(rows)}, {"groups", r.groups}};
}

template <typename Json>
void from_json(const Json& j, SimilarityReport& r) {
  j.at("step").get_to(r.step);
  j.at("layer").get_to(r.layer_id);
  j.at("threshold").get_to(r.threshold);
  j.at("groups").get_to(r.groups);
  const auto& rows = j.at("matrix");
  const std::size_t f = rows.size();
  r.matrix = Tensor2({f, f});
  for (std::size_t i = 0; i < f; ++i) {
    if (rows[i].size() != f) throw ParseError("similarity matrix is not square");
    for (std::size_t k = 0; k < f; ++k) r.matrix(i, k) = rows[i][k].template get<double>();
  }
}

/// f x f heatmap CSV; values in shortest round-trip form, never rounded.
inline std::string heatmap_csv(const Tensor2& matrix) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < matrix.extent(0); ++i) {
    for (std::size_t k = 0; k < matrix.extent(1); ++k) {
      if (k) out += ',';
      auto res = std::to_chars(buf, buf + sizeof buf, matrix(i, k));
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  return out;
}

inline void write_heatmap_csv(const Tensor2& matrix, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing", path.string());
  const auto text = heatmap_csv(matrix);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw IoError("write failed", path.string());
}

}  // namespace cnnscope
