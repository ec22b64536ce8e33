#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cnnscope/cnn.hpp"
#include "cnnscope/error.hpp"
#include "cnnscope/rng.hpp"
#include "cnnscope/tensor.hpp"

namespace cnnscope {

struct Dataset {
  Tensor4 images;  // [n, h, h, c], pixels scaled to [0, 1]
  std::vector<int> labels;
  std::size_t classes = 10;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return images.extent(1); }

  Batch gather(std::span<const std::size_t> indices) const {
    const auto [n, h, w, c] = images.shape();
    const std::size_t per = h * w * c;
    Batch b{Tensor4({indices.size(), h, w, c}), std::vector<int>(indices.size())};
    auto dst = b.images.data();
    auto src = images.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const std::size_t at = indices[i];
      if (at >= n) throw IndexError("sample index out of range");
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(at * per), per,
                  dst.begin() + static_cast<std::ptrdiff_t>(i * per));
      b.labels[i] = labels[at];
    }
    return b;
  }

  Dataset head(std::size_t count) const {
    count = std::min(count, size());
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = i;
    Batch b = gather(idx);
    return Dataset{std::move(b.images), std::move(b.labels), classes};
  }
};

namespace detail {

inline std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open", path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int got;
  while ((got = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + got);
  const bool failed = got < 0;
  gzclose(f);
  if (failed) throw IoError("read failed", path.string());
  return out;
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

inline std::filesystem::path find_idx(const std::filesystem::path& dir, const std::string& stem) {
  for (const auto* suffix : {"", ".gz"}) {
    auto p = dir / (stem + suffix);
    if (std::filesystem::exists(p)) return p;
  }
  throw IoError("missing MNIST file " + stem, dir.string());
}

}  // namespace detail

/// Reads an IDX image file (magic 0x00000803) into [n, rows, cols, 1] scaled by 1/255.
/// Gzip-compressed files are accepted transparently.
inline Tensor4 read_idx_images(const std::filesystem::path& path) {
  const auto raw = detail::read_maybe_gzip(path);
  if (raw.size() < 16 || detail::be32(raw, 0) != 0x00000803) {
    throw ParseError("not an IDX image file: " + path.string());
  }
  const std::size_t n = detail::be32(raw, 4), rows = detail::be32(raw, 8),
                    cols = detail::be32(raw, 12);
  if (rows != cols) throw ParseError("non-square images in " + path.string());
  if (raw.size() != 16 + n * rows * cols) throw ParseError("truncated IDX file " + path.string());
  Tensor4 out({n, rows, cols, 1});
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = raw[16 + i] / 255.0;
  return out;
}

/// Reads an IDX label file (magic 0x00000801).
inline std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  const auto raw = detail::read_maybe_gzip(path);
  if (raw.size() < 8 || detail::be32(raw, 0) != 0x00000801) {
    throw ParseError("not an IDX label file: " + path.string());
  }
  const std::size_t n = detail::be32(raw, 4);
  if (raw.size() != 8 + n) throw ParseError("truncated IDX file " + path.string());
  return std::vector<int>(raw.begin() + 8, raw.end());
}

struct MnistSplits {
  Dataset train;
  Dataset test;
};

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from a directory.
inline MnistSplits load_mnist(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found", dir.string());
  auto load = [&](const std::string& prefix) {
    Dataset d{read_idx_images(detail::find_idx(dir, prefix + "-images-idx3-ubyte")),
              read_idx_labels(detail::find_idx(dir, prefix + "-labels-idx1-ubyte")), 10};
    if (d.images.extent(0) != d.labels.size()) {
      throw ParseError("image/label count mismatch for " + prefix);
    }
    return d;
  };
  return {load("train"), load("t10k")};
}

struct SyntheticSpec {
  std::size_t samples = 1000;
  std::size_t classes = 10;
  std::size_t image_size = 28;
  double noise = 0.1;
  std::uint64_t seed = 1;
};

/// Gaussian blob per class: class k places a bright blob at a fixed position
/// on a circle, plus per-pixel Gaussian noise, clamped to [0, 1]. Labels cycle
/// through the classes so every prefix is balanced.
inline Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.samples == 0 || spec.classes < 2 || spec.image_size < 4) {
    throw DomainError("degenerate synthetic dataset");
  }
  Rng rng(spec.seed);
  const std::size_t n = spec.samples, m = spec.image_size;
  Dataset d{Tensor4({n, m, m, 1}), std::vector<int>(n), spec.classes};
  const double radius = 0.3 * static_cast<double>(m);
  const double sigma = 0.12 * static_cast<double>(m);
  for (std::size_t s = 0; s < n; ++s) {
    const int label = static_cast<int>(s % spec.classes);
    d.labels[s] = label;
    const double angle = 2.0 * std::numbers::pi * label / static_cast<double>(spec.classes);
    const double cy = 0.5 * (m - 1) + radius * std::sin(angle) + rng.normal(0.0, 0.5);
    const double cx = 0.5 * (m - 1) + radius * std::cos(angle) + rng.normal(0.0, 0.5);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
        const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) +
                         rng.normal(0.0, spec.noise);
        d.images(s, i, j, 0) = std::clamp(v, 0.0, 1.0);
      }
  }
  return d;
}

/// Number of optimizer steps for `epochs` passes with the trailing partial batch dropped.
inline std::size_t planned_steps(std::size_t samples, std::size_t batch_size, std::size_t epochs) {
  if (batch_size == 0) throw DomainError("batch size must be positive");
  return epochs * (samples / batch_size);
}

}  // namespace cnnscope
