#pragma once

// Shared helpers for the test binaries.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "cnnscope/cnn.hpp"
#include "cnnscope/dataset.hpp"
#include "cnnscope/polydata.hpp"
#include "cnnscope/rng.hpp"

namespace testing_support {

using namespace cnnscope;

inline Tensor4 random_tensor(Tensor4::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor4 t(shape);
  Rng rng(seed);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline Batch random_batch(const Network& net, std::size_t n, std::uint64_t seed) {
  const auto& s = net.spec();
  Batch b{random_tensor({n, s.input_size, s.input_size, s.input_channels}, seed, 0.0, 1.0), {}};
  Rng rng(seed + 99);
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(rng.below(net.classes())));
  return b;
}

/// conv(2, 3x3) -> pool(2) -> conv(2, 3x3) -> dense(16) -> softmax(10) on 8x8 inputs.
/// The second conv already shrinks the maps to 1x1, so there is no second pool.
inline NetworkSpec toy_spec_8x8() {
  NetworkSpec s;
  s.input_size = 8;
  s.input_channels = 1;
  s.layers = {ConvSpec{2, 3, 0}, PoolSpec{2}, ConvSpec{2, 3, 0}, DenseSpec{16}, SoftmaxSpec{10}};
  return s;
}

/// conv(2, 3x3) -> pool(2) -> dense(4) -> softmax(3) on 4x4 inputs.
inline NetworkSpec toy_spec_4x4() {
  NetworkSpec s;
  s.input_size = 4;
  s.input_channels = 1;
  s.layers = {ConvSpec{2, 3, 0}, PoolSpec{2}, DenseSpec{4}, SoftmaxSpec{3}};
  return s;
}

struct GradCheck {
  std::size_t parameters = 0;
  double worst_relative = 0.0;
  double worst_absolute = 0.0;
  std::string worst_where;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps parameters
// whose gradient is numerically zero from dividing rounding noise by ~0.
inline constexpr double kGradFloor = 1e-4;

/// Compares every analytic gradient of the summed batch objective with a
/// central finite difference of step `eps`.
inline GradCheck gradient_check(const Network& net, const Batch& batch, double eps = 1e-5) {
  const Gradients g = compute_gradients(net, batch, Reduction::sum);
  GradCheck out;
  Network probe = net;
  auto visit = [&](std::size_t layer, const std::string& what, std::span<const double> grads,
                   const std::function<double&(Network&, std::size_t)>& ref) {
    for (std::size_t i = 0; i < grads.size(); ++i) {
      double& w = ref(probe, i);
      const double saved = w;
      w = saved + eps;
      const double up = objective(probe, batch, Reduction::sum);
      w = saved - eps;
      const double down = objective(probe, batch, Reduction::sum);
      w = saved;
      const double numeric = (up - down) / (2 * eps);
      const double abs_err = std::abs(numeric - grads[i]);
      const double rel = abs_err / std::max({std::abs(numeric), std::abs(grads[i]), kGradFloor});
      ++out.parameters;
      out.worst_absolute = std::max(out.worst_absolute, abs_err);
      if (rel > out.worst_relative) {
        out.worst_relative = rel;
        out.worst_where = "layer " + std::to_string(layer) + " " + what + "[" + std::to_string(i) + "]";
      }
    }
  };
  for (std::size_t l = 0; l < net.params().size(); ++l) {
    if (const auto* c = std::get_if<ConvParams>(&g.params[l])) {
      visit(l, "kernel", c->kernel.data(),
            [l](Network& n, std::size_t i) -> double& { return std::get<ConvParams>(n.mutable_params()[l]).kernel[i]; });
      visit(l, "bias", c->bias,
            [l](Network& n, std::size_t i) -> double& { return std::get<ConvParams>(n.mutable_params()[l]).bias[i]; });
    } else if (const auto* d = std::get_if<DenseParams>(&g.params[l])) {
      visit(l, "weights", d->weights.data(), [l](Network& n, std::size_t i) -> double& {
        return std::get<DenseParams>(n.mutable_params()[l]).weights[i];
      });
      visit(l, "bias", d->bias,
            [l](Network& n, std::size_t i) -> double& { return std::get<DenseParams>(n.mutable_params()[l]).bias[i]; });
    }
  }
  return out;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cnnscope_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Exact equality, names and order of scalar arrays included.
inline bool same_polydata(const PolyData& a, const PolyData& b) {
  return a.points == b.points && a.verts == b.verts && a.quads == b.quads && a.scalars.size() == b.scalars.size() &&
         std::equal(a.scalars.begin(), a.scalars.end(), b.scalars.begin(),
                    [](const NamedArray& x, const NamedArray& y) { return x.name == y.name && x.values == y.values; });
}

}  // namespace testing_support
