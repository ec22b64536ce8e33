#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cnnscope/cnn.hpp"
#include "cnnscope/error.hpp"
#include "cnnscope/similarity.hpp"

namespace cnnscope {

struct Merge {
  std::size_t keep = 0;
  std::vector<std::size_t> remove;  // sorted ascending
  bool operator==(const Merge&) const = default;
};

struct PrunePlan {
  std::size_t layer_id = 0;  // conv layer id
  std::vector<Merge> merges;
  std::int64_t created_at_step = 0;

  std::size_t removed_count() const {
    std::size_t n = 0;
    for (const auto& m : merges) n += m.remove.size();
    return n;
  }
  bool operator==(const PrunePlan&) const = default;
};

/// One merge per similarity group: keep the group's smallest filter, fold the rest into it.
inline PrunePlan plan_prune(const SimilarityReport& report) {
  if (report.groups.empty()) throw DomainError("nothing to prune");
  PrunePlan plan{report.layer_id, {}, report.step};
  for (const auto& g : report.groups) {
    Merge m{g.keep, {}};
    for (std::size_t f : g.members)
      if (f != g.keep) m.remove.push_back(f);
    std::sort(m.remove.begin(), m.remove.end());
    plan.merges.push_back(std::move(m));
  }
  return plan;
}

/// Throws unless every index is below `filters`, keep is not removed, and merges are disjoint.
inline void check_plan(const PrunePlan& plan, std::size_t filters) {
  std::set<std::size_t> seen;
  auto claim = [&](std::size_t f) {
    if (f >= filters) {
      throw IndexError("filter " + std::to_string(f) + " out of range for layer with " +
                       std::to_string(filters) + " filters");
    }
    if (!seen.insert(f).second) throw DomainError("filter " + std::to_string(f) + " named twice in plan");
  };
  for (const auto& m : plan.merges) {
    claim(m.keep);
    for (std::size_t r : m.remove) claim(r);
  }
}

namespace detail {

// Position of the first parametric layer after `pos`; pools in between act per channel.
inline std::size_t next_parametric(const NetworkSpec& spec, std::size_t pos) {
  for (std::size_t i = pos + 1; i < spec.layers.size(); ++i)
    if (!std::holds_alternative<PoolSpec>(spec.layers[i])) return i;
  throw ShapeError("no layer consumes conv output");
}

}  // namespace detail

/// Merges redundant filters of one conv layer into their kept filter.
///
/// The removed filters' kernels and biases are dropped; the kept filter is
/// untouched. Downstream, the weights reading each removed channel are added
/// onto the weights reading the kept channel and then dropped, so when the
/// merged activations are identical the network output is unchanged.
inline Network apply_prune(const Network& net, const PrunePlan& plan) {
  const auto conv_pos = net.conv_layers();
  if (plan.layer_id >= conv_pos.size()) {
    throw DomainError("cannot prune classifier: layer " + std::to_string(plan.layer_id) +
                      " is not a convolution");
  }
  const std::size_t pos = conv_pos[plan.layer_id];
  NetworkSpec spec = net.spec();
  auto& conv_spec = std::get<ConvSpec>(spec.layers[pos]);
  const std::size_t f = conv_spec.filters;
  check_plan(plan, f);

  std::vector<bool> removed(f, false);
  for (const auto& m : plan.merges)
    for (std::size_t r : m.remove) removed[r] = true;
  std::vector<std::size_t> survivors;
  for (std::size_t k = 0; k < f; ++k)
    if (!removed[k]) survivors.push_back(k);
  const std::size_t nf = survivors.size();

  std::vector<LayerParams> params = net.params();

  // Layer L: drop kernel slices [:, :, :, r] and biases [r].
  {
    const auto& old = std::get<ConvParams>(net.params()[pos]);
    const auto [w, w2, c, _] = old.kernel.shape();
    ConvParams p{Tensor4({w, w2, c, nf}), Vector(nf)};
    for (std::size_t a = 0; a < w; ++a)
      for (std::size_t b = 0; b < w2; ++b)
        for (std::size_t r = 0; r < c; ++r)
          for (std::size_t k = 0; k < nf; ++k) p.kernel(a, b, r, k) = old.kernel(a, b, r, survivors[k]);
    for (std::size_t k = 0; k < nf; ++k) p.bias[k] = old.bias[survivors[k]];
    params[pos] = std::move(p);
    conv_spec.filters = nf;
  }

  const std::size_t next = detail::next_parametric(spec, pos);
  if (auto* next_conv = std::get_if<ConvSpec>(&spec.layers[next])) {
    // next_kernel[:, :, keep, :] += sum_r next_kernel[:, :, r, :]
    Tensor4 merged = std::get<ConvParams>(net.params()[next]).kernel;
    const auto [w, w2, c, g] = merged.shape();
    for (const auto& m : plan.merges)
      for (std::size_t r : m.remove)
        for (std::size_t a = 0; a < w; ++a)
          for (std::size_t b = 0; b < w2; ++b)
            for (std::size_t o = 0; o < g; ++o) merged(a, b, m.keep, o) += merged(a, b, r, o);
    Tensor4 kernel({w, w2, nf, g});
    for (std::size_t a = 0; a < w; ++a)
      for (std::size_t b = 0; b < w2; ++b)
        for (std::size_t k = 0; k < nf; ++k)
          for (std::size_t o = 0; o < g; ++o) kernel(a, b, k, o) = merged(a, b, survivors[k], o);
    std::get<ConvParams>(params[next]).kernel = std::move(kernel);
    next_conv->channels = nf;
  } else {
    // Flattened input row = position * f + channel, position-major.
    const auto& old = std::get<DenseParams>(net.params()[next]);
    Tensor2 merged = old.weights;
    const std::size_t rows = merged.extent(0), units = merged.extent(1);
    if (rows % f != 0) throw ShapeError("dense input width is not a multiple of the filter count");
    const std::size_t positions = rows / f;
    for (std::size_t p = 0; p < positions; ++p)
      for (const auto& m : plan.merges)
        for (std::size_t r : m.remove)
          for (std::size_t u = 0; u < units; ++u) merged(p * f + m.keep, u) += merged(p * f + r, u);
    Tensor2 weights({positions * nf, units});
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t k = 0; k < nf; ++k)
        for (std::size_t u = 0; u < units; ++u) weights(p * nf + k, u) = merged(p * f + survivors[k], u);
    std::get<DenseParams>(params[next]).weights = std::move(weights);
  }

  return Network(std::move(spec), std::move(params), net.step());
}

/// Parameters removed by applying `plan` to `net`: the filters' kernels and
/// biases plus every downstream weight reading a removed channel.
inline std::size_t pruned_parameter_count(const Network& net, const PrunePlan& plan) {
  const auto conv_pos = net.conv_layers();
  const std::size_t pos = conv_pos.at(plan.layer_id);
  const auto& conv_spec = std::get<ConvSpec>(net.spec().layers[pos]);
  const std::size_t removed = plan.removed_count();
  std::size_t n = removed * (conv_spec.window * conv_spec.window * conv_spec.channels + 1);
  const std::size_t next = detail::next_parametric(net.spec(), pos);
  if (const auto* nc = std::get_if<ConvSpec>(&net.spec().layers[next])) {
    n += removed * nc->window * nc->window * nc->filters;
  } else {
    const ActShape in = net.input_shape(next);
    n += removed * in.spatial * in.spatial * net.shapes()[next].channels;
  }
  return n;
}

template <typename Json>
void to_json(Json& j, const Merge& m) {
  j = Json{{"keep", m.keep}, {"remove", m.remove}};
}

template <typename Json>
void from_json(const Json& j, Merge& m) {
  j.at("keep").get_to(m.keep);
  j.at("remove").get_to(m.remove);
}

template <typename Json>
void to_json(Json& j, const PrunePlan& p) {
  j = Json{{"layer", p.layer_id}, {"merges", p.merges}, {"created_at_step", p.created_at_step}};
}

template <typename Json>
void from_json(const Json& j, PrunePlan& p) {
  j.at("layer").get_to(p.layer_id);
  j.at("merges").get_to(p.merges);
  j.at("created_at_step").get_to(p.created_at_step);
}

}  // namespace cnnscope
