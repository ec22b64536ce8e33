#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cnnscope/cnn.hpp"
#include "cnnscope/emit.hpp"
#include "cnnscope/error.hpp"
#include "cnnscope/similarity.hpp"
#include "cnnscope/views.hpp"

namespace cnnscope {

// ---------------------------------------------------------------------------
// Network description as JSON
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json spec_to_json(const NetworkSpec& spec) {
  nlohmann::ordered_json j;
  j["input_size"] = spec.input_size;
  j["input_channels"] = spec.input_channels;
  auto& layers = j["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : spec.layers) {
    nlohmann::ordered_json e;
    if (const auto* c = std::get_if<ConvSpec>(&l)) {
      e["kind"] = "conv";
      e["filters"] = c->filters;
      e["window"] = c->window;
      e["channels"] = c->channels;
    } else if (const auto* p = std::get_if<PoolSpec>(&l)) {
      e["kind"] = "maxpool";
      e["size"] = p->size;
    } else if (const auto* d = std::get_if<DenseSpec>(&l)) {
      e["kind"] = "dense";
      e["units"] = d->units;
    } else {
      e["kind"] = "softmax";
      e["classes"] = std::get<SoftmaxSpec>(l).classes;
    }
    layers.push_back(std::move(e));
  }
  return j;
}

inline NetworkSpec spec_from_json(const nlohmann::ordered_json& j) try {
  NetworkSpec spec;
  spec.input_size = j.at("input_size").get<std::size_t>();
  spec.input_channels = j.at("input_channels").get<std::size_t>();
  for (const auto& e : j.at("layers")) {
    const auto kind = e.at("kind").get<std::string>();
    if (kind == "conv") {
      spec.layers.push_back(ConvSpec{e.at("filters").get<std::size_t>(), e.at("window").get<std::size_t>(),
                                     e.at("channels").get<std::size_t>()});
    } else if (kind == "maxpool") {
      spec.layers.push_back(PoolSpec{e.at("size").get<std::size_t>()});
    } else if (kind == "dense") {
      spec.layers.push_back(DenseSpec{e.at("units").get<std::size_t>()});
    } else if (kind == "softmax") {
      spec.layers.push_back(SoftmaxSpec{e.at("classes").get<std::size_t>()});
    } else {
      throw ParseError("unknown layer kind '" + kind + "'");
    }
  }
  return spec;
} catch (const nlohmann::json::exception& e) {
  throw ParseError(std::string("bad network description: ") + e.what());
}

// ---------------------------------------------------------------------------
// Snapshot
// ---------------------------------------------------------------------------

inline constexpr char kSnapshotMagic[8] = {'C', 'N', 'N', 'S', 'N', 'A', 'P', '1'};

/// Everything needed to rebuild every view of one step offline. The network
/// parameters are complete, so a snapshot also serves as a checkpoint.
struct Snapshot {
  std::int64_t step = 0;
  double loss = 0.0;
  Network net;
  std::vector<Tensor3> summed;       // per conv layer, batch-summed post-ReLU maps of this step
  std::vector<Tensor3> accumulated;  // per conv layer, running sum since the layer last changed shape
  std::vector<std::vector<Group>> groups;  // per conv layer, latest similarity groups (may be empty)
  std::vector<std::vector<std::size_t>> original_ids;  // per conv layer, original index of each filter
  std::size_t trajectory_layer = 0;
  TrajectoryTrace trajectory;

  bool operator==(const Snapshot&) const = default;
};

inline std::string snapshot_filename(std::int64_t step) {
  char name[48];
  std::snprintf(name, sizeof name, "snapshot_%08lld.bin", static_cast<long long>(step));
  return name;
}

namespace detail {

struct TensorEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<const double> data;
};

}  // namespace detail

/// Layout: 8-byte magic, u64 little-endian header length, JSON header, then
/// the tensors as little-endian float64 in header order. Byte-for-byte
/// deterministic for equal snapshots.
inline std::string encode_snapshot(const Snapshot& s) {
  using nlohmann::ordered_json;
  std::vector<detail::TensorEntry> entries;
  const auto& spec = s.net.spec();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& p = s.net.params()[i];
    const std::string base = "layer" + std::to_string(i);
    if (const auto* c = std::get_if<ConvParams>(&p)) {
      const auto sh = c->kernel.shape();
      entries.push_back({base + ".kernel", {sh.begin(), sh.end()}, c->kernel.data()});
      entries.push_back({base + ".bias", {c->bias.size()}, c->bias});
    } else if (const auto* d = std::get_if<DenseParams>(&p)) {
      const auto sh = d->weights.shape();
      entries.push_back({base + ".weights", {sh.begin(), sh.end()}, d->weights.data()});
      entries.push_back({base + ".bias", {d->bias.size()}, d->bias});
    }
  }
  for (std::size_t k = 0; k < s.summed.size(); ++k) {
    const auto sh = s.summed[k].shape();
    entries.push_back({"conv" + std::to_string(k) + ".summed", {sh.begin(), sh.end()}, s.summed[k].data()});
  }
  for (std::size_t k = 0; k < s.accumulated.size(); ++k) {
    const auto sh = s.accumulated[k].shape();
    entries.push_back(
        {"conv" + std::to_string(k) + ".accumulated", {sh.begin(), sh.end()}, s.accumulated[k].data()});
  }
  std::vector<double> traj;
  for (const auto& p : s.trajectory.points) traj.insert(traj.end(), p.begin(), p.end());
  entries.push_back({"trajectory", {s.trajectory.size(), 3}, traj});

  ordered_json header;
  header["step"] = s.step;
  header["loss"] = s.loss;
  header["network"] = spec_to_json(spec);
  auto& tensors = header["tensors"] = ordered_json::array();
  std::size_t offset = 0;
  for (const auto& e : entries) {
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}});
    offset += e.data.size() * sizeof(double);
  }
  auto& groups = header["groups"] = ordered_json::array();
  for (const auto& gs : s.groups) groups.push_back(gs);
  header["original_ids"] = s.original_ids;
  header["trajectory"] = {{"layer", s.trajectory_layer},
                          {"dims", s.trajectory.dims},
                          {"steps", s.trajectory.steps}};

  const std::string text = header.dump();
  std::string out(kSnapshotMagic, sizeof kSnapshotMagic);
  detail::append_le<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& e : entries)
    for (double v : e.data) detail::append_le<double>(out, v);
  return out;
}

inline Snapshot decode_snapshot(std::string_view bytes, const std::string& origin = "<memory>") {
  using nlohmann::ordered_json;
  auto fail = [&](const std::string& why) { return ParseError(origin + ": " + why); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kSnapshotMagic, 8) != 0) throw fail("not a snapshot file");
  const auto hlen = detail::read_le<std::uint64_t>(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw fail("truncated header");
  const std::string_view data = bytes.substr(16 + hlen);
  try {
    const ordered_json h = ordered_json::parse(bytes.substr(16, hlen));
    std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<double>>> tensors;
    for (const auto& t : h.at("tensors")) {
      auto shape = t.at("shape").get<std::vector<std::size_t>>();
      std::size_t n = 1;
      for (auto e : shape) n *= e;
      const auto off = t.at("offset").get<std::size_t>();
      if (off > data.size() || n * sizeof(double) > data.size() - off) {
        throw fail("tensor '" + t.at("name").get<std::string>() + "' runs past end of file");
      }
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = detail::read_le<double>(data.data() + off + i * sizeof(double));
      tensors[t.at("name").get<std::string>()] = {std::move(shape), std::move(v)};
    }
    auto take = [&](const std::string& name) -> std::pair<std::vector<std::size_t>, std::vector<double>>& {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw fail("missing tensor '" + name + "'");
      return it->second;
    };
    auto shape_of = [&]<std::size_t R>(const std::vector<std::size_t>& v, const std::string& name) {
      if (v.size() != R) throw fail("tensor '" + name + "' has wrong rank");
      std::array<std::size_t, R> a{};
      std::copy(v.begin(), v.end(), a.begin());
      return a;
    };

    Snapshot s;
    s.step = h.at("step").get<std::int64_t>();
    s.loss = h.at("loss").get<double>();
    NetworkSpec spec = spec_from_json(h.at("network"));
    std::vector<LayerParams> params(spec.layers.size());
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      const std::string base = "layer" + std::to_string(i);
      if (std::holds_alternative<ConvSpec>(spec.layers[i])) {
        auto& k = take(base + ".kernel");
        params[i] = ConvParams{Tensor4(shape_of.template operator()<4>(k.first, base), std::move(k.second)),
                               std::move(take(base + ".bias").second)};
      } else if (!std::holds_alternative<PoolSpec>(spec.layers[i])) {
        auto& w = take(base + ".weights");
        params[i] = DenseParams{Tensor2(shape_of.template operator()<2>(w.first, base), std::move(w.second)),
                                std::move(take(base + ".bias").second)};
      }
    }
    s.net = Network(std::move(spec), std::move(params), s.step);
    const std::size_t convs = s.net.conv_layers().size();
    for (std::size_t k = 0; k < convs; ++k) {
      for (auto [suffix, dst] : {std::pair{".summed", &s.summed}, std::pair{".accumulated", &s.accumulated}}) {
        const std::string name = "conv" + std::to_string(k) + suffix;
        auto it = tensors.find(name);
        if (it == tensors.end()) continue;
        dst->push_back(Tensor3(shape_of.template operator()<3>(it->second.first, name), std::move(it->second.second)));
      }
    }
    for (const auto& gs : h.at("groups")) s.groups.push_back(gs.get<std::vector<Group>>());
    h.at("original_ids").get_to(s.original_ids);
    const auto& tj = h.at("trajectory");
    s.trajectory_layer = tj.at("layer").get<std::size_t>();
    s.trajectory = TrajectoryTrace(tj.at("dims").get<std::array<std::size_t, 3>>());
    s.trajectory.steps = tj.at("steps").get<std::vector<std::int64_t>>();
    const auto& pts = take("trajectory");
    if (pts.second.size() != 3 * s.trajectory.steps.size()) throw fail("trajectory length mismatch");
    for (std::size_t i = 0; i < s.trajectory.steps.size(); ++i) {
      s.trajectory.points.push_back({pts.second[3 * i], pts.second[3 * i + 1], pts.second[3 * i + 2]});
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad header: ") + e.what());
  } catch (const ShapeError& e) {
    throw fail(std::string("inconsistent tensors: ") + e.what());
  }
}

inline std::size_t write_snapshot(const Snapshot& s, const std::filesystem::path& path) {
  const std::string bytes = encode_snapshot(s);
  detail::FileSink sink(path);
  sink.write(bytes);
  return sink.finish();
}

inline Snapshot read_snapshot(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open snapshot", path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_snapshot(bytes, path.string());
}

/// Snapshot files in a directory, ordered by step.
inline std::vector<std::filesystem::path> list_snapshots(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("snapshot directory not found", dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.starts_with("snapshot_") && name.ends_with(".bin")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no snapshot files in", dir.string());
  return out;
}

}  // namespace cnnscope
