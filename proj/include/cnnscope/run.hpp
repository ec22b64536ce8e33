#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "cnnscope/cnn.hpp"
#include "cnnscope/dataset.hpp"
#include "cnnscope/emit.hpp"
#include "cnnscope/pruner.hpp"
#include "cnnscope/session.hpp"
#include "cnnscope/similarity.hpp"
#include "cnnscope/snapshot.hpp"
#include "cnnscope/views.hpp"

namespace cnnscope {

enum class PruneMode { off, automatic, interactive };

inline std::string_view prune_mode_name(PruneMode m) {
  switch (m) {
    case PruneMode::off: return "off";
    case PruneMode::automatic: return "auto";
    case PruneMode::interactive: return "interactive";
  }
  return "?";
}

inline PruneMode parse_prune_mode(std::string_view s) {
  if (s == "off") return PruneMode::off;
  if (s == "auto") return PruneMode::automatic;
  if (s == "interactive") return PruneMode::interactive;
  throw DomainError("unknown prune mode '" + std::string(s) + "' (off|auto|interactive)");
}

/// Output file formats for emitted views.
enum class FileFormat { vtp, vtp_ascii, csv };

inline std::string_view format_name(FileFormat f) {
  switch (f) {
    case FileFormat::vtp: return "vtp";
    case FileFormat::vtp_ascii: return "vtp-ascii";
    case FileFormat::csv: return "csv";
  }
  return "?";
}

inline FileFormat parse_format(std::string_view s) {
  if (s == "vtp") return FileFormat::vtp;
  if (s == "vtp-ascii") return FileFormat::vtp_ascii;
  if (s == "csv") return FileFormat::csv;
  throw DomainError("unknown format '" + std::string(s) + "' (vtp|vtp-ascii|csv)");
}

inline std::size_t write_polydata(const PolyData& pd, const std::filesystem::path& path, FileFormat f) {
  switch (f) {
    case FileFormat::vtp: return write_vtp(pd, path, VtpMode::binary);
    case FileFormat::vtp_ascii: return write_vtp(pd, path, VtpMode::ascii);
    case FileFormat::csv: return write_csv(pd, path);
  }
  return 0;
}

inline std::string_view format_extension(FileFormat f) { return f == FileFormat::csv ? "csv" : "vtp"; }

struct RunConfig {
  std::string dataset = "mnist:data/mnist-subset";
  NetworkSpec network = NetworkSpec::simplified_lenet();
  double lr = 0.001;
  std::size_t batch_size = 50;
  std::size_t epochs = 5;
  std::uint64_t seed = 1;
  std::size_t max_steps = 0;  // 0: all planned steps
  Reduction reduction = Reduction::sum;

  std::vector<std::size_t> layers;  // instrumented conv layers, empty for all
  std::vector<View> views = {View::weight_grid, View::image_grid, View::distribution_grid, View::trajectory};
  std::size_t trajectory_layer = 0;
  std::array<std::size_t, 3> trajectory_dims{0, 1, 2};

  double pcc_threshold = kDefaultPccThreshold;
  PruneMode prune_mode = PruneMode::off;
  std::size_t prune_interval = 600;

  std::size_t snapshot_interval = 500;  // 0 disables snapshots
  std::vector<FileFormat> formats = {FileFormat::vtp};  // view files written on snapshot steps
  std::filesystem::path out;  // empty: nothing written
  std::string listen;         // empty: no streaming
  std::size_t eval_limit = 0;  // test samples used for the final accuracy, 0 for all

  void validate() const {
    if (!(lr > 0.0)) throw DomainError("lr must be positive");
    if (batch_size == 0) throw DomainError("batch size must be positive");
    if (prune_interval == 0) throw DomainError("prune interval must be positive");
    if (!(pcc_threshold > 0.0 && pcc_threshold <= 1.0)) throw DomainError("pcc threshold must be in (0, 1]");
    const auto d = trajectory_dims;
    if (d[0] == d[1] || d[0] == d[2] || d[1] == d[2]) throw DomainError("trajectory dims must be distinct");
    NetworkSpec spec = network;
    spec.resolve();
    const std::size_t convs = spec.conv_layer_positions().size();
    for (auto l : layers)
      if (l >= convs) throw DomainError("instrumented layer " + std::to_string(l) + " is not a conv layer");
    if (trajectory_layer >= convs) throw DomainError("trajectory layer is not a conv layer");
  }
};

/// "mnist:<dir>" or "synthetic:<n>[:<image size>]". Synthetic data holds out n/5 test samples.
inline MnistSplits load_dataset(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  if (kind == "mnist") return load_mnist(arg.empty() ? std::string("data/mnist-subset") : arg);
  if (kind == "synthetic") {
    SyntheticSpec s;
    try {
      const auto c2 = arg.find(':');
      s.samples = std::stoul(arg.substr(0, c2));
      if (c2 != std::string::npos) s.image_size = std::stoul(arg.substr(c2 + 1));
    } catch (const std::exception&) {
      throw DomainError("bad synthetic dataset spec '" + spec + "'");
    }
    SyntheticSpec t = s;
    t.samples = std::max<std::size_t>(1, s.samples / 5);
    t.seed = s.seed + 1;
    return {make_synthetic(s), make_synthetic(t)};
  }
  throw DomainError("unknown dataset '" + spec + "' (mnist:<dir> | synthetic:<n>)");
}

// ---------------------------------------------------------------------------
// View assembly shared by the live, offline and replay paths
// ---------------------------------------------------------------------------

/// Borrowed state from which every view of one step can be built.
struct ViewInputs {
  const Network* net = nullptr;
  const std::vector<Tensor3>* summed = nullptr;
  const std::vector<Tensor3>* accumulated = nullptr;
  const std::vector<std::vector<Group>>* groups = nullptr;
  const TrajectoryTrace* trajectory = nullptr;
  std::size_t trajectory_layer = 0;

  static ViewInputs of(const Snapshot& s) {
    return {&s.net, &s.summed, &s.accumulated, &s.groups, &s.trajectory, s.trajectory_layer};
  }
};

/// Builds `view` for conv layer `layer`; nullopt when the view does not apply
/// (trajectory on a layer that is not traced).
inline std::optional<PolyData> build_view(const ViewInputs& in, View view, std::size_t layer) {
  switch (view) {
    case View::weight_grid: {
      const Tensor4& k = in.net->conv(layer).kernel;
      return build_weight_grid(k, grid_layout(k.extent(2) * k.extent(3)));
    }
    case View::image_grid: {
      const Tensor3& s = in.summed->at(layer);
      return build_image_grid(s, grid_layout(s.extent(2)));
    }
    case View::accumulated_image_grid: {
      const Tensor3& s = in.accumulated->at(layer);
      return build_image_grid(s, grid_layout(s.extent(2)));
    }
    case View::distribution_grid: {
      const Tensor3& s = in.summed->at(layer);
      const std::vector<Group>* g = in.groups && layer < in.groups->size() ? &(*in.groups)[layer] : nullptr;
      return build_distribution_grid(s, grid_layout(s.extent(2)), g);
    }
    case View::trajectory:
      if (layer != in.trajectory_layer) return std::nullopt;
      return trajectory_polydata(*in.trajectory);
  }
  return std::nullopt;
}

/// Copy of `t` keeping only the listed channels, in order.
inline Tensor3 select_channels(const Tensor3& t, const std::vector<std::size_t>& keep) {
  const auto [m, n, f] = t.shape();
  Tensor3 out({m, n, keep.size()});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < keep.size(); ++k) out(i, j, k) = t(i, j, keep.at(k));
  return out;
}

/// Filters of a layer with `filters` filters that survive `plan`, ascending.
inline std::vector<std::size_t> plan_survivors(const PrunePlan& plan, std::size_t filters) {
  std::vector<bool> removed(filters, false);
  for (const auto& m : plan.merges)
    for (auto r : m.remove) removed.at(r) = true;
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < filters; ++k)
    if (!removed[k]) out.push_back(k);
  return out;
}

/// Summary sent in the hello reply.
inline ojson network_summary(const Network& net) {
  ojson j;
  j["spec"] = spec_to_json(net.spec());
  auto& convs = j["conv_layers"] = ojson::array();
  for (std::size_t k = 0; k < net.conv_layers().size(); ++k) {
    const auto& p = net.conv(k).kernel;
    convs.push_back({{"layer", k}, {"filters", p.extent(3)}, {"channels", p.extent(2)}, {"window", p.extent(0)}});
  }
  j["step"] = net.step();
  return j;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct PruneEvent {
  std::int64_t step = 0;
  std::size_t layer = 0;
  std::vector<std::size_t> removed;  // original filter ids
  std::size_t filters_after = 0;
  std::string source;  // "auto" or a proposal id
};

struct Evaluation {
  std::int64_t step = 0;
  std::size_t layer = 0;
  std::vector<Group> groups;  // current filter indices
  double max_pcc = 0.0;       // largest off-diagonal coefficient
};

struct RunSummary {
  std::int64_t steps = 0;
  std::int64_t planned_steps = 0;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
  std::optional<std::int64_t> diverged_at;
  std::vector<std::size_t> filters;  // per conv layer at the end
  std::vector<PruneEvent> prunes;
  std::vector<Evaluation> evaluations;
  std::uint64_t frames_sent = 0;
  std::uint64_t groups_dropped = 0;
  std::size_t files_written = 0;
  std::size_t snapshots_written = 0;
  std::size_t train_samples = 0;
  std::size_t test_samples = 0;

  ojson to_json() const {
    ojson j;
    j["steps"] = steps;
    j["planned_steps"] = planned_steps;
    j["final_accuracy"] = final_accuracy;
    j["final_loss"] = final_loss;
    j["diverged_at"] = diverged_at ? ojson(*diverged_at) : ojson(nullptr);
    j["filters"] = filters;
    auto& pr = j["prunes"] = ojson::array();
    for (const auto& p : prunes) {
      pr.push_back({{"step", p.step},
                    {"layer", p.layer},
                    {"removed", p.removed},
                    {"filters_after", p.filters_after},
                    {"source", p.source}});
    }
    auto& ev = j["evaluations"] = ojson::array();
    for (const auto& e : evaluations) {
      ev.push_back({{"step", e.step}, {"layer", e.layer}, {"max_pcc", e.max_pcc}, {"groups", e.groups}});
    }
    j["frames_sent"] = frames_sent;
    j["groups_dropped"] = groups_dropped;
    j["files_written"] = files_written;
    j["snapshots_written"] = snapshots_written;
    j["train_samples"] = train_samples;
    j["test_samples"] = test_samples;
    return j;
  }
};

/// Instrumented training loop. Each call to step() trains one batch and then,
/// at the step boundary: updates batch sums and the trajectory, evaluates
/// similarity on the prune cadence, publishes views to a connected viewer,
/// writes snapshots on the snapshot cadence, and finally applies prunes
/// (automatic plans, or viewer commands in interactive mode).
class Trainer {
 public:
  Trainer(RunConfig config, MnistSplits data, std::optional<Network> initial = std::nullopt)
      : cfg_(std::move(config)), data_(std::move(data)), order_rng_(cfg_.seed ^ 0x5eed5eedULL) {
    cfg_.validate();
    if (data_.train.size() < cfg_.batch_size) throw DomainError("training set smaller than one batch");
    if (data_.test.size() == 0) throw DomainError("empty dataset");
    NetworkSpec spec = cfg_.network;
    spec.input_size = data_.train.image_size();
    spec.input_channels = data_.train.images.extent(3);
    if (auto* out = std::get_if<SoftmaxSpec>(&spec.layers.back())) out->classes = data_.train.classes;
    net_ = initial ? std::move(*initial) : Network::initialize(spec, cfg_.seed);
    if (net_.spec().input_size != spec.input_size || net_.classes() != data_.train.classes) {
      throw ShapeError("initial network does not match the dataset");
    }

    planned_ = static_cast<std::int64_t>(planned_steps(data_.train.size(), cfg_.batch_size, cfg_.epochs));
    if (cfg_.max_steps > 0) planned_ = std::min<std::int64_t>(planned_, static_cast<std::int64_t>(cfg_.max_steps));

    const std::size_t convs = net_.conv_layers().size();
    if (cfg_.layers.empty())
      for (std::size_t k = 0; k < convs; ++k) cfg_.layers.push_back(k);
    groups_.resize(convs);
    for (std::size_t k = 0; k < convs; ++k) {
      std::vector<std::size_t> ids(net_.conv(k).kernel.extent(3));
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
      original_ids_.push_back(std::move(ids));
    }
    const auto& k0 = net_.conv(cfg_.trajectory_layer).kernel;
    traj_shape_ = k0.shape();
    traj_channel_ids_ = cfg_.trajectory_layer > 0 ? original_ids_[cfg_.trajectory_layer - 1]
                                                  : std::vector<std::size_t>(k0.extent(2));
    if (cfg_.trajectory_layer == 0)
      for (std::size_t i = 0; i < traj_channel_ids_.size(); ++i) traj_channel_ids_[i] = i;
    trajectory_ = TrajectoryTrace(cfg_.trajectory_dims);
    for (auto d : cfg_.trajectory_dims)
      if (d >= k0.size()) throw DomainError("trajectory dim " + std::to_string(d) + " exceeds layer weights");
    trajectory_ = append_trajectory(std::move(trajectory_), k0, net_.step());

    if (!cfg_.out.empty()) {
      std::filesystem::create_directories(cfg_.out / "snapshots");
      for (auto f : cfg_.formats) std::filesystem::create_directories(cfg_.out / "views" / format_name(f));
    }
    if (!cfg_.listen.empty()) {
      SessionConfig sc;
      sc.network = network_summary(net_);
      session_ = Session::serve(cfg_.listen, std::move(sc));
    }
    summary_.planned_steps = planned_;
    summary_.train_samples = data_.train.size();
    summary_.test_samples = data_.test.size();
  }

  const RunConfig& config() const { return cfg_; }
  const Network& network() const { return net_; }
  Session* session() { return session_.get(); }
  const TrajectoryTrace& trajectory() const { return trajectory_; }
  const RunSummary& summary() const { return summary_; }
  bool done() const { return net_.step() >= planned_ || summary_.diverged_at.has_value(); }

  /// Trains one batch and runs the step-boundary hooks. Returns false once finished.
  bool step() {
    if (done()) return false;
    const std::size_t per_epoch = data_.train.size() / cfg_.batch_size;
    const auto s0 = static_cast<std::size_t>(net_.step());
    if (s0 % per_epoch == 0) {
      order_.resize(data_.train.size());
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
      order_rng_.shuffle(order_);
    }
    const std::size_t at = (s0 % per_epoch) * cfg_.batch_size;
    const Batch batch = data_.train.gather(std::span(order_).subspan(at, cfg_.batch_size));

    StepRecord rec;
    try {
      rec = train_step(net_, batch, cfg_.lr, cfg_.reduction);
    } catch (const DivergenceError& e) {
      summary_.diverged_at = e.step();
      return false;
    }
    const std::int64_t s = net_.step();
    summary_.final_loss = rec.loss;

    // Batch sums, running sums and trajectory.
    summed_.clear();
    for (std::size_t k = 0; k < rec.activations.size(); ++k) {
      summed_.push_back(batch_sum(rec.activations[k]));
      if (accumulated_.size() <= k) {
        accumulated_.push_back(summed_[k]);
      } else {
        accumulated_[k] = accumulate(accumulated_[k], summed_[k]);
      }
    }
    if (!trajectory_frozen_) {
      if (auto dims = current_trajectory_dims()) {
        const auto& kernel = rec.weights[cfg_.trajectory_layer];
        trajectory_.points.push_back({kernel[(*dims)[0]], kernel[(*dims)[1]], kernel[(*dims)[2]]});
        trajectory_.steps.push_back(s);
      } else {
        trajectory_frozen_ = true;
      }
    }

    // Similarity on the prune cadence; at most one plan per evaluation.
    std::optional<SimilarityReport> shown;
    std::optional<PrunePlan> plan;
    if (s % static_cast<std::int64_t>(cfg_.prune_interval) == 0) {
      for (std::size_t k = 0; k < summed_.size(); ++k) {
        auto report = analyze_similarity(summed_[k], cfg_.pcc_threshold, s, k);
        groups_[k] = report.groups;
        summary_.evaluations.push_back({s, k, report.groups, max_offdiagonal(report.matrix)});
        if (!report.groups.empty() && !plan && cfg_.prune_mode != PruneMode::off) {
          plan = plan_prune(report);
          shown = report;
        }
        if (!shown && k == summed_.size() - 1) shown = report;
      }
    }
    std::optional<std::pair<std::string, PrunePlan>> proposal;
    if (plan && cfg_.prune_mode == PruneMode::interactive && session_) {
      const std::string id = session_->register_proposal(*plan);
      pending_[id] = prune_generation_;
      proposal = {id, *plan};
    }

    // Views: built only for a viewer or for files.
    const bool snapshot_step = !cfg_.out.empty() && cfg_.snapshot_interval > 0 &&
                               (s % static_cast<std::int64_t>(cfg_.snapshot_interval) == 0 || s == planned_);
    const bool live = session_ && session_->connected();
    if (live || snapshot_step) {
      const ViewInputs in{&net_, &summed_, &accumulated_, &groups_, &trajectory_, cfg_.trajectory_layer};
      StepPublication pub;
      pub.step = s;
      for (std::size_t layer : cfg_.layers)
        for (View v : cfg_.views) {
          auto pd = build_view(in, v, layer);
          if (!pd) continue;
          if (snapshot_step) {
            for (auto f : cfg_.formats) {
              const auto path = cfg_.out / "views" / format_name(f) /
                                series_filename(view_name(v), layer, s, format_extension(f));
              write_polydata(*pd, path, f);
              ++summary_.files_written;
            }
          }
          if (live) pub.geometry.push_back({v, layer, std::move(*pd)});
        }
      if (snapshot_step) {
        const Snapshot snap{s,        rec.loss,      net_,      summed_, accumulated_, groups_,
                            original_ids_, cfg_.trajectory_layer, trajectory_};
        write_snapshot(snap, cfg_.out / "snapshots" / snapshot_filename(s));
        ++summary_.snapshots_written;
      }
      if (live) {
        pub.similarity = shown;
        pub.proposal = proposal;
        session_->publish_step(pub);
      }
    }

    // Step boundary: prunes.
    if (plan && cfg_.prune_mode == PruneMode::automatic) apply(*plan, s, "auto");
    if (session_) {
      for (const auto& cmd : session_->poll_commands(s)) {
        const std::size_t layer = cmd.plan.layer_id;
        if (cmd.action == PruneAction::dismiss) {
          pending_.erase(cmd.proposal_id);
          session_->acknowledge(s, cmd.proposal_id, false, net_.conv(layer).kernel.extent(3), "dismissed");
          continue;
        }
        auto it = pending_.find(cmd.proposal_id);
        const bool stale = it == pending_.end() || it->second != prune_generation_;
        if (it != pending_.end()) pending_.erase(it);
        if (stale) {
          session_->acknowledge(s, cmd.proposal_id, false, net_.conv(layer).kernel.extent(3), "stale proposal");
          continue;
        }
        apply(cmd.plan, s, cmd.proposal_id);
        session_->acknowledge(s, cmd.proposal_id, true, net_.conv(layer).kernel.extent(3));
      }
    }
    return !done();
  }

  /// Runs remaining steps, evaluates held-out accuracy, writes summary.json.
  RunSummary finish() {
    while (step()) {
    }
    summary_.steps = net_.step();
    const Dataset test = cfg_.eval_limit > 0 ? data_.test.head(cfg_.eval_limit) : data_.test;
    summary_.final_accuracy = summary_.diverged_at ? 0.0 : evaluate(net_, test.images, test.labels);
    summary_.filters.clear();
    for (std::size_t k = 0; k < net_.conv_layers().size(); ++k) summary_.filters.push_back(net_.conv(k).kernel.extent(3));
    if (session_) {
      session_->flush(std::chrono::milliseconds(5000));
      const auto st = session_->stats();
      summary_.frames_sent = st.frames_sent;
      summary_.groups_dropped = st.groups_dropped;
    }
    if (!cfg_.out.empty()) {
      detail::FileSink sink(cfg_.out / "summary.json");
      sink.write(summary_.to_json().dump(2) + "\n");
      sink.finish();
    }
    return summary_;
  }

 private:
  static double max_offdiagonal(const Tensor2& m) {
    double best = -1.0;
    for (std::size_t i = 0; i < m.extent(0); ++i)
      for (std::size_t j = i + 1; j < m.extent(1); ++j) best = std::max(best, m(i, j));
    return best;
  }

  // Flat indices of the traced weights in the current (possibly pruned)
  // kernel, or nullopt once one of them belongs to a removed filter or channel.
  std::optional<std::array<std::size_t, 3>> current_trajectory_dims() const {
    const auto [w, w2, c0, f0] = traj_shape_;
    const auto& kernel = net_.conv(cfg_.trajectory_layer).kernel;
    const auto& filter_ids = original_ids_[cfg_.trajectory_layer];
    std::array<std::size_t, 3> out{};
    for (std::size_t i = 0; i < 3; ++i) {
      std::size_t d = cfg_.trajectory_dims[i];
      const std::size_t k = d % f0;
      d /= f0;
      const std::size_t r = d % c0;
      d /= c0;
      const std::size_t q = d % w2;
      const std::size_t p = d / w2;
      const auto kf = std::find(filter_ids.begin(), filter_ids.end(), k);
      const auto rc = std::find(traj_channel_ids_.begin(), traj_channel_ids_.end(), r);
      if (kf == filter_ids.end() || rc == traj_channel_ids_.end()) return std::nullopt;
      out[i] = kernel.offset(p, q, static_cast<std::size_t>(rc - traj_channel_ids_.begin()),
                             static_cast<std::size_t>(kf - filter_ids.begin()));
    }
    return out;
  }

  void apply(const PrunePlan& plan, std::int64_t s, const std::string& source) {
    const std::size_t layer = plan.layer_id;
    const std::size_t before = net_.conv(layer).kernel.extent(3);
    const auto keep = plan_survivors(plan, before);
    net_ = apply_prune(net_, plan);
    PruneEvent ev{s, layer, {}, keep.size(), source};
    for (const auto& m : plan.merges)
      for (auto r : m.remove) ev.removed.push_back(original_ids_[layer][r]);
    std::sort(ev.removed.begin(), ev.removed.end());
    summary_.prunes.push_back(std::move(ev));

    std::vector<std::size_t> ids;
    for (auto k : keep) ids.push_back(original_ids_[layer][k]);
    original_ids_[layer] = std::move(ids);
    if (layer + 1 == cfg_.trajectory_layer) traj_channel_ids_ = original_ids_[layer];
    if (layer < accumulated_.size()) accumulated_[layer] = select_channels(accumulated_[layer], keep);
    if (layer < summed_.size()) summed_[layer] = select_channels(summed_[layer], keep);
    groups_[layer].clear();
    ++prune_generation_;
    if (session_) session_->set_network_summary(network_summary(net_));
  }

  RunConfig cfg_;
  MnistSplits data_;
  Network net_;
  Rng order_rng_;
  std::vector<std::size_t> order_;
  std::int64_t planned_ = 0;

  std::vector<Tensor3> summed_;
  std::vector<Tensor3> accumulated_;
  std::vector<std::vector<Group>> groups_;
  std::vector<std::vector<std::size_t>> original_ids_;
  TrajectoryTrace trajectory_;
  Tensor4::Shape traj_shape_{};
  std::vector<std::size_t> traj_channel_ids_;
  bool trajectory_frozen_ = false;

  std::unique_ptr<Session> session_;
  std::map<std::string, std::uint64_t> pending_;  // proposal id -> prune generation at creation
  std::uint64_t prune_generation_ = 0;
  RunSummary summary_;
};

inline RunSummary run(const RunConfig& config) {
  MnistSplits data = load_dataset(config.dataset);
  Trainer t(config, std::move(data));
  return t.finish();
}

// ---------------------------------------------------------------------------
// Offline paths
// ---------------------------------------------------------------------------

/// Re-derives `view` from every snapshot in `dir` and writes one file per
/// snapshot and layer into `out_dir`. `layers` empty means every conv layer.
/// Output is byte-identical to the files written during the run.
inline std::vector<std::filesystem::path> convert(const std::filesystem::path& dir, View view, FileFormat format,
                                                  const std::filesystem::path& out_dir,
                                                  const std::vector<std::size_t>& layers = {}) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& path : list_snapshots(dir)) {
    const Snapshot s = read_snapshot(path);
    const std::size_t convs = s.net.conv_layers().size();
    std::vector<std::size_t> todo = layers;
    if (todo.empty())
      for (std::size_t k = 0; k < convs; ++k) todo.push_back(k);
    for (auto layer : todo) {
      if (layer >= convs) throw DomainError("snapshot has no conv layer " + std::to_string(layer));
      auto pd = build_view(ViewInputs::of(s), view, layer);
      if (!pd) continue;
      auto out = out_dir / series_filename(view_name(view), layer, s.step, format_extension(format));
      write_polydata(*pd, out, format);
      written.push_back(std::move(out));
    }
  }
  return written;
}

struct ReplayOptions {
  std::string bind = "127.0.0.1:0";
  double rate = 10.0;  // steps per second
  std::vector<View> views = {View::weight_grid, View::image_grid, View::distribution_grid, View::trajectory};
  std::chrono::milliseconds viewer_wait{10000};
  bool propose = true;  // offer recorded similarity groups as prune proposals
  std::function<void(std::uint16_t)> on_listening;  // called once the port is bound
};

struct ReplayResult {
  bool viewer = false;  // false: nobody connected within viewer_wait
  std::size_t steps = 0;
  std::uint64_t frames_sent = 0;
  std::size_t prunes_applied = 0;
};

/// Streams recorded snapshots over the frame protocol at `rate` steps per
/// second. Recorded groups become proposals; an applied proposal is folded
/// into every later step's geometry.
inline ReplayResult replay(const std::filesystem::path& dir, const ReplayOptions& opt) {
  if (!(opt.rate > 0.0)) throw DomainError("replay rate must be positive");
  const auto files = list_snapshots(dir);
  SessionConfig sc;
  sc.network = network_summary(read_snapshot(files.front()).net);
  auto session = Session::serve(opt.bind, std::move(sc));
  if (opt.on_listening) opt.on_listening(session->port());

  ReplayResult result;
  if (!session->wait_for_viewer(opt.viewer_wait)) return result;
  result.viewer = true;

  std::vector<PrunePlan> accepted;
  std::map<std::string, std::size_t> generation;  // proposal id -> accepted.size() at creation
  std::vector<std::vector<Group>> last_groups;
  const auto pause = std::chrono::duration<double>(1.0 / opt.rate);

  for (const auto& path : files) {
    Snapshot s = read_snapshot(path);
    for (const auto& plan : accepted) {
      const std::size_t layer = plan.layer_id;
      if (layer >= s.summed.size()) break;
      const std::size_t f = s.net.conv(layer).kernel.extent(3);
      try {
        check_plan(plan, f);
      } catch (const Error&) {
        break;
      }
      const auto keep = plan_survivors(plan, f);
      s.net = apply_prune(s.net, plan);
      s.summed[layer] = select_channels(s.summed[layer], keep);
      if (layer < s.accumulated.size()) s.accumulated[layer] = select_channels(s.accumulated[layer], keep);
      if (layer < s.groups.size()) s.groups[layer].clear();
    }

    StepPublication pub;
    pub.step = s.step;
    const auto in = ViewInputs::of(s);
    for (std::size_t layer = 0; layer < s.summed.size(); ++layer)
      for (View v : opt.views)
        if (auto pd = build_view(in, v, layer)) pub.geometry.push_back({v, layer, std::move(*pd)});
    if (opt.propose) {
      for (std::size_t layer = 0; layer < s.groups.size() && !pub.proposal; ++layer) {
        const auto& g = s.groups[layer];
        const bool seen = layer < last_groups.size() && last_groups[layer] == g;
        if (g.empty() || seen) continue;
        PrunePlan plan{layer, {}, s.step};
        for (const auto& grp : g) {
          Merge m{grp.keep, {}};
          for (auto member : grp.members)
            if (member != grp.keep) m.remove.push_back(member);
          plan.merges.push_back(std::move(m));
        }
        const std::string id = session->register_proposal(plan);
        generation[id] = accepted.size();
        pub.proposal = {id, plan};
      }
      last_groups = s.groups;
    }
    session->publish_step(pub);
    ++result.steps;
    std::this_thread::sleep_for(pause);

    for (const auto& cmd : session->poll_commands(s.step)) {
      const std::size_t layer = cmd.plan.layer_id;
      const std::size_t f = s.net.conv(layer).kernel.extent(3);
      if (cmd.action == PruneAction::dismiss) {
        session->acknowledge(s.step, cmd.proposal_id, false, f, "dismissed");
      } else if (generation[cmd.proposal_id] != accepted.size()) {
        session->acknowledge(s.step, cmd.proposal_id, false, f, "stale proposal");
      } else {
        accepted.push_back(cmd.plan);
        ++result.prunes_applied;
        session->acknowledge(s.step, cmd.proposal_id, true, f - cmd.plan.removed_count());
      }
    }
    if (!session->connected()) break;
  }
  session->flush(std::chrono::milliseconds(5000));
  result.frames_sent = session->stats().frames_sent;
  return result;
}

}  // namespace cnnscope
