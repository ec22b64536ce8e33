// cnnscope: instrumented CNN training with live views and filter pruning.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cnnscope/run.hpp"

namespace {

using namespace cnnscope;

constexpr int kExitError = 1;
constexpr int kExitNoViewer = 3;

std::vector<View> parse_views(const std::vector<std::string>& names) {
  std::vector<View> out;
  for (const auto& n : names) out.push_back(parse_view(n));
  return out;
}

int cmd_run(RunConfig cfg, const std::string& prune_mode, const std::string& reduction,
            const std::vector<std::string>& views, const std::vector<std::string>& formats, std::size_t dense_units,
            double wait_viewer) {
  cfg.prune_mode = parse_prune_mode(prune_mode);
  if (reduction == "sum") {
    cfg.reduction = Reduction::sum;
  } else if (reduction == "mean") {
    cfg.reduction = Reduction::mean;
  } else {
    throw DomainError("unknown reduction '" + reduction + "' (sum|mean)");
  }
  cfg.views = parse_views(views);
  cfg.formats.clear();
  for (const auto& f : formats) cfg.formats.push_back(parse_format(f));
  for (auto& l : cfg.network.layers)
    if (auto* d = std::get_if<DenseSpec>(&l)) d->units = dense_units;

  MnistSplits data = load_dataset(cfg.dataset);
  Trainer trainer(cfg, std::move(data));
  if (auto* s = trainer.session()) {
    std::cout << "listening on port " << s->port() << std::endl;
    if (wait_viewer > 0) s->wait_for_viewer(std::chrono::milliseconds(static_cast<long>(wait_viewer * 1000)));
  }
  const RunSummary summary = trainer.finish();
  std::cout << summary.to_json().dump(2) << std::endl;
  if (summary.diverged_at) {
    std::cerr << "numerical divergence at step " << *summary.diverged_at << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instrumented CNN training with in-situ views and filter pruning"};
  app.require_subcommand(1);

  // run
  RunConfig cfg;
  std::string prune_mode = "off";
  std::string reduction = "sum";
  std::vector<std::string> views = {"weight_grid", "image_grid", "distribution_grid", "trajectory"};
  std::vector<std::string> formats = {"vtp"};
  std::size_t dense_units = 512;
  double wait_viewer = 0.0;
  std::string out_dir;
  app.set_config("--config", "", "TOML config file; keys of `run` go in a [run] section, flags override them");
  auto* run = app.add_subcommand("run", "train with instrumentation");
  run->fallthrough();
  run->add_option("--dataset", cfg.dataset, "mnist:<dir> or synthetic:<n>[:<size>]")->capture_default_str();
  run->add_option("--lr", cfg.lr, "SGD learning rate")->capture_default_str();
  run->add_option("--batch-size", cfg.batch_size)->capture_default_str();
  run->add_option("--epochs", cfg.epochs)->capture_default_str();
  run->add_option("--seed", cfg.seed)->capture_default_str();
  run->add_option("--max-steps", cfg.max_steps, "stop early (0: all epochs)")->capture_default_str();
  run->add_option("--reduction", reduction, "batch loss reduction: sum|mean")->capture_default_str();
  run->add_option("--dense-units", dense_units)->capture_default_str();
  run->add_option("--layers", cfg.layers, "instrumented conv layers (default all)")->delimiter(',');
  run->add_option("--views", views, "views to build")->delimiter(',')->capture_default_str();
  run->add_option("--traj-layer", cfg.trajectory_layer)->capture_default_str();
  run->add_option("--traj-dims", cfg.trajectory_dims, "three flat kernel indices")->delimiter(',');
  run->add_option("--pcc-threshold", cfg.pcc_threshold)->capture_default_str();
  run->add_option("--prune-mode", prune_mode, "off|auto|interactive")->capture_default_str();
  run->add_option("--prune-interval", cfg.prune_interval)->capture_default_str();
  run->add_option("--snapshot-interval", cfg.snapshot_interval, "0 disables")->capture_default_str();
  run->add_option("--formats", formats, "view file formats: vtp,vtp-ascii,csv")->delimiter(',');
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--listen", cfg.listen, "stream to a viewer at host:port");
  run->add_option("--wait-viewer", wait_viewer, "seconds to wait for a viewer before training");
  run->add_option("--eval-limit", cfg.eval_limit, "test samples for final accuracy (0: all)");

  // convert
  std::string snap_dir, view_name_arg = "weight_grid", format = "vtp", convert_out = ".";
  std::vector<std::size_t> convert_layers;
  auto* conv = app.add_subcommand("convert", "re-derive view files from snapshots");
  conv->add_option("snapshots", snap_dir, "snapshot directory")->required();
  conv->add_option("--view", view_name_arg)->capture_default_str();
  conv->add_option("--format", format, "vtp|vtp-ascii|csv")->capture_default_str();
  conv->add_option("--out", convert_out)->capture_default_str();
  conv->add_option("--layers", convert_layers)->delimiter(',');

  // replay
  ReplayOptions ropt;
  ropt.bind = "127.0.0.1:7007";
  std::vector<std::string> replay_views = views;
  double wait = 10.0;
  bool no_propose = false;
  auto* rep = app.add_subcommand("replay", "stream recorded snapshots to a viewer");
  rep->add_option("snapshots", snap_dir, "snapshot directory")->required();
  rep->add_option("--listen", ropt.bind)->capture_default_str();
  rep->add_option("--rate", ropt.rate, "steps per second")->capture_default_str();
  rep->add_option("--views", replay_views)->delimiter(',');
  rep->add_option("--wait", wait, "seconds to wait for a viewer")->capture_default_str();
  rep->add_flag("--no-propose", no_propose, "do not offer recorded groups as proposals");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      cfg.out = out_dir;
      return cmd_run(cfg, prune_mode, reduction, views, formats, dense_units, wait_viewer);
    }
    if (*conv) {
      const View v = parse_view(view_name_arg);
      const auto files = convert(snap_dir, v, parse_format(format), convert_out, convert_layers);
      std::cout << files.size() << " files written\n";
      return 0;
    }
    if (*rep) {
      ropt.views = parse_views(replay_views);
      ropt.viewer_wait = std::chrono::milliseconds(static_cast<long>(wait * 1000));
      ropt.propose = !no_propose;
      ropt.on_listening = [](std::uint16_t port) { std::cout << "listening on port " << port << std::endl; };
      const ReplayResult r = replay(snap_dir, ropt);
      if (!r.viewer) {
        std::cerr << "no viewer\n";
        return kExitNoViewer;
      }
      std::cout << r.steps << " steps, " << r.frames_sent << " frames sent\n";
      return 0;
    }
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return 0;
}
