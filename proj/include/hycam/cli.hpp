#pragma once

// Command-line front end: argument parsing, config loading with dotted
// overrides, floating-point width dispatch, and exit-code mapping.
//
// Exit codes: 0 success, 1 configuration/validation/IO error (including bad
// command lines), 2 numerical failure (non-finite loss or a failed gradient
// check).

#include <fstream>
#include <iostream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "hycam/commands.hpp"

namespace hycam {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitNumerical = 2;

namespace detail {

inline RunConfig config_from_cli(const std::string& path, const std::vector<std::string>& sets) {
  nlohmann::json base = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot read " + path);
    try {
      base = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
    }
  }
  return parse_run_config_with_overrides(base, sets);
}

// Runs fn<T> with T picked by train.precision.
template <typename Fn>
int with_precision(const RunConfig& run, Fn&& fn) {
  if (run.train.precision == "f64") return fn(static_cast<double*>(nullptr));
  return fn(static_cast<float*>(nullptr));
}

}  // namespace detail

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"HyCAM: contextual attention modulation adapters on a frozen transformer"};
  app.name("hycam");
  app.require_subcommand(1);

  struct Common {
    std::string config;
    std::vector<std::string> sets;
  };
  auto add_common = [](CLI::App* sub, Common& c) {
    sub->add_option("-c,--config", c.config, "JSON run config file (defaults apply when omitted)");
    sub->add_option("-s,--set", c.sets, "dotted override key=value, e.g. adapter.tau=0.25");
  };

  Common pre_c;
  auto* pre = app.add_subcommand("pretrain", "train the full backbone on the synthetic corpus");
  add_common(pre, pre_c);

  Common ad_c;
  std::string ad_backbone;
  auto* ad = app.add_subcommand("adapt", "train adapters against a frozen backbone checkpoint");
  add_common(ad, ad_c);
  ad->add_option("--backbone", ad_backbone, "backbone checkpoint (default: from paths config)");

  Common ev_c;
  std::string ev_backbone, ev_adapters, ev_split = "test";
  int ev_sample = -1;
  bool ev_bare = false;
  auto* ev = app.add_subcommand("eval", "report perplexity/accuracy and routing statistics");
  add_common(ev, ev_c);
  ev->add_option("--backbone", ev_backbone, "backbone checkpoint (default: from paths config)");
  ev->add_option("--adapters", ev_adapters, "adapter checkpoint (default: from paths config)");
  ev->add_flag("--bare", ev_bare, "evaluate the backbone without adapters");
  ev->add_option("--split", ev_split, "dataset split: train|validation|test");
  ev->add_option("--sample", ev_sample, "also export a modulation heatmap for this sample index");

  Common gc_c;
  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference check of all adapter gradients (64-bit)");
  add_common(gc, gc_c);

  Common ir_c;
  std::string ir_backbone, ir_adapters, ir_split = "test";
  auto* ir = app.add_subcommand("inspect-routing", "per-task specialist usage and entropy");
  add_common(ir, ir_c);
  ir->add_option("--backbone", ir_backbone, "backbone checkpoint (default: from paths config)");
  ir->add_option("--adapters", ir_adapters, "adapter checkpoint (default: from paths config)");
  ir->add_option("--split", ir_split, "dataset split: train|validation|test");

  Common em_c;
  std::string em_backbone, em_adapters, em_split = "test";
  int em_sample = 0;
  auto* em = app.add_subcommand("export-modulation", "per-token modulation heatmap CSV");
  add_common(em, em_c);
  em->add_option("--backbone", em_backbone, "backbone checkpoint (default: from paths config)");
  em->add_option("--adapters", em_adapters, "adapter checkpoint (default: from paths config)");
  em->add_option("--split", em_split, "dataset split: train|validation|test");
  em->add_option("--sample", em_sample, "sample index within the split");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (app.got_subcommand(pre)) {
      RunConfig run = detail::config_from_cli(pre_c.config, pre_c.sets);
      return detail::with_precision(run, [&](auto* tag) {
        using T = std::remove_pointer_t<decltype(tag)>;
        auto res = cmd_pretrain<T>(run);
        out << "pretrain: " << res.steps << " steps, final task loss "
            << format_number(res.final_task_loss) << '\n';
        out << "wrote " << res.checkpoint_path << '\n';
        out << "wrote " << res.csv_path << '\n';
        return kExitOk;
      });
    }
    if (app.got_subcommand(ad)) {
      RunConfig run = detail::config_from_cli(ad_c.config, ad_c.sets);
      const std::string bp = ad_backbone.empty() ? default_backbone_path(run) : ad_backbone;
      return detail::with_precision(run, [&](auto* tag) {
        using T = std::remove_pointer_t<decltype(tag)>;
        auto res = cmd_adapt<T>(run, bp);
        out << "adapt[" << variant_name(run.adapter.variant) << "]: best step " << res.best_step
            << ", best val loss " << format_number(res.best_val)
            << (res.early_stopped ? " (early stop)" : "") << '\n';
        out << "wrote " << res.checkpoint_path << '\n';
        out << "wrote " << res.csv_path << '\n';
        return kExitOk;
      });
    }
    if (app.got_subcommand(ev)) {
      RunConfig run = detail::config_from_cli(ev_c.config, ev_c.sets);
      EvalOptions opt;
      opt.backbone_path = ev_backbone.empty() ? default_backbone_path(run) : ev_backbone;
      if (!ev_bare)
        opt.adapters_path = ev_adapters.empty() ? default_adapters_path(run) : ev_adapters;
      opt.split = ev_split;
      opt.heatmap_sample = ev_sample;
      return detail::with_precision(run, [&](auto* tag) {
        using T = std::remove_pointer_t<decltype(tag)>;
        auto res = cmd_eval<T>(run, opt);
        res.report.write(out);
        out << "wrote " << res.report_path << '\n';
        if (!res.routing_csv_path.empty()) out << "wrote " << res.routing_csv_path << '\n';
        if (!res.heatmap_csv_path.empty()) out << "wrote " << res.heatmap_csv_path << '\n';
        return kExitOk;
      });
    }
    if (app.got_subcommand(gc)) {
      RunConfig run = detail::config_from_cli(gc_c.config, gc_c.sets);
      run.validate();
      auto rep = cmd_gradcheck(run);
      rep.write(out);
      return rep.pass ? kExitOk : kExitNumerical;
    }
    if (app.got_subcommand(ir)) {
      RunConfig run = detail::config_from_cli(ir_c.config, ir_c.sets);
      const std::string bp = ir_backbone.empty() ? default_backbone_path(run) : ir_backbone;
      const std::string ap = ir_adapters.empty() ? default_adapters_path(run) : ir_adapters;
      return detail::with_precision(run, [&](auto* tag) {
        using T = std::remove_pointer_t<decltype(tag)>;
        auto res = cmd_inspect_routing<T>(run, bp, ap, ir_split);
        for (int l = 0; l < res.stats.n_layers; ++l)
          out << "layer" << l
              << " entropy=" << format_number(res.stats.entropy_mean[static_cast<std::size_t>(l)])
              << '\n';
        out << "collapse=" << format_number(res.stats.collapse) << '\n';
        out << "wrote " << res.csv_path << '\n';
        return kExitOk;
      });
    }
    if (app.got_subcommand(em)) {
      RunConfig run = detail::config_from_cli(em_c.config, em_c.sets);
      const std::string bp = em_backbone.empty() ? default_backbone_path(run) : em_backbone;
      const std::string ap = em_adapters.empty() ? default_adapters_path(run) : em_adapters;
      return detail::with_precision(run, [&](auto* tag) {
        using T = std::remove_pointer_t<decltype(tag)>;
        auto path = cmd_export_modulation<T>(run, bp, ap, em_split, em_sample);
        out << "wrote " << path << '\n';
        return kExitOk;
      });
    }
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {  // ConfigError, IoError, ShapeError, ...
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  err << "error: no subcommand selected\n";
  return kExitValidation;
}

}  // namespace hycam
