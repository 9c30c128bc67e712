#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "gradflow/arch.hpp"
#include "gradflow/checkpoint.hpp"
#include "gradflow/gradcheck.hpp"
#include "gradflow/mnist.hpp"
#include "gradflow/network.hpp"
#include "gradflow/optim.hpp"

// Operator-facing surface: train | eval | gradcheck | inspect.

namespace gradflow::cli {

// The bundled synthetic corpus stands in for MNIST when --synthetic is given
// (or no data directory is available). Sizes and seeds are fixed so every
// run sees the identical dataset.
inline constexpr std::size_t kSyntheticTrainCount = 6000;
inline constexpr std::size_t kSyntheticTestCount = 1000;
inline constexpr std::uint64_t kSyntheticTrainSeed = 1001;
inline constexpr std::uint64_t kSyntheticTestSeed = 2002;

struct RunConfig {
  std::string data_dir;
  std::string config_path;
  bool synthetic = false;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;
  std::string out_path;
  std::string checkpoint_path;
  std::string metrics_path = "metrics.csv";
  std::string layer_filter;
  double tolerance = kGradCheckTolerance;
};

namespace detail {

inline Network build_from_config(const RunConfig& cfg) {
  if (cfg.config_path.empty()) return build_reference_net();
  std::ifstream in(cfg.config_path);
  if (!in) throw IoError("cannot open architecture config " + cfg.config_path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_architecture(buffer.str());
}

inline std::string resolve_data_dir(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return cfg.data_dir;
  const char* env = std::getenv("GRADFLOW_DATA_DIR");
  if (env != nullptr && env[0] != '\0') return env;
  return "";
}

inline Dataset load_train_data(const RunConfig& cfg) {
  if (cfg.synthetic) return synthetic_dataset(kSyntheticTrainCount, kSyntheticTrainSeed, "train");
  const std::string dir = resolve_data_dir(cfg);
  if (dir.empty()) {
    throw UsageError("no dataset: pass --data-dir, set GRADFLOW_DATA_DIR, or use --synthetic");
  }
  return load_mnist_split(dir, "train");
}

inline Dataset load_test_data(const RunConfig& cfg) {
  if (cfg.synthetic) return synthetic_dataset(kSyntheticTestCount, kSyntheticTestSeed, "test");
  const std::string dir = resolve_data_dir(cfg);
  if (dir.empty()) {
    throw UsageError("no dataset: pass --data-dir, set GRADFLOW_DATA_DIR, or use --synthetic");
  }
  return load_mnist_split(dir, "t10k");
}

inline std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// train: epochs of minibatch SGD, one metrics CSV row per batch, checkpoint
// rewritten after every epoch.
inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
  Network net = detail::build_from_config(cfg);
  TrainState state;
  state.seed = cfg.seed;
  if (!cfg.checkpoint_path.empty()) {
    state = load_checkpoint(cfg.checkpoint_path, net);  // resume
  } else {
    init_params(net, cfg.seed);
  }
  const Dataset train = detail::load_train_data(cfg);

  TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  tc.batch_size = cfg.batch_size;
  tc.epochs = cfg.epochs;
  tc.seed = cfg.seed;
  tc.shuffle = true;

  const std::string ckpt_path = cfg.out_path.empty() ? "gradflow.ckpt" : cfg.out_path;
  std::ofstream metrics(cfg.metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics file " + cfg.metrics_path);
  metrics << "epoch,batch,loss,accuracy\n";

  const std::size_t first_epoch = state.epoch;
  for (std::size_t e = first_epoch; e < first_epoch + cfg.epochs; ++e) {
    double epoch_loss = 0.0;
    std::size_t batches_seen = 0;
    double last_acc = 0.0;
    train_epoch(net, train, tc, e, [&](const MetricsRecord& rec) {
      metrics << rec.epoch << ',' << rec.batch << ',' << detail::format_g17(rec.mean_loss)
              << ',' << detail::format_g17(rec.running_accuracy) << '\n';
      epoch_loss += rec.mean_loss;
      last_acc = rec.running_accuracy;
      ++batches_seen;
    });
    state.epoch = e + 1;
    save_checkpoint(ckpt_path, net, state);
    out << "epoch " << e << ": mean loss "
        << (batches_seen ? epoch_loss / static_cast<double>(batches_seen) : 0.0)
        << ", train accuracy " << last_acc << ", checkpoint " << ckpt_path << "\n";
  }
  metrics.close();
  if (!metrics) throw IoError("short write to metrics file " + cfg.metrics_path);
  return 0;
}

// eval: restore a checkpoint and score the held-out split.
inline int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  if (cfg.checkpoint_path.empty()) throw UsageError("eval needs --checkpoint");
  Network net;
  if (cfg.config_path.empty()) {
    net = load_checkpoint_network(cfg.checkpoint_path);
  } else {
    net = detail::build_from_config(cfg);
    load_checkpoint(cfg.checkpoint_path, net);  // fingerprint-guarded
  }
  const Dataset test = detail::load_test_data(cfg);
  const EvalResult res = evaluate(net, test);
  char line[128];
  std::snprintf(line, sizeof(line), "loss=%.6f accuracy=%.6f n=%zu\n", res.mean_loss,
                res.accuracy, res.count);
  out << line;
  return 0;
}

// gradcheck: per-layer and whole-net oracles; table to stdout, optional CSV
// report file, exit 0 only if everything passes.
inline int cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
  const std::vector<GradCheckReport> reports =
      run_standard_checks(cfg.seed == 0 ? 7 : cfg.seed, cfg.tolerance, kGradCheckH,
                          cfg.layer_filter);
  if (reports.empty()) {
    out << "no gradient-check targets match '" << cfg.layer_filter << "'\n";
    return 2;
  }

  char row[160];
  std::snprintf(row, sizeof(row), "%-16s %12s %12s %8s %9s %7s %-s\n", "target", "max_rel",
                "max_abs", "checked", "excluded", "best_h", "status");
  out << row;
  bool all_pass = true;
  for (const GradCheckReport& r : reports) {
    std::snprintf(row, sizeof(row), "%-16s %12.3e %12.3e %8zu %9zu %7.0e %s\n",
                  r.target.c_str(), r.max_rel_err, r.max_abs_err, r.checked, r.excluded,
                  r.best_h, r.pass ? "pass" : "FAIL");
    out << row;
    if (!r.pass) {
      out << "    worst coordinate: " << r.worst_coordinate << "\n";
      all_pass = false;
    }
  }
  out << (all_pass ? "all gradient checks passed" : "gradient checks FAILED") << " (tolerance "
      << cfg.tolerance << ")\n";

  if (!cfg.out_path.empty()) {
    std::ofstream report(cfg.out_path, std::ios::trunc);
    if (!report) throw IoError("cannot write report file " + cfg.out_path);
    report << "target,max_rel_err,max_abs_err,checked,excluded,worst_coordinate,tolerance,"
              "h,best_h,pass\n";
    for (const GradCheckReport& r : reports) {
      report << r.target << ',' << detail::format_g17(r.max_rel_err) << ','
             << detail::format_g17(r.max_abs_err) << ',' << r.checked << ',' << r.excluded
             << ',' << r.worst_coordinate << ',' << detail::format_g17(r.tolerance) << ','
             << detail::format_g17(r.h) << ',' << detail::format_g17(r.best_h) << ','
             << (r.pass ? "1" : "0") << '\n';
    }
  }
  return all_pass ? 0 : 1;
}

// inspect: per-layer output shapes and parameter counts plus the totals line.
inline int cmd_inspect(const RunConfig& cfg, std::ostream& out) {
  Network net = detail::build_from_config(cfg);
  char row[160];
  std::snprintf(row, sizeof(row), "%-6s %-10s %-16s %s\n", "layer", "kind", "output",
                "parameters");
  out << row;
  std::snprintf(row, sizeof(row), "%-6s %-10s %-16s %s\n", "input", "",
                net.shapes[0].str().c_str(), "");
  out << row;

  std::size_t total = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerNode& node = net.layers[i];
    std::string params = "-";
    std::size_t w_count = 0;
    std::size_t b_count = 0;
    if (node.kind == LayerKind::kConv) {
      const auto& c = std::get<ConvLayer>(node.impl);
      w_count = c.w.size();
      b_count = c.b.size();
    } else if (node.kind == LayerKind::kBatchNorm) {
      const auto& bn = std::get<BatchNormLayer>(node.impl);
      w_count = bn.state.w.size();
      b_count = bn.state.b.size();
    } else if (node.kind == LayerKind::kFc) {
      const auto& fc = std::get<FcLayer>(node.impl);
      w_count = fc.w.size();
      b_count = fc.b.size();
    }
    if (w_count + b_count > 0) {
      params = std::to_string(w_count) + "+" + std::to_string(b_count);
      total += w_count + b_count;
    }
    std::snprintf(row, sizeof(row), "%-6zu %-10s %-16s %s\n", i, layer_kind_name(node.kind),
                  net.shapes[i + 1].str().c_str(), params.c_str());
    out << row;
  }
  for (const ShortcutEdge& e : net.shortcuts) {
    out << "shortcut: activation " << e.src << " -> " << e.dst << "\n";
  }
  out << "total trainable parameters: " << total << "\n";
  return 0;
}

inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"from-scratch CNN training on MNIST-style data"};
  app.require_subcommand(1);
  RunConfig cfg;

  auto add_common = [&cfg](CLI::App* cmd) {
    cmd->add_option("--data-dir", cfg.data_dir, "directory with MNIST idx files");
    cmd->add_option("--config", cfg.config_path, "architecture config file");
    cmd->add_flag("--synthetic", cfg.synthetic, "use the bundled synthetic dataset");
    cmd->add_option("--seed", cfg.seed, "run seed");
  };

  CLI::App* train = app.add_subcommand("train", "train a network");
  add_common(train);
  train->add_option("--epochs", cfg.epochs, "number of epochs");
  train->add_option("--batch-size", cfg.batch_size, "minibatch size");
  train->add_option("--lr", cfg.learning_rate, "learning rate");
  train->add_option("--out", cfg.out_path, "checkpoint output path");
  train->add_option("--checkpoint", cfg.checkpoint_path, "checkpoint to resume from");
  train->add_option("--metrics", cfg.metrics_path, "metrics CSV path");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", cfg.checkpoint_path, "checkpoint to evaluate");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient oracle");
  gradcheck->add_option("--layer", cfg.layer_filter, "restrict to matching targets");
  gradcheck->add_option("--tolerance", cfg.tolerance, "relative-error tolerance");
  gradcheck->add_option("--seed", cfg.seed, "probe seed");
  gradcheck->add_option("--out", cfg.out_path, "machine-readable report path");

  CLI::App* inspect = app.add_subcommand("inspect", "print shapes and parameter ledger");
  add_common(inspect);

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train(cfg, out);
    if (eval->parsed()) return cmd_eval(cfg, out);
    if (gradcheck->parsed()) return cmd_gradcheck(cfg, out);
    if (inspect->parsed()) return cmd_inspect(cfg, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << "error: no command\n";
  return 2;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args), std::cout, std::cerr);
}

}  // namespace gradflow::cli
