// Command-line front end: train, compare-grads, bench-backward, solve-demo.
#include <iostream>

#include <CLI11.hpp>

#include "deq/bench.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Deep equilibrium model training with interchangeable backward strategies"};
  app.require_subcommand(1);
  app.set_version_flag("--version", deq::kVersion);

  deq::CliOptions opts;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "JSON config file (defaults apply to missing keys)");
    sub->add_option("--seed", seed, "Overrides train.seed");
    sub->add_option("--out", opts.out_dir, "Output directory")->capture_default_str();
    sub->add_option("--set", opts.overrides, "Dotted-key override, e.g. strategy.variant=gdeq (repeatable)");
  };

  auto* train = app.add_subcommand("train", "Train a DEQ classifier; writes curves, probes, checkpoint, manifest");
  auto* compare = app.add_subcommand("compare-grads", "Train with Implicit and probe all strategies' gradients");
  auto* bench = app.add_subcommand("bench-backward", "Time each strategy's backward pass on a checkpoint");
  auto* demo = app.add_subcommand("solve-demo", "Broyden vs Picard residual traces on one instance");
  for (auto* sub : {train, compare, bench, demo}) add_common(sub);

  CLI11_PARSE(app, argc, argv);

  for (auto* sub : {train, compare, bench, demo}) {
    if (sub->count("--seed") > 0) opts.seed = seed;
  }
  if (*train) return deq::cmd_train(opts, std::cout, std::cerr);
  if (*compare) return deq::cmd_compare_grads(opts, std::cout, std::cerr);
  if (*bench) return deq::cmd_bench_backward(opts, std::cout, std::cerr);
  return deq::cmd_solve_demo(opts, std::cout, std::cerr);
}
