// reliscope: post-hoc reliability scoring for binary image classifiers.
// Subcommands cover the pipeline end to end: synth, train, explain,
// cluster, reliability, adjust, report.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "reliscope/pipeline.hpp"

namespace {

struct GlobalArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> method;
  std::string split = "test";
};

reliscope::PipelineConfig resolve(const GlobalArgs& args) {
  reliscope::PipelineConfig cfg = reliscope::load_config_file(args.config_path);
  reliscope::ConfigOverrides overrides;
  overrides.seed = args.seed;
  if (args.out) overrides.out = *args.out;
  if (args.method) overrides.method = reliscope::saliency_method_from_string(*args.method);
  reliscope::apply_overrides(cfg, overrides);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Saliency-map clustering and reliability scoring for image classifiers"};
  app.require_subcommand(1);

  GlobalArgs args;
  app.add_option("--config", args.config_path, "Pipeline configuration JSON")
      ->required()
      ->check(CLI::ExistingFile);
  app.add_option("--seed", args.seed, "Override the global seed");
  app.add_option("--out", args.out, "Override the output directory");
  app.add_option("--method", args.method, "Saliency method")
      ->check(CLI::IsMember({"gradcam", "osm", "lime"}));
  app.add_option("--split", args.split, "Dataset split")
      ->check(CLI::IsMember({"train", "val", "test"}));

  auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset and manifest");
  auto* train = app.add_subcommand("train", "Train the classifier");
  auto* explain = app.add_subcommand("explain", "Classify a split and write saliency maps");
  auto* cluster = app.add_subcommand("cluster", "Cluster validation saliency maps");
  auto* reliability =
      app.add_subcommand("reliability", "Score clusters and pick the swap set");
  auto* adjust = app.add_subcommand("adjust", "Transfer clusters and adjust a split");
  auto* report = app.add_subcommand("report", "Summarize the artifacts of a run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    reliscope::PipelineConfig cfg = resolve(args);
    reliscope::Split split = reliscope::split_from_string(args.split);
    if (synth->parsed()) {
      reliscope::cmd_synth(cfg);
    } else if (train->parsed()) {
      reliscope::cmd_train(cfg);
    } else if (explain->parsed()) {
      reliscope::cmd_explain(cfg, split);
    } else if (cluster->parsed()) {
      reliscope::cmd_cluster(cfg);
    } else if (reliability->parsed()) {
      reliscope::cmd_reliability(cfg);
    } else if (adjust->parsed()) {
      reliscope::cmd_adjust(cfg, split);
    } else if (report->parsed()) {
      std::cout << reliscope::cmd_report(cfg);
    }
  } catch (const reliscope::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
