#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reliscope/cluster.hpp"
#include "reliscope/core.hpp"
#include "reliscope/ingest.hpp"
#include "reliscope/model.hpp"
#include "reliscope/reliability.hpp"
#include "reliscope/saliency.hpp"

namespace reliscope {

// Resolved run configuration. One JSON document with per-stage sections;
// command-line flags override config keys, config keys override defaults.
struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out;

  std::filesystem::path manifest;  // defaults to <out>/data/manifest.csv
  int image_side = 256;
  int channels = 3;
  std::optional<SyntheticSpec> synthetic;

  std::optional<std::filesystem::path> checkpoint;  // overrides the trained one
  TrainConfig train;
  AugmentationPolicy augment_policy;

  MethodConfig saliency;
  ClusterOptions cluster;
  int knn_k = 5;

  double threshold = 0.75;
};

PipelineConfig parse_config(const nlohmann::json& j);
PipelineConfig load_config_file(const std::filesystem::path& path);
nlohmann::json to_json(const PipelineConfig& cfg);

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<SaliencyMethod> method;
};

void apply_overrides(PipelineConfig& cfg, const ConfigOverrides& overrides);

// Output directory layout.
std::filesystem::path data_dir(const PipelineConfig& cfg);
std::filesystem::path checkpoint_path(const PipelineConfig& cfg);
std::filesystem::path maps_dir(const PipelineConfig& cfg);
std::filesystem::path cluster_model_path(const PipelineConfig& cfg);
std::filesystem::path assignments_path(const PipelineConfig& cfg, Split split);
std::filesystem::path predictions_path(const PipelineConfig& cfg, Split split);
std::filesystem::path reports_dir(const PipelineConfig& cfg);

// Prediction record round-trip used between stages.
void write_predictions_csv(const std::filesystem::path& path,
                           const std::vector<PredictionRecord>& records);
std::vector<PredictionRecord> read_predictions_csv(const std::filesystem::path& path);

void write_assignments_csv(const std::filesystem::path& path,
                           const std::vector<std::pair<std::string, int>>& assignments);
std::map<std::string, int> read_assignments_csv(const std::filesystem::path& path);

// The five framework steps plus reporting, one function per subcommand.
// Each acquires the output-directory lock, writes its artifacts, and
// appends a line to the (timestamped) run log.
void cmd_synth(const PipelineConfig& cfg);
void cmd_train(const PipelineConfig& cfg);
void cmd_explain(const PipelineConfig& cfg, Split split);
void cmd_cluster(const PipelineConfig& cfg);
void cmd_reliability(const PipelineConfig& cfg);
void cmd_adjust(const PipelineConfig& cfg, Split split);
std::string cmd_report(const PipelineConfig& cfg);  // returns the summary text

}  // namespace reliscope
