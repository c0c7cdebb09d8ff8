#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reliscope/core.hpp"

namespace reliscope {

// Per-cluster error fraction r = (FP + FN) / total over the validation set;
// higher means less reliable.
struct ClusterReliability {
  int cluster_id = 0;
  long long total = 0;
  long long false_count = 0;
  double r = 0.0;
  ConfusionMatrix per_outcome;
};

// One entry per nonempty cluster, ordered by cluster id. Every record must
// carry an outcome and an assignment.
std::vector<ClusterReliability> cluster_reliability(
    const std::map<std::string, int>& assignments,
    const std::vector<PredictionRecord>& records, int q);

// Clusters whose r strictly exceeds the threshold get their predictions
// class-swapped downstream.
struct SwapDecision {
  double threshold = 0.75;
  std::set<int> swap_set;
};

SwapDecision select_swap_clusters(const std::vector<ClusterReliability>& reliabilities,
                                  double threshold);

// Flips the predicted class of every record assigned to a swap cluster and
// recomputes outcomes where truth is known. Applying the same decision
// twice restores the originals.
std::vector<PredictionRecord> adjust(const std::vector<PredictionRecord>& records,
                                     const std::map<std::string, int>& assignments,
                                     const SwapDecision& decision);

// Element-wise mean of the min-max normalized member maps.
struct Prototype {
  int cluster_id = 0;
  long long member_count = 0;
  SaliencyMap map;
};

// Empty clusters are omitted.
std::vector<Prototype> prototypes(const std::vector<SaliencyMap>& maps,
                                  const std::map<std::string, int>& assignments, int q);

// Attaches cluster id, unreliability = r_cluster (reliability is 1 - r).
// Records assigned to a cluster without a reliability entry are an error.
std::vector<PredictionRecord> annotate(const std::vector<PredictionRecord>& records,
                                       const std::map<std::string, int>& assignments,
                                       const std::vector<ClusterReliability>& reliabilities);

struct ReliabilityReport {
  ConfusionMatrix before;
  ConfusionMatrix after;
  double overall_before = 0.0;
  double overall_after = 0.0;
  double average_class_before = 0.0;
  double average_class_after = 0.0;
  std::vector<ClusterReliability> clusters;
  SwapDecision decision;
  std::vector<PredictionRecord> records_after;
};

// Before/after bookkeeping for matched record sets (same ids, same order).
ReliabilityReport report(const std::vector<PredictionRecord>& before,
                         const std::vector<PredictionRecord>& after,
                         const std::vector<ClusterReliability>& reliabilities,
                         const SwapDecision& decision);

// Post-adjustment overall accuracy for each candidate threshold.
std::vector<std::pair<double, double>> threshold_sweep(
    const std::vector<PredictionRecord>& records,
    const std::map<std::string, int>& assignments,
    const std::vector<ClusterReliability>& reliabilities,
    const std::vector<double>& thresholds);

nlohmann::json to_json(const ConfusionMatrix& cm);
nlohmann::json to_json(const ClusterReliability& cr);
nlohmann::json to_json(const ReliabilityReport& rep);

}  // namespace reliscope
