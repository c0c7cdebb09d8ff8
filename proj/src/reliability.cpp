#include "reliscope/reliability.hpp"

#include <algorithm>
#include <cmath>

#include "reliscope/cluster.hpp"

namespace reliscope {

using json = nlohmann::json;

namespace {

int assignment_of(const std::map<std::string, int>& assignments, const PredictionRecord& r) {
  auto it = assignments.find(r.image_id);
  if (it == assignments.end())
    throw InvalidInputError("record '" + r.image_id + "' has no cluster assignment");
  return it->second;
}

}  // namespace

std::vector<ClusterReliability> cluster_reliability(
    const std::map<std::string, int>& assignments,
    const std::vector<PredictionRecord>& records, int q) {
  if (q < 1) throw InvalidInputError("cluster_reliability: q must be >= 1");
  std::map<int, ClusterReliability> by_cluster;
  for (const auto& r : records) {
    int cluster = assignment_of(assignments, r);
    if (cluster < 1 || cluster > q)
      throw InvalidInputError("record '" + r.image_id + "' has cluster " +
                              std::to_string(cluster) + " outside 1.." + std::to_string(q));
    if (!r.outcome)
      throw InvalidInputError("record '" + r.image_id + "' has no confusion outcome");
    ClusterReliability& cr = by_cluster[cluster];
    cr.cluster_id = cluster;
    ++cr.total;
    switch (*r.outcome) {
      case ConfusionOutcome::TP: ++cr.per_outcome.tp; break;
      case ConfusionOutcome::TN: ++cr.per_outcome.tn; break;
      case ConfusionOutcome::FP: ++cr.per_outcome.fp; ++cr.false_count; break;
      case ConfusionOutcome::FN: ++cr.per_outcome.fn; ++cr.false_count; break;
    }
  }
  std::vector<ClusterReliability> out;
  out.reserve(by_cluster.size());
  for (auto& [cluster, cr] : by_cluster) {
    cr.r = static_cast<double>(cr.false_count) / static_cast<double>(cr.total);
    out.push_back(cr);
  }
  return out;
}

SwapDecision select_swap_clusters(const std::vector<ClusterReliability>& reliabilities,
                                  double threshold) {
  if (threshold < 0.0 || threshold > 1.0)
    throw InvalidInputError("select_swap_clusters: threshold must be in [0,1]");
  SwapDecision decision;
  decision.threshold = threshold;
  for (const auto& cr : reliabilities)
    if (cr.r > threshold) decision.swap_set.insert(cr.cluster_id);  // strictly exceeds
  return decision;
}

std::vector<PredictionRecord> adjust(const std::vector<PredictionRecord>& records,
                                     const std::map<std::string, int>& assignments,
                                     const SwapDecision& decision) {
  std::vector<PredictionRecord> out = records;
  for (auto& r : out) {
    auto it = assignments.find(r.image_id);
    if (it == assignments.end()) continue;  // unassigned records stay untouched
    if (!decision.swap_set.count(it->second)) continue;
    r.predicted = flipped(r.predicted);
    std::swap(r.scores.p[0], r.scores.p[1]);
    if (r.truth) r.outcome = outcome_of(r.predicted, *r.truth);
  }
  return out;
}

std::vector<Prototype> prototypes(const std::vector<SaliencyMap>& maps,
                                  const std::map<std::string, int>& assignments, int q) {
  if (q < 1) throw InvalidInputError("prototypes: q must be >= 1");
  std::map<int, Prototype> by_cluster;
  for (const auto& m : maps) {
    auto it = assignments.find(m.image_id);
    if (it == assignments.end())
      throw InvalidInputError("map '" + m.image_id + "' has no cluster assignment");
    int cluster = it->second;
    std::vector<double> v = normalized_vector(m);
    Prototype& p = by_cluster[cluster];
    if (p.member_count == 0) {
      p.cluster_id = cluster;
      p.map = SaliencyMap::zeros(m.height, m.width);
      p.map.method = m.method;
      p.map.image_id = "prototype" + std::to_string(cluster);
    } else if (p.map.height != m.height || p.map.width != m.width) {
      throw InvalidInputError("prototypes: maps in cluster " + std::to_string(cluster) +
                              " have mixed dimensions");
    }
    for (std::size_t i = 0; i < v.size(); ++i)
      p.map.values[i] += static_cast<float>(v[i]);
    ++p.member_count;
  }
  std::vector<Prototype> out;
  for (auto& [cluster, p] : by_cluster) {
    float inv = 1.0f / static_cast<float>(p.member_count);
    for (float& v : p.map.values) v *= inv;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PredictionRecord> annotate(const std::vector<PredictionRecord>& records,
                                       const std::map<std::string, int>& assignments,
                                       const std::vector<ClusterReliability>& reliabilities) {
  std::map<int, double> r_of;
  for (const auto& cr : reliabilities) r_of[cr.cluster_id] = cr.r;
  std::vector<PredictionRecord> out = records;
  for (auto& rec : out) {
    int cluster = assignment_of(assignments, rec);
    auto it = r_of.find(cluster);
    if (it == r_of.end())
      throw InvalidInputError("record '" + rec.image_id + "' is assigned to cluster " +
                              std::to_string(cluster) + " which has no reliability score");
    rec.cluster_id = cluster;
    rec.unreliability = it->second;
  }
  return out;
}

ReliabilityReport report(const std::vector<PredictionRecord>& before,
                         const std::vector<PredictionRecord>& after,
                         const std::vector<ClusterReliability>& reliabilities,
                         const SwapDecision& decision) {
  if (before.size() != after.size())
    throw InvalidInputError("report: record sets differ in size");
  for (std::size_t i = 0; i < before.size(); ++i)
    if (before[i].image_id != after[i].image_id)
      throw InvalidInputError("report: record sets disagree at index " + std::to_string(i) +
                              " ('" + before[i].image_id + "' vs '" + after[i].image_id + "')");
  ReliabilityReport rep;
  rep.before = confusion_matrix(before);
  rep.after = confusion_matrix(after);
  rep.overall_before = overall_accuracy(rep.before);
  rep.overall_after = overall_accuracy(rep.after);
  rep.average_class_before = average_class_accuracy(rep.before);
  rep.average_class_after = average_class_accuracy(rep.after);
  rep.clusters = reliabilities;
  rep.decision = decision;
  rep.records_after = after;
  return rep;
}

std::vector<std::pair<double, double>> threshold_sweep(
    const std::vector<PredictionRecord>& records,
    const std::map<std::string, int>& assignments,
    const std::vector<ClusterReliability>& reliabilities,
    const std::vector<double>& thresholds) {
  std::vector<std::pair<double, double>> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    SwapDecision d = select_swap_clusters(reliabilities, t);
    std::vector<PredictionRecord> adjusted = adjust(records, assignments, d);
    out.emplace_back(t, overall_accuracy(confusion_matrix(adjusted)));
  }
  return out;
}

json to_json(const ConfusionMatrix& cm) {
  return json{{"tp", cm.tp}, {"tn", cm.tn}, {"fp", cm.fp}, {"fn", cm.fn}};
}

json to_json(const ClusterReliability& cr) {
  json j;
  j["cluster_id"] = cr.cluster_id;
  j["total"] = cr.total;
  j["false_count"] = cr.false_count;
  j["unreliability"] = cr.r;
  j["reliability"] = 1.0 - cr.r;
  j["outcomes"] = to_json(cr.per_outcome);
  return j;
}

json to_json(const ReliabilityReport& rep) {
  json j;
  j["before"] = {{"confusion", to_json(rep.before)},
                 {"overall_accuracy", rep.overall_before},
                 {"average_class_accuracy", rep.average_class_before}};
  j["after"] = {{"confusion", to_json(rep.after)},
                {"overall_accuracy", rep.overall_after},
                {"average_class_accuracy", rep.average_class_after}};
  j["delta_percentage_points"] = {
      {"overall_accuracy", 100.0 * (rep.overall_after - rep.overall_before)},
      {"average_class_accuracy",
       100.0 * (rep.average_class_after - rep.average_class_before)}};
  j["clusters"] = json::array();
  for (const auto& cr : rep.clusters) j["clusters"].push_back(to_json(cr));
  j["swap"] = {{"threshold", rep.decision.threshold},
               {"clusters", std::vector<int>(rep.decision.swap_set.begin(),
                                             rep.decision.swap_set.end())}};
  return j;
}

}  // namespace reliscope
