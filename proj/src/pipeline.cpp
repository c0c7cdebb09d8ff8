#include "reliscope/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>

#include "reliscope/image_io.hpp"
#include "reliscope/util.hpp"

namespace reliscope {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Exclusive lock on the output directory; concurrent invocations on the
// same directory are rejected.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& out_dir) : path_(out_dir / ".lock") {
    fs::create_directories(out_dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw InvalidInputError("output directory '" + out_dir.string() +
                              "' is locked by another invocation (remove '" + path_.string() +
                              "' if stale)");
  }
  ~OutputLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

void append_run_log(const PipelineConfig& cfg, const std::string& command) {
  std::ofstream log(cfg.out / "run.log", std::ios::app);
  std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  log << stamp << " " << command << "\n";
}

void archive_config(const PipelineConfig& cfg) {
  fs::create_directories(cfg.out);
  std::ofstream out(cfg.out / "config_resolved.json", std::ios::binary);
  out << to_json(cfg).dump(2) << "\n";
}

std::string csv_field(const std::string& line, std::size_t& pos) {
  std::size_t next = line.find(',', pos);
  std::string field =
      next == std::string::npos ? line.substr(pos) : line.substr(pos, next - pos);
  pos = next == std::string::npos ? line.size() : next + 1;
  if (!field.empty() && field.back() == '\r') field.pop_back();
  return field;
}

double parse_double(const std::string& s) {
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw InvalidInputError("malformed numeric field '" + s + "'");
  }
}

}  // namespace

PipelineConfig parse_config(const json& j) {
  PipelineConfig cfg;
  if (!j.contains("seed"))
    throw InvalidInputError("config: 'seed' is mandatory");
  cfg.seed = j.at("seed").get<std::uint64_t>();
  if (!j.contains("out")) throw InvalidInputError("config: 'out' is mandatory");
  cfg.out = fs::path(j.at("out").get<std::string>());

  const json dataset = j.value("dataset", json::object());
  if (dataset.contains("synthetic")) {
    const json& s = dataset["synthetic"];
    SyntheticSpec spec;
    spec.train_count = s.value("train", spec.train_count);
    spec.val_count = s.value("val", spec.val_count);
    spec.test_count = s.value("test", spec.test_count);
    spec.side = s.value("side", spec.side);
    spec.head_radius_min = s.value("head_radius_min", spec.head_radius_min);
    spec.head_radius_max = s.value("head_radius_max", spec.head_radius_max);
    spec.canopy_density = s.value("canopy_density", spec.canopy_density);
    spec.readiness_threshold = s.value("readiness_threshold", spec.readiness_threshold);
    spec.planted_error_fraction =
        s.value("planted_error_fraction", spec.planted_error_fraction);
    if (s.contains("signature"))
      spec.signature = error_signature_from_string(s["signature"].get<std::string>());
    spec.seed = cfg.seed;
    cfg.synthetic = spec;
  }
  cfg.image_side = dataset.value("image_side", cfg.synthetic ? cfg.synthetic->side : 256);
  cfg.channels = dataset.value("channels", 3);
  cfg.manifest = dataset.contains("manifest")
                     ? fs::path(dataset["manifest"].get<std::string>())
                     : cfg.out / "data" / "manifest.csv";

  const json model = j.value("model", json::object());
  if (model.contains("checkpoint"))
    cfg.checkpoint = fs::path(model["checkpoint"].get<std::string>());
  const json train = model.value("train", json::object());
  cfg.train.epochs = train.value("epochs", cfg.train.epochs);
  cfg.train.batch_size = train.value("batch_size", cfg.train.batch_size);
  cfg.train.initial_learning_rate =
      train.value("learning_rate", cfg.train.initial_learning_rate);
  cfg.train.weight_decay = train.value("weight_decay", cfg.train.weight_decay);
  cfg.train.scheduler_step_size =
      train.value("scheduler_step_size", cfg.train.scheduler_step_size);
  cfg.train.scheduler_gamma = train.value("scheduler_gamma", cfg.train.scheduler_gamma);
  const json augment = model.value("augment", json::object());
  cfg.augment_policy.base_multiplier =
      augment.value("base_multiplier", cfg.augment_policy.base_multiplier);
  cfg.augment_policy.minority_boost =
      augment.value("minority_boost", cfg.augment_policy.minority_boost);
  if (augment.contains("target_class"))
    cfg.augment_policy.target_class =
        class_label_from_string(augment["target_class"].get<std::string>());
  if (augment.contains("operations")) {
    cfg.augment_policy.operations.clear();
    for (const auto& op : augment["operations"])
      cfg.augment_policy.operations.push_back(augment_op_from_string(op.get<std::string>()));
  }

  const json saliency = j.value("saliency", json::object());
  if (saliency.contains("method"))
    cfg.saliency.method = saliency_method_from_string(saliency["method"].get<std::string>());
  const json gradcam = saliency.value("gradcam", json::object());
  cfg.saliency.gradcam.layer_id = gradcam.value("layer", std::string());
  const json osm = saliency.value("osm", json::object());
  cfg.saliency.osm.patch = osm.value("patch", cfg.saliency.osm.patch);
  cfg.saliency.osm.stride = osm.value("stride", cfg.saliency.osm.stride);
  if (osm.contains("fill"))
    cfg.saliency.osm.fill.kind = fill_kind_from_string(osm["fill"].get<std::string>());
  const json lime = saliency.value("lime", json::object());
  cfg.saliency.lime.cell = lime.value("cell", cfg.saliency.lime.cell);
  cfg.saliency.lime.samples = lime.value("samples", cfg.saliency.lime.samples);
  cfg.saliency.lime.mask_probability =
      lime.value("mask_probability", cfg.saliency.lime.mask_probability);
  cfg.saliency.lime.kernel_width = lime.value("kernel_width", cfg.saliency.lime.kernel_width);
  if (lime.contains("fill"))
    cfg.saliency.lime.fill.kind = fill_kind_from_string(lime["fill"].get<std::string>());

  const json cluster = j.value("cluster", json::object());
  cfg.cluster.dim = cluster.value("dim", cfg.cluster.dim);
  if (cluster.contains("variance_target") && !cluster["variance_target"].is_null())
    cfg.cluster.variance_target = cluster["variance_target"].get<double>();
  cfg.cluster.q = cluster.value("q", cfg.cluster.q);
  cfg.cluster.sigma = cluster.value("sigma", cfg.cluster.sigma);
  cfg.knn_k = cluster.value("knn_k", cfg.knn_k);
  cfg.cluster.seed = cfg.seed;

  const json reliability = j.value("reliability", json::object());
  cfg.threshold = reliability.value("threshold", cfg.threshold);
  if (cfg.threshold < 0.0 || cfg.threshold > 1.0)
    throw InvalidInputError("config: reliability threshold must be in [0,1]");
  return cfg;
}

PipelineConfig load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInputError("cannot open config '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InvalidInputError("malformed config '" + path.string() + "': " + e.what());
  }
  return parse_config(j);
}

json to_json(const PipelineConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out.string();
  json dataset;
  dataset["manifest"] = cfg.manifest.string();
  dataset["image_side"] = cfg.image_side;
  dataset["channels"] = cfg.channels;
  if (cfg.synthetic) {
    const SyntheticSpec& s = *cfg.synthetic;
    dataset["synthetic"] = {{"train", s.train_count},
                            {"val", s.val_count},
                            {"test", s.test_count},
                            {"side", s.side},
                            {"head_radius_min", s.head_radius_min},
                            {"head_radius_max", s.head_radius_max},
                            {"canopy_density", s.canopy_density},
                            {"readiness_threshold", s.readiness_threshold},
                            {"planted_error_fraction", s.planted_error_fraction},
                            {"signature", to_string(s.signature)}};
  }
  j["dataset"] = dataset;

  json model;
  if (cfg.checkpoint) model["checkpoint"] = cfg.checkpoint->string();
  model["train"] = {{"epochs", cfg.train.epochs},
                    {"batch_size", cfg.train.batch_size},
                    {"learning_rate", cfg.train.initial_learning_rate},
                    {"weight_decay", cfg.train.weight_decay},
                    {"scheduler_step_size", cfg.train.scheduler_step_size},
                    {"scheduler_gamma", cfg.train.scheduler_gamma}};
  json ops = json::array();
  for (AugmentOp op : cfg.augment_policy.operations) ops.push_back(to_string(op));
  model["augment"] = {{"base_multiplier", cfg.augment_policy.base_multiplier},
                      {"minority_boost", cfg.augment_policy.minority_boost},
                      {"target_class", to_string(cfg.augment_policy.target_class)},
                      {"operations", ops}};
  j["model"] = model;

  json saliency;
  saliency["method"] = to_string(cfg.saliency.method);
  saliency["gradcam"] = {{"layer", cfg.saliency.gradcam.layer_id}};
  saliency["osm"] = {{"patch", cfg.saliency.osm.patch},
                     {"stride", cfg.saliency.osm.stride},
                     {"fill", to_string(cfg.saliency.osm.fill.kind)}};
  saliency["lime"] = {{"cell", cfg.saliency.lime.cell},
                      {"samples", cfg.saliency.lime.samples},
                      {"mask_probability", cfg.saliency.lime.mask_probability},
                      {"kernel_width", cfg.saliency.lime.kernel_width},
                      {"fill", to_string(cfg.saliency.lime.fill.kind)}};
  j["saliency"] = saliency;

  json cluster;
  cluster["dim"] = cfg.cluster.dim;
  if (cfg.cluster.variance_target)
    cluster["variance_target"] = *cfg.cluster.variance_target;
  else
    cluster["variance_target"] = nullptr;
  cluster["q"] = cfg.cluster.q;
  cluster["sigma"] = cfg.cluster.sigma;
  cluster["knn_k"] = cfg.knn_k;
  j["cluster"] = cluster;

  j["reliability"] = {{"threshold", cfg.threshold}};
  return j;
}

void apply_overrides(PipelineConfig& cfg, const ConfigOverrides& overrides) {
  if (overrides.seed) {
    cfg.seed = *overrides.seed;
    cfg.cluster.seed = *overrides.seed;
    if (cfg.synthetic) cfg.synthetic->seed = *overrides.seed;
  }
  if (overrides.out) {
    // Keep the default manifest path in step with the output directory.
    if (cfg.manifest == cfg.out / "data" / "manifest.csv")
      cfg.manifest = *overrides.out / "data" / "manifest.csv";
    cfg.out = *overrides.out;
  }
  if (overrides.method) cfg.saliency.method = *overrides.method;
}

fs::path data_dir(const PipelineConfig& cfg) { return cfg.out / "data"; }
fs::path checkpoint_path(const PipelineConfig& cfg) {
  return cfg.checkpoint ? *cfg.checkpoint : cfg.out / "checkpoints" / "model.ckpt";
}
fs::path maps_dir(const PipelineConfig& cfg) {
  return cfg.out / "maps" / to_string(cfg.saliency.method);
}
fs::path cluster_model_path(const PipelineConfig& cfg) {
  return cfg.out / "cluster" / "model.cmodel";
}
fs::path assignments_path(const PipelineConfig& cfg, Split split) {
  return cfg.out / "cluster" / (std::string("assignments_") + to_string(split) + ".csv");
}
fs::path predictions_path(const PipelineConfig& cfg, Split split) {
  return cfg.out / "reports" / (std::string("predictions_") + to_string(split) + ".csv");
}
fs::path reports_dir(const PipelineConfig& cfg) { return cfg.out / "reports"; }

void write_predictions_csv(const fs::path& path,
                           const std::vector<PredictionRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot write '" + path.string() + "'");
  out << "image_id,predicted,score_not_ready,score_ready,truth,outcome\n";
  for (const auto& r : records) {
    out << r.image_id << ',' << to_string(r.predicted) << ',' << format_double(r.scores.p[0])
        << ',' << format_double(r.scores.p[1]) << ',';
    out << (r.truth ? to_string(*r.truth) : "") << ',';
    out << (r.outcome ? to_string(*r.outcome) : "") << '\n';
  }
}

std::vector<PredictionRecord> read_predictions_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInputError("cannot open predictions '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) ||
      line.rfind("image_id,predicted,score_not_ready,score_ready,truth,outcome", 0) != 0)
    throw InvalidInputError("'" + path.string() + "' is not a predictions CSV");
  std::vector<PredictionRecord> records;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::size_t pos = 0;
    PredictionRecord r;
    r.image_id = csv_field(line, pos);
    r.predicted = class_label_from_string(csv_field(line, pos));
    r.scores.p = {parse_double(csv_field(line, pos)), parse_double(csv_field(line, pos))};
    std::string truth = csv_field(line, pos);
    std::string outcome = csv_field(line, pos);
    if (!truth.empty()) r.truth = class_label_from_string(truth);
    if (!outcome.empty()) r.outcome = confusion_outcome_from_string(outcome);
    records.push_back(std::move(r));
  }
  return records;
}

void write_assignments_csv(const fs::path& path,
                           const std::vector<std::pair<std::string, int>>& assignments) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot write '" + path.string() + "'");
  out << "image_id,cluster_id\n";
  for (const auto& [id, cluster] : assignments) out << id << ',' << cluster << '\n';
}

std::map<std::string, int> read_assignments_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInputError("cannot open assignments '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("image_id,cluster_id", 0) != 0)
    throw InvalidInputError("'" + path.string() + "' is not an assignments CSV");
  std::map<std::string, int> out;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::size_t pos = 0;
    std::string id = csv_field(line, pos);
    out[id] = static_cast<int>(parse_double(csv_field(line, pos)));
  }
  return out;
}

namespace {

Dataset load_pipeline_dataset(const PipelineConfig& cfg) {
  DatasetManifest manifest = read_manifest(cfg.manifest);
  LoadOptions options;
  options.side = cfg.image_side;
  options.channels = cfg.channels;
  return load_dataset(manifest, options, cfg.manifest.parent_path());
}

// Manifest-ordered image ids of one split (the canonical artifact order).
std::vector<std::string> split_ids(const PipelineConfig& cfg, Split split) {
  DatasetManifest manifest = read_manifest(cfg.manifest);
  std::vector<std::string> ids;
  for (const auto& e : manifest.entries)
    if (!e.harvested && e.split == split)
      ids.push_back(fs::path(e.image_path).stem().string());
  return ids;
}

std::vector<SaliencyMap> read_split_maps(const PipelineConfig& cfg, Split split) {
  std::vector<std::string> ids = split_ids(cfg, split);
  std::vector<SaliencyMap> maps;
  maps.reserve(ids.size());
  for (const auto& id : ids) {
    fs::path p = maps_dir(cfg) / (id + "." + to_string(cfg.saliency.method) + ".smap");
    if (!fs::exists(p))
      throw InvalidInputError("missing saliency map '" + p.string() +
                              "' (run `explain` for this split first)");
    maps.push_back(read_saliency_map(p));
  }
  return maps;
}

std::vector<ClusterReliability> reliabilities_from_json(const json& numbers) {
  std::vector<ClusterReliability> rels;
  for (const auto& c : numbers) {
    ClusterReliability cr;
    cr.cluster_id = c.at("cluster_id").get<int>();
    cr.total = c.at("total").get<long long>();
    cr.false_count = c.at("false_count").get<long long>();
    cr.r = c.at("unreliability").get<double>();
    cr.per_outcome.tp = c.at("outcomes").at("tp").get<long long>();
    cr.per_outcome.tn = c.at("outcomes").at("tn").get<long long>();
    cr.per_outcome.fp = c.at("outcomes").at("fp").get<long long>();
    cr.per_outcome.fn = c.at("outcomes").at("fn").get<long long>();
    rels.push_back(cr);
  }
  return rels;
}

void write_annotation_csv(const fs::path& path, const std::vector<PredictionRecord>& before,
                          const std::vector<PredictionRecord>& after) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot write '" + path.string() + "'");
  out << "image_id,predicted,truth,outcome,cluster_id,unreliability,reliability,"
         "adjusted_predicted,adjusted_outcome\n";
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& b = before[i];
    const auto& a = after[i];
    out << b.image_id << ',' << to_string(b.predicted) << ','
        << (b.truth ? to_string(*b.truth) : "") << ','
        << (b.outcome ? to_string(*b.outcome) : "") << ','
        << (b.cluster_id ? std::to_string(*b.cluster_id) : "") << ','
        << (b.unreliability ? format_double(*b.unreliability) : "") << ','
        << (b.unreliability ? format_double(1.0 - *b.unreliability) : "") << ','
        << to_string(a.predicted) << ',' << (a.outcome ? to_string(*a.outcome) : "") << '\n';
  }
}

}  // namespace

void cmd_synth(const PipelineConfig& cfg) {
  if (!cfg.synthetic)
    throw InvalidInputError("synth: config has no dataset.synthetic section");
  OutputLock lock(cfg.out);
  archive_config(cfg);

  SyntheticDataset ds = synth_generate(*cfg.synthetic);
  fs::path dir = data_dir(cfg);
  for (Split s : {Split::Train, Split::Val, Split::Test})
    fs::create_directories(dir / to_string(s));

  DatasetManifest manifest;
  std::ofstream meta(dir / "synthetic_meta.csv", std::ios::binary);
  meta << "image_id,split,label,true_radius,planted_error\n";
  for (const auto& si : ds.images) {
    fs::path rel = fs::path(to_string(si.split)) / (si.sample.id + ".png");
    write_png(dir / rel, si.sample.image);
    ManifestEntry e;
    e.image_path = rel.string();
    e.label = si.sample.label;
    e.split = si.split;
    e.harvested = false;
    manifest.entries.push_back(std::move(e));
    meta << si.sample.id << ',' << to_string(si.split) << ',' << to_string(si.sample.label)
         << ',' << format_double(si.true_radius) << ','
         << (si.planted_error ? "true" : "false") << '\n';
  }
  write_manifest(cfg.manifest, manifest);
  append_run_log(cfg, "synth");
}

void cmd_train(const PipelineConfig& cfg) {
  OutputLock lock(cfg.out);
  archive_config(cfg);

  Dataset ds = load_pipeline_dataset(cfg);
  std::vector<AugmentedImage> augmented = augment(ds.train, cfg.augment_policy, cfg.seed);
  std::vector<LabeledImage> train_set;
  train_set.reserve(augmented.size());
  for (auto& a : augmented) train_set.push_back(std::move(a.sample));

  Cnn model = cfg.checkpoint ? load_checkpoint(*cfg.checkpoint)
                             : make_mini_cnn(derive_seed(cfg.seed, "model/init"));
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "train");
  TrainResult result = train(model, train_set, ds.val, tc);

  fs::create_directories(cfg.out / "checkpoints");
  save_checkpoint(result.model, cfg.out / "checkpoints" / "model.ckpt", cfg.seed,
                  result.best_epoch);
  save_checkpoint(result.final_model, cfg.out / "checkpoints" / "model_final.ckpt", cfg.seed,
                  cfg.train.epochs - 1);

  json metrics;
  metrics["best_epoch"] = result.best_epoch;
  metrics["best_val_accuracy"] = result.best_val_accuracy;
  metrics["train_size"] = train_set.size();
  metrics["val_size"] = ds.val.size();
  metrics["epochs"] = json::array();
  for (const auto& em : result.history)
    metrics["epochs"].push_back({{"epoch", em.epoch},
                                 {"learning_rate", em.learning_rate},
                                 {"train_loss", em.train_loss},
                                 {"train_accuracy", em.train_accuracy},
                                 {"val_loss", em.val_loss},
                                 {"val_accuracy", em.val_accuracy}});
  fs::create_directories(reports_dir(cfg));
  std::ofstream mout(reports_dir(cfg) / "train_metrics.json", std::ios::binary);
  mout << metrics.dump(2) << "\n";
  append_run_log(cfg, "train");
}

void cmd_explain(const PipelineConfig& cfg, Split split) {
  OutputLock lock(cfg.out);
  archive_config(cfg);

  Dataset ds = load_pipeline_dataset(cfg);
  const std::vector<LabeledImage>& images = ds.split(split);
  Cnn model = load_checkpoint(checkpoint_path(cfg));
  CnnClassifier classifier(model);

  MethodConfig mc = cfg.saliency;
  // Dataset-mean fills resolve against the split being explained.
  std::array<float, 3> mean = dataset_mean(images);
  if (mc.osm.fill.kind == FillKind::DatasetMean) mc.osm.fill.mean = mean;
  if (mc.lime.fill.kind == FillKind::DatasetMean) mc.lime.fill.mean = mean;

  std::vector<ExplainResult> results = batch_explain(classifier, images, mc, cfg.seed);
  std::string digest = hex64(config_digest(mc, cfg.seed));

  fs::create_directories(maps_dir(cfg));
  std::vector<PredictionRecord> records;
  records.reserve(results.size());
  for (const auto& r : results) {
    write_saliency_map(maps_dir(cfg), r.map, r.record.scores.of(r.map.explained_class), digest);
    records.push_back(r.record);
  }
  fs::create_directories(reports_dir(cfg));
  write_predictions_csv(predictions_path(cfg, split), records);
  append_run_log(cfg, std::string("explain ") + to_string(split));
}

void cmd_cluster(const PipelineConfig& cfg) {
  OutputLock lock(cfg.out);
  archive_config(cfg);

  std::vector<SaliencyMap> maps = read_split_maps(cfg, Split::Val);
  ClusterModel model = fit_cluster_model(maps, cfg.cluster);

  fs::create_directories(cfg.out / "cluster");
  save_cluster_model(model, cluster_model_path(cfg));
  std::vector<std::pair<std::string, int>> rows;
  rows.reserve(maps.size());
  for (const auto& m : maps) rows.emplace_back(m.image_id, model.assignments.at(m.image_id));
  write_assignments_csv(assignments_path(cfg, Split::Val), rows);
  append_run_log(cfg, "cluster");
}

void cmd_reliability(const PipelineConfig& cfg) {
  OutputLock lock(cfg.out);
  archive_config(cfg);

  std::map<std::string, int> assignments = read_assignments_csv(assignments_path(cfg, Split::Val));
  std::vector<PredictionRecord> records = read_predictions_csv(predictions_path(cfg, Split::Val));

  std::vector<ClusterReliability> rels =
      cluster_reliability(assignments, records, cfg.cluster.q);
  SwapDecision decision = select_swap_clusters(rels, cfg.threshold);
  std::vector<PredictionRecord> annotated = annotate(records, assignments, rels);
  std::vector<PredictionRecord> adjusted = adjust(annotated, assignments, decision);
  ReliabilityReport rep = report(annotated, adjusted, rels, decision);

  std::vector<double> ts;
  for (double t = 0.50; t < 0.951; t += 0.05) ts.push_back(t);
  auto sweep = threshold_sweep(records, assignments, rels, ts);

  json out = to_json(rep);
  out["threshold_sweep"] = json::array();
  for (const auto& [t, acc] : sweep)
    out["threshold_sweep"].push_back({{"threshold", t}, {"overall_accuracy", acc}});

  fs::create_directories(reports_dir(cfg));
  std::ofstream jout(reports_dir(cfg) / "reliability_val.json", std::ios::binary);
  jout << out.dump(2) << "\n";

  std::ofstream stats(reports_dir(cfg) / "cluster_stats.csv", std::ios::binary);
  stats << "cluster_id,total,tp,tn,fp,fn,false_count,unreliability,reliability,swapped\n";
  for (const auto& cr : rels)
    stats << cr.cluster_id << ',' << cr.total << ',' << cr.per_outcome.tp << ','
          << cr.per_outcome.tn << ',' << cr.per_outcome.fp << ',' << cr.per_outcome.fn << ','
          << cr.false_count << ',' << format_double(cr.r) << ',' << format_double(1.0 - cr.r)
          << ',' << (decision.swap_set.count(cr.cluster_id) ? "true" : "false") << '\n';

  write_annotation_csv(reports_dir(cfg) / "annotations_val.csv", annotated, adjusted);

  // Cluster prototypes, as raw maps plus 8-bit previews.
  std::vector<SaliencyMap> maps = read_split_maps(cfg, Split::Val);
  std::vector<Prototype> protos = prototypes(maps, assignments, cfg.cluster.q);
  fs::path proto_dir = cfg.out / "cluster" / "prototypes";
  fs::create_directories(proto_dir);
  for (const auto& p : protos) {
    write_saliency_map(proto_dir, p.map, 0.0, "prototype");
    write_pgm(proto_dir / (p.map.image_id + "." + to_string(p.map.method) + ".pgm"), p.map);
  }
  append_run_log(cfg, "reliability");
}

void cmd_adjust(const PipelineConfig& cfg, Split split) {
  OutputLock lock(cfg.out);
  archive_config(cfg);

  ClusterModel model = load_cluster_model(cluster_model_path(cfg));
  fs::path rel_path = reports_dir(cfg) / "reliability_val.json";
  std::ifstream rin(rel_path);
  if (!rin)
    throw InvalidInputError("cannot open '" + rel_path.string() +
                            "' (run `reliability` first)");
  json rel_json;
  rin >> rel_json;
  std::vector<ClusterReliability> rels = reliabilities_from_json(rel_json.at("clusters"));
  SwapDecision decision;
  decision.threshold = rel_json.at("swap").at("threshold").get<double>();
  for (int c : rel_json.at("swap").at("clusters").get<std::vector<int>>())
    decision.swap_set.insert(c);

  // Transfer cluster ids to the unseen split with kNN in embedding space.
  std::vector<SaliencyMap> maps = read_split_maps(cfg, split);
  std::map<std::string, int> assignments;
  std::vector<std::pair<std::string, int>> rows;
  rows.reserve(maps.size());
  for (const auto& m : maps) {
    Embedding e = project(model.basis, m);
    int cluster = assign_knn(model, e, cfg.knn_k);
    assignments[m.image_id] = cluster;
    rows.emplace_back(m.image_id, cluster);
  }
  write_assignments_csv(assignments_path(cfg, split), rows);

  std::vector<PredictionRecord> records = read_predictions_csv(predictions_path(cfg, split));
  std::vector<PredictionRecord> annotated = annotate(records, assignments, rels);
  std::vector<PredictionRecord> adjusted = adjust(annotated, assignments, decision);
  ReliabilityReport rep = report(annotated, adjusted, rels, decision);

  fs::create_directories(reports_dir(cfg));
  std::ofstream jout(reports_dir(cfg) / (std::string("adjust_") + to_string(split) + ".json"),
                     std::ios::binary);
  jout << to_json(rep).dump(2) << "\n";
  write_annotation_csv(
      reports_dir(cfg) / (std::string("predictions_") + to_string(split) + "_adjusted.csv"),
      annotated, adjusted);
  append_run_log(cfg, std::string("adjust ") + to_string(split));
}

std::string cmd_report(const PipelineConfig& cfg) {
  OutputLock lock(cfg.out);
  std::ostringstream out;
  out << "run summary for " << cfg.out.string() << "\n";

  auto load_json = [](const fs::path& p) -> std::optional<json> {
    std::ifstream in(p);
    if (!in) return std::nullopt;
    json j;
    in >> j;
    return j;
  };

  if (auto train = load_json(reports_dir(cfg) / "train_metrics.json")) {
    out << "  training: best epoch " << (*train)["best_epoch"] << ", val accuracy "
        << format_double((*train)["best_val_accuracy"].get<double>()) << "\n";
  }
  if (auto rel = load_json(reports_dir(cfg) / "reliability_val.json")) {
    out << "  validation: overall "
        << format_double((*rel)["before"]["overall_accuracy"].get<double>()) << " -> "
        << format_double((*rel)["after"]["overall_accuracy"].get<double>())
        << ", swap clusters [";
    bool first = true;
    for (const auto& c : (*rel)["swap"]["clusters"]) {
      if (!first) out << ", ";
      out << c;
      first = false;
    }
    out << "]\n";
  }
  for (Split split : {Split::Test, Split::Val, Split::Train}) {
    auto adj = load_json(reports_dir(cfg) /
                         (std::string("adjust_") + to_string(split) + ".json"));
    if (!adj) continue;
    out << "  " << to_string(split) << " adjustment: overall "
        << format_double((*adj)["before"]["overall_accuracy"].get<double>()) << " -> "
        << format_double((*adj)["after"]["overall_accuracy"].get<double>())
        << ", average class "
        << format_double((*adj)["before"]["average_class_accuracy"].get<double>()) << " -> "
        << format_double((*adj)["after"]["average_class_accuracy"].get<double>()) << "\n";
  }
  std::string text = out.str();
  fs::create_directories(reports_dir(cfg));
  std::ofstream sout(reports_dir(cfg) / "summary.txt", std::ios::binary);
  sout << text;
  append_run_log(cfg, "report");
  return text;
}

}  // namespace reliscope
