#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "reliscope/core.hpp"
#include "reliscope/ingest.hpp"
#include "reliscope/model.hpp"

namespace reliscope {

struct GradCamConfig {
  std::string layer_id;  // empty selects the classifier's default (last conv)
};

enum class FillKind { DatasetMean, Zero, Gray };

const char* to_string(FillKind k);
FillKind fill_kind_from_string(const std::string& s);

// Replacement content for occluded pixels. For DatasetMean the per-channel
// means must be resolved by the caller before the explainer runs.
struct Fill {
  FillKind kind = FillKind::DatasetMean;
  std::array<float, 3> mean = {0.5f, 0.5f, 0.5f};

  float value(int channel) const;
};

// Per-channel mean intensity over a set of images.
std::array<float, 3> dataset_mean(const std::vector<LabeledImage>& images);

struct OcclusionConfig {
  int patch = 11;
  int stride = 2;
  Fill fill;
};

struct LimeConfig {
  int cell = 32;
  int samples = 1000;
  double mask_probability = 0.5;  // probability a segment is replaced
  double kernel_width = 0.25;     // exp(-(d/width)^2) on cosine distance
  Fill fill;
  std::uint64_t seed = 0;
  bool exhaustive = false;        // enumerate all 2^n masks instead of sampling
  bool uniform_weights = false;   // skip the distance kernel
};

// Channel-mean pooled gradients weight the target layer's activations;
// the rectified combination is bilinearly upsampled to image size.
// Values are always >= 0.
SaliencyMap grad_cam(const Classifier& classifier, const ImageTensor& image, ClassLabel cls,
                     const GradCamConfig& cfg);

// Number of window positions along one dimension: floor((extent - p) / s) + 1.
int occlusion_positions(int extent, int patch, int stride);

// Score drop (original - occluded, post-softmax, for cls) per window
// position, row-major over the window grid.
std::vector<double> occlusion_window_deltas(const Classifier& classifier,
                                            const ImageTensor& image, ClassLabel cls,
                                            const OcclusionConfig& cfg);

// Window deltas averaged onto each covered pixel. Positive values mark
// evidence for cls (occlusion lowered its score). Pixels no window reaches
// are zero.
SaliencyMap occlusion_map(const Classifier& classifier, const ImageTensor& image, ClassLabel cls,
                          const OcclusionConfig& cfg);

// Row-major rectangular segment ids; edge cells may be smaller.
std::vector<int> segment_grid(int height, int width, int cell);
int segment_count(int height, int width, int cell);

struct LimeFit {
  std::vector<int> segments;         // per-pixel segment id
  std::vector<double> coefficients;  // one per segment
  double intercept = 0.0;
};

// Weighted least squares of the classifier score for cls against binary
// keep/replace segment masks. Throws SurrogateDegenerateError when the
// sampled design is rank deficient.
LimeFit lime_fit(const Classifier& classifier, const ImageTensor& image, ClassLabel cls,
                 const LimeConfig& cfg);

// Each pixel carries its segment's surrogate coefficient.
SaliencyMap lime_map(const Classifier& classifier, const ImageTensor& image, ClassLabel cls,
                     const LimeConfig& cfg);

struct MethodConfig {
  SaliencyMethod method = SaliencyMethod::GradCAM;
  GradCamConfig gradcam;
  OcclusionConfig osm;
  LimeConfig lime;
};

// Stable digest of the effective explainer settings, recorded in sidecars.
std::uint64_t config_digest(const MethodConfig& cfg, std::uint64_t effective_seed);

struct ExplainResult {
  SaliencyMap map;
  PredictionRecord record;
};

// One map per image, explaining each image's own predicted class. LIME
// seeds derive from (seed, image id), so results do not depend on order or
// scheduling. with_truth controls whether labels enter the records as
// ground truth. Per-image failures are rethrown with the image id attached.
std::vector<ExplainResult> batch_explain(const Classifier& classifier,
                                         const std::vector<LabeledImage>& images,
                                         const MethodConfig& cfg, std::uint64_t seed,
                                         bool with_truth = true);

// Raw little-endian f32 row-major map plus a JSON sidecar
// (<id>.<method>.smap / <id>.<method>.json).
struct SmapMeta {
  std::string image_id;
  SaliencyMethod method = SaliencyMethod::GradCAM;
  ClassLabel explained_class = ClassLabel::NotReady;
  int height = 0;
  int width = 0;
  double score_of_explained_class = 0.0;
  std::string config_digest;
};

void write_saliency_map(const std::filesystem::path& dir, const SaliencyMap& map,
                        double score_of_explained_class, const std::string& digest);
SaliencyMap read_saliency_map(const std::filesystem::path& smap_path);
SmapMeta read_smap_meta(const std::filesystem::path& smap_path);

}  // namespace reliscope
