#pragma once

#include <optional>
#include <string>
#include <vector>

#include "reliscope/errors.hpp"

namespace reliscope {

// Binary harvest-readiness label. Ready is the positive class for all
// confusion bookkeeping.
enum class ClassLabel : int { NotReady = 0, Ready = 1 };

constexpr int kNumClasses = 2;

inline ClassLabel flipped(ClassLabel c) {
  return c == ClassLabel::Ready ? ClassLabel::NotReady : ClassLabel::Ready;
}

const char* to_string(ClassLabel c);
ClassLabel class_label_from_string(const std::string& s);  // "ready" | "not_ready"

// Softmax output of a classifier: one probability per class, summing to 1.
struct ClassScores {
  std::vector<double> p;

  ClassLabel argmax() const;
  double of(ClassLabel c) const { return p.at(static_cast<std::size_t>(c)); }
};

void validate(const ClassScores& scores);

// H x W x C image with unit-interval intensities, stored planar:
// data[c * h * w + y * w + x].
struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  static ImageTensor zeros(int h, int w, int c);

  float at(int c, int y, int x) const {
    return data[static_cast<std::size_t>((c * height + y) * width + x)];
  }
  float& at(int c, int y, int x) {
    return data[static_cast<std::size_t>((c * height + y) * width + x)];
  }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  bool same_shape(const ImageTensor& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

void validate(const ImageTensor& image);

struct LabeledImage {
  ImageTensor image;
  ClassLabel label = ClassLabel::NotReady;
  std::string id;
};

enum class SaliencyMethod { GradCAM, OSM, LIME };

const char* to_string(SaliencyMethod m);
SaliencyMethod saliency_method_from_string(const std::string& s);

// Per-pixel relevance field for one (image, method, class) triple. Grad-CAM
// values are nonnegative; OSM and LIME values are signed.
struct SaliencyMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major
  SaliencyMethod method = SaliencyMethod::GradCAM;
  std::string image_id;
  ClassLabel explained_class = ClassLabel::NotReady;

  static SaliencyMap zeros(int h, int w);

  float at(int y, int x) const {
    return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
  float& at(int y, int x) {
    return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
};

enum class ConfusionOutcome { TP, TN, FP, FN };

const char* to_string(ConfusionOutcome o);
ConfusionOutcome confusion_outcome_from_string(const std::string& s);

struct ConfusionMatrix {
  long long tp = 0;
  long long tn = 0;
  long long fp = 0;
  long long fn = 0;

  long long total() const { return tp + tn + fp + fn; }
};

// One classified image with optional evaluation and clustering annotations.
// outcome is present iff truth is; unreliability is present iff cluster_id is.
struct PredictionRecord {
  std::string image_id;
  ClassLabel predicted = ClassLabel::NotReady;
  ClassScores scores;
  std::optional<ClassLabel> truth;
  std::optional<ConfusionOutcome> outcome;
  std::optional<int> cluster_id;
  std::optional<double> unreliability;
};

// (Ready,Ready) -> TP, (NotReady,NotReady) -> TN,
// (Ready,NotReady) -> FP, (NotReady,Ready) -> FN.
ConfusionOutcome outcome_of(ClassLabel predicted, ClassLabel truth);

// Counts outcomes over records; every record must carry truth.
// Throws EmptyEvaluationSetError on empty input.
ConfusionMatrix confusion_matrix(const std::vector<PredictionRecord>& records);

// (tp + tn) / total.
double overall_accuracy(const ConfusionMatrix& cm);

// Mean of the per-class recalls: 0.5 * (tp/(tp+fn) + tn/(tn+fp)).
// Throws ClassAbsentError when a class never occurs in truth.
double average_class_accuracy(const ConfusionMatrix& cm);

}  // namespace reliscope
