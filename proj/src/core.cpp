#include "reliscope/core.hpp"

#include <cmath>

namespace reliscope {

const char* to_string(ClassLabel c) {
  return c == ClassLabel::Ready ? "ready" : "not_ready";
}

ClassLabel class_label_from_string(const std::string& s) {
  if (s == "ready") return ClassLabel::Ready;
  if (s == "not_ready") return ClassLabel::NotReady;
  throw InvalidInputError("unknown class label: '" + s + "'");
}

ClassLabel ClassScores::argmax() const {
  if (p.size() != kNumClasses) throw InvalidInputError("class scores must have 2 entries");
  return p[1] > p[0] ? ClassLabel::Ready : ClassLabel::NotReady;
}

void validate(const ClassScores& scores) {
  if (scores.p.size() != kNumClasses) throw InvalidInputError("class scores must have 2 entries");
  double sum = 0.0;
  for (double v : scores.p) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInputError("class score outside [0,1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw InvalidInputError("class scores do not sum to 1");
}

ImageTensor ImageTensor::zeros(int h, int w, int c) {
  ImageTensor t;
  t.height = h;
  t.width = w;
  t.channels = c;
  t.data.assign(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
                    static_cast<std::size_t>(c),
                0.0f);
  return t;
}

void validate(const ImageTensor& image) {
  if (image.height <= 0 || image.width <= 0)
    throw InvalidInputError("image dimensions must be positive");
  if (image.channels != 1 && image.channels != 3)
    throw InvalidInputError("image must have 1 or 3 channels");
  std::size_t expect = static_cast<std::size_t>(image.height) *
                       static_cast<std::size_t>(image.width) *
                       static_cast<std::size_t>(image.channels);
  if (image.data.size() != expect)
    throw InvalidInputError("image data length does not match dimensions");
  for (float v : image.data) {
    if (!(v >= 0.0f && v <= 1.0f))
      throw InvalidInputError("image intensity outside [0,1]");
  }
}

const char* to_string(SaliencyMethod m) {
  switch (m) {
    case SaliencyMethod::GradCAM: return "gradcam";
    case SaliencyMethod::OSM: return "osm";
    case SaliencyMethod::LIME: return "lime";
  }
  return "gradcam";
}

SaliencyMethod saliency_method_from_string(const std::string& s) {
  if (s == "gradcam") return SaliencyMethod::GradCAM;
  if (s == "osm") return SaliencyMethod::OSM;
  if (s == "lime") return SaliencyMethod::LIME;
  throw InvalidInputError("unknown saliency method: '" + s + "'");
}

SaliencyMap SaliencyMap::zeros(int h, int w) {
  SaliencyMap m;
  m.height = h;
  m.width = w;
  m.values.assign(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0.0f);
  return m;
}

const char* to_string(ConfusionOutcome o) {
  switch (o) {
    case ConfusionOutcome::TP: return "TP";
    case ConfusionOutcome::TN: return "TN";
    case ConfusionOutcome::FP: return "FP";
    case ConfusionOutcome::FN: return "FN";
  }
  return "TP";
}

ConfusionOutcome confusion_outcome_from_string(const std::string& s) {
  if (s == "TP") return ConfusionOutcome::TP;
  if (s == "TN") return ConfusionOutcome::TN;
  if (s == "FP") return ConfusionOutcome::FP;
  if (s == "FN") return ConfusionOutcome::FN;
  throw InvalidInputError("unknown confusion outcome: '" + s + "'");
}

ConfusionOutcome outcome_of(ClassLabel predicted, ClassLabel truth) {
  if (predicted == ClassLabel::Ready)
    return truth == ClassLabel::Ready ? ConfusionOutcome::TP : ConfusionOutcome::FP;
  return truth == ClassLabel::Ready ? ConfusionOutcome::FN : ConfusionOutcome::TN;
}

ConfusionMatrix confusion_matrix(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw EmptyEvaluationSetError();
  ConfusionMatrix cm;
  for (const auto& r : records) {
    if (!r.truth)
      throw InvalidInputError("record '" + r.image_id + "' has no ground truth");
    switch (outcome_of(r.predicted, *r.truth)) {
      case ConfusionOutcome::TP: ++cm.tp; break;
      case ConfusionOutcome::TN: ++cm.tn; break;
      case ConfusionOutcome::FP: ++cm.fp; break;
      case ConfusionOutcome::FN: ++cm.fn; break;
    }
  }
  return cm;
}

double overall_accuracy(const ConfusionMatrix& cm) {
  if (cm.total() < 1) throw EmptyEvaluationSetError();
  return static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
}

double average_class_accuracy(const ConfusionMatrix& cm) {
  if (cm.tp + cm.fn < 1) throw ClassAbsentError("ready");
  if (cm.tn + cm.fp < 1) throw ClassAbsentError("not_ready");
  double recall_ready = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
  double recall_not_ready = static_cast<double>(cm.tn) / static_cast<double>(cm.tn + cm.fp);
  return 0.5 * (recall_ready + recall_not_ready);
}

}  // namespace reliscope
