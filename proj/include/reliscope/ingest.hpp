#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "reliscope/core.hpp"

namespace reliscope {

enum class Split { Train, Val, Test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string image_path;  // relative to the manifest's directory or absolute
  ClassLabel label = ClassLabel::NotReady;
  Split split = Split::Train;
  bool harvested = false;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
};

// CSV with header image_path,label,split,harvested; labels ready|not_ready.
DatasetManifest read_manifest(const std::filesystem::path& csv_path);
void write_manifest(const std::filesystem::path& csv_path, const DatasetManifest& manifest);

struct LoadOptions {
  int side = 256;
  int channels = 3;
};

struct Dataset {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> val;
  std::vector<LabeledImage> test;

  std::vector<LabeledImage>& split(Split s);
  const std::vector<LabeledImage>& split(Split s) const;
};

// Loads every non-harvested manifest entry, resized to options.side with
// bilinear resampling and scaled to [0,1]. Relative paths resolve against
// base_dir. A split left empty after the harvested exclusion is an error.
Dataset load_dataset(const DatasetManifest& manifest, const LoadOptions& options,
                     const std::filesystem::path& base_dir);

enum class AugmentOp { HFlip, VFlip, Rot90, Rot180, Rot270 };

const char* to_string(AugmentOp op);
AugmentOp augment_op_from_string(const std::string& s);

ImageTensor apply_augment_op(const ImageTensor& image, AugmentOp op);

// Sampled augmentation with a class-weighted rate: images of target_class
// receive minority_boost times the base expected number of copies.
struct AugmentationPolicy {
  std::vector<AugmentOp> operations = {AugmentOp::HFlip, AugmentOp::VFlip, AugmentOp::Rot90,
                                       AugmentOp::Rot180, AugmentOp::Rot270};
  double minority_boost = 1.5;
  ClassLabel target_class = ClassLabel::NotReady;
  double base_multiplier = 4.0;
};

struct AugmentedImage {
  LabeledImage sample;
  std::string source_id;
  std::string transform;  // "orig" or the op tag
};

// Each source contributes itself plus k sampled copies where
// E[k] = base_multiplier (boosted for target_class). The per-image sample
// stream is derived from (seed, image id), so output does not depend on
// input order beyond the order of the images themselves.
std::vector<AugmentedImage> augment(const std::vector<LabeledImage>& train,
                                    const AugmentationPolicy& policy, std::uint64_t seed);

enum class ErrorSignature { OffsetHead, TexturelessCenter };

const char* to_string(ErrorSignature s);
ErrorSignature error_signature_from_string(const std::string& s);

// Synthetic stand-in for overhead crop imagery: a bright head disk whose
// radius decides readiness, partially occluded by elongated canopy blobs.
// A planted fraction of images carries an error signature that makes the
// visual size cue contradict the label, so a trained classifier misreads
// that subpopulation while its saliency maps stay visually distinctive.
struct SyntheticSpec {
  int train_count = 600;
  int val_count = 200;
  int test_count = 200;
  int side = 64;
  double head_radius_min = 6.0;
  double head_radius_max = 14.0;
  double canopy_density = 0.5;         // expected occluder blobs per head radius
  double readiness_threshold = 10.0;   // Ready iff radius >= threshold
  double planted_error_fraction = 0.0;
  ErrorSignature signature = ErrorSignature::OffsetHead;
  std::uint64_t seed = 0;
};

void validate(const SyntheticSpec& spec);

struct SyntheticImage {
  LabeledImage sample;
  Split split = Split::Train;
  double true_radius = 0.0;  // the label-determining radius
  bool planted_error = false;
};

struct SyntheticDataset {
  std::vector<SyntheticImage> images;  // ordered train, val, test

  Dataset to_dataset() const;
};

SyntheticDataset synth_generate(const SyntheticSpec& spec);

}  // namespace reliscope
