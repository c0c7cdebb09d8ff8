#include "reliscope/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>

#include "reliscope/image_io.hpp"
#include "reliscope/util.hpp"

namespace reliscope {

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw InvalidInputError("unknown split: '" + s + "'");
}

std::vector<LabeledImage>& Dataset::split(Split s) {
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Test: return test;
  }
  return train;
}

const std::vector<LabeledImage>& Dataset::split(Split s) const {
  return const_cast<Dataset*>(this)->split(s);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

DatasetManifest read_manifest(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw InvalidInputError("cannot open manifest '" + csv_path.string() + "'");
  std::string line;
  if (!std::getline(in, line))
    throw InvalidInputError("manifest '" + csv_path.string() + "' is empty");
  auto header = split_csv_line(line);
  const std::vector<std::string> expect = {"image_path", "label", "split", "harvested"};
  if (std::vector<std::string>(header.begin(), header.end()) != expect)
    throw InvalidInputError("manifest '" + csv_path.string() +
                            "' must start with header image_path,label,split,harvested");
  DatasetManifest manifest;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    if (f.size() != 4)
      throw InvalidInputError("manifest line " + std::to_string(lineno) + ": expected 4 fields");
    ManifestEntry e;
    e.image_path = f[0];
    e.label = class_label_from_string(f[1]);
    e.split = split_from_string(f[2]);
    if (f[3] == "true" || f[3] == "1")
      e.harvested = true;
    else if (f[3] == "false" || f[3] == "0")
      e.harvested = false;
    else
      throw InvalidInputError("manifest line " + std::to_string(lineno) +
                              ": harvested must be true/false");
    manifest.entries.push_back(std::move(e));
  }
  // Duplicate paths would make image ids ambiguous downstream.
  std::vector<std::string> paths;
  paths.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) paths.push_back(e.image_path);
  std::sort(paths.begin(), paths.end());
  if (std::adjacent_find(paths.begin(), paths.end()) != paths.end())
    throw InvalidInputError("manifest contains duplicate image paths");
  return manifest;
}

void write_manifest(const std::filesystem::path& csv_path, const DatasetManifest& manifest) {
  std::ofstream out(csv_path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot write manifest '" + csv_path.string() + "'");
  out << "image_path,label,split,harvested\n";
  for (const auto& e : manifest.entries)
    out << e.image_path << ',' << to_string(e.label) << ',' << to_string(e.split) << ','
        << (e.harvested ? "true" : "false") << '\n';
}

Dataset load_dataset(const DatasetManifest& manifest, const LoadOptions& options,
                     const std::filesystem::path& base_dir) {
  if (options.side <= 0) throw InvalidInputError("load side must be positive");
  Dataset ds;
  struct Job {
    const ManifestEntry* entry;
    Split split;
    std::size_t slot;
  };
  std::vector<Job> jobs;
  bool had_entries[3] = {false, false, false};
  for (const auto& e : manifest.entries) {
    had_entries[static_cast<int>(e.split)] = true;
    if (e.harvested) continue;
    auto& bucket = ds.split(e.split);
    jobs.push_back({&e, e.split, bucket.size()});
    bucket.emplace_back();
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  parallel_for(jobs.size(), [&](std::size_t i) {
    const Job& job = jobs[i];
    try {
      std::filesystem::path p(job.entry->image_path);
      if (p.is_relative()) p = base_dir / p;
      ImageTensor img = read_image(p, options.channels);
      img = resize_bilinear(img, options.side, options.side);
      LabeledImage li;
      li.image = std::move(img);
      li.label = job.entry->label;
      li.id = std::filesystem::path(job.entry->image_path).stem().string();
      ds.split(job.split)[job.slot] = std::move(li);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  });
  if (first_error) std::rethrow_exception(first_error);
  // A split the manifest populates must survive the harvested exclusion;
  // splits absent from the manifest are legitimately empty.
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    if (had_entries[static_cast<int>(s)] && ds.split(s).empty())
      throw InsufficientDataError(std::string("split '") + to_string(s) +
                                  "' is empty after excluding harvested entries");
  }
  return ds;
}

const char* to_string(AugmentOp op) {
  switch (op) {
    case AugmentOp::HFlip: return "hflip";
    case AugmentOp::VFlip: return "vflip";
    case AugmentOp::Rot90: return "rot90";
    case AugmentOp::Rot180: return "rot180";
    case AugmentOp::Rot270: return "rot270";
  }
  return "hflip";
}

AugmentOp augment_op_from_string(const std::string& s) {
  if (s == "hflip") return AugmentOp::HFlip;
  if (s == "vflip") return AugmentOp::VFlip;
  if (s == "rot90") return AugmentOp::Rot90;
  if (s == "rot180") return AugmentOp::Rot180;
  if (s == "rot270") return AugmentOp::Rot270;
  throw InvalidInputError("unknown augmentation op: '" + s + "'");
}

ImageTensor apply_augment_op(const ImageTensor& image, AugmentOp op) {
  const int h = image.height, w = image.width;
  auto make = [&](int oh, int ow) { return ImageTensor::zeros(oh, ow, image.channels); };
  ImageTensor out;
  switch (op) {
    case AugmentOp::HFlip:
      out = make(h, w);
      for (int c = 0; c < image.channels; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y, w - 1 - x);
      break;
    case AugmentOp::VFlip:
      out = make(h, w);
      for (int c = 0; c < image.channels; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, h - 1 - y, x);
      break;
    case AugmentOp::Rot90:  // clockwise
      out = make(w, h);
      for (int c = 0; c < image.channels; ++c)
        for (int y = 0; y < w; ++y)
          for (int x = 0; x < h; ++x) out.at(c, y, x) = image.at(c, h - 1 - x, y);
      break;
    case AugmentOp::Rot180:
      out = make(h, w);
      for (int c = 0; c < image.channels; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, h - 1 - y, w - 1 - x);
      break;
    case AugmentOp::Rot270:  // counter-clockwise
      out = make(w, h);
      for (int c = 0; c < image.channels; ++c)
        for (int y = 0; y < w; ++y)
          for (int x = 0; x < h; ++x) out.at(c, y, x) = image.at(c, x, w - 1 - y);
      break;
  }
  return out;
}

std::vector<AugmentedImage> augment(const std::vector<LabeledImage>& train,
                                    const AugmentationPolicy& policy, std::uint64_t seed) {
  if (train.empty()) throw InsufficientDataError("augment: training set is empty");
  if (policy.minority_boost < 1.0)
    throw InvalidInputError("augment: minority_boost must be >= 1");
  if (policy.base_multiplier < 0.0)
    throw InvalidInputError("augment: base_multiplier must be >= 0");

  std::vector<AugmentedImage> out;
  for (const auto& src : train) {
    AugmentedImage orig;
    orig.sample = src;
    orig.source_id = src.id;
    orig.transform = "orig";
    out.push_back(std::move(orig));

    if (policy.operations.empty()) continue;
    double expected = policy.base_multiplier;
    if (src.label == policy.target_class) expected *= policy.minority_boost;
    Rng rng(derive_seed(seed, "augment/" + src.id));
    int k = static_cast<int>(std::floor(expected));
    double frac = expected - k;
    if (rng.bernoulli(frac)) ++k;
    for (int i = 0; i < k; ++i) {
      AugmentOp op = policy.operations[rng.uniform_index(policy.operations.size())];
      AugmentedImage copy;
      copy.sample.image = apply_augment_op(src.image, op);
      copy.sample.label = src.label;
      copy.sample.id = src.id + "#aug" + std::to_string(i) + "_" + to_string(op);
      copy.source_id = src.id;
      copy.transform = to_string(op);
      out.push_back(std::move(copy));
    }
  }
  return out;
}

const char* to_string(ErrorSignature s) {
  return s == ErrorSignature::OffsetHead ? "offset_head" : "textureless_center";
}

ErrorSignature error_signature_from_string(const std::string& s) {
  if (s == "offset_head") return ErrorSignature::OffsetHead;
  if (s == "textureless_center") return ErrorSignature::TexturelessCenter;
  throw InvalidInputError("unknown error signature: '" + s + "'");
}

void validate(const SyntheticSpec& spec) {
  if (spec.train_count < 0 || spec.val_count < 0 || spec.test_count < 0)
    throw InvalidInputError("synthetic counts must be nonnegative");
  if (spec.side < 16) throw InvalidInputError("synthetic side must be at least 16");
  if (!(spec.head_radius_min > 0.0) || spec.head_radius_min > spec.head_radius_max)
    throw InvalidInputError("synthetic head radius range is invalid");
  if (spec.head_radius_max + 2.0 > spec.side / 2.0)
    throw InvalidInputError("synthetic head does not fit in the image");
  if (spec.planted_error_fraction < 0.0 || spec.planted_error_fraction > 1.0)
    throw InvalidInputError("planted_error_fraction must be in [0,1]");
  if (spec.canopy_density < 0.0 || spec.canopy_density > 4.0)
    throw InvalidInputError("canopy_density must be in [0,4]");
  if (spec.planted_error_fraction > 0.0) {
    // Planted images render a head from the opposite side of the threshold;
    // both sides need at least a 2px band.
    if (spec.readiness_threshold - 2.0 < spec.head_radius_min ||
        spec.readiness_threshold + 2.0 > spec.head_radius_max)
      throw InvalidInputError(
          "infeasible geometry: readiness_threshold leaves no band for planted errors");
    if (spec.signature == ErrorSignature::OffsetHead &&
        0.25 * spec.side + spec.head_radius_max > spec.side / 2.0)
      throw InvalidInputError("infeasible geometry: offset head would leave the image");
  }
}

namespace {

struct Leaf {
  double cy, cx;     // center
  double a, b;       // semi-axes, a >= b
  double angle;      // orientation of the long axis
  float color[3];
};

void draw_leaf(ImageTensor& img, const Leaf& leaf) {
  double ca = std::cos(leaf.angle), sa = std::sin(leaf.angle);
  int y0 = std::max(0, static_cast<int>(std::floor(leaf.cy - leaf.a)));
  int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(leaf.cy + leaf.a)));
  int x0 = std::max(0, static_cast<int>(std::floor(leaf.cx - leaf.a)));
  int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(leaf.cx + leaf.a)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      double dy = y - leaf.cy, dx = x - leaf.cx;
      double u = (dx * ca + dy * sa) / leaf.a;
      double v = (-dx * sa + dy * ca) / leaf.b;
      double d = u * u + v * v;
      if (d >= 1.0) continue;
      double alpha = std::min(1.0, (1.0 - d) * 4.0);
      for (int c = 0; c < 3; ++c) {
        double blended = alpha * leaf.color[c] + (1.0 - alpha) * img.at(c, y, x);
        img.at(c, y, x) = static_cast<float>(std::clamp(blended, 0.0, 1.0));
      }
    }
  }
}

void draw_head(ImageTensor& img, double cy, double cx, double radius, Rng& rng) {
  int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  const double base[3] = {0.93, 0.91, 0.84};
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      double rho = std::hypot(y - cy, x - cx);
      double cover = std::clamp(radius - rho + 0.5, 0.0, 1.0);
      if (cover <= 0.0) continue;
      double shade = 1.0 - 0.15 * (rho / radius) * (rho / radius);
      double noise = rng.uniform(-0.02, 0.02);
      for (int c = 0; c < 3; ++c) {
        double v = base[c] * shade + noise;
        double blended = cover * v + (1.0 - cover) * img.at(c, y, x);
        img.at(c, y, x) = static_cast<float>(std::clamp(blended, 0.0, 1.0));
      }
    }
  }
}

Leaf random_leaf(Rng& rng, double cy, double cx, double dist_lo, double dist_hi, int side) {
  double dir = rng.uniform(0.0, 2.0 * M_PI);
  double dist = rng.uniform(dist_lo, dist_hi);
  Leaf leaf;
  leaf.cy = cy + dist * std::sin(dir);
  leaf.cx = cx + dist * std::cos(dir);
  leaf.a = rng.uniform(0.12, 0.22) * side;
  leaf.b = rng.uniform(0.035, 0.07) * side;
  leaf.angle = dir + rng.uniform(-0.4, 0.4);  // leaves roughly radiate outward
  leaf.color[0] = static_cast<float>(rng.uniform(0.10, 0.20));
  leaf.color[1] = static_cast<float>(rng.uniform(0.35, 0.55));
  leaf.color[2] = static_cast<float>(rng.uniform(0.08, 0.16));
  return leaf;
}

ImageTensor render_plant(const SyntheticSpec& spec, Rng& rng, double true_radius,
                         bool planted) {
  const int s = spec.side;
  ImageTensor img = ImageTensor::zeros(s, s, 3);
  const double soil[3] = {0.30, 0.24, 0.16};
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double n = rng.uniform(-0.04, 0.04);
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(std::clamp(soil[c] + n, 0.0, 1.0));
    }

  double mid = (s - 1) / 2.0;
  double head_cy = mid + rng.uniform(-2.0, 2.0);
  double head_cx = mid + rng.uniform(-2.0, 2.0);
  double render_radius = true_radius;

  if (planted && spec.signature == ErrorSignature::OffsetHead) {
    // Contradictory size cue at an off-center position: the rendered head is
    // resampled from the opposite side of the readiness threshold.
    bool label_ready = true_radius >= spec.readiness_threshold;
    if (label_ready)
      render_radius = rng.uniform(spec.head_radius_min, spec.readiness_threshold - 2.0);
    else
      render_radius = rng.uniform(spec.readiness_threshold + 2.0, spec.head_radius_max);
    double offset = 0.25 * s;
    static const double kDiag[4][2] = {{-1, -1}, {-1, 1}, {1, -1}, {1, 1}};
    const double* d = kDiag[rng.uniform_index(4)];
    head_cy = mid + d[0] * offset * M_SQRT1_2;
    head_cx = mid + d[1] * offset * M_SQRT1_2;
  }

  int n_leaves = static_cast<int>(std::lround(spec.canopy_density * 10.0));
  int n_under = (n_leaves * 2) / 3;
  for (int i = 0; i < n_under; ++i)
    draw_leaf(img, random_leaf(rng, mid, mid, 0.18 * s, 0.42 * s, s));

  if (planted && spec.signature == ErrorSignature::TexturelessCenter) {
    // No head at all: a flat, featureless patch replaces the plant center.
    double patch_r = spec.head_radius_max;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        if (std::hypot(y - mid, x - mid) <= patch_r)
          for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(soil[c]);
  } else {
    draw_head(img, head_cy, head_cx, render_radius, rng);
    // Canopy partially covering the head.
    int n_over = n_leaves - n_under;
    for (int i = 0; i < n_over; ++i)
      draw_leaf(img, random_leaf(rng, head_cy, head_cx, 0.4 * render_radius,
                                 1.1 * render_radius, s));
  }
  return img;
}

}  // namespace

Dataset SyntheticDataset::to_dataset() const {
  Dataset ds;
  for (const auto& si : images) ds.split(si.split).push_back(si.sample);
  return ds;
}

SyntheticDataset synth_generate(const SyntheticSpec& spec) {
  validate(spec);
  SyntheticDataset out;
  const std::pair<Split, int> splits[] = {{Split::Train, spec.train_count},
                                          {Split::Val, spec.val_count},
                                          {Split::Test, spec.test_count}};
  for (const auto& [split, count] : splits) {
    // Exact planted count per split, assigned to a seeded random subset.
    std::vector<int> order(static_cast<std::size_t>(count));
    std::iota(order.begin(), order.end(), 0);
    Rng subset_rng(derive_seed(spec.seed, std::string("synth_planted/") + to_string(split)));
    subset_rng.shuffle(order);
    int planted_count = static_cast<int>(std::lround(spec.planted_error_fraction * count));
    std::vector<bool> planted(static_cast<std::size_t>(count), false);
    for (int i = 0; i < planted_count; ++i) planted[static_cast<std::size_t>(order[i])] = true;

    for (int i = 0; i < count; ++i) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%s%04d", to_string(split), i);
      std::string id(buf);
      Rng rng(derive_seed(spec.seed, "synth/" + id));
      double radius = rng.uniform(spec.head_radius_min, spec.head_radius_max);
      SyntheticImage si;
      si.split = split;
      si.true_radius = radius;
      si.planted_error = planted[static_cast<std::size_t>(i)];
      si.sample.id = id;
      si.sample.label = radius >= spec.readiness_threshold ? ClassLabel::Ready
                                                           : ClassLabel::NotReady;
      si.sample.image = render_plant(spec, rng, radius, si.planted_error);
      out.images.push_back(std::move(si));
    }
  }
  return out;
}

}  // namespace reliscope
