#include "reliscope/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "reliscope/util.hpp"

namespace reliscope {

using json = nlohmann::json;

const char* to_string(FillKind k) {
  switch (k) {
    case FillKind::DatasetMean: return "dataset_mean";
    case FillKind::Zero: return "zero";
    case FillKind::Gray: return "gray";
  }
  return "dataset_mean";
}

FillKind fill_kind_from_string(const std::string& s) {
  if (s == "dataset_mean") return FillKind::DatasetMean;
  if (s == "zero") return FillKind::Zero;
  if (s == "gray") return FillKind::Gray;
  throw InvalidInputError("unknown fill kind: '" + s + "'");
}

float Fill::value(int channel) const {
  switch (kind) {
    case FillKind::DatasetMean: return mean[static_cast<std::size_t>(channel % 3)];
    case FillKind::Zero: return 0.0f;
    case FillKind::Gray: return 0.5f;
  }
  return 0.5f;
}

std::array<float, 3> dataset_mean(const std::vector<LabeledImage>& images) {
  std::array<double, 3> acc = {0.0, 0.0, 0.0};
  std::array<long long, 3> count = {0, 0, 0};
  for (const auto& li : images) {
    const ImageTensor& img = li.image;
    for (int c = 0; c < img.channels; ++c) {
      const float* p = &img.data[static_cast<std::size_t>(c) * img.pixel_count()];
      double s = 0.0;
      for (std::size_t i = 0; i < img.pixel_count(); ++i) s += p[i];
      acc[static_cast<std::size_t>(c)] += s;
      count[static_cast<std::size_t>(c)] += static_cast<long long>(img.pixel_count());
    }
  }
  std::array<float, 3> mean = {0.5f, 0.5f, 0.5f};
  for (std::size_t c = 0; c < 3; ++c)
    if (count[c] > 0) mean[c] = static_cast<float>(acc[c] / static_cast<double>(count[c]));
  return mean;
}

namespace {

// Bilinear resample of a single-channel field (same convention as image
// resizing: half-pixel centers, edges clamped).
std::vector<float> resize_field(const std::vector<float>& src, int h, int w, int oh, int ow) {
  if (h == oh && w == ow) return src;
  std::vector<float> out(static_cast<std::size_t>(oh) * ow, 0.0f);
  double sy = static_cast<double>(h) / oh;
  double sx = static_cast<double>(w) / ow;
  for (int y = 0; y < oh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = std::clamp(y0, 0, h - 1);
    int y1c = std::clamp(y0 + 1, 0, h - 1);
    for (int x = 0; x < ow; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = std::clamp(x0, 0, w - 1);
      int x1c = std::clamp(x0 + 1, 0, w - 1);
      double top = (1.0 - wx) * src[static_cast<std::size_t>(y0c) * w + x0c] +
                   wx * src[static_cast<std::size_t>(y0c) * w + x1c];
      double bot = (1.0 - wx) * src[static_cast<std::size_t>(y1c) * w + x0c] +
                   wx * src[static_cast<std::size_t>(y1c) * w + x1c];
      out[static_cast<std::size_t>(y) * ow + x] = static_cast<float>((1.0 - wy) * top + wy * bot);
    }
  }
  return out;
}

}  // namespace

SaliencyMap grad_cam(const Classifier& classifier, const ImageTensor& image, ClassLabel cls,
                     const GradCamConfig& cfg) {
  if (!classifier.supports_gradients())
    throw UnsupportedExplainerError("grad_cam requires a gradient-capable classifier");
  std::string layer = cfg.layer_id.empty() ? classifier.default_saliency_layer() : cfg.layer_id;
  auto [activation, gradient] = classifier.activations_and_gradients(image, cls, layer);

  std::vector<float> cam(static_cast<std::size_t>(activation.h) * activation.w, 0.0f);
  double inv_hw = 1.0 / (static_cast<double>(activation.h) * activation.w);
  for (int c = 0; c < activation.c; ++c) {
    const double* g = &gradient.v[static_cast<std::size_t>(c) * activation.h * activation.w];
    double alpha = 0.0;
    for (int i = 0; i < activation.h * activation.w; ++i) alpha += g[i];
    alpha *= inv_hw;
    const double* a = &activation.v[static_cast<std::size_t>(c) * activation.h * activation.w];
    for (int i = 0; i < activation.h * activation.w; ++i)
      cam[static_cast<std::size_t>(i)] += static_cast<float>(alpha * a[i]);
  }
  for (float& v : cam) v = v > 0.0f ? v : 0.0f;

  SaliencyMap map;
  map.height = image.height;
  map.width = image.width;
  map.values = resize_field(cam, activation.h, activation.w, image.height, image.width);
  // The rectification happens at map resolution; interpolation of
  // nonnegative values stays nonnegative.
  map.method = SaliencyMethod::GradCAM;
  map.explained_class = cls;
  return map;
}

int occlusion_positions(int extent, int patch, int stride) {
  return (extent - patch) / stride + 1;
}

std::vector<double> occlusion_window_deltas(const Classifier& classifier,
                                            const ImageTensor& image, ClassLabel cls,
                                            const OcclusionConfig& cfg) {
  if (cfg.stride < 1 || cfg.patch < cfg.stride)
    throw InvalidInputError("occlusion: need 1 <= stride <= patch");
  if (cfg.patch > image.height || cfg.patch > image.width)
    throw InvalidInputError("occlusion: patch exceeds image side");

  const int ny = occlusion_positions(image.height, cfg.patch, cfg.stride);
  const int nx = occlusion_positions(image.width, cfg.patch, cfg.stride);
  const double original = classifier.predict(image).of(cls);

  std::vector<double> deltas(static_cast<std::size_t>(ny) * nx, 0.0);
  // One scratch copy per window row; the patch is restored after each probe.
  parallel_for(static_cast<std::size_t>(ny), [&](std::size_t wy) {
    ImageTensor scratch = image;
    int y0 = static_cast<int>(wy) * cfg.stride;
    for (int wx = 0; wx < nx; ++wx) {
      int x0 = wx * cfg.stride;
      for (int c = 0; c < image.channels; ++c) {
        float v = cfg.fill.value(c);
        for (int y = y0; y < y0 + cfg.patch; ++y)
          for (int x = x0; x < x0 + cfg.patch; ++x) scratch.at(c, y, x) = v;
      }
      double occluded = classifier.predict(scratch).of(cls);
      deltas[wy * static_cast<std::size_t>(nx) + static_cast<std::size_t>(wx)] =
          original - occluded;
      for (int c = 0; c < image.channels; ++c)
        for (int y = y0; y < y0 + cfg.patch; ++y)
          for (int x = x0; x < x0 + cfg.patch; ++x) scratch.at(c, y, x) = image.at(c, y, x);
    }
  });
  return deltas;
}

SaliencyMap occlusion_map(const Classifier& classifier, const ImageTensor& image, ClassLabel cls,
                          const OcclusionConfig& cfg) {
  std::vector<double> deltas = occlusion_window_deltas(classifier, image, cls, cfg);
  const int ny = occlusion_positions(image.height, cfg.patch, cfg.stride);
  const int nx = occlusion_positions(image.width, cfg.patch, cfg.stride);

  std::vector<double> sum(image.pixel_count(), 0.0);
  std::vector<int> cover(image.pixel_count(), 0);
  for (int wy = 0; wy < ny; ++wy) {
    for (int wx = 0; wx < nx; ++wx) {
      double d = deltas[static_cast<std::size_t>(wy) * nx + wx];
      for (int y = wy * cfg.stride; y < wy * cfg.stride + cfg.patch; ++y)
        for (int x = wx * cfg.stride; x < wx * cfg.stride + cfg.patch; ++x) {
          std::size_t i = static_cast<std::size_t>(y) * image.width + x;
          sum[i] += d;
          ++cover[i];
        }
    }
  }
  SaliencyMap map = SaliencyMap::zeros(image.height, image.width);
  for (std::size_t i = 0; i < sum.size(); ++i)
    if (cover[i] > 0) map.values[i] = static_cast<float>(sum[i] / cover[i]);
  map.method = SaliencyMethod::OSM;
  map.explained_class = cls;
  return map;
}

std::vector<int> segment_grid(int height, int width, int cell) {
  if (cell < 1 || cell > height || cell > width)
    throw InvalidInputError("segment_grid: need 1 <= cell <= image side");
  int ncols = (width + cell - 1) / cell;
  std::vector<int> seg(static_cast<std::size_t>(height) * width, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      seg[static_cast<std::size_t>(y) * width + x] = (y / cell) * ncols + (x / cell);
  return seg;
}

int segment_count(int height, int width, int cell) {
  int nrows = (height + cell - 1) / cell;
  int ncols = (width + cell - 1) / cell;
  return nrows * ncols;
}

LimeFit lime_fit(const Classifier& classifier, const ImageTensor& image, ClassLabel cls,
                 const LimeConfig& cfg) {
  if (cfg.mask_probability <= 0.0 || cfg.mask_probability >= 1.0)
    throw InvalidInputError("lime: mask_probability must be in (0,1)");
  if (cfg.kernel_width <= 0.0) throw InvalidInputError("lime: kernel_width must be positive");
  LimeFit fit;
  fit.segments = segment_grid(image.height, image.width, cfg.cell);
  const int nseg = segment_count(image.height, image.width, cfg.cell);

  std::size_t n_masks;
  if (cfg.exhaustive) {
    if (nseg > 20) throw InvalidInputError("lime: exhaustive masks need <= 20 segments");
    n_masks = std::size_t{1} << nseg;
  } else {
    if (cfg.samples <= nseg)
      throw InvalidInputError("lime: sample count must exceed the segment count");
    n_masks = static_cast<std::size_t>(cfg.samples);
  }

  // keep[j][s] = 1 when segment s stays unperturbed in mask j.
  std::vector<std::vector<char>> keep(n_masks, std::vector<char>(static_cast<std::size_t>(nseg)));
  if (cfg.exhaustive) {
    for (std::size_t j = 0; j < n_masks; ++j)
      for (int s = 0; s < nseg; ++s)
        keep[j][static_cast<std::size_t>(s)] = (j >> s) & 1u ? 1 : 0;
  } else {
    Rng rng(derive_seed(cfg.seed, "lime/masks"));
    for (std::size_t j = 0; j < n_masks; ++j)
      for (int s = 0; s < nseg; ++s)
        keep[j][static_cast<std::size_t>(s)] = rng.bernoulli(cfg.mask_probability) ? 0 : 1;
  }

  std::vector<double> y(n_masks, 0.0);
  parallel_for(n_masks, [&](std::size_t j) {
    ImageTensor perturbed = image;
    for (int c = 0; c < image.channels; ++c) {
      float v = cfg.fill.value(c);
      float* plane = &perturbed.data[static_cast<std::size_t>(c) * image.pixel_count()];
      for (std::size_t i = 0; i < image.pixel_count(); ++i)
        if (!keep[j][static_cast<std::size_t>(fit.segments[i])]) plane[i] = v;
    }
    y[j] = classifier.predict(perturbed).of(cls);
  });

  std::vector<double> weights(n_masks, 1.0);
  if (!cfg.uniform_weights) {
    for (std::size_t j = 0; j < n_masks; ++j) {
      int kept = 0;
      for (int s = 0; s < nseg; ++s) kept += keep[j][static_cast<std::size_t>(s)];
      double d = kept == 0 ? 1.0 : 1.0 - std::sqrt(static_cast<double>(kept) / nseg);
      double scaled = d / cfg.kernel_width;
      weights[j] = std::exp(-scaled * scaled);
    }
  }

  // Weighted normal equations with an intercept column.
  const int dim = nseg + 1;
  Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::VectorXd aty = Eigen::VectorXd::Zero(dim);
  Eigen::VectorXd row(dim);
  for (std::size_t j = 0; j < n_masks; ++j) {
    row(0) = 1.0;
    for (int s = 0; s < nseg; ++s) row(s + 1) = keep[j][static_cast<std::size_t>(s)];
    ata.noalias() += weights[j] * row * row.transpose();
    aty.noalias() += weights[j] * y[j] * row;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(ata);
  if (!lu.isInvertible())
    throw SurrogateDegenerateError("lime: surrogate normal equations are singular "
                                   "(too few or collinear samples)");
  Eigen::VectorXd beta = lu.solve(aty);

  fit.intercept = beta(0);
  fit.coefficients.resize(static_cast<std::size_t>(nseg));
  for (int s = 0; s < nseg; ++s) fit.coefficients[static_cast<std::size_t>(s)] = beta(s + 1);
  return fit;
}

SaliencyMap lime_map(const Classifier& classifier, const ImageTensor& image, ClassLabel cls,
                     const LimeConfig& cfg) {
  LimeFit fit = lime_fit(classifier, image, cls, cfg);
  SaliencyMap map = SaliencyMap::zeros(image.height, image.width);
  for (std::size_t i = 0; i < map.values.size(); ++i)
    map.values[i] = static_cast<float>(fit.coefficients[static_cast<std::size_t>(fit.segments[i])]);
  map.method = SaliencyMethod::LIME;
  map.explained_class = cls;
  return map;
}

std::uint64_t config_digest(const MethodConfig& cfg, std::uint64_t effective_seed) {
  json j;
  j["method"] = to_string(cfg.method);
  switch (cfg.method) {
    case SaliencyMethod::GradCAM:
      j["layer"] = cfg.gradcam.layer_id;
      break;
    case SaliencyMethod::OSM:
      j["patch"] = cfg.osm.patch;
      j["stride"] = cfg.osm.stride;
      j["fill"] = to_string(cfg.osm.fill.kind);
      if (cfg.osm.fill.kind == FillKind::DatasetMean)
        j["fill_mean"] = {cfg.osm.fill.mean[0], cfg.osm.fill.mean[1], cfg.osm.fill.mean[2]};
      break;
    case SaliencyMethod::LIME:
      j["cell"] = cfg.lime.cell;
      j["samples"] = cfg.lime.samples;
      j["mask_probability"] = cfg.lime.mask_probability;
      j["kernel_width"] = cfg.lime.kernel_width;
      j["fill"] = to_string(cfg.lime.fill.kind);
      if (cfg.lime.fill.kind == FillKind::DatasetMean)
        j["fill_mean"] = {cfg.lime.fill.mean[0], cfg.lime.fill.mean[1], cfg.lime.fill.mean[2]};
      j["exhaustive"] = cfg.lime.exhaustive;
      j["uniform_weights"] = cfg.lime.uniform_weights;
      j["seed"] = effective_seed;
      break;
  }
  std::string s = j.dump();
  return fnv1a64(s);
}

std::vector<ExplainResult> batch_explain(const Classifier& classifier,
                                         const std::vector<LabeledImage>& images,
                                         const MethodConfig& cfg, std::uint64_t seed,
                                         bool with_truth) {
  std::vector<ExplainResult> results(images.size());
  std::vector<std::exception_ptr> errors(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const LabeledImage& li = images[i];
    try {
      ClassScores scores = classifier.predict(li.image);
      ClassLabel predicted = scores.argmax();
      SaliencyMap map;
      switch (cfg.method) {
        case SaliencyMethod::GradCAM:
          map = grad_cam(classifier, li.image, predicted, cfg.gradcam);
          break;
        case SaliencyMethod::OSM:
          map = occlusion_map(classifier, li.image, predicted, cfg.osm);
          break;
        case SaliencyMethod::LIME: {
          LimeConfig lc = cfg.lime;
          lc.seed = derive_seed(seed, "lime/" + li.id);
          map = lime_map(classifier, li.image, predicted, lc);
          break;
        }
      }
      map.image_id = li.id;
      ExplainResult r;
      r.map = std::move(map);
      r.record.image_id = li.id;
      r.record.predicted = predicted;
      r.record.scores = scores;
      if (with_truth) {
        r.record.truth = li.label;
        r.record.outcome = outcome_of(predicted, li.label);
      }
      results[i] = std::move(r);
    } catch (const Error& e) {
      errors[i] = std::make_exception_ptr(
          Error(std::string("image '") + li.id + "': " + e.what(), e.exit_code()));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });
  for (const auto& ep : errors)
    if (ep) std::rethrow_exception(ep);
  return results;
}

void write_saliency_map(const std::filesystem::path& dir, const SaliencyMap& map,
                        double score_of_explained_class, const std::string& digest) {
  std::string stem = map.image_id + "." + to_string(map.method);
  std::filesystem::path data_path = dir / (stem + ".smap");
  std::filesystem::path meta_path = dir / (stem + ".json");

  std::ofstream out(data_path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot write '" + data_path.string() + "'");
  for (float f : map.values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    unsigned char le[4] = {static_cast<unsigned char>(bits & 0xff),
                           static_cast<unsigned char>((bits >> 8) & 0xff),
                           static_cast<unsigned char>((bits >> 16) & 0xff),
                           static_cast<unsigned char>((bits >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(le), 4);
  }

  json meta;
  meta["image_id"] = map.image_id;
  meta["method"] = to_string(map.method);
  meta["explained_class"] = to_string(map.explained_class);
  meta["height"] = map.height;
  meta["width"] = map.width;
  meta["score_of_explained_class"] = score_of_explained_class;
  meta["config_digest"] = digest;
  std::ofstream mout(meta_path, std::ios::binary);
  if (!mout) throw InvalidInputError("cannot write '" + meta_path.string() + "'");
  mout << meta.dump(2) << "\n";
}

SmapMeta read_smap_meta(const std::filesystem::path& smap_path) {
  std::filesystem::path meta_path = smap_path;
  meta_path.replace_extension(".json");
  std::ifstream min(meta_path);
  if (!min) throw InvalidInputError("cannot open sidecar '" + meta_path.string() + "'");
  json meta;
  try {
    min >> meta;
  } catch (const json::exception& e) {
    throw InvalidInputError("malformed sidecar '" + meta_path.string() + "': " + e.what());
  }
  SmapMeta m;
  m.image_id = meta.at("image_id").get<std::string>();
  m.method = saliency_method_from_string(meta.at("method").get<std::string>());
  m.explained_class = class_label_from_string(meta.at("explained_class").get<std::string>());
  m.height = meta.at("height").get<int>();
  m.width = meta.at("width").get<int>();
  m.score_of_explained_class = meta.at("score_of_explained_class").get<double>();
  m.config_digest = meta.at("config_digest").get<std::string>();
  return m;
}

SaliencyMap read_saliency_map(const std::filesystem::path& smap_path) {
  SmapMeta meta = read_smap_meta(smap_path);
  std::ifstream in(smap_path, std::ios::binary);
  if (!in) throw InvalidInputError("cannot open '" + smap_path.string() + "'");
  SaliencyMap map = SaliencyMap::zeros(meta.height, meta.width);
  for (float& f : map.values) {
    unsigned char le[4];
    in.read(reinterpret_cast<char*>(le), 4);
    if (!in)
      throw InvalidInputError("'" + smap_path.string() + "' is truncated");
    std::uint32_t bits = static_cast<std::uint32_t>(le[0]) |
                         (static_cast<std::uint32_t>(le[1]) << 8) |
                         (static_cast<std::uint32_t>(le[2]) << 16) |
                         (static_cast<std::uint32_t>(le[3]) << 24);
    std::memcpy(&f, &bits, 4);
  }
  map.image_id = meta.image_id;
  map.method = meta.method;
  map.explained_class = meta.explained_class;
  return map;
}

}  // namespace reliscope
