#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "reliscope/core.hpp"
#include "reliscope/model.hpp"
#include "reliscope/util.hpp"

namespace testutil {

using namespace reliscope;

// Scoped scratch directory; removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("reliscope_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline ImageTensor make_image(int h, int w, int c, const std::function<float(int, int, int)>& f) {
  ImageTensor img = ImageTensor::zeros(h, w, c);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) img.at(ch, y, x) = f(ch, y, x);
  return img;
}

inline ImageTensor random_image(int h, int w, int c, Rng& rng) {
  return make_image(h, w, c,
                    [&](int, int, int) { return static_cast<float>(rng.uniform()); });
}

// Affine scorer over all pixels: score(Ready) = bias + sum w_i x_i with
// sum |w_i| bounded so the output stays a valid probability on [0,1] images.
class LinearScorer final : public Classifier {
 public:
  LinearScorer(std::vector<double> weights, double bias)
      : weights_(std::move(weights)), bias_(bias) {}

  static LinearScorer random_bounded(int c, int h, int w, std::uint64_t seed,
                                     double budget = 0.4) {
    Rng rng(seed);
    std::vector<double> weights(static_cast<std::size_t>(c) * h * w);
    double norm = 0.0;
    for (double& v : weights) {
      v = rng.uniform(-1.0, 1.0);
      norm += std::abs(v);
    }
    for (double& v : weights) v *= budget / norm;
    return LinearScorer(std::move(weights), 0.5);
  }

  double raw(const ImageTensor& image) const {
    double acc = bias_;
    for (std::size_t i = 0; i < image.data.size(); ++i)
      acc += weights_[i] * static_cast<double>(image.data[i]);
    return acc;
  }

  ClassScores predict(const ImageTensor& image) const override {
    double f = raw(image);
    ClassScores s;
    s.p = {1.0 - f, f};
    return s;
  }

  const std::vector<double>& weights() const { return weights_; }

 private:
  std::vector<double> weights_;
  double bias_;
};

class ConstantScorer final : public Classifier {
 public:
  explicit ConstantScorer(double ready_probability) : p_(ready_probability) {}
  ClassScores predict(const ImageTensor&) const override {
    ClassScores s;
    s.p = {1.0 - p_, p_};
    return s;
  }

 private:
  double p_;
};

inline double binom2(double n) { return n * (n - 1.0) / 2.0; }

// Adjusted Rand index between two labelings of the same points.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<int, int>, long long> cont;
  std::map<int, long long> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++cont[{a[i], b[i]}];
    ++ra[a[i]];
    ++rb[b[i]];
  }
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [k, n] : cont) sum_ij += binom2(static_cast<double>(n));
  for (const auto& [k, n] : ra) sum_a += binom2(static_cast<double>(n));
  for (const auto& [k, n] : rb) sum_b += binom2(static_cast<double>(n));
  double total = binom2(static_cast<double>(a.size()));
  double expected = sum_a * sum_b / total;
  double maximum = 0.5 * (sum_a + sum_b);
  if (maximum == expected) return 1.0;  // both labelings trivial
  return (sum_ij - expected) / (maximum - expected);
}

// Solves A x = y by Gaussian elimination with partial pivoting; the
// independent route for checking least-squares solutions.
inline std::vector<double> solve_dense(std::vector<std::vector<double>> a,
                                       std::vector<double> y) {
  const std::size_t n = y.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    std::swap(a[col], a[pivot]);
    std::swap(y[col], y[pivot]);
    for (std::size_t r = col + 1; r < n; ++r) {
      double factor = a[r][col] / a[col][col];
      for (std::size_t k = col; k < n; ++k) a[r][k] -= factor * a[col][k];
      y[r] -= factor * y[col];
    }
  }
  std::vector<double> x(n, 0.0);
  for (std::size_t r = n; r-- > 0;) {
    double acc = y[r];
    for (std::size_t k = r + 1; k < n; ++k) acc -= a[r][k] * x[k];
    x[r] = acc / a[r][r];
  }
  return x;
}

inline PredictionRecord make_record(const std::string& id, ClassLabel predicted,
                                    ClassLabel truth) {
  PredictionRecord r;
  r.image_id = id;
  r.predicted = predicted;
  r.scores.p = {predicted == ClassLabel::NotReady ? 0.8 : 0.2,
                predicted == ClassLabel::NotReady ? 0.2 : 0.8};
  r.truth = truth;
  r.outcome = outcome_of(predicted, truth);
  return r;
}

}  // namespace testutil
