#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "reliscope/core.hpp"

namespace reliscope {

// Maps are min-max scaled to [0,1] per map before vectorization (constant
// maps become all zeros), removing score magnitude as a clustering cue.
std::vector<double> normalized_vector(const SaliencyMap& map);

// Mean-centered PCA. components is dim x input_dim with orthonormal rows
// ordered by decreasing variance. All stored values live on the f32 grid so
// the .cmodel format round-trips exactly.
struct PcaBasis {
  int input_dim = 0;
  int dim = 0;
  Eigen::VectorXd mean;        // input_dim
  Eigen::MatrixXd components;  // dim x input_dim
  std::vector<double> explained_variance_ratios;
};

// Requires at least dim+1 maps of identical dimensions.
PcaBasis fit_pca(const std::vector<SaliencyMap>& maps, int dim);

// Smallest dimension whose cumulative explained variance reaches target.
PcaBasis fit_pca_variance(const std::vector<SaliencyMap>& maps, double target);

struct Embedding {
  std::string image_id;
  Eigen::VectorXd vector;
};

// components * (normalized_vector(map) - mean).
Embedding project(const PcaBasis& basis, const SaliencyMap& map);

// Root-mean-square pairwise Euclidean distance; the scale that makes the
// kernel width comparable across datasets.
double rms_pairwise_distance(const std::vector<Eigen::VectorXd>& points);

// A(i,j) = exp(-|x_i - x_j|^2 / (2 sigma^2)), unit diagonal, exactly
// symmetric. Inputs are expected to be standardized already.
Eigen::MatrixXd affinity(const std::vector<Eigen::VectorXd>& points, double sigma);

struct KMeansResult {
  std::vector<int> labels;  // 0-based center indices
  Eigen::MatrixXd centers;  // k x d
  double inertia = 0.0;
};

// k-means++ seeding, best of `restarts` runs by inertia, deterministic
// given seed. Emptied clusters are re-seeded at the farthest point.
KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed,
                    int max_iterations = 300, int restarts = 10);

struct SpectralEmbedding {
  Eigen::VectorXd eigenvalues;   // q smallest, ascending
  Eigen::MatrixXd eigenvectors;  // n x q, unnormalized rows
  Eigen::MatrixXd rows;          // n x q, rows scaled to unit length
};

// Symmetric normalized Laplacian L = I - D^-1/2 A D^-1/2; eigenvectors of
// the q smallest eigenvalues. Throws IsolatedSampleError on zero-degree
// nodes.
SpectralEmbedding spectral_embedding(const Eigen::MatrixXd& affinity, int q);

// Full procedure: spectral embedding rows clustered with k-means.
// Labels are 1..q.
std::vector<int> spectral_cluster(const Eigen::MatrixXd& affinity, int q, std::uint64_t seed);

struct ClusterOptions {
  int dim = 50;
  std::optional<double> variance_target;  // overrides dim when set
  int q = 8;
  double sigma = 0.2;
  std::uint64_t seed = 0;
};

// PCA basis, projected validation embeddings, their cluster assignments,
// and the distance scale; everything needed to score unseen maps later.
struct ClusterModel {
  PcaBasis basis;
  int q = 8;
  double sigma = 0.2;
  double scale = 1.0;  // rms pairwise distance of the fit embeddings
  std::uint64_t kmeans_seed = 0;
  std::vector<Embedding> train_embeddings;
  std::map<std::string, int> assignments;  // image id -> 1..q
};

ClusterModel fit_cluster_model(const std::vector<SaliencyMap>& maps, const ClusterOptions& options);

// Majority cluster among the k nearest training embeddings (Euclidean).
// Ties break toward the smaller mean distance, then the smaller id.
int assign_knn(const ClusterModel& model, const Embedding& query, int k = 5);

// Versioned container: magic "RSCM", u16 version, u32 JSON header length,
// JSON header (q, sigma, scale, seeds, dims, image ids, assignments), then
// f32 little-endian blocks for mean, components, and training embeddings.
void save_cluster_model(const ClusterModel& model, const std::filesystem::path& path);
ClusterModel load_cluster_model(const std::filesystem::path& path);

}  // namespace reliscope
