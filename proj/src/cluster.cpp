#include "reliscope/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "reliscope/util.hpp"

namespace reliscope {

using json = nlohmann::json;

std::vector<double> normalized_vector(const SaliencyMap& map) {
  std::vector<double> v(map.values.size(), 0.0);
  if (map.values.empty()) return v;
  float lo = map.values[0], hi = map.values[0];
  for (float x : map.values) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (hi > lo) {
    double span = static_cast<double>(hi) - static_cast<double>(lo);
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = (static_cast<double>(map.values[i]) - static_cast<double>(lo)) / span;
  }
  return v;
}

namespace {

struct Decomposition {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;          // rank x d, orthonormal rows, by variance
  std::vector<double> all_ratios;      // per retained direction, of total variance
};

// Mean-centered PCA via the Gram matrix when d > n, otherwise via thin SVD.
Decomposition decompose(const std::vector<SaliencyMap>& maps) {
  const std::size_t n = maps.size();
  const int h = maps[0].height, w = maps[0].width;
  for (const auto& m : maps)
    if (m.height != h || m.width != w)
      throw InvalidInputError("fit_pca: maps have mixed dimensions");
  const Eigen::Index d = static_cast<Eigen::Index>(h) * w;

  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), d);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v = normalized_vector(maps[i]);
    x.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::VectorXd>(v.data(), d).transpose();
  }
  Decomposition out;
  out.mean = x.colwise().mean();
  x.rowwise() -= out.mean.transpose();

  if (d > static_cast<Eigen::Index>(n)) {
    Eigen::MatrixXd gram = x * x.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    if (es.info() != Eigen::Success) throw NumericError("fit_pca: eigensolver failed");
    Eigen::VectorXd evals = es.eigenvalues();  // ascending
    double total = std::max(evals.sum(), 0.0);
    double lead = std::max(evals(evals.size() - 1), 0.0);
    std::vector<Eigen::Index> order;
    for (Eigen::Index i = evals.size() - 1; i >= 0; --i) {
      if (evals(i) <= std::max(1e-12 * lead, 1e-18)) break;  // numerical rank reached
      order.push_back(i);
    }
    out.components.resize(static_cast<Eigen::Index>(order.size()), d);
    out.all_ratios.reserve(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
      Eigen::Index i = order[r];
      Eigen::VectorXd dir = x.transpose() * es.eigenvectors().col(i);
      out.components.row(static_cast<Eigen::Index>(r)) = dir / std::sqrt(evals(i));
      out.all_ratios.push_back(total > 0.0 ? evals(i) / total : 0.0);
    }
  } else {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
    Eigen::VectorXd sv = svd.singularValues();
    double total = sv.squaredNorm();
    double lead = sv.size() > 0 ? sv(0) : 0.0;
    Eigen::Index rank = 0;
    while (rank < sv.size() && sv(rank) > std::max(1e-6 * lead, 1e-12)) ++rank;
    out.components = svd.matrixV().leftCols(rank).transpose();
    out.all_ratios.reserve(static_cast<std::size_t>(rank));
    for (Eigen::Index i = 0; i < rank; ++i)
      out.all_ratios.push_back(total > 0.0 ? sv(i) * sv(i) / total : 0.0);
  }
  return out;
}

PcaBasis slice_basis(const Decomposition& dec, int dim) {
  if (dim > dec.components.rows())
    throw InsufficientSamplesError(
        "fit_pca: requested dimension " + std::to_string(dim) + " exceeds data rank " +
        std::to_string(dec.components.rows()));
  PcaBasis basis;
  basis.input_dim = static_cast<int>(dec.mean.size());
  basis.dim = dim;
  basis.mean = dec.mean.unaryExpr([](double v) { return quantize_f32(v); });
  basis.components = dec.components.topRows(dim).unaryExpr([](double v) {
    return quantize_f32(v);
  });
  basis.explained_variance_ratios.assign(dec.all_ratios.begin(), dec.all_ratios.begin() + dim);
  return basis;
}

}  // namespace

PcaBasis fit_pca(const std::vector<SaliencyMap>& maps, int dim) {
  if (dim < 1) throw InvalidInputError("fit_pca: dim must be >= 1");
  if (maps.size() < static_cast<std::size_t>(dim) + 1)
    throw InsufficientSamplesError("fit_pca: need at least dim+1 maps, got " +
                                   std::to_string(maps.size()));
  return slice_basis(decompose(maps), dim);
}

PcaBasis fit_pca_variance(const std::vector<SaliencyMap>& maps, double target) {
  if (target <= 0.0 || target > 1.0)
    throw InvalidInputError("fit_pca_variance: target must be in (0,1]");
  if (maps.size() < 2)
    throw InsufficientSamplesError("fit_pca_variance: need at least 2 maps");
  Decomposition dec = decompose(maps);
  double cum = 0.0;
  int dim = static_cast<int>(dec.all_ratios.size());
  for (std::size_t i = 0; i < dec.all_ratios.size(); ++i) {
    cum += dec.all_ratios[i];
    if (cum >= target - 1e-12) {
      dim = static_cast<int>(i) + 1;
      break;
    }
  }
  return slice_basis(dec, dim);
}

Embedding project(const PcaBasis& basis, const SaliencyMap& map) {
  std::vector<double> v = normalized_vector(map);
  if (static_cast<int>(v.size()) != basis.input_dim)
    throw InvalidInputError("project: map size " + std::to_string(v.size()) +
                            " does not match basis input dimension " +
                            std::to_string(basis.input_dim));
  Eigen::Map<const Eigen::VectorXd> vv(v.data(), basis.input_dim);
  Embedding e;
  e.image_id = map.image_id;
  e.vector = basis.components * (vv - basis.mean);
  return e;
}

double rms_pairwise_distance(const std::vector<Eigen::VectorXd>& points) {
  const std::size_t n = points.size();
  if (n < 2) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) sum += (points[i] - points[j]).squaredNorm();
  return std::sqrt(sum / (static_cast<double>(n) * (n - 1) / 2.0));
}

Eigen::MatrixXd affinity(const std::vector<Eigen::VectorXd>& points, double sigma) {
  if (sigma <= 0.0) throw InvalidInputError("affinity: sigma must be positive");
  const Eigen::Index n = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd a(n, n);
  double inv = 1.0 / (2.0 * sigma * sigma);
  for (Eigen::Index i = 0; i < n; ++i) {
    a(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double d2 = (points[static_cast<std::size_t>(i)] - points[static_cast<std::size_t>(j)])
                      .squaredNorm();
      double s = std::exp(-d2 * inv);
      a(i, j) = s;
      a(j, i) = s;
    }
  }
  return a;
}

KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iterations,
                    int restarts) {
  const Eigen::Index n = points.rows();
  const Eigen::Index d = points.cols();
  if (k < 1) throw InvalidInputError("kmeans: k must be >= 1");
  if (n < k)
    throw InsufficientSamplesError("kmeans: fewer points than clusters");

  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();

  for (int restart = 0; restart < restarts; ++restart) {
    Rng rng(derive_seed(seed, "kmeans/restart/" + std::to_string(restart)));

    // k-means++ seeding.
    Eigen::MatrixXd centers(k, d);
    std::vector<double> dist2(static_cast<std::size_t>(n),
                              std::numeric_limits<double>::infinity());
    Eigen::Index first = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::size_t>(n)));
    centers.row(0) = points.row(first);
    for (int c = 1; c < k; ++c) {
      double total = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        double d2 = (points.row(i) - centers.row(c - 1)).squaredNorm();
        if (d2 < dist2[static_cast<std::size_t>(i)]) dist2[static_cast<std::size_t>(i)] = d2;
        total += dist2[static_cast<std::size_t>(i)];
      }
      Eigen::Index chosen;
      if (total <= 0.0) {
        chosen = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::size_t>(n)));
      } else {
        double u = rng.uniform() * total;
        double cum = 0.0;
        chosen = n - 1;
        for (Eigen::Index i = 0; i < n; ++i) {
          cum += dist2[static_cast<std::size_t>(i)];
          if (u < cum) {
            chosen = i;
            break;
          }
        }
      }
      centers.row(c) = points.row(chosen);
    }

    std::vector<int> labels(static_cast<std::size_t>(n), -1);
    for (int iter = 0; iter < max_iterations; ++iter) {
      bool changed = false;
      for (Eigen::Index i = 0; i < n; ++i) {
        int bestc = 0;
        double bestd = (points.row(i) - centers.row(0)).squaredNorm();
        for (int c = 1; c < k; ++c) {
          double d2 = (points.row(i) - centers.row(c)).squaredNorm();
          if (d2 < bestd) {
            bestd = d2;
            bestc = c;
          }
        }
        if (labels[static_cast<std::size_t>(i)] != bestc) {
          labels[static_cast<std::size_t>(i)] = bestc;
          changed = true;
        }
      }
      if (!changed && iter > 0) break;

      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, d);
      std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
      for (Eigen::Index i = 0; i < n; ++i) {
        sums.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
        ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
      }
      for (int c = 0; c < k; ++c) {
        if (counts[static_cast<std::size_t>(c)] > 0) {
          centers.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        } else {
          // Re-seed an emptied cluster at the point farthest from its center.
          Eigen::Index far = 0;
          double fard = -1.0;
          for (Eigen::Index i = 0; i < n; ++i) {
            double d2 = (points.row(i) - centers.row(labels[static_cast<std::size_t>(i)]))
                            .squaredNorm();
            if (d2 > fard) {
              fard = d2;
              far = i;
            }
          }
          centers.row(c) = points.row(far);
        }
      }
    }

    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      inertia += (points.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
    if (inertia < best.inertia) {
      best.inertia = inertia;
      best.labels = labels;
      best.centers = centers;
    }
  }
  return best;
}

SpectralEmbedding spectral_embedding(const Eigen::MatrixXd& a, int q) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n) throw InvalidInputError("spectral: affinity matrix must be square");
  if (q < 2) throw InvalidInputError("spectral: q must be >= 2");
  if (n < q) throw InsufficientSamplesError("spectral: fewer samples than clusters");

  Eigen::VectorXd degree = a.rowwise().sum();
  for (Eigen::Index i = 0; i < n; ++i)
    if (degree(i) <= 1e-12)
      throw IsolatedSampleError("spectral: sample " + std::to_string(i) +
                                " has zero affinity degree");
  Eigen::VectorXd dinv = degree.array().rsqrt().matrix();

  Eigen::MatrixXd lap(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      lap(i, j) = (i == j ? 1.0 : 0.0) - dinv(i) * a(i, j) * dinv(j);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(lap);
  if (es.info() != Eigen::Success) throw NumericError("spectral: eigensolver failed");

  SpectralEmbedding out;
  out.eigenvalues = es.eigenvalues().head(q);
  out.eigenvectors = es.eigenvectors().leftCols(q);
  out.rows = out.eigenvectors;
  for (Eigen::Index i = 0; i < n; ++i) {
    double norm = out.rows.row(i).norm();
    if (norm > 0.0) out.rows.row(i) /= norm;
  }
  return out;
}

std::vector<int> spectral_cluster(const Eigen::MatrixXd& a, int q, std::uint64_t seed) {
  SpectralEmbedding emb = spectral_embedding(a, q);
  KMeansResult km = kmeans(emb.rows, q, seed);
  std::vector<int> labels(km.labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = km.labels[i] + 1;
  return labels;
}

ClusterModel fit_cluster_model(const std::vector<SaliencyMap>& maps,
                               const ClusterOptions& options) {
  ClusterModel model;
  model.q = options.q;
  model.sigma = options.sigma;
  model.kmeans_seed = derive_seed(options.seed, "cluster/kmeans");

  model.basis = options.variance_target ? fit_pca_variance(maps, *options.variance_target)
                                        : fit_pca(maps, options.dim);

  model.train_embeddings.reserve(maps.size());
  for (const auto& m : maps) {
    if (m.image_id.empty())
      throw InvalidInputError("fit_cluster_model: every map needs an image id");
    Embedding e = project(model.basis, m);
    e.vector = e.vector.unaryExpr([](double v) { return quantize_f32(v); });
    model.train_embeddings.push_back(std::move(e));
  }

  std::vector<Eigen::VectorXd> vectors;
  vectors.reserve(model.train_embeddings.size());
  for (const auto& e : model.train_embeddings) vectors.push_back(e.vector);
  double scale = rms_pairwise_distance(vectors);
  model.scale = quantize_f32(scale > 0.0 ? scale : 1.0);
  for (auto& v : vectors) v /= model.scale;

  Eigen::MatrixXd a = affinity(vectors, model.sigma);
  std::vector<int> labels = spectral_cluster(a, model.q, model.kmeans_seed);
  for (std::size_t i = 0; i < maps.size(); ++i)
    model.assignments[model.train_embeddings[i].image_id] = labels[i];
  return model;
}

int assign_knn(const ClusterModel& model, const Embedding& query, int k) {
  const std::size_t n = model.train_embeddings.size();
  if (k < 1) throw InvalidInputError("assign_knn: k must be >= 1");
  if (static_cast<std::size_t>(k) > n)
    throw InsufficientDataError("assign_knn: k exceeds the number of training embeddings");

  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t i = 0; i < n; ++i)
    dist[i] = {(model.train_embeddings[i].vector - query.vector).norm(), i};
  std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

  std::map<int, std::pair<int, double>> votes;  // cluster -> (count, distance sum)
  for (int i = 0; i < k; ++i) {
    const Embedding& e = model.train_embeddings[dist[static_cast<std::size_t>(i)].second];
    auto it = model.assignments.find(e.image_id);
    if (it == model.assignments.end())
      throw InvalidInputError("assign_knn: training embedding '" + e.image_id +
                              "' has no assignment");
    auto& v = votes[it->second];
    v.first += 1;
    v.second += dist[static_cast<std::size_t>(i)].first;
  }

  int best_cluster = -1;
  int best_count = -1;
  double best_mean = std::numeric_limits<double>::infinity();
  for (const auto& [cluster, v] : votes) {
    double mean = v.second / v.first;
    if (v.first > best_count || (v.first == best_count && mean < best_mean) ||
        (v.first == best_count && mean == best_mean && cluster < best_cluster)) {
      best_cluster = cluster;
      best_count = v.first;
      best_mean = mean;
    }
  }
  return best_cluster;
}

namespace {

constexpr std::uint16_t kClusterModelVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_cluster_model(const ClusterModel& model, const std::filesystem::path& path) {
  json header;
  header["q"] = model.q;
  header["sigma"] = model.sigma;
  header["scale"] = model.scale;
  header["kmeans_seed"] = model.kmeans_seed;
  header["dim"] = model.basis.dim;
  header["input_dim"] = model.basis.input_dim;
  header["explained_variance_ratios"] = model.basis.explained_variance_ratios;
  json ids = json::array();
  json assignments = json::object();
  for (const auto& e : model.train_embeddings) {
    ids.push_back(e.image_id);
    auto it = model.assignments.find(e.image_id);
    if (it == model.assignments.end())
      throw InvalidInputError("save_cluster_model: embedding '" + e.image_id +
                              "' has no assignment");
    assignments[e.image_id] = it->second;
  }
  header["image_ids"] = ids;
  header["assignments"] = assignments;
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot write cluster model '" + path.string() + "'");
  out.write("RSCM", 4);
  unsigned char ver[2] = {kClusterModelVersion & 0xff, kClusterModelVersion >> 8};
  out.write(reinterpret_cast<const char*>(ver), 2);
  write_u32(out, static_cast<std::uint32_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));

  write_f32(out, model.basis.mean.data(), static_cast<std::size_t>(model.basis.mean.size()));
  // Components row-major.
  for (Eigen::Index r = 0; r < model.basis.components.rows(); ++r) {
    Eigen::VectorXd row = model.basis.components.row(r);
    write_f32(out, row.data(), static_cast<std::size_t>(row.size()));
  }
  for (const auto& e : model.train_embeddings)
    write_f32(out, e.vector.data(), static_cast<std::size_t>(e.vector.size()));
  if (!out) throw Error("cluster model write failed for '" + path.string() + "'");
}

ClusterModel load_cluster_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInputError("cannot open cluster model '" + path.string() + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RSCM", 4) != 0)
    throw InvalidInputError("'" + path.string() + "' is not a cluster model file");
  unsigned char ver[2];
  in.read(reinterpret_cast<char*>(ver), 2);
  if (!in) throw InvalidInputError("truncated cluster model: missing version");
  std::uint16_t version = static_cast<std::uint16_t>(ver[0] | (ver[1] << 8));
  if (version != kClusterModelVersion)
    throw InvalidInputError("unsupported cluster model version " + std::to_string(version));
  std::uint32_t len = read_u32(in);
  if (!in) throw InvalidInputError("truncated cluster model: missing header length");
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  if (!in) throw InvalidInputError("truncated cluster model: header ends early");

  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw InvalidInputError(std::string("malformed cluster model header: ") + e.what());
  }

  ClusterModel model;
  model.q = header.at("q").get<int>();
  model.sigma = header.at("sigma").get<double>();
  model.scale = header.at("scale").get<double>();
  model.kmeans_seed = header.at("kmeans_seed").get<std::uint64_t>();
  model.basis.dim = header.at("dim").get<int>();
  model.basis.input_dim = header.at("input_dim").get<int>();
  model.basis.explained_variance_ratios =
      header.at("explained_variance_ratios").get<std::vector<double>>();

  std::vector<std::string> ids = header.at("image_ids").get<std::vector<std::string>>();
  for (const auto& [id, cluster] : header.at("assignments").items())
    model.assignments[id] = cluster.get<int>();

  model.basis.mean.resize(model.basis.input_dim);
  if (!read_f32(in, model.basis.mean.data(), static_cast<std::size_t>(model.basis.input_dim)))
    throw InvalidInputError("truncated cluster model: mean block ends early");
  model.basis.components.resize(model.basis.dim, model.basis.input_dim);
  std::vector<double> row(static_cast<std::size_t>(model.basis.input_dim));
  for (int r = 0; r < model.basis.dim; ++r) {
    if (!read_f32(in, row.data(), row.size()))
      throw InvalidInputError("truncated cluster model: component block ends early");
    model.basis.components.row(r) = Eigen::Map<const Eigen::VectorXd>(
        row.data(), model.basis.input_dim);
  }
  model.train_embeddings.reserve(ids.size());
  std::vector<double> emb(static_cast<std::size_t>(model.basis.dim));
  for (const auto& id : ids) {
    if (!read_f32(in, emb.data(), emb.size()))
      throw InvalidInputError("truncated cluster model: embedding block ends early");
    Embedding e;
    e.image_id = id;
    e.vector = Eigen::Map<const Eigen::VectorXd>(emb.data(), model.basis.dim);
    model.train_embeddings.push_back(std::move(e));
  }
  return model;
}

}  // namespace reliscope
