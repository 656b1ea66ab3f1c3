#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rcs/feature_store.hpp"

namespace rcs {

/// Gaussian fitted to one dataset (or k-means group) in the projected space.
struct GaussianCluster {
  std::uint32_t id = 0;
  std::size_t count = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;  // shrunk estimate
  double shrinkage = 0.0;      // lambda in [0,1]
  Eigen::MatrixXd chol;        // lower factor of covariance + jitter * I
  double jitter = 0.0;
};

struct ClusterFitOptions {
  /// Replaces the Ledoit-Wolf intensity when set.
  std::optional<double> forced_shrinkage;
};

/// Ledoit-Wolf optimal intensity toward (tr(S)/d) I, estimated with the
/// 1/n moment convention and clipped to [0,1].
double ledoit_wolf_intensity(const Eigen::MatrixXd& samples);

/// (1 - lambda) S + lambda (tr(S)/d) I.
Eigen::MatrixXd shrink_covariance(const Eigen::MatrixXd& sample_cov, double lambda);

/// Unbiased (1/(n-1)) sample covariance of the rows.
Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& samples);

GaussianCluster fit_gaussian_cluster(const Eigen::MatrixXd& samples, std::uint32_t id,
                                     const ClusterFitOptions& options = {});

/// Cluster from known parameters; the jitter ladder applies if the
/// covariance is singular.
GaussianCluster make_cluster(const Eigen::VectorXd& mean, const Eigen::MatrixXd& covariance, std::uint32_t id);

double mahalanobis_distance(const Eigen::Ref<const Eigen::VectorXd>& z, const GaussianCluster& cluster);

struct ClusterBank {
  std::vector<GaussianCluster> benign;
  std::vector<GaussianCluster> malicious;
};

/// min benign D_M - min malicious D_M; positive leans malicious.
double mcd_score(const Eigen::Ref<const Eigen::VectorXd>& z, const ClusterBank& bank);

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class KcdMode { Pooled, PerDataset };

/// Unit-norm reference vectors per class for k-th neighbour scoring.
struct NeighborBank {
  RowMatrix benign;
  RowMatrix malicious;
  std::vector<std::uint32_t> benign_groups;     // dataset id per row
  std::vector<std::uint32_t> malicious_groups;
  std::size_t k = 50;
  KcdMode mode = KcdMode::Pooled;
};

/// Builds a bank from a feature set, l2-normalizing every vector.
NeighborBank make_neighbor_bank(const FeatureSet& set, std::size_t k, KcdMode mode = KcdMode::Pooled);

/// Distance from `z` to its k-th nearest row of `bank` (1-based k). Exact
/// scan with a bounded max-heap ordered by (distance, row index).
double kth_neighbor_distance(const Eigen::Ref<const Eigen::VectorXd>& z, const RowMatrix& bank, std::size_t k);

/// ||z - z_(k)^benign|| - ||z - z_(k)^malicious|| with z = z_raw/||z_raw||.
double kcd_score(const Eigen::Ref<const Eigen::VectorXd>& z_raw, const NeighborBank& bank);

enum class OneClassMethod { Mahalanobis, Knn };

/// Benign-only anomaly score; higher is more anomalous.
double one_class_mahalanobis(const Eigen::Ref<const Eigen::VectorXd>& z, const ClusterBank& bank);
double one_class_knn(const Eigen::Ref<const Eigen::VectorXd>& z_raw, const NeighborBank& bank, std::size_t k);

struct KMeansResult {
  std::vector<std::vector<std::size_t>> groups;  // ordered by smallest member
  Eigen::MatrixXd centroids;                      // one row per group
  std::size_t iterations = 0;
  std::size_t reseeded = 0;
};

/// Lloyd iterations from k-means++ seeding; at most 300 rounds.
KMeansResult kmeans_partition(const Eigen::MatrixXd& samples, std::size_t k, std::uint64_t seed);

enum class Variant { Mcd, Kcd, OneClassMahal, OneClassKnn };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

enum class ClusterStrategy { DatasetPerCluster, KMeans };

struct DetectorOptions {
  Variant variant = Variant::Mcd;
  std::size_t k = 50;
  bool normalize = true;  // l2-normalize projected features before fitting/scoring
  KcdMode kcd_mode = KcdMode::Pooled;
  ClusterStrategy strategy = ClusterStrategy::DatasetPerCluster;
  std::size_t benign_clusters = 8;
  std::size_t malicious_clusters = 1;
  std::uint64_t seed = 0;
};

/// Fitted detector: one of the four scoring rules with its reference data.
struct Detector {
  DetectorOptions options;
  ClusterBank clusters;
  NeighborBank neighbors;
  std::size_t dim = 0;
  std::size_t skipped_groups = 0;  // k-means groups too small to fit

  double score(const Eigen::Ref<const Eigen::VectorXd>& z) const;
  std::vector<double> score_all(const Eigen::MatrixXd& rows) const;
};

/// Fits the reference structures from (already projected) training features.
Detector fit_detector(const FeatureSet& train, const DetectorOptions& options);

/// Detector bundle: JSON with clusters (mean, lower-triangular chol rows,
/// lambda, counts) and, for kNN variants, an RCSF1 neighbour bank file.
void save_detector_bundle(const Detector& detector, const std::filesystem::path& json_path,
                          const std::string& projection_path = "");
Detector load_detector_bundle(const std::filesystem::path& json_path, std::string* projection_path = nullptr);

}  // namespace rcs
