#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rcs/feature_store.hpp"

namespace rcs {

struct SvmOptions {
  double C = 1.0;
  /// Stop when the maximal KKT violation of the dual drops below this.
  double tolerance = 1e-6;
  /// Cap, in epochs of n working-pair updates.
  std::size_t max_epochs = 100000;
};

struct MarginResult {
  Eigen::VectorXd weight;
  double bias = 0.0;
  double margin = 0.0;  // 2 / ||w||
  /// Primal soft-margin objective at (w, b).
  double objective = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  /// Dual objective sampled every epoch; non-increasing under SMO.
  std::vector<double> dual_checkpoints;
};

/// Soft-margin linear SVM between the two classes (benign y=-1,
/// malicious y=+1), solved in the dual by two-coordinate descent on the
/// maximal violating pair. Non-convergence is reported, not thrown.
MarginResult svm_margin(const Eigen::MatrixXd& benign, const Eigen::MatrixXd& malicious,
                        const SvmOptions& options = {});

/// Mean silhouette over all samples with the two classes as clusters.
double silhouette_score(const Eigen::MatrixXd& benign, const Eigen::MatrixXd& malicious);

struct RatioResult {
  double inter = 0.0;
  double intra_benign = 0.0;
  double intra_malicious = 0.0;
  double ratio = 0.0;
  bool degenerate_intra = false;
};

RatioResult discriminative_ratio(const Eigen::MatrixXd& benign, const Eigen::MatrixXd& malicious);

struct LayerMetrics {
  int layer = 0;
  double gamma = 0.0;
  double silhouette = 0.0;
  double ratio = 0.0;
};

struct LayerScore {
  LayerMetrics raw;
  double gamma_tilde = 0.0, sil_tilde = 0.0, ratio_tilde = 0.0;
  double gamma_hat = 0.0, sil_hat = 0.0, ratio_hat = 0.0;
  double composite = 0.0;
};

struct LayerScoreReport {
  std::vector<LayerScore> layers;  // ascending layer index
  std::vector<int> ranking;        // descending composite, ties -> lower layer
  bool gamma_flat = false, sil_flat = false, ratio_flat = false;

  std::string to_json(const std::string& config_json = "{}") const;
  std::string to_csv() const;
};

/// Type-7 (linear interpolation) sample quantile, q in [0,1].
double quantile_type7(std::vector<double> values, double q);

/// Median/IQR normalization, sigmoid(2x) mapping, equal-weight mean.
LayerScoreReport composite_layer_scores(const std::vector<LayerMetrics>& raw);

struct ProbeOptions {
  SvmOptions svm;
  bool normalize = false;
};

/// All three metrics for one layer's benign/malicious representations.
LayerMetrics probe_layer(int layer, const FeatureSet& features, const ProbeOptions& options = {});

}  // namespace rcs
