#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rcs/calibration_eval.hpp"
#include "rcs/detectors.hpp"
#include "rcs/feature_store.hpp"
#include "rcs/random.hpp"

namespace rcs {

/// One Gaussian component x = mean + factor * u, u ~ N(0, I_r).
struct MixtureCluster {
  Eigen::VectorXd mean;
  Eigen::MatrixXd factor;  // d x r, covariance = factor * factor^T
  std::size_t count = 0;
  Label label = Label::Benign;
  std::uint32_t dataset_id = 0;
};

struct MixtureSpec {
  std::size_t dim = 0;
  std::vector<MixtureCluster> clusters;
  std::uint64_t seed = 0;
};

/// Throws InvalidSpec.
void validate(const MixtureSpec& spec);
/// Numerical rank of a factor (singular values above 1e-9 * max(1, s_max)).
std::size_t effective_rank(const Eigen::MatrixXd& factor);

std::string spec_to_json(const MixtureSpec& spec);
MixtureSpec spec_from_json(const std::string& text);

/// Deterministic in the spec (seed included); cluster c draws from stream c.
FeatureSet generate_mixture(const MixtureSpec& spec);

/// n double-precision draws from one component.
Eigen::MatrixXd sample_cluster(const MixtureCluster& cluster, std::size_t n, Rng& rng);

/// Clusters built from the true parameters. `jittered` is set when some
/// covariance needed the jitter ladder to factor.
struct OracleBank {
  ClusterBank bank;
  bool jittered = false;
};
OracleBank oracle_bank(const MixtureSpec& spec);

/// min benign D_M - min malicious D_M under the true parameters.
double oracle_mcd_score(const Eigen::Ref<const Eigen::VectorXd>& z, const OracleBank& oracle);
double oracle_mcd_score(const Eigen::Ref<const Eigen::VectorXd>& z, const MixtureSpec& spec);

struct SampleComplexityPoint {
  std::size_t n = 0;
  double median_err = 0.0;
  double p90_err = 0.0;
  std::vector<double> exceed;  // fraction of errors above each epsilon
};

struct SampleComplexityResult {
  std::vector<SampleComplexityPoint> points;
  std::size_t trials = 0;
  std::size_t probe_count = 0;
  std::vector<double> epsilon_grid;
  bool jittered = false;

  std::string to_json() const;
  std::string to_csv() const;
};

/// For each n in the sweep and each trial, refits every malicious cluster
/// from n fresh draws (benign side keeps its true parameters) and records
/// |s - s*| at probes inside the unit Mahalanobis ball of a malicious
/// cluster. Trial t uses stream (seed, t) and sample size n its own child
/// stream, whatever the schedule or the rest of the sweep.
SampleComplexityResult run_sample_complexity(const MixtureSpec& spec, const std::vector<std::size_t>& n_sweep,
                                             std::size_t trials, std::size_t probe_count);

/// Full scan and sort; same (distance, row) ordering as the detector heap.
double brute_force_knn_distance(const Eigen::Ref<const Eigen::VectorXd>& z, const Eigen::MatrixXd& bank,
                                std::size_t k);

/// Literal double loop over positive/negative pairs.
double pairwise_auroc(const ScoreSet& set);

// Reference worlds used by the acceptance suite, benchmarks and synth-bench.

struct ReferenceWorldOptions {
  std::size_t dim = 64;
  double offset = 10.0;      // shared shift along e0 so vectors stay away from the origin
  double benign_spread = 3.0;
  double separation = 4.0;   // benign to matching malicious centroid, in sigma
  std::size_t train_per_cluster = 400;
  std::size_t test_per_cluster = 200;
  std::size_t unseen_count = 250;
  double unseen_shift = 6.0;
};

struct ReferenceWorld {
  FeatureSet train;
  FeatureSet test;
  FeatureSet unseen;  // benign cluster absent from training
  MixtureSpec train_spec;
};

/// Three benign datasets and two malicious clusters with identity covariance.
ReferenceWorld make_reference_world(std::uint64_t seed, const ReferenceWorldOptions& options = {});

/// Concatenation of two sets over the same dimension; catalogs merged.
FeatureSet concat(const FeatureSet& a, const FeatureSet& b);

struct ProbeWorldOptions {
  std::vector<int> layers{8, 12, 16, 20, 24};
  int planted_layer = 16;
  std::size_t dim = 64;
  std::size_t per_class = 40;
  double planted_separation = 5.0;
  double other_min = 1.0;
  double other_max = 2.5;
};

/// Per-layer feature sets: benign N(0, I), malicious N(delta_l * u, I) for a
/// random unit u; the planted layer carries the largest delta.
std::vector<std::pair<int, FeatureSet>> make_probe_world(std::uint64_t seed, const ProbeWorldOptions& options = {});

/// Benign N(0, I_d) and one malicious cluster with rank-r factor at distance
/// `separation` from the benign mean.
MixtureSpec sample_complexity_spec(std::size_t rank, std::uint64_t seed, std::size_t dim = 16,
                                   double separation = 4.0);

}  // namespace rcs
