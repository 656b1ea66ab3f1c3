#include "rcs/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <queue>

#include "rcs/errors.hpp"
#include "rcs/random.hpp"

namespace rcs {
namespace {

constexpr double kJitterStart = 1e-8;
constexpr double kJitterStop = 1e-2;

void require_dim(Eigen::Index got, Eigen::Index want) {
  if (got != want) {
    fail(ErrorCode::DimensionMismatch, "expected dimension " + std::to_string(want) + ", got " + std::to_string(got));
  }
}

bool try_factor(const Eigen::MatrixXd& cov, double jitter, Eigen::MatrixXd& chol) {
  Eigen::MatrixXd a = cov;
  if (jitter > 0) a.diagonal().array() += jitter;
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) return false;
  chol = llt.matrixL();
  const auto diag = chol.diagonal();
  return diag.allFinite() && (diag.array() > 0.0).all();
}

void factorize(GaussianCluster& c) {
  if (try_factor(c.covariance, 0.0, c.chol)) {
    c.jitter = 0.0;
    return;
  }
  for (double jitter = kJitterStart; jitter <= kJitterStop * 1.0000001; jitter *= 10.0) {
    if (try_factor(c.covariance, jitter, c.chol)) {
      c.jitter = jitter;
      return;
    }
  }
  fail(ErrorCode::FactorizationFailure, "covariance of cluster " + std::to_string(c.id) +
                                            " is not positive definite even with jitter 1e-2");
}

Eigen::VectorXd unit(const Eigen::Ref<const Eigen::VectorXd>& z) {
  const double norm = z.norm();
  if (norm < 1e-12) fail(ErrorCode::ZeroVector, "cannot normalize a zero query vector");
  return z / norm;
}

double min_distance(const Eigen::Ref<const Eigen::VectorXd>& z, const std::vector<GaussianCluster>& clusters) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : clusters) best = std::min(best, mahalanobis_distance(z, c));
  return best;
}

/// k-th neighbour distance, optionally as the minimum over contiguous groups.
double bank_distance(const Eigen::Ref<const Eigen::VectorXd>& z, const RowMatrix& rows,
                     const std::vector<std::uint32_t>& groups, std::size_t k, KcdMode mode) {
  if (mode == KcdMode::Pooled || groups.empty()) return kth_neighbor_distance(z, rows, k);
  double best = std::numeric_limits<double>::infinity();
  std::size_t start = 0;
  while (start < groups.size()) {
    std::size_t stop = start;
    while (stop < groups.size() && groups[stop] == groups[start]) ++stop;
    const RowMatrix block = rows.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(stop - start));
    best = std::min(best, kth_neighbor_distance(z, block, k));
    start = stop;
  }
  return best;
}

}  // namespace

Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& samples) {
  if (samples.rows() < 2) fail(ErrorCode::TooFewSamples, "covariance needs at least two samples");
  const Eigen::MatrixXd centered = samples.rowwise() - samples.colwise().mean();
  return centered.transpose() * centered / static_cast<double>(samples.rows() - 1);
}

double ledoit_wolf_intensity(const Eigen::MatrixXd& samples) {
  const Eigen::Index n = samples.rows(), d = samples.cols();
  if (n < 2) fail(ErrorCode::TooFewSamples, "shrinkage needs at least two samples");
  const Eigen::MatrixXd x = samples.rowwise() - samples.colwise().mean();
  const Eigen::MatrixXd s = x.transpose() * x / static_cast<double>(n);
  const double mu = s.trace() / static_cast<double>(d);
  Eigen::MatrixXd target_gap = s;
  target_gap.diagonal().array() -= mu;
  const double delta = target_gap.squaredNorm() / static_cast<double>(d);
  // sum_t ||x_t x_t^T - S||_F^2 = sum_t ||x_t||^4 - n ||S||_F^2
  const double fourth = x.rowwise().squaredNorm().array().square().sum();
  const double beta_bar =
      std::max(0.0, fourth - static_cast<double>(n) * s.squaredNorm()) /
      (static_cast<double>(n) * static_cast<double>(n) * static_cast<double>(d));
  if (!(delta > 0.0)) return 0.0;
  return std::clamp(std::min(beta_bar, delta) / delta, 0.0, 1.0);
}

Eigen::MatrixXd shrink_covariance(const Eigen::MatrixXd& sample_cov, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorCode::InvalidArgument, "shrinkage must lie in [0,1]");
  const double scale = sample_cov.trace() / static_cast<double>(sample_cov.rows());
  Eigen::MatrixXd out = (1.0 - lambda) * sample_cov;
  out.diagonal().array() += lambda * scale;
  return out;
}

GaussianCluster fit_gaussian_cluster(const Eigen::MatrixXd& samples, std::uint32_t id,
                                     const ClusterFitOptions& options) {
  if (samples.rows() < 2) {
    fail(ErrorCode::TooFewSamples, "cluster " + std::to_string(id) + " needs at least two samples");
  }
  GaussianCluster c;
  c.id = id;
  c.count = static_cast<std::size_t>(samples.rows());
  c.mean = samples.colwise().mean().transpose();
  c.shrinkage = options.forced_shrinkage ? *options.forced_shrinkage : ledoit_wolf_intensity(samples);
  c.covariance = shrink_covariance(sample_covariance(samples), c.shrinkage);
  factorize(c);
  return c;
}

GaussianCluster make_cluster(const Eigen::VectorXd& mean, const Eigen::MatrixXd& covariance, std::uint32_t id) {
  if (covariance.rows() != mean.size() || covariance.cols() != mean.size()) {
    fail(ErrorCode::DimensionMismatch, "covariance shape does not match mean");
  }
  GaussianCluster c;
  c.id = id;
  c.mean = mean;
  c.covariance = 0.5 * (covariance + covariance.transpose());
  factorize(c);
  return c;
}

double mahalanobis_distance(const Eigen::Ref<const Eigen::VectorXd>& z, const GaussianCluster& cluster) {
  require_dim(z.size(), cluster.mean.size());
  const Eigen::VectorXd y = cluster.chol.triangularView<Eigen::Lower>().solve(z - cluster.mean);
  return y.norm();
}

double mcd_score(const Eigen::Ref<const Eigen::VectorXd>& z, const ClusterBank& bank) {
  if (bank.benign.empty() || bank.malicious.empty()) {
    fail(ErrorCode::EmptyBank, "contrastive scoring needs benign and malicious clusters");
  }
  return min_distance(z, bank.benign) - min_distance(z, bank.malicious);
}

double kth_neighbor_distance(const Eigen::Ref<const Eigen::VectorXd>& z, const RowMatrix& bank, std::size_t k) {
  if (k == 0 || k > static_cast<std::size_t>(bank.rows())) {
    fail(ErrorCode::KTooLarge, "k=" + std::to_string(k) + " but bank holds " + std::to_string(bank.rows()) + " rows");
  }
  require_dim(z.size(), bank.cols());
  using Entry = std::pair<double, Eigen::Index>;  // (squared distance, row)
  std::priority_queue<Entry> heap;                // max-heap: worst kept neighbour on top
  const Eigen::Index d = bank.cols();
  const double* q = z.data();
  for (Eigen::Index r = 0; r < bank.rows(); ++r) {
    const double* row = bank.data() + r * d;
    double sq = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double diff = q[j] - row[j];
      sq += diff * diff;
    }
    const Entry e{sq, r};
    if (heap.size() < k) {
      heap.push(e);
    } else if (e < heap.top()) {
      heap.pop();
      heap.push(e);
    }
  }
  return std::sqrt(heap.top().first);
}

NeighborBank make_neighbor_bank(const FeatureSet& set, std::size_t k, KcdMode mode) {
  NeighborBank bank;
  bank.k = k;
  bank.mode = mode;
  for (const Label label : {Label::Benign, Label::Malicious}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (set.records[i].label == label) idx.push_back(i);
    }
    // Rows grouped by dataset id, record order inside each group.
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return set.records[a].dataset_id < set.records[b].dataset_id;
    });
    RowMatrix rows(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(set.dim));
    std::vector<std::uint32_t> groups;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto& rec = set.records[idx[r]];
      Eigen::VectorXd v(static_cast<Eigen::Index>(set.dim));
      for (std::size_t j = 0; j < set.dim; ++j) v(static_cast<Eigen::Index>(j)) = rec.vector[j];
      rows.row(static_cast<Eigen::Index>(r)) = unit(v).transpose();
      groups.push_back(rec.dataset_id);
    }
    if (label == Label::Benign) {
      bank.benign = std::move(rows);
      bank.benign_groups = std::move(groups);
    } else {
      bank.malicious = std::move(rows);
      bank.malicious_groups = std::move(groups);
    }
  }
  return bank;
}

double kcd_score(const Eigen::Ref<const Eigen::VectorXd>& z_raw, const NeighborBank& bank) {
  if (bank.benign.rows() == 0 || bank.malicious.rows() == 0) {
    fail(ErrorCode::EmptyBank, "contrastive kNN scoring needs benign and malicious banks");
  }
  const Eigen::VectorXd z = unit(z_raw);
  return bank_distance(z, bank.benign, bank.benign_groups, bank.k, bank.mode) -
         bank_distance(z, bank.malicious, bank.malicious_groups, bank.k, bank.mode);
}

double one_class_mahalanobis(const Eigen::Ref<const Eigen::VectorXd>& z, const ClusterBank& bank) {
  if (bank.benign.empty()) fail(ErrorCode::EmptyBank, "one-class scoring needs benign clusters");
  return min_distance(z, bank.benign);
}

double one_class_knn(const Eigen::Ref<const Eigen::VectorXd>& z_raw, const NeighborBank& bank, std::size_t k) {
  if (bank.benign.rows() == 0) fail(ErrorCode::EmptyBank, "one-class scoring needs a benign bank");
  return kth_neighbor_distance(unit(z_raw), bank.benign, k);
}

KMeansResult kmeans_partition(const Eigen::MatrixXd& samples, std::size_t k, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(samples.rows());
  if (k == 0) fail(ErrorCode::InvalidArgument, "k-means needs k >= 1");
  if (k > n) fail(ErrorCode::KTooLarge, "k=" + std::to_string(k) + " exceeds " + std::to_string(n) + " samples");
  Rng rng(seed, 0x6b6d);
  const auto ki = static_cast<Eigen::Index>(k);

  auto sq_dist = [&](std::size_t i, const Eigen::MatrixXd& centers, Eigen::Index c) {
    return (samples.row(static_cast<Eigen::Index>(i)) - centers.row(c)).squaredNorm();
  };

  // k-means++ seeding.
  Eigen::MatrixXd centers(ki, samples.cols());
  std::vector<bool> chosen(n, false);
  std::size_t first = static_cast<std::size_t>(rng.below(n));
  centers.row(0) = samples.row(static_cast<Eigen::Index>(first));
  chosen[first] = true;
  std::vector<double> nearest(n);
  for (std::size_t i = 0; i < n; ++i) nearest[i] = sq_dist(i, centers, 0);
  for (Eigen::Index c = 1; c < ki; ++c) {
    const double total = std::accumulate(nearest.begin(), nearest.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (nearest[i] <= 0.0) continue;
        pick = i;
        u -= nearest[i];
        if (u < 0.0) break;
      }
    }
    if (pick == n) {  // all remaining mass is zero: take the first unused point
      pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
    }
    chosen[pick] = true;
    centers.row(c) = samples.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], sq_dist(i, centers, c));
  }

  KMeansResult result;
  std::vector<std::size_t> assign(n, k);
  for (std::size_t iter = 0; iter < 300; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      double best_d = sq_dist(i, centers, 0);
      for (Eigen::Index c = 1; c < ki; ++c) {
        const double dist = sq_dist(i, centers, c);
        if (dist < best_d) {
          best_d = dist;
          best = c;
        }
      }
      if (assign[i] != static_cast<std::size_t>(best)) {
        assign[i] = static_cast<std::size_t>(best);
        changed = true;
      }
    }
    result.iterations = iter + 1;
    if (!changed && iter > 0) break;

    std::vector<std::size_t> counts(k, 0);
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(ki, samples.cols());
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(assign[i])) += samples.row(static_cast<Eigen::Index>(i));
      ++counts[assign[i]];
    }
    for (Eigen::Index c = 0; c < ki; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centers.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        continue;
      }
      // Empty cluster: re-seed at the point farthest from its own centroid.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dist = sq_dist(i, centers, static_cast<Eigen::Index>(assign[i]));
        if (dist > far_d) {
          far_d = dist;
          far = i;
        }
      }
      centers.row(c) = samples.row(static_cast<Eigen::Index>(far));
      assign[far] = static_cast<std::size_t>(c);
      ++result.reseeded;
      changed = true;
    }
  }

  std::vector<std::vector<std::size_t>> groups(k);
  for (std::size_t i = 0; i < n; ++i) groups[assign[i]].push_back(i);
  std::erase_if(groups, [](const auto& g) { return g.empty(); });
  std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  result.centroids.resize(static_cast<Eigen::Index>(groups.size()), samples.cols());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(samples.cols());
    for (auto i : groups[g]) mean += samples.row(static_cast<Eigen::Index>(i));
    result.centroids.row(static_cast<Eigen::Index>(g)) = mean / static_cast<double>(groups[g].size());
  }
  result.groups = std::move(groups);
  return result;
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Mcd: return "mcd";
    case Variant::Kcd: return "kcd";
    case Variant::OneClassMahal: return "oneclass-mahal";
    case Variant::OneClassKnn: return "oneclass-knn";
  }
  return "mcd";
}

Variant variant_from_name(const std::string& name) {
  if (name == "mcd") return Variant::Mcd;
  if (name == "kcd") return Variant::Kcd;
  if (name == "oneclass-mahal") return Variant::OneClassMahal;
  if (name == "oneclass-knn") return Variant::OneClassKnn;
  fail(ErrorCode::InvalidConfig, "unknown detector variant '" + name + "'");
}

namespace {

std::vector<GaussianCluster> fit_class_clusters(const FeatureSet& set, const Eigen::MatrixXd& rows, Label label,
                                                const DetectorOptions& options, std::size_t& skipped) {
  std::vector<GaussianCluster> clusters;
  if (options.strategy == ClusterStrategy::DatasetPerCluster) {
    std::map<std::uint32_t, std::vector<Eigen::Index>> by_dataset;
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (set.records[i].label == label) by_dataset[set.records[i].dataset_id].push_back(static_cast<Eigen::Index>(i));
    }
    for (const auto& [id, idx] : by_dataset) clusters.push_back(fit_gaussian_cluster(rows(idx, Eigen::all), id));
    return clusters;
  }
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.records[i].label == label) idx.push_back(static_cast<Eigen::Index>(i));
  }
  if (idx.empty()) return clusters;
  const Eigen::MatrixXd class_rows = rows(idx, Eigen::all);
  const std::size_t k = label == Label::Benign ? options.benign_clusters : options.malicious_clusters;
  const auto km = kmeans_partition(class_rows, std::min(k, idx.size()),
                                   options.seed + (label == Label::Benign ? 0 : 1));
  for (std::size_t g = 0; g < km.groups.size(); ++g) {
    if (km.groups[g].size() < 2) {
      ++skipped;
      continue;
    }
    std::vector<Eigen::Index> members(km.groups[g].begin(), km.groups[g].end());
    clusters.push_back(fit_gaussian_cluster(class_rows(members, Eigen::all), static_cast<std::uint32_t>(g)));
  }
  return clusters;
}

}  // namespace

Detector fit_detector(const FeatureSet& train, const DetectorOptions& options) {
  if (train.empty()) fail(ErrorCode::EmptySet, "cannot fit a detector on an empty set");
  Detector det;
  det.options = options;
  det.dim = train.dim;
  const bool one_class = options.variant == Variant::OneClassMahal || options.variant == Variant::OneClassKnn;
  if (train.count(Label::Benign) == 0) fail(ErrorCode::EmptyBank, "no benign training samples");
  if (!one_class && train.count(Label::Malicious) == 0) fail(ErrorCode::EmptyBank, "no malicious training samples");

  if (options.variant == Variant::Mcd || options.variant == Variant::OneClassMahal) {
    Eigen::MatrixXd rows = train.matrix();
    if (options.normalize) rows = l2_normalize_rows(rows);
    det.clusters.benign = fit_class_clusters(train, rows, Label::Benign, options, det.skipped_groups);
    if (!one_class) det.clusters.malicious = fit_class_clusters(train, rows, Label::Malicious, options, det.skipped_groups);
    if (det.clusters.benign.empty() || (!one_class && det.clusters.malicious.empty())) {
      fail(ErrorCode::EmptyBank, "no cluster could be fitted for one of the classes");
    }
  } else {
    det.neighbors = make_neighbor_bank(one_class ? train.with_label(Label::Benign) : train, options.k, options.kcd_mode);
    const auto smallest = one_class ? det.neighbors.benign.rows()
                                    : std::min(det.neighbors.benign.rows(), det.neighbors.malicious.rows());
    if (options.k == 0 || options.k > static_cast<std::size_t>(smallest)) {
      fail(ErrorCode::KTooLarge, "k=" + std::to_string(options.k) + " exceeds the smallest class bank (" +
                                     std::to_string(smallest) + ")");
    }
  }
  return det;
}

double Detector::score(const Eigen::Ref<const Eigen::VectorXd>& z) const {
  require_dim(z.size(), static_cast<Eigen::Index>(dim));
  switch (options.variant) {
    case Variant::Mcd:
      return options.normalize ? mcd_score(unit(z), clusters) : mcd_score(z, clusters);
    case Variant::OneClassMahal:
      return options.normalize ? one_class_mahalanobis(unit(z), clusters) : one_class_mahalanobis(z, clusters);
    case Variant::Kcd:
      return kcd_score(z, neighbors);
    case Variant::OneClassKnn:
      return one_class_knn(z, neighbors, options.k);
  }
  return 0.0;
}

std::vector<double> Detector::score_all(const Eigen::MatrixXd& rows) const {
  std::vector<double> out(static_cast<std::size_t>(rows.rows()));
  for (Eigen::Index i = 0; i < rows.rows(); ++i) out[static_cast<std::size_t>(i)] = score(rows.row(i).transpose());
  return out;
}

}  // namespace rcs
