#include "rcs/synthetic_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "rcs/errors.hpp"
#include "rcs/layer_probe.hpp"
#include "rcs/random.hpp"

namespace rcs {
namespace {

using nlohmann::json;

Eigen::VectorXd standard_normal(std::size_t n, Rng& rng) {
  Eigen::VectorXd u(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = rng.normal();
  return u;
}

Eigen::VectorXd basis(std::size_t dim, std::size_t axis) {
  Eigen::VectorXd e = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  e(static_cast<Eigen::Index>(axis)) = 1.0;
  return e;
}

MixtureCluster isotropic(const Eigen::VectorXd& mean, std::size_t count, Label label, std::uint32_t id) {
  const auto d = mean.size();
  return {mean, Eigen::MatrixXd::Identity(d, d), count, label, id};
}

}  // namespace

std::size_t effective_rank(const Eigen::MatrixXd& factor) {
  if (factor.size() == 0) return 0;
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(factor);
  const auto& s = svd.singularValues();
  const double tol = 1e-9 * std::max(1.0, s.size() > 0 ? s(0) : 0.0);
  return static_cast<std::size_t>((s.array() > tol).count());
}

void validate(const MixtureSpec& spec) {
  if (spec.dim == 0) fail(ErrorCode::InvalidSpec, "mixture dimension must be positive");
  if (spec.clusters.empty()) fail(ErrorCode::InvalidSpec, "mixture has no clusters");
  for (std::size_t c = 0; c < spec.clusters.size(); ++c) {
    const auto& k = spec.clusters[c];
    const std::string where = "cluster " + std::to_string(c);
    if (k.count == 0) fail(ErrorCode::InvalidSpec, where + " has zero count");
    if (static_cast<std::size_t>(k.mean.size()) != spec.dim) fail(ErrorCode::InvalidSpec, where + " mean has wrong length");
    if (static_cast<std::size_t>(k.factor.rows()) != spec.dim) fail(ErrorCode::InvalidSpec, where + " factor has wrong row count");
    if (!k.mean.allFinite() || !k.factor.allFinite()) fail(ErrorCode::InvalidSpec, where + " holds non-finite values");
  }
}

std::string spec_to_json(const MixtureSpec& spec) {
  json clusters = json::array();
  for (const auto& k : spec.clusters) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < k.factor.rows(); ++i) {
      std::vector<double> row(static_cast<std::size_t>(k.factor.cols()));
      for (Eigen::Index j = 0; j < k.factor.cols(); ++j) row[static_cast<std::size_t>(j)] = k.factor(i, j);
      rows.push_back(row);
    }
    clusters.push_back({{"mean", std::vector<double>(k.mean.data(), k.mean.data() + k.mean.size())},
                        {"factor", rows},
                        {"count", k.count},
                        {"label", k.label == Label::Benign ? "benign" : "malicious"},
                        {"dataset_id", k.dataset_id},
                        {"effective_rank", effective_rank(k.factor)}});
  }
  return json{{"dim", spec.dim}, {"seed", spec.seed}, {"clusters", clusters}}.dump(1);
}

MixtureSpec spec_from_json(const std::string& text) {
  MixtureSpec spec;
  try {
    const json j = json::parse(text);
    spec.dim = j.at("dim").get<std::size_t>();
    spec.seed = j.value("seed", std::uint64_t{0});
    for (const auto& c : j.at("clusters")) {
      MixtureCluster k;
      const auto mean = c.at("mean").get<std::vector<double>>();
      k.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
      const auto d = static_cast<Eigen::Index>(spec.dim);
      if (c.contains("factor")) {
        const auto rows = c.at("factor").get<std::vector<std::vector<double>>>();
        const auto r = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size());
        k.factor.resize(static_cast<Eigen::Index>(rows.size()), r);
        for (std::size_t i = 0; i < rows.size(); ++i) {
          if (static_cast<Eigen::Index>(rows[i].size()) != r) fail(ErrorCode::InvalidSpec, "ragged factor matrix");
          for (Eigen::Index jj = 0; jj < r; ++jj) k.factor(static_cast<Eigen::Index>(i), jj) = rows[i][static_cast<std::size_t>(jj)];
        }
      } else {
        k.factor = c.value("sigma", 1.0) * Eigen::MatrixXd::Identity(d, d);
      }
      k.count = c.at("count").get<std::size_t>();
      const auto label = c.at("label").get<std::string>();
      if (label != "benign" && label != "malicious") fail(ErrorCode::InvalidSpec, "label must be benign or malicious");
      k.label = label == "benign" ? Label::Benign : Label::Malicious;
      k.dataset_id = c.at("dataset_id").get<std::uint32_t>();
      if (c.contains("effective_rank") && c.at("effective_rank").get<std::size_t>() != effective_rank(k.factor)) {
        fail(ErrorCode::InvalidSpec, "declared effective_rank does not match the factor");
      }
      spec.clusters.push_back(std::move(k));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidSpec, std::string("mixture spec: ") + e.what());
  }
  validate(spec);
  return spec;
}

Eigen::MatrixXd sample_cluster(const MixtureCluster& cluster, std::size_t n, Rng& rng) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), cluster.mean.size());
  const auto r = static_cast<std::size_t>(cluster.factor.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    out.row(i) = (cluster.mean + cluster.factor * standard_normal(r, rng)).transpose();
  }
  return out;
}

FeatureSet generate_mixture(const MixtureSpec& spec) {
  validate(spec);
  FeatureSet set;
  set.dim = spec.dim;
  const Rng root(spec.seed, 0x6d6978);
  for (std::size_t c = 0; c < spec.clusters.size(); ++c) {
    const auto& k = spec.clusters[c];
    Rng rng = root.fork(c);
    const Eigen::MatrixXd draws = sample_cluster(k, k.count, rng);
    for (Eigen::Index i = 0; i < draws.rows(); ++i) {
      set.records.push_back(make_record(draws.row(i).transpose(), k.dataset_id, k.label));
    }
    set.catalog.emplace(k.dataset_id, "dataset_" + std::to_string(k.dataset_id));
  }
  return set;
}

OracleBank oracle_bank(const MixtureSpec& spec) {
  validate(spec);
  OracleBank out;
  for (const auto& k : spec.clusters) {
    auto cluster = make_cluster(k.mean, k.factor * k.factor.transpose(), k.dataset_id);
    cluster.count = k.count;
    out.jittered = out.jittered || cluster.jitter > 0.0;
    (k.label == Label::Benign ? out.bank.benign : out.bank.malicious).push_back(std::move(cluster));
  }
  return out;
}

double oracle_mcd_score(const Eigen::Ref<const Eigen::VectorXd>& z, const OracleBank& oracle) {
  return mcd_score(z, oracle.bank);
}

double oracle_mcd_score(const Eigen::Ref<const Eigen::VectorXd>& z, const MixtureSpec& spec) {
  return mcd_score(z, oracle_bank(spec).bank);
}

SampleComplexityResult run_sample_complexity(const MixtureSpec& spec, const std::vector<std::size_t>& n_sweep,
                                             std::size_t trials, std::size_t probe_count) {
  validate(spec);
  if (n_sweep.empty()) fail(ErrorCode::InvalidSweep, "sweep is empty");
  for (std::size_t i = 0; i < n_sweep.size(); ++i) {
    if (n_sweep[i] < 2) fail(ErrorCode::InvalidSweep, "every sweep value needs at least 2 samples");
    if (i > 0 && n_sweep[i] <= n_sweep[i - 1]) fail(ErrorCode::InvalidSweep, "sweep values must strictly increase");
  }
  if (trials == 0 || probe_count == 0) fail(ErrorCode::InvalidSweep, "trials and probe_count must be positive");

  const OracleBank oracle = oracle_bank(spec);
  if (oracle.bank.benign.empty() || oracle.bank.malicious.empty()) {
    fail(ErrorCode::InvalidSpec, "sample complexity needs benign and malicious clusters");
  }
  std::vector<const MixtureCluster*> malicious;
  for (const auto& k : spec.clusters) {
    if (k.label == Label::Malicious) malicious.push_back(&k);
  }

  SampleComplexityResult result;
  result.trials = trials;
  result.probe_count = probe_count;
  result.epsilon_grid = {0.05, 0.1, 0.25, 0.5, 1.0};
  result.jittered = oracle.jittered;
  std::vector<std::vector<double>> errors(n_sweep.size());
  const Rng root(spec.seed, 0x5ca1e);

  for (std::size_t t = 0; t < trials; ++t) {
    const Rng trial = root.fork(t);
    // Probes inside the unit Mahalanobis ball of a malicious cluster, shared
    // by every n of this trial.
    Rng probe_rng = trial.fork(0);
    std::vector<Eigen::VectorXd> probes;
    std::vector<double> truth;
    for (std::size_t p = 0; p < probe_count; ++p) {
      const auto& k = *malicious[static_cast<std::size_t>(probe_rng.below(malicious.size()))];
      const auto r = static_cast<std::size_t>(k.factor.cols());
      Eigen::VectorXd v = standard_normal(r, probe_rng);
      const double norm = v.norm();
      if (norm > 0.0) v *= std::pow(probe_rng.uniform(), 1.0 / static_cast<double>(r)) / norm;
      probes.push_back(k.mean + k.factor * v);
      truth.push_back(oracle_mcd_score(probes.back(), oracle));
    }
    for (std::size_t i = 0; i < n_sweep.size(); ++i) {
      Rng fit_rng = trial.fork(1 + n_sweep[i]);  // keyed by n, so any sweep reproduces the same fits
      ClusterBank fitted;
      fitted.benign = oracle.bank.benign;
      for (const auto* k : malicious) {
        fitted.malicious.push_back(fit_gaussian_cluster(sample_cluster(*k, n_sweep[i], fit_rng), k->dataset_id));
      }
      for (std::size_t p = 0; p < probes.size(); ++p) {
        errors[i].push_back(std::abs(mcd_score(probes[p], fitted) - truth[p]));
      }
    }
  }

  for (std::size_t i = 0; i < n_sweep.size(); ++i) {
    SampleComplexityPoint pt;
    pt.n = n_sweep[i];
    pt.median_err = quantile_type7(errors[i], 0.5);
    pt.p90_err = quantile_type7(errors[i], 0.9);
    for (double eps : result.epsilon_grid) {
      const auto above = std::count_if(errors[i].begin(), errors[i].end(), [&](double e) { return e > eps; });
      pt.exceed.push_back(static_cast<double>(above) / static_cast<double>(errors[i].size()));
    }
    result.points.push_back(std::move(pt));
  }
  return result;
}

std::string SampleComplexityResult::to_json() const {
  json pts = json::array();
  for (const auto& p : points) {
    pts.push_back({{"n", p.n}, {"median_err", p.median_err}, {"p90_err", p.p90_err}, {"exceed", p.exceed}});
  }
  return json{{"trials", trials}, {"probe_count", probe_count}, {"epsilon_grid", epsilon_grid},
              {"jittered", jittered}, {"points", pts}}
      .dump(1);
}

std::string SampleComplexityResult::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "n,median_err,p90_err\n";
  for (const auto& p : points) out << p.n << ',' << p.median_err << ',' << p.p90_err << '\n';
  return out.str();
}

double brute_force_knn_distance(const Eigen::Ref<const Eigen::VectorXd>& z, const Eigen::MatrixXd& bank,
                                std::size_t k) {
  if (k == 0 || k > static_cast<std::size_t>(bank.rows())) {
    fail(ErrorCode::KTooLarge, "k exceeds bank size");
  }
  if (z.size() != bank.cols()) fail(ErrorCode::DimensionMismatch, "query and bank dimensions differ");
  std::vector<std::pair<double, Eigen::Index>> all;
  for (Eigen::Index r = 0; r < bank.rows(); ++r) {
    double sq = 0.0;
    for (Eigen::Index j = 0; j < bank.cols(); ++j) {
      const double diff = z(j) - bank(r, j);
      sq += diff * diff;
    }
    all.emplace_back(sq, r);
  }
  std::sort(all.begin(), all.end());
  return std::sqrt(all[k - 1].first);
}

double pairwise_auroc(const ScoreSet& set) {
  validate(set);
  double credit = 0.0;
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.labels[i] == 1) ++pos; else ++neg;
  }
  if (pos == 0 || neg == 0) fail(ErrorCode::DegenerateLabels, "both classes must be present");
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.labels[i] != 1) continue;
    for (std::size_t j = 0; j < set.size(); ++j) {
      if (set.labels[j] != 0) continue;
      if (set.scores[i] > set.scores[j]) credit += 1.0;
      else if (set.scores[i] == set.scores[j]) credit += 0.5;
    }
  }
  return credit / (static_cast<double>(pos) * static_cast<double>(neg));
}

FeatureSet concat(const FeatureSet& a, const FeatureSet& b) {
  if (a.dim != b.dim) fail(ErrorCode::DimensionMismatch, "cannot concatenate sets of different dimension");
  FeatureSet out = a;
  out.records.insert(out.records.end(), b.records.begin(), b.records.end());
  out.catalog.insert(b.catalog.begin(), b.catalog.end());
  return out;
}

ReferenceWorld make_reference_world(std::uint64_t seed, const ReferenceWorldOptions& o) {
  if (o.dim < 6) fail(ErrorCode::InvalidSpec, "reference world needs at least 6 dimensions");
  const Eigen::VectorXd c = o.offset * basis(o.dim, 0);
  auto e = [&](std::size_t axis) { return basis(o.dim, axis); };
  MixtureSpec spec;
  spec.dim = o.dim;
  for (std::uint32_t b = 1; b <= 3; ++b) {
    spec.clusters.push_back(isotropic(c + o.benign_spread * e(b), o.train_per_cluster, Label::Benign, b));
  }
  spec.clusters.push_back(isotropic(c + o.benign_spread * e(1) + o.separation * e(4), o.train_per_cluster,
                                    Label::Malicious, 4));
  spec.clusters.push_back(isotropic(c + o.benign_spread * e(2) + o.separation * e(5), o.train_per_cluster,
                                    Label::Malicious, 5));

  ReferenceWorld world;
  spec.seed = mix64(seed * 3 + 0);
  world.train_spec = spec;
  world.train = generate_mixture(spec);

  MixtureSpec test = spec;
  test.seed = mix64(seed * 3 + 1);
  for (auto& k : test.clusters) k.count = o.test_per_cluster;
  world.test = generate_mixture(test);

  MixtureSpec unseen;
  unseen.dim = o.dim;
  unseen.seed = mix64(seed * 3 + 2);
  unseen.clusters.push_back(isotropic(c + o.benign_spread * e(3) - o.unseen_shift * e(4) - o.unseen_shift * e(5),
                                      o.unseen_count, Label::Benign, 6));
  world.unseen = generate_mixture(unseen);
  return world;
}

std::vector<std::pair<int, FeatureSet>> make_probe_world(std::uint64_t seed, const ProbeWorldOptions& o) {
  if (std::find(o.layers.begin(), o.layers.end(), o.planted_layer) == o.layers.end()) {
    fail(ErrorCode::InvalidSpec, "planted layer is not among the layers");
  }
  const Rng root(seed, 0x70726f6265);
  std::vector<std::pair<int, FeatureSet>> out;
  for (std::size_t i = 0; i < o.layers.size(); ++i) {
    Rng rng = root.fork(i);
    Eigen::VectorXd u = standard_normal(o.dim, rng);
    u.normalize();
    const double delta = o.layers[i] == o.planted_layer
                             ? o.planted_separation
                             : o.other_min + (o.other_max - o.other_min) * rng.uniform();
    MixtureSpec spec;
    spec.dim = o.dim;
    spec.seed = rng.next_u64();
    spec.clusters.push_back(isotropic(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(o.dim)), o.per_class,
                                      Label::Benign, 1));
    spec.clusters.push_back(isotropic(delta * u, o.per_class, Label::Malicious, 2));
    FeatureSet set = generate_mixture(spec);
    set.layer = o.layers[i];
    out.emplace_back(o.layers[i], std::move(set));
  }
  return out;
}

MixtureSpec sample_complexity_spec(std::size_t rank, std::uint64_t seed, std::size_t dim, double separation) {
  if (rank == 0 || rank > dim) fail(ErrorCode::InvalidSpec, "rank must lie in [1, dim]");
  Rng rng(seed, 0x72616e6b);
  Eigen::MatrixXd g(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(rank));
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
  MixtureSpec spec;
  spec.dim = dim;
  spec.seed = seed;
  spec.clusters.push_back(isotropic(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim)), 1000, Label::Benign, 1));
  MixtureCluster mal;
  mal.mean = separation * basis(dim, 0);
  mal.factor = q;
  mal.count = 1000;
  mal.label = Label::Malicious;
  mal.dataset_id = 2;
  spec.clusters.push_back(std::move(mal));
  return spec;
}

}  // namespace rcs
