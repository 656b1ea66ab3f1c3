#include <cmath>

#include <gtest/gtest.h>

#include "rcs/errors.hpp"
#include "rcs/layer_probe.hpp"
#include "rcs/synthetic_oracle.hpp"

using namespace rcs;

namespace {

MixtureCluster cluster(Eigen::VectorXd mean, Eigen::MatrixXd factor, std::size_t count, Label label, std::uint32_t id) {
  return {std::move(mean), std::move(factor), count, label, id};
}

MixtureSpec two_gaussians(Eigen::Index d, double gap, std::size_t count, std::uint64_t seed) {
  Eigen::VectorXd mu_m = Eigen::VectorXd::Zero(d);
  mu_m(0) = gap;
  MixtureSpec s;
  s.dim = static_cast<std::size_t>(d);
  s.seed = seed;
  s.clusters.push_back(cluster(Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Identity(d, d), count, Label::Benign, 0));
  s.clusters.push_back(cluster(mu_m, Eigen::MatrixXd::Identity(d, d), count, Label::Malicious, 1));
  return s;
}

template <typename Fn>
void expect_code(ErrorCode code, Fn fn) {
  try {
    fn();
    FAIL() << "expected " << error_code_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

}  // namespace

TEST(Mixture, ZeroFactorRepeatsMean) {
  MixtureSpec s;
  s.dim = 3;
  s.clusters.push_back(cluster(Eigen::Vector3d(1.5, -2, 0.25), Eigen::MatrixXd::Zero(3, 1), 5, Label::Benign, 0));
  for (const auto& r : generate_mixture(s).records) EXPECT_EQ(r.vector, (std::vector<float>{1.5f, -2.0f, 0.25f}));
}

TEST(Mixture, MomentsConcentrate) {
  std::vector<double> mean_err, cov_err;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    MixtureSpec s;
    s.dim = 2;
    s.seed = seed;
    s.clusters.push_back(cluster(Eigen::Vector2d::Zero(), Eigen::Matrix2d::Identity(), 10000, Label::Benign, 0));
    const Eigen::MatrixXd x = generate_mixture(s).matrix();
    const Eigen::MatrixXd c = (x.rowwise() - x.colwise().mean()).transpose() * (x.rowwise() - x.colwise().mean()) / 9999.0;
    mean_err.push_back(x.colwise().mean().norm());
    cov_err.push_back((c - Eigen::Matrix2d::Identity()).norm());
  }
  EXPECT_LT(quantile_type7(mean_err, 0.5), 0.05);
  EXPECT_LT(quantile_type7(cov_err, 0.5), 0.1);
}

TEST(Mixture, DeterministicAndTagged) {
  const auto s = two_gaussians(4, 3.0, 50, 9);
  const auto a = generate_mixture(s), b = generate_mixture(s);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.count(Label::Malicious), 50u);
  EXPECT_EQ(a.dataset_ids(), (std::vector<std::uint32_t>{0, 1}));
  auto other = s;
  other.seed = 10;
  EXPECT_FALSE(generate_mixture(other) == a);
}

TEST(Mixture, SpecValidationAndJson) {
  auto s = two_gaussians(3, 2.0, 10, 1);
  s.clusters[1].factor = Eigen::MatrixXd::Zero(3, 2);
  s.clusters[1].factor(0, 0) = 2.0;
  const auto back = spec_from_json(spec_to_json(s));
  ASSERT_EQ(back.clusters.size(), 2u);
  EXPECT_EQ(back.clusters[1].factor, s.clusters[1].factor);
  EXPECT_EQ(back.seed, 1u);
  EXPECT_EQ(effective_rank(s.clusters[1].factor), 1u);

  auto bad = s;
  bad.clusters[0].count = 0;
  expect_code(ErrorCode::InvalidSpec, [&] { validate(bad); });
  bad = s;
  bad.clusters[0].mean = Eigen::VectorXd::Zero(2);
  expect_code(ErrorCode::InvalidSpec, [&] { validate(bad); });
  expect_code(ErrorCode::InvalidSpec, [] { spec_from_json(R"({"dim": 2, "clusters": [{"mean": [0, 0], "sigma": 1,
      "count": 3, "label": "sideways", "dataset_id": 0}]})"); });
}

TEST(Mixture, SigmaShorthand) {
  const auto s = spec_from_json(R"({"dim": 2, "seed": 4, "clusters": [
      {"mean": [0, 0], "sigma": 2.0, "count": 3, "label": "benign", "dataset_id": 0, "effective_rank": 2}]})");
  EXPECT_EQ(s.clusters[0].factor, Eigen::MatrixXd(2.0 * Eigen::Matrix2d::Identity()));
}

TEST(Oracle, CentroidAndMidpoint) {
  const auto s = two_gaussians(3, 4.0, 10, 0);
  EXPECT_DOUBLE_EQ(oracle_mcd_score(Eigen::Vector3d(4, 0, 0), s), 4.0);
  EXPECT_DOUBLE_EQ(oracle_mcd_score(Eigen::Vector3d(2, 0, 0), s), 0.0);
}

TEST(Oracle, SingularTruthIsJittered) {
  auto s = two_gaussians(3, 4.0, 10, 0);
  s.clusters[1].factor = Eigen::MatrixXd::Zero(3, 1);
  s.clusters[1].factor(0, 0) = 1.0;
  EXPECT_TRUE(oracle_bank(s).jittered);
}

TEST(Oracle, FittedScoreConvergesAtLargeN) {
  const auto s = two_gaussians(4, 3.0, 100000, 2);
  const auto train = generate_mixture(s);
  DetectorOptions o;
  o.normalize = false;
  const auto det = fit_detector(train, o);
  Rng rng(2);
  std::vector<double> diffs;
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd z(4);
    for (int j = 0; j < 4; ++j) z(j) = rng.normal() * 2.0;
    diffs.push_back(std::abs(det.score(z) - oracle_mcd_score(z, s)));
  }
  EXPECT_LT(quantile_type7(diffs, 0.5), 0.05);
}

TEST(SampleComplexity, ErrorShrinksAndRankMatters) {
  const std::vector<std::size_t> sweep{2, 5, 15, 50};
  for (std::size_t rank : {2, 8}) {
    const auto r = run_sample_complexity(sample_complexity_spec(rank, 7), sweep, 100, 20);
    int inversions = 0;
    for (std::size_t i = 1; i < r.points.size(); ++i) {
      EXPECT_GE(r.points[i].median_err, 0.0);
      if (r.points[i].median_err > r.points[i - 1].median_err) {
        ++inversions;
        EXPECT_LT(r.points[i].median_err, 1.1 * r.points[i - 1].median_err);
      }
      EXPECT_LE(r.points[i].median_err, r.points[i].p90_err);
    }
    EXPECT_LE(inversions, 1) << "rank " << rank;
  }
  const auto low = run_sample_complexity(sample_complexity_spec(2, 7), {15}, 100, 20);
  const auto high = run_sample_complexity(sample_complexity_spec(8, 7), {15}, 100, 20);
  EXPECT_LE(low.points[0].median_err, high.points[0].median_err);
}

TEST(SampleComplexity, LargeSampleIsConsistent) {
  const auto r = run_sample_complexity(sample_complexity_spec(2, 3), {100000}, 3, 20);
  EXPECT_LT(r.points[0].median_err, 0.05);
}

TEST(SampleComplexity, IdenticalClassesShrinkAtSharedMean) {
  // Both classes N(0, I): probes sit near the shared mean where s* = 0.
  auto s = two_gaussians(3, 0.0, 100, 5);
  EXPECT_EQ(oracle_mcd_score(Eigen::Vector3d::Zero(), s), 0.0);
  const auto r = run_sample_complexity(s, {5, 50, 500}, 50, 10);
  EXPECT_GT(r.points[0].median_err, r.points[2].median_err);
}

TEST(SampleComplexity, TrialsAreScheduleIndependent) {
  const auto spec = sample_complexity_spec(2, 11);
  const auto full = run_sample_complexity(spec, {5, 15}, 20, 10);
  const auto part = run_sample_complexity(spec, {15}, 20, 10);
  EXPECT_EQ(full.points[1].median_err, part.points[0].median_err);
  EXPECT_EQ(full.to_csv().substr(0, 20), "n,median_err,p90_err");
}

TEST(SampleComplexity, SweepValidation) {
  const auto spec = sample_complexity_spec(2, 1);
  expect_code(ErrorCode::InvalidSweep, [&] { run_sample_complexity(spec, {1, 5}, 10, 5); });
  expect_code(ErrorCode::InvalidSweep, [&] { run_sample_complexity(spec, {5, 5}, 10, 5); });
  expect_code(ErrorCode::InvalidSweep, [&] { run_sample_complexity(spec, {}, 10, 5); });
}

TEST(BruteForce, HandCases) {
  Eigen::MatrixXd bank(3, 1);
  bank << 0, 1, 2;
  EXPECT_EQ(brute_force_knn_distance(Eigen::VectorXd::Zero(1), bank, 2), 1.0);
  EXPECT_EQ(brute_force_knn_distance(Eigen::VectorXd::Zero(1), bank, 3), 2.0);
  expect_code(ErrorCode::KTooLarge, [&] { brute_force_knn_distance(Eigen::VectorXd::Zero(1), bank, 4); });
}

TEST(PairwiseAuroc, HandCases) {
  EXPECT_EQ(pairwise_auroc({{0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}}), 0.75);
  EXPECT_EQ(pairwise_auroc({{0.5, 0.5}, {0, 1}}), 0.5);
  expect_code(ErrorCode::DegenerateLabels, [] { pairwise_auroc({{0.5, 0.5}, {1, 1}}); });
}

TEST(Worlds, ReferenceWorldShape) {
  const auto w = make_reference_world(0);
  EXPECT_EQ(w.train.size(), 2000u);
  EXPECT_EQ(w.test.size(), 1000u);
  EXPECT_EQ(w.train.dim, 64u);
  EXPECT_EQ(w.train.dataset_ids().size(), 5u);
  EXPECT_EQ(w.unseen.count(Label::Malicious), 0u);
  EXPECT_EQ(make_reference_world(0).train, w.train);
}

TEST(Worlds, ProbeWorldLayers) {
  const auto layers = make_probe_world(3);
  ASSERT_EQ(layers.size(), 5u);
  for (const auto& [l, set] : layers) EXPECT_EQ(set.layer, std::optional<int>(l));
}
