#include <cmath>

#include <gtest/gtest.h>

#include "rcs/errors.hpp"
#include "rcs/projection.hpp"
#include "rcs/random.hpp"
#include "support/projection_oracle.hpp"
#include "support/temp_dir.hpp"

using namespace rcs;

namespace {

ProjectionConfig tiny_config(std::uint64_t seed) {
  ProjectionConfig c;
  c.in_dim = 6;
  c.hidden_dims = {5, 4};
  c.out_dim = 3;
  c.dropout_rate = 0.0;
  c.seed = seed;
  return c;
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

std::vector<BatchItem> mixed_items(std::size_t n) {
  std::vector<BatchItem> items;
  for (std::uint32_t i = 0; i < n; ++i) items.push_back({i % 3, i % 2 ? Label::Malicious : Label::Benign});
  return items;
}

// Two datasets per class, classes separated along the first axis.
FeatureSet separable_set(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed, 99);
  FeatureSet s;
  s.dim = dim;
  s.catalog = {{0, "b0"}, {1, "b1"}, {2, "m0"}, {3, "m1"}};
  for (std::size_t i = 0; i < n; ++i) {
    const auto id = static_cast<std::uint32_t>(i % 4);
    Eigen::VectorXd v = gaussian(static_cast<Eigen::Index>(dim), 1, rng).col(0) * 0.5;
    v(0) += id >= 2 ? 3.0 : -3.0;
    v(1) += (id % 2) ? 1.5 : -1.5;
    s.records.push_back(make_record(v, id, id >= 2 ? Label::Malicious : Label::Benign));
  }
  return s;
}

void expect_code(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
    FAIL() << "expected " << error_code_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

}  // namespace

TEST(Config, OutDimMustShrink) {
  ProjectionConfig c = tiny_config(0);
  c.out_dim = c.in_dim;
  expect_code(ErrorCode::InvalidConfig, [&] { validate(c); });
  c = tiny_config(0);
  c.alpha = c.beta = 0.0;
  expect_code(ErrorCode::InvalidConfig, [&] { validate(c); });
  c = tiny_config(0);
  c.dropout_rate = 1.0;
  expect_code(ErrorCode::InvalidConfig, [&] { init_projection(c); });
}

TEST(Config, JsonRoundTrip) {
  ProjectionConfig c = tiny_config(42);
  c.optimizer = OptimizerKind::Adam;
  c.learning_rate = 3e-4;
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
}

TEST(Init, DeterministicAndDefaultShape) {
  ProjectionConfig c;
  c.seed = 1;
  const auto a = init_projection(c), b = init_projection(c);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(a.out_dim(), 256u);
  EXPECT_GT(a.parameter_count(), 1000000u);
  Rng rng(1);
  EXPECT_EQ(project_rows(a, gaussian(2, 4096, rng)).cols(), 256);
  EXPECT_EQ(a.norm[0].running_mean, Eigen::VectorXd::Zero(1024));
  EXPECT_EQ(a.norm[0].running_var, Eigen::VectorXd::Ones(1024));
}

TEST(Loss, WorkedExample) {
  // same-dataset pair at distance 2, cross-dataset pair at distance 1, m_d = 3
  Eigen::MatrixXd z(2, 1);
  z << 0, 2;
  std::vector<BatchItem> same{{0, Label::Benign}, {0, Label::Benign}};
  EXPECT_DOUBLE_EQ(contrastive_loss(z, same, 3.0, 5.0, 1.0, 5.0).dataset, 2.0);
  z << 0, 1;
  std::vector<BatchItem> cross{{0, Label::Benign}, {1, Label::Benign}};
  EXPECT_DOUBLE_EQ(contrastive_loss(z, cross, 3.0, 5.0, 1.0, 5.0).dataset, 2.0);
}

TEST(Loss, SeparationHinge) {
  Eigen::MatrixXd z(2, 1);
  std::vector<BatchItem> items{{0, Label::Benign}, {1, Label::Malicious}};
  z << 0, 3;
  EXPECT_DOUBLE_EQ(contrastive_loss(z, items, 1.0, 5.0, 1.0, 5.0).separation, 2.0);
  z << 0, 6;
  const auto far = contrastive_loss(z, items, 1.0, 5.0, 1.0, 5.0);
  EXPECT_EQ(far.separation, 0.0);
  EXPECT_EQ(far.total, far.dataset);
}

TEST(Loss, CollapsedSingleClassBatch) {
  const Eigen::MatrixXd z = Eigen::MatrixXd::Ones(4, 3);
  std::vector<BatchItem> items(4, {7, Label::Benign});
  const auto l = contrastive_loss(z, items, 1.0, 5.0, 1.0, 5.0);
  EXPECT_EQ(l.dataset, 0.0);
  EXPECT_EQ(l.separation, 0.0);
  EXPECT_TRUE(l.single_class);
}

TEST(Loss, EmptyBatch) {
  expect_code(ErrorCode::EmptyBatch,
              [] { contrastive_loss(Eigen::MatrixXd(0, 3), std::vector<BatchItem>{}, 1.0, 5.0, 1.0, 5.0); });
}

TEST(Loss, MatchesOracleAndDecomposes) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto m = init_projection(tiny_config(seed));
    m.mode = Mode::Training;
    Rng rng(seed, 3);
    const auto x = gaussian(8, 6, rng);
    const auto items = mixed_items(8);
    const auto lib = training_loss(m, x, items);
    const auto oracle = rcs::testing::oracle_loss(m, x, items);
    EXPECT_NEAR(lib.dataset, oracle.dataset, 1e-10 * std::max(1.0, oracle.dataset));
    EXPECT_NEAR(lib.separation, oracle.separation, 1e-10 * std::max(1.0, oracle.separation));
    EXPECT_NEAR(lib.total, 1.0 * lib.dataset + 5.0 * lib.separation, 1e-9);
  }
}

TEST(Gradients, CentralDifferencesOnTinyModels) {
  // Stencils that flip a ReLU or hinge are not derivative estimates; they are skipped.
  std::size_t checked = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    auto m = init_projection(tiny_config(seed));
    m.mode = Mode::Training;
    Rng rng(seed, 5);
    const auto x = gaussian(8, 6, rng);
    const auto items = mixed_items(8);
    auto g = loss_gradients(m, x, items).grads;
    std::vector<double> grads;
    for_each_parameter(g, [&](double* p, Eigen::Index n) { grads.insert(grads.end(), p, p + n); });
    const auto center = rcs::testing::oracle_loss(m, x, items);
    std::size_t i = 0;
    for_each_parameter(m, [&](double* p, Eigen::Index n) {
      for (Eigen::Index k = 0; k < n; ++k, ++i) {
        const double orig = p[k];
        p[k] = orig + 1e-5;
        const auto plus = rcs::testing::oracle_loss(m, x, items);
        p[k] = orig - 1e-5;
        const auto minus = rcs::testing::oracle_loss(m, x, items);
        p[k] = orig;
        if (plus.pattern != center.pattern || minus.pattern != center.pattern) continue;
        const double fd = (plus.total - minus.total) / 2e-5;
        worst = std::max(worst, std::abs(fd - grads[i]) / std::max({std::abs(fd), std::abs(grads[i]), 1e-3}));
        ++checked;
      }
    });
  }
  EXPECT_GT(checked, 500u);
  EXPECT_LT(worst, 1e-5);
}

TEST(Gradients, FlatRegionIsExactlyZero) {
  auto m = init_projection(tiny_config(3));
  m.config.margin_dataset = 1e-9;
  m.config.margin_safety = 1e-9;
  m.mode = Mode::Training;
  Rng rng(3);
  const auto x = gaussian(6, 6, rng);
  std::vector<BatchItem> items;
  for (std::uint32_t i = 0; i < 6; ++i) items.push_back({i, i < 3 ? Label::Benign : Label::Malicious});
  auto g = loss_gradients(m, x, items).grads;
  for_each_parameter(g, [](double* p, Eigen::Index n) {
    for (Eigen::Index k = 0; k < n; ++k) EXPECT_EQ(p[k], 0.0);
  });
}

TEST(Gradients, LinearInAlpha) {
  auto m = init_projection(tiny_config(4));
  m.config.beta = 0.0;
  m.mode = Mode::Training;
  Rng rng(4);
  const auto x = gaussian(8, 6, rng);
  const auto items = mixed_items(8);
  auto g1 = loss_gradients(m, x, items).grads;
  m.config.alpha *= 2.0;
  auto g2 = loss_gradients(m, x, items).grads;
  std::vector<double> a, b;
  for_each_parameter(g1, [&](double* p, Eigen::Index n) { a.insert(a.end(), p, p + n); });
  for_each_parameter(g2, [&](double* p, Eigen::Index n) { b.insert(b.end(), p, p + n); });
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(b[i], 2.0 * a[i]);
}

TEST(Gradients, InferenceModeRefused) {
  const auto m = init_projection(tiny_config(0));
  Rng rng(0);
  const auto x = gaussian(4, 6, rng);
  const auto items = mixed_items(4);
  expect_code(ErrorCode::ModeError, [&] { loss_gradients(m, x, items); });
}

TEST(Training, FullBatchDescent) {
  auto c = tiny_config(8);
  c.learning_rate = 1e-4;
  c.momentum = 0.0;
  auto m = init_projection(c);
  m.mode = Mode::Training;
  Rng rng(8);
  const auto x = gaussian(16, 6, rng);
  const auto items = mixed_items(16);
  double prev = training_loss(m, x, items).total;
  for (int step = 0; step < 50; ++step) {
    auto g = loss_gradients(m, x, items).grads;
    std::vector<double> flat;
    for_each_parameter(g, [&](double* p, Eigen::Index n) { flat.insert(flat.end(), p, p + n); });
    std::size_t i = 0;
    for_each_parameter(m, [&](double* p, Eigen::Index n) {
      for (Eigen::Index k = 0; k < n; ++k) p[k] -= c.learning_rate * flat[i++];
    });
    const double now = training_loss(m, x, items).total;
    EXPECT_LE(now, prev + 1e-9) << "step " << step;
    prev = now;
  }
}

TEST(Training, ZeroEpochsReturnsInitialModel) {
  auto c = tiny_config(2);
  c.in_dim = 8;
  c.epochs = 0;
  const auto r = train_projection(separable_set(40, 8, 2), c);
  EXPECT_TRUE(r.model == init_projection(c));
  EXPECT_TRUE(r.trace.epochs.empty());
}

TEST(Training, SeparatesCentroidsAndIsDeterministic) {
  ProjectionConfig c;
  c.in_dim = 32;
  c.hidden_dims = {32, 16};
  c.out_dim = 8;
  c.epochs = 60;
  c.batch_size = 64;
  c.learning_rate = 1e-4;
  c.seed = 5;
  const auto train = separable_set(400, 32, 5);
  const auto a = train_projection(train, c);
  const auto b = train_projection(train, c);
  EXPECT_TRUE(a.model == b.model);
  EXPECT_EQ(a.model.mode, Mode::Inference);
  for (const auto& e : a.trace.epochs) EXPECT_NEAR(e.total_loss, c.alpha * e.dataset_loss + c.beta * e.separation_loss, 1e-9);

  EXPECT_LT(evaluation_loss(a.model, train).total, 0.1 * evaluation_loss(init_projection(c), train).total);
  const FeatureSet z = project(a.model, train);
  const Eigen::MatrixXd zb = z.matrix(Label::Benign), zm = z.matrix(Label::Malicious);
  const Eigen::RowVectorXd cb = zb.colwise().mean(), cm = zm.colwise().mean();
  const double spread = std::max((zb.rowwise() - cb).rowwise().norm().maxCoeff(), (zm.rowwise() - cm).rowwise().norm().maxCoeff());
  EXPECT_GT((cb - cm).norm(), 2.0 * spread);
}

TEST(Training, RejectsSingleClass) {
  auto c = tiny_config(0);
  c.in_dim = 8;
  expect_code(ErrorCode::SingleClassData, [&] { train_projection(separable_set(40, 8, 0).with_label(Label::Benign), c); });
}

TEST(Project, PureDeterministicAndTagged) {
  auto c = tiny_config(6);
  c.in_dim = 8;
  const auto m = init_projection(c);
  const auto set = separable_set(12, 8, 6);
  const auto a = project(m, set), b = project(m, set);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.dim, 3u);
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(a.records[i].dataset_id, set.records[i].dataset_id);
    EXPECT_EQ(a.records[i].label, set.records[i].label);
  }
  const auto empty = project(m, set.empty_like(8));
  EXPECT_TRUE(empty.empty());
  EXPECT_EQ(empty.dim, 3u);
  expect_code(ErrorCode::DimensionMismatch, [&] { project(m, separable_set(4, 9, 0)); });
}

TEST(Bundle, SaveLoadRoundTrip) {
  rcs::testing::TempDir dir;
  auto c = tiny_config(7);
  c.in_dim = 8;
  const auto r = train_projection(separable_set(80, 8, 7), c);
  save_projection_bundle(r.model, dir.path());
  EXPECT_TRUE(std::filesystem::exists(dir / "projection.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "weights.rcsw"));
  const auto back = load_projection_bundle(dir.path());
  const auto set = separable_set(20, 8, 70);
  // weights are stored as f32, so outputs agree to single precision
  EXPECT_TRUE((project_rows(back, set.matrix()) - project_rows(r.model, set.matrix())).cwiseAbs().maxCoeff() < 1e-4);
}

TEST(Pca, LineInThreeDimensions) {
  Eigen::MatrixXd x(20, 3);
  for (int i = 0; i < 20; ++i) x.row(i) = Eigen::RowVector3d(1, 2, -2) * (i - 7.5) + Eigen::RowVector3d(4, 0, 1);
  const auto p = pca_fit(x, 1);
  const Eigen::MatrixXd recon = (p.transform(x) * p.components).rowwise() + p.mean.transpose();
  EXPECT_LT((recon - x).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Pca, FullRankPreservesVariance) {
  Rng rng(9);
  const Eigen::MatrixXd x = gaussian(50, 5, rng) * gaussian(5, 5, rng);
  const auto p = pca_fit(x, 5);
  const Eigen::MatrixXd y = p.transform(x);
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  EXPECT_NEAR(yc.squaredNorm(), xc.squaredNorm(), 1e-9 * xc.squaredNorm());
  EXPECT_FALSE(p.rank_deficient);
}

TEST(Pca, AxisAlignedCovariance) {
  Rng rng(10);
  Eigen::MatrixXd x = gaussian(4000, 2, rng);
  x.col(0) *= 3.0;
  const auto p = pca_fit(x, 1);
  EXPECT_NEAR(std::abs(p.components(0, 0)), 1.0, 1e-3);
  EXPECT_GT(p.components.row(0).cwiseAbs().maxCoeff(), 0.0);
  const Eigen::Index big = p.components(0, 0) > 0 ? 0 : 1;
  EXPECT_EQ(big, 0);  // sign convention: largest-magnitude entry positive
  EXPECT_NEAR(p.explained_variance(0), 9.0, 0.6);
}

TEST(Pca, RankDeficientIsFlagged) {
  Rng rng(11);
  const auto p = pca_fit(gaussian(5, 8, rng), 8);
  EXPECT_TRUE(p.rank_deficient);
  EXPECT_LE(p.components.rows(), 4);
}
