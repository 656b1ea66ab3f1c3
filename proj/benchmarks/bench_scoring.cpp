// Single-sample scoring cost at the default 4096 -> 256 geometry.

#include <benchmark/benchmark.h>

#include "rcs/detectors.hpp"
#include "rcs/projection.hpp"
#include "rcs/random.hpp"

namespace {

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, rcs::Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

rcs::Detector mcd_detector(Eigen::Index d, rcs::Rng& rng) {
  rcs::Detector det;
  det.options.variant = rcs::Variant::Mcd;
  det.dim = static_cast<std::size_t>(d);
  for (std::uint32_t i = 0; i < 5; ++i) {
    const Eigen::MatrixXd a = gaussian(d, d, rng);
    Eigen::MatrixXd cov = a * a.transpose() / static_cast<double>(d);
    cov.diagonal().array() += 0.1;
    auto& side = i < 3 ? det.clusters.benign : det.clusters.malicious;
    side.push_back(rcs::make_cluster(gaussian(d, 1, rng).col(0), cov, i));
  }
  return det;
}

rcs::Detector kcd_detector(Eigen::Index d, std::size_t bank_size, rcs::Rng& rng) {
  rcs::FeatureSet bank;
  bank.dim = static_cast<std::size_t>(d);
  bank.catalog = {{1, "benign"}, {2, "malicious"}};
  for (std::size_t i = 0; i < bank_size; ++i) {
    const bool benign = i < bank_size / 2;
    bank.records.push_back(rcs::make_record(gaussian(d, 1, rng).col(0), benign ? 1 : 2,
                                            benign ? rcs::Label::Benign : rcs::Label::Malicious));
  }
  rcs::Detector det;
  det.options.variant = rcs::Variant::Kcd;
  det.dim = static_cast<std::size_t>(d);
  det.neighbors = rcs::make_neighbor_bank(bank, 50);
  return det;
}

void BM_Project(benchmark::State& state) {
  rcs::ProjectionConfig c;
  const auto model = rcs::init_projection(c);
  rcs::Rng rng(1);
  const Eigen::MatrixXd x = gaussian(1, 4096, rng);
  for (auto _ : state) benchmark::DoNotOptimize(rcs::project_rows(model, x));
}
BENCHMARK(BM_Project)->Unit(benchmark::kMicrosecond);

void BM_McdScore(benchmark::State& state) {
  rcs::Rng rng(2);
  const auto det = mcd_detector(256, rng);
  const Eigen::VectorXd z = gaussian(256, 1, rng).col(0);
  for (auto _ : state) benchmark::DoNotOptimize(det.score(z));
}
BENCHMARK(BM_McdScore)->Unit(benchmark::kMicrosecond);

void BM_KcdScore(benchmark::State& state) {
  rcs::Rng rng(3);
  const auto det = kcd_detector(256, static_cast<std::size_t>(state.range(0)), rng);
  const Eigen::VectorXd z = gaussian(256, 1, rng).col(0);
  for (auto _ : state) benchmark::DoNotOptimize(det.score(z));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_KcdScore)->Arg(1000)->Arg(5000)->Arg(20000)->Unit(benchmark::kMicrosecond)->Complexity(benchmark::oN);

}  // namespace

BENCHMARK_MAIN();
