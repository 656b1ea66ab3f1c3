#include <algorithm>
#include <cmath>

#include "rcs/errors.hpp"
#include "rcs/projection.hpp"

namespace rcs {

Eigen::MatrixXd PcaModel::transform(const Eigen::MatrixXd& rows) const {
  if (rows.cols() != mean.size()) fail(ErrorCode::DimensionMismatch, "PCA input dimension mismatch");
  return (rows.rowwise() - mean.transpose()) * components.transpose();
}

PcaModel pca_fit(const Eigen::MatrixXd& train, std::size_t out_dim) {
  const Eigen::Index n = train.rows(), d = train.cols();
  if (n < 2) fail(ErrorCode::TooFewSamples, "PCA needs at least two samples");
  if (out_dim == 0) fail(ErrorCode::InvalidArgument, "PCA output dimension must be positive");

  PcaModel model;
  model.requested = out_dim;
  model.mean = train.colwise().mean().transpose();
  const Eigen::MatrixXd centered = train.rowwise() - model.mean.transpose();

  // Eigenvectors of the d x d covariance, or of the n x n Gram matrix mapped
  // back when there are fewer samples than dimensions.
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;  // columns in feature space, ascending eigenvalue
  if (d <= n) {
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    values = eig.eigenvalues();
    vectors = eig.eigenvectors();
  } else {
    const Eigen::MatrixXd gram = centered * centered.transpose() / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    values = eig.eigenvalues();
    vectors = centered.transpose() * eig.eigenvectors();
    for (Eigen::Index k = 0; k < vectors.cols(); ++k) {
      const double norm = vectors.col(k).norm();
      if (norm > 0) vectors.col(k) /= norm;
    }
  }

  const double top = std::max(values.maxCoeff(), 0.0);
  const double tol = std::max(top, 1e-300) * 1e-12;
  std::vector<Eigen::Index> usable;
  for (Eigen::Index k = values.size() - 1; k >= 0; --k) {
    if (values(k) > tol) usable.push_back(k);
  }
  const std::size_t count = std::min(out_dim, usable.size());
  model.rank_deficient = count < out_dim;
  model.components.resize(static_cast<Eigen::Index>(count), d);
  model.explained_variance.resize(static_cast<Eigen::Index>(count));
  for (std::size_t r = 0; r < count; ++r) {
    Eigen::VectorXd v = vectors.col(usable[r]);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    model.components.row(static_cast<Eigen::Index>(r)) = v.transpose();
    model.explained_variance(static_cast<Eigen::Index>(r)) = values(usable[r]);
  }
  return model;
}

PcaProjection pca_fit_project(const FeatureSet& train, const FeatureSet& apply, std::size_t out_dim) {
  if (train.dim != apply.dim) fail(ErrorCode::DimensionMismatch, "PCA train/apply dimensions differ");
  PcaProjection out;
  out.model = pca_fit(train.matrix(), out_dim);
  const auto width = static_cast<std::size_t>(out.model.components.rows());
  out.features = apply.empty() ? apply.empty_like(width) : replace_vectors(apply, out.model.transform(apply.matrix()));
  return out;
}

}  // namespace rcs
