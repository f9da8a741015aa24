// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ddistill/convnet.hpp"
#include "ddistill/data.hpp"
#include "ddistill/error.hpp"
#include "ddistill/sampler.hpp"
#include "ddistill/trainer.hpp"

namespace ddistill {

/// Mergeable sufficient statistics (count, sum, sum of outer products) of
/// d-dimensional feature vectors.
class GaussianStats {
 public:
  GaussianStats() = default;
  explicit GaussianStats(int dim) : sum_(Eigen::VectorXd::Zero(dim)), outer_(Eigen::MatrixXd::Zero(dim, dim)) {}

  /// Rebuilds sufficient statistics from a stored mean and unbiased covariance.
  static GaussianStats from_moments(std::uint64_t n, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
    GaussianStats s(static_cast<int>(mean.size()));
    s.n_ = n;
    s.sum_ = mean * static_cast<double>(n);
    const double nm1 = n > 1 ? static_cast<double>(n - 1) : 0.0;
    s.outer_ = cov * nm1 + static_cast<double>(n) * mean * mean.transpose();
    return s;
  }

  int dim() const { return static_cast<int>(sum_.size()); }
  std::uint64_t count() const { return n_; }

  /// Adds `rows` feature vectors stored row-major (rows × dim).
  void accumulate(std::span<const double> features, std::size_t rows) {
    if (features.size() != rows * static_cast<std::size_t>(dim())) {
      throw ConfigError("accumulate: feature dimension mismatch (expected " + std::to_string(dim()) + ")");
    }
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(features.data(),
                                                                                                 rows, dim());
    sum_ += x.colwise().sum().transpose();
    outer_.noalias() += x.transpose() * x;
    n_ += rows;
  }

  void accumulate(std::span<const float> features, std::size_t rows) {
    std::vector<double> d(features.begin(), features.end());
    accumulate(std::span<const double>(d), rows);
  }

  void merge(const GaussianStats& other) {
    if (other.dim() != dim()) throw ConfigError("merge: dimension mismatch");
    sum_ += other.sum_;
    outer_ += other.outer_;
    n_ += other.n_;
  }

  Eigen::VectorXd mean() const {
    if (n_ == 0) throw NumericError("GaussianStats: mean of zero samples");
    return sum_ / static_cast<double>(n_);
  }

  /// Unbiased covariance; requires n >= 2.
  Eigen::MatrixXd cov() const {
    if (n_ < 2) throw NumericError("GaussianStats: covariance needs n >= 2 (have " + std::to_string(n_) + ")");
    const Eigen::VectorXd m = mean();
    Eigen::MatrixXd c = (outer_ - static_cast<double>(n_) * m * m.transpose()) / static_cast<double>(n_ - 1);
    return 0.5 * (c + c.transpose());
  }

  std::uint64_t fingerprint = 0;  // feature extractor the stats were computed with

 private:
  std::uint64_t n_ = 0;
  Eigen::VectorXd sum_;
  Eigen::MatrixXd outer_;
};

/// Symmetric PSD square root via eigendecomposition; eigenvalues down to
/// -1e-8·max(1, ||S||) are treated as zero.
inline Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& s) {
  if (s.rows() != s.cols()) throw ConfigError("matrix_sqrt_psd: matrix is not square");
  const double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-6 * scale) {
    throw NumericError("matrix_sqrt_psd: input is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (s + s.transpose()));
  if (eig.info() != Eigen::Success) throw NumericError("matrix_sqrt_psd: eigendecomposition failed");
  Eigen::VectorXd vals = eig.eigenvalues();
  const double floor = -1e-8 * std::max(1.0, vals.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < vals.size(); ++i) {
    if (vals[i] < floor) {
      throw NumericError("matrix_sqrt_psd: eigenvalue " + std::to_string(vals[i]) + " below noise floor");
    }
    vals[i] = std::sqrt(std::max(vals[i], 0.0));
  }
  Eigen::MatrixXd r = eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (r + r.transpose());
}

/// ||mu1 - mu2||² + Tr(S1 + S2 - 2 sqrt(S1^½ S2 S1^½)).
inline double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1, const Eigen::VectorXd& mu2,
                               const Eigen::MatrixXd& s2) {
  if (mu1.size() != mu2.size() || s1.rows() != mu1.size() || s2.rows() != mu2.size()) {
    throw ConfigError("frechet_distance: dimension mismatch");
  }
  const Eigen::MatrixXd r1 = matrix_sqrt_psd(s1);
  const Eigen::MatrixXd inner = r1 * s2 * r1;
  const Eigen::MatrixXd root = matrix_sqrt_psd(0.5 * (inner + inner.transpose()));
  const double d = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * root.trace();
  const double tol = 1e-6 * std::max(1.0, s1.trace() + s2.trace());
  if (d < -tol) throw NumericError("frechet_distance: negative result " + std::to_string(d));
  return std::max(d, 0.0);
}

inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.count() < 2 || b.count() < 2) throw ConfigError("frechet_distance: both statistics need n >= 2");
  if (a.dim() != b.dim()) throw ConfigError("frechet_distance: dimension mismatch");
  return frechet_distance(a.mean(), a.cov(), b.mean(), b.cov());
}

/// Frozen image embedding backed by a trained classifier's penultimate layer.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(ConvNet<float> net) : net_(std::move(net)), fingerprint_(net_.params().fingerprint()) {}

  int dim() const { return net_.config().feature_dim(); }
  std::uint64_t fingerprint() const { return fingerprint_; }
  const ConvNet<float>& network() const { return net_; }

  std::vector<double> extract(const LabeledImageBatch& images, std::size_t batch = 128) const {
    std::vector<double> out;
    out.reserve(images.size() * static_cast<std::size_t>(dim()));
    for (std::size_t start = 0; start < images.size(); start += batch) {
      const std::size_t end = std::min(images.size(), start + batch);
      const auto pix = std::span<const float>(images.pixels)
                           .subspan(start * images.image_numel(), (end - start) * images.image_numel());
      const auto f = net_.features(pix, static_cast<int>(end - start));
      out.insert(out.end(), f.begin(), f.end());
    }
    return out;
  }

  GaussianStats stats(const LabeledImageBatch& images) const {
    GaussianStats s(dim());
    s.fingerprint = fingerprint_;
    const auto f = extract(images);
    s.accumulate(std::span<const double>(f), images.size());
    return s;
  }

 private:
  ConvNet<float> net_;
  std::uint64_t fingerprint_;
};

/// Class-balanced labels 0,1,...,C-1,0,1,... of length n.
inline std::vector<int> balanced_labels(std::size_t n, int num_classes) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % static_cast<std::size_t>(num_classes));
  return y;
}

/// Fréchet distance of freshly generated, class-balanced samples against
/// reference statistics computed with the same extractor.
template <class T>
double fid_eval(const Denoiser<T>& model, const NoiseSchedule& sched, const FeatureExtractor& extractor,
                const GaussianStats& reference, std::size_t n_samples, const SamplerConfig& cfg) {
  if (n_samples < 2) throw ConfigError("fid_eval: n_samples must be >= 2");
  if (reference.fingerprint != extractor.fingerprint()) {
    throw DataError("fid_eval: reference statistics were computed with a different feature extractor");
  }
  const auto labels = balanced_labels(n_samples, model.config().num_classes);
  const auto images = sample_class_batch(model, sched, labels, cfg);
  return frechet_distance(extractor.stats(images), reference);
}

/// CSV metric log shared by training and reporting:
/// iteration,loss,fid,wall_seconds with empty cells for missing values.
class MetricLog {
 public:
  static constexpr const char* kHeader = "iteration,loss,fid,wall_seconds";

  explicit MetricLog(const std::string& path, bool append = false) : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw DataError("cannot open metric log '" + path + "'");
    if (!append) out_ << kHeader << '\n';
  }

  void write(const MetricRow& r) {
    out_ << r.iteration << ',' << cell(r.loss) << ',' << cell(r.fid) << ',' << cell(r.wall_seconds) << '\n';
    out_.flush();
  }

  static std::string cell(double v) {
    if (std::isnan(v)) return "";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  }

 private:
  std::ofstream out_;
};

}  // namespace ddistill
