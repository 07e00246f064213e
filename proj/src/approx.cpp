// Copyright 2026 The bmfpp Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "bmfpp/approx.hpp"

#include "bmfpp/errors.hpp"
#include "bmfpp/random.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace bmfpp {

void RowPosterior::validate() const {
  if (precision.rows() != mean.size() || precision.cols() != mean.size()) {
    throw NumericalError("row posterior: precision shape does not match mean");
  }
  if (!mean.allFinite() || !precision.allFinite()) throw NumericalError("row posterior: non-finite entries");
  if (!is_spd(precision)) throw NumericalError("row posterior: precision is not positive definite");
}

void GmmPosterior::validate() const {
  if (components.empty()) throw NumericalError("gmm posterior: no components");
  double total = 0.0;
  for (const auto& c : components) {
    if (!(c.weight > 0.0 && c.weight <= 1.0)) throw NumericalError("gmm posterior: weight outside (0, 1]");
    RowPosterior{c.mean, c.precision}.validate();
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw NumericalError("gmm posterior: weights do not sum to 1");
}

std::vector<std::size_t> Clustering::sizes() const {
  std::vector<std::size_t> out(centers.size(), 0);
  for (auto a : assignments) ++out[a];
  return out;
}

Clustering lambda_means(const Matrix& samples, double lambda, std::size_t max_iters,
                        std::uint64_t seed) {
  if (samples.rows() == 0) throw ValidationError("lambda_means: no samples");
  if (!(lambda > 0.0)) throw ValidationError("lambda_means: lambda must be positive");
  const auto n = static_cast<std::size_t>(samples.rows());
  const double lambda_sq = lambda * lambda;

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<Vector> centers{samples.row(static_cast<Eigen::Index>(pick(rng))).transpose()};
  std::vector<std::size_t> assign(n, 0);
  std::vector<std::size_t> previous;

  for (std::size_t iter = 0; iter < std::max<std::size_t>(max_iters, 1); ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = samples.row(static_cast<Eigen::Index>(i)).transpose();
      std::size_t best = 0;
      double best_d = (x - centers[0]).squaredNorm();
      for (std::size_t c = 1; c < centers.size(); ++c) {
        const double d = (x - centers[c]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (best_d > lambda_sq) {
        centers.emplace_back(x);
        best = centers.size() - 1;
      }
      assign[i] = best;
    }

    // Mean update; drop clusters that lost every member and relabel in order.
    std::vector<Vector> sums(centers.size(), Vector::Zero(samples.cols()));
    std::vector<std::size_t> counts(centers.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[assign[i]] += samples.row(static_cast<Eigen::Index>(i)).transpose();
      ++counts[assign[i]];
    }
    std::vector<std::size_t> relabel(centers.size(), 0);
    std::vector<Vector> kept;
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (counts[c] == 0) continue;
      relabel[c] = kept.size();
      kept.push_back(sums[c] / static_cast<double>(counts[c]));
    }
    for (auto& a : assign) a = relabel[a];
    centers = std::move(kept);

    if (assign == previous) break;
    previous = assign;
  }

  return Clustering{std::move(assign), std::move(centers), lambda};
}

RowPosterior fit_moment_matching(const Matrix& samples) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index k = samples.cols();
  if (k == 0) throw ValidationError("fit_moment_matching: zero-dimensional samples");
  if (n < k + 2) {
    throw ValidationError("fit_moment_matching: need at least K + 2 = " + std::to_string(k + 2) +
                          " samples, got " + std::to_string(n));
  }
  RowPosterior out;
  out.mean = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - out.mean.transpose();
  Matrix cov = (centered.transpose() * centered) / static_cast<double>(n);
  const double ridge = std::max(kCovarianceRidge * cov.diagonal().mean(), kCovarianceFloor);
  cov.diagonal().array() += ridge;
  try {
    out.precision = spd_inverse(symmetrize(cov));
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("fit_moment_matching: covariance not invertible: ") + e.what());
  }
  return out;
}

namespace {

Matrix gather_rows(const Matrix& samples, const std::vector<std::size_t>& assign, std::size_t cluster,
                   std::size_t count) {
  Matrix out(static_cast<Eigen::Index>(count), samples.cols());
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < assign.size(); ++i) {
    if (assign[i] == cluster) out.row(r++) = samples.row(static_cast<Eigen::Index>(i));
  }
  return out;
}

/// Cluster indices by size descending, ties by index ascending.
std::vector<std::size_t> clusters_by_size(const std::vector<std::size_t>& sizes) {
  std::vector<std::size_t> order(sizes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sizes[a] > sizes[b]; });
  return order;
}

}  // namespace

RowPosterior fit_dominant_mode(const Matrix& samples, double lambda, std::uint64_t seed) {
  const auto min_size = static_cast<std::size_t>(samples.cols() + 2);
  const Clustering clustering = lambda_means(samples, lambda, 100, seed);
  const auto sizes = clustering.sizes();
  const std::size_t largest = clusters_by_size(sizes).front();
  if (sizes[largest] < min_size) {
    spdlog::debug("dominant mode: largest cluster has {} samples (< {}); using all samples",
                  sizes[largest], min_size);
    return fit_moment_matching(samples);
  }
  return fit_moment_matching(gather_rows(samples, clustering.assignments, largest, sizes[largest]));
}

GmmPosterior fit_gmm(const Matrix& samples, double lambda, std::size_t top_n, std::uint64_t seed) {
  if (top_n == 0) throw ValidationError("fit_gmm: top_n must be at least 1");
  const auto min_size = static_cast<std::size_t>(samples.cols() + 2);
  const Clustering clustering = lambda_means(samples, lambda, 100, seed);
  const auto sizes = clustering.sizes();

  std::vector<std::size_t> kept;
  for (auto c : clusters_by_size(sizes)) {
    if (kept.size() == top_n) break;
    if (sizes[c] >= min_size) kept.push_back(c);
  }

  GmmPosterior out;
  if (kept.empty()) {
    spdlog::debug("gmm: no cluster with at least {} samples; using all samples", min_size);
    auto mm = fit_moment_matching(samples);
    out.components.push_back({1.0, std::move(mm.mean), std::move(mm.precision)});
    return out;
  }
  double total = 0.0;
  for (auto c : kept) total += static_cast<double>(sizes[c]);
  for (auto c : kept) {
    auto mm = fit_moment_matching(gather_rows(samples, clustering.assignments, c, sizes[c]));
    out.components.push_back(
        {static_cast<double>(sizes[c]) / total, std::move(mm.mean), std::move(mm.precision)});
  }
  return out;
}

RowPosterior pool_gmm(const GmmPosterior& gmm) {
  if (gmm.components.empty()) throw ValidationError("pool_gmm: empty mixture");
  if (gmm.components.size() == 1) {
    return {gmm.components.front().mean, gmm.components.front().precision};
  }
  const Eigen::Index k = gmm.dim();
  Vector mean = Vector::Zero(k);
  for (const auto& c : gmm.components) mean += c.weight * c.mean;
  Matrix cov = Matrix::Zero(k, k);
  for (const auto& c : gmm.components) {
    const Vector diff = c.mean - mean;
    cov += c.weight * (spd_inverse(c.precision) + diff * diff.transpose());
  }
  return {std::move(mean), spd_inverse(symmetrize(cov))};
}

double default_lambda(const Matrix& samples, std::uint64_t seed, std::size_t max_subsample) {
  const auto n = static_cast<std::size_t>(samples.rows());
  if (n < 2) return 1.0;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n > max_subsample) {
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_subsample);
  }
  std::vector<double> dists;
  dists.reserve(idx.size() * (idx.size() - 1) / 2);
  for (std::size_t a = 0; a < idx.size(); ++a) {
    for (std::size_t b = a + 1; b < idx.size(); ++b) {
      dists.push_back((samples.row(static_cast<Eigen::Index>(idx[a])) -
                       samples.row(static_cast<Eigen::Index>(idx[b])))
                          .norm());
    }
  }
  const auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
  std::nth_element(dists.begin(), mid, dists.end());
  double median = *mid;
  if (dists.size() % 2 == 0) {
    median = 0.5 * (median + *std::max_element(dists.begin(), mid));
  }
  return std::max(median, 1e-12);
}

ApproxKind parse_approx_kind(std::string_view name) {
  if (name == "mm" || name == "MM") return ApproxKind::kMomentMatching;
  if (name == "dm" || name == "DM") return ApproxKind::kDominantMode;
  if (name == "gmm" || name == "GMM") return ApproxKind::kGmm;
  throw ValidationError("unknown approximation kind '" + std::string(name) + "'");
}

std::string_view to_string(ApproxKind kind) {
  switch (kind) {
    case ApproxKind::kMomentMatching:
      return "mm";
    case ApproxKind::kDominantMode:
      return "dm";
    case ApproxKind::kGmm:
      return "gmm";
  }
  return "mm";
}

std::string_view to_string(Side side) { return side == Side::kX ? "X" : "W"; }

RowPosterior PosteriorSet::gaussian(std::size_t i) const {
  return kind == ApproxKind::kGmm ? pool_gmm(mixtures.at(i)) : gaussians.at(i);
}

PosteriorSet fit_posteriors(const std::vector<Matrix>& clouds, Side side, std::size_t row_begin,
                            const ApproxOptions& options, std::uint64_t seed) {
  PosteriorSet out;
  out.side = side;
  out.row_begin = row_begin;
  out.kind = options.kind;
  out.k = clouds.empty() ? 0 : static_cast<std::size_t>(clouds.front().cols());
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const auto& cloud = clouds[i];
    const std::uint64_t row_seed = derive_seed(seed, {static_cast<std::uint64_t>(side), i});
    const bool clustered = options.kind != ApproxKind::kMomentMatching;
    const double lambda = !clustered                         ? 0.0
                          : options.lambda.value_or(0.0) > 0.0 ? *options.lambda
                                                               : default_lambda(cloud, row_seed);
    switch (options.kind) {
      case ApproxKind::kMomentMatching:
        out.gaussians.push_back(fit_moment_matching(cloud));
        break;
      case ApproxKind::kDominantMode:
        out.gaussians.push_back(fit_dominant_mode(cloud, lambda, row_seed));
        break;
      case ApproxKind::kGmm:
        out.mixtures.push_back(fit_gmm(cloud, lambda, options.top_n, row_seed));
        break;
    }
  }
  return out;
}

}  // namespace bmfpp
