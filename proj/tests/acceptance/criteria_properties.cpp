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

// Randomized property suites: identifiability and the approximation layer.
#include "acceptance/acceptance.hpp"
#include "oracles/gaussian_oracle.hpp"
#include "unit/test_support.hpp"

#include "bmfpp/approx.hpp"
#include "bmfpp/data.hpp"
#include "bmfpp/eval.hpp"
#include "bmfpp/random.hpp"
#include "bmfpp/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace bmfpp::acceptance {

namespace {

constexpr std::size_t kFlipInstances = 200;
constexpr double kFlipRelTol = 1e-13;  // permuted sums reorder K-term dot products
constexpr std::size_t kAlignTrialsPerK = 100;
constexpr std::size_t kMaxAlignK = 5;

constexpr std::size_t kPropertyInstances = 150;
constexpr double kPoolRelTol = 1e-10;
constexpr double kTranslationMeanTol = 1e-10;
constexpr double kTranslationPrecisionRelTol = 1e-9;
constexpr std::size_t kLambdaGrid = 12;

/// Columns permuted by `perm` and multiplied by `signs`: out.col(perm[c]) = signs[c] * m.col(c).
FactorMatrix transform(const FactorMatrix& m, const std::vector<std::size_t>& perm, const std::vector<int>& signs) {
  FactorMatrix out(m.rows(), m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    out.col(static_cast<Eigen::Index>(perm[c])) = static_cast<double>(signs[c]) * m.col(c);
  }
  return out;
}

std::vector<int> random_signs(Rng& rng, std::size_t k) {
  std::bernoulli_distribution coin(0.5);
  std::vector<int> s(k);
  for (auto& v : s) v = coin(rng) ? -1 : 1;
  return s;
}

std::vector<std::size_t> random_permutation(Rng& rng, std::size_t k) {
  std::vector<std::size_t> p(k);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace

Outcome identifiability() {
  Rng rng(derive_seed(6, {0xc6}));
  double worst_rel = 0.0;
  std::size_t sign_only_mismatch = 0;
  for (std::size_t t = 0; t < kFlipInstances; ++t) {
    const std::size_t k = 1 + t % kMaxAlignK;
    const auto [y, truth] = simulate(30, 20, k, 1.0, t);
    const FactorMatrix x = testing::random_matrix(rng, 30, static_cast<Eigen::Index>(k));
    const FactorMatrix w = testing::random_matrix(rng, 20, static_cast<Eigen::Index>(k));
    const double ll = log_likelihood(x, w, y, 1.0);

    std::vector<std::size_t> identity(k);
    std::iota(identity.begin(), identity.end(), 0);
    const auto signs = random_signs(rng, k);
    const double flipped = log_likelihood(transform(x, identity, signs), transform(w, identity, signs), y, 1.0);
    sign_only_mismatch += flipped != ll;  // (-a)(-b) == ab exactly in IEEE arithmetic

    const auto perm = random_permutation(rng, k);
    const double moved = log_likelihood(transform(x, perm, signs), transform(w, perm, signs), y, 1.0);
    worst_rel = std::max(worst_rel, std::abs(moved - ll) / std::abs(ll));
  }

  std::size_t align_failures = 0, trials = 0;
  for (std::size_t k = 1; k <= kMaxAlignK; ++k) {
    for (std::size_t t = 0; t < kAlignTrialsPerK; ++t) {
      const FactorMatrix a = testing::random_matrix(rng, 60, static_cast<Eigen::Index>(k));
      const auto perm = random_permutation(rng, k);
      const auto signs = random_signs(rng, k);
      const FactorMatrix b = transform(a, perm, signs);
      const auto greedy = align_latent_dimensions(a, b);
      const auto exhaustive = align_latent_dimensions_exhaustive(a, b);
      ++trials;
      align_failures += !(greedy.permutation == perm && greedy.signs == signs && exhaustive.permutation == perm &&
                          exhaustive.signs == signs && apply_alignment(b, greedy) == a);
    }
  }
  const bool ok = sign_only_mismatch == 0 && worst_rel <= kFlipRelTol && align_failures == 0;
  return {"C6", "sign-flip likelihood invariance; alignment recovers permutation+sign for K<=5", verdict(ok),
          strf("%zu likelihood instances: %zu sign-flip mismatches, max rel diff with permutation %.1e (tol %.0e); "
              "%zu/%zu alignments wrong",
              kFlipInstances, sign_only_mismatch, worst_rel, kFlipRelTol, align_failures, trials)};
}

Outcome approximation_properties() {
  Rng rng(derive_seed(9, {0xc9}));
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> unit(0.05, 1.0);

  // pooled mixture moments vs. the closed form in long double
  long double worst_pool = 0.0L;
  for (std::size_t t = 0; t < kPropertyInstances; ++t) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(t % 5);
    const std::size_t c = 1 + t % 4;
    GmmPosterior gmm;
    double total = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      gmm.components.push_back({unit(rng), 3.0 * testing::random_vector(rng, k), testing::random_spd(rng, k)});
      total += gmm.components.back().weight;
    }
    for (auto& comp : gmm.components) comp.weight /= total;
    const auto pooled = pool_gmm(gmm);
    const auto ref = oracle::pooled_moments(gmm);
    worst_pool = std::max({worst_pool, oracle::relative_error(pooled.mean, ref.mean),
                           oracle::relative_error(pooled.precision, oracle::inverse(ref.covariance))});
  }

  // moment matching commutes with translation
  double worst_mean = 0.0, worst_prec = 0.0;
  for (std::size_t t = 0; t < kPropertyInstances; ++t) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(t % 5);
    const Eigen::Index s = 20 + static_cast<Eigen::Index>(t % 7) * 30;
    const Matrix samples = testing::random_matrix(rng, s, k) * testing::random_spd(rng, k);
    const Vector shift = 5.0 * testing::random_vector(rng, k);
    const Matrix moved = samples.rowwise() + shift.transpose();
    const auto a = fit_moment_matching(samples);
    const auto b = fit_moment_matching(moved);
    worst_mean = std::max(worst_mean, (b.mean - a.mean - shift).cwiseAbs().maxCoeff() / (1.0 + shift.norm()));
    worst_prec = std::max(worst_prec, (b.precision - a.precision).norm() / a.precision.norm());
  }

  // lambda-means cluster counts never grow with lambda (same seed)
  std::size_t monotone_violations = 0;
  for (std::size_t t = 0; t < kPropertyInstances; ++t) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(t % 4);
    const std::size_t clusters = 1 + t % 5;
    const Eigen::Index s = 40 + static_cast<Eigen::Index>(t % 6) * 25;
    Matrix samples(s, k);
    std::vector<Vector> centres;
    for (std::size_t c = 0; c < clusters; ++c) centres.push_back(4.0 * testing::random_vector(rng, k));
    for (Eigen::Index i = 0; i < s; ++i) {
      samples.row(i) = (centres[static_cast<std::size_t>(i) % clusters] + 0.5 * testing::random_vector(rng, k)).transpose();
    }
    std::size_t previous = std::numeric_limits<std::size_t>::max();
    for (std::size_t g = 0; g < kLambdaGrid; ++g) {
      const double lambda = 0.05 * std::pow(2.0, static_cast<double>(g));
      const std::size_t count = lambda_means(samples, lambda, 100, t).count();
      monotone_violations += count > previous;
      previous = count;
    }
  }

  const bool ok = worst_pool < kPoolRelTol && worst_mean < kTranslationMeanTol &&
                  worst_prec < kTranslationPrecisionRelTol && monotone_violations == 0;
  return {"C9", "pool_gmm moments, moment-matching translation equivariance, lambda-means monotonicity",
          verdict(ok),
          strf("%zu instances each: pool rel err %.1e (tol %.0e); translation mean err %.1e, precision rel err "
              "%.1e; %zu monotonicity violations over a %zu-point lambda grid",
              kPropertyInstances, static_cast<double>(worst_pool), kPoolRelTol, worst_mean, worst_prec,
              monotone_violations, kLambdaGrid)};
}

}  // namespace bmfpp::acceptance
