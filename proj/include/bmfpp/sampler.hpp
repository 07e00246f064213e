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

#pragma once

#include "bmfpp/approx.hpp"
#include "bmfpp/data.hpp"
#include "bmfpp/linalg.hpp"
#include "bmfpp/random.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

namespace bmfpp {

/// Conjugate hyperprior over a Gaussian's mean and precision.
struct NormalWishartPrior {
  Vector mu0;
  double beta0 = 2.0;
  Matrix w0;
  double nu0 = 0.0;

  /// mu0 = 0, beta0 = 2, W0 = I, nu0 = K.
  static NormalWishartPrior defaults(std::size_t k);
  void validate() const;
};

/// Parameters of the Normal-Wishart posterior given a set of rows.
struct NormalWishartPosterior {
  Vector mu;
  double beta = 0.0;
  Matrix w;  ///< Wishart scale W0*
  double nu = 0.0;
};

/// Row-level Gaussian hyperparameters for both factor matrices.
struct HyperState {
  Vector mu_x;
  Matrix lambda_x;
  Vector mu_w;
  Matrix lambda_w;
};

/// One observed entry seen from a row: the partner row index and the value.
struct Observation {
  std::uint32_t partner = 0;
  double value = 0.0;
};

/// Mean and precision of the Gaussian full conditional of one factor row.
RowPosterior row_conditional(std::span<const Observation> observations, const FactorMatrix& partners,
                             double tau, const Vector& prior_mean, const Matrix& prior_precision);

/// Draws one factor row from its Gaussian full conditional
///   precision* = P + tau * sum_d w_d w_d^T
///   mean*      = precision*^-1 (P mu + tau * sum_d y_d w_d)
/// via the Cholesky factor of precision*. `jittered` reports a diagonal retry.
Vector sample_row_conditional(std::span<const Observation> observations, const FactorMatrix& partners,
                              double tau, const Vector& prior_mean, const Matrix& prior_precision,
                              Rng& rng, bool* jittered = nullptr);

/// Normal-Wishart posterior for the rows of `rows`, using the centered scatter
///   [W0*]^-1 = W0^-1 + N S + (beta0 N / (beta0 + N)) (mu0 - xbar)(mu0 - xbar)^T
/// with S = (1/N) sum (x_i - xbar)(x_i - xbar)^T.
NormalWishartPosterior normal_wishart_posterior(const FactorMatrix& rows, const NormalWishartPrior& prior);

/// Lambda ~ Wishart(W0*, nu0 + N), then mu ~ Normal(mu0*, (beta0* Lambda)^-1).
std::pair<Vector, Matrix> sample_hyper_normal_wishart(const FactorMatrix& rows,
                                                      const NormalWishartPrior& prior, Rng& rng);

/// Component with the largest pi_c * Normal(x; mu_c, Lambda_c^-1); lowest index on ties.
std::size_t gmm_component_assign(const Vector& row, const GmmPosterior& gmm);

enum class PriorMode { kSharedHyper, kPropagatedGaussian, kPropagatedGmm };

/// Prior for all rows of one side: either the shared Normal-Wishart hierarchy
/// or one propagated approximation per row.
struct SidePrior {
  PriorMode mode = PriorMode::kSharedHyper;
  std::vector<RowPosterior> gaussians;
  std::vector<GmmPosterior> mixtures;

  static SidePrior shared() { return {}; }
  static SidePrior gaussian(std::vector<RowPosterior> rows);
  static SidePrior gmm(std::vector<GmmPosterior> rows);
  /// Propagated prior from a posterior file (GMM sets stay mixtures).
  static SidePrior from_posteriors(const PosteriorSet& set);

  bool propagated() const { return mode != PriorMode::kSharedHyper; }
  std::size_t size() const;
};

struct RowPriorSet {
  SidePrior x;
  SidePrior w;
};

struct GibbsConfig {
  std::size_t k = 10;
  double tau = 1.0;
  std::size_t iterations = 1200;
  std::size_t burn_in = 800;
  std::size_t thin = 2;
  std::uint64_t seed = 0;

  std::size_t retained() const { return (iterations - burn_in) / thin; }
  void validate() const;
};

struct ChainSample {
  FactorMatrix x;
  FactorMatrix w;
  HyperState hyper;
};

/// Post-burn-in, thinned Gibbs samples of one block.
struct SampleChain {
  GibbsConfig config;
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<ChainSample> samples;
  std::size_t jitter_events = 0;
};

/// Blocked Gibbs sampler over one (sub)matrix. Each sweep samples the
/// hyperparameters of every non-propagated side, then every X row, then every
/// W row. Propagated GMM priors pick a component per row per sweep.
SampleChain gibbs_run(const SparseMatrix& block, const RowPriorSet& priors,
                      const NormalWishartPrior& nw_prior, const GibbsConfig& config);

/// Elementwise average of the retained X and W samples.
std::pair<FactorMatrix, FactorMatrix> chain_posterior_mean(const SampleChain& chain);

/// Row `row` of side `side` across all retained samples, one sample per row of the result.
Matrix row_samples(const SampleChain& chain, Side side, std::size_t row);

/// x_n . w_d for every requested (n, d).
std::vector<double> predict(const FactorMatrix& x_mean, const FactorMatrix& w_mean,
                            std::span<const std::pair<std::size_t, std::size_t>> indices);

/// Predictions for every entry of `matrix`, in entry order.
std::vector<double> predict(const FactorMatrix& x_mean, const FactorMatrix& w_mean,
                            const SparseMatrix& matrix);

/// Gaussian log-likelihood of the observed entries under Y = X W^T + noise.
double log_likelihood(const FactorMatrix& x, const FactorMatrix& w, const SparseMatrix& matrix,
                      double tau);

/// Binary chain artifact; layout documented in README.md.
void write_chain(const std::filesystem::path& path, const SampleChain& chain);
SampleChain read_chain(const std::filesystem::path& path);

}  // namespace bmfpp
