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

#include "bmfpp/sampler.hpp"

#include "binary_io.hpp"
#include "bmfpp/errors.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <numbers>
#include <string>

namespace bmfpp {

NormalWishartPrior NormalWishartPrior::defaults(std::size_t k) {
  const auto kk = static_cast<Eigen::Index>(k);
  return {Vector::Zero(kk), 2.0, Matrix::Identity(kk, kk), static_cast<double>(k)};
}

void NormalWishartPrior::validate() const {
  const Eigen::Index k = mu0.size();
  if (k == 0 || w0.rows() != k || w0.cols() != k) throw ValidationError("normal-wishart prior: shape mismatch");
  if (!(beta0 > 0.0)) throw ValidationError("normal-wishart prior: beta0 must be positive");
  if (nu0 < static_cast<double>(k)) throw ValidationError("normal-wishart prior: nu0 must be at least K");
  if (!is_symmetric(w0) || !is_spd(w0)) throw ValidationError("normal-wishart prior: W0 must be SPD");
}

namespace {

/// Conditional precision and precision-weighted mean (the "rhs") of one row.
std::pair<Matrix, Vector> accumulate_conditional(std::span<const Observation> observations,
                                                 const FactorMatrix& partners, double tau,
                                                 const Vector& prior_mean, const Matrix& prior_precision) {
  const Eigen::Index k = prior_mean.size();
  Matrix precision = prior_precision;
  Vector rhs = prior_precision * prior_mean;
  if (!observations.empty()) {
    const auto m = static_cast<Eigen::Index>(observations.size());
    Matrix gathered(m, k);
    Vector values(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      gathered.row(i) = partners.row(observations[static_cast<std::size_t>(i)].partner);
      values(i) = observations[static_cast<std::size_t>(i)].value;
    }
    precision.selfadjointView<Eigen::Lower>().rankUpdate(gathered.transpose(), tau);
    precision.triangularView<Eigen::StrictlyUpper>() = precision.transpose();
    rhs.noalias() += tau * (gathered.transpose() * values);
  }
  return {std::move(precision), std::move(rhs)};
}

}  // namespace

RowPosterior row_conditional(std::span<const Observation> observations, const FactorMatrix& partners,
                             double tau, const Vector& prior_mean, const Matrix& prior_precision) {
  auto [precision, rhs] = accumulate_conditional(observations, partners, tau, prior_mean, prior_precision);
  const Matrix l = cholesky_lower(precision);
  Vector mean = l.triangularView<Eigen::Lower>().solve(rhs);
  l.transpose().triangularView<Eigen::Upper>().solveInPlace(mean);
  return {std::move(mean), std::move(precision)};
}

Vector sample_row_conditional(std::span<const Observation> observations, const FactorMatrix& partners,
                              double tau, const Vector& prior_mean, const Matrix& prior_precision,
                              Rng& rng, bool* jittered) {
  auto [precision, rhs] = accumulate_conditional(observations, partners, tau, prior_mean, prior_precision);
  const Matrix l = cholesky_lower(precision, jittered);
  const Eigen::Index k = prior_mean.size();
  // x = L^-T (L^-1 rhs + z) has mean precision^-1 rhs and covariance precision^-1.
  Vector x = l.triangularView<Eigen::Lower>().solve(rhs);
  x += standard_normal(rng, k);
  l.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
  return x;
}

NormalWishartPosterior normal_wishart_posterior(const FactorMatrix& rows, const NormalWishartPrior& prior) {
  const Eigen::Index n_rows = rows.rows();
  if (n_rows == 0) throw ValidationError("normal-wishart posterior: no rows");
  if (rows.cols() != prior.mu0.size()) throw ValidationError("normal-wishart posterior: dimension mismatch");
  const auto n = static_cast<double>(n_rows);
  const Vector xbar = rows.colwise().mean().transpose();
  const Matrix centered = rows.rowwise() - xbar.transpose();
  const Matrix scatter = (centered.transpose() * centered) / n;
  const Vector diff = prior.mu0 - xbar;

  NormalWishartPosterior post;
  post.beta = prior.beta0 + n;
  post.nu = prior.nu0 + n;
  post.mu = (prior.beta0 * prior.mu0 + n * xbar) / post.beta;
  const Matrix w_inv = spd_inverse(prior.w0) + n * scatter +
                       (prior.beta0 * n / post.beta) * (diff * diff.transpose());
  try {
    post.w = spd_inverse(symmetrize(w_inv));
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("normal-wishart posterior: scale not SPD: ") + e.what());
  }
  return post;
}

std::pair<Vector, Matrix> sample_hyper_normal_wishart(const FactorMatrix& rows,
                                                      const NormalWishartPrior& prior, Rng& rng) {
  const auto post = normal_wishart_posterior(rows, prior);
  Matrix lambda = sample_wishart(rng, post.w, post.nu);
  const Matrix l = cholesky_lower(post.beta * lambda);
  Vector mu = sample_gaussian_precision_chol(rng, post.mu, l);
  return {std::move(mu), std::move(lambda)};
}

std::size_t gmm_component_assign(const Vector& row, const GmmPosterior& gmm) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < gmm.components.size(); ++c) {
    const auto& comp = gmm.components[c];
    const Matrix l = cholesky_lower(comp.precision);
    const Vector diff = row - comp.mean;
    // (x - mu)^T Lambda (x - mu) = |L^T (x - mu)|^2
    const double quad = (l.transpose() * diff).squaredNorm();
    const double half_logdet = l.diagonal().array().log().sum();
    const double score = std::log(comp.weight) + half_logdet - 0.5 * quad;
    if (score > best_score) {
      best_score = score;
      best = c;
    }
  }
  return best;
}

SidePrior SidePrior::gaussian(std::vector<RowPosterior> rows) {
  SidePrior p;
  p.mode = PriorMode::kPropagatedGaussian;
  p.gaussians = std::move(rows);
  return p;
}

SidePrior SidePrior::gmm(std::vector<GmmPosterior> rows) {
  SidePrior p;
  p.mode = PriorMode::kPropagatedGmm;
  p.mixtures = std::move(rows);
  return p;
}

SidePrior SidePrior::from_posteriors(const PosteriorSet& set) {
  return set.kind == ApproxKind::kGmm ? gmm(set.mixtures) : gaussian(set.gaussians);
}

std::size_t SidePrior::size() const {
  switch (mode) {
    case PriorMode::kSharedHyper:
      return 0;
    case PriorMode::kPropagatedGaussian:
      return gaussians.size();
    case PriorMode::kPropagatedGmm:
      return mixtures.size();
  }
  return 0;
}

void GibbsConfig::validate() const {
  if (k == 0) throw ValidationError("gibbs config: K must be at least 1");
  if (!(tau > 0.0)) throw ValidationError("gibbs config: tau must be positive");
  if (thin == 0) throw ValidationError("gibbs config: thin must be at least 1");
  if (iterations <= burn_in) throw ValidationError("gibbs config: iterations must exceed burn-in");
}

namespace {

/// Compressed per-row (or per-column) observation lists.
struct Adjacency {
  std::vector<std::size_t> offsets;
  std::vector<Observation> items;

  std::span<const Observation> at(std::size_t i) const {
    return {items.data() + offsets[i], offsets[i + 1] - offsets[i]};
  }
};

Adjacency build_adjacency(const SparseMatrix& m, bool by_row) {
  const std::size_t n = by_row ? m.n_rows() : m.n_cols();
  Adjacency adj;
  adj.offsets.assign(n + 1, 0);
  for (const auto& e : m.entries()) ++adj.offsets[(by_row ? e.row : e.col) + 1];
  for (std::size_t i = 0; i < n; ++i) adj.offsets[i + 1] += adj.offsets[i];
  adj.items.resize(m.nnz());
  std::vector<std::size_t> fill(adj.offsets.begin(), adj.offsets.end() - 1);
  for (const auto& e : m.entries()) {
    const std::size_t key = by_row ? e.row : e.col;
    adj.items[fill[key]++] = {by_row ? e.col : e.row, e.value};
  }
  return adj;
}

/// Draw from the discrete distribution given by mixture weights.
std::size_t sample_component(const GmmPosterior& gmm, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double u = unif(rng);
  for (std::size_t c = 0; c + 1 < gmm.components.size(); ++c) {
    u -= gmm.components[c].weight;
    if (u < 0.0) return c;
  }
  return gmm.components.size() - 1;
}

class SideSampler {
 public:
  SideSampler(const SidePrior& prior, const NormalWishartPrior& nw, Side side)
      : prior_(prior), nw_(nw), side_(side) {
    nw_w0_inv_chol_ = cholesky_lower(spd_inverse(nw.w0));
  }

  void initialize(FactorMatrix& rows, Rng& rng) const {
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      const auto i = static_cast<std::size_t>(r);
      switch (prior_.mode) {
        case PriorMode::kSharedHyper:
          rows.row(r) = sample_gaussian_precision_chol(rng, nw_.mu0, nw_w0_inv_chol_).transpose();
          break;
        case PriorMode::kPropagatedGaussian: {
          const auto& g = prior_.gaussians[i];
          rows.row(r) = sample_gaussian_precision_chol(rng, g.mean, cholesky_lower(g.precision)).transpose();
          break;
        }
        case PriorMode::kPropagatedGmm: {
          const auto& comp = prior_.mixtures[i].components[sample_component(prior_.mixtures[i], rng)];
          rows.row(r) = sample_gaussian_precision_chol(rng, comp.mean, cholesky_lower(comp.precision)).transpose();
          break;
        }
      }
    }
  }

  /// Resamples every row of `rows` given the partner side. Returns the jitter count.
  std::size_t sweep(FactorMatrix& rows, const FactorMatrix& partners, const Adjacency& adj, double tau,
                    const Vector& hyper_mu, const Matrix& hyper_lambda, Rng& rng, std::size_t sweep_index) const {
    std::size_t jitters = 0;
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      const auto i = static_cast<std::size_t>(r);
      const Vector* mean = &hyper_mu;
      const Matrix* precision = &hyper_lambda;
      if (prior_.mode == PriorMode::kPropagatedGaussian) {
        mean = &prior_.gaussians[i].mean;
        precision = &prior_.gaussians[i].precision;
      } else if (prior_.mode == PriorMode::kPropagatedGmm) {
        const Vector current = rows.row(r).transpose();
        const auto& comp = prior_.mixtures[i].components[gmm_component_assign(current, prior_.mixtures[i])];
        mean = &comp.mean;
        precision = &comp.precision;
      }
      bool jittered = false;
      try {
        rows.row(r) = sample_row_conditional(adj.at(i), partners, tau, *mean, *precision, rng, &jittered).transpose();
      } catch (const NumericalError& e) {
        throw NumericalError("gibbs: sweep " + std::to_string(sweep_index) + ", " +
                             std::string(to_string(side_)) + " row " + std::to_string(i) + ": " + e.what());
      }
      if (jittered) ++jitters;
    }
    return jitters;
  }

 private:
  const SidePrior& prior_;
  const NormalWishartPrior& nw_;
  Side side_;
  Matrix nw_w0_inv_chol_;
};

void check_side_prior(const SidePrior& prior, std::size_t expected, std::size_t k, const char* name) {
  if (!prior.propagated()) return;
  if (prior.size() != expected) {
    throw ValidationError(std::string("gibbs: propagated ") + name + " prior covers " +
                          std::to_string(prior.size()) + " rows, block has " + std::to_string(expected));
  }
  for (const auto& g : prior.gaussians) {
    if (static_cast<std::size_t>(g.dim()) != k) throw ValidationError(std::string("gibbs: ") + name + " prior has wrong K");
  }
  for (const auto& g : prior.mixtures) {
    if (g.components.empty() || static_cast<std::size_t>(g.dim()) != k) {
      throw ValidationError(std::string("gibbs: ") + name + " mixture prior has wrong K");
    }
  }
}

}  // namespace

SampleChain gibbs_run(const SparseMatrix& block, const RowPriorSet& priors,
                      const NormalWishartPrior& nw_prior, const GibbsConfig& config) {
  config.validate();
  nw_prior.validate();
  if (static_cast<std::size_t>(nw_prior.mu0.size()) != config.k) {
    throw ValidationError("gibbs: normal-wishart prior dimension differs from K");
  }
  if (block.empty()) throw ValidationError("gibbs: block has no observations");
  check_side_prior(priors.x, block.n_rows(), config.k, "X");
  check_side_prior(priors.w, block.n_cols(), config.k, "W");

  const auto by_row = build_adjacency(block, true);
  const auto by_col = build_adjacency(block, false);
  const auto k = static_cast<Eigen::Index>(config.k);

  Rng rng(config.seed);
  SideSampler x_sampler(priors.x, nw_prior, Side::kX);
  SideSampler w_sampler(priors.w, nw_prior, Side::kW);
  FactorMatrix x(static_cast<Eigen::Index>(block.n_rows()), k);
  FactorMatrix w(static_cast<Eigen::Index>(block.n_cols()), k);
  x_sampler.initialize(x, rng);
  w_sampler.initialize(w, rng);

  HyperState hyper{nw_prior.mu0, nw_prior.nu0 * nw_prior.w0, nw_prior.mu0, nw_prior.nu0 * nw_prior.w0};

  SampleChain chain;
  chain.config = config;
  chain.n_rows = block.n_rows();
  chain.n_cols = block.n_cols();
  chain.samples.reserve(config.retained());

  for (std::size_t t = 0; t < config.iterations; ++t) {
    try {
      if (!priors.x.propagated()) std::tie(hyper.mu_x, hyper.lambda_x) = sample_hyper_normal_wishart(x, nw_prior, rng);
      if (!priors.w.propagated()) std::tie(hyper.mu_w, hyper.lambda_w) = sample_hyper_normal_wishart(w, nw_prior, rng);
    } catch (const NumericalError& e) {
      throw NumericalError("gibbs: sweep " + std::to_string(t) + ", hyperparameters: " + e.what());
    }
    chain.jitter_events += x_sampler.sweep(x, w, by_row, config.tau, hyper.mu_x, hyper.lambda_x, rng, t);
    chain.jitter_events += w_sampler.sweep(w, x, by_col, config.tau, hyper.mu_w, hyper.lambda_w, rng, t);

    if (t >= config.burn_in && (t - config.burn_in + 1) % config.thin == 0) {
      chain.samples.push_back({x, w, hyper});
    }
  }
  if (chain.jitter_events > 0) {
    spdlog::warn("gibbs: diagonal jitter applied {} times", chain.jitter_events);
  }
  return chain;
}

std::pair<FactorMatrix, FactorMatrix> chain_posterior_mean(const SampleChain& chain) {
  if (chain.samples.empty()) throw ValidationError("chain_posterior_mean: empty chain");
  FactorMatrix x = FactorMatrix::Zero(chain.samples.front().x.rows(), chain.samples.front().x.cols());
  FactorMatrix w = FactorMatrix::Zero(chain.samples.front().w.rows(), chain.samples.front().w.cols());
  for (const auto& s : chain.samples) {
    x += s.x;
    w += s.w;
  }
  const auto n = static_cast<double>(chain.samples.size());
  return {x / n, w / n};
}

Matrix row_samples(const SampleChain& chain, Side side, std::size_t row) {
  if (chain.samples.empty()) throw ValidationError("row_samples: empty chain");
  const auto k = static_cast<Eigen::Index>(chain.config.k);
  Matrix out(static_cast<Eigen::Index>(chain.samples.size()), k);
  const auto r = static_cast<Eigen::Index>(row);
  for (std::size_t s = 0; s < chain.samples.size(); ++s) {
    const auto& m = side == Side::kX ? chain.samples[s].x : chain.samples[s].w;
    out.row(static_cast<Eigen::Index>(s)) = m.row(r);
  }
  return out;
}

std::vector<double> predict(const FactorMatrix& x_mean, const FactorMatrix& w_mean,
                            std::span<const std::pair<std::size_t, std::size_t>> indices) {
  std::vector<double> out;
  out.reserve(indices.size());
  for (const auto& [n, d] : indices) {
    if (n >= static_cast<std::size_t>(x_mean.rows()) || d >= static_cast<std::size_t>(w_mean.rows())) {
      throw ValidationError("predict: index (" + std::to_string(n) + ", " + std::to_string(d) + ") out of range");
    }
    out.push_back(x_mean.row(static_cast<Eigen::Index>(n)).dot(w_mean.row(static_cast<Eigen::Index>(d))));
  }
  return out;
}

std::vector<double> predict(const FactorMatrix& x_mean, const FactorMatrix& w_mean,
                            const SparseMatrix& matrix) {
  std::vector<std::pair<std::size_t, std::size_t>> idx;
  idx.reserve(matrix.nnz());
  for (const auto& e : matrix.entries()) idx.emplace_back(e.row, e.col);
  return predict(x_mean, w_mean, idx);
}

double log_likelihood(const FactorMatrix& x, const FactorMatrix& w, const SparseMatrix& matrix, double tau) {
  const double norm = 0.5 * std::log(tau / (2.0 * std::numbers::pi));
  double ll = 0.0;
  for (const auto& e : matrix.entries()) {
    const double r = e.value - x.row(e.row).dot(w.row(e.col));
    ll += norm - 0.5 * tau * r * r;
  }
  return ll;
}

namespace {
constexpr std::string_view kChainMagic = "BMFPPCHN";
constexpr std::uint32_t kChainVersion = 1;
}  // namespace

void write_chain(const std::filesystem::path& path, const SampleChain& chain) {
  detail::BinaryWriter out;
  out.put_magic(kChainMagic);
  out.put<std::uint32_t>(kChainVersion);
  out.put<std::uint64_t>(chain.config.k);
  out.put<double>(chain.config.tau);
  out.put<std::uint64_t>(chain.config.iterations);
  out.put<std::uint64_t>(chain.config.burn_in);
  out.put<std::uint64_t>(chain.config.thin);
  out.put<std::uint64_t>(chain.config.seed);
  out.put<std::uint64_t>(chain.n_rows);
  out.put<std::uint64_t>(chain.n_cols);
  out.put<std::uint64_t>(chain.samples.size());
  out.put<std::uint64_t>(chain.jitter_events);
  for (const auto& s : chain.samples) {
    out.put_dense(s.x);
    out.put_dense(s.w);
    out.put_dense(s.hyper.mu_x);
    out.put_dense(s.hyper.lambda_x);
    out.put_dense(s.hyper.mu_w);
    out.put_dense(s.hyper.lambda_w);
  }
  out.commit(path);
}

SampleChain read_chain(const std::filesystem::path& path) {
  detail::BinaryReader in(path);
  in.expect_magic(kChainMagic);
  if (in.get<std::uint32_t>() != kChainVersion) throw IoError("unsupported chain version in '" + path.string() + "'");
  SampleChain chain;
  chain.config.k = in.get<std::uint64_t>();
  chain.config.tau = in.get<double>();
  chain.config.iterations = in.get<std::uint64_t>();
  chain.config.burn_in = in.get<std::uint64_t>();
  chain.config.thin = in.get<std::uint64_t>();
  chain.config.seed = in.get<std::uint64_t>();
  chain.n_rows = in.get<std::uint64_t>();
  chain.n_cols = in.get<std::uint64_t>();
  const auto n_samples = in.get<std::uint64_t>();
  chain.jitter_events = in.get<std::uint64_t>();
  const auto k = static_cast<Eigen::Index>(chain.config.k);
  const std::uint64_t per_sample = (chain.n_rows + chain.n_cols) * chain.config.k + 2 * (chain.config.k + chain.config.k * chain.config.k);
  in.expect_remaining(per_sample * n_samples);
  chain.samples.reserve(n_samples);
  for (std::uint64_t s = 0; s < n_samples; ++s) {
    ChainSample cs;
    cs.x = in.get_dense(static_cast<Eigen::Index>(chain.n_rows), k);
    cs.w = in.get_dense(static_cast<Eigen::Index>(chain.n_cols), k);
    cs.hyper.mu_x = in.get_dense(k, 1);
    cs.hyper.lambda_x = in.get_dense(k, k);
    cs.hyper.mu_w = in.get_dense(k, 1);
    cs.hyper.lambda_w = in.get_dense(k, k);
    chain.samples.push_back(std::move(cs));
  }
  in.expect_end();
  return chain;
}

}  // namespace bmfpp
