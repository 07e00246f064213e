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

#include "bmfpp/aggregate.hpp"
#include "bmfpp/approx.hpp"
#include "bmfpp/data.hpp"
#include "bmfpp/sampler.hpp"

#include <json.hpp>

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

namespace bmfpp {

enum class Method { kFull, kPp, kEp };

std::string_view to_string(Method method);

/// Everything that determines a run apart from the data.
struct RunConfig {
  std::size_t k = 10;
  double tau = 1.0;
  std::size_t iterations = 1200;
  std::size_t burn_in = 800;
  std::size_t thin = 2;
  std::uint64_t seed = 0;
  ApproxKind approx = ApproxKind::kMomentMatching;
  OrderScheme order = OrderScheme::kDecreasing;
  std::size_t row_blocks = 1;
  std::size_t col_blocks = 1;
  std::size_t top_n = 3;
  std::optional<double> lambda;  ///< lambda-means scale; unset = per-row median pairwise distance
  std::size_t workers = 1;
  double beta0 = 2.0;            ///< Normal-Wishart beta0 (mu0 = 0, W0 = I, nu0 = K)
  double epsilon_scale = 1e-6;   ///< eigenvalue-correction constant relative to trace/K
  bool keep_chains = false;      ///< keep every block's chain in the result
  bool save_chains = false;      ///< also write chains into the run directory

  void validate() const;
  GibbsConfig gibbs(std::uint64_t block_seed) const;
  NormalWishartPrior nw_prior() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their current values, so a partial document overlays defaults.
void from_json(const nlohmann::json& j, RunConfig& c);

struct BlockTiming {
  std::size_t stage = 1;
  std::size_t i = 0;
  std::size_t j = 0;
  double started = 0.0;   ///< seconds since run start
  double finished = 0.0;
  double seconds() const { return finished - started; }
};

/// Wall-clock accounting. The distributed time sums the slowest block of each
/// stage plus the aggregation step.
struct TimingLedger {
  std::vector<BlockTiming> blocks;
  std::array<double, 3> stage_max{0.0, 0.0, 0.0};
  double aggregation = 0.0;
  double wall = 0.0;  ///< end-to-end time actually spent on this host

  double distributed() const { return stage_max[0] + stage_max[1] + stage_max[2] + aggregation; }
  nlohmann::json to_json() const;
};

/// Outcome of one block's inference in local coordinates.
struct BlockResult {
  std::size_t stage = 1;
  std::size_t i = 0;
  std::size_t j = 0;
  std::size_t nnz = 0;
  bool passthrough = false;  ///< empty block: no sampling, priors passed on
  std::size_t jitter_events = 0;
  FactorMatrix x_mean;       ///< posterior mean of X rows in this block
  FactorMatrix w_mean;
  std::optional<SampleChain> chain;
};

struct FactorizationResult {
  Method method = Method::kFull;
  RunConfig config;
  PartitionPlan plan;
  std::vector<RowPosterior> x_posteriors;  ///< original row order
  std::vector<RowPosterior> w_posteriors;  ///< original column order
  FactorMatrix x_mean;
  FactorMatrix w_mean;
  TimingLedger timings;
  std::vector<BlockResult> blocks;         ///< row-major over (i, j)
  AggregationLog aggregation_log;

  const BlockResult& block(std::size_t i, std::size_t j) const {
    return blocks.at(i * plan.col_blocks() + j);
  }
};

/// Where a run writes its artifacts plus free-form input provenance that is
/// stored in run_config.json.
struct RunContext {
  std::filesystem::path run_dir;
  nlohmann::json inputs = nlohmann::json::object();
};

/// Ordering plus partition as configured.
PartitionPlan make_plan(const SparseMatrix& train, const RunConfig& config);

/// Blocks processed in each stage: {(0,0)}, first row and column, the rest.
std::array<std::vector<std::pair<std::size_t, std::size_t>>, 3> stage_blocks(const PartitionPlan& plan);

/// Seed used for block (i, j) of `stage`.
std::uint64_t block_seed(std::uint64_t master, std::size_t stage, std::size_t i, std::size_t j);

/// A single chain over all of `train` (1 x 1 plan with the configured ordering).
FactorizationResult run_full(const SparseMatrix& train, const RunConfig& config, const RunContext& context);

/// Three-stage posterior propagation followed by per-row aggregation.
FactorizationResult run_pp(const SparseMatrix& train, const PartitionPlan& plan, const RunConfig& config,
                           const RunContext& context);

/// Independent chains on every block, combined by the parametric product.
FactorizationResult run_ep(const SparseMatrix& train, const PartitionPlan& plan, const RunConfig& config,
                           const RunContext& context);

FactorizationResult run_method(Method method, const SparseMatrix& train, const RunConfig& config,
                               const RunContext& context);

// Run-directory layout helpers.
std::filesystem::path posterior_path(const std::filesystem::path& run_dir, std::size_t stage, std::size_t i,
                                     std::size_t j, Side side);
std::filesystem::path block_means_path(const std::filesystem::path& run_dir, std::size_t stage, std::size_t i,
                                       std::size_t j);

void persist_posteriors(const std::filesystem::path& run_dir, std::size_t stage, std::size_t i, std::size_t j,
                        const PosteriorSet& set);
/// Throws IoError naming the stage and block when the file is missing or corrupt.
PosteriorSet load_posteriors(const std::filesystem::path& run_dir, std::size_t stage, std::size_t i,
                             std::size_t j, Side side);

void write_block_means(const std::filesystem::path& path, const BlockResult& block);
BlockResult read_block_means(const std::filesystem::path& path);

/// Reloads the parts of a finished run needed for evaluation: config, plan,
/// aggregated posteriors and means, per-block means and timings.
FactorizationResult load_run(const std::filesystem::path& run_dir);

/// Symbolic cost model inputs; see `cost_model_eval`.
struct CostModel {
  double n = 0;  ///< rows
  double d = 0;  ///< columns
  double m = 0;  ///< observed entries
  double k = 0;  ///< latent dimensions
  double t = 0;  ///< iterations
  double u = 1;  ///< workers
  double c = 1;  ///< mixture components
  double l = 0;  ///< parameters per propagated row distribution

  /// L = C (K + K^2).
  static double per_row_parameters(double k, double c) { return c * (k + k * k); }
  void validate() const;
};

struct CostEstimate {
  double t0 = 0;             ///< per-submodel inference time
  double ta = 0;             ///< aggregation time
  double total = 0;          ///< 3 t0 + ta
  double communication = 0;  ///< sqrt(U) (N + D) L
};

/// t0 = [(N+D) K^3 / (sqrt(U)+1) + M K^2 / (U + 2 sqrt(U) + 1)] T,
/// ta = max(N, D) / (sqrt(U)+1) (K + K^2).
CostEstimate cost_model_eval(const CostModel& cm);

/// Runs fn(0..n-1) on up to `workers` threads; rethrows the first exception.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace bmfpp
