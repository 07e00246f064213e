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

#include "bmfpp/orchestrator.hpp"

#include "binary_io.hpp"
#include "bmfpp/errors.hpp"
#include "bmfpp/random.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>

namespace bmfpp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::string_view kMeansMagic = "BMFPPMNS";
constexpr std::uint32_t kMeansVersion = 1;
constexpr std::uint64_t kOrderTag = 0x0de7;  // seed stream of the row/column ordering
constexpr std::uint64_t kFitTag = 0xf17;     // seed stream of the approximation fits

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string block_name(std::size_t i, std::size_t j) {
  return "block_" + std::to_string(i) + "_" + std::to_string(j);
}

std::string block_label(std::size_t stage, std::size_t i, std::size_t j) {
  return "stage " + std::to_string(stage) + " block (" + std::to_string(i) + "," + std::to_string(j) + ")";
}

fs::path stage_dir(const fs::path& run_dir, std::size_t stage) {
  return run_dir / ("stage" + std::to_string(stage));
}

std::size_t pp_stage(std::size_t i, std::size_t j) {
  if (i == 0 && j == 0) return 1;
  return (i == 0 || j == 0) ? 2 : 3;
}

std::size_t block_stage(Method method, std::size_t i, std::size_t j) {
  return method == Method::kPp ? pp_stage(i, j) : 1;
}

Method parse_method(const std::string& name) {
  if (name == "full") return Method::kFull;
  if (name == "pp") return Method::kPp;
  if (name == "ep") return Method::kEp;
  throw ValidationError("unknown method '" + name + "'");
}

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << doc.dump(2) << '\n';
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

template <typename T>
void overlay(const json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

/// Row approximations standing in for an empty block's posterior: the
/// propagated prior itself, or the initialization distribution of a
/// hierarchical side.
PosteriorSet passthrough_set(const SidePrior& prior, std::size_t rows, Side side, std::size_t row_begin,
                             ApproxKind kind, const NormalWishartPrior& nw) {
  PosteriorSet set;
  set.k = static_cast<std::size_t>(nw.mu0.size());
  set.side = side;
  set.row_begin = row_begin;
  switch (prior.mode) {
    case PriorMode::kPropagatedGmm:
      set.kind = ApproxKind::kGmm;
      set.mixtures = prior.mixtures;
      return set;
    case PriorMode::kPropagatedGaussian:
      set.kind = kind == ApproxKind::kGmm ? ApproxKind::kMomentMatching : kind;
      set.gaussians = prior.gaussians;
      return set;
    case PriorMode::kSharedHyper:
      break;
  }
  const RowPosterior init{nw.mu0, spd_inverse(nw.w0)};
  set.kind = kind;
  if (kind == ApproxKind::kGmm) {
    set.mixtures.assign(rows, GmmPosterior{{GmmComponent{1.0, init.mean, init.precision}}});
  } else {
    set.gaussians.assign(rows, init);
  }
  return set;
}

FactorMatrix means_of(const PosteriorSet& set) {
  FactorMatrix m(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(set.k));
  for (std::size_t r = 0; r < set.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = set.gaussian(r).mean.transpose();
  return m;
}

struct BlockTask {
  std::size_t stage = 1;
  std::size_t i = 0;
  std::size_t j = 0;
  std::uint64_t seed = 0;
  ApproxOptions approx;
};

/// Samples (or passes through) one block, fits both sides' approximations and
/// writes every artifact of the block into its stage directory.
BlockResult process_block(const SparseMatrix& data, const RowPriorSet& priors, const BlockTask& task,
                          const PartitionPlan& plan, const RunConfig& config, const fs::path& run_dir) {
  BlockResult result;
  result.stage = task.stage;
  result.i = task.i;
  result.j = task.j;
  result.nnz = data.nnz();
  const auto nw = config.nw_prior();
  const std::size_t x_begin = plan.row_cuts[task.i];
  const std::size_t w_begin = plan.col_cuts[task.j];

  PosteriorSet x_set;
  PosteriorSet w_set;
  if (data.empty()) {
    spdlog::info("{}: no observations, passing priors through", block_label(task.stage, task.i, task.j));
    result.passthrough = true;
    x_set = passthrough_set(priors.x, data.n_rows(), Side::kX, x_begin, task.approx.kind, nw);
    w_set = passthrough_set(priors.w, data.n_cols(), Side::kW, w_begin, task.approx.kind, nw);
    result.x_mean = means_of(x_set);
    result.w_mean = means_of(w_set);
  } else {
    SampleChain chain;
    const auto label = block_label(task.stage, task.i, task.j);
    try {
      chain = gibbs_run(data, priors, nw, config.gibbs(task.seed));
    } catch (const NumericalError& e) {
      throw NumericalError(label + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(label + ": " + e.what());
    }
    result.jitter_events = chain.jitter_events;
    std::tie(result.x_mean, result.w_mean) = chain_posterior_mean(chain);

    auto clouds = [&](Side side, std::size_t rows) {
      std::vector<Matrix> out;
      out.reserve(rows);
      for (std::size_t r = 0; r < rows; ++r) out.push_back(row_samples(chain, side, r));
      return out;
    };
    const auto fit_seed = derive_seed(task.seed, {kFitTag});
    try {
      x_set = fit_posteriors(clouds(Side::kX, data.n_rows()), Side::kX, x_begin, task.approx, fit_seed);
      w_set = fit_posteriors(clouds(Side::kW, data.n_cols()), Side::kW, w_begin, task.approx, fit_seed);
    } catch (const NumericalError& e) {
      throw NumericalError(label + ": approximation: " + e.what());
    }
    x_set.k = w_set.k = config.k;
    if (config.save_chains) write_chain(stage_dir(run_dir, task.stage) / (block_name(task.i, task.j) + ".chain"), chain);
    if (config.keep_chains) result.chain = std::move(chain);
  }
  persist_posteriors(run_dir, task.stage, task.i, task.j, x_set);
  persist_posteriors(run_dir, task.stage, task.i, task.j, w_set);
  write_block_means(block_means_path(run_dir, task.stage, task.i, task.j), result);
  return result;
}

json timing_to_json(const BlockTiming& t) {
  return {{"stage", t.stage}, {"i", t.i}, {"j", t.j}, {"started", t.started}, {"finished", t.finished},
          {"seconds", t.seconds()}};
}

TimingLedger timing_from_json(const json& doc) {
  TimingLedger ledger;
  for (const auto& b : doc.at("blocks")) {
    ledger.blocks.push_back({b.at("stage").get<std::size_t>(), b.at("i").get<std::size_t>(),
                             b.at("j").get<std::size_t>(), b.at("started").get<double>(),
                             b.at("finished").get<double>()});
  }
  const auto stage_max = doc.at("stage_max").get<std::vector<double>>();
  if (stage_max.size() != 3) throw IoError("timings: expected three stage maxima");
  std::copy(stage_max.begin(), stage_max.end(), ledger.stage_max.begin());
  ledger.aggregation = doc.at("aggregation").get<double>();
  ledger.wall = doc.at("wall").get<double>();
  return ledger;
}

/// Shared preamble of every run: validation and the files written before any sampling.
void start_run(Method method, const SparseMatrix& train, const PartitionPlan& plan, const RunConfig& config,
               const RunContext& context) {
  config.validate();
  plan.validate();
  if (plan.row_perm.size() != train.n_rows() || plan.col_perm.size() != train.n_cols()) {
    throw ValidationError("partition plan does not match the training matrix shape");
  }
  if (train.empty()) throw ValidationError("training matrix has no observations");
  if (context.run_dir.empty()) throw ValidationError("run directory not set");
  fs::create_directories(context.run_dir);
  json doc;
  doc["method"] = std::string(to_string(method));
  doc["config"] = config;
  doc["inputs"] = context.inputs;
  doc["train"] = {{"n_rows", train.n_rows()}, {"n_cols", train.n_cols()}, {"nnz", train.nnz()}};
  write_json(context.run_dir / "run_config.json", doc);
  write_json(context.run_dir / "plan.json", plan);
}

/// Stores the aggregated result and the timing ledger.
void finish_run(const FactorizationResult& result, const RunContext& context) {
  const auto agg = context.run_dir / "aggregate";
  auto save_side = [&](Side side, const std::vector<RowPosterior>& rows) {
    PosteriorSet set;
    set.k = result.config.k;
    set.side = side;
    set.kind = ApproxKind::kMomentMatching;
    set.gaussians = rows;
    write_posteriors(agg / (std::string(to_string(side)) + ".post"), set);
  };
  save_side(Side::kX, result.x_posteriors);
  save_side(Side::kW, result.w_posteriors);
  BlockResult means;
  means.stage = 0;
  means.x_mean = result.x_mean;
  means.w_mean = result.w_mean;
  write_block_means(agg / "means.bin", means);
  write_json(agg / "aggregation_log.json", result.aggregation_log.to_json());
  write_json(context.run_dir / "timings.json", result.timings.to_json());
}

using Coord = std::pair<std::size_t, std::size_t>;

/// Runs one stage's blocks concurrently and records their timings.
void run_stage(std::size_t stage_index, const std::vector<Coord>& coords,
               const std::function<BlockResult(std::size_t, std::size_t)>& work, std::size_t workers,
               Clock::time_point run_start, FactorizationResult& result) {
  std::vector<BlockTiming> timings(coords.size());
  const std::size_t col_blocks = result.plan.col_blocks();
  parallel_for(coords.size(), workers, [&](std::size_t t) {
    const auto [i, j] = coords[t];
    const double started = seconds_since(run_start);
    result.blocks[i * col_blocks + j] = work(i, j);
    timings[t] = {result.blocks[i * col_blocks + j].stage, i, j, started, seconds_since(run_start)};
  });
  double slowest = 0.0;
  for (const auto& t : timings) slowest = std::max(slowest, t.seconds());
  result.timings.stage_max[stage_index] = slowest;
  result.timings.blocks.insert(result.timings.blocks.end(), timings.begin(), timings.end());
}

/// Aggregates every row of `side`; `combine(block, local_row, correction)` builds one row.
void aggregate_side(Side side, const FactorizationResult& ctx, std::size_t workers,
                    const std::function<std::function<RowPosterior(std::size_t, RowCorrection*)>(std::size_t)>&
                        block_combiner,
                    std::vector<RowPosterior>& out, AggregationLog& log) {
  const auto& plan = ctx.plan;
  const bool is_x = side == Side::kX;
  const std::size_t n_blocks = is_x ? plan.row_blocks() : plan.col_blocks();
  out.assign(is_x ? plan.row_perm.size() : plan.col_perm.size(), RowPosterior{});
  for (std::size_t b = 0; b < n_blocks; ++b) {
    const auto combine = block_combiner(b);
    const std::size_t rows = is_x ? plan.row_block_size(b) : plan.col_block_size(b);
    std::vector<RowCorrection> corrections(rows);
    parallel_for(rows, workers, [&](std::size_t r) {
      const std::size_t global = is_x ? plan.global_row(b, r) : plan.global_col(b, r);
      out[global] = combine(r, &corrections[r]);
    });
    for (std::size_t r = 0; r < rows; ++r) {
      log.record(side, is_x ? plan.global_row(b, r) : plan.global_col(b, r), corrections[r]);
    }
  }
}

FactorMatrix stack_means(const std::vector<RowPosterior>& rows, std::size_t k) {
  FactorMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(k));
  for (std::size_t r = 0; r < rows.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = rows[r].mean.transpose();
  return m;
}

/// Independent chains on every block with hierarchical priors (EP and full-data runs).
FactorizationResult run_independent(Method method, const SparseMatrix& train, const PartitionPlan& plan,
                                    const RunConfig& config, const RunContext& context) {
  start_run(method, train, plan, config, context);
  const auto run_start = Clock::now();
  FactorizationResult result;
  result.method = method;
  result.config = config;
  result.plan = plan;
  result.blocks.resize(plan.row_blocks() * plan.col_blocks());
  const auto data = split_blocks(train, plan);

  ApproxOptions approx{ApproxKind::kMomentMatching, config.lambda, config.top_n};
  std::vector<Coord> coords;
  for (std::size_t i = 0; i < plan.row_blocks(); ++i) {
    for (std::size_t j = 0; j < plan.col_blocks(); ++j) coords.emplace_back(i, j);
  }
  spdlog::info("{}: sampling {} independent blocks", to_string(method), coords.size());
  run_stage(0, coords, [&](std::size_t i, std::size_t j) {
    const BlockTask task{1, i, j, block_seed(config.seed, 1, i, j), approx};
    return process_block(data[i * plan.col_blocks() + j], RowPriorSet{}, task, plan, config, context.run_dir);
  }, config.workers, run_start, result);

  const auto agg_start = Clock::now();
  const RowPosterior standard{Vector::Zero(static_cast<Eigen::Index>(config.k)),
                              Matrix::Identity(static_cast<Eigen::Index>(config.k), static_cast<Eigen::Index>(config.k))};
  const AggregationOptions opts{config.epsilon_scale};
  for (Side side : {Side::kX, Side::kW}) {
    const bool is_x = side == Side::kX;
    auto combiner = [&](std::size_t b) {
      auto sets = std::make_shared<std::vector<PosteriorSet>>();
      const std::size_t partners = is_x ? plan.col_blocks() : plan.row_blocks();
      for (std::size_t p = 0; p < partners; ++p) {
        const std::size_t i = is_x ? b : p;
        const std::size_t j = is_x ? p : b;
        if (result.blocks[i * plan.col_blocks() + j].passthrough) continue;
        sets->push_back(load_posteriors(context.run_dir, 1, i, j, side));
      }
      return std::function<RowPosterior(std::size_t, RowCorrection*)>(
          [sets, &standard, &opts](std::size_t r, RowCorrection* corr) {
            if (sets->empty()) return standard;
            std::vector<RowPosterior> subsets;
            subsets.reserve(sets->size());
            for (const auto& s : *sets) subsets.push_back(s.gaussian(r));
            return ep_parametric_aggregate(subsets, standard, opts, corr);
          });
    };
    aggregate_side(side, result, config.workers, combiner, is_x ? result.x_posteriors : result.w_posteriors,
                   result.aggregation_log);
  }

  if (method == Method::kFull) {
    // Point estimates straight from the chain, restored to the original order.
    const auto& block = result.blocks.front();
    result.x_mean.resize(block.x_mean.rows(), block.x_mean.cols());
    result.w_mean.resize(block.w_mean.rows(), block.w_mean.cols());
    for (Eigen::Index r = 0; r < block.x_mean.rows(); ++r) result.x_mean.row(static_cast<Eigen::Index>(plan.row_perm[r])) = block.x_mean.row(r);
    for (Eigen::Index r = 0; r < block.w_mean.rows(); ++r) result.w_mean.row(static_cast<Eigen::Index>(plan.col_perm[r])) = block.w_mean.row(r);
  } else {
    result.x_mean = stack_means(result.x_posteriors, config.k);
    result.w_mean = stack_means(result.w_posteriors, config.k);
  }
  result.timings.aggregation = method == Method::kFull ? 0.0 : seconds_since(agg_start);
  result.timings.wall = seconds_since(run_start);
  finish_run(result, context);
  return result;
}

}  // namespace

std::string_view to_string(Method method) {
  switch (method) {
    case Method::kFull: return "full";
    case Method::kPp: return "pp";
    case Method::kEp: return "ep";
  }
  return "?";
}

void RunConfig::validate() const {
  if (k == 0) throw ValidationError("K must be at least 1");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("tau must be positive and finite");
  if (iterations <= burn_in) throw ValidationError("iterations must exceed burn-in");
  if (thin == 0) throw ValidationError("thinning must be at least 1");
  if ((iterations - burn_in) / thin < k + 2) {
    throw ValidationError("need at least K + 2 retained samples per chain for the approximations, got " +
                          std::to_string((iterations - burn_in) / thin));
  }
  if (row_blocks == 0 || col_blocks == 0) throw ValidationError("partition must have at least one block per axis");
  if (top_n == 0) throw ValidationError("top_n must be at least 1");
  if (lambda && !(*lambda > 0.0)) throw ValidationError("lambda must be positive");
  if (workers == 0) throw ValidationError("workers must be at least 1");
  if (!(beta0 > 0.0)) throw ValidationError("beta0 must be positive");
  if (!(epsilon_scale > 0.0)) throw ValidationError("epsilon_scale must be positive");
}

GibbsConfig RunConfig::gibbs(std::uint64_t block_seed) const {
  return GibbsConfig{k, tau, iterations, burn_in, thin, block_seed};
}

NormalWishartPrior RunConfig::nw_prior() const {
  auto prior = NormalWishartPrior::defaults(k);
  prior.beta0 = beta0;
  return prior;
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"k", c.k},
           {"tau", c.tau},
           {"iterations", c.iterations},
           {"burn_in", c.burn_in},
           {"thin", c.thin},
           {"seed", c.seed},
           {"approx", std::string(to_string(c.approx))},
           {"order", std::string(to_string(c.order))},
           {"row_blocks", c.row_blocks},
           {"col_blocks", c.col_blocks},
           {"top_n", c.top_n},
           {"lambda", c.lambda ? json(*c.lambda) : json(nullptr)},
           {"workers", c.workers},
           {"beta0", c.beta0},
           {"epsilon_scale", c.epsilon_scale},
           {"keep_chains", c.keep_chains},
           {"save_chains", c.save_chains}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ValidationError("run configuration must be a JSON object");
  static const std::vector<std::string> known{"k", "tau", "iterations", "burn_in", "thin", "seed", "approx",
                                              "order", "row_blocks", "col_blocks", "top_n", "lambda",
                                              "workers", "beta0", "epsilon_scale", "keep_chains", "save_chains"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ValidationError("unknown run configuration key '" + key + "'");
    }
  }
  try {
    overlay(j, "k", c.k);
    overlay(j, "tau", c.tau);
    overlay(j, "iterations", c.iterations);
    overlay(j, "burn_in", c.burn_in);
    overlay(j, "thin", c.thin);
    overlay(j, "seed", c.seed);
    if (j.contains("approx")) c.approx = parse_approx_kind(j.at("approx").get<std::string>());
    if (j.contains("order")) c.order = parse_order_scheme(j.at("order").get<std::string>());
    overlay(j, "row_blocks", c.row_blocks);
    overlay(j, "col_blocks", c.col_blocks);
    overlay(j, "top_n", c.top_n);
    if (j.contains("lambda")) {
      c.lambda = j.at("lambda").is_null() ? std::nullopt : std::optional<double>(j.at("lambda").get<double>());
    }
    overlay(j, "workers", c.workers);
    overlay(j, "beta0", c.beta0);
    overlay(j, "epsilon_scale", c.epsilon_scale);
    overlay(j, "keep_chains", c.keep_chains);
    overlay(j, "save_chains", c.save_chains);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("run configuration: ") + e.what());
  }
}

json TimingLedger::to_json() const {
  json list = json::array();
  for (const auto& b : blocks) list.push_back(timing_to_json(b));
  return {{"blocks", std::move(list)},
          {"stage_max", stage_max},
          {"aggregation", aggregation},
          {"distributed", distributed()},
          {"wall", wall}};
}

PartitionPlan make_plan(const SparseMatrix& train, const RunConfig& config) {
  const auto ordering = order_matrix(train, config.order, derive_seed(config.seed, {kOrderTag}));
  return partition(train, ordering, config.row_blocks, config.col_blocks);
}

std::array<std::vector<std::pair<std::size_t, std::size_t>>, 3> stage_blocks(const PartitionPlan& plan) {
  std::array<std::vector<Coord>, 3> stages;
  stages[0].emplace_back(0, 0);
  for (std::size_t i = 1; i < plan.row_blocks(); ++i) stages[1].emplace_back(i, 0);
  for (std::size_t j = 1; j < plan.col_blocks(); ++j) stages[1].emplace_back(0, j);
  for (std::size_t i = 1; i < plan.row_blocks(); ++i) {
    for (std::size_t j = 1; j < plan.col_blocks(); ++j) stages[2].emplace_back(i, j);
  }
  return stages;
}

std::uint64_t block_seed(std::uint64_t master, std::size_t stage, std::size_t i, std::size_t j) {
  return derive_seed(master, {stage, i, j});
}

FactorizationResult run_full(const SparseMatrix& train, const RunConfig& config, const RunContext& context) {
  RunConfig single = config;
  single.row_blocks = single.col_blocks = 1;
  single.validate();
  return run_independent(Method::kFull, train, make_plan(train, single), single, context);
}

FactorizationResult run_ep(const SparseMatrix& train, const PartitionPlan& plan, const RunConfig& config,
                           const RunContext& context) {
  return run_independent(Method::kEp, train, plan, config, context);
}

FactorizationResult run_pp(const SparseMatrix& train, const PartitionPlan& plan, const RunConfig& config,
                           const RunContext& context) {
  start_run(Method::kPp, train, plan, config, context);
  const auto run_start = Clock::now();
  FactorizationResult result;
  result.method = Method::kPp;
  result.config = config;
  result.plan = plan;
  result.blocks.resize(plan.row_blocks() * plan.col_blocks());
  const auto data = split_blocks(train, plan);
  const ApproxOptions approx{config.approx, config.lambda, config.top_n};
  const auto& dir = context.run_dir;

  auto work = [&](std::size_t i, std::size_t j) {
    const std::size_t stage = pp_stage(i, j);
    RowPriorSet priors;
    if (stage == 2) {
      // First column blocks inherit W from (0,0); first row blocks inherit X.
      if (j == 0) priors.w = SidePrior::from_posteriors(load_posteriors(dir, 1, 0, 0, Side::kW));
      else priors.x = SidePrior::from_posteriors(load_posteriors(dir, 1, 0, 0, Side::kX));
    } else if (stage == 3) {
      priors.x = SidePrior::from_posteriors(load_posteriors(dir, 2, i, 0, Side::kX));
      priors.w = SidePrior::from_posteriors(load_posteriors(dir, 2, 0, j, Side::kW));
    }
    const BlockTask task{stage, i, j, block_seed(config.seed, stage, i, j), approx};
    return process_block(data[i * plan.col_blocks() + j], priors, task, plan, config, dir);
  };

  const auto stages = stage_blocks(plan);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (stages[s].empty()) continue;
    spdlog::info("pp: stage {} with {} block(s)", s + 1, stages[s].size());
    run_stage(s, stages[s], work, config.workers, run_start, result);
  }

  const auto agg_start = Clock::now();
  const AggregationOptions opts{config.epsilon_scale};
  for (Side side : {Side::kX, Side::kW}) {
    const bool is_x = side == Side::kX;
    auto combiner = [&](std::size_t b) {
      // X row block b: base (b,0), others (b,j); W column block b: base (0,b), others (i,b).
      const std::size_t bi = is_x ? b : 0;
      const std::size_t bj = is_x ? 0 : b;
      auto base = std::make_shared<PosteriorSet>(load_posteriors(dir, pp_stage(bi, bj), bi, bj, side));
      auto others = std::make_shared<std::vector<PosteriorSet>>();
      const std::size_t partners = is_x ? plan.col_blocks() : plan.row_blocks();
      for (std::size_t p = 1; p < partners; ++p) {
        const std::size_t i = is_x ? b : p;
        const std::size_t j = is_x ? p : b;
        // An empty block passed its propagated prior through; it would only
        // contribute a cancelled term.
        if (result.blocks[i * plan.col_blocks() + j].passthrough) continue;
        others->push_back(load_posteriors(dir, pp_stage(i, j), i, j, side));
      }
      return std::function<RowPosterior(std::size_t, RowCorrection*)>(
          [base, others, &opts](std::size_t r, RowCorrection* corr) {
            AggregationInput input;
            input.stage1 = base->gaussian(r);
            input.others.reserve(others->size());
            for (const auto& s : *others) input.others.push_back(s.gaussian(r));
            return pp_aggregate_row(input, opts, corr);
          });
    };
    aggregate_side(side, result, config.workers, combiner, is_x ? result.x_posteriors : result.w_posteriors,
                   result.aggregation_log);
  }
  result.x_mean = stack_means(result.x_posteriors, config.k);
  result.w_mean = stack_means(result.w_posteriors, config.k);
  result.timings.aggregation = seconds_since(agg_start);
  result.timings.wall = seconds_since(run_start);
  finish_run(result, context);
  return result;
}

FactorizationResult run_method(Method method, const SparseMatrix& train, const RunConfig& config,
                               const RunContext& context) {
  switch (method) {
    case Method::kFull: return run_full(train, config, context);
    case Method::kPp: return run_pp(train, make_plan(train, config), config, context);
    case Method::kEp: return run_ep(train, make_plan(train, config), config, context);
  }
  throw ValidationError("unknown method");
}

fs::path posterior_path(const fs::path& run_dir, std::size_t stage, std::size_t i, std::size_t j, Side side) {
  return stage_dir(run_dir, stage) / (block_name(i, j) + "." + std::string(to_string(side)) + ".post");
}

fs::path block_means_path(const fs::path& run_dir, std::size_t stage, std::size_t i, std::size_t j) {
  return stage_dir(run_dir, stage) / (block_name(i, j) + ".means");
}

void persist_posteriors(const fs::path& run_dir, std::size_t stage, std::size_t i, std::size_t j,
                        const PosteriorSet& set) {
  write_posteriors(posterior_path(run_dir, stage, i, j, set.side), set);
}

PosteriorSet load_posteriors(const fs::path& run_dir, std::size_t stage, std::size_t i, std::size_t j, Side side) {
  const auto path = posterior_path(run_dir, stage, i, j, side);
  const auto label = block_label(stage, i, j);
  if (!fs::exists(path)) {
    throw IoError(label + ": missing " + std::string(to_string(side)) + " posterior file '" + path.string() + "'");
  }
  try {
    auto set = read_posteriors(path);
    if (set.side != side) throw IoError("side mismatch in '" + path.string() + "'");
    return set;
  } catch (const IoError& e) {
    throw IoError(label + ": " + e.what());
  }
}

void write_block_means(const fs::path& path, const BlockResult& block) {
  detail::BinaryWriter out;
  out.put_magic(kMeansMagic);
  out.put<std::uint32_t>(kMeansVersion);
  out.put<std::uint64_t>(block.stage);
  out.put<std::uint64_t>(block.i);
  out.put<std::uint64_t>(block.j);
  out.put<std::uint64_t>(block.nnz);
  out.put<std::uint8_t>(block.passthrough ? 1 : 0);
  out.put<std::uint64_t>(block.jitter_events);
  out.put<std::uint64_t>(static_cast<std::uint64_t>(block.x_mean.cols()));
  out.put<std::uint64_t>(static_cast<std::uint64_t>(block.x_mean.rows()));
  out.put<std::uint64_t>(static_cast<std::uint64_t>(block.w_mean.rows()));
  out.put_dense(block.x_mean);
  out.put_dense(block.w_mean);
  out.commit(path);
}

BlockResult read_block_means(const fs::path& path) {
  detail::BinaryReader in(path);
  in.expect_magic(kMeansMagic);
  if (in.get<std::uint32_t>() != kMeansVersion) throw IoError("unsupported means file version in '" + path.string() + "'");
  BlockResult block;
  block.stage = in.get<std::uint64_t>();
  block.i = in.get<std::uint64_t>();
  block.j = in.get<std::uint64_t>();
  block.nnz = in.get<std::uint64_t>();
  block.passthrough = in.get<std::uint8_t>() != 0;
  block.jitter_events = in.get<std::uint64_t>();
  const auto k = in.get<std::uint64_t>();
  const auto rows = in.get<std::uint64_t>();
  const auto cols = in.get<std::uint64_t>();
  if (k != 0 && (rows + cols) > std::numeric_limits<std::uint64_t>::max() / k) {
    throw IoError("corrupt means header in '" + path.string() + "'");
  }
  in.expect_remaining((rows + cols) * k);
  block.x_mean = in.get_dense(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));
  block.w_mean = in.get_dense(static_cast<Eigen::Index>(cols), static_cast<Eigen::Index>(k));
  in.expect_end();
  return block;
}

FactorizationResult load_run(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw IoError("run directory '" + run_dir.string() + "' does not exist");
  FactorizationResult result;
  const auto doc = read_json(run_dir / "run_config.json");
  try {
    result.method = parse_method(doc.at("method").get<std::string>());
    result.config = RunConfig{};
    from_json(doc.at("config"), result.config);
    result.plan = read_json(run_dir / "plan.json").get<PartitionPlan>();
    result.timings = timing_from_json(read_json(run_dir / "timings.json"));
  } catch (const json::exception& e) {
    throw IoError("run directory '" + run_dir.string() + "': " + e.what());
  } catch (const ValidationError& e) {
    throw IoError("run directory '" + run_dir.string() + "': " + e.what());
  }
  const auto agg = run_dir / "aggregate";
  for (Side side : {Side::kX, Side::kW}) {
    const auto path = agg / (std::string(to_string(side)) + ".post");
    if (!fs::exists(path)) throw IoError("run directory '" + run_dir.string() + "' has no aggregated " +
                                         std::string(to_string(side)) + " posteriors");
    auto set = read_posteriors(path);
    (side == Side::kX ? result.x_posteriors : result.w_posteriors) = std::move(set.gaussians);
  }
  const auto means = read_block_means(agg / "means.bin");
  result.x_mean = means.x_mean;
  result.w_mean = means.w_mean;
  const auto& plan = result.plan;
  for (std::size_t i = 0; i < plan.row_blocks(); ++i) {
    for (std::size_t j = 0; j < plan.col_blocks(); ++j) {
      const auto stage = block_stage(result.method, i, j);
      const auto path = block_means_path(run_dir, stage, i, j);
      if (!fs::exists(path)) throw IoError(block_label(stage, i, j) + ": missing means file '" + path.string() + "'");
      result.blocks.push_back(read_block_means(path));
    }
  }
  return result;
}

void CostModel::validate() const {
  for (double v : {n, d, m, k, t, u, c, l}) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("cost model inputs must be positive and finite");
  }
}

CostEstimate cost_model_eval(const CostModel& cm) {
  cm.validate();
  const double su = std::sqrt(cm.u);
  CostEstimate e;
  e.t0 = ((cm.n + cm.d) * cm.k * cm.k * cm.k / (su + 1.0) + cm.m * cm.k * cm.k / (cm.u + 2.0 * su + 1.0)) * cm.t;
  e.ta = std::max(cm.n, cm.d) / (su + 1.0) * (cm.k + cm.k * cm.k);
  e.total = 3.0 * e.t0 + e.ta;
  e.communication = su * (cm.n + cm.d) * cm.l;
  return e;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min(std::max<std::size_t>(workers, 1), n);
  if (threads <= 1) {
    for (std::size_t t = 0; t < n; ++t) fn(t);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first;
  std::mutex guard;
  {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t t = next++; t < n && !failed; t = next++) {
          try {
            fn(t);
          } catch (...) {
            std::lock_guard lock(guard);
            if (!first) first = std::current_exception();
            failed = true;
          }
        }
      });
    }
  }
  if (first) std::rethrow_exception(first);
}

}  // namespace bmfpp
