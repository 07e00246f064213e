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

#include "bmfpp/cli.hpp"

#include "bmfpp/data.hpp"
#include "bmfpp/errors.hpp"
#include "bmfpp/eval.hpp"
#include "bmfpp/random.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace bmfpp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

/// One factor row per line, full double precision.
void write_factor_text(const fs::path& path, const FactorMatrix& m) {
  std::string text;
  char buf[32];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), m(r, c));
      if (c > 0) text += ' ';
      text.append(buf, ptr);
    }
    text += '\n';
  }
  write_text(path, text);
}

std::vector<double> parse_edges(const std::string& text) {
  std::vector<double> edges;
  std::stringstream in(text);
  std::string token;
  while (std::getline(in, token, ',')) {
    if (token == "inf" || token == "Inf") {
      edges.push_back(std::numeric_limits<double>::infinity());
      continue;
    }
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
    if (ec != std::errc{} || ptr != token.data() + token.size()) {
      throw ValidationError("bad bin edge '" + token + "'");
    }
    edges.push_back(v);
  }
  return edges;
}

/// Enlarges a matrix to the given shape, keeping its entries.
SparseMatrix reshape(const SparseMatrix& m, std::size_t rows, std::size_t cols) {
  if (m.n_rows() == rows && m.n_cols() == cols) return m;
  return SparseMatrix(rows, cols, m.entries());
}

/// Maps test entries through the training id maps; unknown ids are dropped.
SparseMatrix remap_to(const LoadedMatrix& test, const LoadedMatrix& train) {
  std::unordered_map<std::int64_t, std::uint32_t> rows, cols;
  for (std::size_t i = 0; i < train.row_ids.size(); ++i) rows[train.row_ids[i]] = static_cast<std::uint32_t>(i);
  for (std::size_t i = 0; i < train.col_ids.size(); ++i) cols[train.col_ids[i]] = static_cast<std::uint32_t>(i);
  std::vector<Entry> entries;
  std::size_t dropped = 0;
  for (const auto& e : test.matrix.entries()) {
    const auto r = rows.find(test.row_ids[e.row]);
    const auto c = cols.find(test.col_ids[e.col]);
    if (r == rows.end() || c == cols.end()) {
      ++dropped;
      continue;
    }
    entries.push_back({r->second, c->second, e.value});
  }
  if (dropped > 0) spdlog::warn("dropped {} test entries whose ids never occur in training", dropped);
  return SparseMatrix(train.matrix.n_rows(), train.matrix.n_cols(), std::move(entries));
}

void setup_logging(bool quiet) {
  auto logger = spdlog::get("bmfpp");
  if (!logger) logger = spdlog::stderr_color_mt("bmfpp");
  spdlog::set_default_logger(logger);
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t k = 5;
  double tau = 1.0;
  std::uint64_t seed = 0;
  std::string missing = "random";
  double test_frac = 0.8;
  std::string structured_mode = "raw";
  std::string out;
};

int cmd_simulate(const SimulateArgs& a) {
  if (a.missing != "random" && a.missing != "structured") {
    throw ValidationError("--missing must be 'random' or 'structured'");
  }
  const fs::path out = a.out.empty() ? default_output_root() / ("sim_seed" + std::to_string(a.seed)) : fs::path(a.out);
  auto [full, truth] = simulate(a.n, a.d, a.k, a.tau, a.seed);
  const auto split_seed = derive_seed(a.seed, {2});
  Split split;
  json meta = {{"n", a.n}, {"d", a.d}, {"k", a.k}, {"tau", a.tau}, {"seed", a.seed}, {"missing", a.missing}};
  if (full.nnz() < 2) {
    spdlog::warn("single observed cell: everything goes to the training set");
    split = {full, SparseMatrix(full.n_rows(), full.n_cols(), {})};
  } else if (a.missing == "random") {
    split = split_random(full, a.test_frac, split_seed);
    meta["test_frac"] = a.test_frac;
  } else {
    auto s = split_structured(full, split_seed, parse_structured_mode(a.structured_mode), a.test_frac);
    split = std::move(s.split);
    meta["structured_mode"] = a.structured_mode;
    meta["target_test_frac"] = a.test_frac;
    meta["expected_test_frac"] = s.expected_test_fraction;
    meta["scale"] = s.scale;
  }
  meta["train_entries"] = split.train.nnz();
  meta["test_entries"] = split.test.nnz();
  meta["realized_test_frac"] = static_cast<double>(split.test.nnz()) / static_cast<double>(full.nnz());
  save_triplets(out / "train.txt", split.train);
  save_triplets(out / "test.txt", split.test);
  write_factor_text(out / "x_true.txt", truth.x);
  write_factor_text(out / "w_true.txt", truth.w);
  write_text(out / "simulate.json", meta.dump(2) + "\n");
  std::cout << "wrote " << split.train.nnz() << " training and " << split.test.nnz() << " test entries to "
            << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- run

struct RunArgs {
  std::string train;
  std::string test;
  std::string format = "plain";
  double test_frac = 0.0;
  std::uint64_t split_seed = 0;
  std::string method = "pp-mm";
  std::string partition = "1x1";
  std::string config;
  std::string out;
  std::size_t replicates = 1;
  // RunConfig overrides; only applied when given on the command line.
  RunConfig rc;
  std::string order;
  std::string lambda;
};

struct RunData {
  SparseMatrix train;
  SparseMatrix test;
};

RunData load_run_data(const RunArgs& a) {
  if (a.train.empty()) throw ValidationError("--train is required");
  const auto format = parse_triplet_format(a.format);
  auto train = load_triplets(a.train, format);
  RunData data;
  if (!a.test.empty()) {
    if (a.test_frac > 0.0) throw ValidationError("--test and --test-frac are mutually exclusive");
    auto test = load_triplets(a.test, format);
    if (format == TripletFormat::kMovieLensDat) {
      data.test = remap_to(test, train);
      data.train = std::move(train.matrix);
    } else {
      const auto rows = std::max(train.matrix.n_rows(), test.matrix.n_rows());
      const auto cols = std::max(train.matrix.n_cols(), test.matrix.n_cols());
      data.train = reshape(train.matrix, rows, cols);
      data.test = reshape(test.matrix, rows, cols);
    }
  } else if (a.test_frac > 0.0) {
    auto split = split_random(train.matrix, a.test_frac, a.split_seed);
    data.train = std::move(split.train);
    data.test = std::move(split.test);
  } else {
    data.train = std::move(train.matrix);
    data.test = SparseMatrix(data.train.n_rows(), data.train.n_cols(), {});
  }
  return data;
}

fs::path run_output_dir(const RunArgs& a, const RunConfig& rc, const std::string& method) {
  if (!a.out.empty()) return a.out;
  return default_output_root() / (method + "_" + std::to_string(rc.row_blocks) + "x" +
                                  std::to_string(rc.col_blocks) + "_seed" + std::to_string(rc.seed));
}

int cmd_run(RunArgs a, const CLI::App& sub) {
  auto given = [&](const char* name) { return sub.get_option(name)->count() > 0; };

  // Defaults < config file < flags.
  RunConfig rc;
  std::string method = a.method;
  if (!a.config.empty()) {
    const auto doc = read_json_file(a.config);
    if (doc.contains("config")) {  // a replayed run_config.json
      from_json(doc.at("config"), rc);
      if (doc.contains("inputs")) {
        const auto& in = doc.at("inputs");
        if (in.contains("method_flag")) method = in.at("method_flag").get<std::string>();
        if (a.train.empty() && in.contains("train")) a.train = in.at("train").get<std::string>();
        if (a.test.empty() && in.contains("test")) a.test = in.at("test").get<std::string>();
        if (!given("--format") && in.contains("format")) a.format = in.at("format").get<std::string>();
        if (!given("--test-frac") && in.contains("test_frac")) a.test_frac = in.at("test_frac").get<double>();
        if (!given("--split-seed") && in.contains("split_seed")) a.split_seed = in.at("split_seed").get<std::uint64_t>();
      }
    } else {
      from_json(doc, rc);
    }
  }
  if (given("--method")) method = a.method;
  const auto [kind, approx] = parse_method_flag(method);
  if (kind == Method::kPp) rc.approx = approx;
  if (given("--partition")) std::tie(rc.row_blocks, rc.col_blocks) = parse_partition(a.partition);
  if (given("--order")) rc.order = parse_order_scheme(a.order);
  if (given("--k")) rc.k = a.rc.k;
  if (given("--tau")) rc.tau = a.rc.tau;
  if (given("--iterations")) rc.iterations = a.rc.iterations;
  if (given("--burn-in")) rc.burn_in = a.rc.burn_in;
  if (given("--thin")) rc.thin = a.rc.thin;
  if (given("--seed")) rc.seed = a.rc.seed;
  if (given("--top-n")) rc.top_n = a.rc.top_n;
  if (given("--workers")) rc.workers = a.rc.workers;
  if (given("--beta0")) rc.beta0 = a.rc.beta0;
  if (given("--save-chains")) rc.save_chains = true;
  if (given("--lambda")) {
    rc.lambda = a.lambda == "auto" ? std::nullopt : std::optional<double>(std::stod(a.lambda));
  }
  if (kind == Method::kFull) rc.row_blocks = rc.col_blocks = 1;
  rc.validate();
  if (a.replicates == 0) throw ValidationError("--replicates must be at least 1");

  const auto data = load_run_data(a);
  const auto base_dir = run_output_dir(a, rc, method);
  json inputs = {{"method_flag", method_flag(kind, rc.approx)},
                 {"format", a.format},
                 {"test_frac", a.test_frac},
                 {"split_seed", a.split_seed}};
  if (!a.train.empty()) inputs["train"] = fs::absolute(a.train).string();
  if (!a.test.empty()) inputs["test"] = fs::absolute(a.test).string();

  std::vector<double> rmses, times;
  for (std::size_t r = 0; r < a.replicates; ++r) {
    RunConfig rep = rc;
    fs::path dir = base_dir;
    if (a.replicates > 1) {
      rep.seed = derive_seed(rc.seed, {r});
      dir = base_dir / ("rep" + std::to_string(r));
    }
    RunContext ctx{dir, inputs};
    ctx.inputs["replicate"] = r;
    // The exact matrices used, in compacted coordinates, so evaluation never re-splits.
    save_triplets(dir / "data" / "train.txt", data.train);
    save_triplets(dir / "data" / "test.txt", data.test);
    const auto result = run_method(kind, data.train, rep, ctx);
    std::cout << std::fixed << std::setprecision(4) << "run " << dir.string() << ": " << method << " "
              << result.plan.row_blocks() << "x" << result.plan.col_blocks() << " seed " << rep.seed;
    if (!data.test.empty()) {
      const auto predictions = predict(result.x_mean, result.w_mean, data.test);
      std::vector<double> truths;
      for (const auto& e : data.test.entries()) truths.push_back(e.value);
      rmses.push_back(rmse(predictions, truths));
      std::cout << " test RMSE " << rmses.back();
    }
    times.push_back(result.timings.distributed());
    std::cout << " time " << std::setprecision(3) << times.back() << " s (stages " << result.timings.stage_max[0]
              << "/" << result.timings.stage_max[1] << "/" << result.timings.stage_max[2] << ", aggregation "
              << result.timings.aggregation << ")\n";
  }
  if (a.replicates > 1) {
    const auto t = mean_std(times);
    std::cout << std::setprecision(4) << "replicates " << a.replicates;
    if (!rmses.empty()) {
      const auto m = mean_std(rmses);
      std::cout << " RMSE " << m.mean << " +- " << m.stddev;
    }
    std::cout << " time " << t.mean << " +- " << t.stddev << " s\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string run;
  std::string baseline;
  std::string train;
  std::string test;
  std::string bins;
  std::string json_out;
  std::string csv_out;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const fs::path run_dir = a.run;
  const auto result = load_run(run_dir);
  const fs::path train_path = a.train.empty() ? run_dir / "data" / "train.txt" : fs::path(a.train);
  const fs::path test_path = a.test.empty() ? run_dir / "data" / "test.txt" : fs::path(a.test);
  for (const auto& p : {train_path, test_path}) {
    if (!fs::exists(p)) throw IoError("evaluation input '" + p.string() + "' not found");
  }
  const auto train = load_triplets(train_path, TripletFormat::kPlain).matrix;
  const auto loaded_test = load_triplets(test_path, TripletFormat::kPlain).matrix;
  const auto test = reshape(loaded_test, train.n_rows(), train.n_cols());
  if (test.empty()) throw ValidationError("test set is empty; nothing to evaluate");
  const auto edges = a.bins.empty() ? default_frequency_edges() : parse_edges(a.bins);
  std::optional<FactorizationResult> baseline;
  if (!a.baseline.empty()) baseline = load_run(a.baseline);
  const auto report = evaluate(result, train, test, edges, baseline ? &*baseline : nullptr);
  std::cout << report.to_text();
  if (!a.json_out.empty()) write_text(a.json_out, report.to_json().dump(2) + "\n");
  if (!a.csv_out.empty()) {
    const bool fresh = !fs::exists(a.csv_out);
    std::ofstream out(a.csv_out, std::ios::app);
    if (!out) throw IoError("cannot write '" + a.csv_out + "'");
    if (fresh) out << MetricReport::csv_header() << "\n";
    out << report.csv_row() << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------- cost-model

struct CostArgs {
  CostModel cm{6040, 3706, 1e6, 10, 1200, 1, 1, 0};
  std::string workers = "1,4,9,16,25,36";
};

int cmd_cost_model(CostArgs a) {
  if (a.cm.l <= 0.0) a.cm.l = CostModel::per_row_parameters(a.cm.k, a.cm.c);
  std::vector<double> grid;
  for (double u : parse_edges(a.workers)) grid.push_back(u);
  std::cout << std::left << std::setw(8) << "U" << std::right << std::setw(16) << "t0" << std::setw(16) << "t_a"
            << std::setw(16) << "total" << std::setw(16) << "communication" << "\n";
  std::cout << std::scientific << std::setprecision(4);
  for (double u : grid) {
    auto cm = a.cm;
    cm.u = u;
    const auto e = cost_model_eval(cm);
    std::cout << std::left << std::setw(8) << static_cast<long long>(u) << std::right << std::setw(16) << e.t0
              << std::setw(16) << e.ta << std::setw(16) << e.total << std::setw(16) << e.communication << "\n";
  }
  return kExitOk;
}

}  // namespace

std::pair<std::size_t, std::size_t> parse_partition(std::string_view text) {
  const auto x = text.find('x');
  auto parse = [&](std::string_view part) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (part.empty() || ec != std::errc{} || ptr != part.data() + part.size() || v == 0) {
      throw ValidationError("partition must look like RxC with positive integers, got '" + std::string(text) + "'");
    }
    return v;
  };
  if (x == std::string_view::npos) parse({});
  return {parse(text.substr(0, x)), parse(text.substr(x + 1))};
}

std::pair<Method, ApproxKind> parse_method_flag(std::string_view text) {
  if (text == "full") return {Method::kFull, ApproxKind::kMomentMatching};
  if (text == "pp-mm") return {Method::kPp, ApproxKind::kMomentMatching};
  if (text == "pp-dm") return {Method::kPp, ApproxKind::kDominantMode};
  if (text == "pp-gmm") return {Method::kPp, ApproxKind::kGmm};
  if (text == "ep-parametric") return {Method::kEp, ApproxKind::kMomentMatching};
  throw ValidationError("unknown method '" + std::string(text) + "' (full|pp-mm|pp-dm|pp-gmm|ep-parametric)");
}

std::string method_flag(Method method, ApproxKind approx) {
  switch (method) {
    case Method::kFull: return "full";
    case Method::kEp: return "ep-parametric";
    case Method::kPp: return "pp-" + std::string(to_string(approx));
  }
  return "?";
}

fs::path default_output_root() {
  const char* env = std::getenv("BMFPP_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("bmfpp_out");
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Distributed Bayesian matrix factorization with posterior propagation"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Simulate a low-rank matrix and split it into train/test files");
  s->add_option("--n", sim.n, "Rows")->required();
  s->add_option("--d", sim.d, "Columns")->required();
  s->add_option("--k", sim.k, "Latent dimensions")->capture_default_str();
  s->add_option("--tau", sim.tau, "Noise precision")->capture_default_str();
  s->add_option("--seed", sim.seed, "Seed")->capture_default_str();
  s->add_option("--missing", sim.missing, "random|structured")->capture_default_str();
  s->add_option("--test-frac", sim.test_frac, "Test fraction (target fraction for rescaled structured)")
      ->capture_default_str();
  s->add_option("--structured-mode", sim.structured_mode, "raw|rescaled|complement")->capture_default_str();
  s->add_option("--out", sim.out, "Output directory");

  RunArgs run;
  auto* r = app.add_subcommand("run", "Run full-data, posterior-propagation or embarrassingly parallel inference");
  r->add_option("--train", run.train, "Training triplets");
  r->add_option("--test", run.test, "Test triplets");
  r->add_option("--format", run.format, "plain|movielens")->capture_default_str();
  r->add_option("--test-frac", run.test_frac, "Hold out this fraction of --train when no --test is given");
  r->add_option("--split-seed", run.split_seed, "Seed of the internal split")->capture_default_str();
  r->add_option("--method", run.method, "full|pp-mm|pp-dm|pp-gmm|ep-parametric")->capture_default_str();
  r->add_option("--partition", run.partition, "RxC")->capture_default_str();
  r->add_option("--order", run.order, "decreasing|random (default decreasing)");
  r->add_option("--k", run.rc.k, "Latent dimensions (default 10)");
  r->add_option("--tau", run.rc.tau, "Noise precision (default 1)");
  r->add_option("--iterations", run.rc.iterations, "Gibbs sweeps (default 1200)");
  r->add_option("--burn-in", run.rc.burn_in, "Burn-in sweeps (default 800)");
  r->add_option("--thin", run.rc.thin, "Thinning (default 2)");
  r->add_option("--seed", run.rc.seed, "Master seed (default 0)");
  r->add_option("--top-n", run.rc.top_n, "GMM components (default 3)");
  r->add_option("--lambda", run.lambda, "lambda-means scale or 'auto'");
  r->add_option("--workers", run.rc.workers, "Concurrent blocks per stage (default 1)");
  r->add_option("--beta0", run.rc.beta0, "Normal-Wishart beta0 (default 2)");
  r->add_flag("--save-chains", "Write every block's chain to the run directory");
  r->add_option("--config", run.config, "JSON run configuration or a previous run_config.json");
  r->add_option("--out", run.out, "Run directory");
  r->add_option("--replicates", run.replicates, "Independent runs with derived seeds")->capture_default_str();

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Metrics for a finished run");
  e->add_option("--run", ev.run, "Run directory")->required();
  e->add_option("--baseline", ev.baseline, "Full-data run directory for WTS");
  e->add_option("--train", ev.train, "Training triplets (default: the run's copy)");
  e->add_option("--test", ev.test, "Test triplets (default: the run's copy)");
  e->add_option("--bins", ev.bins, "Comma separated row-frequency bin edges, e.g. 0,10,20,inf");
  e->add_option("--json", ev.json_out, "Write the report as JSON");
  e->add_option("--csv", ev.csv_out, "Append a summary row to a CSV file");

  CostArgs cost;
  auto* c = app.add_subcommand("cost-model", "Tabulate the computation and communication cost model");
  c->add_option("--n", cost.cm.n, "Rows")->capture_default_str();
  c->add_option("--d", cost.cm.d, "Columns")->capture_default_str();
  c->add_option("--m", cost.cm.m, "Observed entries")->capture_default_str();
  c->add_option("--k", cost.cm.k, "Latent dimensions")->capture_default_str();
  c->add_option("--t", cost.cm.t, "Iterations")->capture_default_str();
  c->add_option("--c", cost.cm.c, "Mixture components")->capture_default_str();
  c->add_option("--l", cost.cm.l, "Parameters per row distribution (default C(K+K^2))");
  c->add_option("--workers", cost.workers, "Comma separated worker counts")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitValidation;
  }
  setup_logging(quiet);

  try {
    if (s->parsed()) return cmd_simulate(sim);
    if (r->parsed()) return cmd_run(run, *r);
    if (e->parsed()) return cmd_evaluate(ev);
    if (c->parsed()) return cmd_cost_model(cost);
  } catch (const ParseError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitValidation;
  } catch (const ValidationError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitValidation;
  } catch (const NumericalError& err) {
    std::cerr << "numerical error: " << err.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& err) {
    std::cerr << "I/O error: " << err.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "I/O error: " << err.what() << "\n";
    return kExitIo;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace bmfpp
