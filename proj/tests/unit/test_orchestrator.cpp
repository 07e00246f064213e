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

#include "bmfpp/errors.hpp"
#include "bmfpp/orchestrator.hpp"
#include "unit/test_support.hpp"

#include <doctest.h>

#include <atomic>

using namespace bmfpp;

namespace {

RunConfig tiny_config(std::size_t r, std::size_t c) {
  RunConfig cfg;
  cfg.k = 2;
  cfg.tau = 2.0;
  cfg.iterations = 40;
  cfg.burn_in = 20;
  cfg.thin = 1;
  cfg.seed = 17;
  cfg.row_blocks = r;
  cfg.col_blocks = c;
  return cfg;
}

SparseMatrix tiny_train(std::uint64_t seed = 3) {
  const auto [m, truth] = simulate(18, 14, 2, 2.0, seed);
  return split_random(m, 0.3, seed).train;
}

void check_same_posteriors(const std::vector<RowPosterior>& a, const std::vector<RowPosterior>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].mean == b[i].mean);
    CHECK(a[i].precision == b[i].precision);
  }
}

}  // namespace

TEST_CASE("run configuration JSON round-trips and overlays") {
  RunConfig c = tiny_config(3, 2);
  c.approx = ApproxKind::kGmm;
  c.order = OrderScheme::kRandom;
  c.lambda = 0.7;
  const nlohmann::json j = c;
  RunConfig back;
  from_json(j, back);
  CHECK(nlohmann::json(back) == j);

  RunConfig partial;
  from_json(nlohmann::json{{"k", 7}, {"approx", "dm"}}, partial);
  CHECK(partial.k == 7);
  CHECK(partial.approx == ApproxKind::kDominantMode);
  CHECK(partial.iterations == 1200);
  CHECK_THROWS_AS(from_json(nlohmann::json{{"kay", 7}}, partial), ValidationError);
  CHECK_THROWS_AS(from_json(nlohmann::json{{"k", "seven"}}, partial), ValidationError);
}

TEST_CASE("run configuration validation") {
  CHECK_NOTHROW(RunConfig{}.validate());
  auto c = tiny_config(1, 1);
  c.burn_in = c.iterations;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_config(1, 1);
  c.thin = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_config(0, 1);
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_config(1, 1);
  c.thin = 8;  // 20 / 8 = 2 retained samples < K + 2
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("stage schedule") {
  const auto m = tiny_train();
  const auto plan = make_plan(m, tiny_config(3, 3));
  const auto stages = stage_blocks(plan);
  CHECK(stages[0].size() == 1);
  CHECK(stages[1].size() == 4);
  CHECK(stages[2].size() == 4);  // (r - 1)(c - 1)
  for (const auto& [i, j] : stages[2]) CHECK((i > 0 && j > 0));
  const auto thin = stage_blocks(make_plan(m, tiny_config(1, 2)));
  CHECK(thin[1].size() == 1);
  CHECK(thin[2].empty());
  CHECK(block_seed(1, 2, 3, 4) == block_seed(1, 2, 3, 4));
  CHECK(block_seed(1, 2, 3, 4) != block_seed(1, 3, 3, 4));
}

TEST_CASE("1x1 runs of every method share one chain") {
  testing::TempDir dir("orch");
  const auto m = tiny_train();
  auto cfg = tiny_config(1, 1);
  cfg.keep_chains = true;
  const auto plan = make_plan(m, cfg);
  const auto full = run_full(m, cfg, {dir.path() / "full"});
  const auto pp = run_pp(m, plan, cfg, {dir.path() / "pp"});
  const auto ep = run_ep(m, plan, cfg, {dir.path() / "ep"});
  const auto& a = *full.blocks[0].chain;
  for (const auto* other : {&pp, &ep}) {
    const auto& b = *other->blocks[0].chain;
    REQUIRE(a.samples.size() == b.samples.size());
    for (std::size_t s = 0; s < a.samples.size(); ++s) {
      CHECK(a.samples[s].x == b.samples[s].x);
      CHECK(a.samples[s].w == b.samples[s].w);
    }
  }
  check_same_posteriors(pp.x_posteriors, ep.x_posteriors);
  check_same_posteriors(full.w_posteriors, pp.w_posteriors);
}

TEST_CASE("a 1x2 partition runs stages one and two only") {
  testing::TempDir dir("orch");
  const auto m = tiny_train();
  const auto cfg = tiny_config(1, 2);
  const auto result = run_pp(m, make_plan(m, cfg), cfg, {dir.path()});
  CHECK(result.timings.stage_max[2] == 0.0);
  CHECK(result.timings.blocks.size() == 2);
  CHECK(std::filesystem::exists(posterior_path(dir.path(), 1, 0, 0, Side::kX)));
  CHECK(std::filesystem::exists(posterior_path(dir.path(), 2, 0, 1, Side::kW)));
  CHECK_FALSE(std::filesystem::exists(dir.path() / "stage3"));
  CHECK(std::filesystem::exists(dir.path() / "aggregate" / "X.post"));
  CHECK(std::filesystem::exists(dir.path() / "timings.json"));
  CHECK(std::filesystem::exists(dir.path() / "run_config.json"));
  CHECK(result.x_posteriors.size() == m.n_rows());
  CHECK(result.w_posteriors.size() == m.n_cols());
  for (const auto& p : result.x_posteriors) CHECK_NOTHROW(p.validate());
  CHECK(result.aggregation_log.rows_total == m.n_rows() + m.n_cols());
}

TEST_CASE("runs are reproducible and independent of the worker count") {
  testing::TempDir dir("orch");
  const auto m = tiny_train();
  auto cfg = tiny_config(2, 3);
  cfg.approx = ApproxKind::kGmm;
  const auto plan = make_plan(m, cfg);
  const auto a = run_pp(m, plan, cfg, {dir.path() / "a"});
  cfg.workers = 3;
  const auto b = run_pp(m, plan, cfg, {dir.path() / "b"});
  check_same_posteriors(a.x_posteriors, b.x_posteriors);
  check_same_posteriors(a.w_posteriors, b.w_posteriors);
  CHECK(a.x_mean == b.x_mean);
  for (std::size_t i = 0; i < a.blocks.size(); ++i) CHECK(a.blocks[i].w_mean == b.blocks[i].w_mean);
}

TEST_CASE("empty blocks pass their priors through") {
  // Rows 0-1 observe every column; rows 2-3 only columns 0-1, so block (1,1) is empty.
  std::vector<Entry> entries;
  Rng rng(4);
  std::normal_distribution<double> n01;
  for (std::uint32_t r = 0; r < 4; ++r) {
    for (std::uint32_t c = 0; c < 4; ++c) {
      if (r >= 2 && c >= 2) continue;
      entries.push_back({r, c, n01(rng)});
    }
  }
  const SparseMatrix m(4, 4, entries);
  testing::TempDir dir("orch");
  auto cfg = tiny_config(2, 2);
  cfg.k = 1;
  const auto plan = make_plan(m, cfg);
  const auto result = run_pp(m, plan, cfg, {dir.path()});
  CHECK(result.block(1, 1).passthrough);
  CHECK_FALSE(result.block(1, 0).passthrough);
  const auto prior_x = load_posteriors(dir.path(), 2, 1, 0, Side::kX);
  const auto passed = load_posteriors(dir.path(), 3, 1, 1, Side::kX);
  CHECK(passed.gaussian(0).precision == prior_x.gaussian(0).precision);
  for (const auto& p : result.x_posteriors) CHECK_NOTHROW(p.validate());

  const auto ep = run_ep(m, plan, cfg, {dir.path() / "ep"});
  CHECK(ep.block(1, 1).passthrough);
  for (const auto& p : ep.w_posteriors) CHECK_NOTHROW(p.validate());
}

TEST_CASE("missing or damaged stage files name the stage and block") {
  testing::TempDir dir("orch");
  try {
    load_posteriors(dir.path(), 2, 1, 0, Side::kX);
    FAIL("expected an I/O error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("stage 2 block (1,0)") != std::string::npos);
  }
  PosteriorSet set;
  set.k = 1;
  set.gaussians = {{Vector::Ones(1), Matrix::Identity(1, 1)}};
  persist_posteriors(dir.path(), 3, 2, 1, set);
  const auto back = load_posteriors(dir.path(), 3, 2, 1, Side::kX);
  CHECK(back.gaussians[0].mean == set.gaussians[0].mean);
  std::filesystem::resize_file(posterior_path(dir.path(), 3, 2, 1, Side::kX), 30);
  CHECK_THROWS_AS(load_posteriors(dir.path(), 3, 2, 1, Side::kX), IoError);
}

TEST_CASE("finished runs reload from their directory") {
  testing::TempDir dir("orch");
  const auto m = tiny_train();
  const auto cfg = tiny_config(2, 2);
  const auto result = run_pp(m, make_plan(m, cfg), cfg, {dir.path()});
  const auto back = load_run(dir.path());
  CHECK(back.method == Method::kPp);
  CHECK(nlohmann::json(back.config) == nlohmann::json(cfg));
  CHECK(back.plan == result.plan);
  CHECK(back.x_mean == result.x_mean);
  check_same_posteriors(back.w_posteriors, result.w_posteriors);
  REQUIRE(back.blocks.size() == 4);
  CHECK(back.block(1, 1).x_mean == result.block(1, 1).x_mean);
  CHECK(back.timings.distributed() == doctest::Approx(result.timings.distributed()));
  CHECK_THROWS_AS(load_run(dir.path() / "nope"), IoError);
}

TEST_CASE("cost model") {
  CostModel cm{100, 80, 2000, 4, 50, 1, 1, CostModel::per_row_parameters(4, 1)};
  const auto e = cost_model_eval(cm);
  CHECK(e.t0 == doctest::Approx(((100.0 + 80.0) * 64.0 / 2.0 + 2000.0 * 16.0 / 4.0) * 50.0));
  CHECK(e.ta == doctest::Approx(100.0 / 2.0 * 20.0));
  CHECK(e.total == doctest::Approx(3.0 * e.t0 + e.ta));
  CHECK(e.communication == doctest::Approx(180.0 * 20.0));
  auto doubled = cm;
  doubled.t *= 2.0;
  CHECK(cost_model_eval(doubled).t0 == doctest::Approx(2.0 * e.t0));
  CHECK(cost_model_eval(doubled).ta == e.ta);
  double previous = e.total;
  for (double u = 2; u <= 400; u += 1) {
    cm.u = u;
    const double total = cost_model_eval(cm).total;
    CHECK(total <= previous);
    previous = total;
  }
  cm.k = 0;
  CHECK_THROWS_AS(cost_model_eval(cm), ValidationError);
}

TEST_CASE("parallel_for covers every index and rethrows") {
  std::vector<std::atomic<int>> hits(100);
  parallel_for(100, 4, [&](std::size_t i) { ++hits[i]; });
  for (const auto& h : hits) CHECK(h.load() == 1);
  CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) {
                    if (i == 5) throw NumericalError("boom");
                  }),
                  NumericalError);
}
