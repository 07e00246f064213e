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
#include "bmfpp/eval.hpp"
#include "unit/test_support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

using namespace bmfpp;

TEST_CASE("rmse basics") {
  const std::vector<double> a{1, 2, 3};
  CHECK(rmse(a, a) == 0.0);
  const std::vector<double> b{3, 4, 5};
  CHECK(rmse(b, a) == doctest::Approx(2.0));
  CHECK_THROWS_AS(rmse(std::vector<double>{}, std::vector<double>{}), ValidationError);
  CHECK_THROWS_AS(rmse(a, std::vector<double>{1}), ValidationError);
}

TEST_CASE("rmse matches a two-pass long-double oracle and ignores pairing order") {
  Rng rng(1);
  std::normal_distribution<double> n01;
  std::vector<double> p(100), t(100);
  for (auto& v : p) v = n01(rng);
  for (auto& v : t) v = n01(rng);
  long double mean_sq = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i) mean_sq += static_cast<long double>(p[i] - t[i]) * (p[i] - t[i]);
  mean_sq /= 100.0L;
  CHECK(rmse(p, t) == doctest::Approx(static_cast<double>(std::sqrt(mean_sq))).epsilon(1e-14));
  std::vector<std::size_t> order(100);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<double> ps, ts;
  for (auto i : order) {
    ps.push_back(p[i]);
    ts.push_back(t[i]);
  }
  CHECK(rmse(ps, ts) == doctest::Approx(rmse(p, t)).epsilon(1e-14));
}

TEST_CASE("frequency bins") {
  const std::vector<double> truth{0, 0, 0, 0};
  const std::vector<double> pred{1, -1, 2, -2};
  const std::vector<std::size_t> freq{3, 5, 12, 15};
  const std::vector<double> edges{0, 10, 20};
  const auto bins = rmse_by_frequency(pred, truth, freq, edges);
  REQUIRE(bins.size() == 2);
  CHECK(*bins[0].rmse == doctest::Approx(1.0));
  CHECK(*bins[1].rmse == doctest::Approx(2.0));
  CHECK(bins[0].count == 2);

  const std::vector<double> all{0, std::numeric_limits<double>::infinity()};
  const auto one = rmse_by_frequency(pred, truth, freq, all);
  CHECK(*one[0].rmse == doctest::Approx(rmse(pred, truth)));

  const std::vector<double> wide{0, 10, 20, 40};
  const auto with_empty = rmse_by_frequency(pred, truth, freq, wide);
  CHECK(with_empty[2].count == 0);
  CHECK_FALSE(with_empty[2].rmse.has_value());
  // count-weighted squared errors reproduce the global mean squared error
  double weighted = 0.0;
  for (const auto& b : with_empty) {
    if (b.rmse) weighted += static_cast<double>(b.count) * *b.rmse * *b.rmse;
  }
  CHECK(weighted / 4.0 == doctest::Approx(rmse(pred, truth) * rmse(pred, truth)));

  const std::vector<double> narrow{4, 10};
  CHECK_THROWS_AS(rmse_by_frequency(pred, truth, freq, narrow), ValidationError);
  const std::vector<double> unsorted{0, 10, 5};
  CHECK_THROWS_AS(rmse_by_frequency(pred, truth, freq, unsorted), ValidationError);
}

TEST_CASE("pearson correlation") {
  const std::vector<double> a{1, 2, 3, 4};
  const std::vector<double> b{2, 4, 6, 8};
  const std::vector<double> c{4, 3, 2, 1};
  const std::vector<double> flat{1, 1, 1, 1};
  CHECK(pearson(a, a) == doctest::Approx(1.0));
  CHECK(pearson(a, b) == doctest::Approx(1.0));
  CHECK(pearson(a, c) == doctest::Approx(-1.0));
  CHECK(pearson(a, flat) == 0.0);
}

TEST_CASE("pearson recovers a constructed correlation of one half") {
  // b = 0.5 a + sqrt(0.75) e with a, e exactly orthonormal after centring.
  Rng rng(2);
  const Eigen::Index n = 500;
  Matrix m = testing::random_matrix(rng, n, 2);
  m.rowwise() -= m.colwise().mean();
  Eigen::HouseholderQR<Matrix> qr(m);
  const Matrix q = qr.householderQ() * Matrix::Identity(n, 2);
  const Vector a = q.col(0);
  const Vector b = 0.5 * q.col(0) + std::sqrt(0.75) * q.col(1);
  CHECK(pearson({a.data(), static_cast<std::size_t>(n)}, {b.data(), static_cast<std::size_t>(n)}) ==
        doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("alignment of identical and permuted factors") {
  Rng rng(3);
  const FactorMatrix a = testing::random_matrix(rng, 50, 4);
  const auto id = align_latent_dimensions(a, a);
  CHECK(id.permutation == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(id.signs == std::vector<int>{1, 1, 1, 1});

  FactorMatrix b = a;
  b.col(0).swap(b.col(2));
  b.col(1) *= -1.0;
  const auto al = align_latent_dimensions(a, b);
  CHECK(al.permutation == std::vector<std::size_t>{2, 1, 0, 3});
  CHECK(al.signs == std::vector<int>{1, -1, 1, 1});
  CHECK((apply_alignment(b, al) - a).norm() == 0.0);
}

TEST_CASE("greedy alignment agrees with the exhaustive search on noisy copies") {
  Rng rng(4);
  int agree = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index k = 2 + trial % 4;
    const FactorMatrix a = testing::random_matrix(rng, 80, k);
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    FactorMatrix b(80, k);
    for (Eigen::Index c = 0; c < k; ++c) b.col(perm[c]) = (c % 2 ? -1.0 : 1.0) * a.col(c);
    b += 0.3 * FactorMatrix(testing::random_matrix(rng, 80, k));
    const auto g = align_latent_dimensions(a, b);
    const auto x = align_latent_dimensions_exhaustive(a, b);
    agree += g.permutation == x.permutation && g.signs == x.signs;
  }
  CHECK(agree == 50);
}

TEST_CASE("wts") {
  CHECK(wts(5.0, 5.0) == 1.0);
  CHECK(wts(33956.0, 10398.0) == doctest::Approx(3.266).epsilon(1e-3));
  // the published 87.069 comes from unrounded times; the rounded ones give 87.048
  CHECK(wts(118124.0, 1357.0) == doctest::Approx(87.0479).epsilon(1e-5));
  CHECK_THROWS_AS(wts(0.0, 1.0), ValidationError);
  CHECK_THROWS_AS(wts(1.0, -1.0), ValidationError);
}

TEST_CASE("mean and sample standard deviation") {
  const std::vector<double> v{1, 2, 3, 4};
  const auto s = mean_std(v);
  CHECK(s.mean == 2.5);
  CHECK(s.stddev == doctest::Approx(std::sqrt(5.0 / 3.0)));
}

TEST_CASE("subset correlations pair blocks that share rows or columns") {
  FactorizationResult r;
  r.method = Method::kPp;
  r.plan.row_cuts = {0, 3, 6};
  r.plan.col_cuts = {0, 4, 8};
  Rng rng(5);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      BlockResult b;
      b.i = i;
      b.j = j;
      b.x_mean = testing::random_matrix(rng, 3, 2);
      b.w_mean = testing::random_matrix(rng, 4, 2);
      r.blocks.push_back(b);
    }
  }
  r.blocks[1].x_mean = r.blocks[0].x_mean;  // (0,1) shares X rows with (0,0)
  const auto pairs = subset_mean_correlations(r);
  REQUIRE(pairs.size() == 4);
  CHECK(pairs[0].side == Side::kX);
  CHECK(pairs[0].second == std::pair<std::size_t, std::size_t>{0, 1});
  CHECK(pairs[0].flattened == doctest::Approx(1.0));
  CHECK(pairs[0].per_dimension_mean() == doctest::Approx(1.0));
  CHECK(pairs[2].side == Side::kW);
  for (const auto& p : pairs) CHECK(std::abs(p.flattened) <= 1.0);

  r.blocks[3].passthrough = true;
  CHECK(subset_mean_correlations(r).size() == 2);
  r.blocks.pop_back();
  CHECK_THROWS_AS(subset_mean_correlations(r), ValidationError);
}

TEST_CASE("metric report renders") {
  MetricReport rep;
  rep.method = "pp-mm";
  rep.partition = "2x2";
  rep.rmse = 1.01;
  rep.bins = {{0, 10, 3, 0.9}, {10, std::numeric_limits<double>::infinity(), 0, std::nullopt}};
  rep.wts = 2.0;
  const auto j = rep.to_json();
  CHECK(j["rmse"] == 1.01);
  CHECK(j["frequency_bins"][1]["rmse"].is_null());
  CHECK(j["frequency_bins"][1]["upper"].is_null());
  CHECK(rep.to_text().find("[10, inf)") != std::string::npos);
  CHECK(MetricReport::csv_header() == "partition,method,seed,rmse,wall_clock,wts");
  CHECK(rep.csv_row().rfind("2x2,pp-mm,0,1.01,", 0) == 0);
}
