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
#include "bmfpp/linalg.hpp"
#include "bmfpp/random.hpp"
#include "unit/test_support.hpp"

#include <doctest.h>

#include <set>

using namespace bmfpp;

TEST_CASE("is_symmetric and is_spd") {
  Matrix m(2, 2);
  m << 2, 1, 1, 2;
  CHECK(is_symmetric(m));
  CHECK(is_spd(m));
  m(0, 1) = 1.5;
  CHECK_FALSE(is_symmetric(m));
  Matrix indefinite(2, 2);
  indefinite << 1, 2, 2, 1;
  CHECK(is_symmetric(indefinite));
  CHECK_FALSE(is_spd(indefinite));
  CHECK_FALSE(is_spd(Matrix(2, 3)));
}

TEST_CASE("cholesky_lower reconstructs and jitters a singular matrix once") {
  Rng rng(3);
  const Matrix a = testing::random_spd(rng, 4);
  bool jittered = true;
  const Matrix l = cholesky_lower(a, &jittered);
  CHECK_FALSE(jittered);
  CHECK((l * l.transpose() - a).norm() < 1e-12 * a.norm());

  Matrix singular = Matrix::Zero(2, 2);
  singular(0, 0) = 1.0;
  cholesky_lower(singular, &jittered);
  CHECK(jittered);

  Matrix negative = -Matrix::Identity(2, 2);
  CHECK_THROWS_AS(cholesky_lower(negative), NumericalError);
}

TEST_CASE("spd_inverse") {
  Rng rng(5);
  const Matrix a = testing::random_spd(rng, 5);
  CHECK((spd_inverse(a) * a - Matrix::Identity(5, 5)).norm() < 1e-10);
}

TEST_CASE("derive_seed is deterministic and order sensitive") {
  CHECK(derive_seed(7, {1, 2, 3}) == derive_seed(7, {1, 2, 3}));
  CHECK(derive_seed(7, {1, 2, 3}) != derive_seed(7, {3, 2, 1}));
  CHECK(derive_seed(7, {1}) != derive_seed(8, {1}));
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 3; ++s) {
    for (std::uint64_t i = 0; i < 10; ++i) {
      for (std::uint64_t j = 0; j < 10; ++j) seen.insert(derive_seed(0, {s, i, j}));
    }
  }
  CHECK(seen.size() == 300);
}

TEST_CASE("gaussian draws from a precision factor have the right moments") {
  Rng rng(11);
  const Eigen::Index k = 3;
  const Matrix precision = testing::random_spd(rng, k, 1.0);
  const Vector mean = testing::random_vector(rng, k);
  const Matrix l = cholesky_lower(precision);
  const int n = 40000;
  Vector sum = Vector::Zero(k);
  Matrix outer = Matrix::Zero(k, k);
  for (int i = 0; i < n; ++i) {
    const Vector x = sample_gaussian_precision_chol(rng, mean, l);
    sum += x;
    outer += (x - mean) * (x - mean).transpose();
  }
  const Matrix cov = spd_inverse(precision);
  const Vector err = sum / n - mean;
  for (Eigen::Index i = 0; i < k; ++i) CHECK(std::abs(err(i)) < 4.0 * std::sqrt(cov(i, i) / n));
  CHECK((outer / n - cov).norm() < 0.03 * cov.norm());
}

TEST_CASE("Wishart draws have mean dof * scale and the Bartlett variance") {
  Rng rng(13);
  const Eigen::Index k = 3;
  const Matrix scale = testing::random_spd(rng, k, 0.5) / 3.0;
  const double dof = 5.5;
  const int n = 20000;
  Matrix sum = Matrix::Zero(k, k);
  for (int i = 0; i < n; ++i) {
    const Matrix w = sample_wishart(rng, scale, dof);
    CHECK(is_spd(w));
    sum += w;
  }
  const Matrix mean = sum / n;
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      // Var(W_ij) = dof (S_ij^2 + S_ii S_jj)
      const double sd = std::sqrt(dof * (scale(i, j) * scale(i, j) + scale(i, i) * scale(j, j)) / n);
      CHECK(std::abs(mean(i, j) - dof * scale(i, j)) < 4.5 * sd);
    }
  }
  CHECK_THROWS_AS(sample_wishart(rng, scale, 1.5), ValidationError);
}
