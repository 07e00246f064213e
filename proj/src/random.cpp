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

#include "bmfpp/random.hpp"

#include "bmfpp/errors.hpp"

#include <cmath>

namespace bmfpp {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(master);
  for (auto t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

Vector standard_normal(Rng& rng, Eigen::Index k) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector z(k);
  for (Eigen::Index i = 0; i < k; ++i) z(i) = normal(rng);
  return z;
}

Vector sample_gaussian_precision_chol(Rng& rng, const Vector& mean, const Matrix& precision_chol) {
  // If precision = L L^T then x = mean + L^-T z has covariance precision^-1.
  Vector z = standard_normal(rng, mean.size());
  precision_chol.transpose().triangularView<Eigen::Upper>().solveInPlace(z);
  return mean + z;
}

Matrix sample_wishart(Rng& rng, const Matrix& scale, double dof) {
  const Eigen::Index k = scale.rows();
  if (dof <= static_cast<double>(k) - 1.0) {
    throw ValidationError("sample_wishart: degrees of freedom must exceed K - 1");
  }
  const Matrix l = cholesky_lower(scale);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a = Matrix::Zero(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    std::chi_squared_distribution<double> chi2(dof - static_cast<double>(i));
    a(i, i) = std::sqrt(chi2(rng));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = normal(rng);
  }
  const Matrix la = l * a;
  return symmetrize(la * la.transpose());
}

}  // namespace bmfpp
