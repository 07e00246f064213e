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

#include <Eigen/Dense>

#include <optional>

namespace bmfpp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
/// Row-major storage so that factor rows are contiguous.
using FactorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// True when `m` is square and every entry equals its transpose partner within
/// `rel_tol` of the largest absolute entry.
bool is_symmetric(const Matrix& m, double rel_tol = 1e-10);

/// True when an LLT factorization of `m` succeeds with a strictly positive diagonal.
bool is_spd(const Matrix& m);

/// Lower Cholesky factor of an SPD matrix. On failure, adds
/// 1e-10 * trace/K to the diagonal and retries once; throws NumericalError if
/// that also fails. `jittered` reports whether the retry was needed.
Matrix cholesky_lower(const Matrix& m, bool* jittered = nullptr);

/// Inverse of an SPD matrix via its Cholesky factor.
Matrix spd_inverse(const Matrix& m);

/// Averages `m` with its transpose.
inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace bmfpp
