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

#include "bmfpp/linalg.hpp"

#include "bmfpp/errors.hpp"

#include <spdlog/spdlog.h>

#include <cmath>

namespace bmfpp {

bool is_symmetric(const Matrix& m, double rel_tol) {
  if (m.rows() != m.cols()) return false;
  if (m.size() == 0) return true;
  const double scale = std::max(m.cwiseAbs().maxCoeff(), 1e-300);
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

bool is_spd(const Matrix& m) {
  if (m.rows() != m.cols() || m.size() == 0) return false;
  if (!m.allFinite()) return false;
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) return false;
  const Matrix l = llt.matrixL();
  return (l.diagonal().array() > 0.0).all();
}

Matrix cholesky_lower(const Matrix& m, bool* jittered) {
  if (jittered) *jittered = false;
  if (!m.allFinite()) throw NumericalError("cholesky: non-finite matrix entries");
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() == Eigen::Success) {
    Matrix l = llt.matrixL();
    if ((l.diagonal().array() > 0.0).all()) return l;
  }
  const auto k = static_cast<double>(m.rows());
  const double jitter = 1e-10 * std::abs(m.trace()) / k;
  spdlog::debug("cholesky failed; retrying with diagonal jitter {:.3e}", jitter);
  Matrix shifted = m;
  shifted.diagonal().array() += jitter;
  llt.compute(shifted);
  if (llt.info() == Eigen::Success) {
    Matrix l = llt.matrixL();
    if ((l.diagonal().array() > 0.0).all()) {
      if (jittered) *jittered = true;
      return l;
    }
  }
  throw NumericalError("cholesky: matrix is not positive definite after jitter");
}

Matrix spd_inverse(const Matrix& m) {
  const Matrix l = cholesky_lower(m);
  const Matrix id = Matrix::Identity(m.rows(), m.cols());
  Matrix linv = l.triangularView<Eigen::Lower>().solve(id);
  return symmetrize(linv.transpose() * linv);
}

}  // namespace bmfpp
