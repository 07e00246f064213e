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

#include "bmfpp/aggregate.hpp"

#include "bmfpp/errors.hpp"

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

namespace bmfpp {

namespace {

Vector solve_spd(const Matrix& precision, const Vector& rhs) {
  const Matrix l = cholesky_lower(precision);
  Vector x = l.triangularView<Eigen::Lower>().solve(rhs);
  l.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
  return x;
}

void check_dims(const RowPosterior& p, Eigen::Index k, const char* where) {
  if (p.mean.size() != k || p.precision.rows() != k || p.precision.cols() != k) {
    throw ValidationError(std::string(where) + ": posteriors disagree on K");
  }
}

double epsilon_for(const Matrix& reference, const AggregationOptions& options) {
  const double scale = std::abs(reference.trace()) / static_cast<double>(reference.rows());
  return options.epsilon_scale * (scale > 0.0 ? scale : 1.0);
}

RowPosterior finish(Matrix precision, const Vector& rhs, double epsilon, RowCorrection& corr,
                    const char* where) {
  precision = symmetrize(precision);
  if (!precision.allFinite() || !rhs.allFinite()) {
    throw NumericalError(std::string(where) + ": non-finite aggregate");
  }
  if (!is_spd(precision)) {
    double shift = 0.0;
    precision = eigenvalue_correction(precision, epsilon, &shift);
    corr.final_corrected = true;
    corr.max_shift = std::max(corr.max_shift, shift);
    spdlog::debug("{}: combined precision indefinite; shifted diagonal by {:.3e}", where, shift);
  }
  Vector mean = solve_spd(precision, rhs);
  if (!mean.allFinite()) throw NumericalError(std::string(where) + ": non-finite aggregate mean");
  return {std::move(mean), std::move(precision)};
}

}  // namespace

RowPosterior gaussian_product(std::span<const RowPosterior> posteriors) {
  if (posteriors.empty()) throw ValidationError("gaussian_product: no inputs");
  if (posteriors.size() == 1) return posteriors.front();
  const Eigen::Index k = posteriors.front().dim();
  Matrix precision = Matrix::Zero(k, k);
  Vector rhs = Vector::Zero(k);
  for (const auto& p : posteriors) {
    check_dims(p, k, "gaussian_product");
    precision += p.precision;
    rhs += p.precision * p.mean;
  }
  precision = symmetrize(precision);
  return {solve_spd(precision, rhs), precision};
}

Matrix eigenvalue_correction(const Matrix& m, double epsilon, double* shift) {
  if (shift) *shift = 0.0;
  if (!is_symmetric(m)) throw ValidationError("eigenvalue_correction: matrix is not symmetric");
  if (is_spd(m)) return m;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw NumericalError("eigenvalue_correction: eigensolver failed");
  const double amount = std::abs(eig.eigenvalues().minCoeff()) + epsilon;
  Matrix out = m;
  out.diagonal().array() += amount;
  if (shift) *shift = amount;
  return out;
}

RowPosterior pp_aggregate_row(const AggregationInput& input, const AggregationOptions& options,
                              RowCorrection* correction) {
  RowCorrection local;
  RowCorrection& corr = correction ? *correction : local;
  corr = {};
  const auto& base = input.stage1;
  if (input.others.empty()) return base;
  const Eigen::Index k = base.dim();
  check_dims(base, k, "pp_aggregate_row");
  const double epsilon = epsilon_for(base.precision, options);
  const double base_weight = 2.0 - static_cast<double>(input.others.size() + 1);

  Matrix precision = base_weight * base.precision;
  Vector rhs = base_weight * (base.precision * base.mean);
  for (const auto& other : input.others) {
    check_dims(other, k, "pp_aggregate_row");
    const Matrix divided = symmetrize(other.precision - base.precision);
    Matrix corrected = other.precision;
    if (!is_spd(divided)) {
      double shift = 0.0;
      corrected = eigenvalue_correction(divided, epsilon, &shift) + base.precision;
      ++corr.corrected_terms;
      corr.max_shift = std::max(corr.max_shift, shift);
    }
    precision += corrected;
    rhs += corrected * other.mean;
  }
  return finish(std::move(precision), rhs, epsilon, corr, "pp_aggregate_row");
}

RowPosterior ep_parametric_aggregate(std::span<const RowPosterior> subset_posteriors,
                                     const RowPosterior& prior, const AggregationOptions& options,
                                     RowCorrection* correction) {
  RowCorrection local;
  RowCorrection& corr = correction ? *correction : local;
  corr = {};
  if (subset_posteriors.empty()) throw ValidationError("ep_parametric_aggregate: no subset posteriors");
  if (subset_posteriors.size() == 1) return subset_posteriors.front();
  const Eigen::Index k = subset_posteriors.front().dim();
  check_dims(prior, k, "ep_parametric_aggregate");
  const double extra = static_cast<double>(subset_posteriors.size() - 1);
  Matrix precision = -extra * prior.precision;
  Vector rhs = -extra * (prior.precision * prior.mean);
  for (const auto& p : subset_posteriors) {
    check_dims(p, k, "ep_parametric_aggregate");
    precision += p.precision;
    rhs += p.precision * p.mean;
  }
  const double epsilon = epsilon_for(subset_posteriors.front().precision, options);
  return finish(std::move(precision), rhs, epsilon, corr, "ep_parametric_aggregate");
}

void AggregationLog::record(Side side, std::size_t row, const RowCorrection& c) {
  ++rows_total;
  if (c.corrected_terms > 0 || c.final_corrected) corrected.push_back({side, row, c});
}

nlohmann::json AggregationLog::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  double max_shift = 0.0;
  std::size_t terms = 0;
  for (const auto& e : corrected) {
    rows.push_back({{"side", std::string(bmfpp::to_string(e.side))},
                    {"row", e.row},
                    {"corrected_terms", e.correction.corrected_terms},
                    {"final_corrected", e.correction.final_corrected},
                    {"max_shift", e.correction.max_shift}});
    max_shift = std::max(max_shift, e.correction.max_shift);
    terms += e.correction.corrected_terms;
  }
  return {{"rows_total", rows_total},
          {"rows_corrected", corrected.size()},
          {"terms_corrected", terms},
          {"max_shift", max_shift},
          {"corrections", std::move(rows)}};
}

}  // namespace bmfpp
