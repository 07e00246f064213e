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

// Dense-grid posterior moments for a rank-one factorization with fixed
// independent Gaussian priors on every x_n and w_d.
//
// Given w, each x_n is conditionally Gaussian with precision
//   a_n = lx_n + tau * sum_{d in obs(n)} w_d^2
// and mean b_n / a_n, b_n = lx_n mx_n + tau * sum_{d in obs(n)} w_d y_nd,
// so x integrates out in closed form:
//   log p(w | Y) = sum_d log N(w_d | mw_d, 1/lw_d)
//                + sum_n [ -1/2 log a_n + b_n^2 / (2 a_n) ] + const.
// The remaining D-dimensional integral over w is a plain Riemann sum.
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace bmfpp::oracle {

struct BilinearProblem {
  std::size_t n = 0;
  std::size_t d = 0;
  struct Cell {
    std::size_t row, col;
    double value;
  };
  std::vector<Cell> cells;
  double tau = 1.0;
  std::vector<double> mx, lx;  ///< row prior means / precisions
  std::vector<double> mw, lw;  ///< column prior means / precisions
};

struct BilinearMoments {
  std::vector<double> x;   ///< E[x_n]
  std::vector<double> w;   ///< E[w_d]
  std::vector<double> xw;  ///< E[x_n w_d], row-major n x d
};

/// `points` nodes per w-axis spanning mw_d +- half_width / sqrt(lw_d).
inline BilinearMoments bilinear_grid_moments(const BilinearProblem& p, std::size_t points,
                                             double half_width = 8.0) {
  if (p.d == 0 || p.d > 4) throw std::invalid_argument("bilinear_grid_moments: 1 <= D <= 4");
  const std::size_t d = p.d;
  std::vector<double> lo(d), step(d);
  for (std::size_t c = 0; c < d; ++c) {
    const double hw = half_width / std::sqrt(p.lw[c]);
    lo[c] = p.mw[c] - hw;
    step[c] = 2.0 * hw / static_cast<double>(points - 1);
  }
  std::size_t total = 1;
  for (std::size_t c = 0; c < d; ++c) total *= points;

  // Running log-sum-exp accumulators.
  long double log_scale = -INFINITY;
  long double z = 0.0L;
  std::vector<long double> ex(p.n, 0.0L), ew(d, 0.0L), exw(p.n * d, 0.0L);
  std::vector<double> w(d), a(p.n), b(p.n);
  std::vector<std::size_t> idx(d, 0);
  for (std::size_t node = 0; node < total; ++node) {
    std::size_t rest = node;
    for (std::size_t c = 0; c < d; ++c) {
      idx[c] = rest % points;
      rest /= points;
      w[c] = lo[c] + step[c] * static_cast<double>(idx[c]);
    }
    double logp = 0.0;
    for (std::size_t c = 0; c < d; ++c) logp -= 0.5 * p.lw[c] * (w[c] - p.mw[c]) * (w[c] - p.mw[c]);
    for (std::size_t r = 0; r < p.n; ++r) {
      a[r] = p.lx[r];
      b[r] = p.lx[r] * p.mx[r];
    }
    for (const auto& cell : p.cells) {
      a[cell.row] += p.tau * w[cell.col] * w[cell.col];
      b[cell.row] += p.tau * w[cell.col] * cell.value;
    }
    for (std::size_t r = 0; r < p.n; ++r) logp += -0.5 * std::log(a[r]) + 0.5 * b[r] * b[r] / a[r];

    if (logp > log_scale) {
      const long double f = std::exp(log_scale - static_cast<long double>(logp));
      z *= f;
      for (auto& v : ex) v *= f;
      for (auto& v : ew) v *= f;
      for (auto& v : exw) v *= f;
      log_scale = logp;
    }
    const long double weight = std::exp(static_cast<long double>(logp) - log_scale);
    z += weight;
    for (std::size_t c = 0; c < d; ++c) ew[c] += weight * w[c];
    for (std::size_t r = 0; r < p.n; ++r) {
      const long double xm = static_cast<long double>(b[r]) / a[r];
      ex[r] += weight * xm;
      for (std::size_t c = 0; c < d; ++c) exw[r * d + c] += weight * xm * w[c];
    }
  }
  BilinearMoments out;
  for (auto v : ex) out.x.push_back(static_cast<double>(v / z));
  for (auto v : ew) out.w.push_back(static_cast<double>(v / z));
  for (auto v : exw) out.xw.push_back(static_cast<double>(v / z));
  return out;
}

}  // namespace bmfpp::oracle
