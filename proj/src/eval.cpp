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

#include "bmfpp/eval.hpp"

#include "bmfpp/errors.hpp"
#include "bmfpp/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace bmfpp {

using nlohmann::json;

namespace {

std::string coord(std::pair<std::size_t, std::size_t> c) {
  return "(" + std::to_string(c.first) + "," + std::to_string(c.second) + ")";
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string edge_text(double e) {
  if (std::isinf(e)) return "inf";
  std::ostringstream out;
  out << e;
  return out.str();
}

}  // namespace

double rmse(std::span<const double> predictions, std::span<const double> truths) {
  if (predictions.size() != truths.size()) throw ValidationError("rmse: inputs differ in length");
  if (predictions.empty()) throw ValidationError("rmse: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double r = predictions[i] - truths[i];
    sum += r * r;
  }
  return std::sqrt(sum / static_cast<double>(predictions.size()));
}

std::vector<double> default_frequency_edges() {
  return {0, 10, 20, 40, 80, 160, std::numeric_limits<double>::infinity()};
}

std::vector<FrequencyBin> rmse_by_frequency(std::span<const double> predictions, std::span<const double> truths,
                                            std::span<const std::size_t> frequencies,
                                            std::span<const double> edges) {
  if (predictions.size() != truths.size() || predictions.size() != frequencies.size()) {
    throw ValidationError("rmse_by_frequency: inputs differ in length");
  }
  if (edges.size() < 2) throw ValidationError("rmse_by_frequency: need at least two bin edges");
  for (std::size_t b = 1; b < edges.size(); ++b) {
    if (!(edges[b] > edges[b - 1])) throw ValidationError("rmse_by_frequency: bin edges must increase strictly");
  }
  std::vector<double> sums(edges.size() - 1, 0.0);
  std::vector<FrequencyBin> bins(edges.size() - 1);
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
    bins[b].lower = edges[b];
    bins[b].upper = edges[b + 1];
  }
  for (std::size_t e = 0; e < predictions.size(); ++e) {
    const auto f = static_cast<double>(frequencies[e]);
    const auto it = std::upper_bound(edges.begin(), edges.end(), f);
    if (it == edges.begin() || it == edges.end()) {
      throw ValidationError("rmse_by_frequency: frequency " + std::to_string(frequencies[e]) +
                            " lies outside every bin");
    }
    const auto b = static_cast<std::size_t>(it - edges.begin()) - 1;
    const double r = predictions[e] - truths[e];
    sums[b] += r * r;
    ++bins[b].count;
  }
  for (std::size_t b = 0; b < bins.size(); ++b) {
    if (bins[b].count > 0) bins[b].rmse = std::sqrt(sums[b] / static_cast<double>(bins[b].count));
  }
  return bins;
}

std::vector<FrequencyBin> rmse_by_frequency(const FactorMatrix& x_mean, const FactorMatrix& w_mean,
                                            const SparseMatrix& train, const SparseMatrix& test,
                                            std::span<const double> edges) {
  if (train.n_rows() != test.n_rows() || train.n_cols() != test.n_cols()) {
    throw ValidationError("rmse_by_frequency: train and test shapes differ");
  }
  const auto counts = train.row_counts();
  const auto predictions = predict(x_mean, w_mean, test);
  std::vector<double> truths;
  std::vector<std::size_t> frequencies;
  truths.reserve(test.nnz());
  frequencies.reserve(test.nnz());
  for (const auto& e : test.entries()) {
    truths.push_back(e.value);
    frequencies.push_back(counts[e.row]);
  }
  return rmse_by_frequency(predictions, truths, frequencies, edges);
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("pearson: inputs differ in length");
  if (a.size() < 2) throw ValidationError("pearson: need at least two values");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

Matrix column_correlations(const FactorMatrix& a, const FactorMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("column_correlations: shapes differ");
  const Matrix ac = a;  // column-major copies make columns contiguous
  const Matrix bc = b;
  Matrix c(a.cols(), b.cols());
  const auto n = static_cast<std::size_t>(a.rows());
  for (Eigen::Index p = 0; p < a.cols(); ++p) {
    for (Eigen::Index q = 0; q < b.cols(); ++q) {
      c(p, q) = pearson({ac.col(p).data(), n}, {bc.col(q).data(), n});
    }
  }
  return c;
}

Alignment align_latent_dimensions(const FactorMatrix& a, const FactorMatrix& b) {
  const Matrix c = column_correlations(a, b);
  const auto k = static_cast<std::size_t>(c.rows());
  if (k > 20) throw ValidationError("align_latent_dimensions: K must be at most 20");
  Alignment out{std::vector<std::size_t>(k), std::vector<int>(k, 1)};
  std::vector<bool> used_a(k, false), used_b(k, false);
  for (std::size_t step = 0; step < k; ++step) {
    double best = -1.0;
    std::size_t bp = 0, bq = 0;
    for (std::size_t p = 0; p < k; ++p) {
      if (used_a[p]) continue;
      for (std::size_t q = 0; q < k; ++q) {
        if (used_b[q]) continue;
        const double v = std::abs(c(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q)));
        if (v > best) {
          best = v;
          bp = p;
          bq = q;
        }
      }
    }
    used_a[bp] = used_b[bq] = true;
    out.permutation[bp] = bq;
    out.signs[bp] = c(static_cast<Eigen::Index>(bp), static_cast<Eigen::Index>(bq)) < 0.0 ? -1 : 1;
  }
  return out;
}

Alignment align_latent_dimensions_exhaustive(const FactorMatrix& a, const FactorMatrix& b) {
  const Matrix c = column_correlations(a, b);
  const auto k = static_cast<std::size_t>(c.rows());
  if (k > 8) throw ValidationError("align_latent_dimensions_exhaustive: K must be at most 8");
  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::size_t> best_perm = perm;
  double best = -1.0;
  do {
    double total = 0.0;
    for (std::size_t p = 0; p < k; ++p) total += std::abs(c(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(perm[p])));
    if (total > best) {
      best = total;
      best_perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  Alignment out{best_perm, std::vector<int>(k, 1)};
  for (std::size_t p = 0; p < k; ++p) {
    if (c(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(best_perm[p])) < 0.0) out.signs[p] = -1;
  }
  return out;
}

FactorMatrix apply_alignment(const FactorMatrix& b, const Alignment& alignment) {
  const auto k = static_cast<std::size_t>(b.cols());
  if (alignment.permutation.size() != k || alignment.signs.size() != k) {
    throw ValidationError("apply_alignment: alignment size differs from K");
  }
  FactorMatrix out(b.rows(), b.cols());
  for (std::size_t p = 0; p < k; ++p) {
    if (alignment.permutation[p] >= k) throw ValidationError("apply_alignment: permutation out of range");
    out.col(static_cast<Eigen::Index>(p)) =
        static_cast<double>(alignment.signs[p]) * b.col(static_cast<Eigen::Index>(alignment.permutation[p]));
  }
  return out;
}

double PairCorrelation::per_dimension_mean() const {
  if (per_dimension.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(per_dimension.begin(), per_dimension.end(), 0.0) / static_cast<double>(per_dimension.size());
}

std::vector<PairCorrelation> subset_mean_correlations(const FactorizationResult& result) {
  const auto& plan = result.plan;
  const std::size_t rb = plan.row_blocks();
  const std::size_t cb = plan.col_blocks();
  if (result.blocks.size() != rb * cb) throw ValidationError("subset_mean_correlations: block means missing");
  std::vector<std::tuple<Side, std::pair<std::size_t, std::size_t>, std::pair<std::size_t, std::size_t>>> pairs;
  for (std::size_t j = 1; j < cb; ++j) pairs.emplace_back(Side::kX, std::pair{0, 0}, std::pair{0, j});
  for (std::size_t i = 1; i < rb; ++i) {
    for (std::size_t j = 1; j < cb; ++j) pairs.emplace_back(Side::kX, std::pair{i, 0}, std::pair{i, j});
  }
  for (std::size_t i = 1; i < rb; ++i) pairs.emplace_back(Side::kW, std::pair{0, 0}, std::pair{i, 0});
  for (std::size_t j = 1; j < cb; ++j) {
    for (std::size_t i = 1; i < rb; ++i) pairs.emplace_back(Side::kW, std::pair{0, j}, std::pair{i, j});
  }

  std::vector<PairCorrelation> out;
  for (const auto& [side, a, b] : pairs) {
    const auto& ba = result.blocks[a.first * cb + a.second];
    const auto& bb = result.blocks[b.first * cb + b.second];
    if (ba.passthrough || bb.passthrough) continue;
    const FactorMatrix& ma = side == Side::kX ? ba.x_mean : ba.w_mean;
    FactorMatrix mb = side == Side::kX ? bb.x_mean : bb.w_mean;
    if (ma.rows() != mb.rows() || ma.cols() != mb.cols()) {
      throw ValidationError("subset_mean_correlations: blocks " + coord(a) + " and " + coord(b) +
                            " do not share a range");
    }
    if (ma.rows() < 2) continue;
    if (result.method == Method::kEp) mb = apply_alignment(mb, align_latent_dimensions(ma, mb));
    PairCorrelation pc;
    pc.side = side;
    pc.first = a;
    pc.second = b;
    pc.flattened = pearson({ma.data(), static_cast<std::size_t>(ma.size())},
                           {mb.data(), static_cast<std::size_t>(mb.size())});
    const Matrix c = column_correlations(ma, mb);
    for (Eigen::Index p = 0; p < c.rows(); ++p) pc.per_dimension.push_back(c(p, p));
    out.push_back(std::move(pc));
  }
  return out;
}

double mean_correlation(std::span<const PairCorrelation> pairs) {
  if (pairs.empty()) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  for (const auto& p : pairs) sum += p.flattened;
  return sum / static_cast<double>(pairs.size());
}

double wts(double full_seconds, double distributed_seconds) {
  if (!(full_seconds > 0.0) || !(distributed_seconds > 0.0)) {
    throw ValidationError("wts: times must be positive");
  }
  return full_seconds / distributed_seconds;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw ValidationError("mean_std: no values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

json MetricReport::to_json() const {
  json bins_json = json::array();
  for (const auto& b : bins) {
    bins_json.push_back({{"lower", number_or_null(b.lower)},
                         {"upper", number_or_null(b.upper)},
                         {"count", b.count},
                         {"rmse", b.rmse ? json(*b.rmse) : json(nullptr)}});
  }
  json corr = json::array();
  for (const auto& c : correlations) {
    corr.push_back({{"side", std::string(bmfpp::to_string(c.side))},
                    {"first", {c.first.first, c.first.second}},
                    {"second", {c.second.first, c.second.second}},
                    {"flattened", c.flattened},
                    {"per_dimension", c.per_dimension},
                    {"per_dimension_mean", number_or_null(c.per_dimension_mean())}});
  }
  return {{"method", method},
          {"partition", partition},
          {"seed", seed},
          {"rmse", rmse},
          {"test_entries", test_entries},
          {"frequency_bins", std::move(bins_json)},
          {"correlations", std::move(corr)},
          {"mean_correlation", number_or_null(mean_correlation(correlations))},
          {"distributed_seconds", distributed_seconds},
          {"wts", wts ? json(*wts) : json(nullptr)}};
}

std::string MetricReport::to_text() const {
  std::ostringstream out;
  out << std::fixed;
  out << "method      " << method << "\n";
  out << "partition   " << partition << "\n";
  out << "seed        " << seed << "\n";
  out << "test RMSE   " << std::setprecision(4) << rmse << "  (" << test_entries << " entries)\n";
  out << "time        " << std::setprecision(3) << distributed_seconds << " s (distributed)\n";
  if (wts) out << "WTS         " << std::setprecision(3) << *wts << "\n";
  out << "\n" << std::left << std::setw(16) << "row frequency" << std::right << std::setw(10) << "count"
      << std::setw(10) << "rmse" << "\n";
  for (const auto& b : bins) {
    out << std::left << std::setw(16) << ("[" + edge_text(b.lower) + ", " + edge_text(b.upper) + ")") << std::right
        << std::setw(10) << b.count << std::setw(10);
    if (b.rmse) {
      out << std::setprecision(4) << *b.rmse;
    } else {
      out << "-";
    }
    out << "\n";
  }
  if (!correlations.empty()) {
    out << "\n" << std::left << std::setw(6) << "side" << std::setw(18) << "pair" << std::right << std::setw(12)
        << "flattened" << std::setw(12) << "per-dim" << "\n";
    for (const auto& c : correlations) {
      out << std::left << std::setw(6) << bmfpp::to_string(c.side) << std::setw(18)
          << (coord(c.first) + "-" + coord(c.second)) << std::right << std::setprecision(4) << std::setw(12)
          << c.flattened << std::setw(12) << c.per_dimension_mean() << "\n";
    }
    out << "mean correlation " << std::setprecision(4) << mean_correlation(correlations) << "\n";
  }
  return out.str();
}

std::string MetricReport::csv_header() { return "partition,method,seed,rmse,wall_clock,wts"; }

std::string MetricReport::csv_row() const {
  std::ostringstream out;
  out << std::setprecision(10) << partition << ',' << method << ',' << seed << ',' << rmse << ','
      << distributed_seconds << ',';
  if (wts) out << *wts;
  return out.str();
}

MetricReport evaluate(const FactorizationResult& result, const SparseMatrix& train, const SparseMatrix& test,
                      std::span<const double> edges, const FactorizationResult* baseline) {
  MetricReport report;
  report.method = std::string(to_string(result.method));
  if (result.method == Method::kPp) report.method += "-" + std::string(to_string(result.config.approx));
  report.partition = std::to_string(result.plan.row_blocks()) + "x" + std::to_string(result.plan.col_blocks());
  report.seed = result.config.seed;
  const auto predictions = predict(result.x_mean, result.w_mean, test);
  std::vector<double> truths;
  truths.reserve(test.nnz());
  for (const auto& e : test.entries()) truths.push_back(e.value);
  report.rmse = rmse(predictions, truths);
  report.test_entries = test.nnz();
  report.bins = rmse_by_frequency(result.x_mean, result.w_mean, train, test, edges);
  report.correlations = subset_mean_correlations(result);
  report.distributed_seconds = result.timings.distributed();
  if (baseline) report.wts = wts(baseline->timings.distributed(), result.timings.distributed());
  return report;
}

}  // namespace bmfpp
