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

#include "bmfpp/data.hpp"

#include "bmfpp/errors.hpp"
#include "bmfpp/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

namespace bmfpp {

SparseMatrix::SparseMatrix(std::size_t n_rows, std::size_t n_cols, std::vector<Entry> entries)
    : n_rows_(n_rows), n_cols_(n_cols), entries_(std::move(entries)) {
  if (n_rows_ > 0 && n_cols_ > 0 && entries_.size() > n_rows_ * n_cols_) {
    throw ValidationError("sparse matrix: more entries than cells");
  }
  std::vector<std::uint64_t> keys;
  keys.reserve(entries_.size());
  for (const auto& e : entries_) {
    if (e.row >= n_rows_ || e.col >= n_cols_) {
      throw ValidationError("sparse matrix: entry (" + std::to_string(e.row) + ", " +
                            std::to_string(e.col) + ") outside " + std::to_string(n_rows_) +
                            " x " + std::to_string(n_cols_));
    }
    keys.push_back((static_cast<std::uint64_t>(e.row) << 32) | e.col);
  }
  std::sort(keys.begin(), keys.end());
  const auto dup = std::adjacent_find(keys.begin(), keys.end());
  if (dup != keys.end()) {
    throw ValidationError("sparse matrix: duplicate entry (" + std::to_string(*dup >> 32) + ", " +
                          std::to_string(*dup & 0xffffffffULL) + ")");
  }
}

std::vector<std::size_t> SparseMatrix::row_counts() const {
  std::vector<std::size_t> counts(n_rows_, 0);
  for (const auto& e : entries_) ++counts[e.row];
  return counts;
}

std::vector<std::size_t> SparseMatrix::col_counts() const {
  std::vector<std::size_t> counts(n_cols_, 0);
  for (const auto& e : entries_) ++counts[e.col];
  return counts;
}

TripletFormat parse_triplet_format(std::string_view name) {
  if (name == "plain" || name == "plain-triplet") return TripletFormat::kPlain;
  if (name == "movielens" || name == "movielens-dat") return TripletFormat::kMovieLensDat;
  throw ValidationError("unknown triplet format '" + std::string(name) + "'");
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

template <typename T>
bool parse_number(std::string_view token, T& out) {
  token = trim(token);
  if (token.empty()) return false;
  if constexpr (std::is_floating_point_v<T>) {
    // from_chars for double is available in libstdc++ 11.
    auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), out);
    return ec == std::errc() && ptr == token.data() + token.size() && std::isfinite(out);
  } else {
    auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), out);
    return ec == std::errc() && ptr == token.data() + token.size();
  }
}

std::vector<std::string_view> split_plain(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t pos = 0;
  while (pos < line.size()) {
    const auto start = line.find_first_not_of(" \t,", pos);
    if (start == std::string_view::npos) break;
    auto end = line.find_first_of(" \t,", start);
    if (end == std::string_view::npos) end = line.size();
    tokens.push_back(line.substr(start, end - start));
    pos = end;
  }
  return tokens;
}

std::vector<std::string_view> split_double_colon(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t pos = 0;
  while (true) {
    const auto next = line.find("::", pos);
    if (next == std::string_view::npos) {
      tokens.push_back(line.substr(pos));
      break;
    }
    tokens.push_back(line.substr(pos, next - pos));
    pos = next + 2;
  }
  return tokens;
}

struct RawTriplet {
  std::int64_t row;
  std::int64_t col;
  double value;
  std::size_t line;
};

LoadedMatrix load_plain(std::istream& in) {
  std::vector<RawTriplet> raw;
  std::optional<std::pair<std::size_t, std::size_t>> shape;
  std::string buffer;
  std::size_t line_no = 0;
  while (std::getline(in, buffer)) {
    ++line_no;
    const auto line = trim(buffer);
    if (line.empty()) continue;
    if (line.front() == '#') {
      std::istringstream header{std::string(line.substr(1))};
      std::string key;
      std::size_t n = 0;
      std::size_t d = 0;
      if (header >> key && key == "shape") {
        if (!(header >> n >> d)) throw ParseError("malformed '# shape N D' header", line_no);
        shape = {n, d};
      }
      continue;
    }
    const auto tokens = split_plain(line);
    RawTriplet t{0, 0, 0.0, line_no};
    if (tokens.size() != 3 || !parse_number(tokens[0], t.row) || !parse_number(tokens[1], t.col) ||
        !parse_number(tokens[2], t.value) || t.row < 0 || t.col < 0) {
      throw ParseError("expected 'row col value' with non-negative integer indices", line_no);
    }
    raw.push_back(t);
  }

  std::size_t n = 0;
  std::size_t d = 0;
  for (const auto& t : raw) {
    n = std::max(n, static_cast<std::size_t>(t.row) + 1);
    d = std::max(d, static_cast<std::size_t>(t.col) + 1);
  }
  if (shape) {
    if (shape->first < n || shape->second < d) {
      throw ValidationError("plain triplets: indices exceed the declared shape");
    }
    n = shape->first;
    d = shape->second;
  }
  std::vector<Entry> entries;
  entries.reserve(raw.size());
  for (const auto& t : raw) {
    entries.push_back({static_cast<std::uint32_t>(t.row), static_cast<std::uint32_t>(t.col), t.value});
  }
  LoadedMatrix out;
  out.matrix = SparseMatrix(n, d, std::move(entries));
  out.row_ids.resize(n);
  out.col_ids.resize(d);
  std::iota(out.row_ids.begin(), out.row_ids.end(), 0);
  std::iota(out.col_ids.begin(), out.col_ids.end(), 0);
  return out;
}

LoadedMatrix load_movielens(std::istream& in) {
  std::vector<RawTriplet> raw;
  std::string buffer;
  std::size_t line_no = 0;
  while (std::getline(in, buffer)) {
    ++line_no;
    const auto line = trim(buffer);
    if (line.empty()) continue;
    const auto tokens = split_double_colon(line);
    RawTriplet t{0, 0, 0.0, line_no};
    std::int64_t timestamp = 0;
    if (tokens.size() != 4 || !parse_number(tokens[0], t.row) || !parse_number(tokens[1], t.col) ||
        !parse_number(tokens[2], t.value) || !parse_number(tokens[3], timestamp)) {
      throw ParseError("expected 'user::item::rating::timestamp'", line_no);
    }
    raw.push_back(t);
  }
  std::map<std::int64_t, std::uint32_t> row_index;
  std::map<std::int64_t, std::uint32_t> col_index;
  for (const auto& t : raw) {
    row_index.emplace(t.row, 0);
    col_index.emplace(t.col, 0);
  }
  LoadedMatrix out;
  for (auto& [id, idx] : row_index) {
    idx = static_cast<std::uint32_t>(out.row_ids.size());
    out.row_ids.push_back(id);
  }
  for (auto& [id, idx] : col_index) {
    idx = static_cast<std::uint32_t>(out.col_ids.size());
    out.col_ids.push_back(id);
  }
  std::vector<Entry> entries;
  entries.reserve(raw.size());
  for (const auto& t : raw) entries.push_back({row_index[t.row], col_index[t.col], t.value});
  out.matrix = SparseMatrix(out.row_ids.size(), out.col_ids.size(), std::move(entries));
  return out;
}

}  // namespace

LoadedMatrix load_triplets(const std::filesystem::path& path, TripletFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return format == TripletFormat::kPlain ? load_plain(in) : load_movielens(in);
}

void save_triplets(const std::filesystem::path& path, const SparseMatrix& matrix) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "# shape " << matrix.n_rows() << ' ' << matrix.n_cols() << '\n';
  char buf[64];
  for (const auto& e : matrix.entries()) {
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), e.value);
    out << e.row << ' ' << e.col << ' ' << std::string_view(buf, ptr - buf) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

SparseMatrix simulate_from_factors(const FactorMatrix& x, const FactorMatrix& w, double tau,
                                   std::uint64_t seed) {
  if (!(tau > 0.0)) throw ValidationError("simulate: tau must be positive");
  if (x.cols() != w.cols()) throw ValidationError("simulate: factor ranks differ");
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0 / std::sqrt(tau));
  const auto n = static_cast<std::size_t>(x.rows());
  const auto d = static_cast<std::size_t>(w.rows());
  std::vector<Entry> entries;
  entries.reserve(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      const double mean = x.row(static_cast<Eigen::Index>(r)).dot(w.row(static_cast<Eigen::Index>(c)));
      entries.push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c), mean + noise(rng)});
    }
  }
  return SparseMatrix(n, d, std::move(entries));
}

std::pair<SparseMatrix, GroundTruth> simulate(std::size_t n, std::size_t d, std::size_t k,
                                              double tau, std::uint64_t seed) {
  if (n == 0 || d == 0 || k == 0) throw ValidationError("simulate: N, D and K must be at least 1");
  if (!(tau > 0.0)) throw ValidationError("simulate: tau must be positive");
  Rng rng(derive_seed(seed, {0}));
  std::normal_distribution<double> normal(0.0, 1.0);
  GroundTruth truth;
  truth.tau = tau;
  truth.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  truth.w.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
  for (Eigen::Index i = 0; i < truth.x.size(); ++i) truth.x.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < truth.w.size(); ++i) truth.w.data()[i] = normal(rng);
  auto y = simulate_from_factors(truth.x, truth.w, tau, derive_seed(seed, {1}));
  return {std::move(y), std::move(truth)};
}

namespace {

Split split_by_mask(const SparseMatrix& matrix, const std::vector<bool>& in_test) {
  std::vector<Entry> train;
  std::vector<Entry> test;
  const auto& entries = matrix.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) (in_test[i] ? test : train).push_back(entries[i]);
  return {SparseMatrix(matrix.n_rows(), matrix.n_cols(), std::move(train)),
          SparseMatrix(matrix.n_rows(), matrix.n_cols(), std::move(test))};
}

}  // namespace

Split split_random(const SparseMatrix& matrix, double test_fraction, std::uint64_t seed) {
  if (matrix.nnz() < 2) throw ValidationError("split_random: need at least 2 entries");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ValidationError("split_random: test fraction must lie in (0, 1)");
  }
  const std::size_t m = matrix.nnz();
  const auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(m)));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> in_test(m, false);
  for (std::size_t i = 0; i < n_test; ++i) in_test[order[i]] = true;
  return split_by_mask(matrix, in_test);
}

StructuredMode parse_structured_mode(std::string_view name) {
  if (name == "raw") return StructuredMode::kRaw;
  if (name == "rescaled") return StructuredMode::kRescaled;
  if (name == "complement") return StructuredMode::kComplement;
  throw ValidationError("unknown structured missingness mode '" + std::string(name) + "'");
}

std::vector<double> structured_weights(std::size_t n) {
  constexpr double kFirst = 0.9;
  constexpr double kLast = 0.005;
  if (n == 0) return {};
  if (n == 1) return {kFirst};
  std::vector<double> w(n);
  const double step = (kFirst - kLast) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) w[i] = kFirst - step * static_cast<double>(i);
  w.back() = kLast;
  return w;
}

namespace {

double test_probability(StructuredMode mode, double product, double scale) {
  switch (mode) {
    case StructuredMode::kRaw:
      return product;
    case StructuredMode::kRescaled:
      return std::min(1.0, scale * product);
    case StructuredMode::kComplement:
      return 1.0 - product;
  }
  return product;
}

}  // namespace

double structured_expected_fraction(const SparseMatrix& matrix, StructuredMode mode, double scale) {
  if (matrix.empty()) return 0.0;
  const auto wr = structured_weights(matrix.n_rows());
  const auto wc = structured_weights(matrix.n_cols());
  double total = 0.0;
  for (const auto& e : matrix.entries()) total += test_probability(mode, wr[e.row] * wc[e.col], scale);
  return total / static_cast<double>(matrix.nnz());
}

StructuredSplit split_structured(const SparseMatrix& matrix, std::uint64_t seed,
                                 StructuredMode mode, double target_test_fraction) {
  StructuredSplit out;
  if (mode == StructuredMode::kRescaled) {
    if (!(target_test_fraction > 0.0 && target_test_fraction < 1.0)) {
      throw ValidationError("split_structured: target fraction must lie in (0, 1)");
    }
    // Expected fraction is continuous and nondecreasing in the scale; bisect.
    double lo = 0.0;
    double hi = 1.0;
    while (structured_expected_fraction(matrix, mode, hi) < target_test_fraction && hi < 1e12) hi *= 2.0;
    for (int it = 0; it < 200 && hi - lo > 1e-12 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      (structured_expected_fraction(matrix, mode, mid) < target_test_fraction ? lo : hi) = mid;
    }
    out.scale = 0.5 * (lo + hi);
  }
  out.expected_test_fraction = structured_expected_fraction(matrix, mode, out.scale);

  const auto wr = structured_weights(matrix.n_rows());
  const auto wc = structured_weights(matrix.n_cols());
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<bool> in_test(matrix.nnz(), false);
  std::size_t n_test = 0;
  for (std::size_t i = 0; i < matrix.nnz(); ++i) {
    const auto& e = matrix.entries()[i];
    in_test[i] = unif(rng) < test_probability(mode, wr[e.row] * wc[e.col], out.scale);
    n_test += in_test[i] ? 1 : 0;
  }
  out.split = split_by_mask(matrix, in_test);
  out.realized_test_fraction =
      matrix.empty() ? 0.0 : static_cast<double>(n_test) / static_cast<double>(matrix.nnz());
  return out;
}

OrderScheme parse_order_scheme(std::string_view name) {
  if (name == "random") return OrderScheme::kRandom;
  if (name == "decreasing") return OrderScheme::kDecreasing;
  throw ValidationError("unknown ordering scheme '" + std::string(name) + "'");
}

std::string_view to_string(OrderScheme scheme) {
  return scheme == OrderScheme::kRandom ? "random" : "decreasing";
}

namespace {

std::vector<std::size_t> decreasing_order(const std::vector<std::size_t>& counts) {
  std::vector<std::size_t> perm(counts.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  return perm;
}

std::vector<std::size_t> random_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

void check_permutation(const std::vector<std::size_t>& perm, const char* what) {
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) {
      throw ValidationError(std::string("partition plan: ") + what + " is not a permutation");
    }
    seen[p] = true;
  }
}

void check_cuts(const std::vector<std::size_t>& cuts, std::size_t n, const char* what) {
  if (cuts.size() < 2 || cuts.front() != 0 || cuts.back() != n) {
    throw ValidationError(std::string("partition plan: ") + what + " must run from 0 to the axis size");
  }
  for (std::size_t i = 1; i < cuts.size(); ++i) {
    if (cuts[i] <= cuts[i - 1]) {
      throw ValidationError(std::string("partition plan: ") + what + " must be strictly increasing");
    }
  }
}

}  // namespace

Ordering order_matrix(const SparseMatrix& matrix, OrderScheme scheme, std::uint64_t seed) {
  Ordering out;
  if (scheme == OrderScheme::kDecreasing) {
    out.row_perm = decreasing_order(matrix.row_counts());
    out.col_perm = decreasing_order(matrix.col_counts());
  } else {
    Rng rng(seed);
    out.row_perm = random_order(matrix.n_rows(), rng);
    out.col_perm = random_order(matrix.n_cols(), rng);
  }
  return out;
}

void PartitionPlan::validate() const {
  check_permutation(row_perm, "row_perm");
  check_permutation(col_perm, "col_perm");
  check_cuts(row_cuts, row_perm.size(), "row_cuts");
  check_cuts(col_cuts, col_perm.size(), "col_cuts");
}

std::vector<std::size_t> balanced_cuts(std::size_t n, std::size_t parts) {
  if (parts == 0 || parts > n) {
    throw ValidationError("partition: cannot split " + std::to_string(n) + " items into " +
                          std::to_string(parts) + " blocks");
  }
  std::vector<std::size_t> cuts(parts + 1, 0);
  const std::size_t base = n / parts;
  const std::size_t extra = n % parts;
  for (std::size_t b = 0; b < parts; ++b) cuts[b + 1] = cuts[b] + base + (b < extra ? 1 : 0);
  return cuts;
}

PartitionPlan partition(const SparseMatrix& matrix, const Ordering& ordering, std::size_t r,
                        std::size_t c) {
  if (ordering.row_perm.size() != matrix.n_rows() || ordering.col_perm.size() != matrix.n_cols()) {
    throw ValidationError("partition: ordering does not match the matrix shape");
  }
  PartitionPlan plan;
  plan.row_perm = ordering.row_perm;
  plan.col_perm = ordering.col_perm;
  plan.row_cuts = balanced_cuts(matrix.n_rows(), r);
  plan.col_cuts = balanced_cuts(matrix.n_cols(), c);
  plan.validate();
  return plan;
}

std::vector<SparseMatrix> split_blocks(const SparseMatrix& matrix, const PartitionPlan& plan) {
  if (plan.row_perm.size() != matrix.n_rows() || plan.col_perm.size() != matrix.n_cols()) {
    throw ValidationError("split_blocks: plan does not match the matrix shape");
  }
  // position -> (block, local) lookups for both axes
  auto locate = [](const std::vector<std::size_t>& perm, const std::vector<std::size_t>& cuts) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> where(perm.size());
    for (std::size_t b = 0; b + 1 < cuts.size(); ++b) {
      for (std::size_t p = cuts[b]; p < cuts[b + 1]; ++p) {
        where[perm[p]] = {static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(p - cuts[b])};
      }
    }
    return where;
  };
  const auto row_where = locate(plan.row_perm, plan.row_cuts);
  const auto col_where = locate(plan.col_perm, plan.col_cuts);
  const std::size_t nr = plan.row_blocks();
  const std::size_t nc = plan.col_blocks();
  std::vector<std::vector<Entry>> parts(nr * nc);
  for (const auto& e : matrix.entries()) {
    const auto [bi, li] = row_where[e.row];
    const auto [bj, lj] = col_where[e.col];
    parts[bi * nc + bj].push_back({li, lj, e.value});
  }
  std::vector<SparseMatrix> blocks;
  blocks.reserve(parts.size());
  for (std::size_t i = 0; i < nr; ++i) {
    for (std::size_t j = 0; j < nc; ++j) {
      blocks.emplace_back(plan.row_block_size(i), plan.col_block_size(j), std::move(parts[i * nc + j]));
    }
  }
  return blocks;
}

void to_json(nlohmann::json& j, const PartitionPlan& plan) {
  j = nlohmann::json{{"row_perm", plan.row_perm},
                     {"col_perm", plan.col_perm},
                     {"row_cuts", plan.row_cuts},
                     {"col_cuts", plan.col_cuts}};
}

void from_json(const nlohmann::json& j, PartitionPlan& plan) {
  j.at("row_perm").get_to(plan.row_perm);
  j.at("col_perm").get_to(plan.col_perm);
  j.at("row_cuts").get_to(plan.row_cuts);
  j.at("col_cuts").get_to(plan.col_cuts);
  plan.validate();
}

}  // namespace bmfpp
