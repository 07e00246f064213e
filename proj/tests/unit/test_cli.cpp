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

#include "bmfpp/cli.hpp"
#include "bmfpp/data.hpp"
#include "bmfpp/errors.hpp"
#include "unit/test_support.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace bmfpp;

namespace {

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "bmfpp");
  args.insert(args.begin() + 1, "-q");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::vector<std::string> kShortChain{"--k", "2", "--iterations", "30", "--burn-in", "10", "--thin", "1"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("flag parsers") {
  CHECK(parse_partition("5x3") == std::pair<std::size_t, std::size_t>{5, 3});
  CHECK_THROWS_AS(parse_partition("5"), ValidationError);
  CHECK_THROWS_AS(parse_partition("0x2"), ValidationError);
  CHECK_THROWS_AS(parse_partition("2xx"), ValidationError);
  CHECK(parse_method_flag("pp-gmm") == std::pair{Method::kPp, ApproxKind::kGmm});
  CHECK(parse_method_flag("ep-parametric").first == Method::kEp);
  CHECK(method_flag(Method::kPp, ApproxKind::kDominantMode) == "pp-dm");
  CHECK_THROWS_AS(parse_method_flag("pp"), ValidationError);
}

TEST_CASE("simulate is deterministic and handles a single cell") {
  testing::TempDir dir("cli");
  const auto a = (dir.path() / "a").string();
  const auto b = (dir.path() / "b").string();
  CHECK(cli({"simulate", "--n", "12", "--d", "9", "--k", "2", "--seed", "4", "--out", a}) == kExitOk);
  CHECK(cli({"simulate", "--n", "12", "--d", "9", "--k", "2", "--seed", "4", "--out", b}) == kExitOk);
  CHECK(slurp(dir.path() / "a" / "train.txt") == slurp(dir.path() / "b" / "train.txt"));
  CHECK(slurp(dir.path() / "a" / "test.txt") == slurp(dir.path() / "b" / "test.txt"));
  CHECK(slurp(dir.path() / "a" / "x_true.txt") == slurp(dir.path() / "b" / "x_true.txt"));
  const auto test = load_triplets(dir.path() / "a" / "test.txt", TripletFormat::kPlain).matrix;
  CHECK(test.nnz() == 86);  // floor(0.8 * 108)

  const auto one = (dir.path() / "one").string();
  CHECK(cli({"simulate", "--n", "1", "--d", "1", "--out", one}) == kExitOk);
  CHECK(load_triplets(dir.path() / "one" / "train.txt", TripletFormat::kPlain).matrix.nnz() == 1);

  const auto s = (dir.path() / "s").string();
  CHECK(cli({"simulate", "--n", "30", "--d", "20", "--missing", "structured", "--structured-mode", "rescaled",
             "--out", s}) == kExitOk);
  CHECK(slurp(dir.path() / "s" / "simulate.json").find("\"scale\"") != std::string::npos);
}

TEST_CASE("run, replay and evaluate") {
  testing::TempDir dir("cli");
  const auto data = (dir.path() / "data").string();
  REQUIRE(cli({"simulate", "--n", "24", "--d", "18", "--k", "2", "--seed", "1", "--test-frac", "0.5", "--out", data}) ==
          kExitOk);
  const auto train = (dir.path() / "data" / "train.txt").string();
  const auto test = (dir.path() / "data" / "test.txt").string();
  const auto full = (dir.path() / "full").string();
  const auto pp = (dir.path() / "pp").string();
  REQUIRE(cli(with({"run", "--train", train, "--test", test, "--method", "full", "--out", full}, kShortChain)) ==
          kExitOk);
  REQUIRE(cli(with({"run", "--train", train, "--test", test, "--method", "pp-mm", "--partition", "2x2", "--out", pp},
                   kShortChain)) == kExitOk);
  CHECK(std::filesystem::exists(dir.path() / "pp" / "stage3" / "block_1_1.X.post"));

  // Replaying run_config.json reproduces the run.
  const auto replay = (dir.path() / "replay").string();
  REQUIRE(cli({"run", "--config", (dir.path() / "pp" / "run_config.json").string(), "--out", replay}) == kExitOk);
  CHECK(slurp(dir.path() / "replay" / "aggregate" / "X.post") == slurp(dir.path() / "pp" / "aggregate" / "X.post"));

  // Flags override the configuration file.
  const auto over = (dir.path() / "over").string();
  REQUIRE(cli({"run", "--config", (dir.path() / "pp" / "run_config.json").string(), "--seed", "99", "--out", over}) ==
          kExitOk);
  CHECK(slurp(dir.path() / "over" / "run_config.json").find("\"seed\": 99") != std::string::npos);

  const auto json_out = (dir.path() / "report.json").string();
  const auto csv_out = (dir.path() / "report.csv").string();
  CHECK(cli({"evaluate", "--run", pp, "--baseline", full, "--json", json_out, "--csv", csv_out}) == kExitOk);
  const auto report = nlohmann::json::parse(slurp(json_out));
  CHECK(report["rmse"].get<double>() > 0.0);
  CHECK(report["wts"].is_number());
  CHECK(report["correlations"].size() == 4);
  CHECK(cli({"evaluate", "--run", full, "--baseline", full, "--json", json_out, "--bins", "0,3,inf"}) == kExitOk);
  const auto self = nlohmann::json::parse(slurp(json_out));
  CHECK(self["wts"].get<double>() == 1.0);
  CHECK(self["frequency_bins"].size() == 2);
  CHECK(slurp(csv_out).rfind("partition,method,seed,rmse,wall_clock,wts\n2x2,pp-mm,", 0) == 0);
}

TEST_CASE("replicates and internal splits") {
  testing::TempDir dir("cli");
  const auto data = (dir.path() / "data").string();
  REQUIRE(cli({"simulate", "--n", "16", "--d", "12", "--k", "2", "--test-frac", "0.3", "--out", data}) == kExitOk);
  const auto out = (dir.path() / "reps").string();
  CHECK(cli(with({"run", "--train", (dir.path() / "data" / "train.txt").string(), "--test-frac", "0.25",
                  "--method", "ep-parametric", "--partition", "2x1", "--replicates", "2", "--out", out},
                 kShortChain)) == kExitOk);
  CHECK(std::filesystem::exists(dir.path() / "reps" / "rep1" / "aggregate" / "W.post"));
  CHECK(slurp(dir.path() / "reps" / "rep0" / "data" / "test.txt") ==
        slurp(dir.path() / "reps" / "rep1" / "data" / "test.txt"));
}

TEST_CASE("exit codes") {
  testing::TempDir dir("cli");
  CHECK(cli({"run", "--train", (dir.path() / "none.txt").string()}) == kExitIo);
  CHECK(cli({"run", "--method", "magic", "--train", "x"}) == kExitValidation);
  CHECK(cli({"simulate", "--n", "3"}) == kExitValidation);  // missing --d
  CHECK(cli({"evaluate", "--run", (dir.path() / "absent").string()}) == kExitIo);
  {
    std::ofstream bad(dir.path() / "bad.txt");
    bad << "0 0 1\n1 1 nope\n";
  }
  CHECK(cli({"run", "--train", (dir.path() / "bad.txt").string()}) == kExitValidation);
  CHECK(cli({"cost-model", "--n", "100", "--d", "50", "--m", "1000", "--k", "5"}) == kExitOk);
  CHECK(cli({"cost-model", "--k", "0"}) == kExitValidation);
}

TEST_CASE("default output root follows the environment") {
  ::setenv("BMFPP_OUTPUT_ROOT", "/tmp/somewhere", 1);
  CHECK(default_output_root() == std::filesystem::path("/tmp/somewhere"));
  ::unsetenv("BMFPP_OUTPUT_ROOT");
  CHECK(default_output_root() == std::filesystem::path("bmfpp_out"));
}
