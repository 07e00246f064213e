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

#include "bmfpp/approx.hpp"
#include "bmfpp/orchestrator.hpp"

#include <cstddef>
#include <filesystem>
#include <string_view>
#include <utility>

namespace bmfpp {

/// Process exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitValidation = 2,
  kExitNumerical = 3,
  kExitIo = 4,
};

/// "RxC" -> (R, C).
std::pair<std::size_t, std::size_t> parse_partition(std::string_view text);

/// full | pp-mm | pp-dm | pp-gmm | ep-parametric.
std::pair<Method, ApproxKind> parse_method_flag(std::string_view text);
std::string method_flag(Method method, ApproxKind approx);

/// $BMFPP_OUTPUT_ROOT, or ./bmfpp_out when unset.
std::filesystem::path default_output_root();

/// Entry point of the `bmfpp` tool; returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace bmfpp
