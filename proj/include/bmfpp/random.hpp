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

#include "bmfpp/linalg.hpp"

#include <cstdint>
#include <initializer_list>
#include <random>

namespace bmfpp {

using Rng = std::mt19937_64;

/// Mixes a master seed with a list of integer tags (stage, block coordinates,
/// replicate index, ...) into a well-spread 64-bit seed. Order-sensitive.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags);

/// Vector of independent standard normals.
Vector standard_normal(Rng& rng, Eigen::Index k);

/// Draw from Normal(mean, precision^-1) given the lower Cholesky factor of the precision.
Vector sample_gaussian_precision_chol(Rng& rng, const Vector& mean, const Matrix& precision_chol);

/// Draw from Wishart(scale, dof) with E[result] = dof * scale (Bartlett decomposition).
/// Requires dof > K - 1 and SPD scale.
Matrix sample_wishart(Rng& rng, const Matrix& scale, double dof);

}  // namespace bmfpp
