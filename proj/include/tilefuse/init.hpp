// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tilefuse/rng.hpp"
#include "tilefuse/tensor.hpp"

namespace tilefuse {

inline constexpr double kInitStd = 0.02;

/// Truncated-normal weights drawn from a stream keyed by (seed, name), so a
/// parameter's values do not depend on what else was built before it.
template <std::floating_point T>
Tensor<T> init_trunc_normal(std::uint64_t seed, const std::string& name, Dims dims, double std = kInitStd) {
  Rng rng = Rng::for_stream(seed, name);
  std::vector<T> v(dims_count(dims));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(std));
  return Tensor<T>(std::move(dims), std::move(v), true);
}

template <std::floating_point T>
Tensor<T> init_constant(Dims dims, T value) {
  return Tensor<T>::full(std::move(dims), value, true);
}

}  // namespace tilefuse
