// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "twdpo/numerics.hpp"
#include "twdpo/tensor.hpp"
#include "twdpo/trace.hpp"

namespace twdpo::testing {

using numerics::NodeId;
using numerics::Tensor;
using numerics::Trace;

inline Tensor random_tensor(std::mt19937_64& rng, std::vector<std::size_t> shape,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> data(numerics::shape_size(shape));
  for (double& v : data) v = u(rng);
  return Tensor(std::move(shape), std::move(data));
}

inline std::vector<double> flatten(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const Tensor& t : ts) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

inline std::vector<Tensor> unflatten(std::span<const double> flat, const std::vector<Tensor>& like) {
  std::vector<Tensor> out;
  std::size_t pos = 0;
  for (const Tensor& t : like) {
    std::vector<double> v(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                          flat.begin() + static_cast<std::ptrdiff_t>(pos + t.size()));
    pos += t.size();
    out.emplace_back(t.shape(), std::move(v));
  }
  return out;
}

/// Builds a scalar-valued trace over leaves holding `inputs`.
using Builder = std::function<NodeId(Trace&, const std::vector<NodeId>&)>;

struct GradPair {
  std::vector<double> reverse;
  std::vector<double> finite;
};

inline GradPair gradient_pair(const Builder& build, const std::vector<Tensor>& inputs,
                              double h = 1e-5) {
  Trace trace;
  std::vector<NodeId> leaves;
  for (const Tensor& t : inputs) leaves.push_back(trace.leaf(t));
  const NodeId out = build(trace, leaves);
  GradPair g;
  g.reverse = flatten(numerics::reverse_grad(trace, out));
  const auto f = [&](std::span<const double> theta) {
    Trace t;
    std::vector<NodeId> ls;
    for (const Tensor& v : unflatten(theta, inputs)) ls.push_back(t.leaf(v));
    return t.value(build(t, ls))[0];
  };
  g.finite = numerics::finite_diff_grad(f, flatten(inputs), h);
  return g;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("twdpo_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace twdpo::testing
