// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "twdpo/tensor.hpp"

namespace twdpo::numerics {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  scale,
  add_row,
  matmul,
  transpose,
  gelu,
  layer_norm,
  causal_softmax,
  log_softmax_rows,
  gather_rows,
  pick,
  slice_cols,
  concat_cols,
  sum,
  weighted_sum,
  log_sigmoid,
  exp,
  log,
};

struct Node {
  Op op = Op::constant;
  std::vector<NodeId> inputs;
  std::vector<std::size_t> index_attr;
  std::vector<double> real_attr;
  Tensor value;
  /// Position among the trace's leaves, or -1 for non-leaf nodes.
  std::int32_t leaf_slot = -1;
};

/// Append-only record of primitive tensor operations (a reverse-mode tape).
///
/// Node ids grow monotonically and every op only references earlier ids, so
/// the record is acyclic by construction. Each op checks that its output is
/// finite and throws numeric_failure otherwise.
///
/// A Trace is built by one caller and is not meant to be shared between
/// threads while it is being extended.
class Trace {
 public:
  /// Differentiable input. Gradients are reported per leaf, in creation order.
  NodeId leaf(Tensor value);
  NodeId constant(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  /// x[r x c] + b[c] broadcast over rows.
  NodeId add_row(NodeId x, NodeId b);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  /// tanh-approximated GELU.
  NodeId gelu(NodeId a);
  /// Row-wise layer normalization with gain and bias vectors.
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5);
  /// Row softmax of factor*scores over columns j <= i; entries j > i are 0.
  NodeId causal_softmax(NodeId scores, double factor);
  NodeId log_softmax_rows(NodeId x);
  /// Rows of table selected by ids (embedding lookup).
  NodeId gather_rows(NodeId table, std::span<const std::size_t> ids);
  /// Flat entries of x at the given indices, as a vector.
  NodeId pick(NodeId x, std::span<const std::size_t> flat_indices);
  NodeId slice_cols(NodeId x, std::size_t start, std::size_t count);
  NodeId concat_cols(std::span<const NodeId> parts);
  NodeId sum(NodeId x);
  /// Scalar sum_i weights[i] * x[i]; the weights are constants.
  NodeId weighted_sum(NodeId x, std::span<const double> weights);
  NodeId log_sigmoid(NodeId x);
  NodeId exp(NodeId x);
  NodeId log(NodeId x);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t leaf_count() const noexcept { return leaves_.size(); }
  const std::vector<NodeId>& leaves() const noexcept { return leaves_; }

  /// Re-evaluates every op from (possibly new) leaf values. With the original
  /// leaf values the result is bit-identical to this trace.
  Trace replay(std::span<const Tensor> leaf_values) const;
  Trace replay() const;

 private:
  NodeId push(Node node);

  std::vector<Node> nodes_;
  std::vector<NodeId> leaves_;
};

/// Gradient of a scalar node with respect to every leaf (one tensor per leaf,
/// in leaf order). The result is linear in `seed`.
std::vector<Tensor> reverse_grad(const Trace& trace, NodeId output, double seed = 1.0);

}  // namespace twdpo::numerics
