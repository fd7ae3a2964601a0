// Copyright (c) 2026 the attackgen authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attackgen/tensor.hpp"

namespace attackgen {

/// Primitive ops available to victim models and attack objectives.
enum class Op {
  kInput,
  kAdd,
  kMul,
  kMatmul,
  kConv2d,
  kRelu,
  kSoftmax,
  kLog,
  kSum,
  kMean,
  kGather,
  kBilinearSample,
};

const char* op_name(Op op);

using NodeId = std::size_t;

/// Reduction over every axis (sum/mean to a scalar).
constexpr int kAllAxes = -1;

struct Node {
  Op op = Op::kInput;
  std::vector<NodeId> args;
  Shape shape;
  int axis = kAllAxes;                  // kSum / kMean
  std::string name;                     // named leaves
  bool differentiable = false;          // leaves
  bool depends_on_diff = false;         // any differentiable leaf upstream
  std::optional<Tensor> literal;        // baked constant leaves
};

class Graph {
public:
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::map<std::string, NodeId>& leaves() const { return leaves_; }
  const std::map<std::string, NodeId>& outputs() const { return outputs_; }
  NodeId leaf(const std::string& name) const;
  NodeId single_output() const;

private:
  friend class GraphBuilder;
  std::vector<Node> nodes_;
  std::map<std::string, NodeId> leaves_;
  std::map<std::string, NodeId> outputs_;
};

/// Builds an immutable Graph. Shapes are validated at each call, so a
/// composition error surfaces where it is made rather than at evaluation.
///
/// Broadcasting in add/mul is deliberately narrow: equal shapes, a scalar on
/// either side, or a rank-1 right operand matching the last axis (bias).
class GraphBuilder {
public:
  NodeId input(std::string name, Shape shape, bool differentiable);
  NodeId constant(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c) { return mul(a, constant(Tensor::scalar(c))); }
  NodeId matmul(NodeId a, NodeId b);
  /// Stride-1 zero-padded "same" convolution; x is [H,W,IC], kernel is
  /// [kh,kw,IC,OC] with odd kh, kw.
  NodeId conv2d(NodeId x, NodeId kernel);
  NodeId relu(NodeId x);
  /// Softmax over the last axis of each vector slice.
  NodeId softmax(NodeId x);
  NodeId log(NodeId x);
  NodeId sum(NodeId x, int axis = kAllAxes);
  NodeId mean(NodeId x, int axis = kAllAxes);
  /// Select along the last axis: indices has the shape of x minus its last
  /// axis and must not depend on a differentiable leaf.
  NodeId gather(NodeId x, NodeId indices);
  /// Sample image [H,W,C] at absolute (row, col) positions coords [h,w,2],
  /// bilinear with clamp-to-edge; differentiable in both arguments.
  NodeId bilinear_sample(NodeId image, NodeId coords);

  void output(std::string name, NodeId id);
  Graph build() &&;

  const Shape& shape_of(NodeId id) const { return graph_.nodes_.at(id).shape; }

private:
  NodeId push(Node node);
  const Node& node(NodeId id) const;

  Graph graph_;
};

using NamedTensors = std::map<std::string, Tensor>;

/// Evaluates all declared outputs. Input names and shapes must exactly match
/// the graph's named leaves. Deterministic: same inputs give bit-identical
/// outputs. Throws NonFiniteError if any intermediate goes non-finite.
NamedTensors forward(const Graph& graph, const NamedTensors& inputs);

/// Gradient of the graph's single scalar output with respect to the named
/// differentiable leaf. Shape matches the leaf.
Tensor grad(const Graph& graph, const NamedTensors& inputs, const std::string& wrt);

/// One backward pass returning gradients for every differentiable leaf.
NamedTensors grad_all(const Graph& graph, const NamedTensors& inputs);

/// Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

} // namespace attackgen
