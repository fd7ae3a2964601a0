// Copyright (c) 2026 the attackgen authors
// SPDX-License-Identifier: Apache-2.0
#include "attackgen/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace attackgen {

namespace {

// add/mul broadcasting: kSame (equal shapes), kScalar (one side rank 0),
// kBias (rank-1 rhs matching the last axis of lhs).
enum class Broadcast { kSame, kScalarLhs, kScalarRhs, kBias };

Broadcast classify_broadcast(const Shape& a, const Shape& b, const char* what) {
  if (a == b) return Broadcast::kSame;
  if (b.empty()) return Broadcast::kScalarRhs;
  if (a.empty()) return Broadcast::kScalarLhs;
  if (b.size() == 1 && !a.empty() && a.back() == b[0]) return Broadcast::kBias;
  throw ShapeError(std::string(what) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* what) {
  switch (classify_broadcast(a, b, what)) {
    case Broadcast::kScalarLhs: return b;
    default: return a;
  }
}

double bcast_rhs(const std::vector<double>& b, Broadcast bc, std::size_t i, std::size_t last_dim) {
  switch (bc) {
    case Broadcast::kSame: return b[i];
    case Broadcast::kScalarRhs: return b[0];
    case Broadcast::kScalarLhs: return b[i]; // roles swapped by caller
    case Broadcast::kBias: return b[i % last_dim];
  }
  return 0.0;
}

Shape reduced_shape(const Shape& s, int axis, const char* what) {
  if (axis == kAllAxes) return {};
  if (axis < 0 || static_cast<std::size_t>(axis) >= s.size()) {
    throw ShapeError(std::string(what) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  }
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (static_cast<int>(i) != axis) out.push_back(s[i]);
  }
  return out;
}

// Iteration helpers for single-axis reductions: treat the tensor as
// [outer, dim, inner] with the reduced axis in the middle.
struct AxisSplit {
  std::size_t outer = 1, dim = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit sp;
  for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<std::size_t>(i)];
  sp.dim = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

} // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kMatmul: return "matmul";
    case Op::kConv2d: return "conv2d";
    case Op::kRelu: return "relu";
    case Op::kSoftmax: return "softmax";
    case Op::kLog: return "log";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kGather: return "gather";
    case Op::kBilinearSample: return "bilinear_sample";
  }
  return "?";
}

NodeId Graph::leaf(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) throw ShapeError("no leaf named '" + name + "'");
  return it->second;
}

NodeId Graph::single_output() const {
  if (outputs_.size() != 1) {
    throw ShapeError("graph must have exactly one output, has " +
                     std::to_string(outputs_.size()));
  }
  return outputs_.begin()->second;
}

NodeId GraphBuilder::push(Node node) {
  for (NodeId a : node.args) {
    if (a >= graph_.nodes_.size()) throw ShapeError("node argument out of range");
    node.depends_on_diff = node.depends_on_diff || graph_.nodes_[a].depends_on_diff;
  }
  graph_.nodes_.push_back(std::move(node));
  return graph_.nodes_.size() - 1;
}

const Node& GraphBuilder::node(NodeId id) const { return graph_.nodes_.at(id); }

NodeId GraphBuilder::input(std::string name, Shape shape, bool differentiable) {
  if (name.empty()) throw ShapeError("input leaves need a name");
  if (graph_.leaves_.count(name)) throw ShapeError("duplicate leaf name '" + name + "'");
  Node n;
  n.op = Op::kInput;
  n.shape = std::move(shape);
  n.name = name;
  n.differentiable = differentiable;
  n.depends_on_diff = differentiable;
  NodeId id = push(std::move(n));
  graph_.leaves_.emplace(std::move(name), id);
  return id;
}

NodeId GraphBuilder::constant(Tensor value) {
  Node n;
  n.op = Op::kInput;
  n.shape = value.shape();
  n.literal = std::move(value);
  return push(std::move(n));
}

NodeId GraphBuilder::add(NodeId a, NodeId b) {
  Node n;
  n.op = Op::kAdd;
  n.shape = broadcast_shape(node(a).shape, node(b).shape, "add");
  n.args = {a, b};
  return push(std::move(n));
}

NodeId GraphBuilder::mul(NodeId a, NodeId b) {
  Node n;
  n.op = Op::kMul;
  n.shape = broadcast_shape(node(a).shape, node(b).shape, "mul");
  n.args = {a, b};
  return push(std::move(n));
}

NodeId GraphBuilder::matmul(NodeId a, NodeId b) {
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  if (sa.empty() || sa.size() > 2 || sb.empty() || sb.size() > 2) {
    throw ShapeError("matmul: operands must be rank 1 or 2, got " + shape_str(sa) + " and " +
                     shape_str(sb));
  }
  std::size_t ak = sa.back();
  std::size_t bk = sb.size() == 2 ? sb[0] : sb[0];
  if (ak != bk) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(sa) + " vs " + shape_str(sb));
  }
  Shape out;
  if (sa.size() == 2) out.push_back(sa[0]);
  if (sb.size() == 2) out.push_back(sb[1]);
  Node n;
  n.op = Op::kMatmul;
  n.shape = std::move(out);
  n.args = {a, b};
  return push(std::move(n));
}

NodeId GraphBuilder::conv2d(NodeId x, NodeId kernel) {
  const Shape& sx = node(x).shape;
  const Shape& sk = node(kernel).shape;
  if (sx.size() != 3) throw ShapeError("conv2d: input must be [H,W,C], got " + shape_str(sx));
  if (sk.size() != 4) throw ShapeError("conv2d: kernel must be [kh,kw,IC,OC], got " + shape_str(sk));
  if (sk[0] % 2 == 0 || sk[1] % 2 == 0) throw ShapeError("conv2d: kernel dims must be odd");
  if (sk[2] != sx[2]) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(sk[2]) + " channels, input has " +
                     std::to_string(sx[2]));
  }
  Node n;
  n.op = Op::kConv2d;
  n.shape = {sx[0], sx[1], sk[3]};
  n.args = {x, kernel};
  return push(std::move(n));
}

NodeId GraphBuilder::relu(NodeId x) {
  Node n;
  n.op = Op::kRelu;
  n.shape = node(x).shape;
  n.args = {x};
  return push(std::move(n));
}

NodeId GraphBuilder::softmax(NodeId x) {
  const Shape& s = node(x).shape;
  if (s.empty()) throw ShapeError("softmax: needs at least rank 1");
  Node n;
  n.op = Op::kSoftmax;
  n.shape = s;
  n.args = {x};
  return push(std::move(n));
}

NodeId GraphBuilder::log(NodeId x) {
  Node n;
  n.op = Op::kLog;
  n.shape = node(x).shape;
  n.args = {x};
  return push(std::move(n));
}

NodeId GraphBuilder::sum(NodeId x, int axis) {
  Node n;
  n.op = Op::kSum;
  n.shape = reduced_shape(node(x).shape, axis, "sum");
  n.axis = axis;
  n.args = {x};
  return push(std::move(n));
}

NodeId GraphBuilder::mean(NodeId x, int axis) {
  Node n;
  n.op = Op::kMean;
  n.shape = reduced_shape(node(x).shape, axis, "mean");
  n.axis = axis;
  n.args = {x};
  return push(std::move(n));
}

NodeId GraphBuilder::gather(NodeId x, NodeId indices) {
  const Shape& sx = node(x).shape;
  const Shape& si = node(indices).shape;
  if (sx.empty()) throw ShapeError("gather: data must have rank >= 1");
  if (si.size() + 1 != sx.size() ||
      !std::equal(si.begin(), si.end(), sx.begin())) {
    throw ShapeError("gather: index shape " + shape_str(si) + " must equal data shape " +
                     shape_str(sx) + " minus its last axis");
  }
  if (node(indices).depends_on_diff) {
    throw ShapeError("gather: indices must not depend on a differentiable leaf");
  }
  Node n;
  n.op = Op::kGather;
  n.shape = si;
  n.args = {x, indices};
  return push(std::move(n));
}

NodeId GraphBuilder::bilinear_sample(NodeId image, NodeId coords) {
  const Shape& si = node(image).shape;
  const Shape& sc = node(coords).shape;
  if (si.size() != 3) throw ShapeError("bilinear_sample: image must be [H,W,C]");
  if (sc.size() != 3 || sc[2] != 2) throw ShapeError("bilinear_sample: coords must be [h,w,2]");
  Node n;
  n.op = Op::kBilinearSample;
  n.shape = {sc[0], sc[1], si[2]};
  n.args = {image, coords};
  return push(std::move(n));
}

void GraphBuilder::output(std::string name, NodeId id) {
  if (id >= graph_.nodes_.size()) throw ShapeError("output id out of range");
  if (graph_.outputs_.count(name)) throw ShapeError("duplicate output name '" + name + "'");
  graph_.outputs_.emplace(std::move(name), id);
}

Graph GraphBuilder::build() && {
  if (graph_.outputs_.empty()) throw ShapeError("graph has no outputs");
  return std::move(graph_);
}

namespace {

class Evaluator {
public:
  explicit Evaluator(const Graph& graph) : graph_(graph) {}

  const std::vector<Tensor>& run(const NamedTensors& inputs) {
    check_inputs(inputs);
    const auto& nodes = graph_.nodes();
    values_.clear();
    values_.reserve(nodes.size());
    for (NodeId id = 0; id < nodes.size(); ++id) {
      values_.push_back(eval_node(nodes[id], inputs));
      if (!values_.back().all_finite()) {
        throw NonFiniteError(std::string("non-finite intermediate in ") + op_name(nodes[id].op) +
                             " node " + std::to_string(id));
      }
    }
    return values_;
  }

  /// Reverse sweep from the single scalar output; returns adjoints of all
  /// differentiable leaves.
  NamedTensors backward() {
    const auto& nodes = graph_.nodes();
    NodeId out = graph_.single_output();
    if (!nodes[out].shape.empty()) {
      throw ShapeError("grad requires a scalar output, got shape " +
                       shape_str(nodes[out].shape));
    }
    adjoints_.assign(nodes.size(), Tensor());
    has_adjoint_.assign(nodes.size(), false);
    accumulate(out, Tensor::scalar(1.0));
    for (NodeId id = nodes.size(); id-- > 0;) {
      if (!has_adjoint_[id] || !nodes[id].depends_on_diff) continue;
      backprop_node(id);
    }
    NamedTensors grads;
    for (const auto& [name, id] : graph_.leaves()) {
      if (!nodes[id].differentiable) continue;
      Tensor g = has_adjoint_[id] ? adjoints_[id] : Tensor::zeros(nodes[id].shape);
      g.ensure_finite("gradient");
      grads.emplace(name, std::move(g));
    }
    return grads;
  }

private:
  void check_inputs(const NamedTensors& inputs) const {
    for (const auto& [name, id] : graph_.leaves()) {
      auto it = inputs.find(name);
      if (it == inputs.end()) throw ShapeError("missing input '" + name + "'");
      if (it->second.shape() != graph_.nodes()[id].shape) {
        throw ShapeError("input '" + name + "' has shape " + shape_str(it->second.shape()) +
                         ", leaf expects " + shape_str(graph_.nodes()[id].shape));
      }
      it->second.ensure_finite("graph input");
    }
    for (const auto& [name, value] : inputs) {
      (void)value;
      if (!graph_.leaves().count(name)) throw ShapeError("unknown input '" + name + "'");
    }
  }

  Tensor eval_node(const Node& n, const NamedTensors& inputs) {
    switch (n.op) {
      case Op::kInput:
        return n.literal ? *n.literal : inputs.at(n.name);
      case Op::kAdd:
      case Op::kMul: {
        const Tensor& a = values_[n.args[0]];
        const Tensor& b = values_[n.args[1]];
        Broadcast bc = classify_broadcast(a.shape(), b.shape(), op_name(n.op));
        const Tensor& big = bc == Broadcast::kScalarLhs ? b : a;
        const Tensor& small = bc == Broadcast::kScalarLhs ? a : b;
        Broadcast eff = bc == Broadcast::kScalarLhs ? Broadcast::kScalarRhs : bc;
        std::size_t last = big.shape().empty() ? 1 : big.shape().back();
        Tensor out(big.shape());
        for (std::size_t i = 0; i < big.size(); ++i) {
          double rhs = bcast_rhs(small.vec(), eff, i, last);
          out[i] = n.op == Op::kAdd ? big[i] + rhs : big[i] * rhs;
        }
        return out;
      }
      case Op::kMatmul: return eval_matmul(n);
      case Op::kConv2d: return eval_conv2d(n);
      case Op::kRelu: {
        const Tensor& x = values_[n.args[0]];
        Tensor out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
        return out;
      }
      case Op::kSoftmax: return eval_softmax(n);
      case Op::kLog: {
        const Tensor& x = values_[n.args[0]];
        Tensor out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
        return out;
      }
      case Op::kSum:
      case Op::kMean: return eval_reduce(n);
      case Op::kGather: return eval_gather(n);
      case Op::kBilinearSample: return eval_bilinear(n);
    }
    throw Error("unreachable op");
  }

  Tensor eval_matmul(const Node& n) {
    const Tensor& a = values_[n.args[0]];
    const Tensor& b = values_[n.args[1]];
    std::size_t m = a.rank() == 2 ? a.shape()[0] : 1;
    std::size_t k = a.shape().back();
    std::size_t p = b.rank() == 2 ? b.shape()[1] : 1;
    Tensor out(n.shape);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < p; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < k; ++t) s += a[i * k + t] * b[t * p + j];
        out[i * p + j] = s;
      }
    }
    return out;
  }

  Tensor eval_conv2d(const Node& n) {
    const Tensor& x = values_[n.args[0]];
    const Tensor& w = values_[n.args[1]];
    const std::size_t h = x.shape()[0], wd = x.shape()[1], ic = x.shape()[2];
    const std::size_t kh = w.shape()[0], kw = w.shape()[1], oc = w.shape()[3];
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
    const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
    Tensor out({h, wd, oc});
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < wd; ++j) {
        for (std::size_t di = 0; di < kh; ++di) {
          std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + di) - ph;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t dj = 0; dj < kw; ++dj) {
            std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dj) - pw;
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(wd)) continue;
            const double* xp = x.data() + (static_cast<std::size_t>(si) * wd +
                                           static_cast<std::size_t>(sj)) * ic;
            const double* wp = w.data() + ((di * kw + dj) * ic) * oc;
            double* op = out.data() + (i * wd + j) * oc;
            for (std::size_t c = 0; c < ic; ++c) {
              const double xv = xp[c];
              const double* wrow = wp + c * oc;
              for (std::size_t o = 0; o < oc; ++o) op[o] += xv * wrow[o];
            }
          }
        }
      }
    }
    return out;
  }

  Tensor eval_softmax(const Node& n) {
    const Tensor& x = values_[n.args[0]];
    std::size_t dim = x.shape().back();
    std::size_t rows = x.size() / dim;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xp = x.data() + r * dim;
      double* op = out.data() + r * dim;
      double mx = xp[0];
      for (std::size_t c = 1; c < dim; ++c) mx = std::max(mx, xp[c]);
      double s = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        op[c] = std::exp(xp[c] - mx);
        s += op[c];
      }
      for (std::size_t c = 0; c < dim; ++c) op[c] /= s;
    }
    return out;
  }

  Tensor eval_reduce(const Node& n) {
    const Tensor& x = values_[n.args[0]];
    if (n.axis == kAllAxes) {
      double s = 0.0;
      for (double v : x.vec()) s += v;
      if (n.op == Op::kMean) s /= static_cast<double>(x.size());
      return Tensor::scalar(s);
    }
    AxisSplit sp = split_axis(x.shape(), n.axis);
    Tensor out(n.shape);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        double s = 0.0;
        for (std::size_t d = 0; d < sp.dim; ++d) s += x[(o * sp.dim + d) * sp.inner + in];
        if (n.op == Op::kMean) s /= static_cast<double>(sp.dim);
        out[o * sp.inner + in] = s;
      }
    }
    return out;
  }

  Tensor eval_gather(const Node& n) {
    const Tensor& x = values_[n.args[0]];
    const Tensor& idx = values_[n.args[1]];
    std::size_t dim = x.shape().back();
    Tensor out(n.shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double iv = idx[i];
      auto k = static_cast<std::int64_t>(iv);
      if (static_cast<double>(k) != iv || k < 0 || k >= static_cast<std::int64_t>(dim)) {
        throw ShapeError("gather: index " + std::to_string(iv) + " invalid for axis size " +
                         std::to_string(dim));
      }
      out[i] = x[i * dim + static_cast<std::size_t>(k)];
    }
    return out;
  }

  struct BilinearCell {
    std::size_t r0, r1, c0, c1;
    double fr, fc;
    bool r_clamped, c_clamped;
  };

  BilinearCell bilinear_cell(double r, double c, std::size_t h, std::size_t w) const {
    BilinearCell cell{};
    double rc = std::clamp(r, 0.0, static_cast<double>(h - 1));
    double cc = std::clamp(c, 0.0, static_cast<double>(w - 1));
    cell.r_clamped = rc != r;
    cell.c_clamped = cc != c;
    cell.r0 = static_cast<std::size_t>(std::floor(rc));
    cell.c0 = static_cast<std::size_t>(std::floor(cc));
    cell.r1 = std::min(cell.r0 + 1, h - 1);
    cell.c1 = std::min(cell.c0 + 1, w - 1);
    cell.fr = rc - static_cast<double>(cell.r0);
    cell.fc = cc - static_cast<double>(cell.c0);
    return cell;
  }

  Tensor eval_bilinear(const Node& n) {
    const Tensor& img = values_[n.args[0]];
    const Tensor& coords = values_[n.args[1]];
    const std::size_t h = img.shape()[0], w = img.shape()[1], ch = img.shape()[2];
    const std::size_t oh = coords.shape()[0], ow = coords.shape()[1];
    Tensor out({oh, ow, ch});
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        BilinearCell cell =
            bilinear_cell(coords.at(i, j, 0), coords.at(i, j, 1), h, w);
        for (std::size_t c = 0; c < ch; ++c) {
          double v00 = img.at(cell.r0, cell.c0, c);
          double v01 = img.at(cell.r0, cell.c1, c);
          double v10 = img.at(cell.r1, cell.c0, c);
          double v11 = img.at(cell.r1, cell.c1, c);
          out.at(i, j, c) = (1.0 - cell.fr) * ((1.0 - cell.fc) * v00 + cell.fc * v01) +
                            cell.fr * ((1.0 - cell.fc) * v10 + cell.fc * v11);
        }
      }
    }
    return out;
  }

  void accumulate(NodeId id, Tensor g) {
    if (!has_adjoint_[id]) {
      adjoints_[id] = std::move(g);
      has_adjoint_[id] = true;
      return;
    }
    Tensor& acc = adjoints_[id];
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  }

  // Reduce an adjoint of `big_shape` back onto a broadcast operand.
  Tensor reduce_broadcast(const Tensor& g, const Shape& operand_shape) {
    if (g.shape() == operand_shape) return g;
    if (operand_shape.empty()) {
      double s = 0.0;
      for (double v : g.vec()) s += v;
      return Tensor::scalar(s);
    }
    // bias case: sum over all leading axes
    std::size_t dim = operand_shape[0];
    Tensor out({dim});
    for (std::size_t i = 0; i < g.size(); ++i) out[i % dim] += g[i];
    return out;
  }

  void backprop_node(NodeId id) {
    const Node& n = graph_.nodes()[id];
    const Tensor& g = adjoints_[id];
    auto wants = [&](std::size_t arg_idx) {
      return graph_.nodes()[n.args[arg_idx]].depends_on_diff;
    };
    switch (n.op) {
      case Op::kInput: return;
      case Op::kAdd: {
        const Shape& sa = graph_.nodes()[n.args[0]].shape;
        const Shape& sb = graph_.nodes()[n.args[1]].shape;
        if (wants(0)) accumulate(n.args[0], reduce_broadcast(g, sa));
        if (wants(1)) accumulate(n.args[1], reduce_broadcast(g, sb));
        return;
      }
      case Op::kMul: {
        const Tensor& a = values_[n.args[0]];
        const Tensor& b = values_[n.args[1]];
        Broadcast bc = classify_broadcast(a.shape(), b.shape(), "mul");
        const Tensor& big = bc == Broadcast::kScalarLhs ? b : a;
        const Tensor& small = bc == Broadcast::kScalarLhs ? a : b;
        std::size_t big_arg = bc == Broadcast::kScalarLhs ? 1 : 0;
        std::size_t small_arg = 1 - big_arg;
        Broadcast eff = bc == Broadcast::kScalarLhs ? Broadcast::kScalarRhs : bc;
        std::size_t last = big.shape().empty() ? 1 : big.shape().back();
        if (wants(big_arg)) {
          Tensor gb(big.shape());
          for (std::size_t i = 0; i < big.size(); ++i) {
            gb[i] = g[i] * bcast_rhs(small.vec(), eff, i, last);
          }
          accumulate(n.args[big_arg], std::move(gb));
        }
        if (wants(small_arg)) {
          Tensor gs(small.shape());
          if (eff == Broadcast::kSame) {
            for (std::size_t i = 0; i < big.size(); ++i) gs[i] = g[i] * big[i];
          } else if (eff == Broadcast::kScalarRhs) {
            double s = 0.0;
            for (std::size_t i = 0; i < big.size(); ++i) s += g[i] * big[i];
            gs[0] = s;
          } else {
            for (std::size_t i = 0; i < big.size(); ++i) gs[i % last] += g[i] * big[i];
          }
          accumulate(n.args[small_arg], std::move(gs));
        }
        return;
      }
      case Op::kMatmul: return backprop_matmul(n, g);
      case Op::kConv2d: return backprop_conv2d(n, g);
      case Op::kRelu: {
        const Tensor& x = values_[n.args[0]];
        if (!wants(0)) return;
        Tensor gx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > 0.0 ? g[i] : 0.0;
        accumulate(n.args[0], std::move(gx));
        return;
      }
      case Op::kSoftmax: {
        if (!wants(0)) return;
        const Tensor& y = values_[id];
        std::size_t dim = y.shape().back();
        std::size_t rows = y.size() / dim;
        Tensor gx(y.shape());
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yp = y.data() + r * dim;
          const double* gp = g.data() + r * dim;
          double dotgy = 0.0;
          for (std::size_t c = 0; c < dim; ++c) dotgy += gp[c] * yp[c];
          double* gxp = gx.data() + r * dim;
          for (std::size_t c = 0; c < dim; ++c) gxp[c] = yp[c] * (gp[c] - dotgy);
        }
        accumulate(n.args[0], std::move(gx));
        return;
      }
      case Op::kLog: {
        if (!wants(0)) return;
        const Tensor& x = values_[n.args[0]];
        Tensor gx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] / x[i];
        accumulate(n.args[0], std::move(gx));
        return;
      }
      case Op::kSum:
      case Op::kMean: {
        if (!wants(0)) return;
        const Tensor& x = values_[n.args[0]];
        Tensor gx(x.shape());
        if (n.axis == kAllAxes) {
          double gv = g[0];
          if (n.op == Op::kMean) gv /= static_cast<double>(x.size());
          std::fill(gx.vec().begin(), gx.vec().end(), gv);
        } else {
          AxisSplit sp = split_axis(x.shape(), n.axis);
          for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t in = 0; in < sp.inner; ++in) {
              double gv = g[o * sp.inner + in];
              if (n.op == Op::kMean) gv /= static_cast<double>(sp.dim);
              for (std::size_t d = 0; d < sp.dim; ++d) {
                gx[(o * sp.dim + d) * sp.inner + in] = gv;
              }
            }
          }
        }
        accumulate(n.args[0], std::move(gx));
        return;
      }
      case Op::kGather: {
        if (!wants(0)) return;
        const Tensor& x = values_[n.args[0]];
        const Tensor& idx = values_[n.args[1]];
        std::size_t dim = x.shape().back();
        Tensor gx(x.shape());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          gx[i * dim + static_cast<std::size_t>(idx[i])] += g[i];
        }
        accumulate(n.args[0], std::move(gx));
        return;
      }
      case Op::kBilinearSample: return backprop_bilinear(n, g);
    }
  }

  void backprop_matmul(const Node& n, const Tensor& g) {
    const Tensor& a = values_[n.args[0]];
    const Tensor& b = values_[n.args[1]];
    std::size_t m = a.rank() == 2 ? a.shape()[0] : 1;
    std::size_t k = a.shape().back();
    std::size_t p = b.rank() == 2 ? b.shape()[1] : 1;
    if (graph_.nodes()[n.args[0]].depends_on_diff) {
      Tensor ga(a.shape());
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
          double s = 0.0;
          for (std::size_t j = 0; j < p; ++j) s += g[i * p + j] * b[t * p + j];
          ga[i * k + t] = s;
        }
      }
      accumulate(n.args[0], std::move(ga));
    }
    if (graph_.nodes()[n.args[1]].depends_on_diff) {
      Tensor gb(b.shape());
      for (std::size_t t = 0; t < k; ++t) {
        for (std::size_t j = 0; j < p; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += a[i * k + t] * g[i * p + j];
          gb[t * p + j] = s;
        }
      }
      accumulate(n.args[1], std::move(gb));
    }
  }

  void backprop_conv2d(const Node& n, const Tensor& g) {
    const Tensor& x = values_[n.args[0]];
    const Tensor& w = values_[n.args[1]];
    const std::size_t h = x.shape()[0], wd = x.shape()[1], ic = x.shape()[2];
    const std::size_t kh = w.shape()[0], kw = w.shape()[1], oc = w.shape()[3];
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
    const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
    const bool want_x = graph_.nodes()[n.args[0]].depends_on_diff;
    const bool want_w = graph_.nodes()[n.args[1]].depends_on_diff;
    Tensor gx = want_x ? Tensor(x.shape()) : Tensor();
    Tensor gw = want_w ? Tensor(w.shape()) : Tensor();
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < wd; ++j) {
        const double* gp = g.data() + (i * wd + j) * oc;
        for (std::size_t di = 0; di < kh; ++di) {
          std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + di) - ph;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t dj = 0; dj < kw; ++dj) {
            std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + dj) - pw;
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(wd)) continue;
            std::size_t xoff = (static_cast<std::size_t>(si) * wd +
                                static_cast<std::size_t>(sj)) * ic;
            std::size_t woff = ((di * kw + dj) * ic) * oc;
            for (std::size_t c = 0; c < ic; ++c) {
              double s = 0.0;
              if (want_x) {
                const double* wrow = w.data() + woff + c * oc;
                for (std::size_t o = 0; o < oc; ++o) s += wrow[o] * gp[o];
                gx[xoff + c] += s;
              }
              if (want_w) {
                double xv = x[xoff + c];
                double* gwrow = gw.data() + woff + c * oc;
                for (std::size_t o = 0; o < oc; ++o) gwrow[o] += xv * gp[o];
              }
            }
          }
        }
      }
    }
    if (want_x) accumulate(n.args[0], std::move(gx));
    if (want_w) accumulate(n.args[1], std::move(gw));
  }

  void backprop_bilinear(const Node& n, const Tensor& g) {
    const Tensor& img = values_[n.args[0]];
    const Tensor& coords = values_[n.args[1]];
    const std::size_t h = img.shape()[0], w = img.shape()[1], ch = img.shape()[2];
    const std::size_t oh = coords.shape()[0], ow = coords.shape()[1];
    const bool want_img = graph_.nodes()[n.args[0]].depends_on_diff;
    const bool want_coords = graph_.nodes()[n.args[1]].depends_on_diff;
    Tensor gi = want_img ? Tensor(img.shape()) : Tensor();
    Tensor gc = want_coords ? Tensor(coords.shape()) : Tensor();
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        BilinearCell cell = bilinear_cell(coords.at(i, j, 0), coords.at(i, j, 1), h, w);
        double dr = 0.0, dc = 0.0;
        for (std::size_t c = 0; c < ch; ++c) {
          double gv = g.at(i, j, c);
          double v00 = img.at(cell.r0, cell.c0, c);
          double v01 = img.at(cell.r0, cell.c1, c);
          double v10 = img.at(cell.r1, cell.c0, c);
          double v11 = img.at(cell.r1, cell.c1, c);
          if (want_img) {
            gi.at(cell.r0, cell.c0, c) += gv * (1.0 - cell.fr) * (1.0 - cell.fc);
            gi.at(cell.r0, cell.c1, c) += gv * (1.0 - cell.fr) * cell.fc;
            gi.at(cell.r1, cell.c0, c) += gv * cell.fr * (1.0 - cell.fc);
            gi.at(cell.r1, cell.c1, c) += gv * cell.fr * cell.fc;
          }
          dr += gv * ((1.0 - cell.fc) * (v10 - v00) + cell.fc * (v11 - v01));
          dc += gv * ((1.0 - cell.fr) * (v01 - v00) + cell.fr * (v11 - v10));
        }
        if (want_coords) {
          // Clamped coordinates are flat beyond the border.
          gc.at(i, j, 0) = cell.r_clamped ? 0.0 : dr;
          gc.at(i, j, 1) = cell.c_clamped ? 0.0 : dc;
        }
      }
    }
    if (want_img) accumulate(n.args[0], std::move(gi));
    if (want_coords) accumulate(n.args[1], std::move(gc));
  }

  const Graph& graph_;
  std::vector<Tensor> values_;
  std::vector<Tensor> adjoints_;
  std::vector<char> has_adjoint_;
};

} // namespace

NamedTensors forward(const Graph& graph, const NamedTensors& inputs) {
  Evaluator ev(graph);
  const auto& values = ev.run(inputs);
  NamedTensors out;
  for (const auto& [name, id] : graph.outputs()) out.emplace(name, values[id]);
  return out;
}

NamedTensors grad_all(const Graph& graph, const NamedTensors& inputs) {
  Evaluator ev(graph);
  ev.run(inputs);
  return ev.backward();
}

Tensor grad(const Graph& graph, const NamedTensors& inputs, const std::string& wrt) {
  NodeId id = graph.leaf(wrt);
  if (!graph.nodes()[id].differentiable) {
    throw ShapeError("leaf '" + wrt + "' is not differentiable");
  }
  NamedTensors grads = grad_all(graph, inputs);
  return grads.at(wrt);
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
  if (!(h > 0.0)) throw Error("finite_diff_grad: step must be positive");
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    probe[i] = xi + h;
    double fp = f(probe);
    probe[i] = xi - h;
    double fm = f(probe);
    probe[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NonFiniteError("finite_diff_grad: non-finite function value");
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

} // namespace attackgen
