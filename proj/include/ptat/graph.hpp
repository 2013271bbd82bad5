#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "ptat/matrix.hpp"

// Reverse-mode automatic differentiation over dense matrices.
//
// A Graph is an append-only tape: every node's inputs have smaller ids than
// the node itself, so id order is a topological order. Values are computed
// eagerly on apply() and never mutated afterwards.
namespace ptat::diffmath {

enum class OpKind {
  leaf,
  matmul,
  affine,
  add,
  scale,
  concat_rows,
  slice_rows,
  row_softmax,
  log_softmax_rows,
  log,
  exp,
  elementwise_mul,
  mean_all,
  mean_rows,
  l2_normalize_rows,
  layer_norm_rows,
  relu,
  transpose,
};

std::string_view op_name(OpKind op);

using NodeId = std::uint32_t;

struct OpAttrs {
  double scalar = 1.0;         // scale
  std::size_t offset = 0;      // slice_rows
  std::size_t count = 0;       // slice_rows
  bool transpose_rhs = false;  // matmul: a * b^T
  bool relu = false;           // affine: clamp the output at zero
};

struct Node {
  NodeId id = 0;
  OpKind op = OpKind::leaf;
  std::vector<NodeId> inputs;
  Matrix value;
  bool requires_grad = false;
  OpAttrs attrs;
  std::vector<double> aux;  // per-row norms / inverse std kept for backward
};

// Gradients keyed by leaf node id. Only leaves created with parameter()
// that the loss depends on appear here.
class GradientMap {
 public:
  bool contains(NodeId id) const { return grads_.count(id) != 0; }
  const Matrix& at(NodeId id) const;
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }
  void insert(NodeId id, Matrix g) { grads_.insert_or_assign(id, std::move(g)); }

 private:
  std::map<NodeId, Matrix> grads_;
};

class Graph {
 public:
  // Trainable leaf: receives a gradient.
  NodeId parameter(Matrix value);
  // Detached leaf: inputs, frozen weights, teacher outputs.
  NodeId constant(Matrix value);

  // Generic entry point. Throws ShapeError on incompatible inputs and
  // NumericError if the result contains NaN/Inf.
  NodeId apply(OpKind op, std::span<const NodeId> inputs, const OpAttrs& attrs = {});

  NodeId matmul(NodeId a, NodeId b, bool transpose_rhs = false);
  // b may match a's shape, be a 1 x cols row (broadcast down rows) or 1 x 1.
  // x * w + b with b a 1 x cols row, optionally followed by relu; one node
  // instead of three keeps wide activations out of memory.
  NodeId affine(NodeId x, NodeId w, NodeId b, bool relu = false);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId slice_rows(NodeId a, std::size_t offset, std::size_t count);
  NodeId row_softmax(NodeId a);
  // x - max - log(sum exp(x - max)) per row; finite even where softmax underflows.
  NodeId log_softmax_rows(NodeId a);
  NodeId log(NodeId a);
  NodeId exp(NodeId a);
  // b may match a's shape or be a 1 x cols row.
  NodeId mul(NodeId a, NodeId b);
  NodeId mean_all(NodeId a);
  // Column means: rows x cols -> 1 x cols.
  NodeId mean_rows(NodeId a);
  NodeId l2_normalize_rows(NodeId a);
  NodeId layer_norm_rows(NodeId a);
  NodeId relu(NodeId a);
  NodeId transpose(NodeId a);

  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Matrix& value(NodeId id) const { return nodes_.at(id).value; }
  double scalar(NodeId id) const;
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Exact gradients of a 1x1 loss with respect to every parameter leaf it
  // depends on. Constant leaves never appear in the result.
  GradientMap backward(NodeId loss) const;

 private:
  NodeId push(Node node);
  // deque: references returned by value()/node() stay valid as the tape grows
  std::deque<Node> nodes_;
};

// Rebuilds a scalar loss from parameter leaves (in the order given).
using LossBuilder = std::function<NodeId(Graph&, std::span<const NodeId>)>;

// Max over every parameter entry of
//   |analytic - central difference| / max(1, |central difference|).
// Throws ValidationError if epsilon <= 0 or if two unperturbed evaluations of
// the builder disagree.
double finite_difference_check(const LossBuilder& builder, const std::vector<Matrix>& params,
                               double epsilon);

}  // namespace ptat::diffmath
