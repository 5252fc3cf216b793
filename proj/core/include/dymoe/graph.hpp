// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <vector>

#include "dymoe/tensor.hpp"

namespace dymoe {

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatmul,
  kTranspose,
  kAdd,
  kAffine,           // a*x + b elementwise
  kMul,              // elementwise
  kExp,
  kLog,
  kClamp,
  kAddRowVec,        // [m x n] + row vector [n]
  kAddTiledRows,     // [m x n] + [t x n] tiled down the rows (m % t == 0)
  kScaleRows,        // row i of [m x n] scaled by v[i]
  kReduceSumAll,     // -> scalar
  kReduceMaxRows,    // [m x n] -> [m], ties to lowest column
  kMaskedSoftmaxRows,// softmax per row over mask==1 entries, exact 0 elsewhere
  kCrossEntropyMean, // mean_i -log softmax(logits_i)[label_i]
  kEmbed,            // table [V x d] gathered by token ids
  kRmsNormRows,      // x / sqrt(mean(x^2) + eps) per row
  kConcatCols,
  kSliceCols,
  kGatherRows,
  kScatterRows,      // k rows scattered (added) into an m-row zero tensor
  kCausalAttention,  // fused multi-head causal attention over (q, k, v)
};

const char* op_name(OpKind k);

/// Raised when a forward op produces a non-finite value (error state per the
/// engine contract) or when shapes do not conform.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node {
  OpKind op = OpKind::kLeaf;
  bool requires_grad = false;
  std::vector<NodeId> inputs;
  Tensor value;
  Tensor grad;         // allocated on demand during backward
  bool has_grad = false;

  // Op payloads; meaning depends on the op kind.
  double p0 = 0.0;     // affine a / clamp lo / rmsnorm eps / attention scale
  double p1 = 0.0;     // affine b / clamp hi
  int i0 = 0;          // slice start / scatter target rows / attention batch
  int i1 = 0;          // slice len / attention seq len
  int i2 = 0;          // attention heads
  std::shared_ptr<const Tensor> aux;                  // mask / saved probs
  std::shared_ptr<const std::vector<int>> indices;    // labels / ids / rows
};

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order by construction; backward walks it once in reverse.
class Graph {
 public:
  NodeId leaf(Tensor value);          // requires_grad taken from the tensor
  NodeId leaf(Tensor value, bool requires_grad);
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }
  NodeId scalar(double v) { return constant(Tensor::scalar(v)); }

  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId add(NodeId a, NodeId b);
  NodeId affine(NodeId a, double scale, double shift);
  NodeId scale(NodeId a, double s) { return affine(a, s, 0.0); }
  NodeId mul(NodeId a, NodeId b);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId add_rowvec(NodeId a, NodeId v);
  NodeId add_tiled_rows(NodeId a, NodeId tile);
  NodeId scale_rows(NodeId a, NodeId v);
  NodeId reduce_sum_all(NodeId a);
  NodeId reduce_max_rows(NodeId a);
  NodeId masked_softmax_rows(NodeId a, Tensor mask);
  NodeId softmax_rows(NodeId a);
  NodeId cross_entropy_mean(NodeId logits, std::vector<int> labels);
  NodeId embed(NodeId table, std::vector<int> ids);
  NodeId rmsnorm_rows(NodeId a, double eps);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  NodeId slice_cols(NodeId a, int start, int len);
  NodeId gather_rows(NodeId a, std::vector<int> rows);
  NodeId scatter_rows(NodeId a, std::vector<int> rows, int out_rows);
  NodeId causal_attention(NodeId q, NodeId k, NodeId v, int batch, int seq,
                          int heads);

  /// Backpropagates from a scalar-shaped loss node. May be called once per
  /// graph; every node is visited exactly once in reverse topological order.
  void backward(NodeId loss);

  const Tensor& value(NodeId id) const { return node(id).value; }
  bool has_grad(NodeId id) const { return node(id).has_grad; }
  const Tensor& grad(NodeId id) const;

  /// Gradient map over requires-grad leaves (parameter nodes), keyed by id.
  std::map<NodeId, const Tensor*> leaf_grads() const;

  size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const;

 private:
  Node& mutable_node(NodeId id);
  NodeId push(Node n);
  Tensor& grad_buffer(NodeId id);

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Max over coordinates of |analytic - central difference| /
/// (|analytic| + 1e-8) for a scalar function built over parameter leaves.
/// `build` must construct the loss node from leaves created for `params`
/// inside the supplied graph, as a pure function of the parameter values.
double finite_diff_check(
    const std::function<NodeId(Graph&, const std::vector<NodeId>&)>& build,
    const std::vector<Tensor>& params, double h_step);

}  // namespace dymoe
