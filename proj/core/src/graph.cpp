// SPDX-License-Identifier: Apache-2.0
#include "dymoe/graph.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

namespace dymoe {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data(), t.rows(), t.cols());
}

MatMap as_mat(Tensor& t) { return MatMap(t.data(), t.rows(), t.cols()); }

void ensure_finite(const Tensor& t, OpKind op) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t.at(i))) {
      throw TensorError(std::string("non-finite value produced by ") +
                        op_name(op));
    }
  }
}

void require(bool cond, const char* msg) {
  if (!cond) throw TensorError(msg);
}

}  // namespace

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kAdd: return "add";
    case OpKind::kAffine: return "affine";
    case OpKind::kMul: return "mul";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kClamp: return "clamp";
    case OpKind::kAddRowVec: return "add_rowvec";
    case OpKind::kAddTiledRows: return "add_tiled_rows";
    case OpKind::kScaleRows: return "scale_rows";
    case OpKind::kReduceSumAll: return "reduce_sum_all";
    case OpKind::kReduceMaxRows: return "reduce_max_rows";
    case OpKind::kMaskedSoftmaxRows: return "masked_softmax_rows";
    case OpKind::kCrossEntropyMean: return "cross_entropy_mean";
    case OpKind::kEmbed: return "embed";
    case OpKind::kRmsNormRows: return "rmsnorm_rows";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kScatterRows: return "scatter_rows";
    case OpKind::kCausalAttention: return "causal_attention";
  }
  return "?";
}

const Node& Graph::node(NodeId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) {
    throw TensorError("invalid node id");
  }
  return nodes_[static_cast<size_t>(id)];
}

Node& Graph::mutable_node(NodeId id) {
  return const_cast<Node&>(node(id));
}

NodeId Graph::push(Node n) {
  require(!consumed_, "graph already consumed by backward");
  if (n.op != OpKind::kLeaf) ensure_finite(n.value, n.op);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Tensor& Graph::grad(NodeId id) const {
  const Node& n = node(id);
  require(n.has_grad, "node has no gradient");
  return n.grad;
}

std::map<NodeId, const Tensor*> Graph::leaf_grads() const {
  std::map<NodeId, const Tensor*> out;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op == OpKind::kLeaf && n.requires_grad && n.has_grad) {
      out[static_cast<NodeId>(i)] = &n.grad;
    }
  }
  return out;
}

Tensor& Graph::grad_buffer(NodeId id) {
  Node& n = mutable_node(id);
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

NodeId Graph::leaf(Tensor value) {
  bool rg = value.requires_grad();
  return leaf(std::move(value), rg);
}

NodeId Graph::leaf(Tensor value, bool requires_grad) {
  ensure_finite(value, OpKind::kLeaf);
  Node n;
  n.op = OpKind::kLeaf;
  n.requires_grad = requires_grad;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.rank() == 2 && B.rank() == 2, "matmul: rank-2 inputs required");
  require(A.dim(1) == B.dim(0), "matmul: inner dimensions mismatch");
  Node n;
  n.op = OpKind::kMatmul;
  n.inputs = {a, b};
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = Tensor({A.dim(0), B.dim(1)});
  as_mat(n.value).noalias() = as_mat(A) * as_mat(B);
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  const Tensor& A = value(a);
  require(A.rank() == 2, "transpose: rank-2 input required");
  Node n;
  n.op = OpKind::kTranspose;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor({A.dim(1), A.dim(0)});
  as_mat(n.value) = as_mat(A).transpose();
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.same_shape(B), "add: shape mismatch");
  Node n;
  n.op = OpKind::kAdd;
  n.inputs = {a, b};
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = Tensor(A.shape());
  for (std::int64_t i = 0; i < A.numel(); ++i) n.value.at(i) = A.at(i) + B.at(i);
  return push(std::move(n));
}

NodeId Graph::affine(NodeId a, double scale, double shift) {
  const Tensor& A = value(a);
  Node n;
  n.op = OpKind::kAffine;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.p0 = scale;
  n.p1 = shift;
  n.value = Tensor(A.shape());
  for (std::int64_t i = 0; i < A.numel(); ++i) {
    n.value.at(i) = scale * A.at(i) + shift;
  }
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.same_shape(B), "mul: shape mismatch");
  Node n;
  n.op = OpKind::kMul;
  n.inputs = {a, b};
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = Tensor(A.shape());
  for (std::int64_t i = 0; i < A.numel(); ++i) n.value.at(i) = A.at(i) * B.at(i);
  return push(std::move(n));
}

NodeId Graph::exp(NodeId a) {
  const Tensor& A = value(a);
  Node n;
  n.op = OpKind::kExp;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor(A.shape());
  for (std::int64_t i = 0; i < A.numel(); ++i) n.value.at(i) = std::exp(A.at(i));
  return push(std::move(n));
}

NodeId Graph::log(NodeId a) {
  const Tensor& A = value(a);
  Node n;
  n.op = OpKind::kLog;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor(A.shape());
  for (std::int64_t i = 0; i < A.numel(); ++i) n.value.at(i) = std::log(A.at(i));
  return push(std::move(n));
}

NodeId Graph::clamp(NodeId a, double lo, double hi) {
  require(lo <= hi, "clamp: lo > hi");
  const Tensor& A = value(a);
  Node n;
  n.op = OpKind::kClamp;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.p0 = lo;
  n.p1 = hi;
  n.value = Tensor(A.shape());
  for (std::int64_t i = 0; i < A.numel(); ++i) {
    n.value.at(i) = std::min(hi, std::max(lo, A.at(i)));
  }
  return push(std::move(n));
}

NodeId Graph::add_rowvec(NodeId a, NodeId v) {
  const Tensor& A = value(a);
  const Tensor& V = value(v);
  require(A.rank() == 2 && V.rank() == 1, "add_rowvec: [m x n] + [n] required");
  require(A.dim(1) == V.dim(0), "add_rowvec: width mismatch");
  Node n;
  n.op = OpKind::kAddRowVec;
  n.inputs = {a, v};
  n.requires_grad = node(a).requires_grad || node(v).requires_grad;
  n.value = Tensor(A.shape());
  for (std::int64_t r = 0; r < A.dim(0); ++r) {
    for (std::int64_t c = 0; c < A.dim(1); ++c) {
      n.value.at(r, c) = A.at(r, c) + V.at(c);
    }
  }
  return push(std::move(n));
}

NodeId Graph::add_tiled_rows(NodeId a, NodeId tile) {
  const Tensor& A = value(a);
  const Tensor& T = value(tile);
  require(A.rank() == 2 && T.rank() == 2, "add_tiled_rows: rank-2 required");
  require(A.dim(1) == T.dim(1), "add_tiled_rows: width mismatch");
  require(A.dim(0) % T.dim(0) == 0, "add_tiled_rows: rows not a multiple");
  Node n;
  n.op = OpKind::kAddTiledRows;
  n.inputs = {a, tile};
  n.requires_grad = node(a).requires_grad || node(tile).requires_grad;
  n.value = Tensor(A.shape());
  std::int64_t t = T.dim(0);
  for (std::int64_t r = 0; r < A.dim(0); ++r) {
    for (std::int64_t c = 0; c < A.dim(1); ++c) {
      n.value.at(r, c) = A.at(r, c) + T.at(r % t, c);
    }
  }
  return push(std::move(n));
}

NodeId Graph::scale_rows(NodeId a, NodeId v) {
  const Tensor& A = value(a);
  const Tensor& V = value(v);
  // Accepts a length-m vector or an [m x 1] column.
  require(A.rank() == 2 &&
              (V.rank() == 1 || (V.rank() == 2 && V.dim(1) == 1)),
          "scale_rows: [m x n], [m] required");
  require(A.dim(0) == V.dim(0), "scale_rows: row count mismatch");
  Node n;
  n.op = OpKind::kScaleRows;
  n.inputs = {a, v};
  n.requires_grad = node(a).requires_grad || node(v).requires_grad;
  n.value = Tensor(A.shape());
  for (std::int64_t r = 0; r < A.dim(0); ++r) {
    double s = V.at(r);
    for (std::int64_t c = 0; c < A.dim(1); ++c) {
      n.value.at(r, c) = A.at(r, c) * s;
    }
  }
  return push(std::move(n));
}

NodeId Graph::reduce_sum_all(NodeId a) {
  const Tensor& A = value(a);
  Node n;
  n.op = OpKind::kReduceSumAll;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  double s = 0.0;
  for (std::int64_t i = 0; i < A.numel(); ++i) s += A.at(i);
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

NodeId Graph::reduce_max_rows(NodeId a) {
  const Tensor& A = value(a);
  require(A.rank() == 1 || A.rank() == 2, "reduce_max_rows: rank 1 or 2");
  std::int64_t m = A.rows(), c = A.cols();
  Node n;
  n.op = OpKind::kReduceMaxRows;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor({m});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(m), 0);
  for (std::int64_t r = 0; r < m; ++r) {
    double best = A.at(r * c);
    int best_j = 0;
    for (std::int64_t j = 1; j < c; ++j) {
      double x = A.at(r * c + j);
      if (x > best) {  // strict: ties keep the lowest index
        best = x;
        best_j = static_cast<int>(j);
      }
    }
    n.value.at(r) = best;
    (*argmax)[static_cast<size_t>(r)] = best_j;
  }
  n.indices = argmax;
  return push(std::move(n));
}

NodeId Graph::masked_softmax_rows(NodeId a, Tensor mask) {
  const Tensor& A = value(a);
  require(A.same_shape(mask), "masked_softmax_rows: mask shape mismatch");
  std::int64_t m = A.rows(), c = A.cols();
  Node n;
  n.op = OpKind::kMaskedSoftmaxRows;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor(A.shape());
  for (std::int64_t r = 0; r < m; ++r) {
    // Running max over unmasked entries first, so the -inf sentinel never
    // reaches exponentiation.
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < c; ++j) {
      double mk = mask.at(r * c + j);
      require(mk == 0.0 || mk == 1.0, "masked_softmax_rows: mask not 0/1");
      if (mk == 1.0) mx = std::max(mx, A.at(r * c + j));
    }
    require(std::isfinite(mx), "masked_softmax_rows: all entries masked");
    double sum = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      double e = mask.at(r * c + j) == 1.0 ? std::exp(A.at(r * c + j) - mx) : 0.0;
      n.value.at(r * c + j) = e;
      sum += e;
    }
    for (std::int64_t j = 0; j < c; ++j) n.value.at(r * c + j) /= sum;
  }
  n.aux = std::make_shared<const Tensor>(std::move(mask));
  return push(std::move(n));
}

NodeId Graph::softmax_rows(NodeId a) {
  return masked_softmax_rows(a, Tensor::full(value(a).shape(), 1.0));
}

NodeId Graph::cross_entropy_mean(NodeId logits, std::vector<int> labels) {
  const Tensor& A = value(logits);
  require(A.rank() == 2, "cross_entropy_mean: rank-2 logits required");
  std::int64_t m = A.dim(0), c = A.dim(1);
  require(static_cast<std::int64_t>(labels.size()) == m,
          "cross_entropy_mean: label count mismatch");
  Node n;
  n.op = OpKind::kCrossEntropyMean;
  n.inputs = {logits};
  n.requires_grad = node(logits).requires_grad;
  auto probs = std::make_shared<Tensor>(A.shape());
  double loss = 0.0;
  for (std::int64_t r = 0; r < m; ++r) {
    int y = labels[static_cast<size_t>(r)];
    require(y >= 0 && y < c, "cross_entropy_mean: label out of range");
    double mx = A.at(r, 0);
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, A.at(r, j));
    double sum = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      double e = std::exp(A.at(r, j) - mx);
      probs->at(r, j) = e;
      sum += e;
    }
    for (std::int64_t j = 0; j < c; ++j) probs->at(r, j) /= sum;
    loss -= std::log(probs->at(r, y));
  }
  n.value = Tensor::scalar(loss / static_cast<double>(m));
  n.aux = std::move(probs);
  n.indices = std::make_shared<const std::vector<int>>(std::move(labels));
  return push(std::move(n));
}

NodeId Graph::embed(NodeId table, std::vector<int> ids) {
  const Tensor& T = value(table);
  require(T.rank() == 2, "embed: rank-2 table required");
  Node n;
  n.op = OpKind::kEmbed;
  n.inputs = {table};
  n.requires_grad = node(table).requires_grad;
  std::int64_t d = T.dim(1);
  n.value = Tensor({static_cast<std::int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < T.dim(0), "embed: id out of range");
    for (std::int64_t j = 0; j < d; ++j) {
      n.value.at(static_cast<std::int64_t>(i), j) = T.at(ids[i], j);
    }
  }
  n.indices = std::make_shared<const std::vector<int>>(std::move(ids));
  return push(std::move(n));
}

NodeId Graph::rmsnorm_rows(NodeId a, double eps) {
  const Tensor& A = value(a);
  require(A.rank() == 2, "rmsnorm_rows: rank-2 required");
  require(eps > 0, "rmsnorm_rows: eps must be positive");
  Node n;
  n.op = OpKind::kRmsNormRows;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.p0 = eps;
  n.value = Tensor(A.shape());
  std::int64_t m = A.dim(0), c = A.dim(1);
  for (std::int64_t r = 0; r < m; ++r) {
    double ms = 0.0;
    for (std::int64_t j = 0; j < c; ++j) ms += A.at(r, j) * A.at(r, j);
    double inv = 1.0 / std::sqrt(ms / static_cast<double>(c) + eps);
    for (std::int64_t j = 0; j < c; ++j) n.value.at(r, j) = A.at(r, j) * inv;
  }
  return push(std::move(n));
}

NodeId Graph::concat_cols(const std::vector<NodeId>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  std::int64_t m = value(parts[0]).dim(0);
  std::int64_t total = 0;
  bool rg = false;
  for (NodeId p : parts) {
    const Tensor& t = value(p);
    require(t.rank() == 2 && t.dim(0) == m, "concat_cols: row mismatch");
    total += t.dim(1);
    rg = rg || node(p).requires_grad;
  }
  Node n;
  n.op = OpKind::kConcatCols;
  n.inputs = parts;
  n.requires_grad = rg;
  n.value = Tensor({m, total});
  std::int64_t off = 0;
  for (NodeId p : parts) {
    const Tensor& t = value(p);
    for (std::int64_t r = 0; r < m; ++r) {
      for (std::int64_t j = 0; j < t.dim(1); ++j) {
        n.value.at(r, off + j) = t.at(r, j);
      }
    }
    off += t.dim(1);
  }
  return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId a, int start, int len) {
  const Tensor& A = value(a);
  require(A.rank() == 2, "slice_cols: rank-2 required");
  require(start >= 0 && len > 0 && start + len <= A.dim(1),
          "slice_cols: range out of bounds");
  Node n;
  n.op = OpKind::kSliceCols;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.i0 = start;
  n.i1 = len;
  n.value = Tensor({A.dim(0), static_cast<std::int64_t>(len)});
  for (std::int64_t r = 0; r < A.dim(0); ++r) {
    for (int j = 0; j < len; ++j) n.value.at(r, j) = A.at(r, start + j);
  }
  return push(std::move(n));
}

NodeId Graph::gather_rows(NodeId a, std::vector<int> rows) {
  const Tensor& A = value(a);
  require(A.rank() == 2, "gather_rows: rank-2 required");
  require(!rows.empty(), "gather_rows: empty row set");
  Node n;
  n.op = OpKind::kGatherRows;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.value = Tensor({static_cast<std::int64_t>(rows.size()), A.dim(1)});
  for (size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < A.dim(0), "gather_rows: row out of range");
    for (std::int64_t j = 0; j < A.dim(1); ++j) {
      n.value.at(static_cast<std::int64_t>(i), j) = A.at(rows[i], j);
    }
  }
  n.indices = std::make_shared<const std::vector<int>>(std::move(rows));
  return push(std::move(n));
}

NodeId Graph::scatter_rows(NodeId a, std::vector<int> rows, int out_rows) {
  const Tensor& A = value(a);
  require(A.rank() == 2, "scatter_rows: rank-2 required");
  require(static_cast<std::int64_t>(rows.size()) == A.dim(0),
          "scatter_rows: row map size mismatch");
  Node n;
  n.op = OpKind::kScatterRows;
  n.inputs = {a};
  n.requires_grad = node(a).requires_grad;
  n.i0 = out_rows;
  n.value = Tensor({static_cast<std::int64_t>(out_rows), A.dim(1)});
  for (size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < out_rows, "scatter_rows: row out of range");
    for (std::int64_t j = 0; j < A.dim(1); ++j) {
      n.value.at(rows[i], j) += A.at(static_cast<std::int64_t>(i), j);
    }
  }
  n.indices = std::make_shared<const std::vector<int>>(std::move(rows));
  return push(std::move(n));
}

NodeId Graph::causal_attention(NodeId q, NodeId k, NodeId v, int batch,
                               int seq, int heads) {
  const Tensor& Q = value(q);
  const Tensor& K = value(k);
  const Tensor& V = value(v);
  require(Q.rank() == 2 && Q.same_shape(K) && Q.same_shape(V),
          "causal_attention: q/k/v shape mismatch");
  std::int64_t n_rows = Q.dim(0), d = Q.dim(1);
  require(n_rows == static_cast<std::int64_t>(batch) * seq,
          "causal_attention: rows != batch*seq");
  require(d % heads == 0, "causal_attention: width not divisible by heads");
  std::int64_t hd = d / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Node n;
  n.op = OpKind::kCausalAttention;
  n.inputs = {q, k, v};
  n.requires_grad = node(q).requires_grad || node(k).requires_grad ||
                    node(v).requires_grad;
  n.p0 = scale;
  n.i0 = batch;
  n.i1 = seq;
  n.i2 = heads;
  n.value = Tensor({n_rows, d});

  auto probs = std::make_shared<Tensor>(
      std::vector<std::int64_t>{static_cast<std::int64_t>(batch) * heads * seq,
                                static_cast<std::int64_t>(seq)});
  ConstMatMap mq = as_mat(Q), mk = as_mat(K), mv = as_mat(V);
  MatMap mo = as_mat(n.value);
  MatMap mp(probs->data(), probs->rows(), probs->cols());
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto qb = mq.block(b * seq, h * hd, seq, hd);
      auto kb = mk.block(b * seq, h * hd, seq, hd);
      auto vb = mv.block(b * seq, h * hd, seq, hd);
      Mat scores = qb * kb.transpose() * scale;
      auto pb = mp.block((static_cast<std::int64_t>(b) * heads + h) * seq, 0,
                         seq, seq);
      for (int i = 0; i < seq; ++i) {
        double mx = scores(i, 0);
        for (int j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double sum = 0.0;
        for (int j = 0; j < seq; ++j) {
          double e = j <= i ? std::exp(scores(i, j) - mx) : 0.0;
          pb(i, j) = e;
          sum += e;
        }
        for (int j = 0; j < seq; ++j) pb(i, j) /= sum;
      }
      mo.block(b * seq, h * hd, seq, hd).noalias() = pb * vb;
    }
  }
  n.aux = std::move(probs);
  return push(std::move(n));
}

void Graph::backward(NodeId loss) {
  require(!consumed_, "graph already consumed by backward");
  const Node& ln = node(loss);
  require(ln.value.numel() == 1, "backward: loss is not scalar-shaped");
  require(ln.requires_grad, "backward: loss does not require grad");
  consumed_ = true;
  grad_buffer(loss).at(0) = 1.0;

  for (NodeId id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad || !n.has_grad) continue;
    const Tensor& g = n.grad;
    auto needs = [&](size_t slot) {
      return nodes_[static_cast<size_t>(n.inputs[slot])].requires_grad;
    };
    switch (n.op) {
      case OpKind::kLeaf:
        break;
      case OpKind::kMatmul: {
        const Tensor& A = value(n.inputs[0]);
        const Tensor& B = value(n.inputs[1]);
        if (needs(0)) {
          as_mat(grad_buffer(n.inputs[0])).noalias() +=
              as_mat(g) * as_mat(B).transpose();
        }
        if (needs(1)) {
          as_mat(grad_buffer(n.inputs[1])).noalias() +=
              as_mat(A).transpose() * as_mat(g);
        }
        break;
      }
      case OpKind::kTranspose: {
        if (needs(0)) {
          as_mat(grad_buffer(n.inputs[0])) += as_mat(g).transpose();
        }
        break;
      }
      case OpKind::kAdd: {
        for (size_t s = 0; s < 2; ++s) {
          if (!needs(s)) continue;
          Tensor& gi = grad_buffer(n.inputs[s]);
          for (std::int64_t i = 0; i < g.numel(); ++i) gi.at(i) += g.at(i);
        }
        break;
      }
      case OpKind::kAffine: {
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          for (std::int64_t i = 0; i < g.numel(); ++i) gi.at(i) += n.p0 * g.at(i);
        }
        break;
      }
      case OpKind::kMul: {
        const Tensor& A = value(n.inputs[0]);
        const Tensor& B = value(n.inputs[1]);
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          for (std::int64_t i = 0; i < g.numel(); ++i) gi.at(i) += g.at(i) * B.at(i);
        }
        if (needs(1)) {
          Tensor& gi = grad_buffer(n.inputs[1]);
          for (std::int64_t i = 0; i < g.numel(); ++i) gi.at(i) += g.at(i) * A.at(i);
        }
        break;
      }
      case OpKind::kExp: {
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          for (std::int64_t i = 0; i < g.numel(); ++i) {
            gi.at(i) += g.at(i) * n.value.at(i);
          }
        }
        break;
      }
      case OpKind::kLog: {
        if (needs(0)) {
          const Tensor& A = value(n.inputs[0]);
          Tensor& gi = grad_buffer(n.inputs[0]);
          for (std::int64_t i = 0; i < g.numel(); ++i) {
            gi.at(i) += g.at(i) / A.at(i);
          }
        }
        break;
      }
      case OpKind::kClamp: {
        if (needs(0)) {
          const Tensor& A = value(n.inputs[0]);
          Tensor& gi = grad_buffer(n.inputs[0]);
          for (std::int64_t i = 0; i < g.numel(); ++i) {
            if (A.at(i) >= n.p0 && A.at(i) <= n.p1) gi.at(i) += g.at(i);
          }
        }
        break;
      }
      case OpKind::kAddRowVec: {
        std::int64_t m = n.value.dim(0), c = n.value.dim(1);
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          for (std::int64_t i = 0; i < g.numel(); ++i) gi.at(i) += g.at(i);
        }
        if (needs(1)) {
          Tensor& gv = grad_buffer(n.inputs[1]);
          for (std::int64_t r = 0; r < m; ++r) {
            for (std::int64_t j = 0; j < c; ++j) gv.at(j) += g.at(r, j);
          }
        }
        break;
      }
      case OpKind::kAddTiledRows: {
        std::int64_t m = n.value.dim(0), c = n.value.dim(1);
        std::int64_t t = value(n.inputs[1]).dim(0);
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          for (std::int64_t i = 0; i < g.numel(); ++i) gi.at(i) += g.at(i);
        }
        if (needs(1)) {
          Tensor& gt = grad_buffer(n.inputs[1]);
          for (std::int64_t r = 0; r < m; ++r) {
            for (std::int64_t j = 0; j < c; ++j) gt.at(r % t, j) += g.at(r, j);
          }
        }
        break;
      }
      case OpKind::kScaleRows: {
        const Tensor& A = value(n.inputs[0]);
        const Tensor& V = value(n.inputs[1]);
        std::int64_t m = A.dim(0), c = A.dim(1);
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          for (std::int64_t r = 0; r < m; ++r) {
            for (std::int64_t j = 0; j < c; ++j) gi.at(r, j) += g.at(r, j) * V.at(r);
          }
        }
        if (needs(1)) {
          Tensor& gv = grad_buffer(n.inputs[1]);
          for (std::int64_t r = 0; r < m; ++r) {
            double s = 0.0;
            for (std::int64_t j = 0; j < c; ++j) s += g.at(r, j) * A.at(r, j);
            gv.at(r) += s;
          }
        }
        break;
      }
      case OpKind::kReduceSumAll: {
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          for (std::int64_t i = 0; i < gi.numel(); ++i) gi.at(i) += g.at(0);
        }
        break;
      }
      case OpKind::kReduceMaxRows: {
        if (needs(0)) {
          const Tensor& A = value(n.inputs[0]);
          Tensor& gi = grad_buffer(n.inputs[0]);
          std::int64_t c = A.cols();
          for (std::int64_t r = 0; r < n.value.numel(); ++r) {
            gi.at(r * c + (*n.indices)[static_cast<size_t>(r)]) += g.at(r);
          }
        }
        break;
      }
      case OpKind::kMaskedSoftmaxRows: {
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          std::int64_t m = n.value.rows(), c = n.value.cols();
          for (std::int64_t r = 0; r < m; ++r) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < c; ++j) {
              dot += g.at(r * c + j) * n.value.at(r * c + j);
            }
            for (std::int64_t j = 0; j < c; ++j) {
              gi.at(r * c + j) +=
                  n.value.at(r * c + j) * (g.at(r * c + j) - dot);
            }
          }
        }
        break;
      }
      case OpKind::kCrossEntropyMean: {
        if (needs(0)) {
          const Tensor& P = *n.aux;
          Tensor& gi = grad_buffer(n.inputs[0]);
          std::int64_t m = P.dim(0), c = P.dim(1);
          double s = g.at(0) / static_cast<double>(m);
          for (std::int64_t r = 0; r < m; ++r) {
            int y = (*n.indices)[static_cast<size_t>(r)];
            for (std::int64_t j = 0; j < c; ++j) {
              gi.at(r, j) += s * (P.at(r, j) - (j == y ? 1.0 : 0.0));
            }
          }
        }
        break;
      }
      case OpKind::kEmbed: {
        if (needs(0)) {
          Tensor& gt = grad_buffer(n.inputs[0]);
          std::int64_t d = n.value.dim(1);
          for (size_t i = 0; i < n.indices->size(); ++i) {
            for (std::int64_t j = 0; j < d; ++j) {
              gt.at((*n.indices)[i], j) += g.at(static_cast<std::int64_t>(i), j);
            }
          }
        }
        break;
      }
      case OpKind::kRmsNormRows: {
        if (needs(0)) {
          const Tensor& A = value(n.inputs[0]);
          Tensor& gi = grad_buffer(n.inputs[0]);
          std::int64_t m = A.dim(0), c = A.dim(1);
          for (std::int64_t r = 0; r < m; ++r) {
            double ms = 0.0;
            for (std::int64_t j = 0; j < c; ++j) ms += A.at(r, j) * A.at(r, j);
            double inv = 1.0 / std::sqrt(ms / static_cast<double>(c) + n.p0);
            double gy = 0.0;
            for (std::int64_t j = 0; j < c; ++j) {
              gy += g.at(r, j) * n.value.at(r, j);
            }
            gy /= static_cast<double>(c);
            for (std::int64_t j = 0; j < c; ++j) {
              gi.at(r, j) += inv * (g.at(r, j) - n.value.at(r, j) * gy);
            }
          }
        }
        break;
      }
      case OpKind::kConcatCols: {
        std::int64_t m = n.value.dim(0);
        std::int64_t off = 0;
        for (size_t s = 0; s < n.inputs.size(); ++s) {
          const Tensor& part = value(n.inputs[s]);
          if (needs(s)) {
            Tensor& gi = grad_buffer(n.inputs[s]);
            for (std::int64_t r = 0; r < m; ++r) {
              for (std::int64_t j = 0; j < part.dim(1); ++j) {
                gi.at(r, j) += g.at(r, off + j);
              }
            }
          }
          off += part.dim(1);
        }
        break;
      }
      case OpKind::kSliceCols: {
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          std::int64_t m = n.value.dim(0);
          for (std::int64_t r = 0; r < m; ++r) {
            for (int j = 0; j < n.i1; ++j) gi.at(r, n.i0 + j) += g.at(r, j);
          }
        }
        break;
      }
      case OpKind::kGatherRows: {
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          std::int64_t c = n.value.dim(1);
          for (size_t i = 0; i < n.indices->size(); ++i) {
            for (std::int64_t j = 0; j < c; ++j) {
              gi.at((*n.indices)[i], j) += g.at(static_cast<std::int64_t>(i), j);
            }
          }
        }
        break;
      }
      case OpKind::kScatterRows: {
        if (needs(0)) {
          Tensor& gi = grad_buffer(n.inputs[0]);
          std::int64_t c = n.value.dim(1);
          for (size_t i = 0; i < n.indices->size(); ++i) {
            for (std::int64_t j = 0; j < c; ++j) {
              gi.at(static_cast<std::int64_t>(i), j) += g.at((*n.indices)[i], j);
            }
          }
        }
        break;
      }
      case OpKind::kCausalAttention: {
        const Tensor& Q = value(n.inputs[0]);
        const Tensor& K = value(n.inputs[1]);
        const Tensor& V = value(n.inputs[2]);
        int batch = n.i0, seq = n.i1, heads = n.i2;
        std::int64_t d = Q.dim(1), hd = d / heads;
        double scale = n.p0;
        const Tensor& P = *n.aux;
        ConstMatMap mq = as_mat(Q), mk = as_mat(K), mv = as_mat(V);
        ConstMatMap mg = as_mat(g);
        ConstMatMap mp(P.data(), P.rows(), P.cols());
        bool nq = needs(0), nk = needs(1), nv = needs(2);
        Tensor* tq = nq ? &grad_buffer(n.inputs[0]) : nullptr;
        Tensor* tk = nk ? &grad_buffer(n.inputs[1]) : nullptr;
        Tensor* tv = nv ? &grad_buffer(n.inputs[2]) : nullptr;
        for (int b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            auto qb = mq.block(b * seq, h * hd, seq, hd);
            auto kb = mk.block(b * seq, h * hd, seq, hd);
            auto vb = mv.block(b * seq, h * hd, seq, hd);
            auto pb = mp.block((static_cast<std::int64_t>(b) * heads + h) * seq,
                               0, seq, seq);
            auto gob = mg.block(b * seq, h * hd, seq, hd);
            if (tv) {
              as_mat(*tv).block(b * seq, h * hd, seq, hd).noalias() +=
                  pb.transpose() * gob;
            }
            if (tq || tk) {
              Mat gp = gob * vb.transpose();  // [seq x seq]
              Mat gs(seq, seq);
              for (int i = 0; i < seq; ++i) {
                double dot = 0.0;
                for (int j = 0; j <= i; ++j) dot += gp(i, j) * pb(i, j);
                for (int j = 0; j < seq; ++j) {
                  gs(i, j) = pb(i, j) * (gp(i, j) - dot);
                }
              }
              if (tq) {
                as_mat(*tq).block(b * seq, h * hd, seq, hd).noalias() +=
                    gs * kb * scale;
              }
              if (tk) {
                as_mat(*tk).block(b * seq, h * hd, seq, hd).noalias() +=
                    gs.transpose() * qb * scale;
              }
            }
          }
        }
        break;
      }
    }
  }
}

double finite_diff_check(
    const std::function<NodeId(Graph&, const std::vector<NodeId>&)>& build,
    const std::vector<Tensor>& params, double h_step) {
  if (h_step <= 0) throw TensorError("finite_diff_check: h_step must be > 0");

  Graph g;
  std::vector<NodeId> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(g.leaf(p, true));
  NodeId loss = build(g, leaves);
  if (g.value(loss).numel() != 1) {
    throw TensorError("finite_diff_check: loss is not scalar");
  }
  // A loss independent of every parameter has an all-zero analytic gradient.
  if (g.node(loss).requires_grad) g.backward(loss);

  auto eval = [&](const std::vector<Tensor>& ps) {
    Graph gg;
    std::vector<NodeId> ls;
    ls.reserve(ps.size());
    for (const Tensor& p : ps) ls.push_back(gg.leaf(p, false));
    return gg.value(build(gg, ls)).at(0);
  };

  std::vector<Tensor> work = params;
  double max_rel = 0.0;
  for (size_t i = 0; i < work.size(); ++i) {
    for (std::int64_t j = 0; j < work[i].numel(); ++j) {
      double orig = work[i].at(j);
      work[i].at(j) = orig + h_step;
      double fp = eval(work);
      work[i].at(j) = orig - h_step;
      double fm = eval(work);
      work[i].at(j) = orig;
      double fd = (fp - fm) / (2.0 * h_step);
      double analytic =
          g.has_grad(leaves[i]) ? g.grad(leaves[i]).at(j) : 0.0;
      double rel = std::abs(analytic - fd) / (std::abs(analytic) + 1e-8);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace dymoe
