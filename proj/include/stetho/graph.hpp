#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "stetho/tensor.hpp"

namespace stetho::ad {

using NodeId = int;
inline constexpr NodeId kNoNode = -1;

enum class Partition { Encoder, Decoder, Stethoscope };

struct Parameter {
  Tensor value;
  Partition partition = Partition::Encoder;
};

/// Named trainable tensors, partitioned into encoder / decoder / stethoscope.
/// Iteration order is insertion order, so runs are reproducible.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Tensor init, Partition p);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::string>& names() const { return order_; }
  std::vector<std::string> names_in(Partition p) const;
  int64_t scalar_count(Partition p) const;

  /// FNV-1a over the raw bytes of every tensor, in insertion order.
  uint64_t digest() const;
  uint64_t digest(Partition p) const;

  void save(const std::string& path) const;
  static ParameterSet load(const std::string& path);

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, size_t> index_;
  std::vector<Parameter> params_;
};

enum class Op : uint8_t {
  Placeholder,
  Constant,
  Param,
  Add,
  AddScaled,  // a + c*b
  Mul,
  MatMul,
  AddBias,       // [m x n] + row vector [n]
  ScaleByScalar, // x * s, s a one-element parameter tensor
  Conv2d,
  Relu,
  LeakyRelu,
  Sigmoid,
  Flatten,
  ConcatCols,
  StopGradient,
  SparseAffine,
  SigmoidCE,        // mean (or weighted mean) binary cross-entropy from logits
  SoftmaxCE,        // mean n-way cross-entropy from logits, one-hot targets
  SoftmaxCEUniform, // cross-entropy against the uniform distribution
};

enum class Padding : uint8_t { Valid, Same };

struct SparseEntry {
  int row;
  int col;
};
using SparsePatternPtr = std::shared_ptr<const std::vector<SparseEntry>>;

struct Node {
  Op op;
  std::vector<NodeId> parents;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;

  int i0 = 0;     // stride / leading attr
  int i1 = 0;     // padding flag / secondary attr
  double d0 = 0;  // slope / scale

  const Tensor* bound = nullptr;  // Param: live view into a ParameterSet
  std::string pname;
  SparsePatternPtr pattern;
  Tensor scratch;  // Conv2d: im2col buffer reused by backward
};

/// Reverse-mode tape over a DAG built bottom-up. Construction fixes shapes;
/// forward() computes values in insertion (= topological) order; backward()
/// zeroes all gradient buffers, seeds the loss with one and sweeps in reverse.
class Graph {
 public:
  NodeId placeholder(Shape shape);
  NodeId constant(Tensor value);
  NodeId param(ParameterSet& params, const std::string& name);

  NodeId add(NodeId a, NodeId b);
  NodeId add_scaled(NodeId a, NodeId b, double c);
  NodeId mul(NodeId a, NodeId b);
  NodeId matmul(NodeId a, NodeId b);
  NodeId add_bias(NodeId x, NodeId bias);
  NodeId scale_by_scalar(NodeId x, NodeId s);
  NodeId conv2d(NodeId x, NodeId kernels, NodeId bias, int stride, Padding pad);
  NodeId relu(NodeId x);
  NodeId leaky_relu(NodeId x, double slope);
  NodeId sigmoid(NodeId x);
  NodeId flatten(NodeId x);
  NodeId concat_cols(NodeId a, NodeId b);
  NodeId stop_gradient(NodeId x);
  NodeId sparse_affine(NodeId x, NodeId weights, NodeId bias, SparsePatternPtr pattern, int out_dim);
  NodeId sigmoid_ce(NodeId logits, NodeId labels, NodeId weights = kNoNode);
  NodeId softmax_ce(NodeId logits, NodeId onehot, NodeId weights = kNoNode);
  NodeId softmax_ce_uniform(NodeId logits, NodeId weights = kNoNode);

  void forward(const std::vector<std::pair<NodeId, const Tensor*>>& feeds);
  void backward(NodeId loss);

  const Tensor& value(NodeId id) const { return node(id).value; }
  const Tensor& grad(NodeId id) const;
  const Shape& shape(NodeId id) const { return node(id).value.shape; }
  bool forward_done() const { return forward_done_; }
  size_t size() const { return nodes_.size(); }

  /// Gradients of every bound parameter in the given partition. Parameters
  /// that do not reach the loss come back as zeros.
  std::map<std::string, Tensor> param_grads(const ParameterSet& params, Partition p) const;

 private:
  NodeId add_node(Node n);
  Node& node(NodeId id);
  const Node& node(NodeId id) const;
  void eval(Node& n);
  void backprop(NodeId id);
  Tensor& grad_buf(NodeId id);

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> param_nodes_;
  bool forward_done_ = false;
};

/// Max over all parameter entries of |analytic - numeric| / max(|a|, |n|, 1e-8),
/// with numeric gradients from central differences of `fn`'s loss value.
/// `fn` evaluates the loss on the current parameter values and reports the
/// analytic gradients it computed alongside.
struct LossAndGrads {
  double loss;
  std::map<std::string, Tensor> grads;
};
double finite_diff_check(const std::function<LossAndGrads(ParameterSet&)>& fn,
                         ParameterSet& params, double step);

}  // namespace stetho::ad
