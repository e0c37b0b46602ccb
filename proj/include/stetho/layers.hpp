#pragma once

#include <random>
#include <string>

#include "stetho/graph.hpp"
#include "stetho/tensor.hpp"

namespace stetho::nn {

using ad::Graph;
using ad::NodeId;
using ad::Padding;
using ad::ParameterSet;
using ad::Partition;

enum class Activation { None, Relu, LeakyRelu, Sigmoid };

// Slope used whenever a layer asks for leaky ReLU.
inline constexpr double kLeakySlope = 0.2;

struct DenseSpec {
  int in = 0;
  int out = 0;
  Activation act = Activation::None;
};

struct Conv2dSpec {
  int in_ch = 0;
  int out_ch = 0;
  int kh = 5;
  int kw = 5;
  int stride = 1;
  Padding pad = Padding::Same;
  Activation act = Activation::None;
};

/// Truncated-normal weights scaled by 1/sqrt(fan_in); zero biases.
/// Parameters land under `prefix + "/w"` and `prefix + "/b"` (dense) or
/// `prefix + "/k"` and `prefix + "/b"` (conv).
void add_dense_params(ParameterSet& params, const std::string& prefix, const DenseSpec& spec,
                      Partition partition, std::mt19937_64& rng);
void add_conv_params(ParameterSet& params, const std::string& prefix, const Conv2dSpec& spec,
                     Partition partition, std::mt19937_64& rng);

NodeId apply_activation(Graph& g, NodeId x, Activation act);
NodeId dense_forward(Graph& g, ParameterSet& params, const std::string& prefix,
                     const DenseSpec& spec, NodeId x);
NodeId conv2d_forward(Graph& g, ParameterSet& params, const std::string& prefix,
                      const Conv2dSpec& spec, NodeId x);

/// Mean binary cross-entropy from logits against constant 0/1 labels.
NodeId sigmoid_ce_loss(Graph& g, NodeId logits, const Tensor& labels,
                       const Tensor* sample_weights = nullptr);
/// Mean n-way cross-entropy from logits against constant one-hot rows.
NodeId softmax_ce_loss(Graph& g, NodeId logits, const Tensor& onehot,
                       const Tensor* sample_weights = nullptr);

/// Expected standard deviation of a two-sigma truncated normal with base
/// stddev `sigma` (used by the init statistics check).
double truncated_normal_stddev(double sigma);

}  // namespace stetho::nn
