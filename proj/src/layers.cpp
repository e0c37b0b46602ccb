#include "stetho/layers.hpp"

#include <cmath>

#include "stetho/rng.hpp"

namespace stetho::nn {

namespace {

Tensor truncated_normal_tensor(Shape shape, int fan_in, std::mt19937_64& rng) {
  if (fan_in <= 0)
    throw std::runtime_error("init: fan-in must be positive, got " + std::to_string(fan_in));
  double sigma = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = truncated_normal(rng, sigma);
  return t;
}

}  // namespace

void add_dense_params(ParameterSet& params, const std::string& prefix, const DenseSpec& spec,
                      Partition partition, std::mt19937_64& rng) {
  params.add(prefix + "/w", truncated_normal_tensor({spec.in, spec.out}, spec.in, rng), partition);
  params.add(prefix + "/b", Tensor({spec.out}), partition);
}

void add_conv_params(ParameterSet& params, const std::string& prefix, const Conv2dSpec& spec,
                     Partition partition, std::mt19937_64& rng) {
  int fan_in = spec.in_ch * spec.kh * spec.kw;
  params.add(prefix + "/k",
             truncated_normal_tensor({spec.out_ch, spec.in_ch, spec.kh, spec.kw}, fan_in, rng),
             partition);
  params.add(prefix + "/b", Tensor({spec.out_ch}), partition);
}

NodeId apply_activation(Graph& g, NodeId x, Activation act) {
  switch (act) {
    case Activation::None:
      return x;
    case Activation::Relu:
      return g.relu(x);
    case Activation::LeakyRelu:
      return g.leaky_relu(x, kLeakySlope);
    case Activation::Sigmoid:
      return g.sigmoid(x);
  }
  return x;
}

NodeId dense_forward(Graph& g, ParameterSet& params, const std::string& prefix,
                     const DenseSpec& spec, NodeId x) {
  NodeId w = g.param(params, prefix + "/w");
  NodeId b = g.param(params, prefix + "/b");
  return apply_activation(g, g.add_bias(g.matmul(x, w), b), spec.act);
}

NodeId conv2d_forward(Graph& g, ParameterSet& params, const std::string& prefix,
                      const Conv2dSpec& spec, NodeId x) {
  NodeId k = g.param(params, prefix + "/k");
  NodeId b = g.param(params, prefix + "/b");
  return apply_activation(g, g.conv2d(x, k, b, spec.stride, spec.pad), spec.act);
}

NodeId sigmoid_ce_loss(Graph& g, NodeId logits, const Tensor& labels,
                       const Tensor* sample_weights) {
  NodeId y = g.constant(labels);
  NodeId w = sample_weights ? g.constant(*sample_weights) : ad::kNoNode;
  return g.sigmoid_ce(logits, y, w);
}

NodeId softmax_ce_loss(Graph& g, NodeId logits, const Tensor& onehot,
                       const Tensor* sample_weights) {
  NodeId t = g.constant(onehot);
  NodeId w = sample_weights ? g.constant(*sample_weights) : ad::kNoNode;
  return g.softmax_ce(logits, t, w);
}

double truncated_normal_stddev(double sigma) {
  // Var of N(0,1) truncated to [-2, 2]: 1 - 2*2*phi(2)/(Phi(2)-Phi(-2)).
  const double phi2 = std::exp(-2.0) / std::sqrt(2.0 * M_PI);
  const double mass = std::erf(2.0 / std::sqrt(2.0));
  return sigma * std::sqrt(1.0 - 4.0 * phi2 / mass);
}

}  // namespace stetho::nn
