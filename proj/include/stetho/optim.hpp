#pragma once

#include <map>
#include <string>
#include <unordered_map>

#include "stetho/graph.hpp"
#include "stetho/tensor.hpp"

namespace stetho::opt {

using ad::ParameterSet;

/// RMSProp without momentum: ms <- decay*ms + (1-decay)*g^2,
/// p <- p - lr * g / sqrt(ms + epsilon). Accumulators start at zero and the
/// learning rate follows lr0 * lr_decay^completed_epochs.
struct RmsPropConfig {
  double learning_rate = 0.045;
  double decay = 0.9;
  double epsilon = 1.0;
  double lr_decay = 0.975;
};

class RmsProp {
 public:
  explicit RmsProp(RmsPropConfig cfg = {}) : cfg_(cfg), lr_(cfg.learning_rate) {}

  double learning_rate() const { return lr_; }
  const RmsPropConfig& config() const { return cfg_; }

  void apply_lr_decay(int completed_epochs);

  /// Updates exactly the parameters named in `grads`. Throws on non-finite
  /// gradients, naming the offending parameter.
  void step(ParameterSet& params, const std::map<std::string, Tensor>& grads);

 private:
  RmsPropConfig cfg_;
  double lr_;
  std::unordered_map<std::string, Tensor> ms_;
};

void sgd_step(ParameterSet& params, const std::map<std::string, Tensor>& grads, double lr);

}  // namespace stetho::opt
