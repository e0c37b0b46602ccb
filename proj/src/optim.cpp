#include "stetho/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace stetho::opt {

void RmsProp::apply_lr_decay(int completed_epochs) {
  if (completed_epochs < 0) throw std::invalid_argument("apply_lr_decay: negative epoch count");
  lr_ = cfg_.learning_rate * std::pow(cfg_.lr_decay, completed_epochs);
}

void RmsProp::step(ParameterSet& params, const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name).value;
    if (!p.same_shape(g))
      throw std::runtime_error("rmsprop: gradient shape " + shape_str(g.shape) +
                               " does not match parameter '" + name + "' " + shape_str(p.shape));
    auto [it, fresh] = ms_.try_emplace(name, Tensor(p.shape));
    Tensor& ms = it->second;
    (void)fresh;
    for (int64_t i = 0; i < p.size(); ++i) {
      double gi = g[i];
      if (!std::isfinite(gi))
        throw std::runtime_error("rmsprop: non-finite gradient in parameter '" + name +
                                 "' at entry " + std::to_string(i));
      double m = cfg_.decay * ms[i] + (1.0 - cfg_.decay) * gi * gi;
      ms[i] = m;
      p[i] -= lr_ * gi / std::sqrt(m + cfg_.epsilon);
    }
  }
}

void sgd_step(ParameterSet& params, const std::map<std::string, Tensor>& grads, double lr) {
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name).value;
    if (!p.same_shape(g))
      throw std::runtime_error("sgd: gradient shape mismatch for parameter '" + name + "'");
    for (int64_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  }
}

}  // namespace stetho::opt
