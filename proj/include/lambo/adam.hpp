#pragma once

#include <cmath>
#include <string>
#include <unordered_map>

#include "lambo/tensor.hpp"

namespace lambo::opt {

struct AdamConfig {
  double lr = 5e-3;
  double beta1 = 0.0;
  double beta2 = 0.01;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied before the Adam step
};

// Decoupled-weight-decay Adam keyed by parameter name. One begin_step() per
// optimizer step, then update() once per parameter tensor.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void begin_step() { ++t_; }

  void update(const std::string& name, Tensor& param, const Tensor& grad,
              bool apply_weight_decay = true) {
    auto& s = state_[name];
    if (s.m.numel() == 0) {
      s.m = Tensor::zeros(param.shape());
      s.v = Tensor::zeros(param.shape());
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < param.numel(); ++i) {
      if (apply_weight_decay && cfg_.weight_decay != 0.0)
        param[i] -= cfg_.lr * cfg_.weight_decay * param[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * grad[i];
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      param[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    param.check_finite("adam update");
  }

  const AdamConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Tensor m, v;
  };
  AdamConfig cfg_;
  std::unordered_map<std::string, Slot> state_;
  long t_ = 0;
};

}  // namespace lambo::opt
