#pragma once

#include <vector>

#include "dml/tensor.hpp"

namespace dml {

struct SgdConfig {
  float learning_rate = 0.05f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
};

/// SGD with heavy-ball momentum. Per parameter:
///   v <- momentum * v + grad
///   p <- p - lr * (v + weight_decay * p)
/// Gradients are left untouched; callers zero them between steps.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdConfig config);

  void step();
  void zero_grad();

  const SgdConfig& config() const { return config_; }
  void set_learning_rate(float lr);
  const std::vector<std::vector<float>>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor> params_;
  SgdConfig config_;
  std::vector<std::vector<float>> velocity_;
};

}  // namespace dml
