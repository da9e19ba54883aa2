#include "dml/optim.hpp"

#include <string>

namespace dml {

namespace {

void validate(const SgdConfig& c) {
  if (!(c.learning_rate >= 0.0f)) throw Error("sgd: learning rate must be non-negative");
  if (!(c.momentum >= 0.0f && c.momentum < 1.0f)) throw Error("sgd: momentum must lie in [0,1)");
  if (!(c.weight_decay >= 0.0f)) throw Error("sgd: weight decay must be non-negative");
}

}  // namespace

Sgd::Sgd(std::vector<Tensor> params, SgdConfig config) : params_(std::move(params)), config_(config) {
  validate(config_);
  velocity_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.is_leaf()) throw Error("sgd: parameters must be leaf tensors");
    velocity_.emplace_back(p.numel(), 0.0f);
  }
}

void Sgd::set_learning_rate(float lr) {
  SgdConfig next = config_;
  next.learning_rate = lr;
  validate(next);
  config_ = next;
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw Error("sgd: parameter " + std::to_string(i) + " " + shape_string(params_[i].shape()) +
                  " has no gradient");
    }
  }
  const float lr = config_.learning_rate;
  const float mu = config_.momentum;
  const float wd = config_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i].mutable_data();
    const auto g = params_[i].grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = mu * v[j] + g[j];
      p[j] = p[j] - lr * (v[j] + wd * p[j]);
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace dml
