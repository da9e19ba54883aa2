#pragma once

#include <span>

#include "dml/grid.hpp"
#include "dml/metric_head.hpp"
#include "dml/tensor.hpp"

namespace dml {

struct LossConfig {
  float lambda_vl = 0.01f;
  ClassId ignore_id = kIgnoreId;
};

// All losses take features (B,D,H,W) or (D,H,W) on the tape and labels laid
// out as B*H*W ids. Reduction is the mean over non-ignored pixels; a batch
// with no valid pixel yields an exact 0 with zero gradient.

/// Discriminative cross entropy: mean of -log p_Y with distance-softmax p.
Tensor dce_loss(const Tensor& features, std::span<const ClassId> labels, const PrototypeSet& protos,
                ClassId ignore_id = kIgnoreId);

/// Variance loss: mean of ||F - m_Y||^2. Attractive only.
Tensor variance_loss(const Tensor& features, std::span<const ClassId> labels, const PrototypeSet& protos,
                     ClassId ignore_id = kIgnoreId);

/// dce + lambda_vl * vl, sharing one distance evaluation.
Tensor hybrid_loss(const Tensor& features, std::span<const ClassId> labels, const PrototypeSet& protos,
                   const LossConfig& cfg = {});

}  // namespace dml
