#pragma once

#include "dml/grid.hpp"
#include "dml/metric_head.hpp"
#include "dml/tensor.hpp"

namespace dml {

struct MixtureConfig {
  double beta = 20.0;
  double gamma = 0.8;
};

void validate(const MixtureConfig& cfg);

// Unknown-identification scores. All of them look at base prototypes only,
// never at novel prototypes registered later.

/// 1 - max_t p_t per pixel; lies in [0, 1 - 1/N].
ProbMap mmsp_map(const Tensor& features, const PrototypeSet& protos);

/// Euclidean distance sum S = sum_t ||F - m_t||^2 per pixel.
ScoreMap eds_sum(const Tensor& features, const PrototypeSet& protos);

/// 1 - S / max(S), with the max taken over this one image.
ProbMap eds_map(const ScoreMap& sums);

/// alpha * P_EDS + (1 - alpha) * P_MMSP with alpha = sigmoid(beta (P_EDS - gamma)).
ProbMap mix_maps(const ProbMap& p_eds, const ProbMap& p_mmsp, const MixtureConfig& cfg);

double mixture_weight(double p_eds, const MixtureConfig& cfg);

/// All three maps for one feature map.
struct AnomalyMaps {
  ProbMap eds;
  ProbMap mmsp;
  ProbMap mixed;
};
AnomalyMaps anomaly_maps(const Tensor& features, const PrototypeSet& protos, const MixtureConfig& cfg);

}  // namespace dml
