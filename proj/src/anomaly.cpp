#include "dml/anomaly.hpp"

#include <algorithm>
#include <cmath>

namespace dml {

void validate(const MixtureConfig& cfg) {
  if (!(cfg.gamma > 0.0 && cfg.gamma < 1.0)) throw Error("mixture: gamma must lie in (0,1)");
  if (!std::isfinite(cfg.beta)) throw Error("mixture: beta must be finite");
}

ProbMap mmsp_map(const Tensor& features, const PrototypeSet& protos) {
  detail::require_feature_map(features, protos, "mmsp_map");
  const auto dist = detail::pixel_distances(features, protos, false);
  ProbMap out(features.dim(1), features.dim(2));
  for (std::size_t p = 0; p < out.size(); ++p) {
    double nearest = dist[0][p];
    for (std::size_t k = 1; k < dist.size(); ++k) nearest = std::min(nearest, dist[k][p]);
    // max_t p_t = exp(0) / sum_t exp(dmin - d_t)
    double total = 0.0;
    for (const auto& plane : dist) total += std::exp(nearest - plane[p]);
    out.values[p] = 1.0 - 1.0 / total;
  }
  return out;
}

ScoreMap eds_sum(const Tensor& features, const PrototypeSet& protos) {
  detail::require_feature_map(features, protos, "eds_sum");
  const auto dist = detail::pixel_distances(features, protos, false);
  ScoreMap out(features.dim(1), features.dim(2));
  for (std::size_t p = 0; p < out.size(); ++p) {
    double s = 0.0;
    for (const auto& plane : dist) s += plane[p];
    out.values[p] = s;
  }
  return out;
}

ProbMap eds_map(const ScoreMap& sums) {
  if (sums.values.empty()) throw Error("eds_map: empty distance-sum map");
  const double peak = *std::max_element(sums.values.begin(), sums.values.end());
  if (!(peak > 0.0)) throw Error("eds_map: distance sums are all zero; the ratio is undefined");
  ProbMap out(sums.height, sums.width);
  for (std::size_t p = 0; p < out.size(); ++p) {
    out.values[p] = std::clamp(1.0 - sums.values[p] / peak, 0.0, 1.0);
  }
  return out;
}

double mixture_weight(double p_eds, const MixtureConfig& cfg) {
  return 1.0 / (1.0 + std::exp(-cfg.beta * (p_eds - cfg.gamma)));
}

ProbMap mix_maps(const ProbMap& p_eds, const ProbMap& p_mmsp, const MixtureConfig& cfg) {
  validate(cfg);
  require_same_grid("mix_maps", p_eds, p_mmsp);
  ProbMap out(p_eds.height, p_eds.width);
  for (std::size_t p = 0; p < out.size(); ++p) {
    const double e = p_eds.values[p];
    const double m = p_mmsp.values[p];
    const double alpha = mixture_weight(e, cfg);
    out.values[p] = std::clamp(alpha * e + (1.0 - alpha) * m, 0.0, 1.0);
  }
  return out;
}

AnomalyMaps anomaly_maps(const Tensor& features, const PrototypeSet& protos, const MixtureConfig& cfg) {
  AnomalyMaps maps;
  maps.eds = eds_map(eds_sum(features, protos));
  maps.mmsp = mmsp_map(features, protos);
  maps.mixed = mix_maps(maps.eds, maps.mmsp, cfg);
  return maps;
}

}  // namespace dml
