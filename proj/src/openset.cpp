#include "dml/openset.hpp"

#include <algorithm>
#include <cmath>

namespace dml {

SegMap openset_compose(const SegMap& closeset, const ProbMap& anomaly, double lambda_out) {
  require_same_grid("openset_compose", closeset, anomaly);
  if (!(lambda_out >= 0.0 && lambda_out <= 1.0)) throw Error("openset_compose: lambda_out must lie in [0,1]");
  SegMap out = closeset;
  for (std::size_t p = 0; p < out.size(); ++p) {
    if (anomaly.values[p] > lambda_out) out.values[p] = kAnomalyId;
  }
  return out;
}

double calibrate_lambda(std::span<const ProbMap> calibration_maps, double target_fpr) {
  if (!(target_fpr >= 0.0 && target_fpr < 1.0)) throw Error("calibrate_lambda: target_fpr must lie in [0,1)");
  std::vector<double> values;
  for (const auto& m : calibration_maps) values.insert(values.end(), m.values.begin(), m.values.end());
  if (values.empty()) throw Error("calibrate_lambda: empty calibration split");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  // The 1e-9 guards products such as 0.2 * 10 landing a hair below 2.
  const auto allowed = static_cast<std::size_t>(std::floor(target_fpr * double(n) + 1e-9));
  return values[n - 1 - std::min(allowed, n - 1)];
}

}  // namespace dml
