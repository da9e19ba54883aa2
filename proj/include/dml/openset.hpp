#pragma once

#include <optional>
#include <span>

#include "dml/grid.hpp"

namespace dml {

/// Threshold policy for flagging unknown pixels: an explicit value in [0,1],
/// or calibration to a target in-distribution flag rate.
struct OpenSetConfig {
  std::optional<double> lambda_out;  // empty = auto
  double target_fpr = 0.05;
};

/// Pixels with anomaly > lambda_out become kAnomalyId, the rest keep their
/// close-set label.
SegMap openset_compose(const SegMap& closeset, const ProbMap& anomaly, double lambda_out);

/// Returns the (1 - target_fpr) quantile of anomaly values over an
/// in-distribution split so that at most floor(target_fpr * n) calibration
/// pixels exceed it. target_fpr = 0 yields the maximum.
double calibrate_lambda(std::span<const ProbMap> calibration_maps, double target_fpr);

}  // namespace dml
