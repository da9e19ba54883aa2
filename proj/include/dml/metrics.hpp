#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dml/grid.hpp"

namespace dml {

/// Anomaly scores with binary ground truth (1 = out-of-distribution).
struct ScoredPixels {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;

  void append(const ProbMap& scores, const SegMap& truth, std::span<const ClassId> ood_ids);
};

// Ranking metrics. Thresholds are the distinct score values; a pixel is
// flagged when score >= threshold, and tied scores enter together.

/// Mann-Whitney statistic: P(pos > neg) + 0.5 P(pos == neg).
double auroc(const ScoredPixels& sp);
/// Average precision: sum over thresholds of precision * delta recall.
double aupr(const ScoredPixels& sp);
/// False-positive rate at the first (highest) threshold reaching 95% recall.
double fpr_at_95_tpr(const ScoredPixels& sp);

struct AnomalyScores {
  double auroc = 0.0;
  double aupr = 0.0;
  double fpr95 = 0.0;
};
AnomalyScores score_anomaly(const ScoredPixels& sp);

double harmonic_mean(double a, double b);

struct IouReport {
  std::map<ClassId, std::optional<double>> per_class;  // nullopt = absent everywhere
  std::optional<double> miou;
  std::optional<double> miou_old;
  std::optional<double> miou_novel;
  std::optional<double> miou_harm;
};

/// Accumulates confusion counts over many maps; ground-truth 255 is skipped.
class IouAccumulator {
 public:
  IouAccumulator(std::vector<ClassId> old_ids, std::vector<ClassId> novel_ids);
  void add(const SegMap& pred, const SegMap& truth);
  IouReport report() const;

 private:
  struct Counts {
    std::uint64_t tp = 0, fp = 0, fn = 0;
  };
  std::vector<ClassId> old_ids_;
  std::vector<ClassId> novel_ids_;
  std::map<ClassId, Counts> counts_;
};

IouReport iou_report(const SegMap& pred, const SegMap& truth, std::vector<ClassId> old_ids,
                     std::vector<ClassId> novel_ids);

nlohmann::json to_json(const AnomalyScores& s);
nlohmann::json to_json(const IouReport& r, const std::map<ClassId, std::string>& names = {});

/// Aligned text table: one row per named report, per-class IoU columns then
/// mIoU, mIoU_novel, mIoU_old, mIoU_harm, all in percent.
std::string format_iou_table(const std::vector<std::pair<std::string, IouReport>>& rows,
                             const std::map<ClassId, std::string>& names);

}  // namespace dml
