#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dml/anomaly.hpp"
#include "dml/config.hpp"
#include "dml/incremental.hpp"
#include "dml/metrics.hpp"
#include "dml/model.hpp"
#include "dml/shapesworld.hpp"

namespace dml {

/// A trained model plus whatever novel classes were absorbed into it.
struct OpenWorldModel {
  ModelState model;
  PrototypeSet protos;  // h_in prototypes plus NPM novel prototypes
  std::vector<NovelClassRecord> novel;
  double lambda_novel = 1.5;

  explicit OpenWorldModel(ModelState m);
  std::map<ClassId, std::string> class_names() const;
  bool has_npm() const { return !protos.novel().empty(); }
};

struct Prediction {
  SegMap closeset;   // base classes plus any learned novel class
  AnomalyMaps maps;
  ProbMap anomaly;   // selected score rounded to float32
  SegMap openset;
};

ProbMap select_score(const AnomalyMaps& maps, AnomalyScore which);
/// Values rounded through float32, the precision of the wire format.
ProbMap round_to_f32(ProbMap map);

/// Pixels labelled with a learned novel class keep that label; every other
/// pixel follows the threshold rule.
SegMap compose_openworld(const SegMap& closeset, const ProbMap& anomaly, double lambda_out, std::size_t n_classes);

Prediction predict(const OpenWorldModel& ow, const Tensor& image, const MixtureConfig& mix, AnomalyScore which,
                   double lambda_out);

/// Explicit lambda_out, or the calibrated quantile over the given split.
double resolve_lambda_out(const OpenWorldModel& ow, const std::vector<SceneSample>& calibration,
                          const RunConfig& cfg);

/// Runs PLM, NPM or fine-tuning on the shots and records the new class.
NovelClassRecord apply_incremental(OpenWorldModel& ow, IncrementalMode mode, const std::vector<IncrementalShot>& shots,
                                   const std::string& class_name, const RunConfig& cfg);

// Evaluations shared by the CLI, the sweep and the acceptance suite.

IouReport evaluate_closed(const ModelState& model, const std::vector<SceneSample>& scenes);

struct AnomalyEvaluation {
  AnomalyScores eds, mmsp, mixed;
  double median_s_ood = 0.0;
  double median_s_in_correct = 0.0;
};
AnomalyEvaluation evaluate_anomaly(const ModelState& model, const std::vector<SceneSample>& test_ood,
                                   const WorldSpec& world, const MixtureConfig& mix);
nlohmann::json to_json(const AnomalyEvaluation& e);

struct IncrementalExperiment {
  explicit IncrementalExperiment(OpenWorldModel base) : updated(std::move(base)) {}

  NovelClassRecord record;
  std::vector<std::size_t> shot_scenes;
  std::vector<Annotation> annotations;
  IouReport before;  // base model on the evaluation scenes
  IouReport after;
  IouReport val_before;  // in-distribution split, old classes only
  IouReport val_after;
  std::string digest_before;
  std::string digest_after;
  bool frozen_tensors_unchanged = true;  // backbone and pre-existing heads
  OpenWorldModel updated;
};

/// Oracle-annotates cfg.shots test_ood scenes of cfg.novel_class, absorbs the
/// class in cfg.mode and scores the remaining test_ood scenes before and
/// after. Other held-out classes are ignored in the scoring.
IncrementalExperiment run_incremental_experiment(const OpenWorldModel& base, const Dataset& data,
                                                 const RunConfig& cfg,
                                                 const std::optional<std::vector<Annotation>>& given = std::nullopt);
nlohmann::json to_json(const IncrementalExperiment& e, const std::map<ClassId, std::string>& names);

ModelState train_base_model(const RunConfig& cfg, const Dataset& data);

// CLI commands. Each returns its report and writes it as <out_dir>/<name>.json.

nlohmann::json cmd_gen_data(const RunConfig& cfg);
nlohmann::json cmd_train(const RunConfig& cfg);
nlohmann::json cmd_eval_closed(const RunConfig& cfg);
/// With `scores_file` ({"scores": [...], "labels": [...]}) only the metrics
/// are computed over the given list.
nlohmann::json cmd_eval_anomaly(const RunConfig& cfg, const std::optional<std::filesystem::path>& scores_file);
nlohmann::json cmd_infer_open(const RunConfig& cfg);
nlohmann::json cmd_incremental(const RunConfig& cfg, const std::optional<std::filesystem::path>& annotations_dir);
nlohmann::json cmd_loop(const RunConfig& cfg);
nlohmann::json cmd_sweep(const RunConfig& cfg, const std::string& param, const std::vector<std::string>& values);

void write_report(const RunConfig& cfg, const std::string& name, const nlohmann::json& report);
Dataset load_dataset_for(const RunConfig& cfg);

}  // namespace dml
