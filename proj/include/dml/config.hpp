#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dml/anomaly.hpp"
#include "dml/incremental.hpp"
#include "dml/model.hpp"
#include "dml/openset.hpp"
#include "dml/shapesworld.hpp"

namespace dml {

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class AnomalyScore { Eds, Mmsp, Mixed };

std::string to_string(AnomalyScore s);
AnomalyScore anomaly_score_from_string(const std::string& name);

/// Every knob of a run. Text form is one `key = value` per line; `#` starts
/// a comment. Unknown keys and malformed values are rejected.
struct RunConfig {
  std::uint64_t seed = 42;
  std::filesystem::path data_dir = "runs/data";
  std::filesystem::path checkpoint_dir = "runs/checkpoint";
  std::filesystem::path out_dir = "runs/reports";

  std::size_t train_count = 200;
  std::size_t val_count = 50;
  std::size_t test_count = 50;
  std::size_t image_size = 32;

  double T = 3.0;
  double lambda_vl = 0.01;
  double beta = 20.0;
  double gamma = 0.8;
  std::optional<double> lambda_out;  // unset = auto
  double target_fpr = 0.05;
  AnomalyScore anomaly_score = AnomalyScore::Mixed;

  IncrementalMode mode = IncrementalMode::Npm;
  std::string novel_class = "star";
  std::size_t shots = 5;
  std::size_t max_shots = 5;
  double lambda_novel = 1.5;
  std::size_t plm_iterations = 500;
  std::optional<double> plm_lr;  // unset = 0.01 for Q >= 2, 0.001 for Q = 1

  std::size_t iterations = 2000;
  std::size_t batch_size = 8;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  LrSchedule lr_schedule = LrSchedule::Poly;
  bool hflip = true;
  std::size_t hidden_channels = 16;
  std::size_t num_conv_layers = 4;

  /// Assigns one key from its text form. Throws ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();
  static std::string describe(const std::string& key);

  static RunConfig parse(const std::string& text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;
  nlohmann::json to_json() const;

  /// Range and consistency checks. Throws ConfigError.
  void validate() const;

  WorldSpec world() const;
  TrainHyper train_hyper() const;
  BackboneConfig backbone() const;
  MixtureConfig mixture() const;
  OpenSetConfig openset() const;
  PlmHyper plm_hyper() const;
};

}  // namespace dml
