#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dml/grid.hpp"
#include "dml/losses.hpp"
#include "dml/metric_head.hpp"
#include "dml/optim.hpp"
#include "dml/shapesworld.hpp"
#include "dml/tensor.hpp"

namespace dml {

inline constexpr int kCheckpointVersion = 1;

struct BackboneConfig {
  std::size_t input_channels = 3;
  std::size_t hidden_channels = 16;
  std::size_t num_conv_layers = 4;

  void validate() const;
};

struct HeadSpec {
  std::size_t head_index = 0;  // 0 = h_in
  std::size_t metric_dim = 0;
  std::optional<ClassId> owned_class;  // absent for h_in
};

struct ClassInfo {
  ClassId id = 0;
  std::string name;
  bool in_distribution = true;
};

struct TrainingLog {
  std::vector<float> losses;  // one entry per iteration
};

enum class LrSchedule { Constant, Poly };

std::string to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& name);

struct TrainHyper {
  std::size_t iterations = 2000;
  std::size_t batch_size = 8;
  SgdConfig sgd{};
  LrSchedule schedule = LrSchedule::Poly;
  double poly_power = 0.9;
  bool hflip = true;
  LossConfig loss{};
  std::uint64_t seed = 42;

  void validate() const;
  double learning_rate_at(std::size_t iteration) const;
};

nlohmann::json to_json(const TrainHyper& h);

/// Shared 3x3-conv backbone plus an ordered list of 1x1-conv heads. Head k
/// projects into an (N + k)-dimensional metric space with one-hot prototypes
/// scaled by T, and owns class N + k - 1.
struct ModelState {
  // Copies own their storage; moves share it.
  struct Conv {
    Tensor weight;
    Tensor bias;

    Conv() = default;
    Conv(Tensor w, Tensor b) : weight(std::move(w)), bias(std::move(b)) {}
    Conv(const Conv& o) : weight(clone(o.weight)), bias(clone(o.bias)) {}
    Conv(Conv&&) noexcept = default;
    Conv& operator=(const Conv& o) {
      if (this != &o) *this = Conv(o);
      return *this;
    }
    Conv& operator=(Conv&&) noexcept = default;

   private:
    static Tensor clone(const Tensor& t) {
      if (!t.defined()) return t;
      Tensor c = t.detach();
      c.set_requires_grad(t.requires_grad());
      return c;
    }
  };
  struct Head {
    HeadSpec spec;
    Conv conv;
  };

  BackboneConfig backbone_config;
  std::size_t n_classes = 0;  // N
  double scale = 3.0;         // T
  std::vector<Conv> backbone;
  std::vector<Head> heads;
  std::vector<ClassInfo> classes;
  TrainingLog log;
  std::optional<TrainHyper> hyper;  // last closed-set recipe, if trained

  std::size_t head_count() const { return heads.size(); }
  const Head& head(std::size_t k) const;
  PrototypeSet prototypes(std::size_t head_index) const;
  std::map<ClassId, std::string> class_names() const;
  std::vector<Tensor> backbone_parameters() const;
  std::vector<Tensor> head_parameters(std::size_t k) const;
  std::vector<Tensor> parameters() const;
};

/// Fan-in uniform initialisation, deterministic in `seed`. Registers classes
/// 0..N-1 from `names`.
ModelState make_model(const BackboneConfig& cfg, const std::vector<std::string>& names, double scale,
                      std::uint64_t seed);

/// Appends head k = head_count() of metric dim N + k owning class N + k - 1.
/// The projection starts from the previous head's rows; the new row is drawn
/// from the fan-in distribution.
std::size_t add_head(ModelState& model, const std::string& class_name, std::uint64_t seed);

/// Backbone activations for (C,H,W) or (B,C,H,W). Records on the tape when
/// grad mode is on and the parameters require grad.
Tensor backbone_forward(const ModelState& model, const Tensor& images);
Tensor head_forward(const ModelState& model, std::size_t head_index, const Tensor& backbone_features);

/// (N + k, H, W) metric features of one image, computed without a tape.
Tensor forward_features(const ModelState& model, std::size_t head_index, const Tensor& image);

/// Stacks samples into a (B,3,H,W) batch, optionally mirrored per sample.
Tensor stack_images(const std::vector<const SceneSample*>& samples, const std::vector<bool>& flip);
std::vector<ClassId> stack_labels(const std::vector<const SceneSample*>& samples, const std::vector<bool>& flip);

/// Trains backbone and h_in with the hybrid loss. Labels must be < N or 255.
TrainingLog train_closed_set(ModelState& model, const std::vector<SceneSample>& data, const TrainHyper& hyper);

// Checkpoint directory: manifest.json plus one DMLT file per parameter
// tensor (backbone.<i>.w / .b, head.<k>.w / .b).
using CheckpointFiles = std::map<std::string, std::string>;

CheckpointFiles serialize_checkpoint(const ModelState& model);
ModelState deserialize_checkpoint(const CheckpointFiles& files, const std::string& source);
void save_checkpoint(const ModelState& model, const std::filesystem::path& dir);
ModelState load_checkpoint(const std::filesystem::path& dir);

/// FNV-1a over every serialized checkpoint file in name order.
std::uint64_t checkpoint_digest(const ModelState& model);
std::uint64_t tensor_digest(const Tensor& t);

}  // namespace dml
