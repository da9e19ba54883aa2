#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dml/grid.hpp"
#include "dml/metric_head.hpp"
#include "dml/model.hpp"
#include "dml/shapesworld.hpp"
#include "dml/tensor.hpp"

// Few-shot absorption of novel classes: the pseudo label method (a new
// binary branch head per class, trained on pseudo labels with everything
// else frozen) and the novel prototype method (a masked-mean prototype with
// a two-criterion distance rule; no parameter changes).
namespace dml {

enum class IncrementalMode { Plm, Npm, Finetune };

std::string to_string(IncrementalMode m);
IncrementalMode incremental_mode_from_string(const std::string& name);

struct NovelClassRecord {
  ClassId id = 0;
  std::string name;
  IncrementalMode mode = IncrementalMode::Npm;
  std::size_t shots = 0;
  std::vector<float> prototype;  // NPM only, length N
  double lambda_novel = 0.0;     // NPM only
  std::optional<std::size_t> head_index;  // PLM / FT only
};

nlohmann::json to_json(const NovelClassRecord& r);

/// 1 where head k's close-set map over its own N + k prototypes picks the
/// class the head owns (N + k - 1), else 0. k = 0 is rejected.
BinaryMask binary_head_map(const ModelState& model, std::size_t head_index, const Tensor& image);
BinaryMask binary_head_map_from_backbone(const ModelState& model, std::size_t head_index,
                                         const Tensor& backbone_features);

/// Algorithm 1 without the annotation step: start from m_in and overwrite
/// with id N + t - 1 wherever head t's binary map is 1, t = 1..k in order.
SegMap compose_head_maps(const SegMap& m_in, std::span<const BinaryMask> head_maps, std::size_t n_classes);

/// Algorithm 1: compose_head_maps, then id N + k wherever the annotation is 1.
SegMap pseudo_label_generate(const SegMap& m_in, std::span<const BinaryMask> head_maps,
                             const BinaryMask& annotation, std::size_t n_classes);

/// Live multi-head prediction over N + k classes.
SegMap plm_inference(const ModelState& model, const Tensor& image);

struct PlmHyper {
  std::size_t iterations = 500;
  std::optional<float> learning_rate;  // default 0.01 for Q >= 2, 0.001 for Q = 1
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  LossConfig loss{};
  std::uint64_t seed = 42;

  float lr_for(std::size_t shots) const;
};

struct IncrementalShot {
  Tensor image;  // (3,H,W)
  BinaryMask mask;
};

/// Appends head k+1 and trains only its parameters on the Q shots' pseudo
/// labels. Backbone and earlier heads stay bitwise unchanged.
NovelClassRecord train_plm_head(ModelState& model, const std::vector<IncrementalShot>& shots,
                                const std::string& class_name, const PlmHyper& hyper, TrainingLog* log = nullptr);

/// Fine-tune baseline: like train_plm_head but the backbone is trained too and
/// supervision is the annotation alone (other pixels ignored). Old classes
/// are expected to degrade.
NovelClassRecord finetune_novel(ModelState& model, const std::vector<IncrementalShot>& shots,
                                const std::string& class_name, const PlmHyper& hyper, TrainingLog* log = nullptr);

/// Pixel-weighted mean of h_in features under the masks, pooled across shots.
std::vector<float> novel_prototype(std::span<const Tensor> features, std::span<const BinaryMask> masks);

/// Base close-set labels, replaced by a novel id where that novel prototype
/// is closer than lambda_novel and closer than every other prototype.
SegMap npm_classify(const Tensor& features, const PrototypeSet& protos, double lambda_novel);

/// Computes and registers a novel prototype from h_in features of the shots.
NovelClassRecord register_npm_class(const ModelState& model, PrototypeSet& protos,
                                    const std::vector<IncrementalShot>& shots, const std::string& class_name,
                                    double lambda_novel);

// Annotation interchange: one directory per shot, shot_<NN>/ holding
// annotation.json (scene reference, class name, shot index) and mask.pgm
// (0 = other, 255 = novel class).
void write_annotation(const std::filesystem::path& dir, const Annotation& a);
Annotation read_annotation(const std::filesystem::path& dir);
void write_annotation_set(const std::filesystem::path& root, const std::vector<Annotation>& shots);
std::vector<Annotation> read_annotation_set(const std::filesystem::path& root);

nlohmann::json annotation_json(const Annotation& a);
/// 0/1 mask to the 0/255 PGM used on disk and on the wire, and back. The
/// decoder rejects any other gray level.
std::string encode_mask_pgm(const BinaryMask& mask);
BinaryMask decode_mask_pgm(std::string_view bytes, const std::string& source);

}  // namespace dml
