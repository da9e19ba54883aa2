#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dml/grid.hpp"
#include "dml/pnm.hpp"
#include "dml/tensor.hpp"

// Synthetic segmentation scenes: a textured background plus coloured
// geometric shapes. Some shape classes are held out of training entirely and
// only appear in the test_ood split.
namespace dml {

enum class ShapeKind { Disk, Square, Triangle, Diamond, Star, Cross };

std::string to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(const std::string& name);

struct ColorRange {
  std::array<float, 3> lo{};
  std::array<float, 3> hi{};
};

struct ClassDescriptor {
  std::string name;
  ShapeKind kind = ShapeKind::Disk;
  ColorRange color;
  float min_radius = 4.0f;
  float max_radius = 7.0f;
};

enum class Split { Train, Val, TestOod };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct WorldSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  ColorRange background;
  std::vector<ClassDescriptor> in_dist;  // shape classes; background is id 0
  std::vector<ClassDescriptor> ood;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 4;
  float noise = 0.04f;
  // Probability that a train/val scene also contains a held-out shape, whose
  // pixels are then labelled 255.
  float train_ood_rate = 0.0f;
  std::uint64_t seed = 42;

  static WorldSpec defaults();

  /// Number of in-distribution classes, background included.
  std::size_t in_dist_count() const { return in_dist.size() + 1; }
  std::vector<ClassId> ood_ids() const;
  std::string class_name(ClassId id) const;
  std::map<ClassId, std::string> class_names() const;

  void validate() const;
};

nlohmann::json to_json(const WorldSpec& spec);
WorldSpec world_spec_from_json(const nlohmann::json& j);

struct SceneSample {
  RgbImage pixels;
  SegMap label;
  std::uint64_t seed = 0;
  Split split = Split::Train;
  std::size_t index = 0;

  /// (3,H,W) image with values in [0,1].
  Tensor image() const { return to_tensor(pixels); }
};

/// Deterministic in (spec.seed, split, index).
SceneSample generate_scene(const WorldSpec& spec, Split split, std::size_t index);
std::vector<SceneSample> generate(const WorldSpec& spec, Split split, std::size_t count);

struct Dataset {
  WorldSpec spec;
  std::map<Split, std::vector<SceneSample>> splits;

  const std::vector<SceneSample>& split(Split s) const;
};

Dataset generate_dataset(const WorldSpec& spec, std::size_t train, std::size_t val, std::size_t test_ood);

/// Layout: manifest.json, train/img_%05d.ppm, train/lbl_%05d.pgm, val/..., test_ood/...
void write_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& dir);

/// Binary mask (values 0/1) of one annotated shot.
using BinaryMask = Grid<std::uint8_t>;

struct SceneRef {
  Split split = Split::TestOod;
  std::size_t index = 0;
};

struct Annotation {
  SceneRef image;
  BinaryMask mask;
  std::string class_name;
  std::size_t shot_index = 0;
};

void validate(const Annotation& a, std::size_t height, std::size_t width);

/// Oracle labeller: masks equal to (label == novel_id) for the first `shots`
/// samples containing the class.
std::vector<Annotation> oracle_annotate(const std::vector<SceneSample>& samples, ClassId novel_id,
                                        std::size_t shots, const std::string& class_name);

}  // namespace dml
