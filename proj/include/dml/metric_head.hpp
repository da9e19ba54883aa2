#pragma once

#include <cstddef>
#include <vector>

#include "dml/grid.hpp"
#include "dml/tensor.hpp"

namespace dml {

/// Fixed prototypes of the metric space. Base prototype t is T at index t and
/// zero elsewhere; novel prototypes are free vectors appended by the novel
/// prototype method. Base prototypes never change after construction.
class PrototypeSet {
 public:
  PrototypeSet(std::size_t n_classes, double scale);

  double scale() const { return scale_; }
  std::size_t dim() const { return dim_; }
  std::size_t base_count() const { return dim_; }
  std::size_t size() const { return dim_ + novel_.size(); }
  const std::vector<std::vector<float>>& novel() const { return novel_; }

  /// Returns the class id assigned to the new prototype (base_count + j).
  std::size_t add_novel(std::vector<float> prototype);

  /// Component c of prototype t (base or novel).
  double component(std::size_t t, std::size_t c) const;
  std::vector<float> row(std::size_t t) const;

  /// (K,D) tensor of all prototypes, for use on the gradient tape.
  Tensor as_tensor(bool include_novel = false) const;

 private:
  double scale_;
  std::size_t dim_;
  std::vector<std::vector<float>> novel_;
};

PrototypeSet make_prototypes(std::size_t n_classes, double scale);

/// (K,H,W) map of squared Euclidean distances from features (D,H,W) to every
/// prototype (base then novel), accumulated in double precision.
Tensor squared_distances(const Tensor& features, const PrototypeSet& protos);

/// Distance-softmax class probabilities p_t = exp(-d_t) / sum exp(-d_t'),
/// over base prototypes plus any novel ones. Values are stored as float.
Tensor class_probabilities(const Tensor& features, const PrototypeSet& protos);

/// Per-pixel argmax of the distance-softmax over base prototypes only.
/// Ties resolve to the lowest class id.
SegMap closeset_map(const Tensor& features, const PrototypeSet& protos);

namespace detail {

// Per-pixel distances in double precision, shaped (K, H*W).
std::vector<std::vector<double>> pixel_distances(const Tensor& features, const PrototypeSet& protos,
                                                 bool include_novel);
void require_feature_map(const Tensor& features, const PrototypeSet& protos, const char* op);

}  // namespace detail
}  // namespace dml
