#include "dml/metric_head.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dml {

PrototypeSet::PrototypeSet(std::size_t n_classes, double scale) : scale_(scale), dim_(n_classes) {
  if (n_classes < 2) throw Error("prototypes: need at least 2 classes, got " + std::to_string(n_classes));
  if (!(scale > 0.0) || !std::isfinite(scale)) throw Error("prototypes: T must be positive and finite");
}

std::size_t PrototypeSet::add_novel(std::vector<float> prototype) {
  if (prototype.size() != dim_) {
    throw ShapeError("add_novel", Shape{prototype.size()}, Shape{dim_});
  }
  novel_.push_back(std::move(prototype));
  return dim_ + novel_.size() - 1;
}

double PrototypeSet::component(std::size_t t, std::size_t c) const {
  if (t < dim_) return t == c ? scale_ : 0.0;
  return novel_.at(t - dim_).at(c);
}

std::vector<float> PrototypeSet::row(std::size_t t) const {
  std::vector<float> out(dim_);
  for (std::size_t c = 0; c < dim_; ++c) out[c] = float(component(t, c));
  return out;
}

Tensor PrototypeSet::as_tensor(bool include_novel) const {
  const std::size_t k = include_novel ? size() : dim_;
  std::vector<float> values;
  values.reserve(k * dim_);
  for (std::size_t t = 0; t < k; ++t) {
    auto r = row(t);
    values.insert(values.end(), r.begin(), r.end());
  }
  return Tensor({k, dim_}, std::move(values));
}

PrototypeSet make_prototypes(std::size_t n_classes, double scale) { return PrototypeSet(n_classes, scale); }

void detail::require_feature_map(const Tensor& features, const PrototypeSet& protos, const char* op) {
  if (features.rank() != 3 || features.dim(0) != protos.dim()) {
    throw ShapeError(std::string(op) + ": features " + shape_string(features.shape()) +
                     " do not match metric dimension " + std::to_string(protos.dim()));
  }
}

std::vector<std::vector<double>> detail::pixel_distances(const Tensor& features, const PrototypeSet& protos,
                                                         bool include_novel) {
  const std::size_t d = protos.dim();
  const std::size_t hw = features.dim(1) * features.dim(2);
  const std::size_t k_count = include_novel ? protos.size() : protos.base_count();
  const auto f = features.data();
  std::vector<std::vector<double>> out(k_count, std::vector<double>(hw, 0.0));
  for (std::size_t k = 0; k < k_count; ++k) {
    auto& acc = out[k];
    for (std::size_t c = 0; c < d; ++c) {
      const double mc = protos.component(k, c);
      const float* plane = f.data() + c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        const double diff = double(plane[p]) - mc;
        acc[p] += diff * diff;
      }
    }
  }
  return out;
}

Tensor squared_distances(const Tensor& features, const PrototypeSet& protos) {
  detail::require_feature_map(features, protos, "squared_distances");
  const auto dist = detail::pixel_distances(features, protos, true);
  const std::size_t hw = features.dim(1) * features.dim(2);
  std::vector<float> out;
  out.reserve(dist.size() * hw);
  for (const auto& plane : dist) {
    for (double v : plane) out.push_back(float(v));
  }
  return Tensor({dist.size(), features.dim(1), features.dim(2)}, std::move(out));
}

Tensor class_probabilities(const Tensor& features, const PrototypeSet& protos) {
  detail::require_feature_map(features, protos, "class_probabilities");
  const auto dist = detail::pixel_distances(features, protos, true);
  const std::size_t k_count = dist.size();
  const std::size_t hw = features.dim(1) * features.dim(2);
  std::vector<float> out(k_count * hw);
  for (std::size_t p = 0; p < hw; ++p) {
    double nearest = dist[0][p];
    for (std::size_t k = 1; k < k_count; ++k) nearest = std::min(nearest, dist[k][p]);
    double total = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) total += std::exp(nearest - dist[k][p]);
    for (std::size_t k = 0; k < k_count; ++k) out[k * hw + p] = float(std::exp(nearest - dist[k][p]) / total);
  }
  return Tensor({k_count, features.dim(1), features.dim(2)}, std::move(out));
}

SegMap closeset_map(const Tensor& features, const PrototypeSet& protos) {
  detail::require_feature_map(features, protos, "closeset_map");
  const auto dist = detail::pixel_distances(features, protos, false);
  SegMap out(features.dim(1), features.dim(2));
  for (std::size_t p = 0; p < out.size(); ++p) {
    double nearest = dist[0][p];
    for (std::size_t k = 1; k < dist.size(); ++k) nearest = std::min(nearest, dist[k][p]);
    // Unnormalised probabilities share the softmax denominator, so the argmax
    // is taken on exp(dmin - d_t) directly.
    std::size_t best = 0;
    double best_p = std::exp(nearest - dist[0][p]);
    for (std::size_t k = 1; k < dist.size(); ++k) {
      const double pk = std::exp(nearest - dist[k][p]);
      if (pk > best_p) {
        best_p = pk;
        best = k;
      }
    }
    out.values[p] = static_cast<ClassId>(best);
  }
  return out;
}

}  // namespace dml
