#include "dml/losses.hpp"

#include <string>

namespace dml {

namespace {

std::size_t count_valid(std::span<const ClassId> labels, const PrototypeSet& protos, ClassId ignore_id) {
  std::size_t n = 0;
  for (auto l : labels) {
    if (l == ignore_id) continue;
    if (l >= protos.base_count()) {
      throw Error("loss: label id " + std::to_string(l) + " is not one of the " +
                  std::to_string(protos.base_count()) + " classes and not the ignore id");
    }
    ++n;
  }
  return n;
}

void require_features(const Tensor& features, const PrototypeSet& protos) {
  const auto r = features.rank();
  const std::size_t channel_axis = r == 4 ? 1 : 0;
  if ((r != 3 && r != 4) || features.dim(channel_axis) != protos.dim()) {
    throw ShapeError("loss: features " + shape_string(features.shape()) +
                     " do not match metric dimension " + std::to_string(protos.dim()));
  }
}

// Exact zero connected to the features so that backward() still works.
Tensor zero_loss(const Tensor& features) { return ops::scale(ops::sum(features), 0.0f); }

struct Terms {
  Tensor dce;
  Tensor vl;
};

Terms loss_terms(const Tensor& features, std::span<const ClassId> labels, const PrototypeSet& protos,
                 ClassId ignore_id, bool want_dce, bool want_vl) {
  require_features(features, protos);
  const std::size_t valid = count_valid(labels, protos, ignore_id);
  if (valid == 0) return {zero_loss(features), zero_loss(features)};
  const float inv = 1.0f / float(valid);
  const Tensor dist = ops::squared_distances(features, protos.as_tensor());
  Terms t;
  if (want_dce) {
    const Tensor log_p = ops::log_softmax_channels(ops::scale(dist, -1.0f));
    t.dce = ops::scale(ops::sum(ops::gather_channels(log_p, labels, ignore_id)), -inv);
  }
  if (want_vl) t.vl = ops::scale(ops::sum(ops::gather_channels(dist, labels, ignore_id)), inv);
  return t;
}

}  // namespace

Tensor dce_loss(const Tensor& features, std::span<const ClassId> labels, const PrototypeSet& protos,
                ClassId ignore_id) {
  return loss_terms(features, labels, protos, ignore_id, true, false).dce;
}

Tensor variance_loss(const Tensor& features, std::span<const ClassId> labels, const PrototypeSet& protos,
                     ClassId ignore_id) {
  return loss_terms(features, labels, protos, ignore_id, false, true).vl;
}

Tensor hybrid_loss(const Tensor& features, std::span<const ClassId> labels, const PrototypeSet& protos,
                   const LossConfig& cfg) {
  if (!(cfg.lambda_vl >= 0.0f)) throw Error("hybrid_loss: lambda_vl must be non-negative");
  auto t = loss_terms(features, labels, protos, cfg.ignore_id, true, cfg.lambda_vl != 0.0f);
  if (cfg.lambda_vl == 0.0f) return t.dce;
  return ops::add(t.dce, ops::scale(t.vl, cfg.lambda_vl));
}

}  // namespace dml
