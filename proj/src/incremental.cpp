#include "dml/incremental.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dml/optim.hpp"
#include "dml/pnm.hpp"
#include "dml/util.hpp"

namespace dml {

std::string to_string(IncrementalMode m) {
  switch (m) {
    case IncrementalMode::Plm: return "plm";
    case IncrementalMode::Npm: return "npm";
    case IncrementalMode::Finetune: return "ft";
  }
  return "?";
}

IncrementalMode incremental_mode_from_string(const std::string& name) {
  if (name == "plm") return IncrementalMode::Plm;
  if (name == "npm") return IncrementalMode::Npm;
  if (name == "ft") return IncrementalMode::Finetune;
  throw Error("unknown incremental mode '" + name + "' (expected plm, npm or ft)");
}

nlohmann::json to_json(const NovelClassRecord& r) {
  nlohmann::json j = {{"id", r.id}, {"name", r.name}, {"mode", to_string(r.mode)}, {"shots", r.shots}};
  if (r.mode == IncrementalMode::Npm) {
    j["prototype"] = r.prototype;
    j["lambda_novel"] = r.lambda_novel;
  }
  if (r.head_index) j["head_index"] = *r.head_index;
  return j;
}

BinaryMask binary_head_map_from_backbone(const ModelState& model, std::size_t head_index,
                                         const Tensor& backbone_features) {
  if (head_index == 0) throw Error("binary_head_map: head 0 (h_in) is not a binary head");
  const auto& spec = model.head(head_index).spec;
  Tensor feats;
  {
    NoGradGuard guard;
    feats = head_forward(model, head_index, backbone_features);
  }
  const SegMap close = closeset_map(feats, model.prototypes(head_index));
  BinaryMask out(close.height, close.width);
  for (std::size_t p = 0; p < out.size(); ++p) out.values[p] = close.values[p] == *spec.owned_class ? 1 : 0;
  return out;
}

BinaryMask binary_head_map(const ModelState& model, std::size_t head_index, const Tensor& image) {
  if (head_index == 0) throw Error("binary_head_map: head 0 (h_in) is not a binary head");
  model.head(head_index);
  NoGradGuard guard;
  return binary_head_map_from_backbone(model, head_index, backbone_forward(model, image));
}

SegMap compose_head_maps(const SegMap& m_in, std::span<const BinaryMask> head_maps, std::size_t n_classes) {
  SegMap out = m_in;
  for (std::size_t t = 0; t < head_maps.size(); ++t) {
    require_same_grid("pseudo_label_generate", m_in, head_maps[t]);
    const auto id = static_cast<ClassId>(n_classes + t);
    for (std::size_t p = 0; p < out.size(); ++p) {
      if (head_maps[t].values[p] == 1) out.values[p] = id;
    }
  }
  return out;
}

SegMap pseudo_label_generate(const SegMap& m_in, std::span<const BinaryMask> head_maps,
                             const BinaryMask& annotation, std::size_t n_classes) {
  require_same_grid("pseudo_label_generate", m_in, annotation);
  SegMap out = compose_head_maps(m_in, head_maps, n_classes);
  const auto id = static_cast<ClassId>(n_classes + head_maps.size());
  for (std::size_t p = 0; p < out.size(); ++p) {
    if (annotation.values[p] == 1) out.values[p] = id;
  }
  return out;
}

namespace {

// h_in close-set map plus every binary head map, from one backbone pass.
std::pair<SegMap, std::vector<BinaryMask>> head_maps(const ModelState& model, const Tensor& backbone_features) {
  NoGradGuard guard;
  SegMap m_in = closeset_map(head_forward(model, 0, backbone_features), model.prototypes(0));
  std::vector<BinaryMask> maps;
  for (std::size_t k = 1; k < model.head_count(); ++k) {
    maps.push_back(binary_head_map_from_backbone(model, k, backbone_features));
  }
  return {std::move(m_in), std::move(maps)};
}

void check_shots(const std::vector<IncrementalShot>& shots) {
  if (shots.empty()) throw Error("incremental: at least one annotated shot is required");
  for (const auto& s : shots) {
    if (s.image.rank() != 3) throw ShapeError("incremental: shot images must be (C,H,W), got " + shape_string(s.image.shape()));
    if (s.mask.height != s.image.dim(1) || s.mask.width != s.image.dim(2)) {
      throw ShapeError("incremental shot mask", Shape{s.mask.height, s.mask.width}, Shape{s.image.dim(1), s.image.dim(2)});
    }
    for (auto v : s.mask.values) {
      if (v > 1) throw Error("incremental: annotation mask must be strictly binary");
    }
  }
}

Tensor stack_tensors(const std::vector<Tensor>& items) {
  Shape shape = items.front().shape();
  std::vector<float> v;
  for (const auto& t : items) {
    if (t.shape() != shape) throw ShapeError("stack", shape, t.shape());
    v.insert(v.end(), t.data().begin(), t.data().end());
  }
  shape.insert(shape.begin(), items.size());
  return Tensor(std::move(shape), std::move(v));
}

// Shared loop of PLM and fine-tuning: trains `params` of the newest head
// (plus the backbone when `frozen_features` is undefined).
void fit_new_head(ModelState& model, std::size_t head, std::vector<Tensor> params, const Tensor& frozen_features,
                  const Tensor& images, const std::vector<ClassId>& labels, const PlmHyper& hyper, float lr,
                  TrainingLog* log) {
  Sgd opt(std::move(params), SgdConfig{lr, hyper.momentum, hyper.weight_decay});
  const auto protos = model.prototypes(head);
  for (std::size_t it = 0; it < hyper.iterations; ++it) {
    opt.zero_grad();
    const Tensor base = frozen_features.defined() ? frozen_features : backbone_forward(model, images);
    const Tensor loss = hybrid_loss(head_forward(model, head, base), labels, protos, hyper.loss);
    loss.backward();
    opt.step();
    if (log) log->losses.push_back(loss.item());
  }
}

}  // namespace

SegMap plm_inference(const ModelState& model, const Tensor& image) {
  NoGradGuard guard;
  auto [m_in, maps] = head_maps(model, backbone_forward(model, image));
  return compose_head_maps(m_in, maps, model.n_classes);
}

float PlmHyper::lr_for(std::size_t shots) const {
  if (learning_rate) return *learning_rate;
  return shots >= 2 ? 0.01f : 0.001f;
}

NovelClassRecord train_plm_head(ModelState& model, const std::vector<IncrementalShot>& shots,
                                const std::string& class_name, const PlmHyper& hyper, TrainingLog* log) {
  check_shots(shots);
  std::vector<Tensor> images;
  for (const auto& s : shots) images.push_back(s.image);
  const Tensor batch = stack_tensors(images);
  Tensor features;
  std::vector<ClassId> labels;
  {
    NoGradGuard guard;
    features = backbone_forward(model, batch);
    for (std::size_t q = 0; q < shots.size(); ++q) {
      Tensor one = backbone_forward(model, shots[q].image);
      auto [m_in, maps] = head_maps(model, one);
      const SegMap pl = pseudo_label_generate(m_in, maps, shots[q].mask, model.n_classes);
      labels.insert(labels.end(), pl.values.begin(), pl.values.end());
    }
  }
  const std::size_t k = add_head(model, class_name, hyper.seed);
  fit_new_head(model, k, model.head_parameters(k), features, batch, labels, hyper, hyper.lr_for(shots.size()), log);
  return {*model.head(k).spec.owned_class, class_name, IncrementalMode::Plm, shots.size(), {}, 0.0, k};
}

NovelClassRecord finetune_novel(ModelState& model, const std::vector<IncrementalShot>& shots,
                                const std::string& class_name, const PlmHyper& hyper, TrainingLog* log) {
  check_shots(shots);
  std::vector<Tensor> images;
  std::vector<ClassId> labels;
  const std::size_t k = add_head(model, class_name, hyper.seed);
  const ClassId novel = *model.head(k).spec.owned_class;
  for (const auto& s : shots) {
    images.push_back(s.image);
    for (auto v : s.mask.values) labels.push_back(v == 1 ? novel : kIgnoreId);
  }
  auto params = model.backbone_parameters();
  for (auto& t : model.head_parameters(k)) params.push_back(t);
  fit_new_head(model, k, params, Tensor(), stack_tensors(images), labels, hyper, hyper.lr_for(shots.size()), log);
  return {novel, class_name, IncrementalMode::Finetune, shots.size(), {}, 0.0, k};
}

std::vector<float> novel_prototype(std::span<const Tensor> features, std::span<const BinaryMask> masks) {
  if (features.size() != masks.size()) throw Error("novel_prototype: one mask per feature map is required");
  if (features.empty()) throw Error("novel_prototype: no shots");
  const std::size_t dim = features[0].dim(0);
  std::vector<double> acc(dim, 0.0);
  std::size_t count = 0;
  for (std::size_t q = 0; q < features.size(); ++q) {
    const Tensor& f = features[q];
    if (f.rank() != 3 || f.dim(0) != dim) throw ShapeError("novel_prototype", features[0].shape(), f.shape());
    if (masks[q].height != f.dim(1) || masks[q].width != f.dim(2)) {
      throw ShapeError("novel_prototype mask", Shape{masks[q].height, masks[q].width}, Shape{f.dim(1), f.dim(2)});
    }
    const std::size_t hw = f.dim(1) * f.dim(2);
    const auto d = f.data();
    for (std::size_t p = 0; p < hw; ++p) {
      if (masks[q].values[p] != 1) continue;
      ++count;
      for (std::size_t c = 0; c < dim; ++c) acc[c] += d[c * hw + p];
    }
  }
  if (count == 0) throw Error("novel_prototype: the annotation masks select no pixel");
  std::vector<float> out(dim);
  for (std::size_t c = 0; c < dim; ++c) out[c] = float(acc[c] / double(count));
  return out;
}

SegMap npm_classify(const Tensor& features, const PrototypeSet& protos, double lambda_novel) {
  if (protos.novel().empty()) throw Error("npm_classify: no novel prototype is registered");
  detail::require_feature_map(features, protos, "npm_classify");
  SegMap out = closeset_map(features, protos);
  const auto dist = detail::pixel_distances(features, protos, true);
  const std::size_t base = protos.base_count();
  for (std::size_t p = 0; p < out.size(); ++p) {
    std::optional<std::size_t> winner;
    for (std::size_t n = base; n < dist.size(); ++n) {
      const double dn = dist[n][p];
      if (!(dn < lambda_novel)) continue;
      bool nearest = true;
      for (std::size_t k = 0; k < dist.size() && nearest; ++k) {
        if (k != n && !(dn < dist[k][p])) nearest = false;
      }
      if (nearest && (!winner || dn < dist[*winner][p])) winner = n;
    }
    if (winner) out.values[p] = static_cast<ClassId>(*winner);
  }
  return out;
}

NovelClassRecord register_npm_class(const ModelState& model, PrototypeSet& protos,
                                    const std::vector<IncrementalShot>& shots, const std::string& class_name,
                                    double lambda_novel) {
  check_shots(shots);
  if (!(lambda_novel >= 0.0)) throw Error("npm: lambda_novel must be >= 0");
  if (protos.dim() != model.n_classes) throw Error("npm: prototype set does not match the base metric space");
  std::vector<Tensor> feats;
  std::vector<BinaryMask> masks;
  for (const auto& s : shots) {
    feats.push_back(forward_features(model, 0, s.image));
    masks.push_back(s.mask);
  }
  auto proto = novel_prototype(feats, masks);
  const std::size_t id = protos.add_novel(proto);
  if (id >= kAnomalyId) throw Error("npm: class id space exhausted");
  return {static_cast<ClassId>(id), class_name, IncrementalMode::Npm, shots.size(), std::move(proto), lambda_novel,
          std::nullopt};
}

std::string encode_mask_pgm(const BinaryMask& mask) {
  GrayImage g(mask.height, mask.width);
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (mask.values[p] > 1) throw Error("mask must be strictly binary");
    g.values[p] = mask.values[p] ? 255 : 0;
  }
  return encode_pgm(g);
}

BinaryMask decode_mask_pgm(std::string_view bytes, const std::string& source) {
  GrayImage g = decode_pgm(bytes, source);
  BinaryMask m(g.height, g.width);
  for (std::size_t p = 0; p < g.size(); ++p) {
    if (g.values[p] != 0 && g.values[p] != 255) {
      throw FormatError(source + ": mask pixel value " + std::to_string(g.values[p]) + " is neither 0 nor 255");
    }
    m.values[p] = g.values[p] ? 1 : 0;
  }
  return m;
}

nlohmann::json annotation_json(const Annotation& a) {
  return {{"scene", {{"split", to_string(a.image.split)}, {"index", a.image.index}}},
          {"class_name", a.class_name},
          {"shot_index", a.shot_index},
          {"height", a.mask.height},
          {"width", a.mask.width}};
}

void write_annotation(const std::filesystem::path& dir, const Annotation& a) {
  std::filesystem::create_directories(dir);
  write_file(dir / "mask.pgm", encode_mask_pgm(a.mask));
  write_file(dir / "annotation.json", annotation_json(a).dump(2) + "\n");
}

Annotation read_annotation(const std::filesystem::path& dir) {
  const auto meta_path = dir / "annotation.json";
  Annotation a;
  try {
    const auto j = nlohmann::json::parse(read_file(meta_path));
    a.image.split = split_from_string(j.at("scene").at("split"));
    a.image.index = j.at("scene").at("index");
    a.class_name = j.at("class_name");
    a.shot_index = j.at("shot_index");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
  if (a.class_name.empty()) throw FormatError(meta_path.string() + ": class_name is empty");
  a.mask = decode_mask_pgm(read_file(dir / "mask.pgm"), (dir / "mask.pgm").string());
  return a;
}

void write_annotation_set(const std::filesystem::path& root, const std::vector<Annotation>& shots) {
  for (const auto& a : shots) {
    char name[32];
    std::snprintf(name, sizeof name, "shot_%02zu", a.shot_index);
    write_annotation(root / name, a);
  }
}

std::vector<Annotation> read_annotation_set(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw FormatError(root.string() + ": annotation directory not found");
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory() && e.path().filename().string().rfind("shot_", 0) == 0) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<Annotation> out;
  for (const auto& d : dirs) out.push_back(read_annotation(d));
  return out;
}

}  // namespace dml
