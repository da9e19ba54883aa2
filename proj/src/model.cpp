#include "dml/model.hpp"

#include <algorithm>
#include <cmath>

#include "dml/dmlt.hpp"
#include "dml/util.hpp"

namespace dml {

void BackboneConfig::validate() const {
  if (input_channels < 1) throw Error("backbone: input_channels must be >= 1");
  if (hidden_channels < 1) throw Error("backbone: hidden_channels must be >= 1");
  if (num_conv_layers < 1) throw Error("backbone: num_conv_layers must be >= 1");
}

std::string to_string(LrSchedule s) { return s == LrSchedule::Poly ? "poly" : "constant"; }

LrSchedule lr_schedule_from_string(const std::string& name) {
  if (name == "poly") return LrSchedule::Poly;
  if (name == "constant") return LrSchedule::Constant;
  throw Error("unknown lr schedule '" + name + "' (expected poly or constant)");
}

void TrainHyper::validate() const {
  if (batch_size < 1) throw Error("train: batch_size must be >= 1");
  if (!(sgd.learning_rate >= 0.0f)) throw Error("train: learning rate must be >= 0");
  if (!(sgd.momentum >= 0.0f && sgd.momentum < 1.0f)) throw Error("train: momentum must be in [0,1)");
  if (!(sgd.weight_decay >= 0.0f)) throw Error("train: weight decay must be >= 0");
  if (!(loss.lambda_vl >= 0.0f)) throw Error("train: lambda_vl must be >= 0");
}

double TrainHyper::learning_rate_at(std::size_t iteration) const {
  if (schedule == LrSchedule::Constant || iterations == 0) return sgd.learning_rate;
  const double frac = 1.0 - double(iteration) / double(iterations);
  return double(sgd.learning_rate) * std::pow(std::max(frac, 0.0), poly_power);
}

nlohmann::json to_json(const TrainHyper& h) {
  return {{"iterations", h.iterations}, {"batch_size", h.batch_size},     {"lr", h.sgd.learning_rate},
          {"momentum", h.sgd.momentum}, {"weight_decay", h.sgd.weight_decay}, {"lr_schedule", to_string(h.schedule)},
          {"poly_power", h.poly_power}, {"hflip", h.hflip},               {"lambda_vl", h.loss.lambda_vl},
          {"seed", h.seed}};
}

namespace {

TrainHyper hyper_from_json(const nlohmann::json& j) {
  TrainHyper h;
  h.iterations = j.at("iterations");
  h.batch_size = j.at("batch_size");
  h.sgd.learning_rate = j.at("lr");
  h.sgd.momentum = j.at("momentum");
  h.sgd.weight_decay = j.at("weight_decay");
  h.schedule = lr_schedule_from_string(j.at("lr_schedule"));
  h.poly_power = j.at("poly_power");
  h.hflip = j.at("hflip");
  h.loss.lambda_vl = j.at("lambda_vl");
  h.seed = j.at("seed");
  return h;
}

Tensor uniform_tensor(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / double(fan_in));
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = float(rng.uniform(-bound, bound));
  return Tensor(std::move(shape), std::move(v), true);
}

ModelState::Conv make_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  const std::size_t fan_in = in * k * k;
  auto w = uniform_tensor({out, in, k, k}, fan_in, rng);
  auto b = uniform_tensor({out}, fan_in, rng);
  return {w, b};
}

}  // namespace

const ModelState::Head& ModelState::head(std::size_t k) const {
  if (k >= heads.size()) {
    throw Error("unknown head index " + std::to_string(k) + " (model has " + std::to_string(heads.size()) + ")");
  }
  return heads[k];
}

PrototypeSet ModelState::prototypes(std::size_t head_index) const {
  return make_prototypes(head(head_index).spec.metric_dim, scale);
}

std::map<ClassId, std::string> ModelState::class_names() const {
  std::map<ClassId, std::string> out;
  for (const auto& c : classes) out[c.id] = c.name;
  return out;
}

std::vector<Tensor> ModelState::backbone_parameters() const {
  std::vector<Tensor> out;
  for (const auto& c : backbone) {
    out.push_back(c.weight);
    out.push_back(c.bias);
  }
  return out;
}

std::vector<Tensor> ModelState::head_parameters(std::size_t k) const {
  const auto& h = head(k);
  return {h.conv.weight, h.conv.bias};
}

std::vector<Tensor> ModelState::parameters() const {
  auto out = backbone_parameters();
  for (std::size_t k = 0; k < heads.size(); ++k) {
    auto hp = head_parameters(k);
    out.insert(out.end(), hp.begin(), hp.end());
  }
  return out;
}

ModelState make_model(const BackboneConfig& cfg, const std::vector<std::string>& names, double scale,
                      std::uint64_t seed) {
  cfg.validate();
  if (names.size() < 2) throw Error("model: need at least 2 in-distribution classes");
  if (names.size() >= kAnomalyId) throw Error("model: too many classes");
  if (!(scale > 0.0)) throw Error("model: T must be positive");
  ModelState m;
  m.backbone_config = cfg;
  m.n_classes = names.size();
  m.scale = scale;
  Rng rng(splitmix64(seed ^ 0x6d6f64656cull));
  std::size_t in = cfg.input_channels;
  for (std::size_t i = 0; i < cfg.num_conv_layers; ++i) {
    m.backbone.push_back(make_conv(cfg.hidden_channels, in, 3, rng));
    in = cfg.hidden_channels;
  }
  m.heads.push_back({HeadSpec{0, m.n_classes, std::nullopt}, make_conv(m.n_classes, cfg.hidden_channels, 1, rng)});
  for (std::size_t i = 0; i < names.size(); ++i) m.classes.push_back({ClassId(i), names[i], true});
  return m;
}

std::size_t add_head(ModelState& model, const std::string& class_name, std::uint64_t seed) {
  const std::size_t k = model.heads.size();
  const std::size_t dim = model.n_classes + k;
  const auto owned = static_cast<ClassId>(model.n_classes + k - 1);
  if (owned >= kAnomalyId) throw Error("model: class id space exhausted");
  for (const auto& c : model.classes) {
    if (c.name == class_name) throw Error("model: class name '" + class_name + "' is already registered");
  }
  const std::size_t hidden = model.backbone_config.hidden_channels;
  Rng rng(splitmix64(seed ^ (0x68656164ull + k)));
  const auto& prev = model.heads.back().conv;
  auto fresh = make_conv(1, hidden, 1, rng);
  std::vector<float> w(prev.weight.data().begin(), prev.weight.data().end());
  w.insert(w.end(), fresh.weight.data().begin(), fresh.weight.data().end());
  std::vector<float> b(prev.bias.data().begin(), prev.bias.data().end());
  b.insert(b.end(), fresh.bias.data().begin(), fresh.bias.data().end());
  ModelState::Conv conv{Tensor({dim, hidden, 1, 1}, std::move(w), true), Tensor({dim}, std::move(b), true)};
  model.heads.push_back({HeadSpec{k, dim, owned}, conv});
  model.classes.push_back({owned, class_name, false});
  return k;
}

Tensor backbone_forward(const ModelState& model, const Tensor& images) {
  const std::size_t rank = images.rank();
  if ((rank != 3 && rank != 4) || images.dim(rank - 3) != model.backbone_config.input_channels) {
    throw ShapeError("backbone_forward: expected (" + std::to_string(model.backbone_config.input_channels) +
                     ",H,W) input, got " + shape_string(images.shape()));
  }
  if (images.dim(rank - 2) < 8 || images.dim(rank - 1) < 8) {
    throw ShapeError("backbone_forward: spatial dims must be >= 8, got " + shape_string(images.shape()));
  }
  Tensor x = images;
  for (const auto& c : model.backbone) x = ops::relu(ops::conv2d(x, c.weight, c.bias));
  return x;
}

Tensor head_forward(const ModelState& model, std::size_t head_index, const Tensor& backbone_features) {
  const auto& h = model.head(head_index);
  return ops::conv2d(backbone_features, h.conv.weight, h.conv.bias);
}

Tensor forward_features(const ModelState& model, std::size_t head_index, const Tensor& image) {
  model.head(head_index);
  NoGradGuard guard;
  return head_forward(model, head_index, backbone_forward(model, image));
}

Tensor stack_images(const std::vector<const SceneSample*>& samples, const std::vector<bool>& flip) {
  if (samples.empty()) throw Error("stack_images: empty batch");
  const std::size_t h = samples[0]->pixels.height, w = samples[0]->pixels.width;
  std::vector<float> v(samples.size() * 3 * h * w);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& px = samples[b]->pixels;
    if (px.height != h || px.width != w) throw ShapeError("stack_images", Shape{h, w}, Shape{px.height, px.width});
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t sx = flip[b] ? w - 1 - x : x;
          v[((b * 3 + c) * h + y) * w + x] = float(px.rgb[3 * (y * w + sx) + c]) / 255.0f;
        }
      }
    }
  }
  return Tensor({samples.size(), 3, h, w}, std::move(v));
}

std::vector<ClassId> stack_labels(const std::vector<const SceneSample*>& samples, const std::vector<bool>& flip) {
  std::vector<ClassId> out;
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& l = samples[b]->label;
    for (std::size_t y = 0; y < l.height; ++y) {
      for (std::size_t x = 0; x < l.width; ++x) out.push_back(l.at(y, flip[b] ? l.width - 1 - x : x));
    }
  }
  return out;
}

TrainingLog train_closed_set(ModelState& model, const std::vector<SceneSample>& data, const TrainHyper& hyper) {
  hyper.validate();
  if (data.empty()) throw Error("train: empty training set");
  for (const auto& s : data) {
    for (auto id : s.label.values) {
      if (id != kIgnoreId && id >= model.n_classes) {
        throw Error("train: label id " + std::to_string(id) + " in scene " + std::to_string(s.index) +
                    " is not an in-distribution class (N = " + std::to_string(model.n_classes) + ")");
      }
    }
  }
  const auto protos = model.prototypes(0);
  std::vector<Tensor> params = model.backbone_parameters();
  for (auto& t : model.head_parameters(0)) params.push_back(t);
  Sgd opt(params, hyper.sgd);
  Rng rng(splitmix64(hyper.seed ^ 0x747261696eull));

  TrainingLog log;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (std::size_t it = 0; it < hyper.iterations; ++it) {
    std::vector<const SceneSample*> batch;
    std::vector<bool> flip;
    for (std::size_t b = 0; b < hyper.batch_size; ++b) {
      if (cursor == order.size()) {
        order = rng.permutation(data.size());
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
      flip.push_back(hyper.hflip && rng.chance(0.5));
    }
    const Tensor images = stack_images(batch, flip);
    const auto labels = stack_labels(batch, flip);
    opt.set_learning_rate(float(hyper.learning_rate_at(it)));
    opt.zero_grad();
    const Tensor feats = head_forward(model, 0, backbone_forward(model, images));
    const Tensor loss = hybrid_loss(feats, labels, protos, hyper.loss);
    loss.backward();
    opt.step();
    log.losses.push_back(loss.item());
  }
  model.log.losses.insert(model.log.losses.end(), log.losses.begin(), log.losses.end());
  model.hyper = hyper;
  return log;
}

std::uint64_t tensor_digest(const Tensor& t) { return fnv1a(encode_dmlt(t)); }

CheckpointFiles serialize_checkpoint(const ModelState& model) {
  CheckpointFiles files;
  for (std::size_t i = 0; i < model.backbone.size(); ++i) {
    files["backbone." + std::to_string(i) + ".w"] = encode_dmlt(model.backbone[i].weight);
    files["backbone." + std::to_string(i) + ".b"] = encode_dmlt(model.backbone[i].bias);
  }
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : model.heads) {
    const std::string k = std::to_string(h.spec.head_index);
    files["head." + k + ".w"] = encode_dmlt(h.conv.weight);
    files["head." + k + ".b"] = encode_dmlt(h.conv.bias);
    nlohmann::json spec = {{"head_index", h.spec.head_index}, {"metric_dim", h.spec.metric_dim}};
    spec["owned_class"] = h.spec.owned_class ? nlohmann::json(*h.spec.owned_class) : nlohmann::json(nullptr);
    heads.push_back(spec);
  }
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : model.classes) {
    classes.push_back({{"id", c.id}, {"name", c.name}, {"in_distribution", c.in_distribution}});
  }
  nlohmann::json manifest = {
      {"format", "dml-checkpoint"},
      {"version", kCheckpointVersion},
      {"backbone",
       {{"input_channels", model.backbone_config.input_channels},
        {"hidden_channels", model.backbone_config.hidden_channels},
        {"num_conv_layers", model.backbone_config.num_conv_layers}}},
      {"n_classes", model.n_classes},
      {"T", model.scale},
      {"classes", classes},
      {"heads", heads},
      {"training_log", {{"iterations", model.log.losses.size()}, {"losses", model.log.losses}}},
  };
  manifest["hyperparameters"] = model.hyper ? to_json(*model.hyper) : nlohmann::json(nullptr);
  files["manifest.json"] = manifest.dump(2) + "\n";
  return files;
}

namespace {

const std::string& file_at(const CheckpointFiles& files, const std::string& name, const std::string& source) {
  auto it = files.find(name);
  if (it == files.end()) throw FormatError(source + ": missing " + name);
  return it->second;
}

Tensor param_at(const CheckpointFiles& files, const std::string& name, const std::string& source,
                const Shape& expected) {
  Tensor t = decode_dmlt(file_at(files, name, source), source + "/" + name);
  if (t.shape() != expected) {
    throw FormatError(source + "/" + name + ": shape " + shape_string(t.shape()) + ", expected " +
                      shape_string(expected));
  }
  t.set_requires_grad(true);
  return t;
}

}  // namespace

ModelState deserialize_checkpoint(const CheckpointFiles& files, const std::string& source) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(file_at(files, "manifest.json", source));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + "/manifest.json: " + e.what());
  }
  try {
    if (manifest.at("format") != "dml-checkpoint") throw FormatError(source + ": not a checkpoint manifest");
    const int version = manifest.at("version");
    if (version != kCheckpointVersion) {
      throw FormatError(source + ": checkpoint version " + std::to_string(version) + ", expected " +
                        std::to_string(kCheckpointVersion));
    }
    ModelState m;
    const auto& bb = manifest.at("backbone");
    m.backbone_config = {bb.at("input_channels"), bb.at("hidden_channels"), bb.at("num_conv_layers")};
    m.backbone_config.validate();
    m.n_classes = manifest.at("n_classes");
    m.scale = manifest.at("T");
    const std::size_t hidden = m.backbone_config.hidden_channels;
    std::size_t in = m.backbone_config.input_channels;
    for (std::size_t i = 0; i < m.backbone_config.num_conv_layers; ++i) {
      const std::string p = "backbone." + std::to_string(i);
      m.backbone.push_back({param_at(files, p + ".w", source, {hidden, in, 3, 3}),
                            param_at(files, p + ".b", source, {hidden})});
      in = hidden;
    }
    for (const auto& hj : manifest.at("heads")) {
      HeadSpec spec;
      spec.head_index = hj.at("head_index");
      spec.metric_dim = hj.at("metric_dim");
      if (!hj.at("owned_class").is_null()) spec.owned_class = hj.at("owned_class").get<ClassId>();
      const std::size_t k = m.heads.size();
      if (spec.head_index != k || spec.metric_dim != m.n_classes + k ||
          (k > 0) != spec.owned_class.has_value() || (k > 0 && *spec.owned_class != m.n_classes + k - 1)) {
        throw FormatError(source + ": head " + std::to_string(k) + " violates the head layout");
      }
      const std::string p = "head." + std::to_string(k);
      m.heads.push_back({spec,
                         {param_at(files, p + ".w", source, {spec.metric_dim, hidden, 1, 1}),
                          param_at(files, p + ".b", source, {spec.metric_dim})}});
    }
    if (m.heads.empty()) throw FormatError(source + ": checkpoint has no heads");
    for (const auto& cj : manifest.at("classes")) {
      m.classes.push_back({cj.at("id").get<ClassId>(), cj.at("name"), cj.at("in_distribution")});
    }
    const std::size_t emitted = m.n_classes + m.heads.size() - 1;
    for (std::size_t id = 0; id < emitted; ++id) {
      if (std::none_of(m.classes.begin(), m.classes.end(), [&](const ClassInfo& c) { return c.id == id; })) {
        throw FormatError(source + ": class registry lacks id " + std::to_string(id));
      }
    }
    m.log.losses = manifest.at("training_log").at("losses").get<std::vector<float>>();
    if (!manifest.at("hyperparameters").is_null()) m.hyper = hyper_from_json(manifest.at("hyperparameters"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + "/manifest.json: " + e.what());
  }
}

void save_checkpoint(const ModelState& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, bytes] : serialize_checkpoint(model)) write_file(dir / name, bytes);
}

ModelState load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw FormatError(dir.string() + ": checkpoint directory not found");
  CheckpointFiles files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file()) files[entry.path().filename().string()] = read_file(entry.path());
  }
  return deserialize_checkpoint(files, dir.string());
}

std::uint64_t checkpoint_digest(const ModelState& model) {
  std::uint64_t h = fnv1a("");
  for (const auto& [name, bytes] : serialize_checkpoint(model)) {
    h = fnv1a(name, h);
    h = fnv1a(bytes, h);
  }
  return h;
}

}  // namespace dml
