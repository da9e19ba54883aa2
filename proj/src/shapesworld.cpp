#include "dml/shapesworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

#include "dml/util.hpp"

namespace dml {

namespace {

struct Point {
  double x, y;
};

bool inside_polygon(const std::vector<Point>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

struct PlacedShape {
  ShapeKind kind;
  double cx, cy, r;
  std::vector<Point> polygon;  // Triangle and Star only

  bool covers(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    switch (kind) {
      case ShapeKind::Disk:
        return dx * dx + dy * dy <= r * r;
      case ShapeKind::Square:
        return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
      case ShapeKind::Diamond:
        return std::abs(dx) + std::abs(dy) <= r;
      case ShapeKind::Cross: {
        const double arm = 0.38 * r;
        return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
      }
      case ShapeKind::Triangle:
      case ShapeKind::Star:
        return inside_polygon(polygon, x, y);
    }
    return false;
  }
};

PlacedShape place(ShapeKind kind, double cx, double cy, double r, double angle) {
  PlacedShape s{kind, cx, cy, r, {}};
  if (kind == ShapeKind::Triangle) {
    s.polygon = {{cx, cy - r}, {cx - 0.95 * r, cy + 0.8 * r}, {cx + 0.95 * r, cy + 0.8 * r}};
  } else if (kind == ShapeKind::Star) {
    for (int i = 0; i < 10; ++i) {
      const double rad = (i % 2 == 0) ? r : 0.5 * r;
      const double a = angle + i * std::numbers::pi / 5.0;
      s.polygon.push_back({cx + rad * std::cos(a), cy + rad * std::sin(a)});
    }
  }
  return s;
}

std::array<double, 3> sample_color(Rng& rng, const ColorRange& range) {
  std::array<double, 3> c{};
  for (std::size_t i = 0; i < 3; ++i) c[i] = rng.uniform(range.lo[i], range.hi[i]);
  return c;
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

ColorRange range(std::array<float, 3> lo, std::array<float, 3> hi) { return {lo, hi}; }

nlohmann::json to_json(const ColorRange& c) { return {{"lo", c.lo}, {"hi", c.hi}}; }
ColorRange color_from_json(const nlohmann::json& j) {
  return {j.at("lo").get<std::array<float, 3>>(), j.at("hi").get<std::array<float, 3>>()};
}

nlohmann::json to_json(const ClassDescriptor& d) {
  return {{"name", d.name}, {"kind", to_string(d.kind)}, {"color", to_json(d.color)},
          {"min_radius", d.min_radius}, {"max_radius", d.max_radius}};
}
ClassDescriptor descriptor_from_json(const nlohmann::json& j) {
  return {j.at("name").get<std::string>(), shape_kind_from_string(j.at("kind").get<std::string>()),
          color_from_json(j.at("color")), j.at("min_radius").get<float>(), j.at("max_radius").get<float>()};
}

}  // namespace

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Disk: return "disk";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Diamond: return "diamond";
    case ShapeKind::Star: return "star";
    case ShapeKind::Cross: return "cross";
  }
  return "?";
}

ShapeKind shape_kind_from_string(const std::string& name) {
  for (auto k : {ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Diamond, ShapeKind::Star,
                 ShapeKind::Cross}) {
    if (to_string(k) == name) return k;
  }
  throw FormatError("unknown shape kind '" + name + "'");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::TestOod: return "test_ood";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test_ood" || name == "test-ood") return Split::TestOod;
  throw Error("unknown split '" + name + "'");
}

WorldSpec WorldSpec::defaults() {
  WorldSpec s;
  s.background = range({0.38f, 0.36f, 0.30f}, {0.55f, 0.52f, 0.45f});
  s.in_dist = {
      {"disk", ShapeKind::Disk, range({0.75f, 0.05f, 0.05f}, {0.95f, 0.25f, 0.20f}), 4.0f, 7.0f},
      {"square", ShapeKind::Square, range({0.05f, 0.60f, 0.05f}, {0.25f, 0.85f, 0.25f}), 4.0f, 7.0f},
      {"triangle", ShapeKind::Triangle, range({0.05f, 0.10f, 0.70f}, {0.25f, 0.30f, 0.95f}), 5.0f, 8.0f},
      {"diamond", ShapeKind::Diamond, range({0.02f, 0.02f, 0.02f}, {0.15f, 0.15f, 0.15f}), 5.0f, 8.0f},
  };
  s.ood = {
      {"star", ShapeKind::Star, range({0.85f, 0.80f, 0.05f}, {1.00f, 0.95f, 0.20f}), 6.0f, 9.0f},
      {"cross", ShapeKind::Cross, range({0.05f, 0.80f, 0.80f}, {0.20f, 0.95f, 0.95f}), 5.0f, 8.0f},
  };
  return s;
}

std::vector<ClassId> WorldSpec::ood_ids() const {
  std::vector<ClassId> ids;
  for (std::size_t i = 0; i < ood.size(); ++i) ids.push_back(static_cast<ClassId>(in_dist_count() + i));
  return ids;
}

std::string WorldSpec::class_name(ClassId id) const {
  if (id == 0) return "background";
  if (id < in_dist_count()) return in_dist[id - 1].name;
  if (id < in_dist_count() + ood.size()) return ood[id - in_dist_count()].name;
  throw Error("class id " + std::to_string(id) + " is not registered");
}

std::map<ClassId, std::string> WorldSpec::class_names() const {
  std::map<ClassId, std::string> out;
  for (std::size_t id = 0; id < in_dist_count() + ood.size(); ++id) out[ClassId(id)] = class_name(ClassId(id));
  return out;
}

void WorldSpec::validate() const {
  if (height < 16 || width < 16) throw Error("world: image size must be at least 16x16");
  if (in_dist.empty()) throw Error("world: need at least one in-distribution shape class");
  if (in_dist_count() + ood.size() >= kAnomalyId) throw Error("world: too many classes");
  if (min_shapes > max_shapes) throw Error("world: min_shapes exceeds max_shapes");
  std::set<std::pair<std::string, std::string>> seen;
  std::set<std::string> names{"background"};
  auto check = [&](const ClassDescriptor& d) {
    if (!(d.min_radius > 0.0f && d.min_radius <= d.max_radius)) throw Error("world: bad radius range for " + d.name);
    const std::string color = to_json(d.color).dump();
    if (!seen.insert({to_string(d.kind), color}).second) {
      throw Error("world: classes must be distinguishable, duplicate kind+color for " + d.name);
    }
    if (!names.insert(d.name).second) throw Error("world: duplicate class name " + d.name);
  };
  for (const auto& d : in_dist) check(d);
  for (const auto& d : ood) check(d);
}

nlohmann::json to_json(const WorldSpec& spec) {
  nlohmann::json in = nlohmann::json::array(), out = nlohmann::json::array();
  for (const auto& d : spec.in_dist) in.push_back(to_json(d));
  for (const auto& d : spec.ood) out.push_back(to_json(d));
  return {{"height", spec.height}, {"width", spec.width}, {"background", to_json(spec.background)},
          {"in_dist", in}, {"ood", out}, {"min_shapes", spec.min_shapes}, {"max_shapes", spec.max_shapes},
          {"noise", spec.noise}, {"train_ood_rate", spec.train_ood_rate}, {"seed", spec.seed}};
}

WorldSpec world_spec_from_json(const nlohmann::json& j) {
  WorldSpec s;
  s.height = j.at("height");
  s.width = j.at("width");
  s.background = color_from_json(j.at("background"));
  for (const auto& d : j.at("in_dist")) s.in_dist.push_back(descriptor_from_json(d));
  for (const auto& d : j.at("ood")) s.ood.push_back(descriptor_from_json(d));
  s.min_shapes = j.at("min_shapes");
  s.max_shapes = j.at("max_shapes");
  s.noise = j.at("noise");
  s.train_ood_rate = j.at("train_ood_rate");
  s.seed = j.at("seed");
  return s;
}

SceneSample generate_scene(const WorldSpec& spec, Split split, std::size_t index) {
  const std::uint64_t seed =
      splitmix64(splitmix64(spec.seed ^ (0x5157ull * (static_cast<std::uint64_t>(split) + 1))) + index);
  Rng rng(seed);
  const std::size_t h = spec.height, w = spec.width;
  std::vector<double> color(3 * h * w);
  SegMap label(h, w, 0);

  // Background: base colour modulated by an oblique sinusoidal texture.
  const auto base = sample_color(rng, spec.background);
  const double fx = rng.uniform(0.3, 0.9), fy = rng.uniform(0.3, 0.9), phase = rng.uniform(0.0, 6.283);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double t = 0.07 * std::sin(fx * double(x) + fy * double(y) + phase);
      for (std::size_t c = 0; c < 3; ++c) color[3 * (y * w + x) + c] = base[c] + t;
    }
  }

  struct Draw {
    const ClassDescriptor* desc;
    ClassId id;
    bool ood;
  };
  std::vector<Draw> draws;
  const std::size_t count = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = rng.below(spec.in_dist.size());
    draws.push_back({&spec.in_dist[c], ClassId(c + 1), false});
  }
  const bool want_ood = !spec.ood.empty() &&
                        (split == Split::TestOod || (spec.train_ood_rate > 0.0f && rng.chance(spec.train_ood_rate)));
  if (want_ood) {
    const std::size_t extra = (split == Split::TestOod && rng.chance(0.25)) ? 2 : 1;
    for (std::size_t i = 0; i < extra; ++i) {
      const std::size_t c = rng.below(spec.ood.size());
      draws.push_back({&spec.ood[c], static_cast<ClassId>(spec.in_dist_count() + c), true});
    }
  }

  // Held-out shapes are painted last so they are never fully occluded.
  for (const auto& d : draws) {
    const double r = rng.uniform(d.desc->min_radius, d.desc->max_radius);
    const double margin = d.ood ? r : 0.5 * r;
    const double cx = rng.uniform(margin, double(w) - margin);
    const double cy = rng.uniform(margin, double(h) - margin);
    const PlacedShape shape = place(d.desc->kind, cx, cy, r, rng.uniform(0.0, 6.283));
    const auto fill = sample_color(rng, d.desc->color);
    const ClassId id = (d.ood && split != Split::TestOod) ? kIgnoreId : d.id;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (!shape.covers(double(x) + 0.5, double(y) + 0.5)) continue;
        for (std::size_t c = 0; c < 3; ++c) color[3 * (y * w + x) + c] = fill[c];
        label.at(y, x) = id;
      }
    }
  }

  SceneSample s;
  s.pixels = RgbImage{h, w, std::vector<std::uint8_t>(3 * h * w)};
  for (std::size_t i = 0; i < color.size(); ++i) {
    s.pixels.rgb[i] = quantize(color[i] + rng.uniform(-spec.noise, spec.noise));
  }
  s.label = std::move(label);
  s.seed = seed;
  s.split = split;
  s.index = index;
  return s;
}

std::vector<SceneSample> generate(const WorldSpec& spec, Split split, std::size_t count) {
  spec.validate();
  std::vector<SceneSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(spec, split, i));
  return out;
}

const std::vector<SceneSample>& Dataset::split(Split s) const {
  auto it = splits.find(s);
  if (it == splits.end()) throw Error("dataset has no " + to_string(s) + " split");
  return it->second;
}

Dataset generate_dataset(const WorldSpec& spec, std::size_t train, std::size_t val, std::size_t test_ood) {
  Dataset d{spec, {}};
  d.splits[Split::Train] = generate(spec, Split::Train, train);
  d.splits[Split::Val] = generate(spec, Split::Val, val);
  d.splits[Split::TestOod] = generate(spec, Split::TestOod, test_ood);
  return d;
}

namespace {

std::string numbered(const char* prefix, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05zu.%s", prefix, i, ext);
  return buf;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& [id, name] : data.spec.class_names()) {
    classes.push_back({{"id", id}, {"name", name}, {"in_distribution", id < data.spec.in_dist_count()}});
  }
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& [split, samples] : data.splits) {
    const std::string name = to_string(split);
    fs::create_directories(dir / name);
    nlohmann::json files = nlohmann::json::array();
    for (const auto& s : samples) {
      const std::string img = name + "/" + numbered("img", s.index, "ppm");
      const std::string lbl = name + "/" + numbered("lbl", s.index, "pgm");
      write_ppm(dir / img, s.pixels);
      write_pgm(dir / lbl, s.label);
      files.push_back({{"index", s.index}, {"image", img}, {"label", lbl}, {"seed", s.seed}});
    }
    splits[name] = {{"count", samples.size()}, {"files", files}};
  }
  const nlohmann::json manifest = {{"format", "shapesworld"}, {"version", 1}, {"world", to_json(data.spec)},
                                   {"classes", classes}, {"splits", splits}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format") != "shapesworld" || manifest.at("version") != 1) {
      throw FormatError(manifest_path.string() + ": unsupported dataset format or version");
    }
    Dataset d{world_spec_from_json(manifest.at("world")), {}};
    for (const auto& [name, entry] : manifest.at("splits").items()) {
      const Split split = split_from_string(name);
      auto& samples = d.splits[split];
      for (const auto& f : entry.at("files")) {
        SceneSample s;
        s.pixels = read_ppm(dir / f.at("image").get<std::string>());
        s.label = read_pgm(dir / f.at("label").get<std::string>());
        if (s.label.height != s.pixels.height || s.label.width != s.pixels.width) {
          throw FormatError(f.at("label").get<std::string>() + ": label size differs from image");
        }
        s.seed = f.at("seed");
        s.index = f.at("index");
        s.split = split;
        samples.push_back(std::move(s));
      }
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
}

void validate(const Annotation& a, std::size_t height, std::size_t width) {
  if (a.mask.height != height || a.mask.width != width) {
    throw ShapeError("annotation mask", Shape{a.mask.height, a.mask.width}, Shape{height, width});
  }
  for (auto v : a.mask.values) {
    if (v > 1) throw Error("annotation mask must be strictly binary");
  }
}

std::vector<Annotation> oracle_annotate(const std::vector<SceneSample>& samples, ClassId novel_id,
                                        std::size_t shots, const std::string& class_name) {
  if (shots == 0) throw Error("oracle_annotate: at least one shot is required");
  std::vector<Annotation> out;
  std::size_t eligible = 0;
  for (const auto& s : samples) {
    if (std::find(s.label.values.begin(), s.label.values.end(), novel_id) == s.label.values.end()) continue;
    ++eligible;
    if (out.size() == shots) continue;
    Annotation a;
    a.image = {s.split, s.index};
    a.mask = BinaryMask(s.label.height, s.label.width);
    for (std::size_t p = 0; p < a.mask.size(); ++p) a.mask.values[p] = s.label.values[p] == novel_id ? 1 : 0;
    a.class_name = class_name;
    a.shot_index = out.size();
    out.push_back(std::move(a));
  }
  if (eligible == 0) {
    throw Error("oracle_annotate: class " + std::to_string(novel_id) + " is absent from all samples");
  }
  if (out.size() < shots) {
    throw Error("oracle_annotate: requested " + std::to_string(shots) + " shots but only " +
                std::to_string(eligible) + " scenes contain class " + std::to_string(novel_id));
  }
  return out;
}

}  // namespace dml
