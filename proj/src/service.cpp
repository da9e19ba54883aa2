#include "dml/service.hpp"

#include <cstdio>
#include <iostream>

#include <httplib.h>

#include "dml/dmlt.hpp"
#include "dml/pnm.hpp"
#include "dml/util.hpp"

namespace dml {

namespace {

using nlohmann::json;

HttpResult error(int status, const std::string& message) { return {status, {{"error", message}}}; }

json parse_body(const std::string& body) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw FormatError("request body must be a JSON object");
  return j;
}

SceneRef scene_ref(const json& j) {
  SceneRef r;
  r.split = split_from_string(j.at("split").get<std::string>());
  const auto& idx = j.at("index");
  if (!idx.is_number_unsigned()) throw FormatError("scene.index must be a non-negative integer");
  r.index = idx.get<std::size_t>();
  return r;
}

std::string b64_pgm(const GrayImage& g) { return base64_encode(encode_pgm(g)); }

Tensor map_tensor(const ProbMap& m) {
  std::vector<float> v(m.values.begin(), m.values.end());
  return Tensor({m.height, m.width}, std::move(v));
}

// Runs fn and converts schema and domain errors into 400 responses.
template <class Fn>
HttpResult guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    return error(400, std::string("schema: ") + e.what());
  } catch (const Error& e) {
    return error(400, e.what());
  }
}

}  // namespace

Service::Service(RunConfig cfg, Dataset data, ModelState model) : cfg_(std::move(cfg)), data_(std::move(data)) {
  snap_ = make_snapshot(OpenWorldModel(std::move(model)), 1);
}

std::unique_ptr<Service> Service::from_config(const RunConfig& cfg) {
  cfg.validate();
  Dataset data = load_dataset_for(cfg);
  if (!std::filesystem::exists(cfg.checkpoint_dir / "manifest.json")) {
    throw Error("checkpoint not found at " + cfg.checkpoint_dir.string() + " (run train first)");
  }
  return std::make_unique<Service>(cfg, std::move(data), load_checkpoint(cfg.checkpoint_dir));
}

std::shared_ptr<const Snapshot> Service::make_snapshot(OpenWorldModel ow, std::uint64_t version) const {
  const double lambda = resolve_lambda_out(ow, data_.split(Split::Val), cfg_);
  const std::string hash = hex64(checkpoint_digest(ow.model));
  return std::make_shared<const Snapshot>(Snapshot{std::move(ow), hash, version, lambda});
}

std::shared_ptr<const Snapshot> Service::snapshot() const {
  std::lock_guard lock(snap_mu_);
  return snap_;
}

const SceneSample* Service::find_scene(const std::string& split, const std::string& index) const {
  Split s;
  try {
    s = split_from_string(split);
  } catch (const Error&) {
    return nullptr;
  }
  const auto it = data_.splits.find(s);
  if (it == data_.splits.end()) return nullptr;
  if (index.empty() || index.size() > 9 || index.find_first_not_of("0123456789") != std::string::npos) return nullptr;
  const std::size_t i = std::stoul(index);
  for (const auto& sample : it->second) {
    if (sample.index == i) return &sample;
  }
  return nullptr;
}

HttpResult Service::get_state() const {
  const auto snap = snapshot();
  json classes = json::array();
  for (const auto& [id, name] : snap->ow.class_names()) {
    std::string origin = "base";
    for (const auto& r : snap->ow.novel) {
      if (r.id == id) origin = to_string(r.mode);
    }
    classes.push_back({{"id", id}, {"name", name}, {"origin", origin}});
  }
  std::size_t n_annotations = 0;
  {
    std::lock_guard lock(ann_mu_);
    n_annotations = annotations_.size();
  }
  json splits = json::object();
  for (const auto& [s, scenes] : data_.splits) splits[to_string(s)] = scenes.size();
  return {200,
          {{"classes", classes},
           {"checkpoint_hash", snap->checkpoint_hash},
           {"snapshot_version", snap->version},
           {"lambda_out", snap->lambda_out},
           {"anomaly_score", to_string(cfg_.anomaly_score)},
           {"max_shots", cfg_.max_shots},
           {"incremental_in_flight", busy_.load()},
           {"annotations", n_annotations},
           {"splits", splits}}};
}

HttpResult Service::get_scene(const std::string& split, const std::string& index) const {
  const SceneSample* s = find_scene(split, index);
  if (!s) return error(404, "no scene " + split + "/" + index);
  return {200,
          {{"split", to_string(s->split)},
           {"index", s->index},
           {"height", s->label.height},
           {"width", s->label.width},
           {"image_ppm", base64_encode(encode_ppm(s->pixels))},
           {"label_pgm", b64_pgm(s->label)}}};
}

HttpResult Service::post_infer(const std::string& body) const {
  return guarded([&]() -> HttpResult {
    const json j = parse_body(body);
    RgbImage pixels;
    json scene = nullptr;
    if (j.contains("scene")) {
      const SceneRef ref = scene_ref(j.at("scene"));
      const SceneSample* s = find_scene(to_string(ref.split), std::to_string(ref.index));
      if (!s) return error(404, "no scene " + to_string(ref.split) + "/" + std::to_string(ref.index));
      pixels = s->pixels;
      scene = {{"split", to_string(ref.split)}, {"index", ref.index}};
    } else if (j.contains("image_ppm")) {
      pixels = decode_ppm(base64_decode(j.at("image_ppm").get<std::string>()), "image_ppm");
    } else {
      throw FormatError("infer needs either 'scene' or 'image_ppm'");
    }
    AnomalyScore which = cfg_.anomaly_score;
    if (j.contains("score")) which = anomaly_score_from_string(j.at("score").get<std::string>());

    const auto snap = snapshot();
    double lambda = snap->lambda_out;
    if (j.contains("lambda_out")) {
      lambda = j.at("lambda_out").get<double>();
      if (!(lambda >= 0.0 && lambda <= 1.0)) throw FormatError("lambda_out must lie in [0, 1]");
    }
    const Prediction p = predict(snap->ow, to_tensor(pixels), cfg_.mixture(), which, lambda);
    return {200,
            {{"scene", scene},
             {"snapshot_version", snap->version},
             {"checkpoint_hash", snap->checkpoint_hash},
             {"height", pixels.height},
             {"width", pixels.width},
             {"score", to_string(which)},
             {"lambda_out", lambda},
             {"closeset_pgm", b64_pgm(p.closeset)},
             {"eds_pgm", b64_pgm(to_gray(p.maps.eds))},
             {"mmsp_pgm", b64_pgm(to_gray(p.maps.mmsp))},
             {"mixed_pgm", b64_pgm(to_gray(p.maps.mixed))},
             {"openset_pgm", b64_pgm(p.openset)},
             {"anomaly_dmlt", base64_encode(encode_dmlt(map_tensor(p.anomaly)))}}};
  });
}

HttpResult Service::post_annotation(const std::string& body) {
  return guarded([&]() -> HttpResult {
    const json j = parse_body(body);
    Annotation a;
    a.image = scene_ref(j.at("scene"));
    a.class_name = j.at("class_name").get<std::string>();
    if (a.class_name.empty()) throw FormatError("class_name is empty");
    if (j.contains("shot_index")) a.shot_index = j.at("shot_index").get<std::size_t>();
    a.mask = decode_mask_pgm(base64_decode(j.at("mask_pgm").get<std::string>()), "mask_pgm");
    const SceneSample* s = find_scene(to_string(a.image.split), std::to_string(a.image.index));
    if (!s) return error(404, "no scene " + to_string(a.image.split) + "/" + std::to_string(a.image.index));
    validate(a, s->label.height, s->label.width);
    std::lock_guard lock(ann_mu_);
    char id[16];
    std::snprintf(id, sizeof id, "a%04zu", next_annotation_++);
    annotations_.emplace(id, a);
    json out = annotation_json(a);
    out["id"] = id;
    return {201, out};
  });
}

HttpResult Service::get_annotation(const std::string& id) const {
  std::lock_guard lock(ann_mu_);
  const auto it = annotations_.find(id);
  if (it == annotations_.end()) return error(404, "no annotation '" + id + "'");
  json out = annotation_json(it->second);
  out["id"] = id;
  out["mask_pgm"] = base64_encode(encode_mask_pgm(it->second.mask));
  return {200, out};
}

HttpResult Service::post_incremental(const std::string& body) {
  IncrementalMode mode = IncrementalMode::Npm;
  std::string class_name;
  std::vector<Annotation> shots;
  {
    const HttpResult parsed = guarded([&]() -> HttpResult {
      const json j = parse_body(body);
      mode = incremental_mode_from_string(j.at("mode").get<std::string>());
      class_name = j.at("class_name").get<std::string>();
      if (class_name.empty()) throw FormatError("class_name is empty");
      const auto ids = j.at("annotations").get<std::vector<std::string>>();
      if (ids.empty()) throw FormatError("at least one annotation is required");
      std::lock_guard lock(ann_mu_);
      for (const auto& id : ids) {
        const auto it = annotations_.find(id);
        if (it == annotations_.end()) throw FormatError("unknown annotation '" + id + "'");
        if (it->second.class_name != class_name) {
          throw FormatError("annotation '" + id + "' is for class '" + it->second.class_name + "'");
        }
        shots.push_back(it->second);
      }
      return {200, nullptr};
    });
    if (parsed.status != 200) return parsed;
  }

  bool expected = false;
  if (!busy_.compare_exchange_strong(expected, true)) return error(409, "an incremental update is already running");
  struct Release {
    std::atomic<bool>& flag;
    ~Release() { flag.store(false); }
  } release{busy_};

  if (hook_) hook_();
  const auto before = snapshot();
  OpenWorldModel ow = before->ow;
  std::vector<IncrementalShot> inputs;
  const HttpResult applied = guarded([&]() -> HttpResult {
    for (const auto& a : shots) {
      const SceneSample* s = find_scene(to_string(a.image.split), std::to_string(a.image.index));
      if (!s) throw FormatError("annotation refers to a missing scene");
      inputs.push_back({s->image(), a.mask});
    }
    apply_incremental(ow, mode, inputs, class_name, cfg_);
    return {200, nullptr};
  });
  if (applied.status != 200) return applied;

  auto next = make_snapshot(std::move(ow), before->version + 1);
  const NovelClassRecord record = next->ow.novel.back();
  json report = {{"kind", "incremental"},
                 {"record", to_json(record)},
                 {"checkpoint_hash", {{"before", before->checkpoint_hash}, {"after", next->checkpoint_hash}}},
                 {"snapshot_version", next->version},
                 {"lambda_out", next->lambda_out}};
  {
    std::lock_guard lock(snap_mu_);
    snap_ = std::move(next);
  }
  {
    std::lock_guard lock(report_mu_);
    latest_report_ = report;
  }
  return {200, report};
}

HttpResult Service::get_latest_report() const {
  std::lock_guard lock(report_mu_);
  if (!latest_report_) return error(404, "no report yet");
  return {200, *latest_report_};
}

void Service::bind(httplib::Server& server) {
  const auto reply = [](httplib::Response& res, const HttpResult& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Get("/state", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, get_state()); });
  server.Get(R"(/scenes/([^/]+)/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_scene(req.matches[1], req.matches[2]));
  });
  server.Post("/infer", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, post_infer(req.body));
  });
  server.Post("/annotations", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, post_annotation(req.body));
  });
  server.Get(R"(/annotations/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_annotation(req.matches[1]));
  });
  server.Post("/incremental", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, post_incremental(req.body));
  });
  server.Get("/reports/latest", [this, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, get_latest_report());
  });
  server.set_exception_handler([reply](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      reply(res, error(500, e.what()));
    }
  });
}

void serve(Service& service, const std::string& host, int port) {
  httplib::Server server;
  service.bind(server);
  std::cerr << "serving on http://" << host << ":" << port << "\n";
  if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace dml
