#include "dml/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <set>

#include "dml/openset.hpp"
#include "dml/pnm.hpp"
#include "dml/util.hpp"

namespace dml {

OpenWorldModel::OpenWorldModel(ModelState m) : model(std::move(m)), protos(model.prototypes(0)) {}

std::map<ClassId, std::string> OpenWorldModel::class_names() const {
  auto names = model.class_names();
  for (const auto& r : novel) names[r.id] = r.name;
  return names;
}

ProbMap select_score(const AnomalyMaps& maps, AnomalyScore which) {
  switch (which) {
    case AnomalyScore::Eds: return maps.eds;
    case AnomalyScore::Mmsp: return maps.mmsp;
    case AnomalyScore::Mixed: return maps.mixed;
  }
  return maps.mixed;
}

ProbMap round_to_f32(ProbMap map) {
  for (auto& v : map.values) v = double(float(v));
  return map;
}

SegMap compose_openworld(const SegMap& closeset, const ProbMap& anomaly, double lambda_out, std::size_t n_classes) {
  SegMap out = openset_compose(closeset, anomaly, lambda_out);
  for (std::size_t p = 0; p < out.size(); ++p) {
    if (closeset.values[p] >= n_classes) out.values[p] = closeset.values[p];
  }
  return out;
}

Prediction predict(const OpenWorldModel& ow, const Tensor& image, const MixtureConfig& mix, AnomalyScore which,
                   double lambda_out) {
  Prediction p;
  const Tensor f = forward_features(ow.model, 0, image);
  p.maps = anomaly_maps(f, ow.protos, mix);
  p.anomaly = round_to_f32(select_score(p.maps, which));
  if (ow.has_npm()) {
    p.closeset = npm_classify(f, ow.protos, ow.lambda_novel);
  } else if (ow.model.head_count() > 1) {
    p.closeset = plm_inference(ow.model, image);
  } else {
    p.closeset = closeset_map(f, ow.protos);
  }
  p.openset = compose_openworld(p.closeset, p.anomaly, lambda_out, ow.model.n_classes);
  return p;
}

double resolve_lambda_out(const OpenWorldModel& ow, const std::vector<SceneSample>& calibration,
                          const RunConfig& cfg) {
  if (cfg.lambda_out) return *cfg.lambda_out;
  std::vector<ProbMap> maps;
  for (const auto& s : calibration) {
    const Tensor f = forward_features(ow.model, 0, s.image());
    maps.push_back(round_to_f32(select_score(anomaly_maps(f, ow.protos, cfg.mixture()), cfg.anomaly_score)));
  }
  return calibrate_lambda(maps, cfg.target_fpr);
}

NovelClassRecord apply_incremental(OpenWorldModel& ow, IncrementalMode mode, const std::vector<IncrementalShot>& shots,
                                   const std::string& class_name, const RunConfig& cfg) {
  for (const auto& [id, name] : ow.class_names()) {
    if (name == class_name) throw Error("class '" + class_name + "' is already registered");
  }
  if (shots.size() > cfg.max_shots) {
    throw Error("incremental: " + std::to_string(shots.size()) + " shots exceed max_shots = " +
                std::to_string(cfg.max_shots));
  }
  if (!ow.novel.empty() && (ow.novel.front().mode == IncrementalMode::Npm) != (mode == IncrementalMode::Npm)) {
    throw Error("incremental: NPM and head-based modes cannot be mixed in one model");
  }
  NovelClassRecord r;
  switch (mode) {
    case IncrementalMode::Npm:
      r = register_npm_class(ow.model, ow.protos, shots, class_name, cfg.lambda_novel);
      ow.lambda_novel = cfg.lambda_novel;
      break;
    case IncrementalMode::Plm:
      r = train_plm_head(ow.model, shots, class_name, cfg.plm_hyper());
      break;
    case IncrementalMode::Finetune:
      r = finetune_novel(ow.model, shots, class_name, cfg.plm_hyper());
      break;
  }
  ow.novel.push_back(r);
  return r;
}

namespace {

std::vector<ClassId> id_range(std::size_t n) {
  std::vector<ClassId> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(ClassId(i));
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + std::ptrdiff_t(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

IouReport evaluate_closed(const ModelState& model, const std::vector<SceneSample>& scenes) {
  IouAccumulator acc(id_range(model.n_classes), {});
  const auto protos = model.prototypes(0);
  for (const auto& s : scenes) acc.add(closeset_map(forward_features(model, 0, s.image()), protos), s.label);
  return acc.report();
}

AnomalyEvaluation evaluate_anomaly(const ModelState& model, const std::vector<SceneSample>& test_ood,
                                   const WorldSpec& world, const MixtureConfig& mix) {
  const auto protos = model.prototypes(0);
  const auto ood = world.ood_ids();
  ScoredPixels eds, mmsp, mixed;
  std::vector<double> s_ood, s_in;
  for (const auto& s : test_ood) {
    const Tensor f = forward_features(model, 0, s.image());
    const auto maps = anomaly_maps(f, protos, mix);
    eds.append(maps.eds, s.label, ood);
    mmsp.append(maps.mmsp, s.label, ood);
    mixed.append(maps.mixed, s.label, ood);
    const auto sums = eds_sum(f, protos);
    const auto close = closeset_map(f, protos);
    for (std::size_t p = 0; p < sums.size(); ++p) {
      const auto y = s.label.values[p];
      if (std::find(ood.begin(), ood.end(), y) != ood.end()) {
        s_ood.push_back(sums.values[p]);
      } else if (y != kIgnoreId && close.values[p] == y) {
        s_in.push_back(sums.values[p]);
      }
    }
  }
  return {score_anomaly(eds), score_anomaly(mmsp), score_anomaly(mixed), median(s_ood), median(s_in)};
}

nlohmann::json to_json(const AnomalyEvaluation& e) {
  return {{"eds", to_json(e.eds)},
          {"mmsp", to_json(e.mmsp)},
          {"mixed", to_json(e.mixed)},
          {"median_distance_sum", {{"ood", e.median_s_ood}, {"in_distribution_correct", e.median_s_in_correct}}}};
}

IncrementalExperiment run_incremental_experiment(const OpenWorldModel& base, const Dataset& data,
                                                 const RunConfig& cfg,
                                                 const std::optional<std::vector<Annotation>>& given) {
  const auto& world = data.spec;
  const auto& test = data.split(Split::TestOod);
  const auto names = world.class_names();
  std::optional<ClassId> world_id;
  for (const auto& [id, name] : names) {
    if (name == cfg.novel_class && id >= world.in_dist_count()) world_id = id;
  }
  if (!world_id) throw Error("incremental: '" + cfg.novel_class + "' is not a held-out class of the dataset");

  IncrementalExperiment ex(base);
  ex.annotations = given ? *given : oracle_annotate(test, *world_id, cfg.shots, cfg.novel_class);
  std::vector<IncrementalShot> shots;
  for (const auto& a : ex.annotations) {
    const auto& scenes = data.split(a.image.split);
    if (a.image.index >= scenes.size()) throw Error("annotation refers to a missing scene");
    const auto& scene = scenes[a.image.index];
    validate(a, scene.label.height, scene.label.width);
    shots.push_back({scene.image(), a.mask});
    if (a.image.split == Split::TestOod) ex.shot_scenes.push_back(a.image.index);
  }

  const auto frozen = base.model.parameters();
  std::vector<std::uint64_t> frozen_digests;
  for (const auto& t : frozen) frozen_digests.push_back(tensor_digest(t));
  ex.digest_before = hex64(checkpoint_digest(base.model));

  ex.record = apply_incremental(ex.updated, cfg.mode, shots, cfg.novel_class, cfg);

  ex.digest_after = hex64(checkpoint_digest(ex.updated.model));
  const auto now = ex.updated.model.parameters();
  for (std::size_t i = 0; i < frozen.size(); ++i) {
    if (tensor_digest(now[i]) != frozen_digests[i]) ex.frozen_tensors_unchanged = false;
  }

  const std::size_t n = base.model.n_classes;
  std::vector<ClassId> old_ids = id_range(n);
  for (const auto& r : base.novel) old_ids.push_back(r.id);
  const ClassId novel_id = ex.record.id;
  IouAccumulator before(old_ids, {novel_id}), after(old_ids, {novel_id});
  const MixtureConfig mix = cfg.mixture();
  for (const auto& s : test) {
    if (std::find(ex.shot_scenes.begin(), ex.shot_scenes.end(), s.index) != ex.shot_scenes.end()) continue;
    SegMap truth = s.label;
    for (auto& v : truth.values) {
      if (v == *world_id) {
        v = novel_id;
      } else if (v >= world.in_dist_count() && v != kIgnoreId) {
        v = kIgnoreId;
      }
    }
    const Tensor image = s.image();
    before.add(predict(base, image, mix, cfg.anomaly_score, 1.0).closeset, truth);
    after.add(predict(ex.updated, image, mix, cfg.anomaly_score, 1.0).closeset, truth);
  }
  ex.before = before.report();
  ex.after = after.report();

  IouAccumulator vb(old_ids, {}), va(old_ids, {});
  for (const auto& s : data.split(Split::Val)) {
    const Tensor image = s.image();
    vb.add(predict(base, image, mix, cfg.anomaly_score, 1.0).closeset, s.label);
    va.add(predict(ex.updated, image, mix, cfg.anomaly_score, 1.0).closeset, s.label);
  }
  ex.val_before = vb.report();
  ex.val_after = va.report();
  return ex;
}

nlohmann::json to_json(const IncrementalExperiment& e, const std::map<ClassId, std::string>& names) {
  std::vector<std::size_t> shot_scenes = e.shot_scenes;
  nlohmann::json shots = nlohmann::json::array();
  for (const auto& a : e.annotations) shots.push_back(annotation_json(a));
  return {{"record", to_json(e.record)},
          {"shots", shots},
          {"before", to_json(e.before, names)},
          {"after", to_json(e.after, names)},
          {"val_old_classes", {{"before", opt_json(e.val_before.miou_old)}, {"after", opt_json(e.val_after.miou_old)}}},
          {"checkpoint_digest", {{"before", e.digest_before}, {"after", e.digest_after}}},
          {"frozen_tensors_unchanged", e.frozen_tensors_unchanged},
          {"table", format_iou_table({{"before", e.before}, {to_string(e.record.mode), e.after}}, names)}};
}

ModelState train_base_model(const RunConfig& cfg, const Dataset& data) {
  const auto world = data.spec;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < world.in_dist_count(); ++i) names.push_back(world.class_name(ClassId(i)));
  ModelState m = make_model(cfg.backbone(), names, cfg.T, cfg.seed);
  train_closed_set(m, data.split(Split::Train), cfg.train_hyper());
  return m;
}

void write_report(const RunConfig& cfg, const std::string& name, const nlohmann::json& report) {
  std::filesystem::create_directories(cfg.out_dir);
  write_file(cfg.out_dir / (name + ".json"), report.dump(2) + "\n");
}

Dataset load_dataset_for(const RunConfig& cfg) {
  if (!std::filesystem::exists(cfg.data_dir / "manifest.json")) {
    throw Error("dataset not found at " + cfg.data_dir.string() + " (run gen-data first)");
  }
  return read_dataset(cfg.data_dir);
}

namespace {

ModelState load_model_for(const RunConfig& cfg) {
  if (!std::filesystem::exists(cfg.checkpoint_dir / "manifest.json")) {
    throw Error("checkpoint not found at " + cfg.checkpoint_dir.string() + " (run train first)");
  }
  return load_checkpoint(cfg.checkpoint_dir);
}

nlohmann::json with_header(const std::string& command, const RunConfig& cfg, nlohmann::json body) {
  nlohmann::json out = {{"command", command}, {"config", cfg.to_json()}};
  for (auto& [k, v] : body.items()) out[k] = v;
  return out;
}

nlohmann::json dataset_summary(const Dataset& d) {
  nlohmann::json splits = nlohmann::json::object();
  const auto ood = d.spec.ood_ids();
  for (const auto& [split, scenes] : d.splits) {
    std::map<ClassId, std::uint64_t> hist;
    std::size_t with_ood = 0;
    for (const auto& s : scenes) {
      bool has = false;
      for (auto v : s.label.values) {
        ++hist[v];
        has = has || std::find(ood.begin(), ood.end(), v) != ood.end();
      }
      with_ood += has;
    }
    nlohmann::json pixels = nlohmann::json::object();
    for (const auto& [id, count] : hist) pixels[std::to_string(id)] = count;
    splits[to_string(split)] = {{"scenes", scenes.size()}, {"scenes_with_ood", with_ood}, {"pixels", pixels}};
  }
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& [id, name] : d.spec.class_names()) {
    classes.push_back({{"id", id}, {"name", name}, {"in_distribution", id < d.spec.in_dist_count()}});
  }
  return {{"classes", classes}, {"splits", splits}};
}

Dataset generate_for(const RunConfig& cfg) {
  return generate_dataset(cfg.world(), cfg.train_count, cfg.val_count, cfg.test_count);
}

nlohmann::json train_summary(const ModelState& m) {
  const auto& l = m.log.losses;
  double tail = 0.0;
  const std::size_t n = std::min<std::size_t>(50, l.size());
  for (std::size_t i = l.size() - n; i < l.size(); ++i) tail += l[i];
  nlohmann::json trace = nlohmann::json::array();
  for (std::size_t i = 0; i < l.size(); i += 100) trace.push_back({{"iteration", i}, {"loss", l[i]}});
  return {{"iterations", l.size()},
          {"final_loss_mean50", n ? tail / double(n) : 0.0},
          {"loss_trace", trace},
          {"checkpoint_digest", hex64(checkpoint_digest(m))}};
}

nlohmann::json openset_evaluation(const OpenWorldModel& ow, const Dataset& data, const RunConfig& cfg,
                                  double lambda_out, const std::filesystem::path* map_dir) {
  const auto world = data.spec;
  const auto ood = world.ood_ids();
  std::vector<ClassId> known = id_range(ow.model.n_classes);
  IouAccumulator acc(known, {kAnomalyId});
  std::uint64_t ood_px = 0, ood_flag = 0, in_px = 0, in_flag = 0;
  for (const auto& s : data.split(Split::TestOod)) {
    const auto p = predict(ow, s.image(), cfg.mixture(), cfg.anomaly_score, lambda_out);
    SegMap truth = s.label;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const bool is_ood = std::find(ood.begin(), ood.end(), truth.values[i]) != ood.end();
      if (truth.values[i] == kIgnoreId) continue;
      const bool flagged = p.openset.values[i] == kAnomalyId;
      if (is_ood) {
        truth.values[i] = kAnomalyId;
        ++ood_px;
        ood_flag += flagged;
      } else {
        ++in_px;
        in_flag += flagged;
      }
    }
    acc.add(p.openset, truth);
    if (map_dir) {
      char name[64];
      std::snprintf(name, sizeof name, "test_ood_%05zu", s.index);
      write_pgm(*map_dir / (std::string(name) + ".openset.pgm"), p.openset);
      write_pgm(*map_dir / (std::string(name) + ".anomaly.pgm"), to_gray(p.anomaly));
    }
  }
  auto names = ow.class_names();
  names[kAnomalyId] = "anomaly";
  return {{"lambda_out", lambda_out},
          {"lambda_out_policy", cfg.lambda_out ? "explicit" : "auto"},
          {"anomaly_score", to_string(cfg.anomaly_score)},
          {"ood_recall", ood_px ? double(ood_flag) / double(ood_px) : 0.0},
          {"in_distribution_flag_rate", in_px ? double(in_flag) / double(in_px) : 0.0},
          {"iou", to_json(acc.report(), names)}};
}

}  // namespace

nlohmann::json cmd_gen_data(const RunConfig& cfg) {
  cfg.validate();
  const Dataset d = generate_for(cfg);
  write_dataset(cfg.data_dir, d);
  auto report = with_header("gen-data", cfg, dataset_summary(d));
  write_report(cfg, "gen-data", report);
  return report;
}

nlohmann::json cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const Dataset d = load_dataset_for(cfg);
  const ModelState m = train_base_model(cfg, d);
  save_checkpoint(m, cfg.checkpoint_dir);
  auto report = with_header("train", cfg, train_summary(m));
  write_report(cfg, "train", report);
  return report;
}

nlohmann::json cmd_eval_closed(const RunConfig& cfg) {
  cfg.validate();
  const Dataset d = load_dataset_for(cfg);
  const ModelState m = load_model_for(cfg);
  const IouReport r = evaluate_closed(m, d.split(Split::Val));
  auto report = with_header("eval-closed", cfg,
                            {{"split", "val"},
                             {"iou", to_json(r, m.class_names())},
                             {"table", format_iou_table({{"closed-set", r}}, m.class_names())}});
  write_report(cfg, "eval-closed", report);
  return report;
}

nlohmann::json cmd_eval_anomaly(const RunConfig& cfg, const std::optional<std::filesystem::path>& scores_file) {
  cfg.validate();
  nlohmann::json body;
  if (scores_file) {
    ScoredPixels sp;
    try {
      const auto j = nlohmann::json::parse(read_file(*scores_file));
      sp.scores = j.at("scores").get<std::vector<double>>();
      sp.labels = j.at("labels").get<std::vector<std::uint8_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(scores_file->string() + ": " + e.what());
    }
    body = {{"source", scores_file->string()}, {"scores", to_json(score_anomaly(sp))}};
  } else {
    const Dataset d = load_dataset_for(cfg);
    const ModelState m = load_model_for(cfg);
    body = {{"split", "test_ood"}, {"scores", to_json(evaluate_anomaly(m, d.split(Split::TestOod), d.spec, cfg.mixture()))}};
  }
  auto report = with_header("eval-anomaly", cfg, body);
  write_report(cfg, "eval-anomaly", report);
  return report;
}

nlohmann::json cmd_infer_open(const RunConfig& cfg) {
  cfg.validate();
  const Dataset d = load_dataset_for(cfg);
  const OpenWorldModel ow(load_model_for(cfg));
  const double lambda = resolve_lambda_out(ow, d.split(Split::Val), cfg);
  const auto map_dir = cfg.out_dir / "openset";
  std::filesystem::create_directories(map_dir);
  auto report = with_header("infer-open", cfg, openset_evaluation(ow, d, cfg, lambda, &map_dir));
  write_report(cfg, "infer-open", report);
  return report;
}

nlohmann::json cmd_incremental(const RunConfig& cfg, const std::optional<std::filesystem::path>& annotations_dir) {
  cfg.validate();
  const Dataset d = load_dataset_for(cfg);
  const OpenWorldModel base(load_model_for(cfg));
  std::optional<std::vector<Annotation>> given;
  if (annotations_dir) {
    given = read_annotation_set(*annotations_dir);
    if (given->empty()) throw Error(annotations_dir->string() + ": no shot_* annotation directories");
  }
  const auto ex = run_incremental_experiment(base, d, cfg, given);
  if (!annotations_dir) write_annotation_set(cfg.out_dir / "annotations", ex.annotations);
  if (ex.record.mode == IncrementalMode::Npm) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : ex.updated.novel) records.push_back(to_json(r));
    write_file(cfg.out_dir / "novel_classes.json", records.dump(2) + "\n");
  } else {
    save_checkpoint(ex.updated.model, cfg.out_dir / ("checkpoint_" + to_string(ex.record.mode)));
  }
  auto report = with_header("incremental", cfg, to_json(ex, ex.updated.class_names()));
  write_report(cfg, "incremental", report);
  return report;
}

nlohmann::json cmd_loop(const RunConfig& cfg) {
  cfg.validate();
  const Dataset d = generate_for(cfg);
  write_dataset(cfg.data_dir, d);
  std::cerr << "loop: training base model (" << cfg.iterations << " iterations)\n";
  const ModelState m = train_base_model(cfg, d);
  save_checkpoint(m, cfg.checkpoint_dir);
  const OpenWorldModel base(m);
  const IouReport closed = evaluate_closed(m, d.split(Split::Val));
  const auto anomaly = evaluate_anomaly(m, d.split(Split::TestOod), d.spec, cfg.mixture());
  const double lambda = resolve_lambda_out(base, d.split(Split::Val), cfg);
  const auto openset_before = openset_evaluation(base, d, cfg, lambda, nullptr);
  std::cerr << "loop: absorbing '" << cfg.novel_class << "' with " << to_string(cfg.mode) << "\n";
  const auto ex = run_incremental_experiment(base, d, cfg);
  write_annotation_set(cfg.out_dir / "annotations", ex.annotations);
  const auto openset_after = openset_evaluation(ex.updated, d, cfg, lambda, nullptr);
  auto report = with_header("loop", cfg,
                            {{"dataset", dataset_summary(d)},
                             {"train", train_summary(m)},
                             {"closed_set", to_json(closed, m.class_names())},
                             {"anomaly", to_json(anomaly)},
                             {"openset", {{"before", openset_before}, {"after", openset_after}}},
                             {"incremental", to_json(ex, ex.updated.class_names())}});
  write_report(cfg, "loop", report);
  return report;
}

nlohmann::json cmd_sweep(const RunConfig& cfg, const std::string& param, const std::vector<std::string>& values) {
  cfg.validate();
  if (values.empty()) throw ConfigError("sweep: --values must list at least one value");
  static const std::set<std::string> training_keys = {
      "T", "lambda_vl", "lr", "iterations", "batch_size", "momentum", "weight_decay", "lr_schedule",
      "hflip", "hidden_channels", "num_conv_layers", "seed", "train_count", "image_size"};
  {
    RunConfig probe = cfg;
    probe.set(param, values.front());
  }
  const Dataset d = load_dataset_for(cfg);
  const bool retrain = training_keys.count(param) > 0;
  std::optional<ModelState> shared;
  if (!retrain) shared = load_model_for(cfg);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& v : values) {
    RunConfig c = cfg;
    c.set(param, v);
    c.validate();
    Dataset data = d;
    if (param == "seed" || param == "train_count" || param == "image_size") data = generate_for(c);
    if (retrain) std::cerr << "sweep: " << param << " = " << v << ", training\n";
    const ModelState m = retrain ? train_base_model(c, data) : *shared;
    const OpenWorldModel ow(m);
    const IouReport closed = evaluate_closed(m, data.split(Split::Val));
    const auto anomaly = evaluate_anomaly(m, data.split(Split::TestOod), data.spec, c.mixture());
    const auto ex = run_incremental_experiment(ow, data, c);
    rows.push_back({{"value", c.get(param)},
                    {"closed_miou", opt_json(closed.miou)},
                    {"anomaly", to_json(anomaly)},
                    {"incremental",
                     {{"mode", to_string(c.mode)},
                      {"miou_old", opt_json(ex.after.miou_old)},
                      {"miou_novel", opt_json(ex.after.miou_novel)},
                      {"miou_harm", opt_json(ex.after.miou_harm)}}}});
  }
  auto report = with_header("sweep", cfg, {{"param", param}, {"retrained", retrain}, {"rows", rows}});
  write_report(cfg, "sweep", report);
  return report;
}

}  // namespace dml
