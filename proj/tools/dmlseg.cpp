// dmlseg: command-line driver for data generation, training, evaluation,
// incremental learning and the HTTP service.
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dml/config.hpp"
#include "dml/pipeline.hpp"
#include "dml/service.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

int fail(int code, const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", message}, {"kind", kind}}.dump() << "\n";
  return code;
}

int env_port() {
  const char* p = std::getenv("PORT");
  if (!p || !*p) return 8080;
  const std::string s(p);
  if (s.find_first_not_of("0123456789") != std::string::npos || s.size() > 5 || std::stoi(s) > 65535) {
    throw dml::ConfigError("PORT must be an integer in [0, 65535], got '" + s + "'");
  }
  return std::stoi(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-world segmentation by deep metric learning on a synthetic shapes world"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "key = value config file, applied before --key flags");
  std::map<std::string, std::string> overrides;
  for (const auto& key : dml::RunConfig::keys()) {
    app.add_option_function<std::string>(
        "--" + key, [&overrides, key](const std::string& v) { overrides[key] = v; }, dml::RunConfig::describe(key))
        ->take_last();
  }

  auto* gen = app.add_subcommand("gen-data", "generate the train/val/test_ood dataset");
  auto* train = app.add_subcommand("train", "train the base model on in-distribution classes");
  auto* eval_closed = app.add_subcommand("eval-closed", "close-set IoU on val");
  auto* eval_anomaly = app.add_subcommand("eval-anomaly", "AUROC/AUPR/FPR95 of EDS, MMSP and the mixture");
  std::string scores_path;
  eval_anomaly->add_option("--scores", scores_path, "JSON {scores, labels} list to score instead of the model");
  auto* infer = app.add_subcommand("infer-open", "open-set maps for test_ood");
  auto* incremental = app.add_subcommand("incremental", "absorb one held-out class from few shots");
  std::string annotations_path;
  incremental->add_option("--annotations", annotations_path, "directory of shot_* annotations (default: oracle)");
  auto* loop = app.add_subcommand("loop", "gen-data, train, evaluate, annotate and learn in one run");
  auto* sweep = app.add_subcommand("sweep", "repeat the evaluation for several values of one key");
  std::string sweep_param;
  std::vector<std::string> sweep_values;
  sweep->add_option("--param", sweep_param, "config key to vary")->required();
  sweep->add_option("--values", sweep_values, "comma-separated values")->required()->delimiter(',');
  auto* serve = app.add_subcommand("serve", "HTTP service (port from $PORT, default 8080)");
  std::string host = "127.0.0.1";
  serve->add_option("--host", host, "bind address");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return kExitUsage;
  }

  dml::RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = dml::RunConfig::load(config_path);
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    cfg.validate();
  } catch (const dml::ConfigError& e) {
    return fail(kExitUsage, "config", e.what());
  } catch (const dml::Error& e) {
    return fail(kExitUsage, "config", e.what());
  }

  try {
    std::string name;
    nlohmann::json report;
    if (gen->parsed()) {
      name = "gen-data";
      report = dml::cmd_gen_data(cfg);
    } else if (train->parsed()) {
      name = "train";
      report = dml::cmd_train(cfg);
    } else if (eval_closed->parsed()) {
      name = "eval-closed";
      report = dml::cmd_eval_closed(cfg);
    } else if (eval_anomaly->parsed()) {
      name = "eval-anomaly";
      std::optional<std::filesystem::path> scores;
      if (!scores_path.empty()) scores = scores_path;
      report = dml::cmd_eval_anomaly(cfg, scores);
    } else if (infer->parsed()) {
      name = "infer-open";
      report = dml::cmd_infer_open(cfg);
    } else if (incremental->parsed()) {
      name = "incremental";
      std::optional<std::filesystem::path> ann;
      if (!annotations_path.empty()) ann = annotations_path;
      report = dml::cmd_incremental(cfg, ann);
    } else if (loop->parsed()) {
      name = "loop";
      report = dml::cmd_loop(cfg);
    } else if (sweep->parsed()) {
      name = "sweep";
      report = dml::cmd_sweep(cfg, sweep_param, sweep_values);
    } else if (serve->parsed()) {
      const int port = env_port();
      auto service = dml::Service::from_config(cfg);
      dml::serve(*service, host, port);
      return 0;
    }
    std::cout << (cfg.out_dir / (name + ".json")).string() << "\n";
    return 0;
  } catch (const dml::ConfigError& e) {
    return fail(kExitUsage, "config", e.what());
  } catch (const std::exception& e) {
    return fail(kExitRuntime, "runtime", e.what());
  }
}
