#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "dml/config.hpp"
#include "dml/pipeline.hpp"

namespace httplib {
class Server;
}

namespace dml {

/// Immutable view served to readers. Replaced wholesale by /incremental.
struct Snapshot {
  OpenWorldModel ow;
  std::string checkpoint_hash;
  std::uint64_t version = 0;
  double lambda_out = 1.0;
};

struct HttpResult {
  int status = 200;
  nlohmann::json body;
};

/// Routes of the annotation/inference service. Handlers are plain member
/// functions so they can be exercised without a socket; bind() wires them
/// into an httplib::Server.
class Service {
 public:
  Service(RunConfig cfg, Dataset data, ModelState model);
  /// Loads the dataset and checkpoint named by the config.
  static std::unique_ptr<Service> from_config(const RunConfig& cfg);

  std::shared_ptr<const Snapshot> snapshot() const;

  HttpResult get_state() const;
  HttpResult get_scene(const std::string& split, const std::string& index) const;
  HttpResult post_infer(const std::string& body) const;
  HttpResult post_annotation(const std::string& body);
  HttpResult get_annotation(const std::string& id) const;
  HttpResult post_incremental(const std::string& body);
  HttpResult get_latest_report() const;

  void bind(httplib::Server& server);

  /// Runs inside the exclusive section of /incremental, before the model is
  /// touched. Tests use it to hold the writer open.
  void set_incremental_hook(std::function<void()> hook) { hook_ = std::move(hook); }

 private:
  std::shared_ptr<const Snapshot> make_snapshot(OpenWorldModel ow, std::uint64_t version) const;
  const SceneSample* find_scene(const std::string& split, const std::string& index) const;

  RunConfig cfg_;
  Dataset data_;

  mutable std::mutex snap_mu_;
  std::shared_ptr<const Snapshot> snap_;

  std::atomic<bool> busy_{false};
  std::function<void()> hook_;

  mutable std::mutex ann_mu_;
  std::map<std::string, Annotation> annotations_;
  std::size_t next_annotation_ = 1;

  mutable std::mutex report_mu_;
  std::optional<nlohmann::json> latest_report_;
};

/// Blocks serving on host:port.
void serve(Service& service, const std::string& host, int port);

}  // namespace dml
