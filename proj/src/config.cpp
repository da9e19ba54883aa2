#include "dml/config.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include "dml/pnm.hpp"

namespace dml {

std::string to_string(AnomalyScore s) {
  switch (s) {
    case AnomalyScore::Eds: return "eds";
    case AnomalyScore::Mmsp: return "mmsp";
    case AnomalyScore::Mixed: return "mixed";
  }
  return "?";
}

AnomalyScore anomaly_score_from_string(const std::string& name) {
  if (name == "eds") return AnomalyScore::Eds;
  if (name == "mmsp") return AnomalyScore::Mmsp;
  if (name == "mixed") return AnomalyScore::Mixed;
  throw ConfigError("unknown anomaly score '" + name + "' (expected eds, mmsp or mixed)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  // from_chars for double is missing in older libstdc++; strtod with a full
  // consumption check is equivalent here.
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Entry {
  const char* description;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Entry size_entry(const char* d, T RunConfig::*field) {
  return {d, [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = T(parse_uint(k, v)); },
          [field](const RunConfig& c) { return std::to_string(c.*field); }};
}

Entry double_entry(const char* d, double RunConfig::*field) {
  return {d, [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_double(k, v); },
          [field](const RunConfig& c) { return fmt(c.*field); }};
}

Entry path_entry(const char* d, std::filesystem::path RunConfig::*field) {
  return {d,
          [field](RunConfig& c, const std::string& k, const std::string& v) {
            if (v.empty()) throw ConfigError(k + ": path must not be empty");
            c.*field = v;
          },
          [field](const RunConfig& c) { return (c.*field).string(); }};
}

Entry optional_entry(const char* d, std::optional<double> RunConfig::*field) {
  return {d,
          [field](RunConfig& c, const std::string& k, const std::string& v) {
            c.*field = v == "auto" ? std::nullopt : std::optional<double>(parse_double(k, v));
          },
          [field](const RunConfig& c) { return (c.*field) ? fmt(*(c.*field)) : std::string("auto"); }};
}

const std::map<std::string, Entry>& table() {
  static const std::map<std::string, Entry> t = {
      {"seed", size_entry("master seed for data, initialisation and sampling", &RunConfig::seed)},
      {"data_dir", path_entry("dataset directory", &RunConfig::data_dir)},
      {"checkpoint_dir", path_entry("checkpoint directory", &RunConfig::checkpoint_dir)},
      {"out_dir", path_entry("directory for JSON reports and maps", &RunConfig::out_dir)},
      {"train_count", size_entry("training scenes", &RunConfig::train_count)},
      {"val_count", size_entry("validation scenes", &RunConfig::val_count)},
      {"test_count", size_entry("test_ood scenes", &RunConfig::test_count)},
      {"image_size", size_entry("scene height and width in pixels", &RunConfig::image_size)},
      {"T", double_entry("non-zero prototype element", &RunConfig::T)},
      {"lambda_vl", double_entry("variance loss weight", &RunConfig::lambda_vl)},
      {"beta", double_entry("mixture sigmoid slope", &RunConfig::beta)},
      {"gamma", double_entry("mixture sigmoid centre", &RunConfig::gamma)},
      {"lambda_out", optional_entry("open-set threshold in [0,1] or auto", &RunConfig::lambda_out)},
      {"target_fpr", double_entry("in-distribution flag rate used by lambda_out=auto", &RunConfig::target_fpr)},
      {"anomaly_score",
       {"score used for open-set composition: eds, mmsp or mixed",
        [](RunConfig& c, const std::string&, const std::string& v) { c.anomaly_score = anomaly_score_from_string(v); },
        [](const RunConfig& c) { return to_string(c.anomaly_score); }}},
      {"mode",
       {"incremental mode: npm, plm or ft",
        [](RunConfig& c, const std::string&, const std::string& v) {
          try {
            c.mode = incremental_mode_from_string(v);
          } catch (const Error& e) {
            throw ConfigError(e.what());
          }
        },
        [](const RunConfig& c) { return to_string(c.mode); }}},
      {"novel_class",
       {"name of the held-out class the oracle annotates",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v.empty()) throw ConfigError(k + ": must not be empty");
          c.novel_class = v;
        },
        [](const RunConfig& c) { return c.novel_class; }}},
      {"shots", size_entry("annotated images Q", &RunConfig::shots)},
      {"max_shots", size_entry("upper bound on Q", &RunConfig::max_shots)},
      {"lambda_novel", double_entry("novel prototype distance threshold", &RunConfig::lambda_novel)},
      {"plm_iterations", size_entry("iterations for a new PLM head", &RunConfig::plm_iterations)},
      {"plm_lr", optional_entry("PLM learning rate or auto", &RunConfig::plm_lr)},
      {"iterations", size_entry("closed-set training iterations", &RunConfig::iterations)},
      {"batch_size", size_entry("closed-set batch size", &RunConfig::batch_size)},
      {"lr", double_entry("initial learning rate", &RunConfig::lr)},
      {"momentum", double_entry("SGD momentum", &RunConfig::momentum)},
      {"weight_decay", double_entry("SGD weight decay", &RunConfig::weight_decay)},
      {"lr_schedule",
       {"poly or constant",
        [](RunConfig& c, const std::string&, const std::string& v) {
          try {
            c.lr_schedule = lr_schedule_from_string(v);
          } catch (const Error& e) {
            throw ConfigError(e.what());
          }
        },
        [](const RunConfig& c) { return to_string(c.lr_schedule); }}},
      {"hflip",
       {"random horizontal flips during training",
        [](RunConfig& c, const std::string& k, const std::string& v) { c.hflip = parse_bool(k, v); },
        [](const RunConfig& c) { return std::string(c.hflip ? "true" : "false"); }}},
      {"hidden_channels", size_entry("backbone width", &RunConfig::hidden_channels)},
      {"num_conv_layers", size_entry("backbone depth", &RunConfig::num_conv_layers)},
  };
  return t;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = table().find(key);
  if (it == table().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, trim(value));
}

std::string RunConfig::get(const std::string& key) const {
  const auto it = table().find(key);
  if (it == table().end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(*this);
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, _] : table()) out.push_back(name);
    return out;
  }();
  return k;
}

std::string RunConfig::describe(const std::string& key) {
  const auto it = table().find(key);
  if (it == table().end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.description;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return parse(text, path.string());
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [name, e] : table()) out += name + " = " + e.get(*this) + "\n";
  return out;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, e] : table()) j[name] = e.get(*this);
  return j;
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(image_size >= 16, "image_size must be >= 16");
  need(train_count >= 1 && val_count >= 1 && test_count >= 1, "split counts must be >= 1");
  need(T > 0.0, "T must be > 0");
  need(lambda_vl >= 0.0, "lambda_vl must be >= 0");
  need(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0,1)");
  need(!lambda_out || (*lambda_out >= 0.0 && *lambda_out <= 1.0), "lambda_out must lie in [0,1] or be auto");
  need(target_fpr >= 0.0 && target_fpr < 1.0, "target_fpr must lie in [0,1)");
  need(shots >= 1, "shots must be >= 1");
  need(shots <= max_shots, "shots exceeds max_shots");
  need(lambda_novel >= 0.0, "lambda_novel must be >= 0");
  need(!plm_lr || *plm_lr >= 0.0, "plm_lr must be >= 0");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(lr >= 0.0, "lr must be >= 0");
  need(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0,1)");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(hidden_channels >= 1 && num_conv_layers >= 1, "backbone sizes must be >= 1");
  const auto w = world();
  bool known = false;
  for (const auto& d : w.ood) known = known || d.name == novel_class;
  need(known, "novel_class '" + novel_class + "' is not a held-out class of the world");
}

WorldSpec RunConfig::world() const {
  WorldSpec w = WorldSpec::defaults();
  w.height = w.width = image_size;
  w.seed = seed;
  return w;
}

TrainHyper RunConfig::train_hyper() const {
  TrainHyper h;
  h.iterations = iterations;
  h.batch_size = batch_size;
  h.sgd = {float(lr), float(momentum), float(weight_decay)};
  h.schedule = lr_schedule;
  h.hflip = hflip;
  h.loss.lambda_vl = float(lambda_vl);
  h.seed = seed;
  return h;
}

BackboneConfig RunConfig::backbone() const { return {3, hidden_channels, num_conv_layers}; }

MixtureConfig RunConfig::mixture() const { return {beta, gamma}; }

OpenSetConfig RunConfig::openset() const { return {lambda_out, target_fpr}; }

PlmHyper RunConfig::plm_hyper() const {
  PlmHyper h;
  h.iterations = plm_iterations;
  if (plm_lr) h.learning_rate = float(*plm_lr);
  h.momentum = float(momentum);
  h.weight_decay = float(weight_decay);
  h.loss.lambda_vl = float(lambda_vl);
  h.seed = seed;
  return h;
}

}  // namespace dml
