#include "dml/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>

namespace dml {

namespace {

struct Group {
  std::uint64_t pos = 0;
  std::uint64_t neg = 0;
};

struct Sweep {
  std::vector<Group> groups;  // descending score order
  std::uint64_t pos = 0;
  std::uint64_t neg = 0;
};

Sweep sweep(const ScoredPixels& sp) {
  if (sp.scores.size() != sp.labels.size()) throw Error("metrics: scores and labels differ in length");
  std::vector<std::size_t> order(sp.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sp.scores[a] > sp.scores[b]; });
  Sweep s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto idx = order[i];
    if (sp.labels[idx] > 1) throw Error("metrics: labels must be binary");
    if (i == 0 || sp.scores[idx] != sp.scores[order[i - 1]]) s.groups.emplace_back();
    if (sp.labels[idx]) {
      ++s.groups.back().pos;
      ++s.pos;
    } else {
      ++s.groups.back().neg;
      ++s.neg;
    }
  }
  return s;
}

void require_both(const Sweep& s, const char* op) {
  if (s.pos == 0 || s.neg == 0) {
    throw Error(std::string(op) + ": needs both positive and negative pixels");
  }
}

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double total = 0.0;
  for (double x : v) total += x;
  return total / double(v.size());
}

}  // namespace

void ScoredPixels::append(const ProbMap& map, const SegMap& truth, std::span<const ClassId> ood_ids) {
  require_same_grid("ScoredPixels::append", map, truth);
  for (std::size_t p = 0; p < map.size(); ++p) {
    const auto t = truth.values[p];
    if (t == kIgnoreId) continue;
    scores.push_back(map.values[p]);
    labels.push_back(std::find(ood_ids.begin(), ood_ids.end(), t) != ood_ids.end() ? 1 : 0);
  }
}

double auroc(const ScoredPixels& sp) {
  const Sweep s = sweep(sp);
  require_both(s, "auroc");
  double area = 0.0;
  std::uint64_t pos_above = 0;
  // Each negative collects the positives ranked strictly above it plus half
  // of the tied ones.
  for (const auto& g : s.groups) {
    area += double(g.neg) * (double(pos_above) + 0.5 * double(g.pos));
    pos_above += g.pos;
  }
  return area / (double(s.pos) * double(s.neg));
}

double aupr(const ScoredPixels& sp) {
  const Sweep s = sweep(sp);
  if (s.pos == 0) throw Error("aupr: needs at least one positive pixel");
  double ap = 0.0;
  std::uint64_t tp = 0, fp = 0;
  for (const auto& g : s.groups) {
    tp += g.pos;
    fp += g.neg;
    if (g.pos == 0) continue;
    ap += (double(g.pos) / double(s.pos)) * (double(tp) / double(tp + fp));
  }
  return ap;
}

double fpr_at_95_tpr(const ScoredPixels& sp) {
  const Sweep s = sweep(sp);
  require_both(s, "fpr_at_95_tpr");
  std::uint64_t tp = 0, fp = 0;
  for (const auto& g : s.groups) {
    tp += g.pos;
    fp += g.neg;
    if (tp * 100 >= 95 * s.pos) return double(fp) / double(s.neg);
  }
  return 1.0;  // unreachable: the last group has tp == pos
}

AnomalyScores score_anomaly(const ScoredPixels& sp) { return {auroc(sp), aupr(sp), fpr_at_95_tpr(sp)}; }

double harmonic_mean(double a, double b) {
  if (a + b == 0.0) return 0.0;
  return 2.0 * a * b / (a + b);
}

IouAccumulator::IouAccumulator(std::vector<ClassId> old_ids, std::vector<ClassId> novel_ids)
    : old_ids_(std::move(old_ids)), novel_ids_(std::move(novel_ids)) {
  for (auto id : old_ids_) counts_[id];
  for (auto id : novel_ids_) {
    if (counts_.count(id)) throw Error("iou: class " + std::to_string(id) + " is both old and novel");
    counts_[id];
  }
}

void IouAccumulator::add(const SegMap& pred, const SegMap& truth) {
  require_same_grid("iou_report", pred, truth);
  for (std::size_t p = 0; p < pred.size(); ++p) {
    const auto t = truth.values[p];
    if (t == kIgnoreId) continue;
    const auto y = pred.values[p];
    if (y == t) {
      if (auto it = counts_.find(t); it != counts_.end()) ++it->second.tp;
      continue;
    }
    if (auto it = counts_.find(t); it != counts_.end()) ++it->second.fn;
    if (auto it = counts_.find(y); it != counts_.end()) ++it->second.fp;
  }
}

IouReport IouAccumulator::report() const {
  IouReport r;
  std::vector<double> all, old_v, novel_v;
  for (const auto& [id, c] : counts_) {
    const auto denom = c.tp + c.fp + c.fn;
    if (denom == 0) {
      r.per_class[id] = std::nullopt;
      continue;
    }
    const double iou = double(c.tp) / double(denom);
    r.per_class[id] = iou;
    all.push_back(iou);
    if (std::find(old_ids_.begin(), old_ids_.end(), id) != old_ids_.end()) {
      old_v.push_back(iou);
    } else {
      novel_v.push_back(iou);
    }
  }
  r.miou = mean_of(all);
  r.miou_old = mean_of(old_v);
  r.miou_novel = mean_of(novel_v);
  if (r.miou_old && r.miou_novel) r.miou_harm = harmonic_mean(*r.miou_old, *r.miou_novel);
  return r;
}

IouReport iou_report(const SegMap& pred, const SegMap& truth, std::vector<ClassId> old_ids,
                     std::vector<ClassId> novel_ids) {
  IouAccumulator acc(std::move(old_ids), std::move(novel_ids));
  acc.add(pred, truth);
  return acc.report();
}

nlohmann::json to_json(const AnomalyScores& s) {
  return {{"auroc", s.auroc}, {"aupr", s.aupr}, {"fpr95", s.fpr95}};
}

nlohmann::json to_json(const IouReport& r, const std::map<ClassId, std::string>& names) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json per = nlohmann::json::array();
  for (const auto& [id, iou] : r.per_class) {
    nlohmann::json e = {{"id", id}, {"iou", opt(iou)}};
    if (auto it = names.find(id); it != names.end()) e["name"] = it->second;
    per.push_back(e);
  }
  return {{"per_class", per},
          {"miou", opt(r.miou)},
          {"miou_old", opt(r.miou_old)},
          {"miou_novel", opt(r.miou_novel)},
          {"miou_harm", opt(r.miou_harm)}};
}

std::string format_iou_table(const std::vector<std::pair<std::string, IouReport>>& rows,
                             const std::map<ClassId, std::string>& names) {
  std::set<ClassId> ids;
  for (const auto& [_, r] : rows) {
    for (const auto& [id, __] : r.per_class) ids.insert(id);
  }
  auto header_of = [&](ClassId id) {
    auto it = names.find(id);
    return it != names.end() ? it->second : std::to_string(id);
  };
  std::size_t label_w = 6;
  for (const auto& [name, _] : rows) label_w = std::max(label_w, name.size());
  std::size_t col_w = 10;
  for (auto id : ids) col_w = std::max(col_w, header_of(id).size());
  col_w += 1;

  auto cell = [&](const std::string& s) {
    std::string out(col_w > s.size() ? col_w - s.size() : 1, ' ');
    return out + s;
  };
  auto num = [&](const std::optional<double>& v) {
    if (!v) return cell("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *v);
    return cell(buf);
  };

  std::string out = "method" + std::string(label_w - 6, ' ');
  for (auto id : ids) out += cell(header_of(id));
  out += cell("mIoU") + cell("mIoU_novel") + cell("mIoU_old") + cell("mIoU_harm") + "\n";
  for (const auto& [name, r] : rows) {
    out += name + std::string(label_w - name.size(), ' ');
    for (auto id : ids) {
      auto it = r.per_class.find(id);
      out += it == r.per_class.end() ? cell("-") : num(it->second);
    }
    out += num(r.miou) + num(r.miou_novel) + num(r.miou_old) + num(r.miou_harm) + "\n";
  }
  return out;
}

}  // namespace dml
