#include "diffdet3d/eval.hpp"

#include "diffdet3d/csv.hpp"

#include <algorithm>
#include <ostream>
#include <set>
#include <tuple>

namespace diffdet3d {

namespace {

struct Ranked {
  double score;
  std::size_t scene;
  std::size_t index;
};

struct MatchOutcome {
  std::vector<bool> tp;  // in ranked order
  std::size_t n_gt = 0;
};

MatchOutcome greedy_match(const SceneDetections& dets, const SceneBoxes& gts, int class_id,
                          double iou_thresh) {
  MatchOutcome out;
  std::vector<Ranked> ranked;
  for (std::size_t s = 0; s < dets.size(); ++s) {
    for (std::size_t j = 0; j < dets[s].size(); ++j) {
      if (dets[s][j].box.class_id == class_id) ranked.push_back({dets[s][j].score, s, j});
    }
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.scene, a.index) < std::tie(b.scene, b.index);
  });
  std::vector<std::vector<bool>> claimed(gts.size());
  for (std::size_t s = 0; s < gts.size(); ++s) {
    claimed[s].assign(gts[s].size(), false);
    for (const auto& g : gts[s]) out.n_gt += g.class_id == class_id ? 1 : 0;
  }
  for (const auto& r : ranked) {
    bool tp = false;
    if (r.scene < gts.size()) {
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < gts[r.scene].size(); ++g) {
        if (gts[r.scene][g].class_id != class_id) continue;
        const double iou = iou_aabb(dets[r.scene][r.index].box, gts[r.scene][g]);
        if (iou > best) {
          best = iou;
          best_g = g;
        }
      }
      if (best >= iou_thresh && !claimed[r.scene][best_g]) {
        claimed[r.scene][best_g] = true;
        tp = true;
      }
    }
    out.tp.push_back(tp);
  }
  return out;
}

std::set<int> classes_with_gt(const SceneBoxes& gts) {
  std::set<int> out;
  for (const auto& scene : gts) {
    for (const auto& g : scene) out.insert(g.class_id);
  }
  return out;
}

}  // namespace

std::optional<double> average_precision(const SceneDetections& dets, const SceneBoxes& gts,
                                        int class_id, double iou_thresh) {
  const auto m = greedy_match(dets, gts, class_id, iou_thresh);
  if (m.n_gt == 0) return std::nullopt;
  const std::size_t n = m.tp.size();
  std::vector<double> rec(n + 2, 0.0), prec(n + 2, 0.0);
  double tp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += m.tp[i] ? 1.0 : 0.0;
    rec[i + 1] = tp / static_cast<double>(m.n_gt);
    prec[i + 1] = tp / static_cast<double>(i + 1);
  }
  rec[n + 1] = 1.0;
  prec[n + 1] = 0.0;
  for (std::size_t i = n + 1; i-- > 0;) prec[i] = std::max(prec[i], prec[i + 1]);
  double ap = 0.0;
  for (std::size_t i = 0; i + 1 < rec.size(); ++i) {
    if (rec[i + 1] != rec[i]) ap += (rec[i + 1] - rec[i]) * prec[i + 1];
  }
  return std::clamp(ap, 0.0, 1.0);
}

MapResult map_at(const SceneDetections& dets, const SceneBoxes& gts, double iou_thresh) {
  MapResult out;
  for (const int c : classes_with_gt(gts)) {
    out.per_class[c] = *average_precision(dets, gts, c, iou_thresh);
  }
  if (!out.per_class.empty()) {
    double sum = 0.0;
    for (const auto& [c, ap] : out.per_class) sum += ap;
    out.map = sum / static_cast<double>(out.per_class.size());
  }
  return out;
}

double recall_at(const SceneDetections& dets, const SceneBoxes& gts, double iou_thresh) {
  std::size_t matched = 0, total = 0;
  for (const int c : classes_with_gt(gts)) {
    const auto m = greedy_match(dets, gts, c, iou_thresh);
    total += m.n_gt;
    matched += static_cast<std::size_t>(std::count(m.tp.begin(), m.tp.end(), true));
  }
  return total == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(total);
}

PseudoLabelQuality pseudo_label_quality(const SceneDetections& pls, const SceneBoxes& gts,
                                        double iou_thresh) {
  return {map_at(pls, gts, iou_thresh).map, recall_at(pls, gts, iou_thresh)};
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return iou_aabb(k.box, d.box) > iou_thresh;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

void write_ap_table_csv(std::ostream& os, const MapResult& at25, const MapResult& at50) {
  os << "class_id,ap_25,ap_50\n";
  std::set<int> classes;
  for (const auto& [c, ap] : at25.per_class) classes.insert(c);
  for (const auto& [c, ap] : at50.per_class) classes.insert(c);
  for (const int c : classes) {
    const auto a = at25.per_class.find(c);
    const auto b = at50.per_class.find(c);
    os << c << ',' << format_double(a == at25.per_class.end() ? 0.0 : a->second) << ','
       << format_double(b == at50.per_class.end() ? 0.0 : b->second) << '\n';
  }
  os << "mean," << format_double(at25.map) << ',' << format_double(at50.map) << '\n';
}

}  // namespace diffdet3d
