#pragma once

#include "diffdet3d/geometry.hpp"

#include <iosfwd>
#include <map>
#include <optional>
#include <vector>

namespace diffdet3d {

/// A scored box; the class is box.class_id.
struct Detection {
  Box3 box;
  double score = 0.0;
};

using SceneDetections = std::vector<std::vector<Detection>>;
using SceneBoxes = std::vector<std::vector<Box3>>;

/// All-point interpolated average precision for one class. Detections are
/// ranked by descending score (ties by scene, then in-scene index); each is a
/// true positive when its best-IoU same-class gt in the scene reaches the
/// threshold and is still unclaimed. Returns nullopt when the class has no gt.
std::optional<double> average_precision(const SceneDetections& dets, const SceneBoxes& gts,
                                        int class_id, double iou_thresh);

struct MapResult {
  double map = 0.0;
  std::map<int, double> per_class;  // classes with >= 1 gt only
};

/// Unweighted mean of AP over the classes that have ground truth.
MapResult map_at(const SceneDetections& dets, const SceneBoxes& gts, double iou_thresh);

/// Fraction of gts claimed by some detection under the same greedy,
/// score-ordered matching used for AP.
double recall_at(const SceneDetections& dets, const SceneBoxes& gts, double iou_thresh);

struct PseudoLabelQuality {
  double map = 0.0;
  double recall = 0.0;
};

PseudoLabelQuality pseudo_label_quality(const SceneDetections& pls, const SceneBoxes& gts,
                                        double iou_thresh);

/// Greedy class-agnostic NMS; returns kept detections in descending score order.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

/// Per-class AP table CSV: header "class_id,ap_25,ap_50", then a row per
/// class with ground truth, then "mean,<map25>,<map50>".
void write_ap_table_csv(std::ostream& os, const MapResult& at25, const MapResult& at50);

}  // namespace diffdet3d
