#include "diffdet3d/geometry.hpp"

namespace diffdet3d {

Box3 transform_box(const Box3& box, const AffineRecord& record) {
  Box3 out = box;
  out.center = record.apply(box.center);
  out.size = box.size * record.scale;
  return out;
}

NormalizedScene normalize_scene(const PointCloud& cloud, const std::vector<Box3>& boxes) {
  if (cloud.rows() < 1) throw std::invalid_argument("normalize_scene: empty cloud");
  if (!cloud.allFinite()) throw std::invalid_argument("normalize_scene: non-finite point");
  const Point3 lo = cloud.colwise().minCoeff().transpose();
  const Point3 hi = cloud.colwise().maxCoeff().transpose();
  const double extent = (hi - lo).maxCoeff();
  if (!(extent > 0.0)) {
    throw std::invalid_argument("normalize_scene: degenerate cloud (all points identical)");
  }
  NormalizedScene out;
  out.transform.offset = lo;
  out.transform.scale = 1.0 / extent;
  out.cloud = (cloud.rowwise() - lo.transpose()) * out.transform.scale;
  out.boxes.reserve(boxes.size());
  for (const auto& b : boxes) out.boxes.push_back(transform_box(b, out.transform));
  return out;
}

PointCloud denormalize_points(const PointCloud& cloud, const AffineRecord& record) {
  PointCloud out = cloud / record.scale;
  out.rowwise() += record.offset.transpose();
  return out;
}

std::vector<Box3> denormalize_boxes(const std::vector<Box3>& boxes, const AffineRecord& record) {
  std::vector<Box3> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) {
    Box3 r = b;
    r.center = record.invert(b.center);
    r.size = b.size / record.scale;
    out.push_back(r);
  }
  return out;
}

}  // namespace diffdet3d
