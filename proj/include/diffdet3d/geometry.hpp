#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace diffdet3d {

template <typename Scalar>
using Point3T = Eigen::Matrix<Scalar, 3, 1>;
using Point3 = Point3T<double>;

/// N x 3 point matrix, one point per row.
template <typename Scalar>
using PointsT = Eigen::Matrix<Scalar, Eigen::Dynamic, 3>;
using PointCloud = PointsT<double>;

using IndexList = std::vector<Eigen::Index>;

/// Axis-aligned 3D box. Orientation is carried for data-model completeness
/// and stays 0 everywhere in this library.
template <typename Scalar>
struct Box3T {
  Point3T<Scalar> center = Point3T<Scalar>::Zero();
  Point3T<Scalar> size = Point3T<Scalar>::Ones();
  Scalar orientation = Scalar(0);
  int class_id = 0;

  Point3T<Scalar> min_corner() const { return center - size / Scalar(2); }
  Point3T<Scalar> max_corner() const { return center + size / Scalar(2); }
  Scalar volume() const { return size.prod(); }
};
using Box3 = Box3T<double>;

template <typename Scalar>
bool is_valid(const Box3T<Scalar>& box) {
  return box.center.allFinite() && box.size.allFinite() &&
         (box.size.array() > Scalar(0)).all() && box.orientation == Scalar(0);
}

template <typename Scalar>
void validate_box(const Box3T<Scalar>& box) {
  if (!is_valid(box)) {
    throw std::invalid_argument("invalid Box3: sizes must be positive and finite, orientation 0");
  }
}

/// Intersection-over-union of two axis-aligned boxes.
template <typename Scalar>
Scalar iou_aabb(const Box3T<Scalar>& a, const Box3T<Scalar>& b) {
  const Point3T<Scalar> lo = a.min_corner().cwiseMax(b.min_corner());
  const Point3T<Scalar> hi = a.max_corner().cwiseMin(b.max_corner());
  const Point3T<Scalar> overlap = (hi - lo).cwiseMax(Scalar(0));
  const Scalar inter = overlap.prod();
  if (inter <= Scalar(0)) return Scalar(0);
  const Scalar va = a.volume();
  const Scalar vb = b.volume();
  const Scalar uni = (std::min(va, vb) + std::max(va, vb)) - inter;
  return std::clamp(inter / uni, Scalar(0), Scalar(1));
}

/// Half-open membership: lo <= p < hi on every axis.
template <typename Scalar, typename Derived>
bool contains(const Box3T<Scalar>& box, const Eigen::MatrixBase<Derived>& p) {
  const Point3T<Scalar> lo = box.min_corner();
  const Point3T<Scalar> hi = box.max_corner();
  for (int k = 0; k < 3; ++k) {
    if (!(p(k) >= lo(k) && p(k) < hi(k))) return false;
  }
  return true;
}

template <typename Derived, typename Scalar>
IndexList points_in_box(const Eigen::MatrixBase<Derived>& points, const Box3T<Scalar>& box) {
  IndexList out;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    if (contains(box, points.row(i).transpose())) out.push_back(i);
  }
  return out;
}

/// Greedy max-min farthest point sampling starting from `start`.
/// Ties go to the lowest index; already selected points are never re-picked.
template <typename Derived>
IndexList farthest_point_sample(const Eigen::MatrixBase<Derived>& points, Eigen::Index k,
                                Eigen::Index start = 0) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = points.rows();
  if (k < 1 || k > n) {
    throw std::invalid_argument("farthest_point_sample: k must be in [1, number of points]");
  }
  if (start < 0 || start >= n) {
    throw std::invalid_argument("farthest_point_sample: start index out of range");
  }
  IndexList selected;
  selected.reserve(static_cast<std::size_t>(k));
  // Selected points are marked with -1 so they never win the argmax.
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> min_d2 =
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Constant(n, std::numeric_limits<Scalar>::infinity());
  Eigen::Index current = start;
  for (Eigen::Index s = 0; s < k; ++s) {
    selected.push_back(current);
    min_d2(current) = Scalar(-1);
    if (s + 1 == k) break;
    const auto dx = points.col(0).array() - points(current, 0);
    const auto dy = points.col(1).array() - points(current, 1);
    const auto dz = points.col(2).array() - points(current, 2);
    min_d2 = min_d2.array().min(dx * dx + dy * dy + dz * dz).matrix();
    min_d2.maxCoeff(&current);
  }
  return selected;
}

/// FPS with a uniformly drawn start index (training-time diversity).
template <typename Derived, typename Rng>
IndexList farthest_point_sample_random_start(const Eigen::MatrixBase<Derived>& points,
                                             Eigen::Index k, Rng& rng) {
  if (points.rows() < 1) throw std::invalid_argument("farthest_point_sample: empty input");
  std::uniform_int_distribution<Eigen::Index> pick(0, points.rows() - 1);
  return farthest_point_sample(points, k, pick(rng));
}

/// Largest distance from any point to its nearest selected point.
template <typename Derived>
typename Derived::Scalar covering_radius(const Eigen::MatrixBase<Derived>& points,
                                         const IndexList& selected) {
  using Scalar = typename Derived::Scalar;
  Scalar worst = Scalar(0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    Scalar nearest = std::numeric_limits<Scalar>::infinity();
    for (const auto j : selected) {
      nearest = std::min(nearest, (points.row(i) - points.row(j)).norm());
    }
    worst = std::max(worst, nearest);
  }
  return worst;
}

/// x_normalized = (x - offset) * scale. Sizes scale by `scale` only.
struct AffineRecord {
  Point3 offset = Point3::Zero();
  double scale = 1.0;

  Point3 apply(const Point3& p) const { return (p - offset) * scale; }
  Point3 invert(const Point3& p) const { return p / scale + offset; }
};

struct NormalizedScene {
  PointCloud cloud;
  std::vector<Box3> boxes;
  AffineRecord transform;
};

/// Translate and uniformly scale so the cloud's bounding box starts at the
/// origin and its longest side has length 1.
NormalizedScene normalize_scene(const PointCloud& cloud, const std::vector<Box3>& boxes);

PointCloud denormalize_points(const PointCloud& cloud, const AffineRecord& record);
std::vector<Box3> denormalize_boxes(const std::vector<Box3>& boxes, const AffineRecord& record);
Box3 transform_box(const Box3& box, const AffineRecord& record);

}  // namespace diffdet3d
