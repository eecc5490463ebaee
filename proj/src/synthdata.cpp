#include "diffdet3d/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace diffdet3d {

Eigen::MatrixXd SceneConfig::default_class_sizes() {
  Eigen::MatrixXd m(6, 3);
  m << 0.10, 0.10, 0.10,  //
      0.28, 0.12, 0.10,   //
      0.16, 0.16, 0.30,   //
      0.34, 0.22, 0.08,   //
      0.20, 0.20, 0.18,   //
      0.12, 0.30, 0.22;
  return m;
}

void SceneConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("SceneConfig." + key + ": " + why);
  };
  if (n_points < 16) fail("n_points", "must be >= 16");
  if (n_classes < 2) fail("n_classes", "must be >= 2");
  if (min_objects < 1) fail("min_objects", "must be >= 1");
  if (max_objects < min_objects) fail("max_objects", "must be >= min_objects");
  if (class_size_means.rows() != n_classes || class_size_means.cols() != 3) {
    fail("class_size_means", "must be n_classes x 3");
  }
  if (!(class_size_means.array() > 0.0).all() || !(class_size_means.array() < 1.0).all()) {
    fail("class_size_means", "entries must lie in (0, 1)");
  }
  for (int a = 0; a < n_classes; ++a) {
    for (int b = a + 1; b < n_classes; ++b) {
      if ((class_size_means.row(a) - class_size_means.row(b)).norm() < 1e-6) {
        fail("class_size_means", "classes " + std::to_string(a) + " and " + std::to_string(b) +
                                     " share a mean size");
      }
    }
  }
  if (!(size_jitter >= 0.0 && size_jitter < 1.0)) fail("size_jitter", "must be in [0, 1)");
  if (!(surface_noise >= 0.0)) fail("surface_noise", "must be >= 0");
  if (!(clutter_fraction >= 0.0 && clutter_fraction < 1.0)) fail("clutter_fraction", "must be in [0, 1)");
  if (!(min_gap >= 0.0)) fail("min_gap", "must be >= 0");
  if (max_placement_attempts < 1) fail("max_placement_attempts", "must be >= 1");
  if (max_layout_attempts < 1) fail("max_layout_attempts", "must be >= 1");
}

namespace {

struct Face {
  int normal_axis;
  double side;  // -1 or +1
  double area;
};

// Point on the surface of `box` (bottom face excluded: objects rest on the floor).
Point3 sample_surface(const Box3& box, std::mt19937_64& rng) {
  const Point3& s = box.size;
  const std::array<Face, 5> faces = {{
      {0, -1.0, s(1) * s(2)},
      {0, +1.0, s(1) * s(2)},
      {1, -1.0, s(0) * s(2)},
      {1, +1.0, s(0) * s(2)},
      {2, +1.0, s(0) * s(1)},
  }};
  double total = 0.0;
  for (const auto& f : faces) total += f.area;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double pick = u01(rng) * total;
  std::size_t fi = 0;
  while (fi + 1 < faces.size() && pick >= faces[fi].area) {
    pick -= faces[fi].area;
    ++fi;
  }
  const auto& f = faces[fi];
  Point3 p;
  for (int k = 0; k < 3; ++k) {
    p(k) = k == f.normal_axis ? box.center(k) + f.side * s(k) / 2.0
                              : box.center(k) + (u01(rng) - 0.5) * s(k);
  }
  return p;
}

double surface_area_without_floor(const Box3& b) {
  const Point3& s = b.size;
  return 2.0 * (s(1) * s(2) + s(0) * s(2)) + s(0) * s(1);
}

bool separated_xy(const Box3& a, const Box3& b, double gap) {
  for (int k = 0; k < 2; ++k) {
    if (std::abs(a.center(k) - b.center(k)) >= (a.size(k) + b.size(k)) / 2.0 + gap) return true;
  }
  return false;
}

}  // namespace

Scene generate_scene(const SceneConfig& config, std::uint64_t seed) {
  config.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32), 0x5ce7e5u};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> n_obj_dist(config.min_objects, config.max_objects);
  std::uniform_int_distribution<int> class_dist(0, config.n_classes - 1);

  const int n_objects = n_obj_dist(rng);
  std::vector<Box3> boxes;
  for (int layout = 0; layout < config.max_layout_attempts && static_cast<int>(boxes.size()) < n_objects;
       ++layout) {
    boxes.clear();
    for (int o = 0; o < n_objects; ++o) {
      Box3 box;
      box.class_id = class_dist(rng);
      for (int k = 0; k < 3; ++k) {
        box.size(k) = config.class_size_means(box.class_id, k) *
                      (1.0 + config.size_jitter * (2.0 * u01(rng) - 1.0));
      }
      bool placed = false;
      for (int attempt = 0; attempt < config.max_placement_attempts && !placed; ++attempt) {
        for (int k = 0; k < 2; ++k) {
          box.center(k) = box.size(k) / 2.0 + u01(rng) * (1.0 - box.size(k));
        }
        box.center(2) = box.size(2) / 2.0;
        placed = std::all_of(boxes.begin(), boxes.end(),
                             [&](const Box3& other) { return separated_xy(box, other, config.min_gap); });
      }
      if (!placed) break;
      boxes.push_back(box);
    }
  }
  if (static_cast<int>(boxes.size()) < n_objects) {
    throw std::runtime_error("generate_scene: could not place " + std::to_string(n_objects) + " objects in " +
                             std::to_string(config.max_layout_attempts) + " layouts of " +
                             std::to_string(config.max_placement_attempts) + " attempts each (seed " +
                             std::to_string(seed) + ")");
  }

  const int n_clutter = static_cast<int>(std::lround(config.clutter_fraction * config.n_points));
  const int n_surface = config.n_points - n_clutter;
  std::vector<double> areas;
  for (const auto& b : boxes) areas.push_back(surface_area_without_floor(b));
  std::discrete_distribution<int> object_dist(areas.begin(), areas.end());
  std::normal_distribution<double> noise(0.0, 1.0);

  PointCloud cloud(config.n_points, 3);
  for (int i = 0; i < n_surface; ++i) {
    Point3 p = sample_surface(boxes[static_cast<std::size_t>(object_dist(rng))], rng);
    for (int k = 0; k < 3; ++k) {
      p(k) += config.surface_noise * std::clamp(noise(rng), -3.0, 3.0);
    }
    cloud.row(i) = p.transpose();
  }
  for (int i = n_surface; i < config.n_points; ++i) {
    cloud.row(i) << u01(rng), u01(rng), u01(rng);
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(config.n_points));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  PointCloud shuffled(config.n_points, 3);
  for (Eigen::Index i = 0; i < config.n_points; ++i) shuffled.row(i) = cloud.row(order[i]);

  const auto normalized = normalize_scene(shuffled, boxes);
  Scene scene;
  scene.cloud = normalized.cloud;
  scene.gt_boxes = normalized.boxes;
  scene.scene_id = "scene_" + std::to_string(seed);
  return scene;
}

Split split_indices(std::size_t n, double labeled_ratio, std::uint64_t seed) {
  if (!(labeled_ratio > 0.0 && labeled_ratio < 1.0)) {
    throw std::invalid_argument("labeled_ratio must be in (0, 1)");
  }
  const auto n_labeled = static_cast<std::size_t>(std::lround(labeled_ratio * static_cast<double>(n)));
  if (n_labeled == 0) {
    throw std::invalid_argument("labeled_ratio yields zero labeled scenes for " + std::to_string(n) +
                                " scenes");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32), 0x5917u};
  std::mt19937_64 rng(seq);
  std::shuffle(idx.begin(), idx.end(), rng);
  Split split;
  split.labeled.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  split.unlabeled.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_labeled), idx.end());
  std::sort(split.labeled.begin(), split.labeled.end());
  std::sort(split.unlabeled.begin(), split.unlabeled.end());
  return split;
}

SplitScenes split_dataset(const std::vector<Scene>& scenes, double labeled_ratio, std::uint64_t seed) {
  const auto split = split_indices(scenes.size(), labeled_ratio, seed);
  SplitScenes out;
  for (auto i : split.labeled) out.labeled.push_back(scenes[i]);
  for (auto i : split.unlabeled) out.unlabeled.push_back(scenes[i]);
  return out;
}

// ------------------------------------------------------------- augmentation

namespace {

Point3 rotate_quarter(const Point3& p, int turns) {
  Point3 q = p;
  for (int i = 0; i < ((turns % 4) + 4) % 4; ++i) {
    const double x = q(0) - 0.5;
    const double y = q(1) - 0.5;
    q(0) = 0.5 - y;
    q(1) = 0.5 + x;
  }
  return q;
}

}  // namespace

bool AugTransform::is_identity() const {
  return !flip_x && !flip_y && quarter_turns % 4 == 0 && scale == 1.0 && jitter_std == 0.0 &&
         dropout == 0.0;
}

Point3 AugTransform::apply(const Point3& p) const {
  Point3 q = p;
  if (flip_x) q(0) = 1.0 - q(0);
  if (flip_y) q(1) = 1.0 - q(1);
  if (quarter_turns % 4 != 0) q = rotate_quarter(q, quarter_turns);
  if (scale != 1.0) q = (q.array() - 0.5) * scale + 0.5;
  return q;
}

Point3 AugTransform::invert(const Point3& p) const {
  Point3 q = p;
  if (scale != 1.0) q = (q.array() - 0.5) / scale + 0.5;
  if (quarter_turns % 4 != 0) q = rotate_quarter(q, -quarter_turns);
  if (flip_y) q(1) = 1.0 - q(1);
  if (flip_x) q(0) = 1.0 - q(0);
  return q;
}

Box3 AugTransform::apply(const Box3& b) const {
  Box3 out = b;
  out.center = apply(b.center);
  if (quarter_turns % 2 != 0) std::swap(out.size(0), out.size(1));
  if (scale != 1.0) out.size *= scale;
  return out;
}

Box3 AugTransform::invert(const Box3& b) const {
  Box3 out = b;
  out.center = invert(b.center);
  if (scale != 1.0) out.size /= scale;
  if (quarter_turns % 2 != 0) std::swap(out.size(0), out.size(1));
  return out;
}

AugTransform draw_transform(AugStrength strength, std::mt19937_64& rng, const AugmentConfig& config) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> turns(0, 3);
  AugTransform t;
  t.flip_x = coin(rng);
  t.flip_y = coin(rng);
  t.quarter_turns = turns(rng);
  if (strength == AugStrength::kStrong) {
    std::uniform_real_distribution<double> s(config.scale_min, config.scale_max);
    t.scale = s(rng);
    t.jitter_std = config.jitter_std;
    t.dropout = config.dropout;
  }
  return t;
}

Scene apply_transform(const Scene& scene, const AugTransform& t, std::mt19937_64& rng) {
  Scene out;
  out.scene_id = scene.scene_id;
  out.gt_boxes = apply_to_boxes(scene.gt_boxes, t);

  const Eigen::Index n = scene.cloud.rows();
  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(n));
  if (t.dropout > 0.0) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_drop = std::min<Eigen::Index>(
        n - 1, static_cast<Eigen::Index>(std::lround(t.dropout * static_cast<double>(n))));
    keep.assign(idx.begin() + n_drop, idx.end());
    std::sort(keep.begin(), keep.end());
  } else {
    for (Eigen::Index i = 0; i < n; ++i) keep.push_back(i);
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  out.cloud.resize(static_cast<Eigen::Index>(keep.size()), 3);
  for (std::size_t r = 0; r < keep.size(); ++r) {
    Point3 p = t.apply(Point3(scene.cloud.row(keep[r]).transpose()));
    if (t.jitter_std > 0.0) {
      for (int k = 0; k < 3; ++k) p(k) += t.jitter_std * noise(rng);
    }
    out.cloud.row(static_cast<Eigen::Index>(r)) = p.transpose();
  }
  return out;
}

Augmented augment(const Scene& scene, AugStrength strength, std::uint64_t seed,
                  const AugmentConfig& config) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32), 0xa09u};
  std::mt19937_64 rng(seq);
  Augmented out;
  out.transform = draw_transform(strength, rng, config);
  out.scene = apply_transform(scene, out.transform, rng);
  return out;
}

std::vector<Box3> apply_to_boxes(const std::vector<Box3>& boxes, const AugTransform& t) {
  std::vector<Box3> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back(t.apply(b));
  return out;
}

std::vector<Box3> apply_inverse_to_boxes(const std::vector<Box3>& boxes, const AugTransform& t) {
  std::vector<Box3> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back(t.invert(b));
  return out;
}

// ------------------------------------------------------------------ dataset

std::vector<Scene> Dataset::labeled() const {
  std::vector<Scene> out;
  for (auto i : split.labeled) out.push_back(train.at(i));
  return out;
}

std::vector<Scene> Dataset::unlabeled() const {
  std::vector<Scene> out;
  for (auto i : split.unlabeled) out.push_back(train.at(i));
  return out;
}

Dataset generate_dataset(const SceneConfig& config, int n_train, int n_val, double labeled_ratio,
                         std::uint64_t seed) {
  config.validate();
  if (n_train < 1) throw std::invalid_argument("n_train must be >= 1");
  if (n_val < 0) throw std::invalid_argument("n_val must be >= 0");
  Dataset ds;
  ds.config = config;
  ds.seed = seed;
  ds.labeled_ratio = labeled_ratio;
  ds.split = split_indices(static_cast<std::size_t>(n_train), labeled_ratio, seed);
  const auto scene_seed = [&](std::uint64_t i) { return seed * 1000003ULL + i; };
  for (int i = 0; i < n_train; ++i) ds.train.push_back(generate_scene(config, scene_seed(i)));
  for (int i = 0; i < n_val; ++i) {
    ds.val.push_back(generate_scene(config, scene_seed(static_cast<std::uint64_t>(n_train + i))));
  }
  return ds;
}

}  // namespace diffdet3d
