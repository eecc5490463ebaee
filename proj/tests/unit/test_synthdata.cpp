#include "diffdet3d/synthdata.hpp"

#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

using namespace diffdet3d;

namespace {

bool same_scene(const Scene& a, const Scene& b) {
  if (a.scene_id != b.scene_id || a.cloud != b.cloud || a.gt_boxes.size() != b.gt_boxes.size()) return false;
  for (std::size_t i = 0; i < a.gt_boxes.size(); ++i) {
    const auto& x = a.gt_boxes[i];
    const auto& y = b.gt_boxes[i];
    if (x.center != y.center || x.size != y.size || x.class_id != y.class_id ||
        x.orientation != y.orientation) {
      return false;
    }
  }
  return true;
}

double max_box_error(const std::vector<Box3>& a, const std::vector<Box3>& b) {
  double e = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    e = std::max(e, (a[i].center - b[i].center).cwiseAbs().maxCoeff());
    e = std::max(e, (a[i].size - b[i].size).cwiseAbs().maxCoeff());
  }
  return e;
}

}  // namespace

TEST_SUITE("synthdata") {
  TEST_CASE("single object without clutter stays inside its box") {
    SceneConfig cfg;
    cfg.min_objects = cfg.max_objects = 1;
    cfg.clutter_fraction = 0.0;
    cfg.size_jitter = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Scene s = generate_scene(cfg, seed);
      REQUIRE(s.gt_boxes.size() == 1);
      const Box3& b = s.gt_boxes[0];
      const double unit = b.size(0) / cfg.class_size_means(b.class_id, 0);
      const double pad = 3.0 * cfg.surface_noise * unit + 1e-12;
      const Point3 lo = b.min_corner().array() - pad;
      const Point3 hi = b.max_corner().array() + pad;
      for (Eigen::Index i = 0; i < s.cloud.rows(); ++i) {
        const Point3 p = s.cloud.row(i).transpose();
        CHECK(((p.array() >= lo.array()) && (p.array() <= hi.array())).all());
      }
    }
  }

  TEST_CASE("scenes are deterministic in the seed") {
    const SceneConfig cfg;
    CHECK(same_scene(generate_scene(cfg, 42), generate_scene(cfg, 42)));
    CHECK_FALSE(same_scene(generate_scene(cfg, 42), generate_scene(cfg, 43)));
  }

  TEST_CASE("generated scenes satisfy their invariants") {
    const SceneConfig cfg;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const Scene s = generate_scene(cfg, seed);
      CHECK(s.cloud.rows() == cfg.n_points);
      CHECK(s.cloud.minCoeff() >= -1e-12);
      CHECK(s.cloud.maxCoeff() <= 1.0 + 1e-12);
      CHECK(s.gt_boxes.size() >= 1);
      CHECK(static_cast<int>(s.gt_boxes.size()) <= cfg.max_objects);
      for (const auto& b : s.gt_boxes) {
        CHECK(is_valid(b));
        CHECK((b.max_corner().array() > 0.0).all());
        CHECK((b.min_corner().array() < 1.0).all());
      }
    }
  }

  TEST_CASE("generated boxes never overlap") {
    const SceneConfig cfg;
    for (std::uint64_t seed = 11000; seed < 11300; ++seed) {
      const Scene s = generate_scene(cfg, seed);
      for (std::size_t i = 0; i < s.gt_boxes.size(); ++i) {
        for (std::size_t j = i + 1; j < s.gt_boxes.size(); ++j) CHECK(iou_aabb(s.gt_boxes[i], s.gt_boxes[j]) == 0.0);
      }
    }
  }

  TEST_CASE("an impossible layout fails after bounded retries") {
    SceneConfig cfg;
    cfg.min_objects = 40;
    cfg.max_objects = 40;
    cfg.max_placement_attempts = 20;
    cfg.max_layout_attempts = 3;
    CHECK_THROWS_AS(generate_scene(cfg, 1), std::runtime_error);
    cfg.max_layout_attempts = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }

  TEST_CASE("per-class mean sizes follow the configuration") {
    const SceneConfig cfg;
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(cfg.n_classes, 3);
    Eigen::VectorXd count = Eigen::VectorXd::Zero(cfg.n_classes);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const Scene s = generate_scene(cfg, 1000 + seed);
      for (const auto& b : s.gt_boxes) {
        sum.row(b.class_id) += b.size.transpose();
        count(b.class_id) += 1.0;
      }
    }
    for (int c = 0; c < cfg.n_classes; ++c) {
      REQUIRE(count(c) > 0);
      const Eigen::RowVector3d mean = sum.row(c) / count(c);
      const Eigen::RowVector3d rel =
          ((mean - cfg.class_size_means.row(c)).array() / cfg.class_size_means.row(c).array()).abs();
      CHECK(rel.maxCoeff() < 0.10);
    }
  }

  TEST_CASE("invalid scene configs are rejected") {
    SceneConfig cfg;
    cfg.n_classes = 1;
    cfg.class_size_means = SceneConfig::default_class_sizes().topRows(1);
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    SceneConfig dup;
    dup.class_size_means.row(1) = dup.class_size_means.row(0);
    CHECK_THROWS_AS(dup.validate(), std::invalid_argument);
  }

  TEST_CASE("split sizes and disjointness") {
    const Split s = split_indices(100, 0.10, 7);
    CHECK(s.labeled.size() == 10);
    CHECK(s.unlabeled.size() == 90);
    std::set<std::size_t> all(s.labeled.begin(), s.labeled.end());
    all.insert(s.unlabeled.begin(), s.unlabeled.end());
    CHECK(all.size() == 100);
    const Split two = split_indices(2, 0.5, 1);
    CHECK(two.labeled.size() == 1);
    CHECK(two.unlabeled.size() == 1);
  }

  TEST_CASE("different seeds give different valid partitions") {
    std::set<std::vector<std::size_t>> seen;
    for (std::uint64_t seed : {1, 2, 3}) {
      const Split s = split_indices(50, 0.2, seed);
      CHECK(s.labeled.size() == 10);
      std::set<std::size_t> all(s.labeled.begin(), s.labeled.end());
      all.insert(s.unlabeled.begin(), s.unlabeled.end());
      CHECK(all.size() == 50);
      seen.insert(s.labeled);
    }
    CHECK(seen.size() == 3);
  }

  TEST_CASE("degenerate ratios are rejected") {
    CHECK_THROWS_AS(split_indices(10, 0.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_indices(10, 1.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_indices(3, 0.1, 1), std::invalid_argument);
  }

  TEST_CASE("identity transform leaves a scene unchanged") {
    const Scene s = generate_scene(SceneConfig{}, 5);
    std::mt19937_64 rng(1);
    const AugTransform id;
    CHECK(id.is_identity());
    CHECK(same_scene(apply_transform(s, id, rng), s));
  }

  TEST_CASE("x flip mirrors centers and keeps sizes") {
    const Scene s = generate_scene(SceneConfig{}, 6);
    AugTransform t;
    t.flip_x = true;
    const auto boxes = apply_to_boxes(s.gt_boxes, t);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      CHECK(boxes[i].center(0) == doctest::Approx(1.0 - s.gt_boxes[i].center(0)));
      CHECK(boxes[i].center(1) == s.gt_boxes[i].center(1));
      CHECK(boxes[i].size == s.gt_boxes[i].size);
    }
  }

  TEST_CASE("scale two round trip") {
    const Scene s = generate_scene(SceneConfig{}, 7);
    AugTransform t;
    t.scale = 2.0;
    CHECK(max_box_error(apply_inverse_to_boxes(apply_to_boxes(s.gt_boxes, t), t), s.gt_boxes) < 1e-12);
  }

  TEST_CASE("strong augmentation is invertible on boxes") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const Scene s = generate_scene(SceneConfig{}, seed);
      const Augmented a = augment(s, AugStrength::kStrong, seed);
      CHECK(a.transform.scale >= 0.85);
      CHECK(a.transform.scale <= 1.15);
      CHECK(max_box_error(apply_inverse_to_boxes(a.scene.gt_boxes, a.transform), s.gt_boxes) < 1e-9);
      for (const auto& b : a.scene.gt_boxes) CHECK(b.orientation == 0.0);
    }
  }

  TEST_CASE("composed transforms round trip on random boxes") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0), sz(0.05, 0.5);
    for (int i = 0; i < 200; ++i) {
      const AugTransform t = draw_transform(AugStrength::kStrong, rng);
      Box3 b;
      b.center = Point3(u(rng), u(rng), u(rng));
      b.size = Point3(sz(rng), sz(rng), sz(rng));
      CHECK(max_box_error({t.invert(t.apply(b))}, {b}) < 1e-9);
    }
  }

  TEST_CASE("point transform agrees with box transform") {
    std::mt19937_64 rng(10);
    for (int i = 0; i < 50; ++i) {
      const AugTransform t = draw_transform(AugStrength::kStrong, rng);
      Box3 b;
      b.center = Point3(0.4, 0.3, 0.2);
      b.size = Point3(0.2, 0.1, 0.05);
      const Box3 tb = t.apply(b);
      const Point3 c1 = t.apply(b.min_corner()), c2 = t.apply(b.max_corner());
      CHECK((tb.min_corner() - c1.cwiseMin(c2)).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((tb.max_corner() - c1.cwiseMax(c2)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("dataset save and load round trip") {
    const Dataset ds = generate_dataset(SceneConfig{}, 6, 2, 0.5, 3);
    const Dataset back = dataset_from_string(dataset_to_string(ds));
    CHECK(back.seed == ds.seed);
    CHECK(back.labeled_ratio == ds.labeled_ratio);
    CHECK(back.split.labeled == ds.split.labeled);
    CHECK(back.split.unlabeled == ds.split.unlabeled);
    CHECK(back.config.class_size_means == ds.config.class_size_means);
    REQUIRE(back.train.size() == 6);
    REQUIRE(back.val.size() == 2);
    for (std::size_t i = 0; i < 6; ++i) CHECK(same_scene(back.train[i], ds.train[i]));
    for (std::size_t i = 0; i < 2; ++i) CHECK(same_scene(back.val[i], ds.val[i]));
    CHECK(dataset_to_string(back) == dataset_to_string(ds));
  }

  TEST_CASE("truncated dataset reports a byte offset") {
    const Dataset ds = generate_dataset(SceneConfig{}, 3, 0, 0.5, 3);
    const std::string text = dataset_to_string(ds);
    const std::string cut = text.substr(0, text.size() / 2);
    try {
      (void)dataset_from_string(cut);
      FAIL("truncated dataset was accepted");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
  }

  TEST_CASE("dataset version mismatch is rejected") {
    const Dataset ds = generate_dataset(SceneConfig{}, 2, 0, 0.5, 3);
    std::string text = dataset_to_string(ds);
    const std::string key = "\"version\":" + std::to_string(kDatasetFormatVersion);
    const auto at = text.find(key);
    REQUIRE(at != std::string::npos);
    text.replace(at, key.size(), "\"version\":99");
    try {
      (void)dataset_from_string(text);
      FAIL("version mismatch was accepted");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
}
