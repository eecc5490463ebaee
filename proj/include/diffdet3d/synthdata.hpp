#pragma once

#include "diffdet3d/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace diffdet3d {

struct Scene {
  PointCloud cloud;
  std::vector<Box3> gt_boxes;
  std::string scene_id;
};

/// Procedural scene generator parameters. Classes are distinguished by their
/// mean box size, so they must be pairwise distinct.
struct SceneConfig {
  int n_points = 2048;
  int n_classes = 6;
  int min_objects = 2;
  int max_objects = 5;
  /// n_classes x 3 mean (l, w, h) in room units (the room is the unit cube).
  Eigen::MatrixXd class_size_means = default_class_sizes();
  /// Per-axis relative jitter: size = mean * (1 + jitter * U(-1, 1)).
  double size_jitter = 0.12;
  double surface_noise = 0.004;
  double clutter_fraction = 0.10;
  /// Minimum free gap between placed boxes.
  double min_gap = 0.02;
  int max_placement_attempts = 200;
  /// Whole-layout restarts when one object cannot be placed.
  int max_layout_attempts = 50;

  static Eigen::MatrixXd default_class_sizes();
  void validate() const;
};

/// Seeded, deterministic. Objects rest on the floor of the unit-cube room;
/// the result is normalized to [0,1]^3.
Scene generate_scene(const SceneConfig& config, std::uint64_t seed);

struct Split {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
};

/// Seeded partition of scene indices [0, n). |labeled| = round(ratio * n).
Split split_indices(std::size_t n, double labeled_ratio, std::uint64_t seed);

struct SplitScenes {
  std::vector<Scene> labeled;
  std::vector<Scene> unlabeled;
};
SplitScenes split_dataset(const std::vector<Scene>& scenes, double labeled_ratio, std::uint64_t seed);

enum class AugStrength { kWeak, kStrong };

/// Geometric part acts on boxes and points: p' = S(R(F(p))) about the room
/// center (0.5, 0.5, 0.5). Rotation is a multiple of 90 degrees about z.
struct AugTransform {
  bool flip_x = false;  // mirror x about 0.5
  bool flip_y = false;  // mirror y about 0.5
  int quarter_turns = 0;
  double scale = 1.0;
  double jitter_std = 0.0;
  double dropout = 0.0;

  bool is_identity() const;
  Point3 apply(const Point3& p) const;
  Point3 invert(const Point3& p) const;
  Box3 apply(const Box3& b) const;
  Box3 invert(const Box3& b) const;
};

/// Strength ranges used by `augment`.
struct AugmentConfig {
  double scale_min = 0.85;
  double scale_max = 1.15;
  double jitter_std = 0.003;
  double dropout = 0.1;
};

AugTransform draw_transform(AugStrength strength, std::mt19937_64& rng,
                            const AugmentConfig& config = {});

/// Applies a transform (including jitter/dropout, which use `rng`).
Scene apply_transform(const Scene& scene, const AugTransform& t, std::mt19937_64& rng);

struct Augmented {
  Scene scene;
  AugTransform transform;
};
Augmented augment(const Scene& scene, AugStrength strength, std::uint64_t seed,
                  const AugmentConfig& config = {});

std::vector<Box3> apply_to_boxes(const std::vector<Box3>& boxes, const AugTransform& t);
std::vector<Box3> apply_inverse_to_boxes(const std::vector<Box3>& boxes, const AugTransform& t);

/// Generated benchmark: training scenes with a labeled/unlabeled split plus a
/// held-out validation set.
struct Dataset {
  SceneConfig config;
  std::uint64_t seed = 0;
  double labeled_ratio = 0.1;
  std::vector<Scene> train;
  Split split;
  std::vector<Scene> val;

  std::vector<Scene> labeled() const;
  std::vector<Scene> unlabeled() const;
};

Dataset generate_dataset(const SceneConfig& config, int n_train, int n_val, double labeled_ratio,
                         std::uint64_t seed);

inline constexpr int kDatasetFormatVersion = 1;

/// JSON-lines: header record, then one record per scene (train then val).
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);
std::string dataset_to_string(const Dataset& dataset);
Dataset dataset_from_string(const std::string& text);

}  // namespace diffdet3d
