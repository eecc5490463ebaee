#pragma once

#include "diffdet3d/diffusion.hpp"
#include "diffdet3d/geometry.hpp"
#include "diffdet3d/netcore.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace diffdet3d {

enum class SamplingStrategy { kFps, kRandom };

struct DetectorConfig {
  int n_classes = 6;
  int feature_width = 64;    // C
  int n_rep_points = 256;    // M
  int n_proposals = 128;     // N_b
  int knn = 16;
  int encoder_hidden = 64;
  int roi_hidden = 64;
  int time_embed_width = 32;
  int decoder_hidden = 128;
  /// Candidates farther than this from every gt center are objectness negatives.
  double neg_radius = 0.3;
  /// Multiplier on relative coordinates fed to RoI pooling.
  double offset_gain = 4.0;
  /// Multiplier on local neighborhood statistics fed to the encoder.
  double knn_gain = 25.0;
  /// Neighbors for the coarse context statistics taken over the
  /// representative points themselves.
  int context_knn = 16;
  double context_gain = 10.0;
  /// Length scale of the center/size heads and of the regression residuals.
  double length_unit = 0.1;
  SamplingStrategy sampling = SamplingStrategy::kFps;

  int knn_stat_width() const { return 6; }
  /// centered coordinates | fine neighborhood stats | coarse context stats
  int encoder_in_width() const { return 3 + 2 * knn_stat_width(); }
  int pooled_width() const { return feature_width + 6; }
  int roi_out_width() const { return feature_width + n_classes; }
  int decoder_in_width() const { return roi_out_width() + time_embed_width; }
  /// center offset (3) | size (3) | class logits | objectness | iou
  int head_width() const { return 6 + n_classes + 2; }

  MlpSpec encoder_spec() const;
  MlpSpec roi_spec() const;
  MlpSpec decoder_spec() const;
  void validate() const;
};

ParamStore init_detector_params(const DetectorConfig& config, std::uint64_t seed);

/// Per-point features at the FPS-selected representative points.
struct EncodedScene {
  PointCloud rep_points;        // M x 3
  IndexList rep_indices;        // into the source cloud
  Eigen::MatrixXd inputs;       // M x encoder_in_width
  Eigen::MatrixXd features;     // M x C
  MlpTape tape;
};

/// Encoder inputs for the query rows of `cloud`: centered coordinates, the
/// k-nearest-neighbor offset mean and per-axis spread within the cloud, and
/// the same statistics among the query points themselves (coarser scale).
Eigen::MatrixXd encoder_inputs(const PointCloud& cloud, const IndexList& queries,
                               const DetectorConfig& config);

/// Index of the lexicographically smallest point; an order-independent FPS seed.
Eigen::Index canonical_start(const PointCloud& cloud);

/// Representative points are FPS-selected from `fps_start`, or from
/// canonical_start(cloud) when it is negative.
EncodedScene encode(const PointCloud& cloud, const ParamStore& params, const DetectorConfig& config,
                    Eigen::Index fps_start = -1);

/// Indices into enc.rep_points of the N_b candidate centers.
IndexList select_centers(const EncodedScene& enc, const DetectorConfig& config,
                         Eigen::Index fps_start = 0);
IndexList select_centers(const EncodedScene& enc, const DetectorConfig& config, std::mt19937_64& rng);

struct Candidates {
  IndexList rep_index;          // N_b indices into rep points
  PointCloud centers;           // N_b x 3
  Eigen::MatrixXd sizes;        // N_b x 3, scaled space
  Eigen::MatrixXd labels;       // N_b x N_cls, scaled space

  Eigen::Index rows() const { return centers.rows(); }
};

Candidates make_candidates(const EncodedScene& enc, const IndexList& center_index,
                           const DiffusionState& state);

/// Box of a candidate in scene units (scaled size mapped back to [0,1]).
Box3 candidate_box(const Candidates& cands, Eigen::Index i, const ScalingConfig& scaling);

struct RoiResult {
  Eigen::MatrixXd pooled;                 // N_b x (C + 6)
  Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> argmax;  // rep index per channel
  Eigen::MatrixXd f_obj;                  // N_b x (C + N_cls)
  MlpTape tape;
};

/// Pooled per-candidate input row for rep point j relative to `center`.
Eigen::RowVectorXd pooling_row(const EncodedScene& enc, Eigen::Index j, const Point3& center,
                               const DetectorConfig& config);

/// Max-pools [feature, relative offset, negated offset] over the rep points
/// inside each candidate box (the candidate's own point when the box is
/// empty), runs the RoI MLP and appends the scaled noisy label.
RoiResult extract_roi_features(const EncodedScene& enc, const Candidates& cands,
                               const ParamStore& params, const DetectorConfig& config,
                               const ScalingConfig& scaling);

Eigen::RowVectorXd time_embedding(int t, int width);

/// Decoded per-candidate outputs. Sizes are in scene units.
struct Predictions {
  Eigen::MatrixXd raw;            // N_b x head_width (empty for hand-built predictions)
  Eigen::MatrixXd center_offset;  // N_b x 3
  Eigen::MatrixXd size;           // N_b x 3
  Eigen::MatrixXd class_logits;   // N_b x N_cls
  Eigen::MatrixXd class_probs;    // N_b x N_cls
  Eigen::VectorXd objectness;
  Eigen::VectorXd iou_est;

  Eigen::Index rows() const { return size.rows(); }
  static Predictions from_raw(const Eigen::MatrixXd& raw, int n_classes, double length_unit);
};

struct DecodeResult {
  Predictions preds;
  MlpTape tape;
};

DecodeResult decode(const Eigen::MatrixXd& f_obj, int t, const ParamStore& params,
                    const DetectorConfig& config);

enum class Role : std::uint8_t { kIgnore, kPositive, kNegative };

struct Assignment {
  std::vector<int> gt_of;            // per candidate, -1 when unmatched
  std::vector<Role> role;            // per candidate
  std::vector<Eigen::Index> candidate_of_gt;
};

Assignment match_targets(const PointCloud& centers, const std::vector<Box3>& gts, double neg_radius);

struct LossTerms {
  double center = 0.0;
  double size = 0.0;
  double cls = 0.0;
  double objectness = 0.0;
  double iou = 0.0;
  double total() const { return center + size + cls + objectness + iou; }
};

struct LossResult {
  LossTerms terms;
  double value = 0.0;
  Eigen::MatrixXd grad_raw;     // d loss / d raw head outputs
  Eigen::VectorXd iou_targets;  // per candidate; NaN where not positive
};

double huber(double r, double delta = 1.0);
double huber_grad(double r, double delta = 1.0);

/// Huber(center) + Huber(size) + CE(class) + Huber(iou) on positives and
/// BCE(objectness) on positives and negatives, each averaged over its rows.
/// The IoU target is a constant (no gradient flows into it); passing
/// `frozen_iou` replaces the computed targets with given values.
LossResult detection_loss(const Predictions& preds, const PointCloud& centers,
                          const Assignment& assignment, const std::vector<Box3>& targets,
                          const DetectorConfig& config, const Eigen::VectorXd* frozen_iou = nullptr);

/// Predicted box of candidate i.
Box3 predicted_box(const Predictions& preds, const PointCloud& centers, Eigen::Index i);

/// Everything needed to backpropagate one scene pass.
struct ScenePass {
  EncodedScene enc;
  Candidates cands;
  RoiResult roi;
  DecodeResult dec;
};

/// Accumulates parameter gradients for d loss / d raw.
void backward_pass(const ScenePass& pass, const Eigen::MatrixXd& grad_raw, const ParamStore& params,
                   const DetectorConfig& config, ParamStore& grads);

}  // namespace diffdet3d
