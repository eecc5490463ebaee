#pragma once

#include "diffdet3d/detector.hpp"
#include "diffdet3d/diffusion.hpp"
#include "diffdet3d/eval.hpp"
#include "diffdet3d/netcore.hpp"
#include "diffdet3d/synthdata.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffdet3d {

struct SslConfig {
  DetectorConfig detector;
  ScalingConfig scaling;
  AdamWConfig adamw;
  AugmentConfig augment;

  int max_t = 1000;
  int ddim_steps = 2;
  double size_mean = 0.25;
  /// Non-positive means 1 / n_classes.
  double label_mean = 0.0;
  double lambda_u = 2.0;

  double obj_thresh = 0.9;
  double cls_thresh = 0.9;
  double iou_thresh = 0.25;
  double renew_thresh = 0.5;
  /// Multiply iou_est into the renewal score.
  bool renew_use_iou = false;
  double pl_nms_iou = 0.25;
  double eval_nms_iou = 0.25;

  double ema_decay = 0.999;
  int batch_labeled = 4;
  int batch_unlabeled = 8;
  int pretrain_epochs = 200;
  int ssl_epochs = 300;

  /// Padding rows of the training targets draw sizes from U[min, max].
  double pad_size_min = 0.05;
  double pad_size_max = 0.6;

  /// Centre the training noise on the scaled sampling means so that the
  /// corrupted state at t = T has the sampler's starting distribution.
  bool centered_noise = true;

  bool size_diffusion = true;
  bool label_diffusion = true;
  bool ddim_on = true;
  bool renewal_on = true;

  double resolved_label_mean() const {
    return label_mean > 0.0 ? label_mean : 1.0 / static_cast<double>(detector.n_classes);
  }
  void validate() const;
};

/// A teacher prediction that passed all three confidence gates.
struct PseudoLabel {
  Box3 box;
  double objectness = 0.0;
  double class_confidence = 0.0;
  double iou_est = 0.0;

  double score() const { return objectness * class_confidence; }
};

/// Fresh state at t = T: unit-variance Gaussians around the scaled sampling
/// means. A component with diffusion disabled is held at its scaled mean.
DiffusionState init_noisy_state(int n_rows, int n_classes, const SslConfig& config,
                                std::mt19937_64& rng);

struct PreparedTargets {
  Eigen::MatrixXd sizes;   // N_b x 3, scaled
  Eigen::MatrixXd labels;  // N_b x N_cls, scaled
  std::vector<bool> positive;
  Assignment assignment;
};

/// Clean per-candidate targets: matched candidates carry their gt size and
/// one-hot class, the rest are random padding; everything is then scaled.
PreparedTargets prepare_targets(const std::vector<Box3>& gts, const PointCloud& centers,
                                const SslConfig& config, std::mt19937_64& rng);

/// Training-time corruption of prepared targets at timestep t.
DiffusionState corrupt_targets(const PreparedTargets& targets, int t, const NoiseSchedule& schedule,
                               const SslConfig& config, std::mt19937_64& rng);

/// Rows whose composite score falls below the renewal threshold are redrawn
/// from the initial distribution; the rest pass through unchanged.
DiffusionState box_renewal(const DiffusionState& state, const Predictions& preds,
                           const SslConfig& config, std::mt19937_64& rng);

double renewal_score(const Predictions& preds, Eigen::Index i, const SslConfig& config);

/// Keeps a prediction iff objectness, max class probability and iou_est all
/// reach their thresholds (>=).
std::vector<PseudoLabel> filter_pseudo_labels(const Predictions& preds, const PointCloud& centers,
                                              const SslConfig& config);

/// Clean-signal estimate in scaled space from decoder outputs.
Eigen::MatrixXd size_estimate(const Predictions& preds, const SslConfig& config);
Eigen::MatrixXd label_estimate(const Predictions& preds, const SslConfig& config);

/// Decoder abstraction used by the sampler: predictions for the candidate
/// state at timestep t.
using DecodeFn = std::function<Predictions(const DiffusionState& state, int t)>;

struct SamplerResult {
  DiffusionState state;   // state fed to the final decode
  Predictions preds;      // final decode
  int decodes = 0;
  std::vector<Eigen::Index> row_counts;  // candidate count at each decode
};

/// DDIM denoising loop with box renewal followed by one final decode.
SamplerResult run_sampler(const DecodeFn& decode_fn, int n_rows, const SslConfig& config,
                          const NoiseSchedule& schedule, std::mt19937_64& rng);

/// Filter then class-agnostic NMS.
std::vector<PseudoLabel> select_pseudo_labels(const Predictions& preds, const PointCloud& centers,
                                              const SslConfig& config);

/// Per-candidate detections (score = objectness x class probability) after NMS.
std::vector<Detection> detections_from(const Predictions& preds, const PointCloud& centers,
                                       double nms_iou);

struct Inference {
  PointCloud centers;
  SamplerResult sampler;
};

Inference run_inference(const ParamStore& params, const PointCloud& cloud, const SslConfig& config,
                        const NoiseSchedule& schedule, std::mt19937_64& rng);

/// Sampler run over any decoder followed by filtering and NMS.
std::vector<PseudoLabel> generate_pseudo_labels(const DecodeFn& decode_fn, const PointCloud& centers,
                                                const SslConfig& config, const NoiseSchedule& schedule,
                                                std::mt19937_64& rng);

std::vector<PseudoLabel> generate_pseudo_labels(const ParamStore& teacher, const Scene& scene,
                                                const SslConfig& config, const NoiseSchedule& schedule,
                                                std::mt19937_64& rng);

std::vector<Detection> detect(const ParamStore& params, const Scene& scene, const SslConfig& config,
                              const NoiseSchedule& schedule, std::mt19937_64& rng);

std::vector<Box3> boxes_of(const std::vector<PseudoLabel>& pls);

/// A scene as seen by the student, with targets in the same frame.
struct TrainSample {
  Scene scene;
  std::vector<Box3> targets;
};

struct SceneLoss {
  double value = 0.0;
  LossTerms terms;
  Eigen::VectorXd iou_targets;
};

/// Forward + backward of one scene; gradients scaled by `weight` are
/// accumulated into `grads` when given.
SceneLoss scene_loss_and_grad(const ParamStore& params, const TrainSample& sample, int t,
                              const SslConfig& config, const NoiseSchedule& schedule,
                              std::mt19937_64& rng, double weight, ParamStore* grads,
                              const Eigen::VectorXd* frozen_iou = nullptr);

struct StepResult {
  double total = 0.0;
  double labeled = 0.0;
  double unlabeled = 0.0;
};

/// Thrown when a loss or gradient stops being finite.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One optimization step: mean labeled loss + lambda * mean unlabeled loss,
/// one AdamW update of the student and, when a teacher is given, one EMA update.
StepResult student_step(const std::vector<TrainSample>& labeled,
                        const std::vector<TrainSample>& unlabeled, ParamStore& student,
                        ParamStore* teacher, OptimState& opt, const SslConfig& config,
                        const NoiseSchedule& schedule, std::uint64_t seed);

/// Multiplicative learning-rate factor at `epoch` of `total` epochs.
double pretrain_lr_factor(int epoch, int total);
double ssl_lr_factor(int epoch, int total);

enum class Phase { kPretrain, kSsl };

/// Everything needed to continue training from an epoch boundary.
struct TrainState {
  Phase phase = Phase::kPretrain;
  int epoch = 0;  // completed epochs in the current phase
  ParamStore student;
  ParamStore teacher;
  OptimState opt;
};

struct EpochRecord {
  Phase phase = Phase::kPretrain;
  int epoch = 0;  // 1-based
  int steps = 0;
  double loss = 0.0;
  double loss_labeled = 0.0;
  double loss_unlabeled = 0.0;
  double lr = 0.0;
};

using EpochHook = std::function<void(const TrainState&, const EpochRecord&)>;

TrainState start_pretrain(const SslConfig& config, std::uint64_t seed);
TrainState start_ssl(const ParamStore& pretrained, const SslConfig& config);

/// Runs the remaining pretraining epochs (supervised, labeled scenes only).
void run_pretrain(TrainState& state, const std::vector<Scene>& labeled, const SslConfig& config,
                  std::uint64_t seed, const EpochHook& hook = {});

/// Runs the remaining teacher-student epochs. One epoch is one pass over the
/// labeled scenes; unlabeled scenes are cycled.
void run_ssl(TrainState& state, const std::vector<Scene>& labeled,
             const std::vector<Scene>& unlabeled, const SslConfig& config, std::uint64_t seed,
             const EpochHook& hook = {});

/// Convenience: full supervised pretraining from scratch.
ParamStore pretrain(const std::vector<Scene>& labeled, const SslConfig& config, std::uint64_t seed);

struct EvalResult {
  MapResult map25;
  MapResult map50;
};

/// Per-scene detector; `rng` is the scene's evaluation stream.
using SceneDetectFn = std::function<std::vector<Detection>(const Scene& scene, std::mt19937_64& rng)>;

EvalResult evaluate(const SceneDetectFn& detect_fn, const std::vector<Scene>& scenes, std::uint64_t seed);
EvalResult evaluate(const ParamStore& params, const std::vector<Scene>& scenes,
                    const SslConfig& config, std::uint64_t seed);

/// Teacher pseudo-label quality on (unaugmented) scenes.
PseudoLabelQuality evaluate_pseudo_labels(const ParamStore& teacher, const std::vector<Scene>& scenes,
                                          const SslConfig& config, std::uint64_t seed,
                                          double iou_thresh = 0.5);

}  // namespace diffdet3d
