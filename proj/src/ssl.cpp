#include "diffdet3d/ssl.hpp"

#include "diffdet3d/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace diffdet3d {

namespace {

constexpr std::uint64_t kPhasePretrain = 1;
constexpr std::uint64_t kPhaseSsl = 2;
constexpr std::uint64_t kStreamOrder = 11;
constexpr std::uint64_t kStreamUnlabeledOrder = 12;
constexpr std::uint64_t kStreamStep = 13;
constexpr std::uint64_t kStreamEval = 21;

void check_unit(const std::string& key, double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("SslConfig." + key + ": must lie in [0, 1]");
}

Eigen::MatrixXd constant_sizes(Eigen::Index rows, const SslConfig& config) {
  return Eigen::MatrixXd::Constant(rows, 3, scale_signal(config.size_mean, config.scaling.size_scale));
}

Eigen::MatrixXd constant_labels(Eigen::Index rows, const SslConfig& config) {
  return Eigen::MatrixXd::Constant(rows, config.detector.n_classes,
                                   scale_signal(config.resolved_label_mean(), config.scaling.label_scale));
}

/// Redraws row i from the initial distribution: 3 size draws then N_cls
/// label draws, skipping components whose diffusion is disabled.
void draw_row(DiffusionState& state, Eigen::Index i, const SslConfig& config,
              std::normal_distribution<double>& normal, std::mt19937_64& rng) {
  const double size_center = scale_signal(config.size_mean, config.scaling.size_scale);
  const double label_center = scale_signal(config.resolved_label_mean(), config.scaling.label_scale);
  for (Eigen::Index k = 0; k < state.sizes.cols(); ++k) {
    state.sizes(i, k) = config.size_diffusion ? size_center + normal(rng) : size_center;
  }
  for (Eigen::Index k = 0; k < state.labels.cols(); ++k) {
    state.labels(i, k) = config.label_diffusion ? label_center + normal(rng) : label_center;
  }
}

void hold_disabled(DiffusionState& state, const SslConfig& config) {
  if (!config.size_diffusion) state.sizes = constant_sizes(state.rows(), config);
  if (!config.label_diffusion) state.labels = constant_labels(state.rows(), config);
}

double max_prob(const Predictions& preds, Eigen::Index i) { return preds.class_probs.row(i).maxCoeff(); }

}  // namespace

void SslConfig::validate() const {
  detector.validate();
  scaling.validate();
  if (max_t < 1) throw std::invalid_argument("SslConfig.max_t: must be >= 1");
  if (ddim_steps < 0) throw std::invalid_argument("SslConfig.ddim_steps: must be >= 0");
  if (!(lambda_u > 0.0)) throw std::invalid_argument("SslConfig.lambda_u: must be positive");
  check_unit("size_mean", size_mean);
  if (label_mean > 0.0) check_unit("label_mean", label_mean);
  check_unit("obj_thresh", obj_thresh);
  check_unit("cls_thresh", cls_thresh);
  check_unit("iou_thresh", iou_thresh);
  check_unit("renew_thresh", renew_thresh);
  check_unit("pl_nms_iou", pl_nms_iou);
  check_unit("eval_nms_iou", eval_nms_iou);
  check_unit("ema_decay", ema_decay);
  if (batch_labeled < 1) throw std::invalid_argument("SslConfig.batch_labeled: must be >= 1");
  if (batch_unlabeled < 0) throw std::invalid_argument("SslConfig.batch_unlabeled: must be >= 0");
  if (pretrain_epochs < 0) throw std::invalid_argument("SslConfig.pretrain_epochs: must be >= 0");
  if (ssl_epochs < 0) throw std::invalid_argument("SslConfig.ssl_epochs: must be >= 0");
  if (!(pad_size_min > 0.0 && pad_size_min <= pad_size_max && pad_size_max <= 1.0)) {
    throw std::invalid_argument("SslConfig.pad_size_min/pad_size_max: need 0 < min <= max <= 1");
  }
  if (!(adamw.lr > 0.0)) throw std::invalid_argument("SslConfig.lr: must be positive");
}

// ------------------------------------------------------------ noisy states

DiffusionState init_noisy_state(int n_rows, int n_classes, const SslConfig& config,
                                std::mt19937_64& rng) {
  DiffusionState s;
  s.sizes.resize(n_rows, 3);
  s.labels.resize(n_rows, n_classes);
  s.t = config.max_t;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < n_rows; ++i) draw_row(s, i, config, normal, rng);
  return s;
}

PreparedTargets prepare_targets(const std::vector<Box3>& gts, const PointCloud& centers,
                                const SslConfig& config, std::mt19937_64& rng) {
  const Eigen::Index n = centers.rows();
  const int k = config.detector.n_classes;
  if (static_cast<Eigen::Index>(gts.size()) > n) {
    throw std::invalid_argument("prepare_targets: " + std::to_string(gts.size()) +
                                " targets exceed " + std::to_string(n) + " candidates");
  }
  PreparedTargets out;
  out.assignment = match_targets(centers, gts, config.detector.neg_radius);
  out.positive.assign(static_cast<std::size_t>(n), false);
  Eigen::MatrixXd sizes(n, 3);
  Eigen::MatrixXd labels = Eigen::MatrixXd::Zero(n, k);
  std::uniform_real_distribution<double> pad_size(config.pad_size_min, config.pad_size_max);
  std::uniform_int_distribution<int> pad_class(0, k - 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int g = out.assignment.gt_of[static_cast<std::size_t>(i)];
    if (g >= 0) {
      const Box3& gt = gts[static_cast<std::size_t>(g)];
      sizes.row(i) = gt.size.transpose().cwiseMax(0.0).cwiseMin(1.0);
      labels(i, std::clamp(gt.class_id, 0, k - 1)) = 1.0;
      out.positive[static_cast<std::size_t>(i)] = true;
    } else {
      for (int d = 0; d < 3; ++d) sizes(i, d) = pad_size(rng);
      labels(i, pad_class(rng)) = 1.0;
    }
  }
  out.sizes = scale_signal(sizes.array(), config.scaling.size_scale).matrix();
  out.labels = scale_signal(labels.array(), config.scaling.label_scale).matrix();
  return out;
}

DiffusionState corrupt_targets(const PreparedTargets& targets, int t, const NoiseSchedule& schedule,
                               const SslConfig& config, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto noise_like = [&](const Eigen::MatrixXd& m, double center) {
    Eigen::MatrixXd z(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) z(i, j) = center + normal(rng);
    }
    return z;
  };
  const double size_center =
      config.centered_noise ? scale_signal(config.size_mean, config.scaling.size_scale) : 0.0;
  const double label_center =
      config.centered_noise ? scale_signal(config.resolved_label_mean(), config.scaling.label_scale) : 0.0;
  DiffusionState s;
  s.t = t;
  s.sizes = config.size_diffusion
                ? corrupt(targets.sizes, t, noise_like(targets.sizes, size_center), schedule)
                : constant_sizes(targets.sizes.rows(), config);
  s.labels = config.label_diffusion
                 ? corrupt(targets.labels, t, noise_like(targets.labels, label_center), schedule)
                 : constant_labels(targets.labels.rows(), config);
  return s;
}

double renewal_score(const Predictions& preds, Eigen::Index i, const SslConfig& config) {
  double s = preds.objectness(i) * max_prob(preds, i);
  if (config.renew_use_iou) s *= preds.iou_est(i);
  return s;
}

DiffusionState box_renewal(const DiffusionState& state, const Predictions& preds,
                           const SslConfig& config, std::mt19937_64& rng) {
  if (preds.rows() != state.rows()) {
    throw std::invalid_argument("box_renewal: predictions do not match state rows");
  }
  DiffusionState out = state;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < state.rows(); ++i) {
    if (renewal_score(preds, i, config) < config.renew_thresh) draw_row(out, i, config, normal, rng);
  }
  return out;
}

// ----------------------------------------------------------- pseudo-labels

std::vector<PseudoLabel> filter_pseudo_labels(const Predictions& preds, const PointCloud& centers,
                                              const SslConfig& config) {
  std::vector<PseudoLabel> out;
  for (Eigen::Index i = 0; i < preds.rows(); ++i) {
    const double obj = preds.objectness(i);
    const double cls = max_prob(preds, i);
    const double iou = preds.iou_est(i);
    if (obj >= config.obj_thresh && cls >= config.cls_thresh && iou >= config.iou_thresh) {
      out.push_back({predicted_box(preds, centers, i), obj, cls, iou});
    }
  }
  return out;
}

std::vector<PseudoLabel> select_pseudo_labels(const Predictions& preds, const PointCloud& centers,
                                              const SslConfig& config) {
  auto pls = filter_pseudo_labels(preds, centers, config);
  std::stable_sort(pls.begin(), pls.end(),
                   [](const PseudoLabel& a, const PseudoLabel& b) { return a.score() > b.score(); });
  std::vector<PseudoLabel> kept;
  for (const auto& p : pls) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const PseudoLabel& k) {
      return iou_aabb(k.box, p.box) > config.pl_nms_iou;
    });
    if (!suppressed) kept.push_back(p);
  }
  return kept;
}

std::vector<Detection> detections_from(const Predictions& preds, const PointCloud& centers,
                                       double nms_iou) {
  std::vector<Detection> dets;
  dets.reserve(static_cast<std::size_t>(preds.rows()));
  for (Eigen::Index i = 0; i < preds.rows(); ++i) {
    dets.push_back({predicted_box(preds, centers, i), preds.objectness(i) * max_prob(preds, i)});
  }
  return nms(std::move(dets), nms_iou);
}

std::vector<Box3> boxes_of(const std::vector<PseudoLabel>& pls) {
  std::vector<Box3> out;
  out.reserve(pls.size());
  for (const auto& p : pls) out.push_back(p.box);
  return out;
}

Eigen::MatrixXd size_estimate(const Predictions& preds, const SslConfig& config) {
  return scale_signal(preds.size.array().cwiseMax(0.0).cwiseMin(1.0), config.scaling.size_scale).matrix();
}

Eigen::MatrixXd label_estimate(const Predictions& preds, const SslConfig& config) {
  return scale_signal(preds.class_probs.array(), config.scaling.label_scale).matrix();
}

// ----------------------------------------------------------------- sampler

SamplerResult run_sampler(const DecodeFn& decode_fn, int n_rows, const SslConfig& config,
                          const NoiseSchedule& schedule, std::mt19937_64& rng) {
  SamplerResult r;
  r.state = init_noisy_state(n_rows, config.detector.n_classes, config, rng);
  auto run_decode = [&](const DiffusionState& s, int t) {
    r.row_counts.push_back(s.rows());
    ++r.decodes;
    Predictions p = decode_fn(s, t);
    if (p.rows() != s.rows()) throw std::logic_error("run_sampler: decoder changed the row count");
    return p;
  };
  if (config.ddim_steps > 0) {
    for (const auto& [t_cur, t_next] : timestep_pairs(config.ddim_steps, config.max_t)) {
      const Predictions preds = run_decode(r.state, t_cur);
      if (config.ddim_on) {
        r.state = ddim_step(r.state, size_estimate(preds, config), label_estimate(preds, config), t_cur,
                            t_next, schedule, config.scaling);
        hold_disabled(r.state, config);
      }
      if (config.renewal_on) r.state = box_renewal(r.state, preds, config, rng);
    }
  }
  r.preds = run_decode(r.state, r.state.t);
  return r;
}

Inference run_inference(const ParamStore& params, const PointCloud& cloud, const SslConfig& config,
                        const NoiseSchedule& schedule, std::mt19937_64& rng) {
  const auto& det = config.detector;
  const EncodedScene enc = encode(cloud, params, det);
  const IndexList center_index = det.sampling == SamplingStrategy::kFps ? select_centers(enc, det)
                                                                       : select_centers(enc, det, rng);
  Inference out;
  out.centers.resize(static_cast<Eigen::Index>(center_index.size()), 3);
  for (std::size_t i = 0; i < center_index.size(); ++i) {
    out.centers.row(static_cast<Eigen::Index>(i)) = enc.rep_points.row(center_index[i]);
  }
  const DecodeFn fn = [&](const DiffusionState& s, int t) {
    const Candidates cands = make_candidates(enc, center_index, s);
    const RoiResult roi = extract_roi_features(enc, cands, params, det, config.scaling);
    return decode(roi.f_obj, t, params, det).preds;
  };
  out.sampler = run_sampler(fn, static_cast<int>(center_index.size()), config, schedule, rng);
  return out;
}

std::vector<PseudoLabel> generate_pseudo_labels(const DecodeFn& decode_fn, const PointCloud& centers,
                                                const SslConfig& config, const NoiseSchedule& schedule,
                                                std::mt19937_64& rng) {
  const SamplerResult r = run_sampler(decode_fn, static_cast<int>(centers.rows()), config, schedule, rng);
  return select_pseudo_labels(r.preds, centers, config);
}

std::vector<PseudoLabel> generate_pseudo_labels(const ParamStore& teacher, const Scene& scene,
                                                const SslConfig& config, const NoiseSchedule& schedule,
                                                std::mt19937_64& rng) {
  const Inference inf = run_inference(teacher, scene.cloud, config, schedule, rng);
  return select_pseudo_labels(inf.sampler.preds, inf.centers, config);
}

std::vector<Detection> detect(const ParamStore& params, const Scene& scene, const SslConfig& config,
                              const NoiseSchedule& schedule, std::mt19937_64& rng) {
  const Inference inf = run_inference(params, scene.cloud, config, schedule, rng);
  return detections_from(inf.sampler.preds, inf.centers, config.eval_nms_iou);
}

// ---------------------------------------------------------------- training

SceneLoss scene_loss_and_grad(const ParamStore& params, const TrainSample& sample, int t,
                              const SslConfig& config, const NoiseSchedule& schedule,
                              std::mt19937_64& rng, double weight, ParamStore* grads,
                              const Eigen::VectorXd* frozen_iou) {
  const auto& det = config.detector;
  ScenePass pass;
  pass.enc = encode(sample.scene.cloud, params, det);
  const IndexList center_index = select_centers(pass.enc, det, rng);
  PointCloud centers(static_cast<Eigen::Index>(center_index.size()), 3);
  for (std::size_t i = 0; i < center_index.size(); ++i) {
    centers.row(static_cast<Eigen::Index>(i)) = pass.enc.rep_points.row(center_index[i]);
  }
  const PreparedTargets targets = prepare_targets(sample.targets, centers, config, rng);
  const DiffusionState state = corrupt_targets(targets, t, schedule, config, rng);
  pass.cands = make_candidates(pass.enc, center_index, state);
  pass.roi = extract_roi_features(pass.enc, pass.cands, params, det, config.scaling);
  pass.dec = decode(pass.roi.f_obj, t, params, det);

  const bool any_supervised = std::any_of(targets.assignment.role.begin(), targets.assignment.role.end(),
                                          [](Role r) { return r != Role::kIgnore; });
  if (!any_supervised) return {};
  const LossResult loss = detection_loss(pass.dec.preds, pass.cands.centers, targets.assignment,
                                         sample.targets, det, frozen_iou);
  if (grads != nullptr) backward_pass(pass, loss.grad_raw * weight, params, det, *grads);
  return {loss.value, loss.terms, loss.iou_targets};
}

StepResult student_step(const std::vector<TrainSample>& labeled,
                        const std::vector<TrainSample>& unlabeled, ParamStore& student,
                        ParamStore* teacher, OptimState& opt, const SslConfig& config,
                        const NoiseSchedule& schedule, std::uint64_t seed) {
  if (labeled.empty()) throw std::invalid_argument("student_step: labeled batch is empty");
  ParamStore grads = student.zeros_like();
  std::uniform_int_distribution<int> pick_t(1, config.max_t);
  StepResult r;

  const double wl = 1.0 / static_cast<double>(labeled.size());
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    auto rng = make_rng({seed, 0, i});
    const int t = pick_t(rng);
    r.labeled += wl * scene_loss_and_grad(student, labeled[i], t, config, schedule, rng, wl, &grads).value;
  }
  if (!unlabeled.empty() && config.lambda_u != 0.0) {
    const double wu = 1.0 / static_cast<double>(unlabeled.size());
    for (std::size_t i = 0; i < unlabeled.size(); ++i) {
      auto rng = make_rng({seed, 1, i});
      const int t = pick_t(rng);
      r.unlabeled += wu * scene_loss_and_grad(student, unlabeled[i], t, config, schedule, rng,
                                              config.lambda_u * wu, &grads).value;
    }
  }
  r.total = r.labeled + config.lambda_u * r.unlabeled;
  if (!std::isfinite(r.total) || !grads.all_finite()) {
    throw NonFiniteError("non-finite loss (" + std::to_string(r.total) + ")");
  }
  adamw_step(student, grads, opt);
  if (teacher != nullptr) ema_update(*teacher, student, config.ema_decay);
  return r;
}

namespace {

double factor_at(int epoch, int total, std::initializer_list<std::pair<double, double>> milestones) {
  double f = 1.0;
  for (const auto& [frac, mult] : milestones) {
    if (epoch >= static_cast<int>(std::lround(frac * total))) f *= mult;
  }
  return f;
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64 rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

TrainSample strong_sample(const Scene& scene, std::uint64_t seed, const SslConfig& config) {
  Augmented a = augment(scene, AugStrength::kStrong, seed, config.augment);
  TrainSample s;
  s.targets = a.scene.gt_boxes;
  s.scene = std::move(a.scene);
  return s;
}

template <typename Fn>
EpochRecord run_epoch(Phase phase, int epoch, int steps, double lr, Fn&& step_fn) {
  EpochRecord rec;
  rec.phase = phase;
  rec.epoch = epoch + 1;
  rec.steps = steps;
  rec.lr = lr;
  for (int s = 0; s < steps; ++s) {
    StepResult r;
    try {
      r = step_fn(s);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(std::string(e.what()) + " at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(s + 1));
    }
    rec.loss += r.total / steps;
    rec.loss_labeled += r.labeled / steps;
    rec.loss_unlabeled += r.unlabeled / steps;
  }
  return rec;
}

}  // namespace

double pretrain_lr_factor(int epoch, int total) {
  return factor_at(epoch, total, {{4.0 / 9.0, 0.1}, {6.0 / 9.0, 0.1}, {8.0 / 9.0, 0.1}});
}

double ssl_lr_factor(int epoch, int total) {
  return factor_at(epoch, total, {{0.4, 0.3}, {0.6, 0.3}, {0.8, 0.1}, {0.9, 0.1}});
}

TrainState start_pretrain(const SslConfig& config, std::uint64_t seed) {
  config.validate();
  TrainState s;
  s.phase = Phase::kPretrain;
  s.student = init_detector_params(config.detector, seed);
  s.teacher = s.student;
  s.opt = OptimState::for_params(s.student, config.adamw);
  return s;
}

TrainState start_ssl(const ParamStore& pretrained, const SslConfig& config) {
  config.validate();
  TrainState s;
  s.phase = Phase::kSsl;
  s.student = pretrained;
  s.teacher = pretrained;
  s.opt = OptimState::for_params(pretrained, config.adamw);
  return s;
}

void run_pretrain(TrainState& state, const std::vector<Scene>& labeled, const SslConfig& config,
                  std::uint64_t seed, const EpochHook& hook) {
  if (labeled.empty()) throw std::invalid_argument("pretrain: no labeled scenes");
  const NoiseSchedule schedule(config.max_t);
  const int bl = config.batch_labeled;
  const int steps = static_cast<int>((labeled.size() + static_cast<std::size_t>(bl) - 1) / static_cast<std::size_t>(bl));
  for (int e = state.epoch; e < config.pretrain_epochs; ++e) {
    state.opt.config.lr = config.adamw.lr * pretrain_lr_factor(e, config.pretrain_epochs);
    const auto order = shuffled(labeled.size(), make_rng({seed, kPhasePretrain, kStreamOrder, std::uint64_t(e)}));
    auto rec = run_epoch(Phase::kPretrain, e, steps, state.opt.config.lr, [&](int s) {
      const std::uint64_t step_seed =
          make_rng({seed, kPhasePretrain, kStreamStep, std::uint64_t(e), std::uint64_t(s)})();
      std::vector<TrainSample> batch;
      for (int j = s * bl; j < std::min<int>((s + 1) * bl, static_cast<int>(labeled.size())); ++j) {
        batch.push_back(strong_sample(labeled[order[static_cast<std::size_t>(j)]],
                                      step_seed + static_cast<std::uint64_t>(j), config));
      }
      return student_step(batch, {}, state.student, nullptr, state.opt, config, schedule, step_seed);
    });
    state.epoch = e + 1;
    state.teacher = state.student;
    if (hook) hook(state, rec);
  }
}

void run_ssl(TrainState& state, const std::vector<Scene>& labeled,
             const std::vector<Scene>& unlabeled, const SslConfig& config, std::uint64_t seed,
             const EpochHook& hook) {
  if (labeled.empty()) throw std::invalid_argument("ssl: no labeled scenes");
  const NoiseSchedule schedule(config.max_t);
  const int bl = config.batch_labeled;
  const int bu = unlabeled.empty() ? 0 : config.batch_unlabeled;
  const int steps = static_cast<int>((labeled.size() + static_cast<std::size_t>(bl) - 1) / static_cast<std::size_t>(bl));
  std::uint64_t cached_cycle = ~std::uint64_t{0};
  std::vector<std::size_t> cycle_order;

  for (int e = state.epoch; e < config.ssl_epochs; ++e) {
    state.opt.config.lr = config.adamw.lr * ssl_lr_factor(e, config.ssl_epochs);
    const auto order = shuffled(labeled.size(), make_rng({seed, kPhaseSsl, kStreamOrder, std::uint64_t(e)}));
    auto rec = run_epoch(Phase::kSsl, e, steps, state.opt.config.lr, [&](int s) {
      auto step_rng = make_rng({seed, kPhaseSsl, kStreamStep, std::uint64_t(e), std::uint64_t(s)});
      const std::uint64_t step_seed = step_rng();
      std::vector<TrainSample> lab;
      for (int j = s * bl; j < std::min<int>((s + 1) * bl, static_cast<int>(labeled.size())); ++j) {
        lab.push_back(strong_sample(labeled[order[static_cast<std::size_t>(j)]], step_rng(), config));
      }
      std::vector<TrainSample> unl;
      const std::uint64_t global_step = static_cast<std::uint64_t>(e) * steps + static_cast<std::uint64_t>(s);
      for (int u = 0; u < bu; ++u) {
        const std::uint64_t q = global_step * static_cast<std::uint64_t>(bu) + static_cast<std::uint64_t>(u);
        const std::uint64_t cycle = q / unlabeled.size();
        if (cycle != cached_cycle) {
          cycle_order = shuffled(unlabeled.size(), make_rng({seed, kPhaseSsl, kStreamUnlabeledOrder, cycle}));
          cached_cycle = cycle;
        }
        const Scene& scene = unlabeled[cycle_order[q % unlabeled.size()]];
        const Augmented weak = augment(scene, AugStrength::kWeak, step_rng(), config.augment);
        Augmented strong = augment(scene, AugStrength::kStrong, step_rng(), config.augment);
        auto pl_rng = make_rng({step_rng()});
        const auto pls = generate_pseudo_labels(state.teacher, weak.scene, config, schedule, pl_rng);
        TrainSample sample;
        sample.targets = apply_to_boxes(apply_inverse_to_boxes(boxes_of(pls), weak.transform), strong.transform);
        sample.scene = std::move(strong.scene);
        sample.scene.gt_boxes.clear();
        unl.push_back(std::move(sample));
      }
      return student_step(lab, unl, state.student, &state.teacher, state.opt, config, schedule, step_seed);
    });
    state.epoch = e + 1;
    if (hook) hook(state, rec);
  }
}

ParamStore pretrain(const std::vector<Scene>& labeled, const SslConfig& config, std::uint64_t seed) {
  TrainState s = start_pretrain(config, seed);
  run_pretrain(s, labeled, config, seed);
  return s.student;
}

// -------------------------------------------------------------- evaluation

EvalResult evaluate(const SceneDetectFn& detect_fn, const std::vector<Scene>& scenes, std::uint64_t seed) {
  SceneDetections dets;
  SceneBoxes gts;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    auto rng = make_rng({seed, kStreamEval, i});
    dets.push_back(detect_fn(scenes[i], rng));
    gts.push_back(scenes[i].gt_boxes);
  }
  return {map_at(dets, gts, 0.25), map_at(dets, gts, 0.5)};
}

EvalResult evaluate(const ParamStore& params, const std::vector<Scene>& scenes,
                    const SslConfig& config, std::uint64_t seed) {
  const NoiseSchedule schedule(config.max_t);
  return evaluate([&](const Scene& scene, std::mt19937_64& rng) { return detect(params, scene, config, schedule, rng); },
                  scenes, seed);
}

PseudoLabelQuality evaluate_pseudo_labels(const ParamStore& teacher, const std::vector<Scene>& scenes,
                                          const SslConfig& config, std::uint64_t seed,
                                          double iou_thresh) {
  const NoiseSchedule schedule(config.max_t);
  SceneDetections pls;
  SceneBoxes gts;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    auto rng = make_rng({seed, kStreamEval, i});
    std::vector<Detection> d;
    for (const auto& p : generate_pseudo_labels(teacher, scenes[i], config, schedule, rng)) {
      d.push_back({p.box, p.score()});
    }
    pls.push_back(std::move(d));
    gts.push_back(scenes[i].gt_boxes);
  }
  return pseudo_label_quality(pls, gts, iou_thresh);
}

}  // namespace diffdet3d
