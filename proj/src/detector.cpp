#include "diffdet3d/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <tuple>

namespace diffdet3d {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

// ------------------------------------------------------------------- config

MlpSpec DetectorConfig::encoder_spec() const {
  return {"encoder", {encoder_in_width(), encoder_hidden, feature_width}, true};
}

MlpSpec DetectorConfig::roi_spec() const {
  return {"roi", {pooled_width(), roi_hidden, roi_hidden, feature_width}, true};
}

MlpSpec DetectorConfig::decoder_spec() const {
  return {"decoder", {decoder_in_width(), decoder_hidden, decoder_hidden, head_width()}, false};
}

void DetectorConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("DetectorConfig." + key + ": " + why);
  };
  if (n_classes < 2) fail("n_classes", "must be >= 2");
  if (feature_width < 1) fail("feature_width", "must be >= 1");
  if (n_rep_points < 1) fail("n_rep_points", "must be >= 1");
  if (n_proposals < 1) fail("n_proposals", "must be >= 1");
  if (n_proposals > n_rep_points) fail("n_proposals", "must not exceed n_rep_points");
  if (knn < 1) fail("knn", "must be >= 1");
  if (context_knn < 1) fail("context_knn", "must be >= 1");
  if (time_embed_width < 2 || time_embed_width % 2 != 0) fail("time_embed_width", "must be even and >= 2");
  if (encoder_hidden < 1 || roi_hidden < 1 || decoder_hidden < 1) fail("hidden", "widths must be >= 1");
  if (!(neg_radius > 0.0)) fail("neg_radius", "must be positive");
  if (!(length_unit > 0.0)) fail("length_unit", "must be positive");
}

ParamStore init_detector_params(const DetectorConfig& config, std::uint64_t seed) {
  config.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32), 0xde7u};
  std::mt19937_64 rng(seq);
  ParamStore params;
  config.encoder_spec().init(params, rng);
  config.roi_spec().init(params, rng);
  config.decoder_spec().init(params, rng);
  return params;
}

// ------------------------------------------------------------------ encoder

namespace {

/// Mean offset and per-axis spread of the k nearest rows of `pool` around
/// row `self` (which is excluded). Scanning in index order keeps the lower
/// index on distance ties.
Eigen::Matrix<double, 1, 6> neighborhood_stats(const PointCloud& pool, Eigen::Index self, Eigen::Index k,
                                               std::vector<double>& best_d, std::vector<Eigen::Index>& best_i) {
  Eigen::Matrix<double, 1, 6> out = Eigen::Matrix<double, 1, 6>::Zero();
  k = std::min<Eigen::Index>(k, pool.rows() - 1);
  if (k <= 0) return out;
  best_d.resize(static_cast<std::size_t>(k));
  best_i.resize(static_cast<std::size_t>(k));
  const Eigen::RowVector3d p = pool.row(self);
  const Eigen::VectorXd d2 = (pool.rowwise() - p).rowwise().squaredNorm();
  Eigen::Index m = 0;
  for (Eigen::Index i = 0; i < pool.rows(); ++i) {
    if (i == self) continue;
    const double d = d2(i);
    if (m == k && !(d < best_d[static_cast<std::size_t>(k - 1)])) continue;
    Eigen::Index pos = m < k ? m++ : k - 1;
    while (pos > 0 && best_d[static_cast<std::size_t>(pos - 1)] > d) {
      best_d[static_cast<std::size_t>(pos)] = best_d[static_cast<std::size_t>(pos - 1)];
      best_i[static_cast<std::size_t>(pos)] = best_i[static_cast<std::size_t>(pos - 1)];
      --pos;
    }
    best_d[static_cast<std::size_t>(pos)] = d;
    best_i[static_cast<std::size_t>(pos)] = i;
  }
  Eigen::RowVector3d mean = Eigen::RowVector3d::Zero();
  Eigen::RowVector3d sq = Eigen::RowVector3d::Zero();
  for (Eigen::Index j = 0; j < k; ++j) {
    const Eigen::RowVector3d d = pool.row(best_i[static_cast<std::size_t>(j)]) - p;
    mean += d;
    sq += d.cwiseAbs2();
  }
  mean /= static_cast<double>(k);
  sq /= static_cast<double>(k);
  out.head<3>() = mean;
  out.tail<3>() = (sq - mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  return out;
}

}  // namespace

Eigen::MatrixXd encoder_inputs(const PointCloud& cloud, const IndexList& queries,
                               const DetectorConfig& config) {
  const auto nq = static_cast<Eigen::Index>(queries.size());
  Eigen::MatrixXd out(nq, config.encoder_in_width());
  PointCloud query_points(nq, 3);
  for (Eigen::Index q = 0; q < nq; ++q) query_points.row(q) = cloud.row(queries[static_cast<std::size_t>(q)]);
  std::vector<double> best_d;
  std::vector<Eigen::Index> best_i;
  for (Eigen::Index q = 0; q < nq; ++q) {
    out.block<1, 3>(q, 0) = (query_points.row(q).array() - 0.5) * 2.0;
    out.block<1, 6>(q, 3) =
        neighborhood_stats(cloud, queries[static_cast<std::size_t>(q)], config.knn, best_d, best_i) *
        config.knn_gain;
    out.block<1, 6>(q, 9) =
        neighborhood_stats(query_points, q, config.context_knn, best_d, best_i) * config.context_gain;
  }
  return out;
}

Eigen::Index canonical_start(const PointCloud& cloud) {
  if (cloud.rows() == 0) throw std::invalid_argument("canonical_start: empty cloud");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < cloud.rows(); ++i) {
    const auto a = cloud.row(i);
    const auto b = cloud.row(best);
    if (std::make_tuple(a(0), a(1), a(2)) < std::make_tuple(b(0), b(1), b(2))) best = i;
  }
  return best;
}

EncodedScene encode(const PointCloud& cloud, const ParamStore& params, const DetectorConfig& config,
                    Eigen::Index fps_start) {
  EncodedScene enc;
  const Eigen::Index m = std::min<Eigen::Index>(config.n_rep_points, cloud.rows());
  enc.rep_indices = farthest_point_sample(cloud, m, fps_start < 0 ? canonical_start(cloud) : fps_start);
  enc.rep_points.resize(m, 3);
  for (Eigen::Index i = 0; i < m; ++i) enc.rep_points.row(i) = cloud.row(enc.rep_indices[static_cast<std::size_t>(i)]);
  enc.inputs = encoder_inputs(cloud, enc.rep_indices, config);
  auto res = mlp_forward(params, config.encoder_spec(), enc.inputs);
  enc.features = std::move(res.output);
  enc.tape = std::move(res.tape);
  return enc;
}

// --------------------------------------------------------------- candidates

IndexList select_centers(const EncodedScene& enc, const DetectorConfig& config, Eigen::Index fps_start) {
  if (config.n_proposals > enc.rep_points.rows()) {
    throw std::invalid_argument("select_centers: N_b (" + std::to_string(config.n_proposals) +
                                ") exceeds representative points (" +
                                std::to_string(enc.rep_points.rows()) + ")");
  }
  return farthest_point_sample(enc.rep_points, config.n_proposals, fps_start);
}

IndexList select_centers(const EncodedScene& enc, const DetectorConfig& config, std::mt19937_64& rng) {
  const Eigen::Index m = enc.rep_points.rows();
  if (config.n_proposals > m) {
    throw std::invalid_argument("select_centers: N_b exceeds representative points");
  }
  if (config.sampling == SamplingStrategy::kRandom) {
    IndexList idx(static_cast<std::size_t>(m));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(config.n_proposals));
    return idx;
  }
  std::uniform_int_distribution<Eigen::Index> pick(0, m - 1);
  return farthest_point_sample(enc.rep_points, config.n_proposals, pick(rng));
}

Candidates make_candidates(const EncodedScene& enc, const IndexList& center_index,
                           const DiffusionState& state) {
  const auto n = static_cast<Eigen::Index>(center_index.size());
  if (state.rows() != n || state.labels.rows() != n) {
    throw std::invalid_argument("make_candidates: state rows do not match candidate count");
  }
  Candidates c;
  c.rep_index = center_index;
  c.centers.resize(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto j = center_index[static_cast<std::size_t>(i)];
    if (j < 0 || j >= enc.rep_points.rows()) throw std::out_of_range("make_candidates: bad center index");
    c.centers.row(i) = enc.rep_points.row(j);
  }
  c.sizes = state.sizes;
  c.labels = state.labels;
  return c;
}

Box3 candidate_box(const Candidates& cands, Eigen::Index i, const ScalingConfig& scaling) {
  Box3 b;
  b.center = cands.centers.row(i).transpose();
  for (int k = 0; k < 3; ++k) {
    b.size(k) = std::max(unscale_signal(cands.sizes(i, k), scaling.size_scale), 1e-9);
  }
  return b;
}

// ---------------------------------------------------------------------- RoI

Eigen::RowVectorXd pooling_row(const EncodedScene& enc, Eigen::Index j, const Point3& center,
                               const DetectorConfig& config) {
  const Eigen::Index c = enc.features.cols();
  Eigen::RowVectorXd row(c + 6);
  row.head(c) = enc.features.row(j);
  const Eigen::RowVector3d d = (enc.rep_points.row(j) - center.transpose()) * config.offset_gain;
  row.segment<3>(c) = d;
  row.segment<3>(c + 3) = -d;
  return row;
}

RoiResult extract_roi_features(const EncodedScene& enc, const Candidates& cands,
                               const ParamStore& params, const DetectorConfig& config,
                               const ScalingConfig& scaling) {
  const Eigen::Index n = cands.rows();
  const Eigen::Index width = config.pooled_width();
  if (enc.features.cols() != config.feature_width) {
    throw std::invalid_argument("extract_roi_features: feature width mismatch");
  }
  RoiResult r;
  r.pooled.resize(n, width);
  r.argmax.resize(n, width);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Box3 box = candidate_box(cands, i, scaling);
    IndexList members = points_in_box(enc.rep_points, box);
    if (members.empty()) members.push_back(cands.rep_index[static_cast<std::size_t>(i)]);
    bool first = true;
    for (const auto j : members) {
      const Eigen::RowVectorXd row = pooling_row(enc, j, box.center, config);
      for (Eigen::Index ch = 0; ch < width; ++ch) {
        if (first || row(ch) > r.pooled(i, ch)) {
          r.pooled(i, ch) = row(ch);
          r.argmax(i, ch) = j;
        }
      }
      first = false;
    }
  }
  auto res = mlp_forward(params, config.roi_spec(), r.pooled);
  r.tape = std::move(res.tape);
  r.f_obj.resize(n, config.roi_out_width());
  r.f_obj.leftCols(config.feature_width) = res.output;
  r.f_obj.rightCols(config.n_classes) = cands.labels;
  return r;
}

// ------------------------------------------------------------------ decoder

Eigen::RowVectorXd time_embedding(int t, int width) {
  const int half = width / 2;
  const double tt = static_cast<double>(std::max(t, 0));
  Eigen::RowVectorXd e(width);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    e(i) = std::sin(tt * freq);
    e(half + i) = std::cos(tt * freq);
  }
  return e;
}

Predictions Predictions::from_raw(const Eigen::MatrixXd& raw, int n_classes, double length_unit) {
  const Eigen::Index n = raw.rows();
  Predictions p;
  p.raw = raw;
  p.center_offset = raw.leftCols(3) * length_unit;
  p.size.resize(n, 3);
  p.class_logits = raw.middleCols(6, n_classes);
  p.class_probs.resize(n, n_classes);
  p.objectness.resize(n);
  p.iou_est.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) p.size(i, k) = length_unit * softplus(raw(i, 3 + k));
    const double mx = p.class_logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (p.class_logits.row(i).array() - mx).exp();
    p.class_probs.row(i) = e / e.sum();
    p.objectness(i) = sigmoid(raw(i, 6 + n_classes));
    p.iou_est(i) = sigmoid(raw(i, 7 + n_classes));
  }
  return p;
}

DecodeResult decode(const Eigen::MatrixXd& f_obj, int t, const ParamStore& params,
                    const DetectorConfig& config) {
  if (f_obj.cols() != config.roi_out_width()) {
    throw std::invalid_argument("decode: expected " + std::to_string(config.roi_out_width()) +
                                " input columns, got " + std::to_string(f_obj.cols()));
  }
  Eigen::MatrixXd input(f_obj.rows(), config.decoder_in_width());
  input.leftCols(f_obj.cols()) = f_obj;
  input.rightCols(config.time_embed_width).rowwise() = time_embedding(t, config.time_embed_width);
  auto res = mlp_forward(params, config.decoder_spec(), input);
  DecodeResult out;
  out.preds = Predictions::from_raw(res.output, config.n_classes, config.length_unit);
  out.tape = std::move(res.tape);
  return out;
}

// ----------------------------------------------------------------- matching

Assignment match_targets(const PointCloud& centers, const std::vector<Box3>& gts, double neg_radius) {
  const Eigen::Index n = centers.rows();
  Assignment a;
  a.gt_of.assign(static_cast<std::size_t>(n), -1);
  a.role.assign(static_cast<std::size_t>(n), Role::kIgnore);
  std::vector<double> best_d(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  for (std::size_t g = 0; g < gts.size(); ++g) {
    Eigen::Index best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = (centers.row(i).transpose() - gts[g].center).squaredNorm();
      if (d < best_dist) {
        best_dist = d;
        best = i;
      }
    }
    a.candidate_of_gt.push_back(best);
    if (best < 0) continue;
    const auto bi = static_cast<std::size_t>(best);
    if (best_dist < best_d[bi]) {
      best_d[bi] = best_dist;
      a.gt_of[bi] = static_cast<int>(g);
    }
    a.role[bi] = Role::kPositive;
  }
  const double r2 = neg_radius * neg_radius;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ii = static_cast<std::size_t>(i);
    if (a.role[ii] == Role::kPositive) continue;
    bool far = true;
    for (const auto& g : gts) {
      if ((centers.row(i).transpose() - g.center).squaredNorm() <= r2) {
        far = false;
        break;
      }
    }
    if (far) a.role[ii] = Role::kNegative;
  }
  return a;
}

// --------------------------------------------------------------------- loss

double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

double huber_grad(double r, double delta) {
  if (r > delta) return delta;
  if (r < -delta) return -delta;
  return r;
}

Box3 predicted_box(const Predictions& preds, const PointCloud& centers, Eigen::Index i) {
  Box3 b;
  b.center = centers.row(i).transpose() + preds.center_offset.row(i).transpose();
  b.size = preds.size.row(i).transpose();
  b.class_id = 0;
  preds.class_probs.row(i).maxCoeff(&b.class_id);
  return b;
}

LossResult detection_loss(const Predictions& preds, const PointCloud& centers,
                          const Assignment& assignment, const std::vector<Box3>& targets,
                          const DetectorConfig& config, const Eigen::VectorXd* frozen_iou) {
  const Eigen::Index n = preds.rows();
  const int k = config.n_classes;
  if (preds.raw.rows() != n || preds.raw.cols() != config.head_width()) {
    throw std::invalid_argument("detection_loss: predictions lack raw head outputs");
  }
  if (centers.rows() != n || static_cast<Eigen::Index>(assignment.role.size()) != n) {
    throw std::invalid_argument("detection_loss: candidate count mismatch");
  }
  std::vector<Eigen::Index> pos, obj_rows;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto role = assignment.role[static_cast<std::size_t>(i)];
    if (role == Role::kPositive) pos.push_back(i);
    if (role != Role::kIgnore) obj_rows.push_back(i);
  }
  if (obj_rows.empty()) {
    throw std::invalid_argument("detection_loss: batch has neither positives nor negatives");
  }
  if (frozen_iou != nullptr && frozen_iou->size() != n) {
    throw std::invalid_argument("detection_loss: frozen IoU targets have the wrong length");
  }
  LossResult out;
  out.grad_raw = Eigen::MatrixXd::Zero(n, config.head_width());
  out.iou_targets = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::quiet_NaN());
  const double unit = config.length_unit;

  if (!pos.empty()) {
    const double inv = 1.0 / static_cast<double>(pos.size());
    for (const auto i : pos) {
      const auto& gt = targets.at(static_cast<std::size_t>(assignment.gt_of[static_cast<std::size_t>(i)]));
      for (int d = 0; d < 3; ++d) {
        const double target_offset = gt.center(d) - centers(i, d);
        const double rc = (preds.center_offset(i, d) - target_offset) / unit;
        out.terms.center += inv * huber(rc);
        out.grad_raw(i, d) += inv * huber_grad(rc);

        const double rs = (preds.size(i, d) - gt.size(d)) / unit;
        out.terms.size += inv * huber(rs);
        out.grad_raw(i, 3 + d) += inv * huber_grad(rs) * sigmoid(preds.raw(i, 3 + d));
      }
      const int cls = gt.class_id;
      for (int c = 0; c < k; ++c) {
        out.grad_raw(i, 6 + c) += inv * (preds.class_probs(i, c) - (c == cls ? 1.0 : 0.0));
      }
      const double actual_iou =
          frozen_iou != nullptr ? (*frozen_iou)(i) : iou_aabb(predicted_box(preds, centers, i), gt);
      out.iou_targets(i) = actual_iou;
      const double s = preds.iou_est(i);
      const double ri = s - actual_iou;
      out.terms.iou += inv * huber(ri);
      out.grad_raw(i, 7 + k) += inv * huber_grad(ri) * s * (1.0 - s);
    }
    double ce = 0.0;
    for (const auto i : pos) {
      const auto& gt = targets.at(static_cast<std::size_t>(assignment.gt_of[static_cast<std::size_t>(i)]));
      const double mx = preds.class_logits.row(i).maxCoeff();
      const double lse = mx + std::log((preds.class_logits.row(i).array() - mx).exp().sum());
      ce += lse - preds.class_logits(i, gt.class_id);
    }
    out.terms.cls = ce * inv;
  }
  {
    const double inv = 1.0 / static_cast<double>(obj_rows.size());
    for (const auto i : obj_rows) {
      const double y = assignment.role[static_cast<std::size_t>(i)] == Role::kPositive ? 1.0 : 0.0;
      const double z = preds.raw(i, 6 + k);
      out.terms.objectness += inv * (softplus(z) - y * z);
      out.grad_raw(i, 6 + k) += inv * (sigmoid(z) - y);
    }
  }
  out.value = out.terms.total();
  return out;
}

// ----------------------------------------------------------------- backward

void backward_pass(const ScenePass& pass, const Eigen::MatrixXd& grad_raw, const ParamStore& params,
                   const DetectorConfig& config, ParamStore& grads) {
  const Eigen::MatrixXd d_dec_in =
      mlp_backward(params, config.decoder_spec(), pass.dec.tape, grad_raw, grads);
  const Eigen::MatrixXd d_roi_out = d_dec_in.leftCols(config.feature_width);
  const Eigen::MatrixXd d_pooled = mlp_backward(params, config.roi_spec(), pass.roi.tape, d_roi_out, grads);
  Eigen::MatrixXd d_features = Eigen::MatrixXd::Zero(pass.enc.features.rows(), pass.enc.features.cols());
  for (Eigen::Index i = 0; i < d_pooled.rows(); ++i) {
    for (Eigen::Index ch = 0; ch < config.feature_width; ++ch) {
      d_features(pass.roi.argmax(i, ch), ch) += d_pooled(i, ch);
    }
  }
  mlp_backward(params, config.encoder_spec(), pass.enc.tape, d_features, grads);
}

}  // namespace diffdet3d
