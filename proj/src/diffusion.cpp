#include "diffdet3d/diffusion.hpp"

#include <numbers>
#include <string>

namespace diffdet3d {

double cosine_alpha_bar(int t, int max_t, double offset) {
  if (max_t < 1) throw std::invalid_argument("cosine_alpha_bar: T must be >= 1");
  if (t < 0 || t > max_t) {
    throw std::out_of_range("cosine_alpha_bar: t=" + std::to_string(t) + " outside [0, " +
                            std::to_string(max_t) + "]");
  }
  if (t == 0) return 1.0;
  if (t == max_t) return 0.0;
  const auto f = [&](double tt) {
    const double c = std::cos(((tt / max_t + offset) / (1.0 + offset)) * std::numbers::pi / 2.0);
    return c * c;
  };
  return f(t) / f(0.0);
}

NoiseSchedule::NoiseSchedule(int max_t, double offset)
    : max_t_(max_t),
      alpha_bar_(max_t + 1),
      alpha_(max_t + 1),
      beta_(max_t + 1) {
  if (max_t < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
  for (int t = 0; t <= max_t; ++t) alpha_bar_(t) = cosine_alpha_bar(t, max_t, offset);
  alpha_(0) = 1.0;
  beta_(0) = 0.0;
  for (int t = 1; t <= max_t; ++t) {
    beta_(t) = std::min(1.0 - alpha_bar_(t) / alpha_bar_(t - 1), kMaxBeta);
    alpha_(t) = 1.0 - beta_(t);
  }
}

void NoiseSchedule::check_range(int t) const {
  if (t < -1 || t > max_t_) {
    throw std::out_of_range("NoiseSchedule: timestep " + std::to_string(t) + " out of range");
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  check_range(t);
  return t < 0 ? 1.0 : alpha_bar_(t);
}

double NoiseSchedule::alpha(int t) const {
  check_range(t);
  return t < 0 ? 1.0 : alpha_(t);
}

double NoiseSchedule::beta(int t) const {
  check_range(t);
  return t < 0 ? 0.0 : beta_(t);
}

Eigen::MatrixXd corrupt(const Eigen::MatrixXd& x0, int t, const Eigen::MatrixXd& noise,
                        const NoiseSchedule& schedule) {
  if (x0.rows() != noise.rows() || x0.cols() != noise.cols()) {
    throw std::invalid_argument("corrupt: x0 and noise shapes differ");
  }
  if (t < 0 || t > schedule.max_t()) throw std::out_of_range("corrupt: timestep out of range");
  const double ab = schedule.alpha_bar(t);
  if (ab == 1.0) return x0;
  if (ab == 0.0) return noise;
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

void DiffusionState::validate() const {
  if (sizes.cols() != 3) throw std::invalid_argument("DiffusionState: sizes must have 3 columns");
  if (labels.rows() != sizes.rows()) {
    throw std::invalid_argument("DiffusionState: size and label row counts differ");
  }
  if (!sizes.allFinite() || !labels.allFinite()) {
    throw std::invalid_argument("DiffusionState: non-finite entries");
  }
}

DiffusionState ddim_step(const DiffusionState& state, const Eigen::MatrixXd& x0_sizes,
                         const Eigen::MatrixXd& x0_labels, int t_cur, int t_next,
                         const NoiseSchedule& schedule, const ScalingConfig& scaling) {
  if (t_cur <= 0) throw std::invalid_argument("ddim_step: t_cur must be positive");
  if (t_next > t_cur) throw std::invalid_argument("ddim_step: t_next must not exceed t_cur");
  if (x0_sizes.rows() != state.sizes.rows() || x0_sizes.cols() != state.sizes.cols() ||
      x0_labels.rows() != state.labels.rows() || x0_labels.cols() != state.labels.cols()) {
    throw std::invalid_argument("ddim_step: estimate shape does not match state");
  }
  if (!x0_sizes.allFinite() || !x0_labels.allFinite()) {
    throw std::invalid_argument("ddim_step: non-finite x0 estimate");
  }
  const Eigen::MatrixXd sizes_hat =
      x0_sizes.cwiseMax(-scaling.size_scale).cwiseMin(scaling.size_scale);
  const Eigen::MatrixXd labels_hat =
      x0_labels.cwiseMax(-scaling.label_scale).cwiseMin(scaling.label_scale);
  const double ab_cur = schedule.alpha_bar(t_cur);
  const double ab_next = schedule.alpha_bar(t_next);

  DiffusionState out;
  out.t = t_next;
  if (t_next < 0) {
    out.sizes = sizes_hat;
    out.labels = labels_hat;
    return out;
  }
  out.sizes = ddim_update(state.sizes, sizes_hat, ab_cur, ab_next);
  out.labels = ddim_update(state.labels, labels_hat, ab_cur, ab_next);
  return out;
}

std::vector<std::pair<int, int>> timestep_pairs(int steps, int max_t) {
  if (steps < 1) throw std::invalid_argument("timestep_pairs: steps must be >= 1");
  if (max_t < 1) throw std::invalid_argument("timestep_pairs: T must be >= 1");
  std::vector<int> times;
  times.reserve(static_cast<std::size_t>(steps) + 1);
  const double lo = -1.0;
  const double hi = static_cast<double>(max_t - 1);
  for (int i = steps; i >= 0; --i) {
    const double v = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(steps);
    times.push_back(static_cast<int>(std::lround(v)));
  }
  std::vector<std::pair<int, int>> pairs;
  for (std::size_t i = 0; i + 1 < times.size(); ++i) {
    if (times[i + 1] >= times[i]) {
      throw std::invalid_argument("timestep_pairs: too many steps for T (non-decreasing pair)");
    }
    pairs.emplace_back(times[i], times[i + 1]);
  }
  return pairs;
}

}  // namespace diffdet3d
