#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace diffdet3d {

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

/// Closed-form cosine schedule: f(t) / f(0) with
/// f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2). Exactly 1 at t = 0, exactly 0 at t = T.
double cosine_alpha_bar(int t, int max_t, double offset = kCosineOffset);

/// Precomputed signal-retention tables over t = 0..T.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int max_t = 1000, double offset = kCosineOffset);

  int max_t() const { return max_t_; }

  /// alpha_bar(t) for t in [-1, T]; t = -1 is the fully denoised state (1.0).
  double alpha_bar(int t) const;
  double alpha(int t) const;
  double beta(int t) const;

  const Eigen::VectorXd& alpha_bar_table() const { return alpha_bar_; }
  const Eigen::VectorXd& beta_table() const { return beta_; }

 private:
  void check_range(int t) const;

  int max_t_;
  Eigen::VectorXd alpha_bar_;
  Eigen::VectorXd alpha_;
  Eigen::VectorXd beta_;
};

struct ScalingConfig {
  double size_scale = 4.0;
  double label_scale = 4.0;

  void validate() const {
    if (!(size_scale > 0.0) || !(label_scale > 0.0)) {
      throw std::invalid_argument("ScalingConfig: scales must be positive");
    }
  }
};

/// [0,1] -> [-scale, scale].
template <typename Derived>
auto scale_signal(const Eigen::ArrayBase<Derived>& x, double scale) {
  return (x * 2.0 - 1.0) * scale;
}

inline double scale_signal(double x, double scale) { return (x * 2.0 - 1.0) * scale; }

/// Inverse of scale_signal; input is clamped to [-scale, scale] first so the
/// result always lies in [0, 1].
template <typename Derived>
auto unscale_signal(const Eigen::ArrayBase<Derived>& y, double scale) {
  return (y.cwiseMax(-scale).cwiseMin(scale) / scale + 1.0) * 0.5;
}

inline double unscale_signal(double y, double scale) {
  const double c = y < -scale ? -scale : (y > scale ? scale : y);
  return (c / scale + 1.0) * 0.5;
}

/// Forward corruption q(x_t | x_0): sqrt(ab) * x0 + sqrt(1 - ab) * noise.
Eigen::MatrixXd corrupt(const Eigen::MatrixXd& x0, int t, const Eigen::MatrixXd& noise,
                        const NoiseSchedule& schedule);

/// Deterministic DDIM update (eta = 0) on one matrix, given alpha_bar values.
/// `x0_hat` is used as is; callers clamp it beforehand.
template <typename DerivedX, typename DerivedX0>
Eigen::MatrixXd ddim_update(const Eigen::MatrixBase<DerivedX>& x_t,
                            const Eigen::MatrixBase<DerivedX0>& x0_hat, double ab_cur,
                            double ab_next) {
  const Eigen::MatrixXd eps = (x_t - std::sqrt(ab_cur) * x0_hat) / std::sqrt(1.0 - ab_cur);
  return std::sqrt(ab_next) * x0_hat + std::sqrt(1.0 - ab_next) * eps;
}

/// Noisy sizes and label distributions for N_b candidates, in scaled space.
struct DiffusionState {
  Eigen::MatrixXd sizes;   // N_b x 3
  Eigen::MatrixXd labels;  // N_b x N_cls
  int t = -1;

  Eigen::Index rows() const { return sizes.rows(); }
  void validate() const;
};

/// One DDIM step from state.t (= t_cur) to t_next. The size and label
/// estimates are clamped to their scale ranges before use. t_next = -1 yields
/// the clamped estimates exactly.
DiffusionState ddim_step(const DiffusionState& state, const Eigen::MatrixXd& x0_sizes,
                         const Eigen::MatrixXd& x0_labels, int t_cur, int t_next,
                         const NoiseSchedule& schedule, const ScalingConfig& scaling);

/// `steps` (t_cur, t_next) pairs from T-1 down to -1 built from steps+1
/// evenly spaced values rounded to the nearest integer.
std::vector<std::pair<int, int>> timestep_pairs(int steps, int max_t);

}  // namespace diffdet3d
