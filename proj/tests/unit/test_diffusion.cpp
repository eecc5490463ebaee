#include "diffdet3d/diffusion.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace diffdet3d;

namespace {

long double closed_form_alpha_bar(int t, int max_t) {
  const long double pi = 3.14159265358979323846264338327950288L;
  const long double s = 0.008L;
  auto f = [&](long double x) {
    const long double c = std::cos((x + s) / (1.0L + s) * pi / 2.0L);
    return c * c;
  };
  return f(static_cast<long double>(t) / max_t) / f(0.0L);
}

Eigen::MatrixXd gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  }
  return m;
}

}  // namespace

TEST_SUITE("diffusion") {
  TEST_CASE("alpha bar endpoints") {
    CHECK(cosine_alpha_bar(0, 1000) == 1.0);
    CHECK(std::abs(cosine_alpha_bar(1000, 1000)) < 1e-15);
  }

  TEST_CASE("alpha bar at the midpoint matches a high-precision evaluation") {
    const double v = cosine_alpha_bar(500, 1000);
    CHECK(std::abs(v - static_cast<double>(closed_form_alpha_bar(500, 1000))) < 1e-12);
    CHECK(v == doctest::Approx(0.4938).epsilon(1e-3));
  }

  TEST_CASE("schedule tables are monotone and clipped") {
    const NoiseSchedule s(1000);
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.alpha_bar(-1) == 1.0);
    CHECK(s.alpha_bar(1000) >= 0.0);
    for (int t = 1; t <= 1000; ++t) {
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      CHECK(s.beta(t) <= 0.999);
      CHECK(s.beta(t) == doctest::Approx(1.0 - s.alpha(t)));
    }
    CHECK_THROWS_AS(s.alpha_bar(1001), std::out_of_range);
    CHECK_THROWS_AS(s.alpha_bar(-2), std::out_of_range);
  }

  TEST_CASE("signal scaling maps the unit interval onto the symmetric range") {
    CHECK(scale_signal(0.5, 4.0) == 0.0);
    CHECK(scale_signal(1.0, 4.0) == 4.0);
    CHECK(scale_signal(0.0, 4.0) == -4.0);
    CHECK(std::abs(unscale_signal(scale_signal(0.3, 4.0), 4.0) - 0.3) < 1e-12);
    CHECK(unscale_signal(9.0, 4.0) == 1.0);
    CHECK(unscale_signal(-9.0, 4.0) == 0.0);
  }

  TEST_CASE("corrupt at the endpoints") {
    const NoiseSchedule s(1000);
    std::mt19937_64 rng(1);
    const Eigen::MatrixXd x0 = gaussian(5, 4, rng);
    const Eigen::MatrixXd eps = gaussian(5, 4, rng);
    CHECK(corrupt(x0, 0, eps, s) == x0);
    CHECK((corrupt(x0, 1000, eps, s) - eps).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS_AS(corrupt(x0, 0, gaussian(4, 4, rng), s), std::invalid_argument);
  }

  TEST_CASE("corrupt marginals match the forward process") {
    const NoiseSchedule s(1000);
    const double ab = s.alpha_bar(500);
    std::mt19937_64 rng(2);
    const Eigen::MatrixXd x0 = Eigen::MatrixXd::Ones(2, 3);
    const int draws = 100000;
    Eigen::ArrayXXd sum = Eigen::ArrayXXd::Zero(2, 3), sum2 = Eigen::ArrayXXd::Zero(2, 3);
    for (int d = 0; d < draws; ++d) {
      const Eigen::ArrayXXd x = corrupt(x0, 500, gaussian(2, 3, rng), s).array();
      sum += x;
      sum2 += x * x;
    }
    const Eigen::ArrayXXd mean = sum / draws;
    const Eigen::ArrayXXd var = (sum2 - draws * mean * mean) / (draws - 1);
    const double se = std::sqrt((1.0 - ab) / draws);
    CHECK(((mean - std::sqrt(ab)).abs() < 3.0 * se).all());
    CHECK((((var - (1.0 - ab)) / (1.0 - ab)).abs() < 0.02).all());
  }

  TEST_CASE("ddim update closed form") {
    Eigen::MatrixXd xt(1, 1), x0(1, 1);
    xt << 0.7;
    x0 << 0.2;
    const double eps = (0.7 - 0.5 * 0.2) / std::sqrt(0.75);
    const double expected = 0.9 * 0.2 + std::sqrt(0.19) * eps;
    CHECK(std::abs(ddim_update(xt, x0, 0.25, 0.81)(0, 0) - expected) < 1e-14);
  }

  TEST_CASE("ddim update with exact noise and equal steps is the identity") {
    std::mt19937_64 rng(3);
    const Eigen::MatrixXd x0 = gaussian(4, 3, rng), eps = gaussian(4, 3, rng);
    const double ab = 0.37;
    const Eigen::MatrixXd xt = std::sqrt(ab) * x0 + std::sqrt(1 - ab) * eps;
    CHECK((ddim_update(xt, x0, ab, ab) - xt).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("ddim step to the end returns the clamped estimate") {
    const NoiseSchedule s(1000);
    std::mt19937_64 rng(4);
    DiffusionState st;
    st.sizes = gaussian(6, 3, rng);
    st.labels = gaussian(6, 4, rng);
    st.t = 999;
    Eigen::MatrixXd sz = gaussian(6, 3, rng), lb = gaussian(6, 4, rng);
    sz(0, 0) = 11.0;
    lb(1, 1) = -11.0;
    const auto out = ddim_step(st, sz, lb, 999, -1, s, ScalingConfig{});
    CHECK(out.t == -1);
    CHECK(out.sizes(0, 0) == 4.0);
    CHECK(out.labels(1, 1) == -4.0);
    CHECK(out.sizes.bottomRows(5) == sz.bottomRows(5).cwiseMax(-4.0).cwiseMin(4.0));
    CHECK(out.rows() == 6);
  }

  TEST_CASE("timestep pairs") {
    using P = std::vector<std::pair<int, int>>;
    CHECK(timestep_pairs(1, 1000) == P{{999, -1}});
    CHECK(timestep_pairs(2, 1000) == P{{999, 499}, {499, -1}});
    const auto four = timestep_pairs(4, 1000);
    REQUIRE(four.size() == 4);
    CHECK(four.front().first == 999);
    CHECK(four.back().second == -1);
    for (std::size_t i = 0; i < four.size(); ++i) {
      CHECK(four[i].first > four[i].second);
      if (i > 0) CHECK(four[i].first == four[i - 1].second);
    }
    CHECK_THROWS_AS(timestep_pairs(0, 1000), std::invalid_argument);
  }
}
