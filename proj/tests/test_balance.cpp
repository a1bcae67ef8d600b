#include <algorithm>
#include <cmath>
#include <numeric>

#include "civbalance/balance.hpp"
#include "civbalance/errors.hpp"
#include "civbalance/rng.hpp"
#include "doctest.h"
#include "fd_oracle.hpp"
#include "ot_oracle.hpp"

using namespace civb;

namespace {

WeightedCloud point_mass(std::initializer_list<double> x) {
  Matrix p(1, x.size());
  std::copy(x.begin(), x.end(), p.values().begin());
  return {p, {1.0}};
}

Matrix random_points(std::size_t n, std::size_t d, std::uint64_t seed, double shift = 0.0) {
  Rng rng(seed);
  Matrix m(n, d);
  for (double& v : m.values()) v = standard_normal(rng) + shift;
  return m;
}

std::vector<double> random_weights(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(n);
  double total = 0.0;
  for (double& v : w) {
    v = 0.1 + uniform01(rng);
    total += v;
  }
  for (double& v : w) v /= total;
  return w;
}

}  // namespace

TEST_CASE("clouds_from_probs") {
  Matrix z{{0.0}, {1.0}, {2.0}, {3.0}};
  SUBCASE("hard assignment") {
    std::vector<double> p{1, 1, 0, 0};
    auto c = clouds_from_probs(z, p);
    CHECK(c.group1.weights == std::vector<double>{0.5, 0.5, 0.0, 0.0});
    CHECK(c.group0.weights == std::vector<double>{0.0, 0.0, 0.5, 0.5});
    CHECK(c.group1.points == z);
  }
  SUBCASE("uniform half gives identical clouds and zero ipm") {
    std::vector<double> p(4, 0.5);
    auto c = clouds_from_probs(z, p);
    CHECK(c.group1.weights == c.group0.weights);
    CHECK(std::abs(ipm_term(z, p, SinkhornConfig{})) < 1e-6);
  }
  SUBCASE("soft normalization") {
    Matrix z2{{0.0}, {1.0}};
    std::vector<double> p{0.8, 0.2};
    auto c = clouds_from_probs(z2, p);
    CHECK(c.group1.weights[0] == doctest::Approx(0.8));
    CHECK(c.group1.weights[1] == doctest::Approx(0.2));
    CHECK(c.group0.weights[0] == doctest::Approx(0.2));
    CHECK(c.group0.weights[1] == doctest::Approx(0.8));
  }
  SUBCASE("degenerate groups") {
    std::vector<double> ones(4, 1.0);
    CHECK_THROWS_AS(clouds_from_probs(z, ones), DegenerateGroupError);
    std::vector<double> zeros(4, 0.0);
    CHECK_THROWS_AS(clouds_from_probs(z, zeros), DegenerateGroupError);
  }
  SUBCASE("shape mismatch") {
    std::vector<double> p{0.5, 0.5};
    CHECK_THROWS_AS(clouds_from_probs(z, p), ShapeError);
  }
}

TEST_CASE("exact_w1_1d") {
  CHECK(exact_w1_1d(point_mass({0.0}), point_mass({1.0})) == doctest::Approx(1.0));
  WeightedCloud a{Matrix{{0.0}, {2.0}}, {0.5, 0.5}};
  CHECK(exact_w1_1d(a, a) == 0.0);
  // Optimal coupling moves half the mass 1 left and half 1 right.
  CHECK(exact_w1_1d(a, point_mass({1.0})) == doctest::Approx(1.0));
  CHECK(exact_w1_1d(a, point_mass({1.0})) == doctest::Approx(testing::brute_force_w1(a, point_mass({1.0}))));
  WeightedCloud b{Matrix{{0.0}, {0.0}}, {0.5, 0.5}};
  CHECK_THROWS_AS(exact_w1_1d(WeightedCloud{Matrix{{0.0, 1.0}}, {1.0}}, b), ShapeError);
}

TEST_CASE("exact_w1_1d agrees with the brute-force coupling oracle") {
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    WeightedCloud a{random_points(1 + seed % 5, 1, seed), random_weights(1 + seed % 5, seed + 100)};
    WeightedCloud b{random_points(2 + seed % 4, 1, seed + 50), random_weights(2 + seed % 4, seed + 200)};
    CHECK(exact_w1_1d(a, b) == doctest::Approx(testing::brute_force_w1(a, b)).epsilon(1e-9));
  }
}

TEST_CASE("sinkhorn_divergence values") {
  SinkhornConfig cfg;
  SUBCASE("identical measures") {
    WeightedCloud a{random_points(7, 3, 1), random_weights(7, 2)};
    CHECK(std::abs(sinkhorn_divergence(a, a, cfg)) < 1e-6);
  }
  SUBCASE("point masses recover squared distance") {
    const double d = 1.7;
    SinkhornConfig small = cfg;
    small.epsilon = 0.01 * d * d;
    const double s = sinkhorn_divergence(point_mass({0.0, 0.0}), point_mass({d, 0.0}), small);
    CHECK(std::abs(s - d * d) <= 0.05 * d * d);
  }
  SUBCASE("1-d clouds track the exact W1 when shifted apart") {
    SinkhornConfig fine = cfg;
    fine.epsilon = 0.01;
    fine.max_iter = 20000;
    WeightedCloud a{random_points(6, 1, 3), random_weights(6, 4)};
    WeightedCloud b{random_points(6, 1, 5, 2.0), random_weights(6, 6)};
    const double w1 = exact_w1_1d(a, b);
    CHECK(std::abs(std::sqrt(sinkhorn_divergence(a, b, fine)) - w1) <= 0.1 * w1);
  }
  SUBCASE("non-convergence is reported") {
    SinkhornConfig tight = cfg;
    tight.max_iter = 1;
    tight.stop_tol = 1e-14;
    tight.epsilon = 0.01;
    WeightedCloud a{random_points(5, 2, 7), random_weights(5, 8)};
    WeightedCloud b{random_points(5, 2, 9), random_weights(5, 10)};
    try {
      sinkhorn_divergence(a, b, tight);
      FAIL("expected ConvergenceError");
    } catch (const ConvergenceError& e) {
      CHECK(e.violation() > 1e-14);
    }
  }
  SUBCASE("invalid config") {
    SinkhornConfig bad = cfg;
    bad.epsilon = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.max_iter = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.stop_tol = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}

TEST_CASE("sinkhorn_divergence properties") {
  SinkhornConfig cfg;
  cfg.max_iter = 5000;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const std::size_t n = 2 + seed % 6;
    const std::size_t m = 3 + seed % 4;
    WeightedCloud a{random_points(n, 2, seed), random_weights(n, seed + 1)};
    WeightedCloud b{random_points(m, 2, seed + 2, 0.5), random_weights(m, seed + 3)};
    const double ab = sinkhorn_divergence(a, b, cfg);
    const double ba = sinkhorn_divergence(b, a, cfg);
    CHECK(ab >= -1e-8);
    CHECK(std::abs(ab - ba) < 1e-8);
    CHECK(std::abs(sinkhorn_divergence(a, a, cfg)) < 1e-6);

    // Joint permutation of (points, weights).
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    WeightedCloud pa{a.points.take_rows(perm), {}};
    for (auto k : perm) pa.weights.push_back(a.weights[k]);
    CHECK(std::abs(sinkhorn_divergence(pa, b, cfg) - ab) < 1e-12);
  }
}

TEST_CASE("entropic value approaches the exact W2 as epsilon shrinks") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const std::size_t n = 3 + seed % 8;
    WeightedCloud a{random_points(n, 1, seed + 10), random_weights(n, seed + 11)};
    WeightedCloud b{random_points(10 - seed % 5, 1, seed + 12, 1.0), random_weights(10 - seed % 5, seed + 13)};
    const double exact = testing::exact_w2_squared_1d(a, b);
    double previous_gap = std::numeric_limits<double>::infinity();
    for (double eps : {1.0, 0.1, 0.01}) {
      SinkhornConfig cfg;
      cfg.epsilon = eps;
      cfg.max_iter = 20000;
      const double gap = std::abs(sinkhorn_divergence(a, b, cfg) - exact);
      CHECK(gap <= previous_gap + 1e-12);
      previous_gap = gap;
    }
  }
}

TEST_CASE("ipm_term") {
  SinkhornConfig cfg;
  SUBCASE("constant probabilities give zero") {
    Matrix z = random_points(12, 3, 40);
    CHECK(std::abs(ipm_term(z, std::vector<double>(12, 0.5), cfg)) < 1e-6);
  }
  SUBCASE("hard groups equal the divergence between the clusters") {
    Matrix z = random_points(8, 2, 41);
    for (std::size_t i = 4; i < 8; ++i) z(i, 0) += 2.0;
    std::vector<double> p{1, 1, 1, 1, 0, 0, 0, 0};
    std::vector<std::size_t> first{0, 1, 2, 3};
    std::vector<std::size_t> second{4, 5, 6, 7};
    WeightedCloud g1{z.take_rows(first), std::vector<double>(4, 0.25)};
    WeightedCloud g0{z.take_rows(second), std::vector<double>(4, 0.25)};
    CHECK(ipm_term(z, p, cfg) == doctest::Approx(sinkhorn_divergence(g0, g1, cfg)).epsilon(1e-9));
  }
  SUBCASE("tape value equals plain value") {
    Matrix z = random_points(10, 2, 42);
    std::vector<double> p = random_weights(10, 43);
    for (double& v : p) v = std::min(1.0, v * 5.0);
    Tape tape;
    Var v = ipm_term(tape.variable(z), tape.constant(Matrix::column(p)), cfg);
    CHECK(v.value()[0] == doctest::Approx(ipm_term(z, p, cfg)).epsilon(1e-12));
  }
}

TEST_CASE("sinkhorn gradients match finite differences") {
  SinkhornConfig cfg;
  cfg.stop_tol = 1e-12;
  cfg.max_iter = 2000;

  SUBCASE("w.r.t. representation points") {
    ParamSet p;
    p.add("z", random_points(10, 2, 50));
    std::vector<double> prob = random_weights(10, 51);
    for (double& v : prob) v = std::min(0.95, v * 4.0);
    const Matrix probs = Matrix::column(prob);
    LossFn loss = [&](Tape& t, std::span<const Var> ps) { return ipm_term(ps[0], t.constant(probs), cfg); };
    CHECK(testing::gradient_check(loss, p, 1e-5) < 1e-3);
  }
  SUBCASE("w.r.t. group probabilities") {
    ParamSet p;
    std::vector<double> prob = random_weights(8, 52);
    for (double& v : prob) v = std::min(0.9, v * 4.0);
    p.add("prob", Matrix::column(prob));
    const Matrix z = random_points(8, 3, 53);
    LossFn loss = [&](Tape& t, std::span<const Var> ps) { return ipm_term(t.constant(z), ps[0], cfg); };
    CHECK(testing::gradient_check(loss, p, 1e-6) < 1e-3);
  }
  SUBCASE("identical groups sit at a stationary point") {
    ParamSet p;
    p.add("z", random_points(9, 2, 58));
    p.add("prob", Matrix(9, 1, 0.5));
    LossFn loss = [&](Tape&, std::span<const Var> ps) { return ipm_term(ps[0], ps[1], cfg); };
    const auto vg = value_and_grad(loss, p);
    CHECK(std::abs(vg.value) < 1e-9);
    for (double g : vg.grads.flatten()) CHECK(std::abs(g) < 1e-8);
  }
  SUBCASE("w.r.t. both point sets of distinct clouds at epsilon 0.01") {
    SinkhornConfig fine = cfg;
    fine.epsilon = 0.01;
    fine.max_iter = 20000;
    ParamSet p;
    p.add("xa", random_points(5, 2, 54));
    p.add("xb", random_points(6, 2, 55, 0.3));
    const Matrix wa = Matrix::column(random_weights(5, 56));
    const Matrix wb = Matrix::column(random_weights(6, 57));
    LossFn loss = [&](Tape& t, std::span<const Var> ps) {
      return sinkhorn_divergence(ps[0], t.constant(wa), ps[1], t.constant(wb), fine);
    };
    CHECK(testing::gradient_check(loss, p, 1e-6) < 1e-3);
  }
}

TEST_CASE("standardize_cloud") {
  const Matrix z = random_points(12, 3, 70, 4.0);
  Matrix scaled = z;
  for (double& v : scaled.values()) v *= 25.0;
  const Matrix y = standardize_cloud(z);
  double sq = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto col = y.col_values(c);
    CHECK(std::abs(std::accumulate(col.begin(), col.end(), 0.0)) < 1e-12);
  }
  for (double v : y.values()) sq += v * v;
  CHECK(sq / 12.0 == doctest::Approx(1.0).epsilon(1e-9));

  SUBCASE("divergence ignores the representation scale") {
    std::vector<double> prob = random_weights(12, 71);
    for (double& v : prob) v = std::min(0.9, v * 5.0);
    SinkhornConfig cfg;
    CHECK(ipm_term(standardize_cloud(z), prob, cfg) ==
          doctest::Approx(ipm_term(standardize_cloud(scaled), prob, cfg)).epsilon(1e-9));
  }
  SUBCASE("gradient matches finite differences") {
    ParamSet p;
    p.add("z", random_points(7, 2, 72));
    const Matrix r = random_points(7, 2, 73);
    std::vector<double> prob = random_weights(7, 74);
    for (double& v : prob) v = std::min(0.9, v * 4.0);
    const Matrix probs = Matrix::column(prob);
    SinkhornConfig cfg;
    cfg.stop_tol = 1e-12;
    cfg.max_iter = 2000;
    LossFn loss = [&](Tape& t, std::span<const Var> ps) {
      Var y = standardize_cloud(ps[0]);
      return ad::add(ad::sum(ad::mul(y, t.constant(r))), ipm_term(y, t.constant(probs), cfg));
    };
    CHECK(testing::gradient_check(loss, p, 1e-5) < 1e-4);
  }
}
