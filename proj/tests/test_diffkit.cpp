#include <cmath>

#include "civbalance/diffkit.hpp"
#include "civbalance/errors.hpp"
#include "civbalance/rng.hpp"
#include "doctest.h"
#include "fd_oracle.hpp"

using namespace civb;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(r, c);
  for (double& v : m.values()) v = standard_normal(rng);
  return m;
}

Matrix random_binary(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(n, 1);
  for (double& v : m.values()) v = bernoulli(rng, 0.5) ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST_CASE("mlp_init shapes and determinism") {
  SUBCASE("no hidden layers is a single linear map") {
    MlpSpec spec{3, {}, 1, OutputActivation::identity, 7};
    ParamSet p = mlp_init(spec);
    REQUIRE(p.count() == 2);
    CHECK(p.name(0) == "layer0.weight");
    CHECK(p[0].rows() == 3);
    CHECK(p[0].cols() == 1);
    CHECK(p.name(1) == "layer0.bias");
    CHECK(p[1].size() == 1);
  }
  SUBCASE("same seed gives identical parameters") {
    MlpSpec spec{4, {32, 32}, 1, OutputActivation::sigmoid, 99};
    CHECK(mlp_init(spec) == mlp_init(spec));
    MlpSpec other = spec;
    other.init_seed = 100;
    CHECK_FALSE(mlp_init(spec) == mlp_init(other));
  }
  SUBCASE("parameter count by shape arithmetic") {
    MlpSpec spec{4, {32, 32}, 1, OutputActivation::identity, 1};
    CHECK(spec.param_count() == 1249);
    CHECK(mlp_init(spec).total_size() == 1249);
  }
  SUBCASE("weights within glorot bound, biases zero") {
    MlpSpec spec{5, {8}, 2, OutputActivation::identity, 3};
    ParamSet p = mlp_init(spec);
    const double b0 = std::sqrt(6.0 / 13.0);
    for (double v : p.at("layer0.weight").values()) CHECK(std::abs(v) <= b0);
    for (double v : p.at("layer0.bias").values()) CHECK(v == 0.0);
  }
  SUBCASE("invalid dims") {
    CHECK_THROWS_AS(mlp_init(MlpSpec{0, {}, 1}), ConfigError);
    CHECK_THROWS_AS(mlp_init(MlpSpec{2, {0}, 1}), ConfigError);
    CHECK_THROWS_AS(mlp_init(MlpSpec{2, {4}, 0}), ConfigError);
  }
}

TEST_CASE("mlp_forward") {
  SUBCASE("zero parameters with sigmoid head give 0.5") {
    MlpSpec spec{3, {4}, 1, OutputActivation::sigmoid, 1};
    ParamSet p = mlp_init(spec).zeros_like();
    Matrix out = mlp_forward(p, spec, random_matrix(6, 3, 1));
    REQUIRE(out.rows() == 6);
    for (double v : out.values()) CHECK(v == 0.5);
  }
  SUBCASE("single linear layer matches hand multiply") {
    MlpSpec spec{2, {}, 2, OutputActivation::identity, 1};
    ParamSet p = mlp_init(spec);
    p.at("layer0.weight") = Matrix{{1.0, 2.0}, {3.0, 4.0}};
    p.at("layer0.bias") = Matrix{{0.5, -1.0}};
    Matrix x{{1.0, -1.0}, {2.0, 0.5}};
    Matrix out = mlp_forward(p, spec, x);
    // [1,-1]·W = [1-3, 2-4] = [-2,-2] + b = [-1.5, -3]
    // [2,.5]·W = [2+1.5, 4+2] = [3.5, 6] + b = [4, 5]
    CHECK(out(0, 0) == doctest::Approx(-1.5));
    CHECK(out(0, 1) == doctest::Approx(-3.0));
    CHECK(out(1, 0) == doctest::Approx(4.0));
    CHECK(out(1, 1) == doctest::Approx(5.0));
  }
  SUBCASE("saturated sigmoid is clamped to delta") {
    MlpSpec spec{1, {}, 1, OutputActivation::sigmoid, 1};
    ParamSet p = mlp_init(spec);
    p.at("layer0.weight") = Matrix{{-1000.0}};
    Matrix out = mlp_forward(p, spec, Matrix{{1.0}});
    CHECK(out[0] == kProbClamp);
    p.at("layer0.weight") = Matrix{{1000.0}};
    CHECK(mlp_forward(p, spec, Matrix{{1.0}})[0] == 1.0 - kProbClamp);
  }
  SUBCASE("wrong input width") {
    MlpSpec spec{3, {4}, 1, OutputActivation::sigmoid, 1};
    CHECK_THROWS_AS(mlp_forward(mlp_init(spec), spec, Matrix(2, 2)), ShapeError);
  }
}

TEST_CASE("sigmoid outputs always lie in the clamp interval") {
  MlpSpec spec{3, {5}, 1, OutputActivation::sigmoid, 11};
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    ParamSet p = mlp_init(spec);
    auto flat = p.flatten();
    for (double& v : flat) v *= 50.0;
    p.unflatten(flat);
    Matrix out = mlp_forward(p, spec, random_matrix(30, 3, trial));
    for (double v : out.values()) {
      CHECK(v >= kProbClamp);
      CHECK(v <= 1.0 - kProbClamp);
    }
  }
}

TEST_CASE("flatten and unflatten are inverse") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MlpSpec spec{1 + seed % 4, {2 + seed % 3, 3}, 1 + seed % 2, OutputActivation::identity, seed};
    ParamSet p = mlp_init(spec);
    ParamSet q = p.zeros_like();
    q.unflatten(p.flatten());
    CHECK(q == p);
    CHECK(q.flatten() == p.flatten());
  }
  ParamSet p = mlp_init(MlpSpec{2, {}, 1});
  CHECK_THROWS_AS(p.unflatten(std::vector<double>(5)), ShapeError);
}

TEST_CASE("value_and_grad") {
  MlpSpec spec{3, {4}, 1, OutputActivation::sigmoid, 5};
  ParamSet params = mlp_init(spec);

  SUBCASE("half squared norm has gradient equal to params") {
    LossFn loss = [](Tape& t, std::span<const Var> ps) {
      Var total = t.constant(Matrix(1, 1));
      for (Var p : ps) total = ad::add(total, ad::sum(ad::square(p)));
      return ad::scale(total, 0.5);
    };
    auto vg = value_and_grad(loss, params);
    CHECK(vg.grads.flatten() == params.flatten());
  }
  SUBCASE("constant loss has zero gradient") {
    LossFn loss = [](Tape& t, std::span<const Var>) { return t.constant(Matrix(1, 1, 3.0)); };
    auto vg = value_and_grad(loss, params);
    CHECK(vg.value == 3.0);
    for (double g : vg.grads.flatten()) CHECK(g == 0.0);
  }
  SUBCASE("cross-entropy gradient matches finite differences") {
    const Matrix x = random_matrix(10, 3, 21);
    const Matrix y = random_binary(10, 22);
    LossFn loss = [&](Tape& t, std::span<const Var> ps) {
      return ad::bce(mlp_forward(ps, spec, t.constant(x)), y);
    };
    CHECK(testing::gradient_check(loss, params) < 1e-4);
  }
  SUBCASE("squared error through two hidden layers matches finite differences") {
    MlpSpec reg{3, {6, 5}, 1, OutputActivation::identity, 8};
    ParamSet rp = mlp_init(reg);
    const Matrix x = random_matrix(10, 3, 23);
    const Matrix y = random_matrix(10, 1, 24);
    LossFn loss = [&](Tape& t, std::span<const Var> ps) {
      return ad::mse(mlp_forward(ps, reg, t.constant(x)), y);
    };
    CHECK(testing::gradient_check(loss, rp) < 1e-4);
  }
  SUBCASE("non-finite loss reports the stage") {
    LossFn loss = [](Tape& t, std::span<const Var>) {
      return t.constant(Matrix(1, 1, std::numeric_limits<double>::quiet_NaN()));
    };
    try {
      value_and_grad(loss, params, "civ");
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(e.stage() == "civ");
    }
  }
  SUBCASE("gradients are bitwise reproducible") {
    const Matrix x = random_matrix(10, 3, 25);
    const Matrix y = random_binary(10, 26);
    LossFn loss = [&](Tape& t, std::span<const Var> ps) {
      return ad::bce(mlp_forward(ps, spec, t.constant(x)), y);
    };
    auto a = value_and_grad(loss, params);
    auto b = value_and_grad(loss, params);
    CHECK(a.value == b.value);
    CHECK(a.grads == b.grads);
  }
}

TEST_CASE("sgd_step") {
  ParamSet p;
  p.add("w.weight", Matrix{{1.0}});
  ParamSet g;
  g.add("w.weight", Matrix{{2.0}});

  SUBCASE("arithmetic") {
    sgd_step(p, g, 0.05);
    CHECK(p[0][0] == doctest::Approx(0.9).epsilon(1e-15));
  }
  SUBCASE("zero gradient leaves params unchanged") {
    ParamSet before = p;
    sgd_step(p, g.zeros_like(), 0.05);
    CHECK(p == before);
  }
  SUBCASE("two steps equal one double step") {
    ParamSet q = p;
    sgd_step(p, g, 0.05);
    sgd_step(p, g, 0.05);
    sgd_step(q, g, 0.1);
    CHECK(p[0][0] == doctest::Approx(q[0][0]).epsilon(1e-14));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(sgd_step(p, g, 0.0), ConfigError);
    ParamSet bad;
    bad.add("other", Matrix{{1.0}});
    CHECK_THROWS_AS(sgd_step(p, bad, 0.1), ShapeError);
  }
}

TEST_CASE("adam_step") {
  ParamSet p;
  p.add("w.weight", Matrix{{0.3, -0.2, 1.5}});

  SUBCASE("first step moves by lr") {
    ParamSet g = p.zeros_like();
    for (double& v : g[0].values()) v = 1.0;
    AdamState s = AdamState::for_params(p, 0.0005);
    ParamSet before = p;
    adam_step(s, p, g);
    CHECK(s.step == 1);
    // m_hat = 1, v_hat = 1 -> lr * 1 / (1 + eps)
    const double expected = 0.0005 / (1.0 + 1e-8);
    for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs((before[0][k] - p[0][k]) - expected) < 1e-9);
  }
  SUBCASE("zero gradient leaves params unchanged") {
    AdamState s = AdamState::for_params(p, 0.0005);
    ParamSet before = p;
    for (int i = 0; i < 5; ++i) adam_step(s, p, p.zeros_like());
    CHECK(p == before);
    CHECK(s.step == 5);
  }
  SUBCASE("update opposes gradient sign") {
    ParamSet g = p.zeros_like();
    g[0] = Matrix{{2.0, -3.0, 0.5}};
    AdamState s = AdamState::for_params(p, 0.01);
    ParamSet before = p;
    adam_step(s, p, g);
    for (std::size_t k = 0; k < 3; ++k) CHECK((p[0][k] - before[0][k]) * g[0][k] < 0.0);
  }
}

TEST_CASE("l2_penalty") {
  SUBCASE("lambda zero") {
    CHECK(l2_penalty(mlp_init(MlpSpec{3, {4}, 1}), 0.0) == 0.0);
  }
  SUBCASE("single weight") {
    ParamSet p;
    p.add("layer0.weight", Matrix{{3.0}});
    p.add("layer0.bias", Matrix{{10.0}});
    CHECK(l2_penalty(p, 0.1) == doctest::Approx(0.9));
  }
  SUBCASE("gradient is 2 lambda p on weights, zero on biases") {
    MlpSpec spec{3, {4}, 2, OutputActivation::identity, 9};
    ParamSet p = mlp_init(spec);
    for (std::size_t i = 0; i < p.count(); ++i)
      for (double& v : p[i].values()) v += 0.25;
    LossFn loss = [&](Tape&, std::span<const Var> ps) { return l2_penalty(p, ps, 0.3); };
    auto vg = value_and_grad(loss, p);
    CHECK(vg.value == doctest::Approx(l2_penalty(p, 0.3)));
    for (std::size_t i = 0; i < p.count(); ++i) {
      const bool weight = is_weight_name(p.name(i));
      for (std::size_t k = 0; k < p[i].size(); ++k) {
        CHECK(vg.grads[i][k] == doctest::Approx(weight ? 0.6 * p[i][k] : 0.0));
      }
    }
    CHECK(testing::gradient_check(loss, p) < 1e-4);
  }
  SUBCASE("negative lambda") {
    CHECK_THROWS_AS(l2_penalty(mlp_init(MlpSpec{1, {}, 1}), -1.0), ConfigError);
  }
}

TEST_CASE("tape primitives agree with finite differences") {
  ParamSet p;
  p.add("a", random_matrix(4, 3, 31));
  p.add("b", random_matrix(4, 3, 32));
  p.add("c", random_matrix(4, 2, 33));
  LossFn loss = [](Tape&, std::span<const Var> ps) {
    Var ab = ad::mul(ad::sub(ps[0], ps[1]), ad::add(ps[0], ps[1]));
    Var cat = ad::concat_cols(ab, ad::sigmoid(ps[2]));
    return ad::mean(ad::square(ad::add_scalar(ad::scale(cat, 0.7), 0.1)));
  };
  CHECK(testing::gradient_check(loss, p) < 1e-6);
}
