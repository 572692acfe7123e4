#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "test_util.hpp"

using namespace instalign;

namespace {

ParamVector zero_params(const MlpSpec& spec) {
  ParamVector p;
  p.shapes = mlp_layout(spec);
  p.values = VectorXd::Zero(p.total_count());
  return p;
}

}  // namespace

TEST_CASE("mlp_forward: all-zero weights map anything to zero") {
  MlpSpec spec{2, 8, 2, 3, true};
  ParamVector p = zero_params(spec);
  VectorXd x(2);
  x << 1.7, -0.3;
  VectorXd y = mlp_forward(p, spec, x);
  CHECK(y.size() == 3);
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mlp_forward: single identity layer") {
  MlpSpec spec{2, 0, 0, 2, false};
  ParamVector p = zero_params(spec);
  p.values[0] = 1.0;  // column-major 2x2 identity
  p.values[3] = 1.0;
  VectorXd x(2);
  x << 1.0, 2.0;
  VectorXd y = mlp_forward(p, spec, x);
  CHECK(y(0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y(1) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("mlp_forward: random 2-16-3 network matches naive loop oracle") {
  MlpSpec spec{2, 16, 1, 3, false};
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    ParamVector p = init_params(spec, seed);
    Rng rng(seed + 99);
    VectorXd x(2);
    x << rng.uniform(-2, 2), rng.uniform(-2, 2);
    VectorXd got = mlp_forward(p, spec, x);
    VectorXd want = testutil::naive_mlp_forward(p, spec, x);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("mlp_forward: layernorm network matches naive oracle and is deterministic") {
  MlpSpec spec{3, 12, 2, 4, true};
  ParamVector p = init_params(spec, 42);
  VectorXd x(3);
  x << 0.5, -1.25, 2.0;
  VectorXd a = mlp_forward(p, spec, x);
  VectorXd b = mlp_forward(p, spec, x);
  VectorXd want = testutil::naive_mlp_forward(p, spec, x);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("mlp_forward: batched equals per-column") {
  MlpSpec spec{4, 16, 2, 5, true};
  ParamVector p = init_params(spec, 7);
  Rng rng(3);
  MatrixXd X(4, 9);
  for (int i = 0; i < X.size(); ++i) X.data()[i] = rng.uniform(-1, 1);
  MatrixXd Y = mlp_forward(p, spec, X);
  for (int c = 0; c < X.cols(); ++c) {
    VectorXd yc = mlp_forward(p, spec, X.col(c));
    CHECK((Y.col(c) - yc).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("mlp_forward: shape mismatch raises dimension error") {
  MlpSpec spec{2, 4, 1, 1, false};
  ParamVector p = init_params(spec, 1);
  VectorXd x(3);
  x.setZero();
  CHECK_THROWS_AS(mlp_forward(p, spec, x), Error);
}

TEST_CASE("mlp_backward: zero upstream gives zero gradients") {
  MlpSpec spec{2, 8, 2, 3, true};
  ParamVector p = init_params(spec, 5);
  VectorXd x(2);
  x << 0.2, -0.7;
  auto [gp, gx] = mlp_backward(p, spec, x, VectorXd::Zero(3));
  CHECK(gp.cwiseAbs().maxCoeff() == 0.0);
  CHECK(gx.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mlp_backward: single linear layer closed form") {
  MlpSpec spec{2, 0, 0, 2, false};
  ParamVector p = init_params(spec, 9);
  VectorXd x(2), g(2);
  x << 0.3, -1.1;
  g << 2.0, -0.5;
  auto [gp, gx] = mlp_backward(p, spec, x, g);
  // grad_W = g x^T (column-major), grad_b = g, grad_x = W^T g
  Eigen::Map<const MatrixXd> W(p.values.data(), 2, 2);
  MatrixXd gw_want = g * x.transpose();
  Eigen::Map<const MatrixXd> gw(gp.data(), 2, 2);
  CHECK((gw - gw_want).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((gp.segment(4, 2) - g).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((gx - W.transpose() * g).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("mlp_backward: 2-8-8-2 layernorm net matches central finite differences") {
  MlpSpec spec{2, 8, 2, 2, true};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ParamVector p = init_params(spec, seed);
    Rng rng(seed * 31 + 7);
    VectorXd x(2);
    x << rng.uniform(-1, 1), rng.uniform(-1, 1);
    VectorXd up(2);
    up << rng.uniform(-1, 1), rng.uniform(-1, 1);
    auto [gp, gx] = mlp_backward(p, spec, x, up);

    auto loss_of_params = [&](const VectorXd& v) {
      ParamVector q = p;
      q.values = v;
      return up.dot(mlp_forward(q, spec, x).col(0));
    };
    double max_rel = 0.0;
    for (Eigen::Index i = 0; i < p.values.size(); ++i) {
      double fd = testutil::central_diff(loss_of_params, p.values, i);
      max_rel = std::max(max_rel, testutil::rel_err(fd, gp[i]));
    }
    CHECK(max_rel < 1e-4);

    auto loss_of_x = [&](const VectorXd& v) { return up.dot(mlp_forward(p, spec, v).col(0)); };
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      double fd = testutil::central_diff(loss_of_x, x, i);
      CHECK(testutil::rel_err(fd, gx[i]) < 1e-4);
    }
  }
}

TEST_CASE("layernorm: constant input maps to zero when beta is zero") {
  VectorXd x = VectorXd::Constant(6, 3.7);
  VectorXd y = layernorm(x, VectorXd::Ones(6), VectorXd::Zero(6));
  CHECK(y.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("layernorm: (-1,1) is nearly fixed") {
  VectorXd x(2);
  x << -1.0, 1.0;
  VectorXd y = layernorm(x, VectorXd::Ones(2), VectorXd::Zero(2));
  double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(y(0) == doctest::Approx(-expect).epsilon(1e-12));
  CHECK(y(1) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("layernorm: random vector matches the direct formula and centering") {
  Rng rng(77);
  VectorXd x(9), gamma(9), beta(9);
  for (int i = 0; i < 9; ++i) {
    x[i] = rng.uniform(-3, 3);
    gamma[i] = rng.uniform(0.5, 1.5);
    beta[i] = rng.uniform(-1, 1);
  }
  VectorXd y = layernorm(x, gamma, beta);
  double mu = x.mean();
  double var = (x.array() - mu).square().mean();
  for (int i = 0; i < 9; ++i) {
    double want = gamma[i] * (x[i] - mu) / std::sqrt(var + 1e-5) + beta[i];
    CHECK(y[i] == doctest::Approx(want).epsilon(1e-13));
  }
  // zero mean when beta = 0 and gamma constant
  VectorXd z = layernorm(x, VectorXd::Ones(9), VectorXd::Zero(9));
  CHECK(std::abs(z.mean()) < 1e-10);
  CHECK_THROWS_AS(layernorm(x, VectorXd::Ones(3), VectorXd::Zero(3)), Error);
}

TEST_CASE("adam_step: zero gradient leaves parameters unchanged") {
  MlpSpec spec{2, 4, 1, 1, false};
  ParamVector p = init_params(spec, 3);
  VectorXd before = p.values;
  AdamState st = AdamState::make(static_cast<int>(p.values.size()));
  CHECK(adam_step(st, p, VectorXd::Zero(p.values.size())));
  CHECK(st.step_count == 1);
  CHECK((p.values - before).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adam_step: first step has magnitude ~ lr") {
  ParamVector p;
  p.shapes = {{1, 1, false}};
  p.values = VectorXd::Constant(1, 1.0);
  AdamState st = AdamState::make(1, 0.05);
  VectorXd g = VectorXd::Constant(1, 0.73);
  CHECK(adam_step(st, p, g));
  double expected = 1.0 - 0.05 * 0.73 / (0.73 + st.eps * std::sqrt(1.0 - st.beta2));
  CHECK(p.values[0] == doctest::Approx(expected).epsilon(1e-9));
  CHECK(std::abs(1.0 - p.values[0]) == doctest::Approx(0.05).epsilon(1e-6));
}

TEST_CASE("adam_step: descends a scalar quadratic") {
  ParamVector p;
  p.shapes = {{1, 1, false}};
  p.values = VectorXd::Constant(1, 1.0);
  AdamState st = AdamState::make(1, 0.1);
  std::vector<double> traj;
  for (int i = 0; i < 100; ++i) {
    VectorXd g = VectorXd::Constant(1, 2.0 * p.values[0]);
    REQUIRE(adam_step(st, p, g));
    traj.push_back(std::abs(p.values[0]));
  }
  CHECK(traj.back() < 0.1);
  // |w| oscillates through zero; the decay shows in the per-window envelope.
  auto window_max = [&](int lo, int hi) {
    double m = 0.0;
    for (int i = lo; i < hi; ++i) m = std::max(m, traj[i]);
    return m;
  };
  double w1 = window_max(20, 40), w2 = window_max(40, 60), w3 = window_max(60, 80),
         w4 = window_max(80, 100);
  CHECK(w1 > w2);
  CHECK(w2 > w3);
  CHECK(w3 > w4);
}

TEST_CASE("adam_step: non-finite gradient is rejected without mutation") {
  ParamVector p;
  p.shapes = {{2, 1, false}};
  p.values = VectorXd::Constant(2, 0.5);
  AdamState st = AdamState::make(2);
  VectorXd g(2);
  g << 1.0, std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(adam_step(st, p, g));
  CHECK(st.step_count == 0);
  CHECK(p.values[0] == 0.5);
  CHECK(st.m.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adam_step: parameters stay finite under random bounded gradients") {
  Rng rng(2024);
  ParamVector p;
  p.shapes = {{16, 1, false}};
  p.values = VectorXd::Zero(16);
  AdamState st = AdamState::make(16, 0.01);
  for (int step = 0; step < 500; ++step) {
    VectorXd g(16);
    for (int i = 0; i < 16; ++i) g[i] = rng.uniform(-10, 10);
    REQUIRE(adam_step(st, p, g));
    REQUIRE(p.values.allFinite());
  }
}

TEST_CASE("plateau_update: improving losses never decay") {
  PlateauScheduler s;
  s.patience = 3;
  s.lr = 1e-3;
  for (int i = 0; i < 30; ++i) plateau_update(s, 1.0 / (i + 1.0));
  CHECK(s.lr == 1e-3);
}

TEST_CASE("plateau_update: constant loss for patience+1 epochs halves once") {
  PlateauScheduler s;
  s.patience = 2;
  s.factor = 0.5;
  s.lr = 1e-3;
  for (int i = 0; i < 3; ++i) plateau_update(s, 1.0);
  CHECK(s.lr == doctest::Approx(5e-4));
}

TEST_CASE("plateau_update: 1,1,1,.5,.5,.5 with patience 2 decays exactly twice") {
  PlateauScheduler s;
  s.patience = 2;
  s.factor = 0.5;
  s.lr = 1.0;
  for (double loss : {1.0, 1.0, 1.0, 0.5, 0.5, 0.5}) plateau_update(s, loss);
  CHECK(s.lr == doctest::Approx(0.25));
}

TEST_CASE("plateau_update: lr floors at min_lr and never increases") {
  PlateauScheduler s;
  s.patience = 1;
  s.factor = 0.1;
  s.lr = 1e-3;
  s.min_lr = 1e-5;
  double prev = s.lr;
  for (int i = 0; i < 50; ++i) {
    double lr = plateau_update(s, 1.0);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK(s.lr == doctest::Approx(1e-5));
}

TEST_CASE("checkpoint: round trip preserves everything") {
  MlpSpec spec{3, 8, 2, 4, true};
  ParamVector p = init_params(spec, 1234);
  Checkpoint ck;
  ck.params = p;
  ck.epoch = 17;
  ck.kind = "mlp";
  ck.extra_json = R"({"note":42})";
  auto path = std::filesystem::temp_directory_path() / "instalign_ckpt_test.bin";
  save_checkpoint(path.string(), ck);
  Checkpoint got = load_checkpoint(path.string());
  CHECK(got.epoch == 17);
  CHECK(got.kind == "mlp");
  CHECK(got.params.rng_seed == 1234);
  REQUIRE(got.params.shapes == p.shapes);
  CHECK((got.params.values - p.values).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("init_params: deterministic per seed, near-zero final option works") {
  MlpSpec spec{2, 32, 2, 2, false};
  ParamVector a = init_params(spec, 5, FinalInit::near_zero, 1e-4);
  ParamVector b = init_params(spec, 5, FinalInit::near_zero, 1e-4);
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() == 0.0);
  int final_off = a.offset(static_cast<int>(a.shapes.size()) - 1);
  const LayerShape& last = a.shapes.back();
  auto final_w = a.values.segment(final_off, last.rows * last.cols);
  CHECK(final_w.cwiseAbs().maxCoeff() <= 1e-4);
  auto final_b = a.values.segment(final_off + last.rows * last.cols, last.rows);
  CHECK(final_b.cwiseAbs().maxCoeff() == 0.0);
}
