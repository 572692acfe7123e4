#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "instalign/matching.hpp"
#include "test_util.hpp"

using namespace instalign;

namespace {

// O(N^2) oracle for kNN, same (distance, index) tie rule.
std::vector<SpatialIndex::Hit> brute_knn(const MatrixX2d& pts, const Vector2d& q, int k) {
  std::vector<SpatialIndex::Hit> all;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    all.push_back({static_cast<int>(i), (pts.row(i).transpose() - q).norm()});
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.index < b.index;
  });
  all.resize(static_cast<std::size_t>(std::min<Eigen::Index>(k, pts.rows())));
  return all;
}

MatrixX2d random_points(Rng& rng, int n, double lo = 0.0, double hi = 1.0) {
  MatrixX2d pts(n, 2);
  for (int i = 0; i < n; ++i) {
    pts(i, 0) = rng.uniform(lo, hi);
    pts(i, 1) = rng.uniform(lo, hi);
  }
  return pts;
}

double entropy(const VectorXd& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] > 0) h -= p[i] * std::log(p[i]);
  }
  return h;
}

}  // namespace

TEST_CASE("knn_query: querying an existing point returns it at distance 0") {
  Rng rng(1);
  MatrixX2d pts = random_points(rng, 50);
  SpatialIndex index(pts);
  auto hits = index.query(pts.row(17).transpose(), 1);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].index == 17);
  CHECK(hits[0].distance == 0.0);
}

TEST_CASE("knn_query: collinear points, query between") {
  MatrixX2d pts(3, 2);
  pts << 0, 0, 1, 0, 3, 0;
  SpatialIndex index(pts);
  auto hits = index.query(Vector2d(0.9, 0.0), 2);
  REQUIRE(hits.size() == 2);
  CHECK(hits[0].index == 1);
  CHECK(hits[1].index == 0);
}

TEST_CASE("knn_query: matches brute force on random and tie-heavy inputs") {
  Rng rng(2);
  MatrixX2d pts = random_points(rng, 500);
  SpatialIndex index(pts);
  for (int t = 0; t < 50; ++t) {
    Vector2d q(rng.uniform(-0.2, 1.2), rng.uniform(-0.2, 1.2));
    auto got = index.query(q, 10);
    auto want = brute_knn(pts, q, 10);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].index == want[i].index);
      CHECK(got[i].distance == doctest::Approx(want[i].distance).epsilon(1e-12));
    }
  }
  // integer grid forces exact distance ties
  MatrixX2d grid(49, 2);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) grid.row(i * 7 + j) << i, j;
  SpatialIndex gindex(grid);
  for (int t = 0; t < 30; ++t) {
    Vector2d q(static_cast<double>(rng.uniform_int(7)), static_cast<double>(rng.uniform_int(7)));
    auto got = gindex.query(q, 6);
    auto want = brute_knn(grid, q, 6);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].index == want[i].index);
  }
  CHECK_THROWS_AS(index.query(Vector2d(0, 0), 0), Error);
  // k > N returns all points
  CHECK(index.query(Vector2d(0.5, 0.5), 1000).size() == 500);
}

TEST_CASE("match_cost: coincident points, identical embeddings cost 0") {
  MatchState st;
  st.s_sp = 1.0;
  st.s_ft = 1.0;
  st.lambda_f = 1.0;
  VectorXd e = VectorXd::Ones(8);
  MatrixX2d np(1, 2);
  np << 0.5, -0.5;
  MatrixXd ne = e;
  VectorXd c = match_cost(Vector2d(0.5, -0.5), e, np, ne, st);
  CHECK(c[0] == doctest::Approx(0.0).scale(1.0).epsilon(1e-14));
}

TEST_CASE("match_cost: orthogonal embeddings cost 1; formula spot check") {
  MatchState st;
  VectorXd e1 = VectorXd::Zero(4), e2 = VectorXd::Zero(4);
  e1[0] = 3.0;  // non-unit on purpose: normalization happens inside
  e2[1] = 7.0;
  MatrixX2d np(1, 2);
  np << 1.0, 2.0;
  CHECK(match_cost(Vector2d(1, 2), e1, np, e2, st)[0] == doctest::Approx(1.0).epsilon(1e-14));

  MatchState st2;
  st2.s_sp = 2.0;
  st2.s_ft = 1.0;
  st2.lambda_f = 0.5;
  MatrixX2d np2(1, 2);
  np2 << std::sqrt(2.0), 0.0;  // squared distance 2 from origin
  VectorXd c = match_cost(Vector2d(0, 0), e1, np2, MatrixXd(-e1), st2);
  CHECK(c[0] == doctest::Approx(1.0 + 0.5 * 2.0).epsilon(1e-12));
}

TEST_CASE("match_cost: invariant to the norm of raw embeddings") {
  MatchState st;
  st.lambda_f = 0.7;
  Rng rng(3);
  VectorXd e(16);
  for (int i = 0; i < 16; ++i) e[i] = rng.uniform(-1, 1);
  MatrixX2d np(3, 2);
  MatrixXd ne(16, 3);
  for (int i = 0; i < 3; ++i) {
    np.row(i) << rng.uniform(0, 1), rng.uniform(0, 1);
    for (int r = 0; r < 16; ++r) ne(r, i) = rng.uniform(-1, 1);
  }
  VectorXd a = match_cost(Vector2d(0.3, 0.3), e, np, ne, st);
  VectorXd b = match_cost(Vector2d(0.3, 0.3), 1000.0 * e, np, 1000.0 * ne, st);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("soft_assign: uniform, sharp, and frozen softmax values") {
  VectorXd eq = VectorXd::Constant(5, 3.0);
  VectorXd p = soft_assign(eq, 0.7);
  CHECK((p.array() - 0.2).abs().maxCoeff() < 1e-15);

  VectorXd two(2);
  two << 0.0, 10.0;
  VectorXd sharp = soft_assign(two, 0.01);
  CHECK(std::abs(sharp[0] - 1.0) < 1e-9);
  CHECK(sharp[1] < 1e-9);

  VectorXd three(3);
  three << 1.0, 2.0, 3.0;
  VectorXd soft = soft_assign(three, 1.0);
  CHECK(soft[0] == doctest::Approx(0.66524096).epsilon(1e-7));
  CHECK(soft[1] == doctest::Approx(0.24472847).epsilon(1e-7));
  CHECK(soft[2] == doctest::Approx(0.09003057).epsilon(1e-7));
}

TEST_CASE("soft_assign: weights are simplex-valued; entropy grows with tau") {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    VectorXd c(8);
    for (int i = 0; i < 8; ++i) c[i] = rng.uniform(0, 5);
    double prev_entropy = -1.0;
    for (double tau : {0.05, 0.2, 1.0, 5.0, 25.0}) {
      VectorXd p = soft_assign(c, tau);
      CHECK(p.minCoeff() >= 0.0);
      CHECK(std::abs(p.sum() - 1.0) < 1e-9);
      double h = entropy(p);
      CHECK(h >= prev_entropy - 1e-12);
      prev_entropy = h;
    }
  }
  CHECK_THROWS_AS(soft_assign(VectorXd::Ones(3), 0.0), Error);
}

TEST_CASE("update_state: EMA endpoints and arithmetic") {
  MatchState st;
  st.s_sp = 1.0;
  st.s_ft = 0.5;
  st.tau = 0.25;

  st.ema_decay = 1.0;
  MatchState same = update_state(st, 9.0, 9.0, 9.0);
  CHECK(same.s_sp == 1.0);
  CHECK(same.s_ft == 0.5);
  CHECK(same.tau == 0.25);

  st.ema_decay = 0.0;
  MatchState batch = update_state(st, 2.0, 3.0, 4.0);
  CHECK(batch.s_sp == 2.0);
  CHECK(batch.s_ft == 3.0);
  CHECK(batch.tau == 4.0);

  st.ema_decay = 0.9;
  MatchState ema = update_state(st, 2.0, 0.5, 0.25);
  CHECK(ema.s_sp == doctest::Approx(1.1).epsilon(1e-14));

  st.ema_decay = 0.0;
  MatchState floored = update_state(st, 0.0, 0.0, 0.0);
  CHECK(floored.s_sp == MatchState::kFloor);
  CHECK(floored.tau == MatchState::kFloor);
}

namespace {

MatchState fixed_state(double tau = 0.05) {
  MatchState st;
  st.s_sp = 1.0;
  st.s_ft = 1.0;
  st.tau = tau;
  st.initialized = true;
  return st;
}

}  // namespace

TEST_CASE("forward_match_loss: coincident source/centroid gives 0") {
  MatrixX2d ref(1, 2);
  ref << 0.25, 0.75;
  SpatialIndex index(ref);
  MatrixXd embeds = MatrixXd::Ones(4, 1);
  MatrixX2d src = ref;
  MatchResult r = forward_match_loss(src, embeds, index, embeds, fixed_state(), 1);
  CHECK(r.loss == doctest::Approx(0.0).scale(1.0));
  CHECK(r.grad_deformed.cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("forward_match_loss: single pair at distance 1 and exact centroid cancellation") {
  MatrixX2d ref(1, 2);
  ref << 0, 0;
  SpatialIndex index(ref);
  MatrixXd e = MatrixXd::Ones(4, 1);
  MatrixX2d src(1, 2);
  src << 1, 0;
  MatchResult r = forward_match_loss(src, e, index, e, fixed_state(), 1);
  CHECK(r.loss == doctest::Approx(1.0).epsilon(1e-12));

  MatrixX2d ref2(2, 2);
  ref2 << 0, 0, 2, 0;
  SpatialIndex index2(ref2);
  MatrixXd e2 = MatrixXd::Ones(4, 2);
  MatchResult r2 = forward_match_loss(src, e, index2, e2, fixed_state(1.0), 2);
  // equidistant neighbors with identical embeddings -> p = (1/2, 1/2)
  REQUIRE(r2.assignments.size() == 1);
  CHECK(r2.assignments[0].weights[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r2.loss == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
}

TEST_CASE("forward_match_loss: gradient matches finite differences (k=1, stable assignment)") {
  Rng rng(5);
  MatrixX2d ref = random_points(rng, 40);
  SpatialIndex index(ref);
  MatrixXd ref_e(8, 40), src_e(8, 6);
  for (int i = 0; i < ref_e.size(); ++i) ref_e.data()[i] = rng.uniform(-1, 1);
  for (int i = 0; i < src_e.size(); ++i) src_e.data()[i] = rng.uniform(-1, 1);
  MatrixX2d src = random_points(rng, 6);
  MatchState st = fixed_state(0.5);

  MatchResult r = forward_match_loss(src, src_e, index, ref_e, st, 1);
  double h = 1e-6;
  for (int j = 0; j < src.rows(); ++j) {
    for (int d = 0; d < 2; ++d) {
      MatrixX2d sp = src, sm = src;
      sp(j, d) += h;
      sm(j, d) -= h;
      double fp = forward_match_loss(sp, src_e, index, ref_e, st, 1).loss;
      double fm = forward_match_loss(sm, src_e, index, ref_e, st, 1).loss;
      double fd = (fp - fm) / (2.0 * h);
      CHECK(testutil::rel_err(fd, r.grad_deformed(d, j)) < 1e-4);
    }
  }
}

TEST_CASE("forward_match_loss: k>1 gradient equals the frozen-assignment formula") {
  Rng rng(6);
  MatrixX2d ref = random_points(rng, 30);
  SpatialIndex index(ref);
  MatrixXd ref_e(4, 30), src_e(4, 5);
  for (int i = 0; i < ref_e.size(); ++i) ref_e.data()[i] = rng.uniform(-1, 1);
  for (int i = 0; i < src_e.size(); ++i) src_e.data()[i] = rng.uniform(-1, 1);
  MatrixX2d src = random_points(rng, 5);
  MatchResult r = forward_match_loss(src, src_e, index, ref_e, fixed_state(0.3), 4);
  for (std::size_t j = 0; j < r.assignments.size(); ++j) {
    Vector2d centroid = Vector2d::Zero();
    const auto& a = r.assignments[j];
    for (std::size_t i = 0; i < a.neighbor_idx.size(); ++i) {
      centroid += a.weights[static_cast<Eigen::Index>(i)] *
                  ref.row(a.neighbor_idx[i]).transpose();
    }
    Vector2d want = 2.0 * (src.row(static_cast<Eigen::Index>(j)).transpose() - centroid) /
                    static_cast<double>(src.rows());
    CHECK((r.grad_deformed.col(static_cast<Eigen::Index>(j)) - want).cwiseAbs().maxCoeff() <
          1e-12);
  }
}

TEST_CASE("reverse_match_loss: identical sets near zero; collapse is penalized") {
  Rng rng(7);
  MatrixX2d pts = random_points(rng, 60);
  MatrixXd e(8, 60);
  for (int i = 0; i < e.size(); ++i) e.data()[i] = rng.uniform(-1, 1);
  MatchResult same = reverse_match_loss(pts, e, pts, e, fixed_state(1e-4), 4);
  CHECK(same.loss < 1e-9);

  // all source points collapsed to one spot: reverse loss sees every
  // reference point unexplained
  MatrixX2d collapsed = MatrixX2d::Zero(60, 2);
  collapsed.rowwise() = Eigen::RowVector2d(0.5, 0.5);
  MatchResult col = reverse_match_loss(pts, e, collapsed, e, fixed_state(0.5), 4);
  MatchResult fwd = forward_match_loss(collapsed, e, SpatialIndex(pts), e, fixed_state(0.5), 4);
  CHECK(col.loss > 0.01);
  CHECK(col.loss > 3.0 * fwd.loss);
  CHECK(col.grad_deformed.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("reverse_match_loss: mirrors forward examples with roles swapped") {
  MatrixX2d ref(1, 2);
  ref << 1, 0;
  MatrixX2d src(1, 2);
  src << 0, 0;
  MatrixXd e = MatrixXd::Ones(4, 1);
  MatchResult r = reverse_match_loss(ref, e, src, e, fixed_state(), 1);
  CHECK(r.loss == doctest::Approx(1.0).epsilon(1e-12));
  // gradient pulls the source toward the reference
  CHECK(r.grad_deformed(0, 0) == doctest::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("no gradient path into embeddings: match losses only move coordinates") {
  // The API returns gradients only for coordinates; embeddings enter as
  // normalized constants. Scaling all embeddings leaves loss and gradient
  // unchanged, confirming no hidden dependence.
  Rng rng(8);
  MatrixX2d ref = random_points(rng, 25);
  SpatialIndex index(ref);
  MatrixXd ref_e(6, 25), src_e(6, 4);
  for (int i = 0; i < ref_e.size(); ++i) ref_e.data()[i] = rng.uniform(-1, 1);
  for (int i = 0; i < src_e.size(); ++i) src_e.data()[i] = rng.uniform(-1, 1);
  MatrixX2d src = random_points(rng, 4);
  MatchResult a = forward_match_loss(src, src_e, index, ref_e, fixed_state(0.4), 3);
  MatchResult b = forward_match_loss(src, 250.0 * src_e, index, 250.0 * ref_e,
                                     fixed_state(0.4), 3);
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-12));
  CHECK((a.grad_deformed - b.grad_deformed).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pca_match_targets: identical slices match themselves") {
  Rng rng(9);
  MatrixX2d pts = random_points(rng, 40);
  MatrixXd expr(40, 12);
  for (int i = 0; i < expr.size(); ++i) expr.data()[i] = rng.uniform(0, 3);
  PcaMatchResult r = pca_match_targets(pts, expr, pts, expr, 5);
  CHECK((r.targets - pts).cwiseAbs().maxCoeff() == 0.0);
  CHECK(r.components_used == 5);
  CHECK_FALSE(r.reduced);
}

TEST_CASE("pca_match_targets: two-blob matches stay within their cluster") {
  Rng rng(10);
  int per = 30;
  MatrixX2d ref(2 * per, 2);
  MatrixXd ref_expr = MatrixXd::Zero(2 * per, 10);
  for (int i = 0; i < per; ++i) {
    ref.row(i) << rng.uniform(0, 1), rng.uniform(0, 1);
    ref.row(per + i) << rng.uniform(0.6, 1.6), rng.uniform(0, 1);
    for (int g = 0; g < 5; ++g) ref_expr(i, g) = 2.0 + rng.uniform(-0.2, 0.2);
    for (int g = 5; g < 10; ++g) ref_expr(per + i, g) = 2.0 + rng.uniform(-0.2, 0.2);
  }
  MatrixX2d src = ref;
  src.col(0).array() += 0.05;  // slight shift keeps both clusters inside the gate
  PcaMatchResult r = pca_match_targets(src, ref_expr, ref, ref_expr, 3, 32);
  SpatialIndex ref_index(ref);
  for (int j = 0; j < 2 * per; ++j) {
    bool src_in_a = j < per;
    // locate the matched reference row to recover its cluster
    int match = -1;
    for (int i = 0; i < 2 * per; ++i) {
      if ((ref.row(i) - r.targets.row(j)).cwiseAbs().maxCoeff() == 0.0) {
        match = i;
        break;
      }
    }
    REQUIRE(match >= 0);
    CHECK((match < per) == src_in_a);
  }
}

TEST_CASE("joint_pca: recovers a principal basis up to sign; reduces on low rank") {
  Rng rng(11);
  MatrixXd a(200, 3), b(200, 3);
  for (int i = 0; i < 200; ++i) {
    a(i, 0) = 5.0 * rng.normal();
    a(i, 1) = 1.0 * rng.normal();
    a(i, 2) = 0.2 * rng.normal();
    b(i, 0) = 5.0 * rng.normal();
    b(i, 1) = 1.0 * rng.normal();
    b(i, 2) = 0.2 * rng.normal();
  }
  PcaModel m = joint_pca(a, b, 3);
  for (int c = 0; c < 3; ++c) {
    VectorXd v = m.components.col(c).cwiseAbs();
    CHECK(v.maxCoeff() > 0.99);  // aligned with a coordinate axis
    int arg;
    v.maxCoeff(&arg);
    CHECK(arg == c);
  }

  MatrixXd rank1 = VectorXd::LinSpaced(20, 0, 1) * Eigen::RowVectorXd::Ones(6);
  PcaModel low = joint_pca(rank1, rank1, 4);
  CHECK(low.reduced);
  CHECK(low.components.cols() == 1);
}

TEST_CASE("reconstruction_loss: exact-match and closed-form cases") {
  MatrixXd target(4, 2);
  target << 3, 4, 5, 6, 7, 8, 9, 10;
  ReconLoss perfect = reconstruction_loss(target, target);
  CHECK(perfect.masked_mse == 0.0);
  CHECK(perfect.l1 == 0.0);
  CHECK(std::abs(perfect.total) < 1e-3);

  // pred = 0 against m nonzeros of value v
  double v = 1.5;
  MatrixXd t2 = MatrixXd::Zero(10, 1);
  t2(1, 0) = v;
  t2(4, 0) = v;
  t2(7, 0) = v;
  ReconLoss z = reconstruction_loss(MatrixXd::Zero(10, 1), t2);
  CHECK(z.masked_mse == doctest::Approx(v * v).epsilon(1e-12));
  CHECK(z.l1 == doctest::Approx(3.0 * v / 10.0).epsilon(1e-12));

  // all-zero target: masked term contributes nothing
  ReconLoss allz = reconstruction_loss(MatrixXd::Ones(5, 2), MatrixXd::Zero(5, 2));
  CHECK(allz.masked_mse == 0.0);
  CHECK(allz.l1 == doctest::Approx(1.0));
}

TEST_CASE("reconstruction_loss: random batch equals a direct three-term oracle") {
  Rng rng(12);
  MatrixXd pred(6, 5), target(6, 5);
  for (int i = 0; i < pred.size(); ++i) {
    pred.data()[i] = rng.uniform(-1, 2);
    target.data()[i] = rng.uniform(0, 1) < 0.4 ? 0.0 : rng.uniform(0.1, 2.0);
  }
  ReconLoss got = reconstruction_loss(pred, target);

  double mse = 0.0;
  int n_mask = 0;
  double l1 = 0.0;
  double ss = 0.0, st = 0.0, tt = 0.0;
  for (int i = 0; i < pred.size(); ++i) {
    double p = pred.data()[i], t = target.data()[i];
    if (t != 0.0) {
      mse += (p - t) * (p - t);
      ++n_mask;
    }
    l1 += std::abs(p - t);
    double s = 1.0 / (1.0 + std::exp(-50.0 * p));
    ss += s;
    if (t > 0.0) {
      st += s;
      tt += 1.0;
    }
  }
  mse /= n_mask;
  l1 /= static_cast<double>(pred.size());
  double dice = 1.0 - (2.0 * st + 1.0) / (ss + tt + 1.0);
  CHECK(std::abs(got.masked_mse - mse) < 1e-10);
  CHECK(std::abs(got.l1 - l1) < 1e-10);
  CHECK(std::abs(got.dice - dice) < 1e-10);
  CHECK(std::abs(got.total - (mse + l1 + 0.01 * dice)) < 1e-10);
}

TEST_CASE("reconstruction_loss: gradient matches finite differences") {
  Rng rng(13);
  MatrixXd pred(5, 3), target(5, 3);
  for (int i = 0; i < pred.size(); ++i) {
    // keep pred away from the L1 kink at pred == target
    pred.data()[i] = rng.uniform(-1, 2);
    target.data()[i] = rng.uniform(0, 1) < 0.3 ? 0.0 : rng.uniform(0.2, 2.0);
  }
  MatrixXd grad;
  reconstruction_loss(pred, target, &grad);
  double h = 1e-7;
  for (int i = 0; i < pred.size(); ++i) {
    MatrixXd pp = pred, pm = pred;
    pp.data()[i] += h;
    pm.data()[i] -= h;
    double fd =
        (reconstruction_loss(pp, target).total - reconstruction_loss(pm, target).total) /
        (2.0 * h);
    CHECK(testutil::rel_err(fd, grad.data()[i]) < 1e-4);
  }
}
