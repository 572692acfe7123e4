#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "instalign/rigid.hpp"
#include "test_util.hpp"

using namespace instalign;

namespace {

MatrixX2d random_points(Rng& rng, int n, double lo = 0.0, double hi = 1.0) {
  MatrixX2d pts(n, 2);
  for (int i = 0; i < n; ++i) {
    pts(i, 0) = rng.uniform(lo, hi);
    pts(i, 1) = rng.uniform(lo, hi);
  }
  return pts;
}

double rotation_angle(const Eigen::Matrix2d& R) { return std::atan2(R(1, 0), R(0, 0)); }

}  // namespace

TEST_CASE("zscore_normalize: already-normalized input is unchanged") {
  // four points with zero mean and unit isotropic std
  MatrixX2d pts(4, 2);
  pts << 1, 1, -1, 1, 1, -1, -1, -1;
  NormalizedPair p = zscore_normalize(pts, pts);
  CHECK((p.src - pts).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((p.ref - pts).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("zscore_normalize: invariant to translation and scale; round trips") {
  Rng rng(1);
  MatrixX2d pts = random_points(rng, 120);
  MatrixX2d moved = (pts.array() * 3.7).matrix();
  moved.col(0).array() += 11.0;
  moved.col(1).array() -= 4.0;
  NormalizeTransform a = zscore_stats(pts);
  NormalizeTransform b = zscore_stats(moved);
  CHECK((a.apply(pts) - b.apply(moved)).cwiseAbs().maxCoeff() < 1e-12);

  MatrixX2d round = a.invert(a.apply(pts));
  CHECK((round - pts).cwiseAbs().maxCoeff() < 1e-12);

  MatrixX2d degenerate = MatrixX2d::Zero(5, 2);
  CHECK_THROWS_AS(zscore_stats(degenerate), Error);
}

TEST_CASE("icp_align: identical sets converge to identity at zero error") {
  Rng rng(2);
  MatrixX2d pts = random_points(rng, 80);
  IcpResult r = icp_align(pts, pts, RigidTransform{});
  CHECK((r.transform.rotation - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(r.transform.translation.norm() < 1e-12);
  CHECK(r.report.final_mean_sq_error < 1e-20);
}

TEST_CASE("icp_align: recovers a pure translation exactly") {
  Rng rng(3);
  MatrixX2d src = random_points(rng, 100);
  MatrixX2d ref = src;
  ref.col(0).array() += 3.0;
  ref.col(1).array() -= 1.0;
  IcpResult r = icp_align(src, ref, RigidTransform{});
  CHECK((r.transform.translation - Vector2d(3, -1)).norm() < 1e-6);
  CHECK((r.transform.rotation - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("icp_align: 25-degree rotation with noise, inits up to 45 degrees off") {
  // Anisotropic cloud: tissue-like structure keeps the rotation basin wide.
  Rng rng(4);
  MatrixX2d src(300, 2);
  for (int i = 0; i < 300; ++i) {
    src(i, 0) = rng.uniform(-2.0, 2.0);
    src(i, 1) = rng.uniform(-0.8, 0.8);
  }
  double angle = 25.0 * 3.14159265358979323846 / 180.0;
  RigidTransform truth = RigidTransform::from_angle(angle, Vector2d(0.1, -0.2));
  MatrixX2d ref = truth.apply(src);
  for (Eigen::Index i = 0; i < ref.size(); ++i) ref.data()[i] += 0.01 * rng.normal();

  for (double init_deg : {-20.0, 0.0, 20.0, 45.0}) {
    IcpResult r =
        icp_align(src, ref, RigidTransform::from_angle(init_deg * 3.14159265358979323846 / 180.0));
    double got = rotation_angle(r.transform.rotation) * 180.0 / 3.14159265358979323846;
    CHECK(std::abs(got - 25.0) < 1.0);
  }
}

TEST_CASE("icp_align: error history never increases") {
  Rng rng(5);
  for (int t = 0; t < 5; ++t) {
    MatrixX2d src = random_points(rng, 150);
    RigidTransform warp = RigidTransform::from_angle(rng.uniform(-0.6, 0.6),
                                                     Vector2d(rng.uniform(-0.3, 0.3),
                                                              rng.uniform(-0.3, 0.3)));
    MatrixX2d ref = warp.apply(src);
    for (Eigen::Index i = 0; i < ref.size(); ++i) ref.data()[i] += 0.02 * rng.normal();
    IcpResult r = icp_align(src, ref, RigidTransform{});
    for (std::size_t i = 1; i < r.report.error_history.size(); ++i) {
      CHECK(r.report.error_history[i] <= r.report.error_history[i - 1] + 1e-15);
    }
  }
}

TEST_CASE("select_rotation: recovered transforms compose to the inverse") {
  Rng rng(6);
  MatrixXd expr(200, 15);
  for (int i = 0; i < expr.size(); ++i) expr.data()[i] = rng.uniform(0, 2);
  for (int t = 0; t < 4; ++t) {
    MatrixX2d base = random_points(rng, 200, -1.0, 1.0);
    RigidTransform T = RigidTransform::from_angle(
        rng.uniform(0, 6.28), Vector2d(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)));
    MatrixX2d moved = T.apply(base);
    IcpResult r = select_rotation(moved, expr, base, expr, default_rotation_candidates());
    RigidTransform inv = T.inverse();
    CHECK((r.transform.rotation - inv.rotation).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((r.transform.translation - inv.translation).norm() < 1e-6);
  }
}

TEST_CASE("select_rotation: identical slices pick angle 0 with expression score 1") {
  Rng rng(7);
  MatrixX2d pts = random_points(rng, 90);
  MatrixXd expr(90, 8);
  for (int i = 0; i < expr.size(); ++i) expr.data()[i] = rng.uniform(0.1, 2.0);
  IcpResult r = select_rotation(pts, expr, pts, expr, default_rotation_candidates());
  CHECK(r.report.selected_init_angle == 0.0);
  CHECK(r.report.expression_score == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.report.final_mean_sq_error < 1e-12);
}

TEST_CASE("select_rotation: expression breaks the 180-degree ambiguity") {
  // Geometry is an ellipse-like blob, symmetric under 180 degrees; expression
  // marks the two halves differently, so only the true branch scores high.
  Rng rng(8);
  int n = 240;
  MatrixX2d ref(n, 2);
  MatrixXd ref_expr = MatrixXd::Zero(n, 6);
  for (int i = 0; i < n; ++i) {
    ref(i, 0) = rng.uniform(-2.0, 2.0);
    ref(i, 1) = rng.uniform(-1.0, 1.0);
    bool right = ref(i, 0) > 0.0;
    for (int g = 0; g < 3; ++g) ref_expr(i, right ? g : 3 + g) = 1.0 + rng.uniform(0, 0.2);
  }
  RigidTransform flip = RigidTransform::from_angle(3.14159265358979323846);
  MatrixX2d src = flip.apply(ref);
  MatrixXd src_expr = ref_expr;  // same biology, rotated geometry

  IcpResult r = select_rotation(src, src_expr, ref, ref_expr, default_rotation_candidates());
  // winner must undo the flip: rotation ~ 180 degrees
  double got = std::abs(rotation_angle(r.transform.rotation));
  CHECK(std::abs(got - 3.14159265358979323846) < 0.1);
  CHECK(r.report.expression_score > 0.9);
}

TEST_CASE("select_rotation: invariant to candidate ordering") {
  Rng rng(9);
  MatrixX2d ref = random_points(rng, 120);
  MatrixXd expr(120, 10);
  for (int i = 0; i < expr.size(); ++i) expr.data()[i] = rng.uniform(0, 1);
  RigidTransform T = RigidTransform::from_angle(2.0, Vector2d(0.2, 0.1));
  MatrixX2d src = T.apply(ref);

  std::vector<double> angles = default_rotation_candidates();
  IcpResult a = select_rotation(src, expr, ref, expr, angles);
  std::reverse(angles.begin(), angles.end());
  IcpResult b = select_rotation(src, expr, ref, expr, angles);
  CHECK((a.transform.rotation - b.transform.rotation).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.transform.translation - b.transform.translation).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.report.selected_init_angle == b.report.selected_init_angle);

  CHECK_THROWS_AS(select_rotation(src, expr, ref, expr, {}), Error);
}

TEST_CASE("select_rotation: reflection branch recovers a mirrored slice") {
  Rng rng(10);
  MatrixX2d ref = random_points(rng, 150, -1.0, 1.0);
  MatrixXd expr(150, 8);
  for (int i = 0; i < expr.size(); ++i) expr.data()[i] = rng.uniform(0, 2);
  MatrixX2d src = ref;
  src.col(0) *= -1.0;  // mirrored copy
  IcpResult r =
      select_rotation(src, expr, ref, expr, default_rotation_candidates(), true);
  CHECK(r.transform.is_reflection);
  MatrixX2d aligned = r.transform.apply(src);
  CHECK((aligned - ref).rowwise().norm().maxCoeff() < 1e-6);
}
