#include "instalign/rigid.hpp"

#include <Eigen/SVD>
#include <algorithm>

#include "instalign/matching.hpp"

namespace instalign {

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(rotation.transpose() * translation);
  inv.is_reflection = is_reflection;
  return inv;
}

RigidTransform RigidTransform::from_angle(double radians, const Vector2d& t, bool reflect) {
  RigidTransform out;
  double c = std::cos(radians), s = std::sin(radians);
  out.rotation << c, -s, s, c;
  if (reflect) out.rotation.col(0) *= -1.0;  // compose with diag(-1, 1)
  out.translation = t;
  out.is_reflection = reflect;
  return out;
}

NormalizeTransform zscore_stats(const MatrixX2d& pts) {
  require(pts.rows() >= 2, ErrorKind::dimension, "zscore_normalize: need at least 2 points");
  NormalizeTransform t;
  t.mean = pts.colwise().mean();
  MatrixX2d centered = pts.rowwise() - t.mean.transpose();
  Vector2d std_dev =
      (centered.array().square().colwise().sum() / static_cast<double>(pts.rows()))
          .sqrt()
          .transpose();
  t.scale = 0.5 * (std_dev[0] + std_dev[1]);
  require(t.scale > 0.0, ErrorKind::degenerate, "zscore_normalize: zero coordinate variance");
  return t;
}

NormalizedPair zscore_normalize(const MatrixX2d& src, const MatrixX2d& ref) {
  NormalizedPair pair;
  pair.src_transform = zscore_stats(src);
  pair.ref_transform = zscore_stats(ref);
  pair.src = pair.src_transform.apply(src);
  pair.ref = pair.ref_transform.apply(ref);
  return pair;
}

namespace {

struct Correspondences {
  std::vector<int> src_idx;
  std::vector<int> ref_idx;
  double full_mse = 0.0;  // untrimmed mean squared NN distance
};

// NN pairs under the current transform, trimmed at 3x the median NN distance.
// The untrimmed MSE is the per-iteration error: it is comparable across
// iterations, unlike an MSE over a changing trimmed subset.
Correspondences correspond(const MatrixX2d& transformed_src, const SpatialIndex& ref_index) {
  const auto n = transformed_src.rows();
  std::vector<int> nn(static_cast<std::size_t>(n));
  std::vector<double> dist(static_cast<std::size_t>(n));
  double sum_sq = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto hit = ref_index.query(transformed_src.row(i).transpose(), 1);
    nn[static_cast<std::size_t>(i)] = hit[0].index;
    dist[static_cast<std::size_t>(i)] = hit[0].distance;
    sum_sq += hit[0].distance * hit[0].distance;
  }
  std::vector<double> sorted = dist;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2),
                   sorted.end());
  double median = sorted[sorted.size() / 2];
  double cutoff = 3.0 * median;
  Correspondences c;
  c.full_mse = sum_sq / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (dist[static_cast<std::size_t>(i)] <= cutoff) {
      c.src_idx.push_back(static_cast<int>(i));
      c.ref_idx.push_back(nn[static_cast<std::size_t>(i)]);
    }
  }
  return c;
}

// Closed-form least-squares rigid fit (Kabsch), reflection-corrected.
RigidTransform kabsch(const MatrixX2d& src, const MatrixX2d& ref, const Correspondences& c) {
  const auto n = static_cast<Eigen::Index>(c.src_idx.size());
  Vector2d cs = Vector2d::Zero(), cr = Vector2d::Zero();
  for (Eigen::Index i = 0; i < n; ++i) {
    cs += src.row(c.src_idx[static_cast<std::size_t>(i)]).transpose();
    cr += ref.row(c.ref_idx[static_cast<std::size_t>(i)]).transpose();
  }
  cs /= static_cast<double>(n);
  cr /= static_cast<double>(n);
  Eigen::Matrix2d H = Eigen::Matrix2d::Zero();
  for (Eigen::Index i = 0; i < n; ++i) {
    H += (src.row(c.src_idx[static_cast<std::size_t>(i)]).transpose() - cs) *
         (ref.row(c.ref_idx[static_cast<std::size_t>(i)]).transpose() - cr).transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix2d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix2d d = Eigen::Matrix2d::Identity();
  d(1, 1) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  RigidTransform t;
  t.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  t.translation = cr - t.rotation * cs;
  return t;
}

}  // namespace

IcpResult icp_align(const MatrixX2d& src, const MatrixX2d& ref, const RigidTransform& init,
                    int max_iter, double tol) {
  require(src.rows() > 0 && ref.rows() > 0, ErrorKind::dimension, "icp_align: empty slice");

  // Reflection branches run as plain ICP on mirrored source coordinates.
  MatrixX2d src_work = src;
  RigidTransform start = init;
  if (init.is_reflection) {
    src_work.col(0) *= -1.0;
    start.rotation.col(0) *= -1.0;  // undo the mirror inside the init map
    start.is_reflection = false;
  }

  // A zero init translation means "seed by centroid alignment": the first
  // correspondence set is then formed on overlapping clouds.
  if (start.translation.isZero()) {
    Vector2d src_c = src_work.colwise().mean();
    Vector2d ref_c = ref.colwise().mean();
    start.translation = ref_c - start.rotation * src_c;
  }

  SpatialIndex ref_index(ref);
  RigidTransform current = start;
  RigidTransform previous = start;
  IcpResult out;
  double prev_mse = std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < max_iter; ++iter) {
    MatrixX2d moved = current.apply(src_work);
    Correspondences c = correspond(moved, ref_index);
    if (c.full_mse > prev_mse) {
      current = previous;  // trimming wobble: keep the better transform
      break;
    }
    out.report.error_history.push_back(c.full_mse);
    out.report.iterations = iter + 1;
    bool converged = std::isfinite(prev_mse) &&
                     (prev_mse - c.full_mse) <= tol * std::max(prev_mse, 1e-30);
    prev_mse = c.full_mse;
    if (converged) break;
    previous = current;
    current = kabsch(src_work, ref, c);
  }

  out.report.final_mean_sq_error = std::isfinite(prev_mse) ? prev_mse : 0.0;
  out.transform = current;
  if (init.is_reflection) {
    out.transform.rotation.col(0) *= -1.0;  // fold the mirror back in
    out.transform.is_reflection = true;
  }
  return out;
}

std::vector<double> default_rotation_candidates() {
  std::vector<double> angles;
  for (int i = 0; i < 12; ++i) angles.push_back(i * 0.52359877559829887308);  // 30 degrees
  return angles;
}

namespace {

double expression_score(const MatrixX2d& src, const MatrixXd& src_expr, const SpatialIndex& ref,
                        const MatrixXd& ref_expr, const RigidTransform& t) {
  MatrixX2d moved = t.apply(src);
  double total = 0.0;
  for (Eigen::Index i = 0; i < moved.rows(); ++i) {
    int j = ref.query(moved.row(i).transpose(), 1)[0].index;
    double denom = src_expr.row(i).norm() * ref_expr.row(j).norm();
    total += denom > 0.0 ? src_expr.row(i).dot(ref_expr.row(j)) / denom : 0.0;
  }
  return total / static_cast<double>(moved.rows());
}

}  // namespace

IcpResult select_rotation(const MatrixX2d& src, const MatrixXd& src_expr, const MatrixX2d& ref,
                          const MatrixXd& ref_expr, const std::vector<double>& candidate_angles,
                          bool include_reflection, int max_iter, double tol) {
  require(!candidate_angles.empty(), ErrorKind::config, "select_rotation: no candidate angles");
  require(src.rows() == src_expr.rows() && ref.rows() == ref_expr.rows(), ErrorKind::dimension,
          "select_rotation: coordinate/expression row mismatch");
  require(src_expr.cols() == ref_expr.cols(), ErrorKind::dimension,
          "select_rotation: slices must share the gene panel");

  struct Candidate {
    double angle;
    bool reflect;
    IcpResult result;
    double score;
  };
  std::vector<Candidate> candidates;
  for (double a : candidate_angles) candidates.push_back({a, false, {}, 0.0});
  if (include_reflection) {
    for (double a : candidate_angles) candidates.push_back({a, true, {}, 0.0});
  }

  SpatialIndex ref_index(ref);
  parallel_for(static_cast<int>(candidates.size()), [&](int i) {
    Candidate& c = candidates[static_cast<std::size_t>(i)];
    c.result = icp_align(src, ref, RigidTransform::from_angle(c.angle, Vector2d::Zero(),
                                                              c.reflect),
                         max_iter, tol);
    c.score = expression_score(src, src_expr, ref_index, ref_expr, c.result.transform);
  });

  // Selection keys make the winner independent of candidate ordering.
  const Candidate* best = &candidates.front();
  for (const auto& c : candidates) {
    const auto key = [](const Candidate& x) {
      return std::make_tuple(-x.score, x.result.report.final_mean_sq_error, x.angle,
                             x.reflect ? 1 : 0);
    };
    if (key(c) < key(*best)) best = &c;
  }
  IcpResult out = best->result;
  out.report.selected_init_angle = best->angle;
  out.report.expression_score = best->score;
  return out;
}

}  // namespace instalign
