#pragma once

#include <vector>

#include "instalign/common.hpp"

namespace instalign {

struct RigidTransform {
  Eigen::Matrix2d rotation = Eigen::Matrix2d::Identity();
  Vector2d translation = Vector2d::Zero();
  bool is_reflection = false;

  Vector2d apply(const Vector2d& x) const { return rotation * x + translation; }
  MatrixX2d apply(const MatrixX2d& pts) const {
    return (pts * rotation.transpose()).rowwise() + translation.transpose();
  }
  RigidTransform inverse() const;
  static RigidTransform from_angle(double radians, const Vector2d& t = Vector2d::Zero(),
                                   bool reflect = false);
};

/// Per-slice centering plus one isotropic scale (mean of the two axis
/// standard deviations), with the inverse retained.
struct NormalizeTransform {
  Vector2d mean = Vector2d::Zero();
  double scale = 1.0;

  MatrixX2d apply(const MatrixX2d& pts) const {
    return (pts.rowwise() - mean.transpose()) / scale;
  }
  MatrixX2d invert(const MatrixX2d& pts) const {
    return (pts * scale).rowwise() + mean.transpose();
  }
  Vector2d invert(const Vector2d& p) const { return p * scale + mean; }
};

struct NormalizedPair {
  MatrixX2d src;
  MatrixX2d ref;
  NormalizeTransform src_transform;
  NormalizeTransform ref_transform;
};

/// Independently centers and isotropically scales each slice's coordinates.
NormalizedPair zscore_normalize(const MatrixX2d& src, const MatrixX2d& ref);
NormalizeTransform zscore_stats(const MatrixX2d& pts);

struct IcpReport {
  int iterations = 0;
  double final_mean_sq_error = 0.0;
  double selected_init_angle = 0.0;
  double expression_score = 0.0;
  std::vector<double> error_history;  // nonincreasing
};

struct IcpResult {
  RigidTransform transform;
  IcpReport report;
};

/// Point-to-point ICP: nearest-neighbor correspondences (pairs beyond 3x the
/// median NN distance dropped), closed-form Kabsch fit (reflection kept out
/// of the rotation), stop on relative MSE improvement below tol. If an
/// iteration would raise the error the previous transform is kept, so the
/// recorded history never increases. A zero init translation is seeded by
/// centroid alignment under the init rotation.
IcpResult icp_align(const MatrixX2d& src, const MatrixX2d& ref, const RigidTransform& init,
                    int max_iter = 100, double tol = 1e-9);

/// Multi-start ICP over candidate initial rotations; the winner is the
/// candidate whose converged correspondences have the highest mean cosine
/// similarity of expression, ties broken by lower geometric MSE, then by
/// lower angle. Default candidates: 12 angles at 30-degree spacing.
IcpResult select_rotation(const MatrixX2d& src, const MatrixXd& src_expr, const MatrixX2d& ref,
                          const MatrixXd& ref_expr, const std::vector<double>& candidate_angles,
                          bool include_reflection = false, int max_iter = 100, double tol = 1e-9);

std::vector<double> default_rotation_candidates();

}  // namespace instalign
