#pragma once

#include <utility>
#include <vector>

#include "instalign/common.hpp"

namespace instalign {

// ---------------------------------------------------------------------------
// Exact k-nearest-neighbor index (balanced kd-tree, ties by lower index).
// ---------------------------------------------------------------------------

class SpatialIndex {
public:
  explicit SpatialIndex(const MatrixX2d& points);

  /// Exact k nearest points by Euclidean distance; equal distances break
  /// toward the lower point index. Returns min(k, N) hits sorted by
  /// (distance, index).
  struct Hit {
    int index;
    double distance;
  };
  std::vector<Hit> query(const Vector2d& q, int k) const;

  int size() const { return static_cast<int>(points_.rows()); }
  const MatrixX2d& points() const { return points_; }

private:
  struct Node {
    int left = -1;
    int right = -1;
    int begin = 0;
    int end = 0;  // leaf range in order_
    int axis = 0;
    double split = 0.0;
  };

  int build(int begin, int end, int depth);
  void search(int node, const Vector2d& q, int k,
              std::vector<Hit>& heap) const;  // max-heap on (dist, -idx)

  MatrixX2d points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// ---------------------------------------------------------------------------
// Soft-assignment matcher state
// ---------------------------------------------------------------------------

/// Running EMA scales for the unified geometry-feature cost and the adaptive
/// softmax temperature. Seeded from the first batch's statistics.
struct MatchState {
  double s_sp = 1.0;
  double s_ft = 1.0;
  double tau = 1.0;
  double ema_decay = 0.95;
  double lambda_f = 1.0;
  bool initialized = false;

  static constexpr double kFloor = 1e-6;
};

struct SoftAssignment {
  int source_idx = 0;
  std::vector<int> neighbor_idx;
  VectorXd weights;
};

/// c_j = ||x_hat - x_j||^2 / s_sp + lambda_f (1 - <e_hat_bar, e_j_bar>) / s_ft.
/// Embeddings are L2-normalized here (norm floored at 1e-12) and are treated
/// as constants: no gradient flows through this cost into the field.
VectorXd match_cost(const Vector2d& deformed_pt, const VectorXd& deformed_embed,
                    const MatrixX2d& neighbor_pts, const MatrixXd& neighbor_embeds,
                    const MatchState& state);

/// p = softmax(-costs / tau), max-stabilized.
VectorXd soft_assign(const VectorXd& costs, double tau);

/// EMA update; every statistic floored at MatchState::kFloor.
MatchState update_state(const MatchState& state, double mean_sq_spatial, double mean_cos_dist,
                        double mean_weighted_cost);

// ---------------------------------------------------------------------------
// Matching losses
// ---------------------------------------------------------------------------

/// Result of one soft-assignment matching pass.
struct MatchResult {
  double loss = 0.0;
  MatrixXd grad_deformed;       // 2 x B, zero when roles are swapped
  MatchState updated_state;     // EMAs advanced with this batch's statistics
  std::vector<SoftAssignment> assignments;
};

/// Forward loss: mean_j ||x_hat_j - sum_i p_ij x_i||^2 over deformed source
/// points, K reference neighbors each. Weights and targets are constants for
/// the step; the gradient flows only through the explicit x_hat_j.
MatchResult forward_match_loss(const MatrixX2d& deformed_src, const MatrixXd& src_embeds,
                               const SpatialIndex& ref_index, const MatrixXd& ref_embeds,
                               const MatchState& state, int k);

/// Reverse (coverage) loss with roles swapped: every reference point attracts
/// the weighted centroid of its K nearest deformed source points. The
/// gradient w.r.t. the deformed coordinates flows through the centroids,
/// which is what pulls collapsed sources apart.
MatchResult reverse_match_loss(const MatrixX2d& ref_pts, const MatrixXd& ref_embeds,
                               const MatrixX2d& deformed_src, const MatrixXd& src_embeds,
                               const MatchState& state, int k);

// ---------------------------------------------------------------------------
// PCA pretraining targets
// ---------------------------------------------------------------------------

/// Joint PCA of two stacked expression matrices (rows = spots).
struct PcaModel {
  Eigen::RowVectorXd mean;
  MatrixXd components;      // G x n_components, columns orthonormal
  VectorXd singular_values;
  bool reduced = false;     // rank-deficient input forced fewer components
};
PcaModel joint_pca(const MatrixXd& a, const MatrixXd& b, int n_components);

struct PcaMatchResult {
  MatrixX2d targets;       // per-source target coordinates
  int components_used = 0;
  bool reduced = false;    // rank-deficient input forced fewer components
};

/// Joint PCA over both expression matrices stacked; each source point is
/// matched to the reference point with the nearest PCA feature among its
/// k_spatial nearest reference points, and the match's coordinates become the
/// target. Expression is taken as provided (the pipeline feeds normalized
/// log HVG expression).
PcaMatchResult pca_match_targets(const MatrixX2d& src_pts, const MatrixXd& src_expr,
                                 const MatrixX2d& ref_pts, const MatrixXd& ref_expr,
                                 int n_components, int k_spatial = 32);

// ---------------------------------------------------------------------------
// Composite reconstruction loss (masked MSE + L1 + soft Dice)
// ---------------------------------------------------------------------------

inline constexpr double kDiceWeight = 0.01;
inline constexpr double kDiceSharpness = 50.0;

struct ReconLoss {
  double total = 0.0;
  double masked_mse = 0.0;
  double l1 = 0.0;
  double dice = 0.0;
};

/// Columns are batch items, rows genes. The Dice term softly matches the
/// zero/nonzero pattern: s = sigmoid(50 * pred), t = 1[target > 0],
/// dice = 1 - (2 sum(s t) + 1) / (sum s + sum t + 1).
ReconLoss reconstruction_loss(const MatrixXd& pred, const MatrixXd& target,
                              MatrixXd* grad_pred = nullptr);

}  // namespace instalign
