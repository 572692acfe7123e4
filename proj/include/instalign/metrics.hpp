#pragma once

#include <optional>
#include <string>
#include <vector>

#include "instalign/common.hpp"

namespace instalign {

struct MetricReport {
  std::optional<double> ot_acc;
  std::optional<double> nn_acc;
  double chamfer = 0.0;
  std::optional<double> ari;
  std::optional<double> nmi;
  // parameters actually used
  double sinkhorn_epsilon = 0.0;
  int sinkhorn_iterations = 0;
  int gmm_components = 0;
  std::uint64_t gmm_seed = 0;
};

/// Symmetric sum of mean squared nearest-neighbor distances.
double chamfer_distance(const MatrixX2d& a, const MatrixX2d& b);

/// Fraction of source points whose nearest reference point carries the same
/// label (direction: source -> reference).
double nn_accuracy(const MatrixX2d& aligned_src, const std::vector<int>& src_labels,
                   const MatrixX2d& ref, const std::vector<int>& ref_labels);

struct TransportPlan {
  MatrixXd plan;          // n_ref x n_src
  VectorXd row_marginal;  // target: uniform over reference points
  VectorXd col_marginal;  // target: uniform over source points
  double epsilon = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Entropic-regularized OT (Sinkhorn) with squared-Euclidean cost and uniform
/// marginals; epsilon = 0.01 * mean cost, at most 1000 iterations or L1
/// marginal error < 1e-7.
TransportPlan sinkhorn_plan(const MatrixX2d& ref, const MatrixX2d& src);

/// Label-agreement mass of the transport plan: sum_ij pi_ij [label_i == label_j].
double ot_accuracy(const MatrixX2d& aligned_src, const std::vector<int>& src_labels,
                   const MatrixX2d& ref, const std::vector<int>& ref_labels,
                   TransportPlan* plan_out = nullptr);

/// EM-fitted Gaussian mixture, full covariance with a 1e-6 diagonal ridge,
/// best of n_init random starts by log-likelihood; hard labels by maximum
/// responsibility. Empty components restart from the worst-explained point.
std::vector<int> gmm_cluster(const MatrixXd& embeddings, int k, int n_init, std::uint64_t seed);

/// Adjusted Rand index from the pair-counting contingency table.
double ari(const std::vector<int>& labels_a, const std::vector<int>& labels_b);

/// Mutual information normalized by the arithmetic mean of entropies;
/// a single-cluster partition against anything scores 0.
double nmi(const std::vector<int>& labels_a, const std::vector<int>& labels_b);

/// Maps arbitrary label strings to dense integer codes (first-seen order).
std::vector<int> encode_labels(const std::vector<std::string>& raw);

}  // namespace instalign
