#include "instalign/matching.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <numeric>

namespace instalign {

// ---------------------------------------------------------------------------
// SpatialIndex
// ---------------------------------------------------------------------------

namespace {
constexpr int kLeafSize = 8;

bool hit_less(const SpatialIndex::Hit& a, const SpatialIndex::Hit& b) {
  if (a.distance != b.distance) return a.distance < b.distance;
  return a.index < b.index;
}
}  // namespace

SpatialIndex::SpatialIndex(const MatrixX2d& points) : points_(points) {
  require(points_.rows() > 0, ErrorKind::dimension, "SpatialIndex: empty point set");
  require(points_.allFinite(), ErrorKind::numeric, "SpatialIndex: non-finite coordinates");
  order_.resize(points_.rows());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(static_cast<std::size_t>(2 * points_.rows() / kLeafSize + 2));
  root_ = build(0, static_cast<int>(order_.size()), 0);
}

int SpatialIndex::build(int begin, int end, int depth) {
  Node node;
  node.begin = begin;
  node.end = end;
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(node);
  if (end - begin <= kLeafSize) return id;

  // Split on the wider axis at the median.
  Vector2d lo = points_.row(order_[static_cast<std::size_t>(begin)]);
  Vector2d hi = lo;
  for (int i = begin + 1; i < end; ++i) {
    lo = lo.cwiseMin(points_.row(order_[static_cast<std::size_t>(i)]).transpose());
    hi = hi.cwiseMax(points_.row(order_[static_cast<std::size_t>(i)]).transpose());
  }
  int axis = (hi[0] - lo[0] >= hi[1] - lo[1]) ? 0 : 1;
  int mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) {
                     double va = points_(a, axis), vb = points_(b, axis);
                     if (va != vb) return va < vb;
                     return a < b;
                   });
  double split = points_(order_[static_cast<std::size_t>(mid)], axis);

  int left = build(begin, mid, depth + 1);
  int right = build(mid, end, depth + 1);
  nodes_[static_cast<std::size_t>(id)].axis = axis;
  nodes_[static_cast<std::size_t>(id)].split = split;
  nodes_[static_cast<std::size_t>(id)].left = left;
  nodes_[static_cast<std::size_t>(id)].right = right;
  return id;
}

void SpatialIndex::search(int node_id, const Vector2d& q, int k, std::vector<Hit>& heap) const {
  const Node& node = nodes_[static_cast<std::size_t>(node_id)];
  if (node.left < 0) {
    for (int i = node.begin; i < node.end; ++i) {
      int idx = order_[static_cast<std::size_t>(i)];
      double d2 = (points_.row(idx).transpose() - q).squaredNorm();
      Hit cand{idx, d2};
      if (static_cast<int>(heap.size()) < k) {
        heap.push_back(cand);
        std::push_heap(heap.begin(), heap.end(), hit_less);
      } else if (hit_less(cand, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), hit_less);
        heap.back() = cand;
        std::push_heap(heap.begin(), heap.end(), hit_less);
      }
    }
    return;
  }
  double delta = q[node.axis] - node.split;
  int near = delta <= 0.0 ? node.left : node.right;
  int far = delta <= 0.0 ? node.right : node.left;
  search(near, q, k, heap);
  // An equal plane distance can still improve a tie through a lower index,
  // so only prune when the bound is strictly larger.
  if (static_cast<int>(heap.size()) < k || delta * delta <= heap.front().distance) {
    search(far, q, k, heap);
  }
}

std::vector<SpatialIndex::Hit> SpatialIndex::query(const Vector2d& q, int k) const {
  require(k > 0, ErrorKind::dimension, "SpatialIndex::query: k must be positive");
  require(q.allFinite(), ErrorKind::numeric, "SpatialIndex::query: non-finite query");
  std::vector<Hit> heap;
  heap.reserve(static_cast<std::size_t>(std::min(k, size())));
  search(root_, q, std::min(k, size()), heap);
  std::sort(heap.begin(), heap.end(), hit_less);
  for (auto& h : heap) h.distance = std::sqrt(h.distance);
  return heap;
}

// ---------------------------------------------------------------------------
// Costs and soft assignment
// ---------------------------------------------------------------------------

namespace {

MatrixXd normalize_columns(const MatrixXd& E) {
  MatrixXd out = E;
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    double n = out.col(c).norm();
    out.col(c) /= std::max(n, 1e-12);
  }
  return out;
}

}  // namespace

VectorXd match_cost(const Vector2d& deformed_pt, const VectorXd& deformed_embed,
                    const MatrixX2d& neighbor_pts, const MatrixXd& neighbor_embeds,
                    const MatchState& state) {
  require(neighbor_pts.rows() == neighbor_embeds.cols(), ErrorKind::dimension,
          "match_cost: neighbor point/embedding count mismatch");
  VectorXd e = deformed_embed / std::max(deformed_embed.norm(), 1e-12);
  MatrixXd En = normalize_columns(neighbor_embeds);
  VectorXd costs(neighbor_pts.rows());
  for (Eigen::Index i = 0; i < neighbor_pts.rows(); ++i) {
    double d2 = (neighbor_pts.row(i).transpose() - deformed_pt).squaredNorm();
    double cosdist = 1.0 - En.col(i).dot(e);
    costs[i] = d2 / state.s_sp + state.lambda_f * cosdist / state.s_ft;
  }
  return costs;
}

VectorXd soft_assign(const VectorXd& costs, double tau) {
  require(tau > 0.0, ErrorKind::numeric, "soft_assign: tau must be positive");
  VectorXd logits = -costs / tau;
  double m = logits.maxCoeff();
  VectorXd p = (logits.array() - m).exp();
  return p / p.sum();
}

MatchState update_state(const MatchState& state, double mean_sq_spatial, double mean_cos_dist,
                        double mean_weighted_cost) {
  require(std::isfinite(mean_sq_spatial) && std::isfinite(mean_cos_dist) &&
              std::isfinite(mean_weighted_cost),
          ErrorKind::numeric, "update_state: non-finite statistics");
  MatchState out = state;
  double d = state.ema_decay;
  out.s_sp = std::max(d * state.s_sp + (1.0 - d) * mean_sq_spatial, MatchState::kFloor);
  out.s_ft = std::max(d * state.s_ft + (1.0 - d) * mean_cos_dist, MatchState::kFloor);
  out.tau = std::max(d * state.tau + (1.0 - d) * mean_weighted_cost, MatchState::kFloor);
  out.initialized = true;
  return out;
}

// ---------------------------------------------------------------------------
// Matching losses
// ---------------------------------------------------------------------------

namespace {

// Shared core: points `from` soft-assign over the K nearest of `to`. In
// forward mode the gradient lands on `from`; in reverse mode it lands on
// `to` through the centroids.
MatchResult soft_match(const MatrixX2d& from_pts, const MatrixXd& from_embeds,
                       const SpatialIndex& to_index, const MatrixXd& to_embeds,
                       const MatchState& state_in, int k, bool grad_on_from) {
  const auto B = from_pts.rows();
  require(B > 0, ErrorKind::dimension, "match loss: empty batch");
  k = std::min(k, to_index.size());
  require(k > 0, ErrorKind::dimension, "match loss: empty target set");

  MatrixXd from_n = normalize_columns(from_embeds);
  MatrixXd to_n = normalize_columns(to_embeds);

  std::vector<std::vector<SpatialIndex::Hit>> hits(static_cast<std::size_t>(B));
  double sum_sq = 0.0, sum_cos = 0.0;
  for (Eigen::Index j = 0; j < B; ++j) {
    hits[static_cast<std::size_t>(j)] = to_index.query(from_pts.row(j).transpose(), k);
    for (const auto& h : hits[static_cast<std::size_t>(j)]) {
      sum_sq += h.distance * h.distance;
      sum_cos += 1.0 - to_n.col(h.index).dot(from_n.col(j));
    }
  }
  double denom = static_cast<double>(B) * static_cast<double>(k);
  double mean_sq = sum_sq / denom;
  double mean_cos = sum_cos / denom;

  MatchState state = state_in;
  if (!state.initialized) {
    // First batch seeds the scale EMAs; tau keeps its construction value for
    // this softmax and is then seeded from the mean weighted cost.
    state.s_sp = std::max(mean_sq, MatchState::kFloor);
    state.s_ft = std::max(mean_cos, MatchState::kFloor);
  }

  MatchResult res;
  res.grad_deformed = MatrixXd::Zero(2, grad_on_from ? B : to_index.size());
  res.assignments.reserve(static_cast<std::size_t>(B));
  double loss = 0.0;
  double sum_weighted_cost = 0.0;
  const MatrixX2d& to_pts = to_index.points();
  for (Eigen::Index j = 0; j < B; ++j) {
    const auto& hj = hits[static_cast<std::size_t>(j)];
    VectorXd costs(static_cast<Eigen::Index>(hj.size()));
    for (std::size_t i = 0; i < hj.size(); ++i) {
      double cosdist = 1.0 - to_n.col(hj[i].index).dot(from_n.col(j));
      costs[static_cast<Eigen::Index>(i)] =
          hj[i].distance * hj[i].distance / state.s_sp + state.lambda_f * cosdist / state.s_ft;
    }
    VectorXd p = soft_assign(costs, state.tau);
    sum_weighted_cost += p.dot(costs);

    Vector2d centroid = Vector2d::Zero();
    for (std::size_t i = 0; i < hj.size(); ++i) {
      centroid += p[static_cast<Eigen::Index>(i)] * to_pts.row(hj[i].index).transpose();
    }
    Vector2d diff = from_pts.row(j).transpose() - centroid;
    loss += diff.squaredNorm();
    if (grad_on_from) {
      res.grad_deformed.col(j) = 2.0 * diff / static_cast<double>(B);
    } else {
      // d||x_j - sum_i p_i y_i||^2 / dy_i = -2 p_i (x_j - centroid)
      for (std::size_t i = 0; i < hj.size(); ++i) {
        res.grad_deformed.col(hj[i].index) -=
            2.0 * p[static_cast<Eigen::Index>(i)] * diff / static_cast<double>(B);
      }
    }

    SoftAssignment a;
    a.source_idx = static_cast<int>(j);
    for (const auto& h : hj) a.neighbor_idx.push_back(h.index);
    a.weights = p;
    res.assignments.push_back(std::move(a));
  }
  res.loss = loss / static_cast<double>(B);

  double mean_weighted = sum_weighted_cost / static_cast<double>(B);
  if (!state_in.initialized) {
    state.tau = std::max(mean_weighted, MatchState::kFloor);
    state.initialized = true;
    res.updated_state = state;
  } else {
    res.updated_state = update_state(state_in, mean_sq, mean_cos, mean_weighted);
  }
  return res;
}

}  // namespace

MatchResult forward_match_loss(const MatrixX2d& deformed_src, const MatrixXd& src_embeds,
                               const SpatialIndex& ref_index, const MatrixXd& ref_embeds,
                               const MatchState& state, int k) {
  return soft_match(deformed_src, src_embeds, ref_index, ref_embeds, state, k, true);
}

MatchResult reverse_match_loss(const MatrixX2d& ref_pts, const MatrixXd& ref_embeds,
                               const MatrixX2d& deformed_src, const MatrixXd& src_embeds,
                               const MatchState& state, int k) {
  SpatialIndex src_index(deformed_src);
  return soft_match(ref_pts, ref_embeds, src_index, src_embeds, state, k, false);
}

// ---------------------------------------------------------------------------
// PCA pretraining targets
// ---------------------------------------------------------------------------

PcaModel joint_pca(const MatrixXd& a, const MatrixXd& b, int n_components) {
  require(a.cols() == b.cols(), ErrorKind::dimension, "joint_pca: column count mismatch");
  require(n_components >= 1, ErrorKind::config, "joint_pca: n_components must be >= 1");
  MatrixXd stacked(a.rows() + b.rows(), a.cols());
  stacked.topRows(a.rows()) = a;
  stacked.bottomRows(b.rows()) = b;
  PcaModel model;
  model.mean = stacked.colwise().mean();
  stacked.rowwise() -= model.mean;

  Eigen::BDCSVD<MatrixXd> svd(stacked, Eigen::ComputeThinV);
  const VectorXd& sv = svd.singularValues();
  int rank = 0;
  double tol = (sv.size() > 0 ? sv[0] : 0.0) * 1e-10;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv[i] > tol) ++rank;
  }
  int used = std::min(n_components, rank);
  require(used >= 1, ErrorKind::degenerate, "joint_pca: input has rank 0");
  model.reduced = used < n_components;
  model.components = svd.matrixV().leftCols(used);
  model.singular_values = sv.head(used);
  return model;
}

PcaMatchResult pca_match_targets(const MatrixX2d& src_pts, const MatrixXd& src_expr,
                                 const MatrixX2d& ref_pts, const MatrixXd& ref_expr,
                                 int n_components, int k_spatial) {
  require(src_pts.rows() == src_expr.rows() && ref_pts.rows() == ref_expr.rows(),
          ErrorKind::dimension, "pca_match_targets: coordinate/expression row mismatch");
  PcaModel model = joint_pca(src_expr, ref_expr, n_components);
  PcaMatchResult res;
  res.components_used = static_cast<int>(model.components.cols());
  res.reduced = model.reduced;

  const auto ns = src_expr.rows();
  const auto nr = ref_expr.rows();
  MatrixXd src_feat = (src_expr.rowwise() - model.mean) * model.components;
  MatrixXd ref_feat = (ref_expr.rowwise() - model.mean) * model.components;

  SpatialIndex ref_index(ref_pts);
  int k = std::min(k_spatial, static_cast<int>(nr));
  res.targets.resize(ns, 2);
  for (Eigen::Index j = 0; j < ns; ++j) {
    auto hits = ref_index.query(src_pts.row(j).transpose(), k);
    int best = hits.front().index;
    double best_d = (ref_feat.row(best) - src_feat.row(j)).squaredNorm();
    for (std::size_t i = 1; i < hits.size(); ++i) {
      double d = (ref_feat.row(hits[i].index) - src_feat.row(j)).squaredNorm();
      if (d < best_d || (d == best_d && hits[i].index < best)) {
        best = hits[i].index;
        best_d = d;
      }
    }
    res.targets.row(j) = ref_pts.row(best);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reconstruction loss
// ---------------------------------------------------------------------------

ReconLoss reconstruction_loss(const MatrixXd& pred, const MatrixXd& target, MatrixXd* grad_pred) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), ErrorKind::dimension,
          "reconstruction_loss: shape mismatch");
  const double total_entries = static_cast<double>(pred.size());
  require(total_entries > 0, ErrorKind::dimension, "reconstruction_loss: empty batch");

  Eigen::ArrayXXd diff = (pred - target).array();
  Eigen::ArrayXXd mask = (target.array() != 0.0).cast<double>();
  double n_masked = mask.sum();

  ReconLoss out;
  out.masked_mse = n_masked > 0.0 ? (diff.square() * mask).sum() / n_masked : 0.0;
  out.l1 = diff.abs().sum() / total_entries;

  Eigen::ArrayXXd s = 1.0 / (1.0 + (-kDiceSharpness * pred.array()).exp());
  Eigen::ArrayXXd t = (target.array() > 0.0).cast<double>();
  double s_sum = s.sum();
  double t_sum = t.sum();
  double st_sum = (s * t).sum();
  out.dice = 1.0 - (2.0 * st_sum + 1.0) / (s_sum + t_sum + 1.0);
  out.total = out.masked_mse + out.l1 + kDiceWeight * out.dice;

  if (grad_pred) {
    Eigen::ArrayXXd g = Eigen::ArrayXXd::Zero(pred.rows(), pred.cols());
    if (n_masked > 0.0) g += 2.0 * diff * mask / n_masked;
    g += diff.sign() / total_entries;
    double denom = s_sum + t_sum + 1.0;
    Eigen::ArrayXXd ddice_ds = -(2.0 * t * denom - (2.0 * st_sum + 1.0)) / (denom * denom);
    g += kDiceWeight * ddice_ds * kDiceSharpness * s * (1.0 - s);
    *grad_pred = g.matrix();
  }
  return out;
}

}  // namespace instalign
