#include "instalign/metrics.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <map>
#include <numeric>

#include "instalign/matching.hpp"

namespace instalign {

double chamfer_distance(const MatrixX2d& a, const MatrixX2d& b) {
  require(a.rows() > 0 && b.rows() > 0, ErrorKind::dimension, "chamfer_distance: empty set");
  SpatialIndex ia(a), ib(b);
  double ab = 0.0, ba = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double d = ib.query(a.row(i).transpose(), 1)[0].distance;
    ab += d * d;
  }
  for (Eigen::Index i = 0; i < b.rows(); ++i) {
    double d = ia.query(b.row(i).transpose(), 1)[0].distance;
    ba += d * d;
  }
  return ab / static_cast<double>(a.rows()) + ba / static_cast<double>(b.rows());
}

double nn_accuracy(const MatrixX2d& aligned_src, const std::vector<int>& src_labels,
                   const MatrixX2d& ref, const std::vector<int>& ref_labels) {
  require(static_cast<Eigen::Index>(src_labels.size()) == aligned_src.rows() &&
              static_cast<Eigen::Index>(ref_labels.size()) == ref.rows(),
          ErrorKind::dimension, "nn_accuracy: labels missing or wrong length");
  require(aligned_src.rows() > 0 && ref.rows() > 0, ErrorKind::dimension,
          "nn_accuracy: empty point set");
  SpatialIndex index(ref);
  int hits = 0;
  for (Eigen::Index i = 0; i < aligned_src.rows(); ++i) {
    int j = index.query(aligned_src.row(i).transpose(), 1)[0].index;
    if (ref_labels[static_cast<std::size_t>(j)] == src_labels[static_cast<std::size_t>(i)]) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(aligned_src.rows());
}

// ---------------------------------------------------------------------------
// Sinkhorn
// ---------------------------------------------------------------------------

namespace {
constexpr int kSinkhornMaxIter = 1000;
constexpr double kSinkhornTol = 1e-7;

VectorXd lse_rows(const MatrixXd& m) {
  VectorXd mx = m.rowwise().maxCoeff();
  return (mx.array() + (m.colwise() - mx).array().exp().rowwise().sum().log()).matrix();
}

// Log-domain fallback for kernels that underflow in the scaling iteration.
TransportPlan sinkhorn_log_domain(const MatrixXd& c, double eps, const VectorXd& a,
                                  const VectorXd& b) {
  const auto n = c.rows();
  const auto m = c.cols();
  VectorXd f = VectorXd::Zero(n), g = VectorXd::Zero(m);
  VectorXd log_a = a.array().log(), log_b = b.array().log();
  TransportPlan out;
  out.epsilon = eps;
  auto joint = [&]() {
    return (((((-c).colwise() + f).rowwise() + g.transpose()) / eps).array()).matrix().eval();
  };
  for (int iter = 0; iter < kSinkhornMaxIter; ++iter) {
    f += eps * (log_a - lse_rows(joint()));
    g += eps * (log_b - lse_rows(joint().transpose()));
    out.iterations = iter + 1;
    if ((iter + 1) % 10 == 0 || iter + 1 == kSinkhornMaxIter) {
      MatrixXd plan = joint().array().exp();
      double err = (plan.rowwise().sum() - a).cwiseAbs().sum() +
                   (plan.colwise().sum().transpose() - b).cwiseAbs().sum();
      out.plan = plan;
      if (err < kSinkhornTol) {
        out.converged = true;
        break;
      }
    }
  }
  if (out.plan.size() == 0) out.plan = joint().array().exp();
  return out;
}

}  // namespace

TransportPlan sinkhorn_plan(const MatrixX2d& ref, const MatrixX2d& src) {
  require(ref.rows() > 0 && src.rows() > 0, ErrorKind::dimension, "sinkhorn: empty point set");
  const auto n = ref.rows();
  const auto m = src.rows();
  MatrixXd c(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    c.row(i) = (src.rowwise() - ref.row(i)).rowwise().squaredNorm().transpose();
  }
  double eps = std::max(0.01 * c.mean(), 1e-12);

  VectorXd a = VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  VectorXd b = VectorXd::Constant(m, 1.0 / static_cast<double>(m));

  MatrixXd k = (-c / eps).array().exp();
  VectorXd u = VectorXd::Ones(n), v = VectorXd::Ones(m);
  TransportPlan out;
  out.epsilon = eps;
  out.row_marginal = a;
  out.col_marginal = b;
  bool fall_back = false;
  for (int iter = 0; iter < kSinkhornMaxIter; ++iter) {
    VectorXd kv = k * v;
    if ((kv.array() <= 0.0).any() || !kv.allFinite()) {
      fall_back = true;
      break;
    }
    u = a.cwiseQuotient(kv);
    VectorXd ktu = k.transpose() * u;
    if ((ktu.array() <= 0.0).any() || !ktu.allFinite()) {
      fall_back = true;
      break;
    }
    v = b.cwiseQuotient(ktu);
    out.iterations = iter + 1;
    if ((iter + 1) % 10 == 0 || iter + 1 == kSinkhornMaxIter) {
      VectorXd row_sums = u.cwiseProduct(k * v);
      double err = (row_sums - a).cwiseAbs().sum();
      if (err < kSinkhornTol) {
        out.converged = true;
        break;
      }
    }
  }
  if (fall_back) {
    TransportPlan lg = sinkhorn_log_domain(c, eps, a, b);
    lg.row_marginal = a;
    lg.col_marginal = b;
    return lg;
  }
  out.plan = u.asDiagonal() * k * v.asDiagonal();
  return out;
}

double ot_accuracy(const MatrixX2d& aligned_src, const std::vector<int>& src_labels,
                   const MatrixX2d& ref, const std::vector<int>& ref_labels,
                   TransportPlan* plan_out) {
  require(static_cast<Eigen::Index>(src_labels.size()) == aligned_src.rows() &&
              static_cast<Eigen::Index>(ref_labels.size()) == ref.rows(),
          ErrorKind::dimension, "ot_accuracy: labels missing or wrong length");
  TransportPlan plan = sinkhorn_plan(ref, aligned_src);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < plan.plan.rows(); ++i) {
    for (Eigen::Index j = 0; j < plan.plan.cols(); ++j) {
      if (ref_labels[static_cast<std::size_t>(i)] == src_labels[static_cast<std::size_t>(j)]) {
        acc += plan.plan(i, j);
      }
    }
  }
  if (plan_out) *plan_out = std::move(plan);
  return acc;
}

// ---------------------------------------------------------------------------
// Gaussian mixture EM
// ---------------------------------------------------------------------------

namespace {
constexpr double kGmmRidge = 1e-6;
constexpr int kGmmMaxIter = 200;
constexpr double kGmmTol = 1e-6;

struct GmmModel {
  std::vector<VectorXd> means;
  std::vector<MatrixXd> cholesky;  // lower factors of covariances
  std::vector<double> log_dets;
  VectorXd log_weights;
};

MatrixXd covariance_of(const MatrixXd& x) {
  Eigen::RowVectorXd mu = x.colwise().mean();
  MatrixXd c = x.rowwise() - mu;
  return c.transpose() * c / static_cast<double>(x.rows());
}

bool cholesky_with_ridge(const MatrixXd& cov, MatrixXd& l_out, double& log_det) {
  double ridge = kGmmRidge;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::LLT<MatrixXd> llt(cov + ridge * MatrixXd::Identity(cov.rows(), cov.cols()));
    if (llt.info() == Eigen::Success) {
      l_out = llt.matrixL();
      log_det = 2.0 * l_out.diagonal().array().log().sum();
      return true;
    }
    ridge *= 10.0;
  }
  return false;
}

// N x k matrix of log p(x, component).
MatrixXd log_joint(const MatrixXd& x, const GmmModel& model) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  const int k = static_cast<int>(model.means.size());
  MatrixXd lj(n, k);
  const double c = -0.5 * d * std::log(2.0 * 3.14159265358979323846);
  for (int j = 0; j < k; ++j) {
    MatrixXd centered = x.rowwise() - model.means[static_cast<std::size_t>(j)].transpose();
    MatrixXd solved = model.cholesky[static_cast<std::size_t>(j)]
                          .triangularView<Eigen::Lower>()
                          .solve(centered.transpose());
    lj.col(j) =
        (c - 0.5 * model.log_dets[static_cast<std::size_t>(j)] + model.log_weights[j]) -
        0.5 * solved.colwise().squaredNorm().transpose().array();
  }
  return lj;
}

VectorXd row_lse(const MatrixXd& lj) {
  VectorXd lse(lj.rows());
  for (Eigen::Index i = 0; i < lj.rows(); ++i) {
    double mx = lj.row(i).maxCoeff();
    lse[i] = mx + std::log((lj.row(i).array() - mx).exp().sum());
  }
  return lse;
}

}  // namespace

std::vector<int> gmm_cluster(const MatrixXd& embeddings, int k, int n_init, std::uint64_t seed) {
  const auto n = embeddings.rows();
  require(k >= 1, ErrorKind::config, "gmm_cluster: k must be >= 1");
  require(n > k, ErrorKind::dimension, "gmm_cluster: need more points than components");
  if (k == 1) return std::vector<int>(static_cast<std::size_t>(n), 0);

  MatrixXd global_cov = covariance_of(embeddings);
  double best_ll = -std::numeric_limits<double>::infinity();
  MatrixXd best_lj;

  for (int init = 0; init < n_init; ++init) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(init) + 101));
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    GmmModel model;
    model.log_weights = VectorXd::Constant(k, -std::log(static_cast<double>(k)));
    bool valid = true;
    for (int j = 0; j < k; ++j) {
      model.means.push_back(embeddings.row(order[static_cast<std::size_t>(j)]).transpose());
      MatrixXd l;
      double ld;
      if (!cholesky_with_ridge(global_cov, l, ld)) {
        valid = false;
        break;
      }
      model.cholesky.push_back(l);
      model.log_dets.push_back(ld);
    }
    if (!valid) continue;

    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < kGmmMaxIter; ++iter) {
      MatrixXd lj = log_joint(embeddings, model);
      VectorXd lse = row_lse(lj);
      double ll = lse.mean();
      MatrixXd resp = (lj.colwise() - lse).array().exp();

      VectorXd nk = resp.colwise().sum();
      for (int j = 0; j < k; ++j) {
        if (nk[j] < 1e-8) {
          // Empty component: restart from the worst-explained point.
          Eigen::Index worst;
          lse.minCoeff(&worst);
          model.means[static_cast<std::size_t>(j)] = embeddings.row(worst).transpose();
          MatrixXd l;
          double ld;
          if (!cholesky_with_ridge(global_cov, l, ld)) continue;
          model.cholesky[static_cast<std::size_t>(j)] = l;
          model.log_dets[static_cast<std::size_t>(j)] = ld;
          model.log_weights[j] = std::log(1.0 / static_cast<double>(n));
          continue;
        }
        VectorXd mean = (resp.col(j).transpose() * embeddings).transpose() / nk[j];
        MatrixXd centered = embeddings.rowwise() - mean.transpose();
        MatrixXd weighted = centered.array().colwise() * resp.col(j).array();
        MatrixXd cov = weighted.transpose() * centered / nk[j];
        MatrixXd l;
        double ld;
        if (!cholesky_with_ridge(cov, l, ld)) continue;
        model.means[static_cast<std::size_t>(j)] = mean;
        model.cholesky[static_cast<std::size_t>(j)] = l;
        model.log_dets[static_cast<std::size_t>(j)] = ld;
        model.log_weights[j] = std::log(nk[j] / static_cast<double>(n));
      }

      if (std::isfinite(prev_ll) && std::abs(ll - prev_ll) < kGmmTol) {
        prev_ll = ll;
        break;
      }
      prev_ll = ll;
    }

    MatrixXd lj = log_joint(embeddings, model);
    double final_ll = row_lse(lj).mean();
    if (final_ll > best_ll) {
      best_ll = final_ll;
      best_lj = lj;
    }
  }

  require(best_lj.size() > 0, ErrorKind::degenerate, "gmm_cluster: all initializations failed");
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index arg;
    best_lj.row(i).maxCoeff(&arg);
    labels[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Partition agreement
// ---------------------------------------------------------------------------

namespace {

MatrixXd contingency(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<int, int> amap, bmap;
  for (int v : a) amap.emplace(v, static_cast<int>(amap.size()));
  for (int v : b) bmap.emplace(v, static_cast<int>(bmap.size()));
  MatrixXd table = MatrixXd::Zero(static_cast<Eigen::Index>(amap.size()),
                                  static_cast<Eigen::Index>(bmap.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    table(amap[a[i]], bmap[b[i]]) += 1.0;
  }
  return table;
}

double choose2(double n) { return n * (n - 1.0) / 2.0; }

}  // namespace

double ari(const std::vector<int>& labels_a, const std::vector<int>& labels_b) {
  require(labels_a.size() == labels_b.size(), ErrorKind::dimension, "ari: length mismatch");
  require(labels_a.size() >= 2, ErrorKind::dimension, "ari: need at least 2 items");
  MatrixXd t = contingency(labels_a, labels_b);
  double n = static_cast<double>(labels_a.size());
  double index = 0.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) index += choose2(t.data()[i]);
  double sum_a = 0.0, sum_b = 0.0;
  VectorXd rows = t.rowwise().sum(), cols = t.colwise().sum();
  for (Eigen::Index i = 0; i < rows.size(); ++i) sum_a += choose2(rows[i]);
  for (Eigen::Index j = 0; j < cols.size(); ++j) sum_b += choose2(cols[j]);
  double expected = sum_a * sum_b / choose2(n);
  double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;  // both partitions trivial
  return (index - expected) / (max_index - expected);
}

double nmi(const std::vector<int>& labels_a, const std::vector<int>& labels_b) {
  require(labels_a.size() == labels_b.size(), ErrorKind::dimension, "nmi: length mismatch");
  require(!labels_a.empty(), ErrorKind::dimension, "nmi: empty input");
  MatrixXd t = contingency(labels_a, labels_b);
  double n = static_cast<double>(labels_a.size());
  VectorXd rows = t.rowwise().sum(), cols = t.colwise().sum();
  double ha = 0.0, hb = 0.0;
  for (Eigen::Index i = 0; i < rows.size(); ++i) {
    if (rows[i] > 0) ha -= rows[i] / n * std::log(rows[i] / n);
  }
  for (Eigen::Index j = 0; j < cols.size(); ++j) {
    if (cols[j] > 0) hb -= cols[j] / n * std::log(cols[j] / n);
  }
  if (ha <= 0.0 || hb <= 0.0) return 0.0;  // single cluster vs anything
  double mi = 0.0;
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    for (Eigen::Index j = 0; j < t.cols(); ++j) {
      if (t(i, j) > 0) {
        mi += t(i, j) / n * std::log(n * t(i, j) / (rows[i] * cols[j]));
      }
    }
  }
  return mi / (0.5 * (ha + hb));
}

std::vector<int> encode_labels(const std::vector<std::string>& raw) {
  std::map<std::string, int> seen;
  std::vector<int> out;
  out.reserve(raw.size());
  for (const auto& s : raw) {
    auto [it, inserted] = seen.emplace(s, static_cast<int>(seen.size()));
    out.push_back(it->second);
  }
  return out;
}

}  // namespace instalign
