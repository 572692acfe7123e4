#include "instalign/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <sstream>
#include <functional>
#include <map>

#include "instalign/fields.hpp"
#include "instalign/matching.hpp"
#include "instalign/metrics.hpp"

namespace instalign {

namespace {

using Clock = std::chrono::steady_clock;

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4});
}

double central_diff(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

// FD check of d(dot(up, net(x)))/dtheta on a sample of indices per block.
double max_grad_rel_err(const ParamVector& params, const std::function<double()>& loss_fn,
                        const VectorXd& analytic, ParamVector& mutable_params, Rng& pick,
                        int per_block) {
  double worst = 0.0;
  int off = 0;
  for (const auto& shape : params.shapes) {
    int count = shape.count();
    for (int t = 0; t < per_block; ++t) {
      int i = off + static_cast<int>(pick.uniform_int(static_cast<std::uint64_t>(count)));
      double orig = mutable_params.values[i];
      auto f = [&](double v) {
        mutable_params.values[i] = v;
        return loss_fn();
      };
      double fd = central_diff(f, orig);
      mutable_params.values[i] = orig;
      worst = std::max(worst, rel_err(fd, analytic[i]));
    }
    off += count;
  }
  return worst;
}

// --- criterion 1: gradient fidelity -------------------------------------

CheckResult check_gradients() {
  CheckResult out{"gradient fidelity (field, decoder, deformation; 10 seeds)"};
  auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_net;

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EncodingSpec enc{8, 6.0};
    Rng rng(derive_seed(seed, 71));
    Vector2d x(rng.uniform(-1, 1), rng.uniform(-1, 1));
    double alpha = 8.0;

    {  // canonical expression field
      ExprField field = ExprField::make(enc, derive_seed(seed, 1));
      VectorXd up(kEmbeddingDim);
      for (int i = 0; i < up.size(); ++i) up[i] = rng.uniform(-1, 1);
      FieldTrace tr;
      field_embed_trace(field, x, alpha, tr);
      VectorXd g = VectorXd::Zero(field.params.values.size());
      field_backward(field, x, alpha, tr, up, g, nullptr);
      Rng pick(derive_seed(seed, 72));
      auto loss = [&]() { return up.dot(field_embed(field, x, alpha)); };
      double e = max_grad_rel_err(field.params, loss, g, field.params, pick, 6);
      if (e > worst) {
        worst = e;
        worst_net = "field";
      }
    }
    {  // expression decoder
      ExprDecoder dec = ExprDecoder::make(200, derive_seed(seed, 2));
      VectorXd e_in(kEmbeddingDim), up(200);
      for (int i = 0; i < e_in.size(); ++i) e_in[i] = rng.uniform(-1, 1);
      for (int i = 0; i < up.size(); ++i) up[i] = rng.uniform(-1, 1);
      MlpTrace tr;
      mlp_forward_trace(dec.params, dec.spec, e_in, tr);
      VectorXd g = VectorXd::Zero(dec.params.values.size());
      mlp_backward_trace(dec.params, dec.spec, tr, up, g, nullptr);
      Rng pick(derive_seed(seed, 73));
      auto loss = [&]() { return up.dot(decode_expression(dec, e_in)); };
      double e = max_grad_rel_err(dec.params, loss, g, dec.params, pick, 6);
      if (e > worst) {
        worst = e;
        worst_net = "decoder";
      }
    }
    {  // deformation network
      DeformNet net = DeformNet::make(enc, derive_seed(seed, 3));
      MatrixXd up(2, 1);
      up << rng.uniform(-1, 1), rng.uniform(-1, 1);
      DeformTrace tr;
      deform_batch_trace(net, x, alpha, tr);
      VectorXd gt = VectorXd::Zero(net.trunk.values.size());
      VectorXd gh = VectorXd::Zero(net.head.values.size());
      deform_backward(net, tr, up, gt, gh);
      auto loss = [&]() { return (deform_batch(net, x, alpha).array() * up.array()).sum(); };
      Rng pick(derive_seed(seed, 74));
      double e1 = max_grad_rel_err(net.trunk, loss, gt, net.trunk, pick, 4);
      double e2 = max_grad_rel_err(net.head, loss, gh, net.head, pick, 4);
      if (std::max(e1, e2) > worst) {
        worst = std::max(e1, e2);
        worst_net = "deformation";
      }
    }
  }

  // jacobian_at against finite differences at mask-stable points
  double worst_jac = 0.0;
  {
    EncodingSpec enc{8, 6.0};
    DeformNet net = DeformNet::make(enc, 7);
    Rng scale(99);
    int last = static_cast<int>(net.head.shapes.size()) - 1;
    int off = net.head.offset(last);
    const LayerShape& s = net.head.shapes[last];
    for (int i = 0; i < s.rows * s.cols; ++i) {
      net.head.values[off + i] = scale.uniform(-0.02, 0.02);
    }
    auto mask_sig = [&](const Vector2d& p) {
      DeformTrace tr;
      deform_batch_trace(net, p, 8.0, tr);
      std::vector<bool> sig;
      for (const auto& a : tr.trunk.act_out)
        for (int i = 0; i < a.rows(); ++i) sig.push_back(a(i, 0) > 0.0);
      for (const auto& a : tr.head.act_out)
        for (int i = 0; i < a.rows(); ++i) sig.push_back(a(i, 0) > 0.0);
      return sig;
    };
    Rng rng(5);
    int checked = 0;
    const double h = 1e-5;
    for (int t = 0; t < 400 && checked < 20; ++t) {
      Vector2d p(rng.uniform(-1, 1), rng.uniform(-1, 1));
      auto ref_sig = mask_sig(p);
      bool stable = true;
      for (int d = 0; d < 2 && stable; ++d) {
        for (double step : {-h, h}) {
          Vector2d q = p;
          q[d] += step;
          if (mask_sig(q) != ref_sig) {
            stable = false;
            break;
          }
        }
      }
      if (!stable) continue;
      ++checked;
      Eigen::Matrix2d J = jacobian_at(net, p, 8.0);
      for (int d = 0; d < 2; ++d) {
        Vector2d qp = p, qm = p;
        qp[d] += h;
        qm[d] -= h;
        Vector2d fd = (deform(net, qp, 8.0) - deform(net, qm, 8.0)) / (2.0 * h);
        worst_jac = std::max(worst_jac, (J.col(d) - fd).cwiseAbs().maxCoeff());
      }
    }
    if (checked < 20) worst_jac = 1.0;
  }

  out.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  std::ostringstream ss;
  ss << "max rel err " << worst << " (" << worst_net << "), jacobian max abs err " << worst_jac;
  out.detail = ss.str();
  out.passed = worst < 1e-4 && worst_jac < 1e-5;
  return out;
}

// --- criterion 2: closed-form jacobian loss ------------------------------

CheckResult check_jacobian_loss_values() {
  CheckResult out{"jacobian loss closed-form values"};
  auto t0 = Clock::now();
  auto sample_of = [](const Eigen::Matrix2d& J) {
    JacobianSample s;
    s.point = Vector2d::Zero();
    s.J = J;
    s.singular_values = svd2x2(J);
    return s;
  };
  double compress = jacobian_loss({sample_of(0.5 * Eigen::Matrix2d::Identity())});
  double expand = jacobian_loss({sample_of(2.0 * Eigen::Matrix2d::Identity())});
  double ident = jacobian_loss({sample_of(Eigen::Matrix2d::Identity())});
  double rot_worst = 0.0;
  for (int i = 0; i < 8; ++i) {
    double a = 0.7853981633974483 * i + 0.05;
    Eigen::Matrix2d R;
    R << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    rot_worst = std::max(rot_worst, jacobian_loss({sample_of(R)}));
  }
  out.passed = std::abs(compress - 4.804530139182014) < 1e-5 &&
               std::abs(expand - 0.960906027836403) < 1e-5 && ident < 1e-10 &&
               rot_worst < 1e-10;
  std::ostringstream ss;
  ss << "scale 0.5 -> " << compress << ", scale 2 -> " << expand << ", identity -> " << ident
     << ", rotations -> " << rot_worst;
  out.detail = ss.str();
  out.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return out;
}

// --- criterion 3: identity start ------------------------------------------

CheckResult check_identity_start() {
  CheckResult out{"deformation identity start on the unit box"};
  auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EncodingSpec enc{8, 6.0};
    DeformNet net = DeformNet::make(enc, seed);
    Rng rng(derive_seed(seed, 55));
    MatrixXd x(2, 500);
    for (int i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(0, 1);
    MatrixXd moved = deform_batch(net, x, 8.0);
    worst = std::max(worst, (moved - x).colwise().norm().maxCoeff());
  }
  out.passed = worst < 1e-3;
  out.detail = "max displacement " + std::to_string(worst);
  out.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return out;
}

// --- criterion 4: metric oracles -------------------------------------------

// Brute-force oracles, written independently of the library implementations.

double oracle_chamfer(const MatrixX2d& a, const MatrixX2d& b) {
  auto dir = [](const MatrixX2d& p, const MatrixX2d& q) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < q.rows(); ++j) {
        best = std::min(best, (p.row(i) - q.row(j)).squaredNorm());
      }
      total += best;
    }
    return total / static_cast<double>(p.rows());
  };
  return dir(a, b) + dir(b, a);
}

std::vector<int> oracle_knn(const MatrixX2d& pts, const Vector2d& q, int k) {
  std::vector<std::pair<double, int>> d;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    d.emplace_back((pts.row(i).transpose() - q).norm(), static_cast<int>(i));
  }
  std::sort(d.begin(), d.end());
  std::vector<int> out;
  for (int i = 0; i < std::min<int>(k, static_cast<int>(d.size())); ++i) {
    out.push_back(d[static_cast<std::size_t>(i)].second);
  }
  return out;
}

double oracle_nn_accuracy(const MatrixX2d& src, const std::vector<int>& sl, const MatrixX2d& ref,
                          const std::vector<int>& rl) {
  int hits = 0;
  for (Eigen::Index i = 0; i < src.rows(); ++i) {
    int arg = oracle_knn(ref, src.row(i).transpose(), 1)[0];
    if (rl[static_cast<std::size_t>(arg)] == sl[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(src.rows());
}

// ARI by direct pair counting, no contingency-table shortcut.
double oracle_ari(const std::vector<int>& a, const std::vector<int>& b) {
  const auto n = a.size();
  double n11 = 0, n00 = 0, n10 = 0, n01 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      bool sa = a[i] == a[j], sb = b[i] == b[j];
      if (sa && sb) ++n11;
      else if (!sa && !sb) ++n00;
      else if (sa) ++n10;
      else ++n01;
    }
  }
  double total = n11 + n00 + n10 + n01;
  double expected = (n11 + n10) * (n11 + n01) / total;
  double max_index = 0.5 * ((n11 + n10) + (n11 + n01));
  if (max_index == expected) return 1.0;
  return (n11 - expected) / (max_index - expected);
}

double oracle_nmi(const std::vector<int>& a, const std::vector<int>& b) {
  auto counts = [](const std::vector<int>& v) {
    std::map<int, double> c;
    for (int x : v) c[x] += 1.0;
    return c;
  };
  const double n = static_cast<double>(a.size());
  auto ca = counts(a), cb = counts(b);
  std::map<std::pair<int, int>, double> cj;
  for (std::size_t i = 0; i < a.size(); ++i) cj[{a[i], b[i]}] += 1.0;
  double ha = 0, hb = 0, mi = 0;
  for (auto& [k, v] : ca) ha -= v / n * std::log(v / n);
  for (auto& [k, v] : cb) hb -= v / n * std::log(v / n);
  if (ha <= 0.0 || hb <= 0.0) return 0.0;
  for (auto& [k, v] : cj) {
    mi += v / n * std::log(n * v / (ca[k.first] * cb[k.second]));
  }
  return mi / (0.5 * (ha + hb));
}

// Exact OT accuracy for square uniform instances via permutation enumeration.
double oracle_ot_accuracy(const MatrixX2d& ref, const std::vector<int>& rl, const MatrixX2d& src,
                          const std::vector<int>& sl, double* gap, double* mean_cost) {
  const int n = static_cast<int>(ref.rows());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity(), second = best, best_acc = 0.0;
  do {
    double cost = 0.0;
    for (int i = 0; i < n; ++i) {
      cost += (ref.row(i) - src.row(perm[static_cast<std::size_t>(i)])).squaredNorm();
    }
    if (cost < best) {
      second = best;
      best = cost;
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        if (rl[static_cast<std::size_t>(i)] == sl[static_cast<std::size_t>(perm[i])]) acc += 1.0;
      }
      best_acc = acc / n;
    } else if (cost < second) {
      second = cost;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  *gap = second - best;
  double mc = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) mc += (ref.row(i) - src.row(j)).squaredNorm();
  *mean_cost = mc / (n * n);
  return best_acc;
}

CheckResult check_metric_oracles() {
  CheckResult out{"metric oracles (chamfer, knn, nn, ari, nmi, sinkhorn)"};
  auto t0 = Clock::now();
  Rng rng(2026);
  std::ostringstream fail;

  auto random_pts = [&](int n) {
    MatrixX2d p(n, 2);
    for (int i = 0; i < n; ++i) p.row(i) << rng.uniform(0, 1), rng.uniform(0, 1);
    return p;
  };
  auto random_labels = [&](int n, int k) {
    std::vector<int> l(static_cast<std::size_t>(n));
    for (auto& v : l) v = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(k)));
    return l;
  };

  bool ok = true;
  for (int t = 0; t < 20; ++t) {
    int n = 5 + static_cast<int>(rng.uniform_int(26));
    int m = 5 + static_cast<int>(rng.uniform_int(26));
    MatrixX2d a = random_pts(n), b = random_pts(m);
    if (std::abs(chamfer_distance(a, b) - oracle_chamfer(a, b)) > 1e-6) {
      ok = false;
      fail << " chamfer@" << t;
    }
    SpatialIndex index(a);
    Vector2d q(rng.uniform(0, 1), rng.uniform(0, 1));
    int k = 1 + static_cast<int>(rng.uniform_int(8));
    auto hits = index.query(q, k);
    auto want = oracle_knn(a, q, k);
    for (std::size_t i = 0; i < want.size(); ++i) {
      if (hits[i].index != want[i]) {
        ok = false;
        fail << " knn@" << t;
        break;
      }
    }
    auto la = random_labels(n, 3), lb = random_labels(m, 3);
    if (std::abs(nn_accuracy(b, lb, a, la) - oracle_nn_accuracy(b, lb, a, la)) > 1e-6) {
      ok = false;
      fail << " nn@" << t;
    }
    auto p1 = random_labels(n, 4), p2 = random_labels(n, 3);
    if (std::abs(ari(p1, p2) - oracle_ari(p1, p2)) > 1e-6) {
      ok = false;
      fail << " ari@" << t;
    }
    if (std::abs(nmi(p1, p2) - oracle_nmi(p1, p2)) > 1e-6) {
      ok = false;
      fail << " nmi@" << t;
    }
  }

  // exact ARI spot value
  if (std::abs(ari({0, 0, 1, 1}, {0, 1, 0, 1}) - (-0.5)) > 1e-12) {
    ok = false;
    fail << " ari-exact";
  }

  // Sinkhorn vs exact enumeration on 2x2 and 3x3 with a unique optimum
  int done = 0;
  while (done < 20) {
    int n = 2 + static_cast<int>(rng.uniform_int(2));
    MatrixX2d ref = random_pts(n), src = random_pts(n);
    auto rl = random_labels(n, 2), sl = random_labels(n, 2);
    double gap = 0.0, mean_cost = 0.0;
    double want = oracle_ot_accuracy(ref, rl, src, sl, &gap, &mean_cost);
    if (gap < 0.25 * mean_cost) continue;
    double got = ot_accuracy(src, sl, ref, rl);
    if (std::abs(got - want) > 1e-3) {
      ok = false;
      fail << " sinkhorn@" << done;
    }
    ++done;
  }

  out.passed = ok;
  out.detail = ok ? "all oracles agree" : ("mismatches:" + fail.str());
  out.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return out;
}

}  // namespace

std::vector<CheckResult> run_selfchecks() {
  return {check_gradients(), check_jacobian_loss_values(), check_identity_start(),
          check_metric_oracles()};
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const CheckResult& r) { return r.passed; });
}

}  // namespace instalign
