#include "instalign/fields.hpp"

#include <Eigen/SVD>

namespace instalign {

// ---------------------------------------------------------------------------
// Canonical expression field
// ---------------------------------------------------------------------------

ExprField ExprField::make(const EncodingSpec& enc, std::uint64_t seed, int hidden_dim) {
  ExprField f;
  f.encoding = enc;
  f.spec = MlpSpec{enc.output_dim(), hidden_dim, 3, kEmbeddingDim, true};
  f.params = init_params(f.spec, seed);
  return f;
}

VectorXd field_embed(const ExprField& field, const Vector2d& x, double alpha) {
  return field_embed_batch(field, x, alpha).col(0);
}

MatrixXd field_embed_batch(const ExprField& field, const MatrixXd& X, double alpha) {
  return mlp_forward(field.params, field.spec, encode_batch(X, field.encoding, alpha));
}

MatrixXd field_embed_trace(const ExprField& field, const MatrixXd& X, double alpha,
                           FieldTrace& trace) {
  trace.encoded = encode_batch(X, field.encoding, alpha);
  return mlp_forward_trace(field.params, field.spec, trace.encoded, trace.mlp);
}

void field_backward(const ExprField& field, const MatrixXd& X, double alpha,
                    const FieldTrace& trace, const MatrixXd& g_embed, VectorXd& grad_params,
                    MatrixXd* grad_coords) {
  MatrixXd g_encoded;
  mlp_backward_trace(field.params, field.spec, trace.mlp, g_embed, grad_params,
                     grad_coords ? &g_encoded : nullptr);
  if (grad_coords) {
    *grad_coords = encode_backward(X, field.encoding, alpha, g_encoded);
  }
}

// ---------------------------------------------------------------------------
// Expression decoder
// ---------------------------------------------------------------------------

ExprDecoder ExprDecoder::make(int n_genes, std::uint64_t seed, int hidden_dim) {
  require(n_genes >= 1, ErrorKind::dimension, "ExprDecoder: n_genes must be >= 1");
  ExprDecoder d;
  d.spec = MlpSpec{kEmbeddingDim, hidden_dim, 1, n_genes, true};
  d.params = init_params(d.spec, seed);
  return d;
}

VectorXd decode_expression(const ExprDecoder& dec, const VectorXd& embedding) {
  return mlp_forward(dec.params, dec.spec, embedding).col(0);
}

MatrixXd decode_expression_batch(const ExprDecoder& dec, const MatrixXd& E) {
  return mlp_forward(dec.params, dec.spec, E);
}

// ---------------------------------------------------------------------------
// Deformation network
// ---------------------------------------------------------------------------

DeformNet DeformNet::make(const EncodingSpec& enc, std::uint64_t seed) {
  DeformNet net;
  net.encoding = enc;
  net.trunk_spec = MlpSpec{enc.output_dim(), 128, 5, 128, false};
  net.head_spec = MlpSpec{128, 64, 1, 2, false};
  net.trunk = init_params(net.trunk_spec, derive_seed(seed, 1));
  // 1e-5 keeps max displacement over the unit box below 1e-3 with margin;
  // at 1e-4 the 64-unit head already exceeds that bound for some seeds.
  net.head = init_params(net.head_spec, derive_seed(seed, 2), FinalInit::near_zero, 1e-5);
  return net;
}

Vector2d deform(const DeformNet& net, const Vector2d& x, double alpha) {
  return deform_batch(net, x, alpha).col(0);
}

MatrixXd deform_batch(const DeformNet& net, const MatrixXd& X, double alpha) {
  MatrixXd enc = encode_batch(X, net.encoding, alpha);
  MatrixXd features = mlp_forward(net.trunk, net.trunk_spec, enc);
  return X + mlp_forward(net.head, net.head_spec, features);
}

MatrixXd deform_batch_trace(const DeformNet& net, const MatrixXd& X, double alpha,
                            DeformTrace& trace) {
  trace.encoded = encode_batch(X, net.encoding, alpha);
  MatrixXd features = mlp_forward_trace(net.trunk, net.trunk_spec, trace.encoded, trace.trunk);
  return X + mlp_forward_trace(net.head, net.head_spec, features, trace.head);
}

void deform_backward(const DeformNet& net, const DeformTrace& trace, const MatrixXd& g_deformed,
                     VectorXd& grad_trunk, VectorXd& grad_head) {
  MatrixXd g_features;
  mlp_backward_trace(net.head, net.head_spec, trace.head, g_deformed, grad_head, &g_features);
  mlp_backward_trace(net.trunk, net.trunk_spec, trace.trunk, g_features, grad_trunk, nullptr);
}

// ---------------------------------------------------------------------------
// Jacobian machinery
// ---------------------------------------------------------------------------

namespace {

// Flattened view of the trunk+head linear stack for tangent propagation.
// mask[i] points at the post-activation matrix whose positivity pattern is
// the ReLU mask of layer i, or is null when no ReLU follows.
struct LinearStack {
  std::vector<Eigen::Map<const MatrixXd>> W;
  std::vector<int> offsets;  // W block offset within its ParamVector
  std::vector<bool> in_head;
  std::vector<const MatrixXd*> mask;
};

LinearStack linear_stack(const DeformNet& net, const DeformTrace& trace) {
  LinearStack s;
  auto add = [&s](const ParamVector& p, const MlpTrace& tr, bool head) {
    int off = 0;
    for (std::size_t i = 0; i < p.shapes.size(); ++i) {
      const LayerShape& shape = p.shapes[i];
      s.W.emplace_back(p.values.data() + off, shape.rows, shape.cols);
      s.offsets.push_back(off);
      s.in_head.push_back(head);
      bool hidden = i + 1 < p.shapes.size();
      s.mask.push_back(hidden ? &tr.act_out[i] : nullptr);
      off += shape.count();
    }
  };
  add(net.trunk, trace.trunk, false);
  add(net.head, trace.head, true);
  return s;
}

// Forward tangent through the stack; keeps the input tangent of every layer
// (and the final tangent last).
std::vector<MatrixXd> tangent_forward(const LinearStack& s, MatrixXd t) {
  std::vector<MatrixXd> inputs;
  inputs.reserve(s.W.size() + 1);
  for (std::size_t l = 0; l < s.W.size(); ++l) {
    inputs.push_back(t);
    t = s.W[l] * t;
    if (s.mask[l]) {
      t = (s.mask[l]->array() > 0.0).select(t, MatrixXd::Zero(t.rows(), t.cols()));
    }
  }
  inputs.push_back(std::move(t));
  return inputs;
}

// Reverse pass through the tangent computation, accumulating dL/dW. ReLU
// masks are held fixed: their derivative vanishes almost everywhere, so the
// weight terms below are the exact gradient.
void tangent_backward(const LinearStack& s, const std::vector<MatrixXd>& inputs, MatrixXd g,
                      VectorXd& grad_trunk, VectorXd& grad_head) {
  for (int l = static_cast<int>(s.W.size()) - 1; l >= 0; --l) {
    if (s.mask[l]) {
      g = (s.mask[l]->array() > 0.0).select(g, MatrixXd::Zero(g.rows(), g.cols()));
    }
    VectorXd& acc = s.in_head[static_cast<std::size_t>(l)] ? grad_head : grad_trunk;
    Eigen::Map<MatrixXd>(acc.data() + s.offsets[static_cast<std::size_t>(l)],
                         s.W[static_cast<std::size_t>(l)].rows(),
                         s.W[static_cast<std::size_t>(l)].cols())
        .noalias() += g * inputs[static_cast<std::size_t>(l)].transpose();
    if (l > 0) g = s.W[static_cast<std::size_t>(l)].transpose() * g;
  }
}

inline double log_penalty_term(double sigma, double* coeff = nullptr) {
  bool clamped = sigma < kSigmaClampFloor;
  double sc = clamped ? kSigmaClampFloor : sigma;
  double lg = std::log(sc);
  double w = lg < 0.0 ? kCompressionWeight : 1.0;
  if (coeff) *coeff = clamped ? 0.0 : 2.0 * w * lg / sc;
  return w * lg * lg;
}

}  // namespace

std::vector<Eigen::Matrix2d> jacobian_batch(const DeformNet& net, const MatrixXd& X,
                                            double alpha) {
  DeformTrace trace;
  deform_batch_trace(net, X, alpha, trace);
  LinearStack stack = linear_stack(net, trace);
  std::vector<Eigen::Matrix2d> out(static_cast<std::size_t>(X.cols()),
                                   Eigen::Matrix2d::Identity());
  for (int dir = 0; dir < 2; ++dir) {
    std::vector<MatrixXd> inputs =
        tangent_forward(stack, encode_tangent(X, net.encoding, alpha, dir));
    const MatrixXd& final_t = inputs.back();
    for (Eigen::Index p = 0; p < X.cols(); ++p) {
      out[static_cast<std::size_t>(p)].col(dir) += final_t.col(p);
    }
  }
  return out;
}

Eigen::Matrix2d jacobian_at(const DeformNet& net, const Vector2d& x, double alpha) {
  return jacobian_batch(net, x, alpha).front();
}

Vector2d svd2x2(const Eigen::Matrix2d& J) {
  require(J.allFinite(), ErrorKind::numeric, "svd2x2: non-finite entries");
  double t = J.squaredNorm();
  double d = J.determinant();
  double disc = std::max(t * t - 4.0 * d * d, 0.0);
  double s = std::sqrt(disc);
  double s1 = std::sqrt(0.5 * (t + s));
  double s2 = std::sqrt(std::max(0.5 * (t - s), 0.0));
  return {s1, s2};
}

JacobianSample jacobian_sample_at(const DeformNet& net, const Vector2d& x, double alpha) {
  JacobianSample sample;
  sample.point = x;
  sample.J = jacobian_at(net, x, alpha);
  sample.singular_values = svd2x2(sample.J);
  return sample;
}

double jacobian_loss(const std::vector<JacobianSample>& samples) {
  require(!samples.empty(), ErrorKind::dimension, "jacobian_loss: empty batch");
  double total = 0.0;
  for (const auto& s : samples) {
    total += log_penalty_term(s.singular_values[0]) + log_penalty_term(s.singular_values[1]);
  }
  return total / static_cast<double>(samples.size());
}

double jacobian_loss_grad(const DeformNet& net, const MatrixXd& X, double alpha,
                          VectorXd& grad_trunk, VectorXd& grad_head) {
  require(X.cols() > 0, ErrorKind::dimension, "jacobian_loss_grad: empty batch");
  DeformTrace trace;
  deform_batch_trace(net, X, alpha, trace);
  LinearStack stack = linear_stack(net, trace);

  std::vector<std::vector<MatrixXd>> tangents(2);
  for (int dir = 0; dir < 2; ++dir) {
    tangents[dir] = tangent_forward(stack, encode_tangent(X, net.encoding, alpha, dir));
  }

  const auto B = X.cols();
  const double inv_b = 1.0 / static_cast<double>(B);
  double loss = 0.0;
  MatrixXd g0(2, B), g1(2, B);
  for (Eigen::Index p = 0; p < B; ++p) {
    Eigen::Matrix2d J = Eigen::Matrix2d::Identity();
    J.col(0) += tangents[0].back().col(p);
    J.col(1) += tangents[1].back().col(p);
    Eigen::JacobiSVD<Eigen::Matrix2d> svd(J, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Vector2d sig = svd.singularValues();
    double c0 = 0.0, c1 = 0.0;
    loss += log_penalty_term(sig[0], &c0) + log_penalty_term(sig[1], &c1);
    Eigen::Matrix2d GJ = inv_b * (c0 * svd.matrixU().col(0) * svd.matrixV().col(0).transpose() +
                                  c1 * svd.matrixU().col(1) * svd.matrixV().col(1).transpose());
    g0.col(p) = GJ.col(0);
    g1.col(p) = GJ.col(1);
  }
  tangent_backward(stack, tangents[0], g0, grad_trunk, grad_head);
  tangent_backward(stack, tangents[1], g1, grad_trunk, grad_head);
  return loss * inv_b;
}

}  // namespace instalign
