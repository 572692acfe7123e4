#pragma once

#include "instalign/diffcore.hpp"
#include "instalign/encoding.hpp"

namespace instalign {

inline constexpr int kEmbeddingDim = 64;

// ---------------------------------------------------------------------------
// Canonical expression field: encoded coordinates -> 64-d embedding.
// ---------------------------------------------------------------------------

struct ExprField {
  ParamVector params;
  MlpSpec spec;
  EncodingSpec encoding;

  /// 4 weight layers (3 hidden of width 256 with LayerNorm+ReLU) ending in a
  /// 64-d bottleneck.
  static ExprField make(const EncodingSpec& enc, std::uint64_t seed, int hidden_dim = 256);
};

VectorXd field_embed(const ExprField& field, const Vector2d& x, double alpha);
MatrixXd field_embed_batch(const ExprField& field, const MatrixXd& X, double alpha);

/// Trace-carrying forward for training. `enc` keeps the encoded batch so the
/// backward pass can chain gradients to the raw coordinates.
struct FieldTrace {
  MatrixXd encoded;
  MlpTrace mlp;
};
MatrixXd field_embed_trace(const ExprField& field, const MatrixXd& X, double alpha,
                           FieldTrace& trace);
/// Backward for upstream gradient w.r.t. embeddings. Accumulates parameter
/// gradients; optionally returns gradients w.r.t. the raw 2-D coordinates.
void field_backward(const ExprField& field, const MatrixXd& X, double alpha,
                    const FieldTrace& trace, const MatrixXd& g_embed, VectorXd& grad_params,
                    MatrixXd* grad_coords = nullptr);

// ---------------------------------------------------------------------------
// Expression decoder: embedding -> HVG expression.
// ---------------------------------------------------------------------------

struct ExprDecoder {
  ParamVector params;
  MlpSpec spec;

  static ExprDecoder make(int n_genes, std::uint64_t seed, int hidden_dim = 256);
};

VectorXd decode_expression(const ExprDecoder& dec, const VectorXd& embedding);
MatrixXd decode_expression_batch(const ExprDecoder& dec, const MatrixXd& E);

// ---------------------------------------------------------------------------
// Deformation network: residual coordinate map x -> x + dx(x).
// ---------------------------------------------------------------------------

struct DeformNet {
  ParamVector trunk;
  MlpSpec trunk_spec;
  ParamVector head;
  MlpSpec head_spec;
  EncodingSpec encoding;

  /// 6-layer trunk (width 128) into a one-hidden-layer spatial head (width
  /// 64) whose final layer starts near zero, so the map starts as identity.
  /// No layernorm: the Jacobian regularizer differentiates through the
  /// tangent pass, which stays exact for the piecewise-linear ReLU stack.
  static DeformNet make(const EncodingSpec& enc, std::uint64_t seed);
};

Vector2d deform(const DeformNet& net, const Vector2d& x, double alpha);
MatrixXd deform_batch(const DeformNet& net, const MatrixXd& X, double alpha);

struct DeformTrace {
  MatrixXd encoded;
  MlpTrace trunk;
  MlpTrace head;
};
MatrixXd deform_batch_trace(const DeformNet& net, const MatrixXd& X, double alpha,
                            DeformTrace& trace);
/// Backward for upstream gradient w.r.t. the deformed coordinates (2 x B).
/// The residual structure means the gradient w.r.t. raw inputs is
/// g + d(dx)/dx^T g; only the parameter gradients are needed for training.
void deform_backward(const DeformNet& net, const DeformTrace& trace, const MatrixXd& g_deformed,
                     VectorXd& grad_trunk, VectorXd& grad_head);

// ---------------------------------------------------------------------------
// Jacobian regularization.
// ---------------------------------------------------------------------------

struct JacobianSample {
  Vector2d point;
  Eigen::Matrix2d J;
  Vector2d singular_values;  // sigma1 >= sigma2 >= 0
};

/// d(deform)/dx via two forward-tangent passes through the encoded MLP stack.
Eigen::Matrix2d jacobian_at(const DeformNet& net, const Vector2d& x, double alpha);
std::vector<Eigen::Matrix2d> jacobian_batch(const DeformNet& net, const MatrixXd& X, double alpha);

/// Closed-form singular values from the J^T J eigenvalues:
/// sigma = sqrt((t +- sqrt(t^2 - 4 d^2)) / 2), t = |J|_F^2, d = det J.
Vector2d svd2x2(const Eigen::Matrix2d& J);

JacobianSample jacobian_sample_at(const DeformNet& net, const Vector2d& x, double alpha);

/// Asymmetric log-singular-value penalty, mean over the batch of
/// sum_k w_k (log sigma_k)^2 with w_k = 5 for compression (log sigma < 0)
/// and 1 for expansion. Singular values are clamped at 1e-8 before the log.
double jacobian_loss(const std::vector<JacobianSample>& samples);

inline constexpr double kSigmaClampFloor = 1e-8;
inline constexpr double kCompressionWeight = 5.0;

/// Training path: loss over the given points plus exact parameter gradients,
/// obtained by reverse-propagating through the tangent computation (ReLU
/// masks held fixed, their derivative being zero almost everywhere).
double jacobian_loss_grad(const DeformNet& net, const MatrixXd& X, double alpha,
                          VectorXd& grad_trunk, VectorXd& grad_head);

}  // namespace instalign
