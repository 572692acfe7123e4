#pragma once

#include "instalign/common.hpp"

namespace instalign {

/// Fourier-feature lifting of 2-D coordinates with log-linearly spaced
/// frequencies sigma_k = 2^(k * l_max / (L-1)) and a coarse-to-fine window.
/// Output layout: [x0, x1, then per frequency k the block
/// (sin x0, sin x1, cos x0, cos x1) scaled by w_k(alpha)].
struct EncodingSpec {
  int num_freqs = 8;        // L
  double max_log_freq = 6;  // l_max
  bool includes_identity = true;

  int output_dim() const { return 2 + 4 * num_freqs; }
  double frequency(int k) const;
  bool operator==(const EncodingSpec&) const = default;
};

struct WindowParam {
  double alpha = 0.0;  // in [0, L]
};

/// Per-frequency window weight w_k(alpha) = (1 - cos(pi*clamp(alpha-k,0,1)))/2.
double window_weight(double alpha, int k);

Vector2d validate_encode_input(const Vector2d& x, const EncodingSpec& spec, double alpha);

/// Single coordinate.
VectorXd encode(const Vector2d& x, const EncodingSpec& spec, const WindowParam& alpha);

/// Batched: X is 2 x B, result (2+4L) x B.
MatrixXd encode_batch(const MatrixXd& X, const EncodingSpec& spec, double alpha);

/// Jacobian d(encode)/dx, shape (2+4L) x 2.
MatrixXd encode_jacobian(const Vector2d& x, const EncodingSpec& spec, double alpha);

/// Chain rule helper: given upstream gradients w.r.t. the encoded batch
/// ((2+4L) x B) and the raw coordinates (2 x B), returns gradients w.r.t.
/// the coordinates (2 x B).
MatrixXd encode_backward(const MatrixXd& X, const EncodingSpec& spec, double alpha,
                         const MatrixXd& g_encoded);

/// Tangent propagation: columns of the result are d(encode)/dx_dir evaluated
/// per batch item, for input direction `dir` in {0, 1}. Shape (2+4L) x B.
MatrixXd encode_tangent(const MatrixXd& X, const EncodingSpec& spec, double alpha, int dir);

/// Linear window opening over the first third of training, then fully open:
/// alpha = L * min(1, epoch / (total_epochs/3)).
double alpha_schedule(int epoch, int total_epochs, int num_freqs);

}  // namespace instalign
