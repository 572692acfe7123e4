#include "instalign/encoding.hpp"

namespace instalign {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kPi = 3.1415926535897932384626433832795;
}  // namespace

double EncodingSpec::frequency(int k) const {
  if (num_freqs <= 1) return 1.0;
  return std::pow(2.0, static_cast<double>(k) * max_log_freq / (num_freqs - 1));
}

double window_weight(double alpha, int k) {
  double t = std::clamp(alpha - static_cast<double>(k), 0.0, 1.0);
  return 0.5 * (1.0 - std::cos(kPi * t));
}

Vector2d validate_encode_input(const Vector2d& x, const EncodingSpec& spec, double alpha) {
  require(spec.num_freqs >= 1, ErrorKind::config, "encode: num_freqs must be >= 1");
  require(x.allFinite(), ErrorKind::numeric, "encode: non-finite coordinate");
  require(alpha >= 0.0 && alpha <= static_cast<double>(spec.num_freqs), ErrorKind::config,
          "encode: alpha outside [0, L]");
  return x;
}

MatrixXd encode_batch(const MatrixXd& X, const EncodingSpec& spec, double alpha) {
  require(X.rows() == 2, ErrorKind::dimension, "encode: expected 2 x B coordinates");
  require(spec.num_freqs >= 1, ErrorKind::config, "encode: num_freqs must be >= 1");
  require(X.allFinite(), ErrorKind::numeric, "encode: non-finite coordinate");
  require(alpha >= 0.0 && alpha <= static_cast<double>(spec.num_freqs), ErrorKind::config,
          "encode: alpha outside [0, L]");
  const int L = spec.num_freqs;
  const auto B = X.cols();
  MatrixXd out(spec.output_dim(), B);
  out.topRows(2) = X;
  for (int k = 0; k < L; ++k) {
    double w = window_weight(alpha, k);
    double f = kTwoPi * spec.frequency(k);
    int base = 2 + 4 * k;
    out.row(base + 0) = w * (f * X.row(0)).array().sin();
    out.row(base + 1) = w * (f * X.row(1)).array().sin();
    out.row(base + 2) = w * (f * X.row(0)).array().cos();
    out.row(base + 3) = w * (f * X.row(1)).array().cos();
  }
  return out;
}

VectorXd encode(const Vector2d& x, const EncodingSpec& spec, const WindowParam& alpha) {
  return encode_batch(x, spec, alpha.alpha).col(0);
}

MatrixXd encode_jacobian(const Vector2d& x, const EncodingSpec& spec, double alpha) {
  validate_encode_input(x, spec, alpha);
  MatrixXd J = MatrixXd::Zero(spec.output_dim(), 2);
  J(0, 0) = 1.0;
  J(1, 1) = 1.0;
  for (int k = 0; k < spec.num_freqs; ++k) {
    double w = window_weight(alpha, k);
    double f = kTwoPi * spec.frequency(k);
    int base = 2 + 4 * k;
    J(base + 0, 0) = w * f * std::cos(f * x[0]);
    J(base + 1, 1) = w * f * std::cos(f * x[1]);
    J(base + 2, 0) = -w * f * std::sin(f * x[0]);
    J(base + 3, 1) = -w * f * std::sin(f * x[1]);
  }
  return J;
}

MatrixXd encode_backward(const MatrixXd& X, const EncodingSpec& spec, double alpha,
                         const MatrixXd& g_encoded) {
  require(g_encoded.rows() == spec.output_dim() && g_encoded.cols() == X.cols(),
          ErrorKind::dimension, "encode_backward: gradient shape mismatch");
  MatrixXd gx = g_encoded.topRows(2);
  for (int k = 0; k < spec.num_freqs; ++k) {
    double w = window_weight(alpha, k);
    double f = kTwoPi * spec.frequency(k);
    int base = 2 + 4 * k;
    gx.row(0) += w * f *
                 ((f * X.row(0)).array().cos() * g_encoded.row(base + 0).array() -
                  (f * X.row(0)).array().sin() * g_encoded.row(base + 2).array())
                     .matrix();
    gx.row(1) += w * f *
                 ((f * X.row(1)).array().cos() * g_encoded.row(base + 1).array() -
                  (f * X.row(1)).array().sin() * g_encoded.row(base + 3).array())
                     .matrix();
  }
  return gx;
}

MatrixXd encode_tangent(const MatrixXd& X, const EncodingSpec& spec, double alpha, int dir) {
  require(dir == 0 || dir == 1, ErrorKind::dimension, "encode_tangent: dir must be 0 or 1");
  MatrixXd T = MatrixXd::Zero(spec.output_dim(), X.cols());
  T.row(dir).setOnes();
  for (int k = 0; k < spec.num_freqs; ++k) {
    double w = window_weight(alpha, k);
    double f = kTwoPi * spec.frequency(k);
    int base = 2 + 4 * k;
    T.row(base + dir) = w * f * (f * X.row(dir)).array().cos();
    T.row(base + 2 + dir) = -w * f * (f * X.row(dir)).array().sin();
  }
  return T;
}

double alpha_schedule(int epoch, int total_epochs, int num_freqs) {
  require(total_epochs > 0, ErrorKind::config, "alpha_schedule: total_epochs must be positive");
  require(epoch >= 0 && epoch <= total_epochs, ErrorKind::config,
          "alpha_schedule: epoch out of range");
  double ramp = static_cast<double>(total_epochs) / 3.0;
  double a = static_cast<double>(num_freqs) * std::min(1.0, static_cast<double>(epoch) / ramp);
  return std::clamp(a, 0.0, static_cast<double>(num_freqs));
}

}  // namespace instalign
