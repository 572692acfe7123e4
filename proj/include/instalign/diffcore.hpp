#pragma once

#include <optional>
#include <string>
#include <vector>

#include "instalign/common.hpp"

namespace instalign {

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Shape of one parameter block: a (rows x cols) matrix plus an optional
/// length-`rows` bias vector. LayerNorm blocks reuse the same scheme with
/// cols == 1: the "matrix" is gamma and the bias is beta.
struct LayerShape {
  int rows = 0;
  int cols = 0;
  bool has_bias = true;

  int count() const { return rows * cols + (has_bias ? rows : 0); }
  bool operator==(const LayerShape&) const = default;
};

/// Flat 64-bit parameter vector with per-block shape metadata.
struct ParamVector {
  VectorXd values;
  std::vector<LayerShape> shapes;
  std::uint64_t rng_seed = 0;

  int total_count() const {
    int n = 0;
    for (const auto& s : shapes) n += s.count();
    return n;
  }
  /// Offset of block `i` in `values`.
  int offset(int i) const {
    int n = 0;
    for (int j = 0; j < i; ++j) n += shapes[j].count();
    return n;
  }
};

enum class Activation { relu };

/// Static MLP topology: `num_hidden_layers` hidden layers of width
/// `hidden_dim` (Linear -> LayerNorm if enabled -> ReLU) and a final plain
/// Linear layer to `output_dim`.
struct MlpSpec {
  int input_dim = 0;
  int hidden_dim = 0;
  int num_hidden_layers = 0;
  int output_dim = 0;
  bool use_layernorm = false;
  Activation activation = Activation::relu;

  bool operator==(const MlpSpec&) const = default;
};

void validate(const MlpSpec& spec);

/// Parameter blocks implied by a spec, in evaluation order. Each hidden layer
/// contributes a linear block followed (if enabled) by a layernorm block.
std::vector<LayerShape> mlp_layout(const MlpSpec& spec);

enum class FinalInit { kaiming, near_zero };

/// Kaiming-uniform fan-in initialization for linear blocks (gamma = 1,
/// beta = 0 for layernorm blocks). `final_init` optionally draws the last
/// linear layer from U(-final_scale, final_scale) with zero bias.
ParamVector init_params(const MlpSpec& spec, std::uint64_t seed,
                        FinalInit final_init = FinalInit::kaiming,
                        double final_scale = 1e-4);

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

/// y = gamma .* (x - mean(x)) / sqrt(var(x) + eps) + beta, population variance.
VectorXd layernorm(const VectorXd& x, const VectorXd& gamma, const VectorXd& beta);

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Intermediates captured by a forward pass; consumed by the backward pass.
/// Batch convention throughout: columns are batch items.
struct MlpTrace {
  MatrixXd input;                  // input_dim x B
  std::vector<MatrixXd> lin_out;   // per layer, pre-normalization
  std::vector<MatrixXd> ln_xhat;   // per hidden layer (empty if no layernorm)
  std::vector<VectorXd> ln_istd;   // per hidden layer, 1/sqrt(var+eps) per column
  std::vector<MatrixXd> act_out;   // per hidden layer, post-ReLU
};

/// Batched forward: X is input_dim x B, result is output_dim x B.
MatrixXd mlp_forward(const ParamVector& params, const MlpSpec& spec, const MatrixXd& X);

/// Forward capturing intermediates for a subsequent backward call.
MatrixXd mlp_forward_trace(const ParamVector& params, const MlpSpec& spec, const MatrixXd& X,
                           MlpTrace& trace);

/// Reverse-mode pass for upstream gradient G (output_dim x B). Accumulates
/// into `grad_params` (must be sized params.values.size(), may hold previous
/// contributions) and optionally writes the gradient w.r.t. the input.
void mlp_backward_trace(const ParamVector& params, const MlpSpec& spec, const MlpTrace& trace,
                        const MatrixXd& G, VectorXd& grad_params, MatrixXd* grad_input = nullptr);

/// Spec-level convenience: single input vector, single upstream vector.
/// Returns gradients of dot(output, upstream) w.r.t. params and x.
std::pair<VectorXd, VectorXd> mlp_backward(const ParamVector& params, const MlpSpec& spec,
                                           const VectorXd& x, const VectorXd& upstream);

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct AdamState {
  VectorXd m;
  VectorXd v;
  long step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState make(int n, double lr = 1e-3);
};

/// Standard Adam with bias correction. Returns false (and leaves params and
/// state untouched) when the gradient contains non-finite entries.
bool adam_step(AdamState& state, ParamVector& params, const VectorXd& grads);

struct PlateauScheduler {
  int patience = 20;
  double factor = 0.5;
  double min_lr = 1e-5;
  double rel_threshold = 1e-4;
  double lr = 1e-3;
  double best_loss = std::numeric_limits<double>::infinity();
  int epochs_since_improve = 0;
};

/// ReduceLROnPlateau step: decays lr by `factor` (floored at min_lr) once no
/// relative improvement beyond `rel_threshold` has been seen for `patience`
/// consecutive epochs. Returns the (possibly updated) learning rate.
double plateau_update(PlateauScheduler& sched, double epoch_loss);

// ---------------------------------------------------------------------------
// Checkpoints: one-line JSON header followed by raw little-endian doubles.
// ---------------------------------------------------------------------------

struct Checkpoint {
  ParamVector params;
  int epoch = 0;
  std::string kind;
  std::string extra_json;  // module-specific header payload ("{}" if none)
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace instalign
