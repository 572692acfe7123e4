#include "instalign/diffcore.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace instalign {

int max_threads() {
  const char* env = std::getenv("INSTALIGN_THREADS");
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (env != nullptr) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<int>(std::min<long>(v, hw));
  }
  return hw;
}

void validate(const MlpSpec& spec) {
  require(spec.input_dim >= 1 && spec.output_dim >= 1, ErrorKind::dimension,
          "MlpSpec: input and output dims must be >= 1");
  require(spec.num_hidden_layers >= 0, ErrorKind::dimension,
          "MlpSpec: num_hidden_layers must be >= 0");
  require(spec.num_hidden_layers == 0 || spec.hidden_dim >= 1, ErrorKind::dimension,
          "MlpSpec: hidden_dim must be >= 1 when hidden layers are present");
}

std::vector<LayerShape> mlp_layout(const MlpSpec& spec) {
  validate(spec);
  std::vector<LayerShape> shapes;
  int in = spec.input_dim;
  for (int l = 0; l < spec.num_hidden_layers; ++l) {
    shapes.push_back({spec.hidden_dim, in, true});
    if (spec.use_layernorm) shapes.push_back({spec.hidden_dim, 1, true});
    in = spec.hidden_dim;
  }
  shapes.push_back({spec.output_dim, in, true});
  return shapes;
}

ParamVector init_params(const MlpSpec& spec, std::uint64_t seed, FinalInit final_init,
                        double final_scale) {
  ParamVector p;
  p.shapes = mlp_layout(spec);
  p.rng_seed = seed;
  p.values.setZero(p.total_count());
  Rng rng(seed);
  int off = 0;
  int n_linear = spec.num_hidden_layers + 1;
  int linear_seen = 0;
  for (const auto& s : p.shapes) {
    bool is_layernorm = (s.cols == 1 && spec.use_layernorm);
    if (is_layernorm) {
      p.values.segment(off, s.rows).setOnes();            // gamma
      p.values.segment(off + s.rows, s.rows).setZero();   // beta
    } else {
      ++linear_seen;
      bool is_final = (linear_seen == n_linear);
      double bound = (is_final && final_init == FinalInit::near_zero)
                         ? final_scale
                         : std::sqrt(6.0 / static_cast<double>(s.cols));
      for (int i = 0; i < s.rows * s.cols; ++i) p.values[off + i] = rng.uniform(-bound, bound);
      p.values.segment(off + s.rows * s.cols, s.rows).setZero();  // bias
    }
    off += s.count();
  }
  return p;
}

namespace {

struct BlockView {
  Eigen::Map<const MatrixXd> mat;
  Eigen::Map<const VectorXd> bias;
};

BlockView block_view(const ParamVector& p, int block, int offset) {
  const LayerShape& s = p.shapes[block];
  const double* base = p.values.data() + offset;
  return {Eigen::Map<const MatrixXd>(base, s.rows, s.cols),
          Eigen::Map<const VectorXd>(base + s.rows * s.cols, s.has_bias ? s.rows : 0)};
}

// Column-wise layernorm; optionally records xhat and 1/std per column.
MatrixXd layernorm_cols(const MatrixXd& X, const Eigen::Map<const VectorXd>& gamma,
                        const Eigen::Map<const VectorXd>& beta, MatrixXd* xhat_out,
                        VectorXd* istd_out) {
  const auto n = static_cast<double>(X.rows());
  Eigen::RowVectorXd mu = X.colwise().mean();
  MatrixXd centered = X.rowwise() - mu;
  Eigen::RowVectorXd var = centered.array().square().colwise().sum() / n;
  Eigen::RowVectorXd istd = (var.array() + kLayerNormEps).rsqrt();
  MatrixXd xhat = centered.array().rowwise() * istd.array();
  MatrixXd y = (xhat.array().colwise() * gamma.array()).colwise() + beta.array();
  if (xhat_out) *xhat_out = xhat;
  if (istd_out) *istd_out = istd.transpose();
  return y;
}

void check_input(const MlpSpec& spec, const ParamVector& params, const MatrixXd& X) {
  require(X.rows() == spec.input_dim, ErrorKind::dimension,
          "mlp_forward: input has " + std::to_string(X.rows()) + " rows, spec expects " +
              std::to_string(spec.input_dim));
  require(params.shapes == mlp_layout(spec), ErrorKind::dimension,
          "mlp_forward: parameter shapes do not match spec layout");
  require(params.values.size() == params.total_count(), ErrorKind::dimension,
          "mlp_forward: parameter value count does not match shapes");
}

}  // namespace

VectorXd layernorm(const VectorXd& x, const VectorXd& gamma, const VectorXd& beta) {
  require(x.size() == gamma.size() && x.size() == beta.size(), ErrorKind::dimension,
          "layernorm: x, gamma, beta must have equal lengths");
  const auto n = static_cast<double>(x.size());
  double mu = x.mean();
  VectorXd centered = x.array() - mu;
  double var = centered.squaredNorm() / n;
  double istd = 1.0 / std::sqrt(var + kLayerNormEps);
  return (gamma.array() * centered.array() * istd + beta.array()).matrix();
}

MatrixXd mlp_forward_trace(const ParamVector& params, const MlpSpec& spec, const MatrixXd& X,
                           MlpTrace& trace) {
  check_input(spec, params, X);
  trace.input = X;
  trace.lin_out.clear();
  trace.ln_xhat.clear();
  trace.ln_istd.clear();
  trace.act_out.clear();

  MatrixXd cur = X;
  int off = 0;
  int block = 0;
  for (int l = 0; l < spec.num_hidden_layers; ++l) {
    BlockView lin = block_view(params, block, off);
    off += params.shapes[block].count();
    ++block;
    MatrixXd z = (lin.mat * cur).colwise() + lin.bias;
    trace.lin_out.push_back(z);
    if (spec.use_layernorm) {
      BlockView ln = block_view(params, block, off);
      off += params.shapes[block].count();
      ++block;
      MatrixXd xhat;
      VectorXd istd;
      z = layernorm_cols(z, Eigen::Map<const VectorXd>(ln.mat.data(), ln.mat.rows()), ln.bias,
                         &xhat, &istd);
      trace.ln_xhat.push_back(std::move(xhat));
      trace.ln_istd.push_back(std::move(istd));
    }
    cur = z.cwiseMax(0.0);
    trace.act_out.push_back(cur);
  }
  BlockView out = block_view(params, block, off);
  MatrixXd y = (out.mat * cur).colwise() + out.bias;
  trace.lin_out.push_back(y);
  return y;
}

MatrixXd mlp_forward(const ParamVector& params, const MlpSpec& spec, const MatrixXd& X) {
  check_input(spec, params, X);
  MatrixXd cur = X;
  int off = 0;
  int block = 0;
  for (int l = 0; l < spec.num_hidden_layers; ++l) {
    BlockView lin = block_view(params, block, off);
    off += params.shapes[block].count();
    ++block;
    MatrixXd z = (lin.mat * cur).colwise() + lin.bias;
    if (spec.use_layernorm) {
      BlockView ln = block_view(params, block, off);
      off += params.shapes[block].count();
      ++block;
      z = layernorm_cols(z, Eigen::Map<const VectorXd>(ln.mat.data(), ln.mat.rows()), ln.bias,
                         nullptr, nullptr);
    }
    cur = z.cwiseMax(0.0);
  }
  BlockView out = block_view(params, block, off);
  return (out.mat * cur).colwise() + out.bias;
}

void mlp_backward_trace(const ParamVector& params, const MlpSpec& spec, const MlpTrace& trace,
                        const MatrixXd& G, VectorXd& grad_params, MatrixXd* grad_input) {
  require(G.rows() == spec.output_dim, ErrorKind::dimension,
          "mlp_backward: upstream gradient has wrong dimension");
  require(G.cols() == trace.input.cols(), ErrorKind::dimension,
          "mlp_backward: upstream batch size does not match trace");
  require(grad_params.size() == params.values.size(), ErrorKind::dimension,
          "mlp_backward: grad accumulator has wrong size");

  // Block offsets in forward order.
  std::vector<int> offsets(params.shapes.size());
  for (std::size_t i = 0, off = 0; i < params.shapes.size(); ++i) {
    offsets[i] = static_cast<int>(off);
    off += params.shapes[i].count();
  }

  const int H = spec.num_hidden_layers;
  int out_block = static_cast<int>(params.shapes.size()) - 1;
  BlockView out = block_view(params, out_block, offsets[out_block]);
  const MatrixXd& last_act = (H > 0) ? trace.act_out[H - 1] : trace.input;

  {
    const LayerShape& s = params.shapes[out_block];
    double* base = grad_params.data() + offsets[out_block];
    Eigen::Map<MatrixXd>(base, s.rows, s.cols).noalias() += G * last_act.transpose();
    Eigen::Map<VectorXd>(base + s.rows * s.cols, s.rows) += G.rowwise().sum();
  }
  MatrixXd g = out.mat.transpose() * G;  // gradient w.r.t. last hidden activation

  for (int l = H - 1; l >= 0; --l) {
    // ReLU mask: post-activation is positive exactly where the input was.
    g = (trace.act_out[l].array() > 0.0).select(g, MatrixXd::Zero(g.rows(), g.cols()));

    if (spec.use_layernorm) {
      int ln_block = 2 * l + 1;
      BlockView ln = block_view(params, ln_block, offsets[ln_block]);
      Eigen::Map<const VectorXd> gamma(ln.mat.data(), ln.mat.rows());
      const MatrixXd& xhat = trace.ln_xhat[l];
      const VectorXd& istd = trace.ln_istd[l];
      {
        const LayerShape& s = params.shapes[ln_block];
        double* base = grad_params.data() + offsets[ln_block];
        Eigen::Map<VectorXd>(base, s.rows) += (g.array() * xhat.array()).rowwise().sum().matrix();
        Eigen::Map<VectorXd>(base + s.rows, s.rows) += g.rowwise().sum();
      }
      MatrixXd gxhat = g.array().colwise() * gamma.array();
      // dL/dx = istd * (gxhat - mean(gxhat) - xhat * mean(gxhat .* xhat)), per column.
      Eigen::RowVectorXd m1 = gxhat.colwise().mean();
      Eigen::RowVectorXd m2 = (gxhat.array() * xhat.array()).colwise().mean();
      MatrixXd gx = gxhat.rowwise() - m1;
      gx.noalias() -= xhat * m2.asDiagonal();
      g = gx.array().rowwise() * istd.transpose().array();
    }

    int lin_block = spec.use_layernorm ? 2 * l : l;
    BlockView lin = block_view(params, lin_block, offsets[lin_block]);
    const MatrixXd& input = (l > 0) ? trace.act_out[l - 1] : trace.input;
    {
      const LayerShape& s = params.shapes[lin_block];
      double* base = grad_params.data() + offsets[lin_block];
      Eigen::Map<MatrixXd>(base, s.rows, s.cols).noalias() += g * input.transpose();
      Eigen::Map<VectorXd>(base + s.rows * s.cols, s.rows) += g.rowwise().sum();
    }
    if (l > 0 || grad_input) g = lin.mat.transpose() * g;
  }

  if (grad_input) *grad_input = g;
}

std::pair<VectorXd, VectorXd> mlp_backward(const ParamVector& params, const MlpSpec& spec,
                                           const VectorXd& x, const VectorXd& upstream) {
  MlpTrace trace;
  mlp_forward_trace(params, spec, x, trace);
  VectorXd grad_params = VectorXd::Zero(params.values.size());
  MatrixXd grad_x;
  mlp_backward_trace(params, spec, trace, upstream, grad_params, &grad_x);
  return {grad_params, grad_x.col(0)};
}

AdamState AdamState::make(int n, double lr) {
  AdamState s;
  s.m = VectorXd::Zero(n);
  s.v = VectorXd::Zero(n);
  s.lr = lr;
  return s;
}

bool adam_step(AdamState& state, ParamVector& params, const VectorXd& grads) {
  require(grads.size() == params.values.size(), ErrorKind::dimension,
          "adam_step: gradient size does not match parameters");
  require(state.m.size() == params.values.size(), ErrorKind::dimension,
          "adam_step: state size does not match parameters");
  if (!grads.allFinite()) return false;
  state.step_count += 1;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.array().square().matrix();
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  VectorXd mhat = state.m / bc1;
  VectorXd vhat = state.v / bc2;
  params.values.array() -= state.lr * mhat.array() / (vhat.array().sqrt() + state.eps);
  return true;
}

double plateau_update(PlateauScheduler& sched, double epoch_loss) {
  require(std::isfinite(epoch_loss), ErrorKind::numeric, "plateau_update: loss must be finite");
  bool improved = !std::isfinite(sched.best_loss) ||
                  epoch_loss < sched.best_loss - sched.rel_threshold * std::abs(sched.best_loss);
  if (improved) {
    sched.best_loss = epoch_loss;
    sched.epochs_since_improve = 0;
  } else {
    sched.epochs_since_improve += 1;
    if (sched.epochs_since_improve >= sched.patience) {
      sched.lr = std::max(sched.lr * sched.factor, sched.min_lr);
      sched.epochs_since_improve = 0;
    }
  }
  return sched.lr;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

void write_le_doubles(std::ostream& os, const VectorXd& v) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &v[i], 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    char buf[8];
    std::memcpy(buf, &bits, 8);
    os.write(buf, 8);
  }
}

VectorXd read_le_doubles(std::istream& is, Eigen::Index n) {
  VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    char buf[8];
    is.read(buf, 8);
    require(is.good(), ErrorKind::io, "checkpoint: truncated parameter payload");
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    std::memcpy(&v[i], &bits, 8);
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["kind"] = ckpt.kind;
  header["epoch"] = ckpt.epoch;
  header["seed"] = ckpt.params.rng_seed;
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& s : ckpt.params.shapes) shapes.push_back({s.rows, s.cols, s.has_bias});
  header["shapes"] = shapes;
  header["extra"] = ckpt.extra_json.empty() ? nlohmann::json::object()
                                            : nlohmann::json::parse(ckpt.extra_json);
  std::ofstream os(path, std::ios::binary);
  require(os.good(), ErrorKind::io, "checkpoint: cannot open for writing: " + path);
  os << header.dump() << '\n';
  write_le_doubles(os, ckpt.params.values);
  require(os.good(), ErrorKind::io, "checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), ErrorKind::io, "checkpoint: cannot open: " + path);
  std::string line;
  std::getline(is, line);
  require(is.good(), ErrorKind::io, "checkpoint: missing header line");
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  require(!header.is_discarded(), ErrorKind::io, "checkpoint: malformed JSON header");
  Checkpoint ckpt;
  ckpt.kind = header.value("kind", "");
  ckpt.epoch = header.value("epoch", 0);
  ckpt.params.rng_seed = header.value("seed", std::uint64_t{0});
  for (const auto& s : header.at("shapes")) {
    ckpt.params.shapes.push_back({s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<bool>()});
  }
  ckpt.extra_json = header.value("extra", nlohmann::json::object()).dump();
  ckpt.params.values = read_le_doubles(is, ckpt.params.total_count());
  return ckpt;
}

}  // namespace instalign
