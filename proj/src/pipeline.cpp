#include "instalign/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace instalign {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void PipelineConfig::validate() const {
  require(phase1_epochs >= 0 && phase2_epochs >= 0, ErrorKind::config,
          "config: epochs must be >= 0");
  require(lambda_r >= 0.0 && lambda_j >= 0.0 && lambda_f >= 0.0, ErrorKind::config,
          "config: lambda weights must be >= 0");
  require(k_neighbors >= 1, ErrorKind::config, "config: k_neighbors must be >= 1");
  require(num_freqs >= 1, ErrorKind::config, "config: num_freqs must be >= 1");
  require(batch_size >= 1, ErrorKind::config, "config: batch_size must be >= 1");
  require(lr > 0.0, ErrorKind::config, "config: lr must be positive");
  require(ema_decay >= 0.0 && ema_decay <= 1.0, ErrorKind::config,
          "config: ema_decay must lie in [0, 1]");
  require(n_hvg >= 1, ErrorKind::config, "config: n_hvg must be >= 1");
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  require(!j.is_discarded(), ErrorKind::config, "config: malformed JSON");
  require(j.is_object(), ErrorKind::config, "config: expected a JSON object");
  PipelineConfig c;
  static const std::vector<std::string> known = {
      "phase1_epochs", "phase2_epochs", "lambda_r", "lambda_j", "lambda_f",
      "k_neighbors",   "num_freqs",     "max_log_freq", "deform_num_freqs",
      "deform_max_log_freq", "batch_size", "lr",
      "seed",          "n_hvg",         "pca_components", "pca_spatial_gate",
      "ema_decay",     "jacobian_subsample", "skip_phase1", "skip_phase2", "no_jacobian",
      "phase2_field_lr_scale"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    require(std::find(known.begin(), known.end(), it.key()) != known.end(), ErrorKind::config,
            "config: unknown key '" + it.key() + "'");
  }
  c.phase1_epochs = j.value("phase1_epochs", c.phase1_epochs);
  c.phase2_epochs = j.value("phase2_epochs", c.phase2_epochs);
  c.lambda_r = j.value("lambda_r", c.lambda_r);
  c.lambda_j = j.value("lambda_j", c.lambda_j);
  c.lambda_f = j.value("lambda_f", c.lambda_f);
  c.k_neighbors = j.value("k_neighbors", c.k_neighbors);
  c.num_freqs = j.value("num_freqs", c.num_freqs);
  c.max_log_freq = j.value("max_log_freq", c.max_log_freq);
  c.deform_num_freqs = j.value("deform_num_freqs", c.deform_num_freqs);
  c.deform_max_log_freq = j.value("deform_max_log_freq", c.deform_max_log_freq);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.n_hvg = j.value("n_hvg", c.n_hvg);
  c.pca_components = j.value("pca_components", c.pca_components);
  c.pca_spatial_gate = j.value("pca_spatial_gate", c.pca_spatial_gate);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.phase2_field_lr_scale = j.value("phase2_field_lr_scale", c.phase2_field_lr_scale);
  c.jacobian_subsample = j.value("jacobian_subsample", c.jacobian_subsample);
  c.skip_phase1 = j.value("skip_phase1", c.skip_phase1);
  c.skip_phase2 = j.value("skip_phase2", c.skip_phase2);
  c.no_jacobian = j.value("no_jacobian", c.no_jacobian);
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::from_json_file(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), ErrorKind::config, "config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json_text(ss.str());
}

std::string PipelineConfig::to_json() const {
  nlohmann::json j;
  j["phase1_epochs"] = phase1_epochs;
  j["phase2_epochs"] = phase2_epochs;
  j["lambda_r"] = lambda_r;
  j["lambda_j"] = lambda_j;
  j["lambda_f"] = lambda_f;
  j["k_neighbors"] = k_neighbors;
  j["num_freqs"] = num_freqs;
  j["max_log_freq"] = max_log_freq;
  j["deform_num_freqs"] = deform_num_freqs;
  j["deform_max_log_freq"] = deform_max_log_freq;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["seed"] = seed;
  j["n_hvg"] = n_hvg;
  j["pca_components"] = pca_components;
  j["pca_spatial_gate"] = pca_spatial_gate;
  j["ema_decay"] = ema_decay;
  j["phase2_field_lr_scale"] = phase2_field_lr_scale;
  j["jacobian_subsample"] = jacobian_subsample;
  j["skip_phase1"] = skip_phase1;
  j["skip_phase2"] = skip_phase2;
  j["no_jacobian"] = no_jacobian;
  return j.dump(2);
}

Networks init_networks(const PipelineConfig& cfg, int n_genes) {
  EncodingSpec enc = cfg.encoding();
  Networks nets{ExprField::make(enc, derive_seed(cfg.seed, 10)),
                ExprField::make(enc, derive_seed(cfg.seed, 11)),
                ExprDecoder::make(n_genes, derive_seed(cfg.seed, 12)),
                DeformNet::make(cfg.deform_encoding(), derive_seed(cfg.seed, 13))};
  return nets;
}

// ---------------------------------------------------------------------------
// Shared trainer pieces
// ---------------------------------------------------------------------------

namespace {

MatrixXd gather_coords(const MatrixX2d& coords, const std::vector<int>& idx) {
  MatrixXd out(2, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.col(static_cast<Eigen::Index>(i)) = coords.row(idx[i]).transpose();
  }
  return out;
}

MatrixXd gather_expr(const MatrixXd& expr, const std::vector<int>& idx) {
  MatrixXd out(expr.cols(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.col(static_cast<Eigen::Index>(i)) = expr.row(idx[i]).transpose();
  }
  return out;
}

struct ReconOut {
  double loss = 0.0;
  MatrixXd embeddings;   // 64 x B (values; frozen copy for the matcher)
  MatrixXd grad_coords;  // 2 x B when requested
};

// field(x) -> decoder -> composite reconstruction loss against targets.
// Parameter gradients are scaled by `weight` and accumulated.
ReconOut recon_step(const ExprField& field, const ExprDecoder& dec, const MatrixXd& x,
                    const MatrixXd& targets, double alpha, double weight, VectorXd& g_field,
                    VectorXd& g_dec, bool want_coord_grad) {
  ReconOut out;
  FieldTrace ftr;
  out.embeddings = field_embed_trace(field, x, alpha, ftr);
  MlpTrace dtr;
  MatrixXd pred = mlp_forward_trace(dec.params, dec.spec, out.embeddings, dtr);
  MatrixXd g_pred;
  ReconLoss rl = reconstruction_loss(pred, targets, &g_pred);
  out.loss = rl.total;
  g_pred *= weight;
  MatrixXd g_embed;
  mlp_backward_trace(dec.params, dec.spec, dtr, g_pred, g_dec, &g_embed);
  if (want_coord_grad) {
    field_backward(field, x, alpha, ftr, g_embed, g_field, &out.grad_coords);
  } else {
    field_backward(field, x, alpha, ftr, g_embed, g_field, nullptr);
  }
  return out;
}

struct EpochBatches {
  // union of (slice_tag, row) pairs split into batches
  std::vector<std::vector<std::pair<int, int>>> batches;
};

EpochBatches make_batches(int n_ref, int n_src, int batch_size, Rng& rng) {
  std::vector<std::pair<int, int>> all;
  all.reserve(static_cast<std::size_t>(n_ref + n_src));
  for (int i = 0; i < n_ref; ++i) all.emplace_back(0, i);
  for (int i = 0; i < n_src; ++i) all.emplace_back(1, i);
  rng.shuffle(all);
  EpochBatches out;
  for (std::size_t pos = 0; pos < all.size(); pos += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(all.size(), pos + static_cast<std::size_t>(batch_size));
    out.batches.emplace_back(all.begin() + static_cast<long>(pos),
                             all.begin() + static_cast<long>(end));
  }
  return out;
}

double bbox_area(const MatrixX2d& pts) {
  return (pts.col(0).maxCoeff() - pts.col(0).minCoeff()) *
         (pts.col(1).maxCoeff() - pts.col(1).minCoeff());
}

}  // namespace

// ---------------------------------------------------------------------------
// Phase 1
// ---------------------------------------------------------------------------

void run_phase1(const PipelineConfig& cfg, Networks& nets, const ProcessedSlice& src,
                const ProcessedSlice& ref, std::vector<LossRecord>& history) {
  cfg.validate();
  const int n_ref = static_cast<int>(ref.coords.rows());
  const int n_src = static_cast<int>(src.coords.rows());
  const int L = cfg.num_freqs;

  PcaMatchResult pca = pca_match_targets(src.coords, src.expr, ref.coords, ref.expr,
                                         std::min<int>(cfg.pca_components,
                                                       static_cast<int>(src.expr.cols())),
                                         cfg.pca_spatial_gate);

  AdamState opt_ref = AdamState::make(static_cast<int>(nets.field_ref.params.values.size()),
                                      cfg.lr);
  AdamState opt_src = AdamState::make(static_cast<int>(nets.field_src.params.values.size()),
                                      cfg.lr);
  AdamState opt_dec = AdamState::make(static_cast<int>(nets.decoder.params.values.size()),
                                      cfg.lr);
  AdamState opt_trunk = AdamState::make(static_cast<int>(nets.deform.trunk.values.size()),
                                        cfg.lr);
  AdamState opt_head = AdamState::make(static_cast<int>(nets.deform.head.values.size()),
                                       cfg.lr);

  double best_eval = std::numeric_limits<double>::infinity();
  VectorXd best_ref, best_src, best_dec;
  int best_epoch = -1;

  for (int epoch = 0; epoch < cfg.phase1_epochs; ++epoch) {
    double alpha = alpha_schedule(epoch, cfg.phase1_epochs, L);
    double alpha_d = alpha_schedule(epoch, cfg.phase1_epochs, nets.deform.encoding.num_freqs);
    Rng rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    EpochBatches plan = make_batches(n_ref, n_src, cfg.batch_size, rng);

    double recon_sum = 0.0;
    for (const auto& batch : plan.batches) {
      std::vector<int> ref_idx, src_idx;
      for (const auto& [tag, row] : batch) (tag == 0 ? ref_idx : src_idx).push_back(row);
      double bn = static_cast<double>(batch.size());
      VectorXd g_ref = VectorXd::Zero(nets.field_ref.params.values.size());
      VectorXd g_src = VectorXd::Zero(nets.field_src.params.values.size());
      VectorXd g_dec = VectorXd::Zero(nets.decoder.params.values.size());
      double batch_recon = 0.0;
      if (!ref_idx.empty()) {
        double w = static_cast<double>(ref_idx.size()) / bn;
        ReconOut r = recon_step(nets.field_ref, nets.decoder, gather_coords(ref.coords, ref_idx),
                                gather_expr(ref.expr, ref_idx), alpha, w, g_ref, g_dec, false);
        batch_recon += w * r.loss;
      }
      if (!src_idx.empty()) {
        double w = static_cast<double>(src_idx.size()) / bn;
        ReconOut r = recon_step(nets.field_src, nets.decoder, gather_coords(src.coords, src_idx),
                                gather_expr(src.expr, src_idx), alpha, w, g_src, g_dec, false);
        batch_recon += w * r.loss;
      }
      require(std::isfinite(batch_recon), ErrorKind::numeric,
              "phase 1: non-finite reconstruction loss at epoch " + std::to_string(epoch));
      if (!ref_idx.empty()) adam_step(opt_ref, nets.field_ref.params, g_ref);
      if (!src_idx.empty()) adam_step(opt_src, nets.field_src.params, g_src);
      adam_step(opt_dec, nets.decoder.params, g_dec);
      recon_sum += batch_recon;
    }
    double recon_mean = recon_sum / static_cast<double>(plan.batches.size());

    // Deformation pretraining on the PCA targets.
    std::vector<int> order(static_cast<std::size_t>(n_src));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double pretrain_sum = 0.0;
    int pretrain_batches = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
      std::vector<int> idx(order.begin() + static_cast<long>(pos),
                           order.begin() + static_cast<long>(end));
      MatrixXd x = gather_coords(src.coords, idx);
      MatrixXd targets = gather_coords(pca.targets, idx);
      DeformTrace tr;
      MatrixXd moved = deform_batch_trace(nets.deform, x, alpha_d, tr);
      MatrixXd diff = moved - targets;
      double loss = diff.squaredNorm() / static_cast<double>(idx.size());
      MatrixXd g = 2.0 * diff / static_cast<double>(idx.size());
      VectorXd g_trunk = VectorXd::Zero(nets.deform.trunk.values.size());
      VectorXd g_head = VectorXd::Zero(nets.deform.head.values.size());
      deform_backward(nets.deform, tr, g, g_trunk, g_head);
      adam_step(opt_trunk, nets.deform.trunk, g_trunk);
      adam_step(opt_head, nets.deform.head, g_head);
      pretrain_sum += loss;
      ++pretrain_batches;
    }
    double pretrain_mean = pretrain_batches > 0 ? pretrain_sum / pretrain_batches : 0.0;
    require(std::isfinite(pretrain_mean), ErrorKind::numeric,
            "phase 1: non-finite pretraining loss at epoch " + std::to_string(epoch));

    LossRecord rec;
    rec.epoch = static_cast<int>(history.size());
    rec.phase = 1;
    rec.recon = recon_mean;
    rec.deform_pretrain = pretrain_mean;
    rec.total = recon_mean + pretrain_mean;
    rec.lr = cfg.lr;
    rec.alpha = alpha;
    history.push_back(rec);

    // Checkpoint on the full-data reconstruction loss every 10 epochs.
    if (epoch % 10 == 9 || epoch + 1 == cfg.phase1_epochs) {
      MatrixXd pred_ref = decode_expression_batch(
          nets.decoder, field_embed_batch(nets.field_ref, ref.coords.transpose(), alpha));
      MatrixXd pred_src = decode_expression_batch(
          nets.decoder, field_embed_batch(nets.field_src, src.coords.transpose(), alpha));
      double eval = (static_cast<double>(n_ref) *
                         reconstruction_loss(pred_ref, ref.expr.transpose()).total +
                     static_cast<double>(n_src) *
                         reconstruction_loss(pred_src, src.expr.transpose()).total) /
                    static_cast<double>(n_ref + n_src);
      if (eval < best_eval) {
        best_eval = eval;
        best_ref = nets.field_ref.params.values;
        best_src = nets.field_src.params.values;
        best_dec = nets.decoder.params.values;
        best_epoch = epoch;
      }
    }
  }

  if (best_epoch >= 0) {
    nets.field_ref.params.values = best_ref;
    nets.field_src.params.values = best_src;
    nets.decoder.params.values = best_dec;
  }
}

// ---------------------------------------------------------------------------
// Phase 2
// ---------------------------------------------------------------------------

void run_phase2(const PipelineConfig& cfg, Networks& nets, const ProcessedSlice& src,
                const ProcessedSlice& ref, std::vector<LossRecord>& history) {
  cfg.validate();
  const int n_ref = static_cast<int>(ref.coords.rows());
  const int n_src = static_cast<int>(src.coords.rows());
  const double alpha = static_cast<double>(cfg.num_freqs);  // windows fully open
  const double alpha_d = static_cast<double>(nets.deform.encoding.num_freqs);
  const double lambda_j = cfg.no_jacobian ? 0.0 : cfg.lambda_j;

  AdamState opt_ref = AdamState::make(static_cast<int>(nets.field_ref.params.values.size()),
                                      cfg.lr * cfg.phase2_field_lr_scale);
  AdamState opt_dec = AdamState::make(static_cast<int>(nets.decoder.params.values.size()),
                                      cfg.lr * cfg.phase2_field_lr_scale);
  AdamState opt_trunk = AdamState::make(static_cast<int>(nets.deform.trunk.values.size()),
                                        cfg.lr);
  AdamState opt_head = AdamState::make(static_cast<int>(nets.deform.head.values.size()),
                                       cfg.lr);
  PlateauScheduler sched;
  sched.lr = cfg.lr;

  MatchState state;
  state.lambda_f = cfg.lambda_f;
  state.ema_decay = cfg.ema_decay;

  SpatialIndex ref_index(ref.coords);
  const double ref_area = bbox_area(ref.coords);

  // Frozen source prior: the phase-1 source field's embeddings at the
  // original source coordinates. The shared decoder put both fields in one
  // embedding space, so these are directly comparable with the canonical
  // field's reference embeddings and carry each source point's biology into
  // the match cost (the discarded source field is never trained again).
  MatrixXd src_prior_embeds =
      field_embed_batch(nets.field_src, src.coords.transpose(), alpha);

  for (int epoch = 0; epoch < cfg.phase2_epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 20000 + static_cast<std::uint64_t>(epoch)));
    EpochBatches plan = make_batches(n_ref, n_src, cfg.batch_size, rng);

    // Reference embeddings refresh once per epoch; they enter the match cost
    // as a frozen prior, so within-epoch staleness is immaterial.
    MatrixXd ref_embed_cache =
        field_embed_batch(nets.field_ref, ref.coords.transpose(), alpha);

    double sum_total = 0.0, sum_recon = 0.0, sum_fwd = 0.0, sum_jac = 0.0;
    for (const auto& batch : plan.batches) {
      std::vector<int> ref_idx, src_idx;
      for (const auto& [tag, row] : batch) (tag == 0 ? ref_idx : src_idx).push_back(row);
      double bn = static_cast<double>(batch.size());
      VectorXd g_field = VectorXd::Zero(nets.field_ref.params.values.size());
      VectorXd g_dec = VectorXd::Zero(nets.decoder.params.values.size());
      VectorXd g_trunk = VectorXd::Zero(nets.deform.trunk.values.size());
      VectorXd g_head = VectorXd::Zero(nets.deform.head.values.size());
      double recon_comb = 0.0, fwd_loss = 0.0, jac_loss = 0.0;

      if (!ref_idx.empty()) {
        double w = cfg.lambda_r * static_cast<double>(ref_idx.size()) / bn;
        ReconOut r = recon_step(nets.field_ref, nets.decoder, gather_coords(ref.coords, ref_idx),
                                gather_expr(ref.expr, ref_idx), alpha, w, g_field, g_dec, false);
        recon_comb += static_cast<double>(ref_idx.size()) / bn * r.loss;
      }
      if (!src_idx.empty()) {
        // deform -> canonical field at deformed coords -> decoder
        MatrixXd x = gather_coords(src.coords, src_idx);
        DeformTrace dtr;
        MatrixXd moved = deform_batch_trace(nets.deform, x, alpha_d, dtr);
        double w = cfg.lambda_r * static_cast<double>(src_idx.size()) / bn;
        ReconOut r = recon_step(nets.field_ref, nets.decoder, moved,
                                gather_expr(src.expr, src_idx), alpha, w, g_field, g_dec, true);
        recon_comb += static_cast<double>(src_idx.size()) / bn * r.loss;

        MatrixXd batch_prior(kEmbeddingDim, static_cast<Eigen::Index>(src_idx.size()));
        for (std::size_t i = 0; i < src_idx.size(); ++i) {
          batch_prior.col(static_cast<Eigen::Index>(i)) = src_prior_embeds.col(src_idx[i]);
        }
        MatrixX2d moved_rows = moved.transpose();
        MatchResult m = forward_match_loss(moved_rows, batch_prior, ref_index,
                                           ref_embed_cache, state, cfg.k_neighbors);
        state = m.updated_state;
        fwd_loss = m.loss;

        // r.grad_coords already carries the lambda_r batch weight
        MatrixXd g_moved = r.grad_coords + m.grad_deformed;
        deform_backward(nets.deform, dtr, g_moved, g_trunk, g_head);

        if (lambda_j > 0.0) {
          int js = std::min<int>(cfg.jacobian_subsample, static_cast<int>(src_idx.size()));
          std::vector<int> sub = src_idx;
          rng.shuffle(sub);
          sub.resize(static_cast<std::size_t>(js));
          VectorXd jt = VectorXd::Zero(g_trunk.size()), jh = VectorXd::Zero(g_head.size());
          jac_loss = jacobian_loss_grad(nets.deform, gather_coords(src.coords, sub), alpha_d,
                                        jt, jh);
          g_trunk += lambda_j * jt;
          g_head += lambda_j * jh;
        }
      }

      double total = fwd_loss + cfg.lambda_r * recon_comb + lambda_j * jac_loss;
      require(std::isfinite(total), ErrorKind::numeric,
              "phase 2: non-finite loss at epoch " + std::to_string(epoch));
      adam_step(opt_ref, nets.field_ref.params, g_field);
      adam_step(opt_dec, nets.decoder.params, g_dec);
      if (!src_idx.empty()) {
        adam_step(opt_trunk, nets.deform.trunk, g_trunk);
        adam_step(opt_head, nets.deform.head, g_head);
      }
      sum_total += total;
      sum_recon += recon_comb;
      sum_fwd += fwd_loss;
      sum_jac += jac_loss;
    }
    double n_batches = static_cast<double>(plan.batches.size());

    // Full-coverage reverse matching pass.
    DeformTrace full_tr;
    MatrixXd moved_all =
        deform_batch_trace(nets.deform, src.coords.transpose(), alpha_d, full_tr);
    MatrixX2d moved_rows = moved_all.transpose();
    MatchResult rev = reverse_match_loss(ref.coords, ref_embed_cache, moved_rows,
                                         src_prior_embeds, state, cfg.k_neighbors);
    state = rev.updated_state;
    {
      VectorXd g_trunk = VectorXd::Zero(nets.deform.trunk.values.size());
      VectorXd g_head = VectorXd::Zero(nets.deform.head.values.size());
      deform_backward(nets.deform, full_tr, rev.grad_deformed, g_trunk, g_head);
      adam_step(opt_trunk, nets.deform.trunk, g_trunk);
      adam_step(opt_head, nets.deform.head, g_head);
    }

    // Collapse detector: a source that imploded cannot be aligned.
    moved_all = deform_batch(nets.deform, src.coords.transpose(), alpha_d);
    double src_area = bbox_area(MatrixX2d(moved_all.transpose()));
    require(src_area >= 0.01 * ref_area, ErrorKind::degenerate,
            "phase 2: deformed source bounding box collapsed below 1% of the reference at "
            "epoch " + std::to_string(epoch));

    LossRecord rec;
    rec.epoch = static_cast<int>(history.size());
    rec.phase = 2;
    rec.recon = sum_recon / n_batches;
    rec.match_forward = sum_fwd / n_batches;
    rec.match_reverse = rev.loss;
    rec.jacobian = sum_jac / n_batches;
    rec.total = sum_total / n_batches + rev.loss;
    rec.alpha = alpha;
    require(std::isfinite(rec.total), ErrorKind::numeric,
            "phase 2: non-finite epoch loss at epoch " + std::to_string(epoch));
    double new_lr = plateau_update(sched, rec.total);
    rec.lr = new_lr;
    opt_trunk.lr = opt_head.lr = new_lr;
    opt_ref.lr = opt_dec.lr = new_lr * cfg.phase2_field_lr_scale;
    history.push_back(rec);
  }
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

AlignmentResult align_pair(const PipelineConfig& cfg, const Slice& src_raw,
                           const Slice& ref_raw) {
  cfg.validate();
  require(ref_raw.n_spots() > cfg.k_neighbors, ErrorKind::dimension,
          "align_pair: need more than k_neighbors reference points");
  require(src_raw.n_spots() >= 2, ErrorKind::dimension, "align_pair: source too small");

  AlignmentResult out;
  ProcessedPair pp = preprocess(src_raw, ref_raw, cfg.n_hvg);
  out.warnings = pp.warnings;
  out.ref_ids = pp.ref.ids;
  out.src_ids = pp.src.ids;

  NormalizedPair np = zscore_normalize(pp.src.coords, pp.ref.coords);
  out.ref_norm = np.ref_transform;
  out.src_norm = np.src_transform;
  pp.src.coords = np.src;
  pp.ref.coords = np.ref;

  IcpResult icp = select_rotation(pp.src.coords, pp.src.expr, pp.ref.coords, pp.ref.expr,
                                  default_rotation_candidates());
  out.rigid = icp.transform;
  out.icp_report = icp.report;
  pp.src.coords = icp.transform.apply(pp.src.coords);
  out.rigid_src_coords = out.ref_norm.invert(pp.src.coords);

  Networks nets = init_networks(cfg, static_cast<int>(pp.ref.expr.cols()));
  if (!cfg.skip_phase1) {
    run_phase1(cfg, nets, pp.src, pp.ref, out.loss_history);
  }
  if (!cfg.skip_phase2) {
    run_phase2(cfg, nets, pp.src, pp.ref, out.loss_history);
  }

  const double alpha = static_cast<double>(cfg.num_freqs);
  const double alpha_d = static_cast<double>(nets.deform.encoding.num_freqs);
  MatrixXd moved = deform_batch(nets.deform, pp.src.coords.transpose(), alpha_d);
  MatrixX2d moved_rows = moved.transpose();
  out.deformed_coords = out.ref_norm.invert(moved_rows);
  out.embeddings_ref =
      field_embed_batch(nets.field_ref, pp.ref.coords.transpose(), alpha).transpose();
  out.embeddings_src = field_embed_batch(nets.field_ref, moved, alpha).transpose();

  // Metrics in the original reference frame.
  out.metrics.chamfer = chamfer_distance(out.deformed_coords, ref_raw.coords);
  if (src_raw.has_labels() && ref_raw.has_labels()) {
    std::vector<std::string> joint = ref_raw.labels;
    joint.insert(joint.end(), src_raw.labels.begin(), src_raw.labels.end());
    std::vector<int> codes = encode_labels(joint);
    std::vector<int> ref_codes(codes.begin(), codes.begin() + ref_raw.n_spots());
    std::vector<int> src_codes(codes.begin() + ref_raw.n_spots(), codes.end());
    out.metrics.nn_acc = nn_accuracy(out.deformed_coords, src_codes, ref_raw.coords, ref_codes);
    TransportPlan plan;
    out.metrics.ot_acc =
        ot_accuracy(out.deformed_coords, src_codes, ref_raw.coords, ref_codes, &plan);
    out.metrics.sinkhorn_epsilon = plan.epsilon;
    out.metrics.sinkhorn_iterations = plan.iterations;
    if (!plan.converged) {
      out.warnings.push_back("sinkhorn did not reach the marginal tolerance; using best plan");
    }
    int k = 1 + *std::max_element(ref_codes.begin(), ref_codes.end());
    if (k >= 2 && out.embeddings_ref.rows() > k) {
      out.metrics.gmm_components = k;
      out.metrics.gmm_seed = derive_seed(cfg.seed, 999);
      // Full-covariance EM on the raw 64-d embeddings is ill-conditioned;
      // cluster on the leading principal components instead.
      int n_pc = std::min<int>(20, static_cast<int>(out.embeddings_ref.cols()));
      PcaModel pca = joint_pca(out.embeddings_ref, out.embeddings_ref, n_pc);
      MatrixXd feat = (out.embeddings_ref.rowwise() - pca.mean) * pca.components;
      std::vector<int> clusters = gmm_cluster(feat, k, 10, out.metrics.gmm_seed);
      out.metrics.ari = ari(clusters, ref_codes);
      out.metrics.nmi = nmi(clusters, ref_codes);
    }
  }
  out.networks = std::move(nets);
  return out;
}

}  // namespace instalign
