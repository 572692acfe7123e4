#pragma once

#include <string>
#include <vector>

#include "instalign/fields.hpp"
#include "instalign/io.hpp"
#include "instalign/matching.hpp"
#include "instalign/metrics.hpp"
#include "instalign/rigid.hpp"

namespace instalign {

struct PipelineConfig {
  int phase1_epochs = 300;
  int phase2_epochs = 400;
  double lambda_r = 0.1;   // reconstruction weight in the joint phase
  double lambda_j = 0.01;  // Jacobian regularization weight
  double lambda_f = 1.0;   // feature term weight in the match cost
  int k_neighbors = 12;
  int num_freqs = 8;        // L, expression field encoding
  double max_log_freq = 6.0;
  // The deformation net gets a lower-frequency bank: tissue warps live at
  // much coarser scales than expression detail, and a deformation that can
  // resolve single spots happily memorizes correspondence noise.
  int deform_num_freqs = 4;
  double deform_max_log_freq = 3.0;
  int batch_size = 512;
  double lr = 1e-3;
  // Phase-2 learning-rate scale for the canonical field and decoder. Keeping
  // the field slow preserves the phase-1 prior: a plastic field absorbs the
  // source's misplaced expression instead of letting the reconstruction
  // gradient move the points.
  double phase2_field_lr_scale = 0.05;
  std::uint64_t seed = 0;
  int n_hvg = 2000;
  int pca_components = 30;
  int pca_spatial_gate = 32;
  double ema_decay = 0.95;
  int jacobian_subsample = 64;
  bool skip_phase1 = false;
  bool skip_phase2 = false;
  bool no_jacobian = false;

  static PipelineConfig from_json_text(const std::string& text);
  static PipelineConfig from_json_file(const std::string& path);
  std::string to_json() const;

  EncodingSpec encoding() const { return EncodingSpec{num_freqs, max_log_freq}; }
  EncodingSpec deform_encoding() const {
    return EncodingSpec{deform_num_freqs, deform_max_log_freq};
  }
  void validate() const;
};

struct LossRecord {
  int epoch = 0;
  int phase = 0;
  double total = 0.0;
  double recon = 0.0;
  double match_forward = 0.0;
  double match_reverse = 0.0;
  double jacobian = 0.0;
  double deform_pretrain = 0.0;
  double lr = 0.0;
  double alpha = 0.0;
};

struct Networks {
  ExprField field_ref;
  ExprField field_src;
  ExprDecoder decoder;
  DeformNet deform;
};

Networks init_networks(const PipelineConfig& cfg, int n_genes);

struct AlignmentResult {
  RigidTransform rigid;
  IcpReport icp_report;
  NormalizeTransform ref_norm;
  NormalizeTransform src_norm;
  MatrixX2d rigid_src_coords;  // source after rigid only, original ref frame
  MatrixX2d deformed_coords;   // source after deformation, original ref frame
  MatrixXd embeddings_ref;     // N1 x 64
  MatrixXd embeddings_src;     // N2 x 64 (at deformed coordinates)
  std::vector<LossRecord> loss_history;
  MetricReport metrics;
  Networks networks;
  std::vector<std::string> ref_ids, src_ids;
  std::vector<std::string> warnings;
};

/// Phase 1: two slice-specific fields share one decoder and train on
/// reconstruction; the deformation net pretrains on PCA match targets.
/// Coordinates must already be normalized and rigidly pre-aligned. The best
/// reconstruction checkpoint (evaluated every 10 epochs) is restored.
void run_phase1(const PipelineConfig& cfg, Networks& nets, const ProcessedSlice& src,
                const ProcessedSlice& ref, std::vector<LossRecord>& history);

/// Phase 2: the source field is discarded; the canonical field, decoder,
/// deformation net, and matcher train jointly on
/// match + lambda_r * recon + lambda_j * jacobian, with one full-coverage
/// reverse matching pass per epoch and plateau LR decay.
void run_phase2(const PipelineConfig& cfg, Networks& nets, const ProcessedSlice& src,
                const ProcessedSlice& ref, std::vector<LossRecord>& history);

/// Full pipeline on raw slices: preprocess, normalize, rigid pre-alignment
/// with expression-guided rotation selection, both training phases, metrics.
/// Deterministic for a fixed config and seed.
AlignmentResult align_pair(const PipelineConfig& cfg, const Slice& src_raw, const Slice& ref_raw);

}  // namespace instalign
