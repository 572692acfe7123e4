#pragma once

#include <Eigen/Sparse>
#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "instalign/common.hpp"

namespace instalign {

// ---------------------------------------------------------------------------
// Slice data model
// ---------------------------------------------------------------------------

struct Slice {
  std::vector<std::string> ids;
  MatrixX2d coords;                                    // N x 2
  Eigen::SparseMatrix<double, Eigen::RowMajor> expr;   // N x G, nonnegative
  std::vector<std::string> genes;
  std::vector<std::string> labels;                     // empty when absent

  Eigen::Index n_spots() const { return coords.rows(); }
  Eigen::Index n_genes() const { return static_cast<Eigen::Index>(genes.size()); }
  bool has_labels() const { return !labels.empty(); }
};

/// Coords CSV: header `id,x,y[,label]`. Expression: dense (`id` + gene
/// columns) or sparse triplet (`id,gene,value`, detected by that exact
/// header; gene order = first appearance). Expression rows are aligned to
/// the coords row order; ids missing from the expression file get zero rows.
Slice load_slice(const std::string& coords_path, const std::string& expr_path);

enum class ExprFormat { dense, triplet };
void save_slice(const Slice& slice, const std::string& coords_path,
                const std::string& expr_path, ExprFormat format = ExprFormat::dense);

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

struct ProcessedSlice {
  std::vector<std::string> ids;
  MatrixX2d coords;
  MatrixXd expr;  // N x G', normalized log HVG panel, z-scaled per gene
  std::vector<std::string> genes;
  std::vector<std::string> labels;
};

struct ProcessedPair {
  ProcessedSlice src;
  ProcessedSlice ref;
  std::vector<std::string> warnings;
};

/// Shared-panel intersection, per-cell library-size normalization to the
/// median total, log1p, top-n_hvg dispersion (variance/mean of log values on
/// the concatenated slices), per-gene z-scaling with shared statistics.
ProcessedPair preprocess(const Slice& src, const Slice& ref, int n_hvg);

// ---------------------------------------------------------------------------
// Synthetic benchmark generation
// ---------------------------------------------------------------------------

enum class WarpKind { none, affine, sinusoidal, composite };

struct SyntheticSpec {
  int n_spots = 800;
  int n_genes = 200;
  int n_domains = 4;
  WarpKind warp = WarpKind::sinusoidal;
  double warp_amplitude = 0.1;
  double warp_frequency = 2.0;
  std::array<double, 6> affine_params{1, 0, 0, 1, 0, 0};  // a11 a12 a21 a22 t1 t2
  double rigid_angle = 0.5235987755982988;                // 30 degrees
  Vector2d rigid_translation{0.25, -0.15};
  double dropout = 0.1;
  double noise_sigma = 0.1;
  std::uint64_t seed = 1;

  static SyntheticSpec from_json_file(const std::string& path);
  static SyntheticSpec from_json_text(const std::string& text);
  std::string to_json() const;
};

struct SyntheticPair {
  Slice ref;
  Slice src;
  std::vector<int> correspondence;  // source i <-> reference correspondence[i]
  MatrixX2d warped_ref;             // reference coords after warp, before rigid
};

/// Reference = Voronoi domains on the unit square with domain marker genes
/// and Poisson counts; source = reference points through warp then rigid
/// motion, expression re-noised with a per-gene LogNormal(0,0.2) batch
/// factor. Bit-deterministic per seed.
SyntheticPair generate_synthetic(const SyntheticSpec& spec);

/// Warp displacement field used by the generator (exposed for tests).
Vector2d apply_warp(const SyntheticSpec& spec, const Vector2d& x);

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

/// All-or-nothing output directory: files are staged in a sibling temp
/// directory and renamed into place only on commit.
class StagedDir {
public:
  explicit StagedDir(const std::string& final_dir);
  ~StagedDir();
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;

  std::string path(const std::string& filename);
  void commit();

private:
  std::filesystem::path final_dir_;
  std::filesystem::path staging_;
  std::vector<std::string> files_;
  bool committed_ = false;
};

std::string format_double(double v);  // round-trippable %.17g

void write_coords_csv(const std::string& path, const std::vector<std::string>& ids,
                      const MatrixX2d& coords, const std::vector<std::string>& labels = {});
void write_matrix_csv(const std::string& path, const std::vector<std::string>& ids,
                      const MatrixXd& rows, const std::string& value_prefix);
MatrixXd read_matrix_csv(const std::string& path, std::vector<std::string>* ids = nullptr);

/// Two-panel scatter overlay (before: rigid only, after: deformed).
void write_alignment_svg(const std::string& path, const MatrixX2d& ref,
                         const MatrixX2d& rigid_src, const MatrixX2d& deformed_src);

}  // namespace instalign
