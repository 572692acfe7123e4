#include "instalign/io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace instalign {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// CSV primitives
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_number(const std::string& s, const std::string& context) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  require(end != s.c_str() && *end == '\0', ErrorKind::io,
          "malformed CSV: expected a number, got '" + s + "' (" + context + ")");
  return v;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), ErrorKind::io, "cannot open file: " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    rows.push_back(split_csv_line(line));
  }
  require(!rows.empty(), ErrorKind::io, "empty CSV file: " + path);
  return rows;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Slice I/O
// ---------------------------------------------------------------------------

Slice load_slice(const std::string& coords_path, const std::string& expr_path) {
  Slice slice;

  auto coords_rows = read_csv(coords_path);
  const auto& header = coords_rows.front();
  require(header.size() >= 3 && header[0] == "id" && header[1] == "x" && header[2] == "y",
          ErrorKind::io, "coords file must start with header id,x,y[,label]: " + coords_path);
  bool has_label = header.size() >= 4 && header[3] == "label";
  std::map<std::string, Eigen::Index> row_of;
  slice.coords.resize(static_cast<Eigen::Index>(coords_rows.size()) - 1, 2);
  for (std::size_t r = 1; r < coords_rows.size(); ++r) {
    const auto& row = coords_rows[r];
    require(row.size() == header.size(), ErrorKind::io,
            "coords row " + std::to_string(r) + " has wrong field count");
    auto idx = static_cast<Eigen::Index>(r - 1);
    require(row_of.emplace(row[0], idx).second, ErrorKind::io,
            "duplicate spot id '" + row[0] + "' in " + coords_path);
    slice.ids.push_back(row[0]);
    slice.coords(idx, 0) = parse_number(row[1], coords_path);
    slice.coords(idx, 1) = parse_number(row[2], coords_path);
    if (has_label) slice.labels.push_back(row[3]);
  }

  auto expr_rows = read_csv(expr_path);
  const auto& ehead = expr_rows.front();
  require(!ehead.empty() && ehead[0] == "id", ErrorKind::io,
          "expression file must start with an id column: " + expr_path);
  bool triplet = ehead.size() == 3 && ehead[1] == "gene" && ehead[2] == "value";

  std::map<std::string, int> gene_of;
  std::vector<Eigen::Triplet<double>> triplets;
  std::vector<std::string> negative_rows;
  auto note_negative = [&](const std::string& id) {
    if (negative_rows.size() < 8) negative_rows.push_back(id);
  };

  if (triplet) {
    for (std::size_t r = 1; r < expr_rows.size(); ++r) {
      const auto& row = expr_rows[r];
      require(row.size() == 3, ErrorKind::io,
              "triplet row " + std::to_string(r) + " has wrong field count");
      auto it = row_of.find(row[0]);
      require(it != row_of.end(), ErrorKind::io,
              "expression id '" + row[0] + "' does not appear in the coords file");
      auto [git, inserted] = gene_of.emplace(row[1], static_cast<int>(gene_of.size()));
      if (inserted) slice.genes.push_back(row[1]);
      double v = parse_number(row[2], expr_path);
      if (v < 0) note_negative(row[0]);
      if (v != 0.0) triplets.emplace_back(it->second, git->second, v);
    }
  } else {
    for (std::size_t c = 1; c < ehead.size(); ++c) {
      require(gene_of.emplace(ehead[c], static_cast<int>(c - 1)).second, ErrorKind::io,
              "duplicate gene name '" + ehead[c] + "' in " + expr_path);
      slice.genes.push_back(ehead[c]);
    }
    for (std::size_t r = 1; r < expr_rows.size(); ++r) {
      const auto& row = expr_rows[r];
      require(row.size() == ehead.size(), ErrorKind::io,
              "expression row " + std::to_string(r) + " has wrong field count");
      auto it = row_of.find(row[0]);
      require(it != row_of.end(), ErrorKind::io,
              "expression id '" + row[0] + "' does not appear in the coords file");
      for (std::size_t c = 1; c < row.size(); ++c) {
        double v = parse_number(row[c], expr_path);
        if (v < 0) note_negative(row[0]);
        if (v != 0.0) triplets.emplace_back(it->second, static_cast<int>(c - 1), v);
      }
    }
  }
  if (!negative_rows.empty()) {
    std::string msg = "negative expression values in rows:";
    for (const auto& id : negative_rows) msg += " " + id;
    throw Error(ErrorKind::io, msg);
  }

  slice.expr.resize(slice.coords.rows(), static_cast<Eigen::Index>(slice.genes.size()));
  slice.expr.setFromTriplets(triplets.begin(), triplets.end());
  return slice;
}

void save_slice(const Slice& slice, const std::string& coords_path,
                const std::string& expr_path, ExprFormat format) {
  write_coords_csv(coords_path, slice.ids, slice.coords, slice.labels);

  std::ofstream os(expr_path);
  require(os.good(), ErrorKind::io, "cannot open for writing: " + expr_path);
  if (format == ExprFormat::triplet) {
    // Gene-major order: first appearance then reconstructs the panel order.
    // Genes with no nonzero entry cannot be represented in this format.
    struct Entry {
      Eigen::Index row, col;
      double value;
    };
    std::vector<Entry> entries;
    for (Eigen::Index i = 0; i < slice.expr.outerSize(); ++i) {
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(slice.expr, i); it;
           ++it) {
        entries.push_back({it.row(), it.col(), it.value()});
      }
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      return a.col != b.col ? a.col < b.col : a.row < b.row;
    });
    os << "id,gene,value\n";
    for (const auto& e : entries) {
      os << slice.ids[static_cast<std::size_t>(e.row)] << ','
         << slice.genes[static_cast<std::size_t>(e.col)] << ',' << format_double(e.value)
         << '\n';
    }
  } else {
    os << "id";
    for (const auto& g : slice.genes) os << ',' << g;
    os << '\n';
    MatrixXd dense = MatrixXd(slice.expr);
    for (Eigen::Index i = 0; i < dense.rows(); ++i) {
      os << slice.ids[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < dense.cols(); ++j) os << ',' << format_double(dense(i, j));
      os << '\n';
    }
  }
  require(os.good(), ErrorKind::io, "write failed: " + expr_path);
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

ProcessedPair preprocess(const Slice& src, const Slice& ref, int n_hvg) {
  require(n_hvg >= 1, ErrorKind::config, "preprocess: n_hvg must be >= 1");
  ProcessedPair out;

  // Shared panel, ordered by the reference's gene order.
  std::map<std::string, int> src_gene;
  for (std::size_t g = 0; g < src.genes.size(); ++g) {
    src_gene.emplace(src.genes[g], static_cast<int>(g));
  }
  std::vector<std::string> shared;
  std::vector<int> ref_col, src_col;
  for (std::size_t g = 0; g < ref.genes.size(); ++g) {
    auto it = src_gene.find(ref.genes[g]);
    if (it != src_gene.end()) {
      shared.push_back(ref.genes[g]);
      ref_col.push_back(static_cast<int>(g));
      src_col.push_back(it->second);
    }
  }
  require(!shared.empty(), ErrorKind::degenerate, "preprocess: slices share no genes");
  std::size_t smaller = std::min(src.genes.size(), ref.genes.size());
  if (shared.size() * 2 < smaller) {
    out.warnings.push_back("gene panel intersection keeps fewer than 50% of genes (" +
                           std::to_string(shared.size()) + " of " + std::to_string(smaller) +
                           ")");
  }

  auto densify = [&](const Slice& s, const std::vector<int>& cols) {
    MatrixXd d = MatrixXd::Zero(s.n_spots(), static_cast<Eigen::Index>(cols.size()));
    MatrixXd full = MatrixXd(s.expr);
    for (std::size_t j = 0; j < cols.size(); ++j) {
      d.col(static_cast<Eigen::Index>(j)) = full.col(cols[j]);
    }
    return d;
  };
  MatrixXd src_x = densify(src, src_col);
  MatrixXd ref_x = densify(ref, ref_col);

  // Library-size normalization to the median total across both slices.
  VectorXd totals(src_x.rows() + ref_x.rows());
  totals << src_x.rowwise().sum(), ref_x.rowwise().sum();
  std::vector<double> sorted(totals.data(), totals.data() + totals.size());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2),
                   sorted.end());
  double median_total = sorted[sorted.size() / 2];
  auto normalize_rows = [&](MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      double t = m.row(i).sum();
      if (t > 0.0 && median_total > 0.0) m.row(i) *= median_total / t;
    }
    m = m.array().log1p();
  };
  normalize_rows(src_x);
  normalize_rows(ref_x);

  // HVG selection by dispersion = variance/mean of log values, shared stats.
  const auto n_total = static_cast<double>(src_x.rows() + ref_x.rows());
  Eigen::RowVectorXd mean =
      (src_x.colwise().sum() + ref_x.colwise().sum()) / n_total;
  Eigen::RowVectorXd sq =
      (src_x.array().square().colwise().sum() + ref_x.array().square().colwise().sum()) /
      n_total;
  Eigen::RowVectorXd var = sq - mean.array().square().matrix();
  std::vector<int> idx(shared.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> dispersion(shared.size());
  for (std::size_t g = 0; g < shared.size(); ++g) {
    auto j = static_cast<Eigen::Index>(g);
    dispersion[g] = mean[j] > 0.0 ? std::max(var[j], 0.0) / mean[j] : 0.0;
  }
  int keep = std::min<int>(n_hvg, static_cast<int>(shared.size()));
  if (keep < n_hvg) {
    out.warnings.push_back("fewer genes than n_hvg; keeping all " + std::to_string(keep));
  }
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (dispersion[static_cast<std::size_t>(a)] != dispersion[static_cast<std::size_t>(b)]) {
      return dispersion[static_cast<std::size_t>(a)] > dispersion[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(keep));
  std::sort(idx.begin(), idx.end());  // keep panel order stable

  auto select_cols = [&](const MatrixXd& m) {
    MatrixXd s(m.rows(), keep);
    for (int j = 0; j < keep; ++j) s.col(j) = m.col(idx[static_cast<std::size_t>(j)]);
    return s;
  };
  MatrixXd src_hvg = select_cols(src_x);
  MatrixXd ref_hvg = select_cols(ref_x);

  // Per-gene z-scaling with statistics shared across the pair.
  Eigen::RowVectorXd mu =
      (src_hvg.colwise().sum() + ref_hvg.colwise().sum()) / n_total;
  Eigen::RowVectorXd sq2 =
      (src_hvg.array().square().colwise().sum() + ref_hvg.array().square().colwise().sum()) /
      n_total;
  Eigen::RowVectorXd sd = (sq2 - mu.array().square().matrix()).cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j) {
    if (sd[j] <= 0.0) sd[j] = 1.0;
  }
  src_hvg = (src_hvg.rowwise() - mu).array().rowwise() / sd.array();
  ref_hvg = (ref_hvg.rowwise() - mu).array().rowwise() / sd.array();

  std::vector<std::string> kept_genes;
  for (int j : idx) kept_genes.push_back(shared[static_cast<std::size_t>(j)]);
  out.src = ProcessedSlice{src.ids, src.coords, std::move(src_hvg), kept_genes, src.labels};
  out.ref = ProcessedSlice{ref.ids, ref.coords, std::move(ref_hvg), kept_genes, ref.labels};
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

SyntheticSpec SyntheticSpec::from_json_text(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  require(!j.is_discarded(), ErrorKind::config, "synthetic spec: malformed JSON");
  SyntheticSpec s;
  s.n_spots = j.value("n_spots", s.n_spots);
  s.n_genes = j.value("n_genes", s.n_genes);
  s.n_domains = j.value("n_domains", s.n_domains);
  s.seed = j.value("seed", s.seed);
  if (j.contains("warp")) {
    const auto& w = j["warp"];
    std::string kind = w.value("kind", "sinusoidal");
    if (kind == "none") {
      s.warp = WarpKind::none;
    } else if (kind == "affine") {
      s.warp = WarpKind::affine;
      if (w.contains("params")) {
        auto p = w["params"];
        require(p.size() == 6, ErrorKind::config, "affine warp needs 6 params");
        for (int i = 0; i < 6; ++i) s.affine_params[static_cast<std::size_t>(i)] = p[i];
      }
    } else if (kind == "sinusoidal") {
      s.warp = WarpKind::sinusoidal;
    } else if (kind == "composite") {
      s.warp = WarpKind::composite;
    } else {
      throw Error(ErrorKind::config, "unknown warp kind: " + kind);
    }
    s.warp_amplitude = w.value("amplitude", s.warp_amplitude);
    s.warp_frequency = w.value("frequency", s.warp_frequency);
  }
  if (j.contains("rigid")) {
    const auto& r = j["rigid"];
    if (r.contains("angle_deg")) {
      s.rigid_angle = r["angle_deg"].get<double>() * 3.14159265358979323846 / 180.0;
    }
    if (r.contains("translation")) {
      s.rigid_translation[0] = r["translation"][0];
      s.rigid_translation[1] = r["translation"][1];
    }
  }
  if (j.contains("noise")) {
    s.dropout = j["noise"].value("dropout", s.dropout);
    s.noise_sigma = j["noise"].value("sigma", s.noise_sigma);
  }
  require(s.n_spots >= 1 && s.n_genes >= 1 && s.n_domains >= 1, ErrorKind::config,
          "synthetic spec: counts must be positive");
  require(s.dropout >= 0.0 && s.dropout < 1.0, ErrorKind::config,
          "synthetic spec: dropout must be in [0, 1)");
  return s;
}

SyntheticSpec SyntheticSpec::from_json_file(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), ErrorKind::io, "cannot open spec: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json_text(ss.str());
}

std::string SyntheticSpec::to_json() const {
  nlohmann::json j;
  j["n_spots"] = n_spots;
  j["n_genes"] = n_genes;
  j["n_domains"] = n_domains;
  j["seed"] = seed;
  const char* kinds[] = {"none", "affine", "sinusoidal", "composite"};
  j["warp"] = {{"kind", kinds[static_cast<int>(warp)]},
               {"amplitude", warp_amplitude},
               {"frequency", warp_frequency}};
  if (warp == WarpKind::affine) {
    j["warp"]["params"] = affine_params;
  }
  j["rigid"] = {{"angle_deg", rigid_angle * 180.0 / 3.14159265358979323846},
                {"translation", {rigid_translation[0], rigid_translation[1]}}};
  j["noise"] = {{"dropout", dropout}, {"sigma", noise_sigma}};
  return j.dump(2);
}

Vector2d apply_warp(const SyntheticSpec& spec, const Vector2d& x) {
  constexpr double two_pi = 6.283185307179586476925286766559;
  switch (spec.warp) {
    case WarpKind::none:
      return x;
    case WarpKind::affine: {
      const auto& p = spec.affine_params;
      return {p[0] * x[0] + p[1] * x[1] + p[4], p[2] * x[0] + p[3] * x[1] + p[5]};
    }
    case WarpKind::sinusoidal:
      // Horizontal shear: max displacement equals the amplitude exactly and
      // det J = 1 everywhere, so the ground-truth map never folds.
      return {x[0] + spec.warp_amplitude * std::sin(two_pi * spec.warp_frequency * x[1]), x[1]};
    case WarpKind::composite: {
      double x0 = x[0] + spec.warp_amplitude * std::sin(two_pi * spec.warp_frequency * x[1]);
      double y0 = x[1] + spec.warp_amplitude * std::sin(two_pi * spec.warp_frequency * x0);
      return {x0, y0};
    }
  }
  return x;
}

SyntheticPair generate_synthetic(const SyntheticSpec& spec) {
  SyntheticPair out;
  Rng coord_rng(derive_seed(spec.seed, 1));
  Rng gene_rng(derive_seed(spec.seed, 2));
  Rng ref_noise(derive_seed(spec.seed, 3));
  Rng src_noise(derive_seed(spec.seed, 4));

  // Domain layout: Voronoi cells of n_domains seed points on the unit square.
  MatrixX2d domain_seeds(spec.n_domains, 2);
  for (int d = 0; d < spec.n_domains; ++d) {
    domain_seeds.row(d) << coord_rng.uniform(0, 1), coord_rng.uniform(0, 1);
  }
  out.ref.coords.resize(spec.n_spots, 2);
  std::vector<int> domain(static_cast<std::size_t>(spec.n_spots));
  auto domain_of = [&](const Eigen::RowVector2d& p) {
    int best = 0;
    double best_d = (domain_seeds.row(0) - p).squaredNorm();
    for (int d = 1; d < spec.n_domains; ++d) {
      double dist = (domain_seeds.row(d) - p).squaredNorm();
      if (dist < best_d) {
        best = d;
        best_d = dist;
      }
    }
    return best;
  };
  // Alternating domain densities: spot density varies by region in real
  // tissue, and the density steps give the aligner geometric structure.
  for (int i = 0; i < spec.n_spots; ++i) {
    for (;;) {
      Eigen::RowVector2d p(coord_rng.uniform(0, 1), coord_rng.uniform(0, 1));
      int d = domain_of(p);
      double keep = (d % 2 == 0) ? 1.0 : 0.45;
      if (coord_rng.uniform() <= keep) {
        out.ref.coords.row(i) = p;
        domain[static_cast<std::size_t>(i)] = d;
        break;
      }
    }
  }

  // Expression model: every gene marks domain (g mod n_domains) with a
  // multiplicative boost over a LogNormal base rate, plus a smooth per-gene
  // spatial gradient so that expression is informative within domains too.
  VectorXd base_rate(spec.n_genes);
  for (int g = 0; g < spec.n_genes; ++g) base_rate[g] = gene_rng.lognormal(-0.2, 0.6);
  constexpr double kMarkerBoost = 6.0;
  VectorXd size_factor(spec.n_spots);
  for (int i = 0; i < spec.n_spots; ++i) size_factor[i] = gene_rng.lognormal(0.0, 0.3);
  VectorXd batch_factor(spec.n_genes);
  for (int g = 0; g < spec.n_genes; ++g) batch_factor[g] = gene_rng.lognormal(0.0, 0.2);
  MatrixX2d gradient(spec.n_genes, 2);
  for (int g = 0; g < spec.n_genes; ++g) {
    gradient.row(g) << gene_rng.normal(), gene_rng.normal();
  }

  auto sample_counts = [&](Rng& rng, bool is_source) {
    std::vector<Eigen::Triplet<double>> trip;
    for (int i = 0; i < spec.n_spots; ++i) {
      Vector2d rel = out.ref.coords.row(i).transpose() - Vector2d(0.5, 0.5);
      for (int g = 0; g < spec.n_genes; ++g) {
        double rate = base_rate[g] * size_factor[i] * std::exp(gradient.row(g).dot(rel));
        if (g % spec.n_domains == domain[static_cast<std::size_t>(i)]) rate *= kMarkerBoost;
        if (is_source) rate *= batch_factor[g];
        if (spec.noise_sigma > 0.0) rate *= std::exp(spec.noise_sigma * rng.normal());
        int count = rng.poisson(rate);
        if (count > 0 && rng.uniform() >= spec.dropout) {
          trip.emplace_back(i, g, static_cast<double>(count));
        }
      }
    }
    Eigen::SparseMatrix<double, Eigen::RowMajor> m(spec.n_spots, spec.n_genes);
    m.setFromTriplets(trip.begin(), trip.end());
    return m;
  };

  out.ref.expr = sample_counts(ref_noise, false);
  for (int g = 0; g < spec.n_genes; ++g) out.ref.genes.push_back("g" + std::to_string(g));
  for (int i = 0; i < spec.n_spots; ++i) {
    out.ref.ids.push_back("ref_" + std::to_string(i));
    out.ref.labels.push_back("domain_" + std::to_string(domain[static_cast<std::size_t>(i)]));
  }

  out.src = out.ref;
  out.src.expr = sample_counts(src_noise, true);
  out.warped_ref.resize(spec.n_spots, 2);
  double c = std::cos(spec.rigid_angle), s = std::sin(spec.rigid_angle);
  Eigen::Matrix2d rot;
  rot << c, -s, s, c;
  out.src.coords.resize(spec.n_spots, 2);
  for (int i = 0; i < spec.n_spots; ++i) {
    Vector2d warped = apply_warp(spec, out.ref.coords.row(i).transpose());
    out.warped_ref.row(i) = warped;
    out.src.coords.row(i) = (rot * warped + spec.rigid_translation).transpose();
    out.src.ids[static_cast<std::size_t>(i)] = "src_" + std::to_string(i);
  }
  out.correspondence.resize(static_cast<std::size_t>(spec.n_spots));
  std::iota(out.correspondence.begin(), out.correspondence.end(), 0);
  return out;
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

StagedDir::StagedDir(const std::string& final_dir) : final_dir_(final_dir) {
  staging_ = final_dir_;
  staging_ += ".staging";
  std::error_code ec;
  fs::remove_all(staging_, ec);
  fs::create_directories(staging_);
  require(fs::is_directory(staging_), ErrorKind::io,
          "cannot create staging directory: " + staging_.string());
}

StagedDir::~StagedDir() {
  if (!committed_) {
    std::error_code ec;
    fs::remove_all(staging_, ec);
  }
}

std::string StagedDir::path(const std::string& filename) {
  files_.push_back(filename);
  return (staging_ / filename).string();
}

void StagedDir::commit() {
  fs::create_directories(final_dir_);
  for (const auto& f : files_) {
    fs::rename(staging_ / f, final_dir_ / f);
  }
  std::error_code ec;
  fs::remove_all(staging_, ec);
  committed_ = true;
}

void write_coords_csv(const std::string& path, const std::vector<std::string>& ids,
                      const MatrixX2d& coords, const std::vector<std::string>& labels) {
  require(static_cast<Eigen::Index>(ids.size()) == coords.rows(), ErrorKind::dimension,
          "write_coords_csv: id/coords mismatch");
  std::ofstream os(path);
  require(os.good(), ErrorKind::io, "cannot open for writing: " + path);
  bool with_labels = !labels.empty();
  os << (with_labels ? "id,x,y,label\n" : "id,x,y\n");
  for (Eigen::Index i = 0; i < coords.rows(); ++i) {
    os << ids[static_cast<std::size_t>(i)] << ',' << format_double(coords(i, 0)) << ','
       << format_double(coords(i, 1));
    if (with_labels) os << ',' << labels[static_cast<std::size_t>(i)];
    os << '\n';
  }
  require(os.good(), ErrorKind::io, "write failed: " + path);
}

void write_matrix_csv(const std::string& path, const std::vector<std::string>& ids,
                      const MatrixXd& rows, const std::string& value_prefix) {
  require(static_cast<Eigen::Index>(ids.size()) == rows.rows(), ErrorKind::dimension,
          "write_matrix_csv: id/rows mismatch");
  std::ofstream os(path);
  require(os.good(), ErrorKind::io, "cannot open for writing: " + path);
  os << "id";
  for (Eigen::Index j = 0; j < rows.cols(); ++j) os << ',' << value_prefix << j;
  os << '\n';
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    os << ids[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < rows.cols(); ++j) os << ',' << format_double(rows(i, j));
    os << '\n';
  }
  require(os.good(), ErrorKind::io, "write failed: " + path);
}

MatrixXd read_matrix_csv(const std::string& path, std::vector<std::string>* ids) {
  auto rows = read_csv(path);
  require(rows.size() >= 2, ErrorKind::io, "matrix CSV has no data rows: " + path);
  auto cols = rows.front().size();
  require(cols >= 2 && rows.front()[0] == "id", ErrorKind::io,
          "matrix CSV must start with an id column: " + path);
  MatrixXd m(static_cast<Eigen::Index>(rows.size() - 1), static_cast<Eigen::Index>(cols - 1));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    require(rows[r].size() == cols, ErrorKind::io,
            "matrix CSV row " + std::to_string(r) + " has wrong field count");
    if (ids) ids->push_back(rows[r][0]);
    for (std::size_t c = 1; c < cols; ++c) {
      m(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(c - 1)) =
          parse_number(rows[r][c], path);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// SVG scatter overlay
// ---------------------------------------------------------------------------

namespace {

void svg_points(std::ostream& os, const MatrixX2d& pts, double ox, double oy, double sc,
                double min_x, double min_y, const char* color) {
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    double x = ox + (pts(i, 0) - min_x) * sc;
    double y = oy - (pts(i, 1) - min_y) * sc;
    os << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"1.6\" fill=\"" << color
       << "\" fill-opacity=\"0.6\"/>\n";
  }
}

}  // namespace

void write_alignment_svg(const std::string& path, const MatrixX2d& ref,
                         const MatrixX2d& rigid_src, const MatrixX2d& deformed_src) {
  std::ofstream os(path);
  require(os.good(), ErrorKind::io, "cannot open for writing: " + path);

  double min_x = ref.col(0).minCoeff(), max_x = ref.col(0).maxCoeff();
  double min_y = ref.col(1).minCoeff(), max_y = ref.col(1).maxCoeff();
  for (const MatrixX2d* m : {&rigid_src, &deformed_src}) {
    min_x = std::min(min_x, m->col(0).minCoeff());
    max_x = std::max(max_x, m->col(0).maxCoeff());
    min_y = std::min(min_y, m->col(1).minCoeff());
    max_y = std::max(max_y, m->col(1).maxCoeff());
  }
  double span = std::max({max_x - min_x, max_y - min_y, 1e-9});
  const double panel = 360.0, margin = 20.0;
  double sc = (panel - 2 * margin) / span;
  double width = 2 * panel + 3 * margin, height = panel + 2 * margin + 18.0;

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  double oy = margin + panel - margin;
  os << "<text x=\"" << margin << "\" y=\"" << height - 6 << "\" font-size=\"12\">"
     << "left: rigid only; right: deformed (source blue/red, reference grey)</text>\n";
  svg_points(os, ref, margin, oy, sc, min_x, min_y, "#999999");
  svg_points(os, rigid_src, margin, oy, sc, min_x, min_y, "#d62728");
  double ox2 = panel + 2 * margin;
  svg_points(os, ref, ox2, oy, sc, min_x, min_y, "#999999");
  svg_points(os, deformed_src, ox2, oy, sc, min_x, min_y, "#1f77b4");
  os << "</svg>\n";
  require(os.good(), ErrorKind::io, "write failed: " + path);
}

}  // namespace instalign
