#pragma once

// Finite training sets: loading/saving, the synthetic generators used by the
// experiments, and nested score/region subsets.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sul/csv.hpp"
#include "sul/errors.hpp"
#include "sul/numerics.hpp"

namespace sul {

/// N points in d dimensions with optional class labels in [0, num_classes).
struct Dataset {
  RowMatrix points;
  std::optional<std::vector<int>> labels;
  int num_classes = 0;
  std::string name;

  Eigen::Index size() const noexcept { return points.rows(); }
  Eigen::Index dim() const noexcept { return points.cols(); }
  bool has_labels() const noexcept { return labels.has_value(); }
  Vector point(Eigen::Index i) const { return points.row(i).transpose(); }

  /// Indices of points carrying `label`, ascending.
  std::vector<std::size_t> class_indices(int label) const {
    std::vector<std::size_t> out;
    if (!labels) return out;
    for (std::size_t i = 0; i < labels->size(); ++i)
      if ((*labels)[i] == label) out.push_back(i);
    return out;
  }
};

inline void validate(const Dataset& ds) {
  if (ds.size() < 1) throw EmptyDatasetError("dataset has no points");
  if (ds.dim() < 1) throw InvalidArgument("dataset has zero dimension");
  if (!ds.points.allFinite()) throw InvalidArgument("dataset contains non-finite values");
  if (ds.labels) {
    if (static_cast<Eigen::Index>(ds.labels->size()) != ds.size())
      throw InvalidArgument("label count does not match point count");
    for (int l : *ds.labels)
      if (l < 0 || l >= ds.num_classes) throw InvalidArgument("label outside [0, num_classes)");
  }
}

/// Rows of `ds` selected by `idx`, in the given order. Labels carry over.
inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.points.resize(static_cast<Eigen::Index>(idx.size()), ds.dim());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= static_cast<std::size_t>(ds.size())) throw InvalidArgument("subset index out of range");
    out.points.row(static_cast<Eigen::Index>(k)) = ds.points.row(static_cast<Eigen::Index>(idx[k]));
  }
  if (ds.labels) {
    std::vector<int> l;
    l.reserve(idx.size());
    for (auto i : idx) l.push_back((*ds.labels)[i]);
    out.labels = std::move(l);
  }
  out.num_classes = ds.num_classes;
  out.name = ds.name;
  return out;
}

// ---------------------------------------------------------------------------
// File formats

enum class PointFormat { csv, raw };

namespace detail {

inline std::map<std::string, std::string> read_sidecar(const std::filesystem::path& path) {
  std::map<std::string, std::string> out;
  std::ifstream in(path.string() + ".meta");
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

// A header row has no numeric cell at all.
inline bool looks_like_header(const std::string& line) {
  for (auto tok : split_view(line, ','))
    if (parse_double(tok)) return false;
  return true;
}

template <class T>
void write_le(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "raw format assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool read_le(std::istream& in, T& v) {
  return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

inline constexpr char kRawMagic[4] = {'S', 'U', 'D', 'S'};
inline constexpr std::uint32_t kRawVersion = 1;

inline Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string(), 0);
  const auto meta = read_sidecar(path);
  bool labels_last = meta.count("labels") && meta.at("labels") == "last";

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::string line;
  std::size_t lineno = 0;
  std::size_t width = 0;
  bool header_checked = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header_checked) {
      header_checked = true;
      if (looks_like_header(line)) {
        auto cols = split_view(line, ',');
        std::string last(cols.back());
        while (!last.empty() && last.back() == ' ') last.pop_back();
        if (last == "class" || last == "label") labels_last = true;
        continue;
      }
    }
    auto toks = split_view(line, ',');
    if (width == 0) width = toks.size();
    if (toks.size() != width) throw FormatError("inconsistent row width", lineno);
    std::vector<double> row;
    row.reserve(toks.size());
    for (auto tok : toks) {
      auto v = parse_double(tok);
      if (!v) throw FormatError("cannot parse value '" + std::string(tok) + "'", lineno);
      row.push_back(*v);
    }
    if (labels_last) {
      const double l = row.back();
      if (l != std::floor(l) || l < 0) throw FormatError("label is not a nonnegative integer", lineno);
      labels.push_back(static_cast<int>(l));
      row.pop_back();
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw EmptyDatasetError("no data rows in " + path.string());
  if (rows.front().empty()) throw FormatError("rows contain only a label column", 1);

  Dataset ds;
  ds.name = path.stem().string();
  ds.points.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      ds.points(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  if (labels_last) {
    ds.num_classes = *std::max_element(labels.begin(), labels.end()) + 1;
    if (meta.count("num_classes")) ds.num_classes = std::max(ds.num_classes, std::stoi(meta.at("num_classes")));
    ds.labels = std::move(labels);
  }
  if (meta.count("dim") && std::stoll(meta.at("dim")) != ds.dim())
    throw FormatError("sidecar dim does not match row width", 1);
  validate(ds);
  return ds;
}

inline Dataset load_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string(), 0);
  char magic[4];
  if (!in.read(magic, 4)) throw EmptyDatasetError("empty raw file " + path.string());
  if (std::memcmp(magic, kRawMagic, 4) != 0) throw FormatError("bad magic in raw point file", 0);
  std::uint32_t version = 0, d = 0;
  std::uint64_t n = 0;
  if (!read_le(in, version) || !read_le(in, d) || !read_le(in, n)) throw FormatError("truncated raw header", 0);
  if (version != kRawVersion) throw FormatError("unsupported raw version " + std::to_string(version), 0);
  if (n == 0) throw EmptyDatasetError("raw file declares zero points");
  if (d == 0) throw FormatError("raw file declares zero dimension", 0);
  Dataset ds;
  ds.name = path.stem().string();
  ds.points.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::uint64_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < d; ++j) {
      double v;
      if (!read_le(in, v)) throw FormatError("truncated raw data block", 0);
      ds.points(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
  std::vector<int> labels;
  std::uint32_t l;
  while (read_le(in, l)) labels.push_back(static_cast<int>(l));
  if (!labels.empty()) {
    if (labels.size() != n) throw FormatError("label block length does not match N", 0);
    ds.num_classes = *std::max_element(labels.begin(), labels.end()) + 1;
    ds.labels = std::move(labels);
  }
  validate(ds);
  return ds;
}

}  // namespace detail

/// Text: one point per line, comma-separated, optional trailing integer label
/// column (declared by a "class"/"label" header or `labels=last` in the
/// `<path>.meta` sidecar). Raw: "SUDS", u32 version, u32 d, u64 N, N*d
/// little-endian f64, then optionally N u32 labels.
inline Dataset load_points(const std::filesystem::path& path, PointFormat format) {
  return format == PointFormat::csv ? detail::load_csv(path) : detail::load_raw(path);
}

inline void save_points(const Dataset& ds, const std::filesystem::path& path, PointFormat format) {
  validate(ds);
  if (format == PointFormat::csv) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path.string());
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
      for (Eigen::Index j = 0; j < ds.dim(); ++j) {
        if (j) out << ',';
        out << format_double(ds.points(i, j));
      }
      if (ds.labels) out << ',' << (*ds.labels)[static_cast<std::size_t>(i)];
      out << '\n';
    }
    std::ofstream meta(path.string() + ".meta");
    meta << "dim=" << ds.dim() << '\n';
    if (ds.labels) meta << "labels=last\nnum_classes=" << ds.num_classes << '\n';
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  out.write(detail::kRawMagic, 4);
  detail::write_le(out, detail::kRawVersion);
  detail::write_le(out, static_cast<std::uint32_t>(ds.dim()));
  detail::write_le(out, static_cast<std::uint64_t>(ds.size()));
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    for (Eigen::Index j = 0; j < ds.dim(); ++j) detail::write_le(out, ds.points(i, j));
  if (ds.labels)
    for (int l : *ds.labels) detail::write_le(out, static_cast<std::uint32_t>(l));
}

// ---------------------------------------------------------------------------
// Generators

inline Dataset make_gaussian_dataset(int dim, int n, std::uint64_t seed) {
  if (dim < 1 || n < 1) throw InvalidArgument("make_gaussian_dataset: dim and n must be >= 1");
  Rng rng(seed, 0x6a55);
  Dataset ds;
  ds.name = "gaussian";
  ds.points.resize(n, dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) ds.points(i, j) = rng.normal();
  return ds;
}

/// The four collinear points of the perception-alignment toy.
inline Dataset make_pat_toy_dataset() {
  Dataset ds;
  ds.name = "pat_toy";
  ds.points.resize(4, 2);
  ds.points << -1.0, 0.0, -0.2, 0.0, 0.2, 0.0, 1.0, 0.0;
  return ds;
}

/// Labeled two-class toy: class c ~ N(mu_c, spread^2 I) with
/// mu_0 = -offset * e_0 and mu_1 = +offset * e_0.
struct TwoClassSpec {
  int dim = 32;
  int per_class = 32;
  double offset = 3.0;
  double spread = 2.0;
  std::uint64_t seed = 0;
};

inline Dataset make_two_class_dataset(const TwoClassSpec& spec) {
  if (spec.dim < 1 || spec.per_class < 1) throw InvalidArgument("make_two_class_dataset: dim and per_class must be >= 1");
  Rng rng(spec.seed, 0x2c1a);
  Dataset ds;
  ds.name = "two_class";
  ds.num_classes = 2;
  ds.points.resize(2 * spec.per_class, spec.dim);
  std::vector<int> labels;
  for (int c = 0; c < 2; ++c)
    for (int k = 0; k < spec.per_class; ++k) {
      const Eigen::Index row = c * spec.per_class + k;
      for (int j = 0; j < spec.dim; ++j) ds.points(row, j) = spec.spread * rng.normal();
      ds.points(row, 0) += c == 0 ? -spec.offset : spec.offset;
      labels.push_back(c);
    }
  ds.labels = std::move(labels);
  return ds;
}

/// 2-D Gaussian mixture with `components` modes evenly spaced on a circle.
/// Points are labeled with their mode index.
struct RingMixtureSpec {
  int n = 2048;
  int components = 8;
  double radius = 2.0;
  double spread = 0.25;
  std::uint64_t seed = 0;
};

inline Dataset make_ring_mixture_dataset(const RingMixtureSpec& spec) {
  if (spec.n < 1 || spec.components < 1) throw InvalidArgument("make_ring_mixture_dataset: n and components must be >= 1");
  Rng rng(spec.seed, 0x41e9);
  Dataset ds;
  ds.name = "ring_mixture";
  ds.num_classes = spec.components;
  ds.points.resize(spec.n, 2);
  std::vector<int> labels;
  for (int i = 0; i < spec.n; ++i) {
    const int c = static_cast<int>(rng.index(static_cast<std::uint64_t>(spec.components)));
    const double angle = 2.0 * std::numbers::pi * c / spec.components;
    ds.points(i, 0) = spec.radius * std::cos(angle) + spec.spread * rng.normal();
    ds.points(i, 1) = spec.radius * std::sin(angle) + spec.spread * rng.normal();
    labels.push_back(c);
  }
  ds.labels = std::move(labels);
  return ds;
}

// ---------------------------------------------------------------------------
// Score / region subsets

/// score_idx defines the empirical-score target, region_idx the supervision
/// distribution. score_idx is always a subset of region_idx.
struct SubsetPair {
  std::vector<std::size_t> score_idx;
  std::vector<std::size_t> region_idx;
};

inline void validate(const SubsetPair& pair, const Dataset& ds) {
  if (pair.score_idx.empty() || pair.region_idx.empty()) throw InvalidArgument("subset pair has an empty side");
  std::set<std::size_t> region(pair.region_idx.begin(), pair.region_idx.end());
  std::set<std::size_t> score(pair.score_idx.begin(), pair.score_idx.end());
  if (region.size() != pair.region_idx.size() || score.size() != pair.score_idx.size())
    throw InvalidArgument("subset pair contains duplicate indices");
  if (*region.rbegin() >= static_cast<std::size_t>(ds.size())) throw InvalidArgument("subset index out of range");
  for (auto i : score)
    if (!region.count(i)) throw InvalidArgument("score subset is not nested in region subset");
}

/// Uniform split: score_idx is n_score indices without replacement; region_idx
/// is score_idx followed by n_region - n_score further indices drawn from the
/// complement.
inline SubsetPair split_score_region(const Dataset& ds, std::size_t n_score, std::size_t n_region,
                                     std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(ds.size());
  if (n_score < 1 || n_score > n_region || n_region > n)
    throw InvalidArgument("split_score_region requires 1 <= n_score <= n_region <= N");
  Rng rng(seed, 0x5b17);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto order = sample_without_replacement(all, n, rng);
  SubsetPair out;
  out.score_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_score));
  out.region_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_region));
  return out;
}

/// Per-class split for labeled data: each class contributes score_per_class
/// score points and region_per_class region points (region augmented from the
/// remaining members of the same class).
inline SubsetPair split_score_region_per_class(const Dataset& ds, std::size_t score_per_class,
                                               std::size_t region_per_class, std::uint64_t seed) {
  if (!ds.labels) throw InvalidArgument("per-class split requires labels");
  if (score_per_class < 1 || score_per_class > region_per_class)
    throw InvalidArgument("per-class split requires 1 <= score_per_class <= region_per_class");
  Rng rng(seed, 0x5b18);
  SubsetPair out;
  for (int c = 0; c < ds.num_classes; ++c) {
    auto members = ds.class_indices(c);
    if (members.size() < region_per_class)
      throw InvalidArgument("class " + std::to_string(c) + " has fewer members than region_per_class");
    auto order = sample_without_replacement(members, region_per_class, rng);
    out.score_idx.insert(out.score_idx.end(), order.begin(), order.begin() + static_cast<std::ptrdiff_t>(score_per_class));
    out.region_idx.insert(out.region_idx.end(), order.begin(), order.end());
  }
  return out;
}

}  // namespace sul
