#pragma once

// Synthetic and semi-synthetic generators with hidden potential outcomes,
// plus the on-disk dataset format (observed table, manifest, ground truth).

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "civbalance/estimator.hpp"
#include "civbalance/matrix.hpp"

namespace civb {

// "Syn-p-q": p observed and q unobserved confounders.
struct SynSpec {
  std::size_t p = 4;
  std::size_t q = 4;
  std::size_t n = 6000;
  std::uint64_t seed = 0;
  double noise_sd = 0.0;

  void validate() const;  // ConfigError unless p >= 1, n >= 2, noise_sd >= 0
  std::string name() const;
};

struct SemiSynSpec {
  std::string covariate_table_path;
  std::size_t p = 2;
  std::size_t q = 2;
  std::uint64_t seed = 0;
  double noise_sd = 0.0;
  // Columns removed before the numeric check (ids, raw outcomes, ...).
  std::vector<std::string> drop_columns;

  void validate() const;
  std::string name(const std::string& prefix = "Semi") const;
};

// Generated probabilities are clamped here so both classes keep support.
inline constexpr double kMinAssignProb = 1e-12;

// 0.95 I + 0.05 J.
Matrix make_covariance(std::size_t d);

struct Confounders {
  Matrix c;  // n x p
  Matrix u;  // n x q
};

Confounders sample_confounders(const SynSpec& spec);

// sigmoid(row sum of C + row sum of U), clamped to [kMinAssignProb, 1 - kMinAssignProb].
std::vector<double> instrument_prob(const Matrix& c, const Matrix& u);
// sigmoid(s * sum C + sum C + sum U), clamped likewise.
std::vector<double> treatment_prob(std::span<const double> s, const Matrix& c, const Matrix& u);

std::vector<double> gen_instrument(const Matrix& c, const Matrix& u, std::uint64_t seed);
std::vector<double> gen_treatment(std::span<const double> s, const Matrix& c, const Matrix& u, std::uint64_t seed);

struct Outcomes {
  std::vector<double> y;
  std::vector<double> y1;  // (sum C^2 + sum U^2) / (p + q)
  std::vector<double> y0;  // (sum C + sum U) / (p + q)
};

Outcomes gen_outcome(std::span<const double> w, const Matrix& c, const Matrix& u, double noise_sd,
                     std::uint64_t seed);

// U is used for S, W and Y, then kept only in the ground truth.
CivDataset generate_synthetic(const SynSpec& spec);

struct CovariateTable {
  std::vector<std::string> names;
  Matrix values;
};

// First line holds column names; tab separated if the header has a tab,
// comma separated otherwise. Cells in columns outside `drop_columns` must be
// finite numbers. Throws IoError if unreadable and IngestionError (1-based
// file line, 1-based column) on a malformed cell or ragged row.
CovariateTable read_covariate_table(const std::string& path, std::span<const std::string> drop_columns = {});

struct SemiSynthetic {
  CivDataset data;
  std::vector<std::string> observed_columns;
  std::vector<std::string> hidden_columns;
  std::size_t source_rows = 0;
};

// Picks p+q columns from the selection substream, standardizes them, uses
// the first p as C and the rest as U, then draws S, W, Y as in the synthetic
// generator. ConfigError when the table has fewer than p+q columns.
SemiSynthetic build_semi_synthetic(const SemiSynSpec& spec);
SemiSynthetic build_semi_synthetic(const SemiSynSpec& spec, const CovariateTable& table);

struct DatasetManifest {
  std::string kind;  // "synthetic" or "semi_synthetic"
  std::string name;
  std::size_t p = 0;
  std::size_t q = 0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double noise_sd = 0.0;
  std::vector<std::string> selected_columns;  // observed then hidden
  std::string covariate_source;
  std::size_t source_rows = 0;
  double true_ace = 0.0;
  std::string data_file;   // relative to the manifest
  std::string truth_file;  // Y1, Y0, U_1..U_q
  std::vector<std::string> notes;
};

DatasetManifest manifest_for(const SynSpec& spec, const CivDataset& data);
DatasetManifest manifest_for(const SemiSynSpec& spec, const SemiSynthetic& semi);

// Writes <stem>.csv, <stem>.truth.csv and <stem>.json into `dir`, fills the
// file names in the manifest and returns the manifest path.
std::string write_dataset(const CivDataset& data, DatasetManifest manifest, const std::string& dir,
                          const std::string& stem);

struct LoadedDataset {
  CivDataset data;
  DatasetManifest manifest;
};

// Reads the manifest and the tables it names; ground truth is attached when
// the truth file is present.
LoadedDataset read_dataset(const std::string& manifest_path);

}  // namespace civb
