#pragma once

// Replication experiments: data per replication, train/test splits, the
// within- and out-of-sample ACE errors, and report files.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "civbalance/datagen.hpp"
#include "civbalance/errors.hpp"
#include "civbalance/estimator.hpp"

namespace civb {

// |estimate - truth|. Throws ArgumentError when truth is not finite.
double ace_error(double estimate, double truth);

struct SplitFractions {
  double train = 0.7;
  double val = 0.0;
  double test = 0.3;

  void validate() const;  // ConfigError unless nonnegative and summing to 1 +- 1e-9
  bool has_val() const noexcept { return val > 0.0; }
  // "0.7,0.3" (train, test) or "0.63,0.27,0.10" (train, val, test).
  static SplitFractions parse(const std::string& text);
  std::string str() const;
};

struct DataSplit {
  CivDataset train;
  std::optional<CivDataset> val;
  CivDataset test;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> val_rows;
  std::vector<std::size_t> test_rows;
};

// Seeded shuffle, then contiguous train / val / test blocks of rounded size
// (test takes the remainder). ConfigError if any requested part is empty.
DataSplit split_dataset(const CivDataset& data, const SplitFractions& split, std::uint64_t seed);

// An existing dataset on disk, reused by every replication.
struct DatasetFile {
  std::string manifest_path;
};

using DataSource = std::variant<SynSpec, SemiSynSpec, DatasetFile>;

struct ExperimentConfig {
  DataSource dataset = SynSpec{};
  std::vector<Ablation> methods{Ablation::full};
  TrainConfig train_cfg;
  std::size_t replications = 30;
  SplitFractions split;
  std::uint64_t base_seed = 0;
  std::string output_path;
  std::size_t threads = 1;

  void validate() const;
  // "Syn-4-4", "Semi-2-2" or the manifest's dataset name.
  std::string setting() const;
};

struct ReplicationRecord {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  std::optional<double> true_ace_train;
  std::optional<double> true_ace_test;
  std::optional<double> ace_within;
  std::optional<double> ace_out;
  std::optional<double> within_error;
  std::optional<double> out_error;
  std::size_t epochs_outcome = 0;
  std::vector<std::string> warnings;

  friend bool operator==(const ReplicationRecord&, const ReplicationRecord&) = default;
};

struct MethodSummary {
  std::string setting;
  std::string method;
  double alpha = 0.0;
  double beta = 0.0;
  std::size_t completed = 0;
  std::size_t failed = 0;
  double within_mean = 0.0;
  double within_std = 0.0;
  double out_mean = 0.0;
  double out_std = 0.0;
  // Set when fewer than two replications completed, so the std is 0 by fiat.
  bool std_degenerate = false;
  std::vector<ReplicationRecord> replications;

  friend bool operator==(const MethodSummary&, const MethodSummary&) = default;
};

struct ExperimentReport {
  std::string kind;  // bench, ablate or sweep
  std::string setting;
  std::string dataset_kind;  // synthetic, semi_synthetic or file
  std::string code_version;
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<std::string> deviation_notes;
  std::vector<MethodSummary> rows;

  friend bool operator==(const ExperimentReport&, const ExperimentReport&) = default;
};

// Raised once failed replications reach 20% of a method's runs; carries the
// partial report so it can still be written.
class ExperimentError : public Error {
 public:
  ExperimentError(const std::string& what, ExperimentReport report)
      : Error(ErrorKind::experiment, what), report_(std::move(report)) {}
  const ExperimentReport& report() const noexcept { return report_; }

 private:
  ExperimentReport report_;
};

inline constexpr double kFailureCeiling = 0.2;

// Seed of replication r: derive_seed(base_seed, replication stream, r). The
// dataset, split and network seeds all descend from it, so results do not
// depend on `threads`.
std::uint64_t replication_seed(std::uint64_t base_seed, std::size_t r) noexcept;

// Sample mean and (n-1) standard deviation; std is 0 for fewer than 2 values.
std::pair<double, double> mean_std(std::span<const double> values);

ExperimentReport run_experiment(const ExperimentConfig& cfg);

// One run_experiment per grid value with alpha = beta = value; the rows are
// concatenated in grid order.
ExperimentReport sweep_alpha_beta(const ExperimentConfig& cfg, std::span<const double> grid);

// JSON report at `path` plus a comma-separated mean+-std table next to it
// (see summary_path). IoError names the missing directory or failing file.
void write_report(const ExperimentReport& report, const std::string& path);
ExperimentReport read_report(const std::string& path);

std::string report_to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const std::string& text);

// "<stem>.csv" next to a ".json" path, "<path>.csv" otherwise.
std::string summary_path(const std::string& report_path);
// Header plus one "Syn-4-4, full, 0.14±0.05, ..." row per method summary;
// two decimals for synthetic data and three otherwise.
std::string summary_table(const ExperimentReport& report);

}  // namespace civb
