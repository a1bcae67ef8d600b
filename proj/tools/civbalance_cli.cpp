// Command-line front end over the civbalance C interface.
//
//   civbalance gen    --setting 4 4 --n 6000 --seed 7 --out data/
//   civbalance run    --setting 4 4 --seed 7 --split 0.7,0.3
//   civbalance bench  --setting 4 4 --n 6000 --replications 10 --out syn44.json
//   civbalance ablate --setting 4 4 --replications 10 --out ablation.json
//   civbalance sweep  --grid 0.1,10 --replications 10 --out sweep.json

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "civbalance/civbalance.h"

namespace {

constexpr int kExitError = 1;
constexpr int kExitFailureCeiling = 3;

struct Options {
  std::vector<std::size_t> setting{4, 4};
  std::size_t n = 6000;
  std::optional<std::uint64_t> seed;
  std::size_t replications = 30;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<std::string> ablation;
  std::optional<std::size_t> epochs;
  std::string split = "0.7,0.3";
  std::string out;
  std::string covariates;
  std::string drop;
  std::string data;
  double noise_sd = 1.0;
  std::size_t threads = 1;
  std::string methods = "full,no_civ_balance,no_balance";
  std::vector<double> grid{0.1, 10.0};
  std::vector<std::string> overrides;
  std::string stem;
  bool setting_given = false;
};

// Raised after a C call fails; carries the status for the exit code.
struct CallFailed {
  civb_status status;
};

void check(civb_status s, const char* what) {
  if (s == CIVB_OK) return;
  std::cerr << "civbalance: " << what << ": " << civb_status_name(s) << ": " << civb_last_error() << "\n";
  throw CallFailed{s};
}

template <typename T, void (*Free)(T*)>
struct Handle {
  T* ptr = nullptr;
  Handle() = default;
  explicit Handle(T* p) : ptr(p) {}
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(ptr); }
  T** out() { return &ptr; }
  T* get() const { return ptr; }
};

using Dataset = Handle<civb_dataset, civb_dataset_free>;
using Config = Handle<civb_config, civb_config_free>;
using Result = Handle<civb_result, civb_result_free>;
using Experiment = Handle<civb_experiment, civb_experiment_free>;
using Report = Handle<civb_report, civb_report_free>;

// Explicit --seed wins, then CIVBALANCE_SEED, then 0.
std::uint64_t base_seed(const Options& o) {
  if (o.seed) return *o.seed;
  if (const char* env = std::getenv("CIVBALANCE_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end != nullptr && *end == '\0') return v;
    std::cerr << "civbalance: ignoring CIVBALANCE_SEED='" << env << "' (not an integer)\n";
  }
  return 0;
}

std::string real_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Semi-synthetic data defaults to two instruments and two hidden covariates.
std::size_t setting_p(const Options& o) { return o.setting_given || o.covariates.empty() ? o.setting[0] : 2; }
std::size_t setting_q(const Options& o) { return o.setting_given || o.covariates.empty() ? o.setting[1] : 2; }

civb_config* make_config(const Options& o) {
  civb_config* cfg = civb_config_new();
  if (cfg == nullptr) throw CallFailed{CIVB_ERR_INTERNAL};
  Config guard(cfg);
  if (o.alpha) check(civb_config_set(cfg, "alpha", real_text(*o.alpha).c_str()), "--alpha");
  if (o.beta) check(civb_config_set(cfg, "beta", real_text(*o.beta).c_str()), "--beta");
  if (o.ablation) check(civb_config_set(cfg, "ablation", o.ablation->c_str()), "--ablation");
  if (o.epochs) check(civb_config_set(cfg, "epochs", std::to_string(*o.epochs).c_str()), "--epochs");
  for (const std::string& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::cerr << "civbalance: --set expects key=value, got '" << kv << "'\n";
      throw CallFailed{CIVB_ERR_CONFIG};
    }
    check(civb_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()), "--set");
  }
  guard.ptr = nullptr;
  return cfg;
}

void load_dataset(const Options& o, std::uint64_t seed, Dataset& out) {
  if (!o.data.empty()) {
    check(civb_dataset_load(o.data.c_str(), out.out()), "loading dataset");
  } else if (!o.covariates.empty()) {
    check(civb_dataset_semi_synthetic(o.covariates.c_str(), o.drop.empty() ? nullptr : o.drop.c_str(),
                                      setting_p(o), setting_q(o), seed, o.noise_sd, out.out()),
          "building semi-synthetic dataset");
  } else {
    check(civb_dataset_synthetic(o.setting[0], o.setting[1], o.n, seed, o.noise_sd, out.out()),
          "generating dataset");
  }
}

int cmd_gen(const Options& o) {
  const std::uint64_t seed = base_seed(o);
  Dataset d;
  load_dataset(o, seed, d);
  const std::string stem = o.stem.empty() ? std::string(civb_dataset_name(d.get())) : o.stem;
  std::size_t needed = 0;
  check(civb_dataset_save(d.get(), o.out.c_str(), stem.c_str(), nullptr, 0, &needed), "writing dataset");
  std::string path(needed + 1, '\0');
  check(civb_dataset_save(d.get(), o.out.c_str(), stem.c_str(), path.data(), path.size(), nullptr),
        "writing dataset");
  path.resize(needed);
  std::cout << path << "\n";
  return 0;
}

void print_estimate(const civb_estimate& e, const civb_result* r, std::ostream& os) {
  os << "ace " << real_text(e.ace) << "\n";
  if (e.has_test) os << "ace_test " << real_text(e.ace_test) << "\n";
  if (e.has_within_error) os << "within_error " << real_text(e.within_error) << "\n";
  if (e.has_out_error) os << "out_error " << real_text(e.out_error) << "\n";
  os << "loss_s " << real_text(e.loss_s) << "\n"
     << "loss_w " << real_text(e.loss_w) << "\n"
     << "loss_y " << real_text(e.loss_y) << "\n"
     << "ipm_s " << real_text(e.ipm_s) << "\n"
     << "ipm_w " << real_text(e.ipm_w) << "\n"
     << "epochs " << e.epochs_civ << " " << e.epochs_treat << " " << e.epochs_outcome << "\n";
  for (std::size_t i = 0; i < e.warning_count; ++i) os << "warning " << civb_result_warning(r, i) << "\n";
}

int cmd_run(const Options& o) {
  const std::uint64_t seed = base_seed(o);
  Dataset full;
  load_dataset(o, seed, full);
  Dataset train, val, test;
  check(civb_dataset_split(full.get(), o.split.c_str(), seed, train.out(), val.out(), test.out()), "--split");
  Config cfg(make_config(o));
  check(civb_config_set(cfg.get(), "seed", std::to_string(seed).c_str()), "seed");
  Result r;
  check(civb_run(train.get(), test.get(), val.get(), cfg.get(), r.out()), "training");
  civb_estimate e{};
  check(civb_result_estimate(r.get(), &e), "reading estimate");
  print_estimate(e, r.get(), std::cout);
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) {
      std::cerr << "civbalance: cannot write " << o.out << "\n";
      return kExitError;
    }
    print_estimate(e, r.get(), f);
  }
  return 0;
}

civb_experiment* make_experiment(const Options& o, const std::string& methods) {
  civb_experiment* raw = civb_experiment_new();
  if (raw == nullptr) throw CallFailed{CIVB_ERR_INTERNAL};
  Experiment e(raw);
  if (!o.data.empty()) {
    check(civb_experiment_set_dataset(raw, o.data.c_str()), "--data");
  } else if (!o.covariates.empty()) {
    check(civb_experiment_set_semi_synthetic(raw, o.covariates.c_str(), o.drop.empty() ? nullptr : o.drop.c_str(),
                                             setting_p(o), setting_q(o), o.noise_sd),
          "--covariates");
  } else {
    check(civb_experiment_set_synthetic(raw, o.setting[0], o.setting[1], o.n, o.noise_sd), "--setting");
  }
  check(civb_experiment_set_methods(raw, methods.c_str()), "methods");
  check(civb_experiment_set(raw, "replications", std::to_string(o.replications).c_str()), "--replications");
  check(civb_experiment_set(raw, "split", o.split.c_str()), "--split");
  check(civb_experiment_set(raw, "base_seed", std::to_string(base_seed(o)).c_str()), "--seed");
  check(civb_experiment_set(raw, "threads", std::to_string(o.threads).c_str()), "--threads");
  Config cfg(make_config(o));
  check(civb_experiment_set_config(raw, cfg.get()), "training config");
  e.ptr = nullptr;
  return raw;
}

// Prints the summary and writes the report; a failure ceiling still emits the
// partial report before exiting non-zero.
int finish(const Options& o, civb_status s, Report& report) {
  if (report.get() == nullptr) {
    check(s, "experiment");
    return kExitError;
  }
  std::cout << civb_report_summary(report.get());
  if (!o.out.empty()) check(civb_report_write(report.get(), o.out.c_str()), "writing report");
  if (s == CIVB_ERR_EXPERIMENT) {
    std::cerr << "civbalance: " << civb_last_error() << "\n";
    return kExitFailureCeiling;
  }
  check(s, "experiment");
  return 0;
}

int cmd_bench(const Options& o, const char* kind, const std::string& methods) {
  Experiment e(make_experiment(o, methods));
  Report report;
  const civb_status s = civb_experiment_run(e.get(), report.out());
  if (report.get() != nullptr) check(civb_report_set_kind(report.get(), kind), "report kind");
  return finish(o, s, report);
}

int cmd_sweep(const Options& o) {
  Experiment e(make_experiment(o, o.ablation.value_or("full")));
  Report report;
  const civb_status s = civb_experiment_sweep(e.get(), o.grid.data(), o.grid.size(), report.out());
  return finish(o, s, report);
}

void add_data_flags(CLI::App* sub, Options& o) {
  sub->add_option("--setting", o.setting, "Syn-p-q setting: instruments p, hidden confounders q")
      ->expected(2);
  sub->add_option("--n", o.n, "rows per synthetic dataset");
  sub->add_option("--seed", o.seed, "base seed (falls back to CIVBALANCE_SEED, then 0)");
  sub->add_option("--noise-sd", o.noise_sd, "outcome noise standard deviation");
  sub->add_option("--covariates", o.covariates, "covariate table for semi-synthetic data")->check(CLI::ExistingFile);
  sub->add_option("--drop", o.drop, "comma separated covariate columns to ignore (ids, labels)");
  sub->add_option("--data", o.data, "manifest of a dataset written by gen")->check(CLI::ExistingFile);
}

void add_train_flags(CLI::App* sub, Options& o) {
  sub->add_option("--alpha", o.alpha, "weight of the treatment balance term");
  sub->add_option("--beta", o.beta, "weight of the instrument balance term");
  sub->add_option("--epochs", o.epochs, "epoch cap per stage");
  sub->add_option("--split", o.split, "train,test or train,val,test fractions");
  sub->add_option("--set", o.overrides, "training override key=value (repeatable)");
}

void add_experiment_flags(CLI::App* sub, Options& o) {
  sub->add_option("--replications", o.replications, "generated datasets per method");
  sub->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional-IV balanced representation learning for ACE estimation"};
  app.set_version_flag("--version", std::string(civb_version()));
  app.require_subcommand(1);
  Options o;

  CLI::App* gen = app.add_subcommand("gen", "write a dataset, its ground truth and manifest");
  add_data_flags(gen, o);
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_option("--stem", o.stem, "file name stem (default: dataset name)");

  CLI::App* run = app.add_subcommand("run", "train once and print the estimate");
  add_data_flags(run, o);
  add_train_flags(run, o);
  run->add_option("--ablation", o.ablation, "full | no_civ_balance | no_balance");
  run->add_option("--out", o.out, "also write the estimate here");

  CLI::App* bench = app.add_subcommand("bench", "replication experiment for one method");
  add_data_flags(bench, o);
  add_train_flags(bench, o);
  add_experiment_flags(bench, o);
  bench->add_option("--ablation", o.ablation, "method to benchmark (default full)");
  bench->add_option("--out", o.out, "report path; the summary table goes next to it as .csv");

  CLI::App* ablate = app.add_subcommand("ablate", "replication experiment over several methods");
  add_data_flags(ablate, o);
  add_train_flags(ablate, o);
  add_experiment_flags(ablate, o);
  ablate->add_option("--methods", o.methods, "comma separated methods");
  ablate->add_option("--out", o.out, "report path");

  CLI::App* sweep = app.add_subcommand("sweep", "alpha = beta grid");
  add_data_flags(sweep, o);
  add_train_flags(sweep, o);
  add_experiment_flags(sweep, o);
  sweep->add_option("--ablation", o.ablation, "method to sweep (default full)");
  sweep->add_option("--grid", o.grid, "alpha = beta values")->delimiter(',');
  sweep->add_option("--out", o.out, "report path");

  CLI11_PARSE(app, argc, argv);
  o.setting_given = app.get_subcommands().front()->count("--setting") > 0;

  try {
    if (*gen) return cmd_gen(o);
    if (*run) return cmd_run(o);
    if (*bench) return cmd_bench(o, "bench", o.ablation.value_or("full"));
    if (*ablate) return cmd_bench(o, "ablate", o.methods);
    if (*sweep) return cmd_sweep(o);
  } catch (const CallFailed&) {
    return kExitError;
  }
  return kExitError;
}
