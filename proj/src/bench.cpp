#include "civbalance/bench.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "civbalance/rng.hpp"

namespace civb {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string shortest(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::size_t rounded_count(std::size_t n, double frac) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * frac));
}

// The data every replication task starts from.
struct Prepared {
  std::string kind;
  std::optional<CovariateTable> table;
  std::optional<CivDataset> fixed_data;
};

Prepared prepare(const ExperimentConfig& cfg) {
  Prepared p;
  if (std::holds_alternative<SynSpec>(cfg.dataset)) {
    p.kind = "synthetic";
  } else if (const auto* semi = std::get_if<SemiSynSpec>(&cfg.dataset)) {
    p.kind = "semi_synthetic";
    p.table = read_covariate_table(semi->covariate_table_path, semi->drop_columns);
  } else {
    const auto& file = std::get<DatasetFile>(cfg.dataset);
    LoadedDataset loaded = read_dataset(file.manifest_path);
    if (!loaded.data.truth) throw ConfigError("dataset has no ground truth file: " + file.manifest_path);
    p.kind = "file";
    p.fixed_data = std::move(loaded.data);
  }
  return p;
}

CivDataset replication_data(const ExperimentConfig& cfg, const Prepared& prep, std::uint64_t seed) {
  if (const auto* syn = std::get_if<SynSpec>(&cfg.dataset)) {
    SynSpec s = *syn;
    s.seed = seed;
    return generate_synthetic(s);
  }
  if (const auto* semi = std::get_if<SemiSynSpec>(&cfg.dataset)) {
    SemiSynSpec s = *semi;
    s.seed = seed;
    return build_semi_synthetic(s, *prep.table).data;
  }
  return *prep.fixed_data;
}

ReplicationRecord run_one(const ExperimentConfig& cfg, const Prepared& prep, std::size_t r, Ablation method) {
  ReplicationRecord rec;
  rec.index = r;
  rec.seed = replication_seed(cfg.base_seed, r);
  try {
    const CivDataset data = replication_data(cfg, prep, rec.seed);
    const DataSplit parts = split_dataset(data, cfg.split, derive_seed(rec.seed, Stream::split));
    TrainConfig tc = cfg.train_cfg;
    tc.seed = derive_seed(rec.seed, Stream::training);
    tc.ablation = method;
    RunOptions opts;
    opts.test = &parts.test;
    if (parts.val) opts.validation = &*parts.val;
    const RunResult res = run_cbrl_civ(parts.train, tc, opts);
    rec.true_ace_train = parts.train.truth->true_ace;
    rec.true_ace_test = parts.test.truth->true_ace;
    rec.ace_within = res.estimate.ace;
    rec.ace_out = res.ace_test;
    rec.within_error = ace_error(res.estimate.ace, *rec.true_ace_train);
    rec.out_error = ace_error(res.ace_test, *rec.true_ace_test);
    rec.epochs_outcome = res.estimate.diagnostics.epochs_outcome;
    rec.warnings = res.estimate.diagnostics.warnings;
  } catch (const std::exception& e) {
    rec.failed = true;
    rec.error = e.what();
  }
  return rec;
}

MethodSummary summarize(const std::string& setting, Ablation method, const TrainConfig& tc,
                        std::vector<ReplicationRecord> recs) {
  std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  MethodSummary m;
  m.setting = setting;
  m.method = to_string(method);
  TrainConfig eff = tc;
  eff.ablation = method;
  m.alpha = eff.effective_alpha();
  m.beta = eff.effective_beta();
  std::vector<double> within;
  std::vector<double> out;
  for (const auto& r : recs) {
    if (r.failed) {
      ++m.failed;
      continue;
    }
    ++m.completed;
    within.push_back(*r.within_error);
    out.push_back(*r.out_error);
  }
  std::tie(m.within_mean, m.within_std) = mean_std(within);
  std::tie(m.out_mean, m.out_std) = mean_std(out);
  m.std_degenerate = m.completed < 2;
  m.replications = std::move(recs);
  return m;
}

std::vector<std::pair<std::string, std::string>> config_echo(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> kv;
  auto put = [&](const std::string& k, const std::string& v) { kv.emplace_back(k, v); };
  if (const auto* syn = std::get_if<SynSpec>(&cfg.dataset)) {
    put("dataset.p", std::to_string(syn->p));
    put("dataset.q", std::to_string(syn->q));
    put("dataset.n", std::to_string(syn->n));
    put("dataset.noise_sd", shortest(syn->noise_sd));
  } else if (const auto* semi = std::get_if<SemiSynSpec>(&cfg.dataset)) {
    put("dataset.covariates", semi->covariate_table_path);
    put("dataset.p", std::to_string(semi->p));
    put("dataset.q", std::to_string(semi->q));
    put("dataset.noise_sd", shortest(semi->noise_sd));
    std::string drops;
    for (const auto& d : semi->drop_columns) drops += (drops.empty() ? "" : ",") + d;
    put("dataset.drop_columns", drops);
  } else {
    put("dataset.manifest", std::get<DatasetFile>(cfg.dataset).manifest_path);
  }
  std::string methods;
  for (Ablation a : cfg.methods) methods += (methods.empty() ? "" : ",") + std::string(to_string(a));
  put("methods", methods);
  put("replications", std::to_string(cfg.replications));
  put("split", cfg.split.str());
  put("base_seed", std::to_string(cfg.base_seed));
  const TrainConfig& t = cfg.train_cfg;
  put("train.civ_lr", shortest(t.civ_lr));
  put("train.treat_lr", shortest(t.treat_lr));
  put("train.outcome_lr", shortest(t.outcome_lr));
  put("train.epochs_per_stage", std::to_string(t.epochs_per_stage));
  put("train.alpha", shortest(t.alpha));
  put("train.beta", shortest(t.beta));
  put("train.l2_lambda", shortest(t.l2_lambda));
  put("train.repr_dim", std::to_string(t.repr_dim));
  std::string hidden;
  for (std::size_t h : t.hidden_dims) hidden += (hidden.empty() ? "" : ",") + std::to_string(h);
  put("train.hidden_dims", hidden);
  put("train.batch_size", std::to_string(t.batch_size));
  put("train.balance_rows", std::to_string(t.balance_rows));
  put("train.patience", std::to_string(t.patience));
  put("train.min_delta", shortest(t.min_delta));
  put("train.sinkhorn.epsilon", shortest(t.sinkhorn.epsilon));
  put("train.sinkhorn.max_iter", std::to_string(t.sinkhorn.max_iter));
  put("train.sinkhorn.stop_tol", shortest(t.sinkhorn.stop_tol));
  put("train.resample_s_hat", t.resample_s_hat ? "true" : "false");
  return kv;
}

std::vector<std::string> deviation_notes(const std::string& dataset_kind) {
  std::vector<std::string> notes{
      "std is the sample standard deviation (n-1); a single completed replication reports 0 and is flagged",
      "each replication regenerates the dataset from its own seed",
      "batch normalization is replaced by a per-column standardization fitted on the training rows",
      "the outcome stage takes full-batch Adam steps; the balance divergences use a random subset of rows per step",
      "the balance divergences are computed on a centered, unit-scale copy of the representation",
      "validation rows, when present, only drive early stopping of the outcome stage",
      "a batch whose divergence does not converge contributes no balance term for that step",
  };
  if (dataset_kind == "semi_synthetic") {
    notes.emplace_back(
        "semi-synthetic outcomes reuse the synthetic outcome surface on the selected standardized columns");
  }
  return notes;
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_double(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

double ace_error(double estimate, double truth) {
  if (!std::isfinite(truth)) throw ArgumentError("ace_error: true ACE is not finite");
  return std::abs(estimate - truth);
}

void SplitFractions::validate() const {
  for (double f : {train, val, test})
    if (!(f >= 0.0) || !std::isfinite(f)) throw ConfigError("split fractions must be finite and >= 0");
  if (std::abs(train + val + test - 1.0) > 1e-9) {
    throw ConfigError("split fractions sum to " + shortest(train + val + test) + ", expected 1");
  }
  if (train == 0.0 || test == 0.0) throw ConfigError("split needs nonzero train and test fractions");
}

SplitFractions SplitFractions::parse(const std::string& text) {
  std::vector<double> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) {
      throw ConfigError("split: '" + item + "' is not a number");
    }
    parts.push_back(v);
  }
  SplitFractions s;
  if (parts.size() == 2) {
    s = {parts[0], 0.0, parts[1]};
  } else if (parts.size() == 3) {
    s = {parts[0], parts[1], parts[2]};
  } else {
    throw ConfigError("split: expected train,test or train,val,test, got '" + text + "'");
  }
  s.validate();
  return s;
}

std::string SplitFractions::str() const {
  return has_val() ? shortest(train) + "," + shortest(val) + "," + shortest(test)
                   : shortest(train) + "," + shortest(test);
}

DataSplit split_dataset(const CivDataset& data, const SplitFractions& split, std::uint64_t seed) {
  split.validate();
  const std::size_t n = data.size();
  const std::size_t n_train = rounded_count(n, split.train);
  const std::size_t n_val = split.has_val() ? rounded_count(n, split.val) : 0;
  if (n_train == 0 || n_train + n_val >= n || (split.has_val() && n_val == 0)) {
    throw ConfigError("split " + split.str() + " of " + std::to_string(n) + " rows leaves a part empty");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, Stream::split);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = std::min(static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i)), i - 1);
    std::swap(order[i - 1], order[j]);
  }
  DataSplit out;
  out.train_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                      order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  out.train = data.take_rows(out.train_rows);
  if (n_val > 0) out.val = data.take_rows(out.val_rows);
  out.test = data.take_rows(out.test_rows);
  return out;
}

void ExperimentConfig::validate() const {
  if (replications < 1) throw ConfigError("replications must be at least 1");
  if (methods.empty()) throw ConfigError("at least one method is required");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  split.validate();
  train_cfg.validate();
  if (const auto* syn = std::get_if<SynSpec>(&dataset)) syn->validate();
  if (const auto* semi = std::get_if<SemiSynSpec>(&dataset)) semi->validate();
}

std::string ExperimentConfig::setting() const {
  if (const auto* syn = std::get_if<SynSpec>(&dataset)) return syn->name();
  if (const auto* semi = std::get_if<SemiSynSpec>(&dataset)) return semi->name();
  return fs::path(std::get<DatasetFile>(dataset).manifest_path).stem().string();
}

std::uint64_t replication_seed(std::uint64_t base_seed, std::size_t r) noexcept {
  return derive_seed(base_seed, Stream::replication, r);
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const Prepared prep = prepare(cfg);
  const std::string setting = cfg.setting();

  const std::size_t n_tasks = cfg.replications * cfg.methods.size();
  std::vector<ReplicationRecord> results(n_tasks);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t t = next++; t < n_tasks; t = next++) {
      // Task t is replication t / methods, method t % methods; each writes its own slot.
      results[t] = run_one(cfg, prep, t / cfg.methods.size(), cfg.methods[t % cfg.methods.size()]);
    }
  };
  const std::size_t n_threads = std::min(cfg.threads, n_tasks);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
  }

  ExperimentReport report;
  report.kind = "bench";
  report.setting = setting;
  report.dataset_kind = prep.kind;
  report.code_version = CIVBALANCE_VERSION;
  report.config = config_echo(cfg);
  report.deviation_notes = deviation_notes(prep.kind);
  std::string failures;
  for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
    std::vector<ReplicationRecord> recs;
    for (std::size_t r = 0; r < cfg.replications; ++r) recs.push_back(results[r * cfg.methods.size() + m]);
    MethodSummary row = summarize(setting, cfg.methods[m], cfg.train_cfg, std::move(recs));
    if (static_cast<double>(row.failed) >= kFailureCeiling * static_cast<double>(cfg.replications)) {
      failures += (failures.empty() ? "" : "; ") + row.method + ": " + std::to_string(row.failed) + " of " +
                  std::to_string(cfg.replications) + " replications failed";
    }
    report.rows.push_back(std::move(row));
  }
  if (!failures.empty()) throw ExperimentError("too many failed replications (" + failures + ")", report);
  return report;
}

ExperimentReport sweep_alpha_beta(const ExperimentConfig& cfg, std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  ExperimentReport out;
  for (double g : grid) {
    if (!(g >= 0.0) || !std::isfinite(g)) throw ConfigError("sweep grid values must be finite and >= 0");
  }
  for (double g : grid) {
    ExperimentConfig c = cfg;
    c.train_cfg.alpha = g;
    c.train_cfg.beta = g;
    ExperimentReport part = run_experiment(c);
    if (out.rows.empty()) {
      out = part;
      out.rows.clear();
      out.kind = "sweep";
      // The per-value alpha and beta live in the rows.
      std::erase_if(out.config, [](const auto& kv) { return kv.first == "train.alpha" || kv.first == "train.beta"; });
      std::string values;
      for (double v : grid) values += (values.empty() ? "" : ",") + shortest(v);
      out.config.emplace_back("sweep.grid", values);
    }
    for (auto& row : part.rows) out.rows.push_back(std::move(row));
  }
  return out;
}

std::string report_to_json(const ExperimentReport& report) {
  json config = json::array();
  for (const auto& [k, v] : report.config) config.push_back({k, v});
  json rows = json::array();
  for (const auto& m : report.rows) {
    json reps = json::array();
    for (const auto& r : m.replications) {
      reps.push_back({{"index", r.index},
                      {"seed", r.seed},
                      {"failed", r.failed},
                      {"error", r.error},
                      {"true_ace_train", opt_json(r.true_ace_train)},
                      {"true_ace_test", opt_json(r.true_ace_test)},
                      {"ace_within", opt_json(r.ace_within)},
                      {"ace_out", opt_json(r.ace_out)},
                      {"within_error", opt_json(r.within_error)},
                      {"out_error", opt_json(r.out_error)},
                      {"epochs_outcome", r.epochs_outcome},
                      {"warnings", r.warnings}});
    }
    rows.push_back({{"setting", m.setting},
                    {"method", m.method},
                    {"alpha", m.alpha},
                    {"beta", m.beta},
                    {"completed", m.completed},
                    {"failed", m.failed},
                    {"within_mean", m.within_mean},
                    {"within_std", m.within_std},
                    {"out_mean", m.out_mean},
                    {"out_std", m.out_std},
                    {"std_degenerate", m.std_degenerate},
                    {"replications", reps}});
  }
  const json j = {{"kind", report.kind},
                  {"setting", report.setting},
                  {"dataset_kind", report.dataset_kind},
                  {"code_version", report.code_version},
                  {"std_convention", "sample (n-1)"},
                  {"config", config},
                  {"deviation_notes", report.deviation_notes},
                  {"rows", rows}};
  return j.dump(2) + "\n";
}

ExperimentReport report_from_json(const std::string& text) {
  ExperimentReport report;
  try {
    const json j = json::parse(text);
    report.kind = j.at("kind").get<std::string>();
    report.setting = j.at("setting").get<std::string>();
    report.dataset_kind = j.at("dataset_kind").get<std::string>();
    report.code_version = j.at("code_version").get<std::string>();
    for (const auto& kv : j.at("config")) report.config.emplace_back(kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
    report.deviation_notes = j.at("deviation_notes").get<std::vector<std::string>>();
    for (const auto& jr : j.at("rows")) {
      MethodSummary m;
      m.setting = jr.at("setting").get<std::string>();
      m.method = jr.at("method").get<std::string>();
      m.alpha = jr.at("alpha").get<double>();
      m.beta = jr.at("beta").get<double>();
      m.completed = jr.at("completed").get<std::size_t>();
      m.failed = jr.at("failed").get<std::size_t>();
      m.within_mean = jr.at("within_mean").get<double>();
      m.within_std = jr.at("within_std").get<double>();
      m.out_mean = jr.at("out_mean").get<double>();
      m.out_std = jr.at("out_std").get<double>();
      m.std_degenerate = jr.at("std_degenerate").get<bool>();
      for (const auto& x : jr.at("replications")) {
        ReplicationRecord r;
        r.index = x.at("index").get<std::size_t>();
        r.seed = x.at("seed").get<std::uint64_t>();
        r.failed = x.at("failed").get<bool>();
        r.error = x.at("error").get<std::string>();
        r.true_ace_train = opt_double(x.at("true_ace_train"));
        r.true_ace_test = opt_double(x.at("true_ace_test"));
        r.ace_within = opt_double(x.at("ace_within"));
        r.ace_out = opt_double(x.at("ace_out"));
        r.within_error = opt_double(x.at("within_error"));
        r.out_error = opt_double(x.at("out_error"));
        r.epochs_outcome = x.at("epochs_outcome").get<std::size_t>();
        r.warnings = x.at("warnings").get<std::vector<std::string>>();
        m.replications.push_back(std::move(r));
      }
      report.rows.push_back(std::move(m));
    }
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("malformed report: ") + e.what());
  }
  return report;
}

std::string summary_path(const std::string& report_path) {
  fs::path p(report_path);
  if (p.extension() == ".json") return p.replace_extension(".csv").string();
  return report_path + ".csv";
}

std::string summary_table(const ExperimentReport& report) {
  const int decimals = report.dataset_kind == "synthetic" ? 2 : 3;
  std::string out = "setting, method, out-of-sample, within-sample, alpha, beta, completed, failed\n";
  for (const auto& m : report.rows) {
    out += m.setting + ", " + m.method + ", " + fixed(m.out_mean, decimals) + "±" + fixed(m.out_std, decimals) +
           ", " + fixed(m.within_mean, decimals) + "±" + fixed(m.within_std, decimals) + ", " + shortest(m.alpha) +
           ", " + shortest(m.beta) + ", " + std::to_string(m.completed) + ", " + std::to_string(m.failed) + "\n";
  }
  return out;
}

void write_report(const ExperimentReport& report, const std::string& path) {
  const fs::path p(path);
  const fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
  if (!fs::is_directory(dir)) throw IoError(dir.string(), "report directory does not exist");
  auto write = [](const fs::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError(file.string(), "cannot open for writing");
    out << text;
    if (!out) throw IoError(file.string(), "write failed");
  };
  write(p, report_to_json(report));
  write(summary_path(path), summary_table(report));
}

ExperimentReport read_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open report");
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

}  // namespace civb
