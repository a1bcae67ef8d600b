#include "civbalance/civbalance.h"

#include <charconv>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <new>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "civbalance/bench.hpp"
#include "civbalance/datagen.hpp"
#include "civbalance/errors.hpp"
#include "civbalance/estimator.hpp"

struct civb_dataset {
  civb::CivDataset data;
  std::string name;
  // Provenance for datasets built or loaded whole; splits have none.
  std::optional<civb::DatasetManifest> manifest;
};

struct civb_config {
  civb::TrainConfig cfg;
};

struct civb_result {
  civb::RunResult run;
  bool has_test = false;
};

struct civb_experiment {
  civb::ExperimentConfig cfg;
};

struct civb_report {
  civb::ExperimentReport report;
  mutable std::string json;
  mutable std::string summary;
};

namespace {

thread_local std::string g_last_error;

civb_status status_of(civb::ErrorKind kind) {
  using civb::ErrorKind;
  switch (kind) {
    case ErrorKind::config: return CIVB_ERR_CONFIG;
    case ErrorKind::shape: return CIVB_ERR_SHAPE;
    case ErrorKind::numeric: return CIVB_ERR_NUMERIC;
    case ErrorKind::convergence: return CIVB_ERR_CONVERGENCE;
    case ErrorKind::degenerate_group: return CIVB_ERR_DEGENERATE_GROUP;
    case ErrorKind::ingestion: return CIVB_ERR_INGESTION;
    case ErrorKind::io: return CIVB_ERR_IO;
    case ErrorKind::argument: return CIVB_ERR_ARGUMENT;
    case ErrorKind::experiment: return CIVB_ERR_EXPERIMENT;
  }
  return CIVB_ERR_INTERNAL;
}

civb_status fail(civb_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

// Runs fn, mapping exceptions to status codes.
template <typename F>
civb_status guarded(F&& fn) {
  try {
    fn();
    return CIVB_OK;
  } catch (const civb::Error& e) {
    return fail(status_of(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(CIVB_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(CIVB_ERR_INTERNAL, e.what());
  }
}

#define CIVB_REQUIRE(ptr)                                               \
  do {                                                                  \
    if ((ptr) == nullptr) return fail(CIVB_ERR_NULL_POINTER, #ptr " is NULL"); \
  } while (0)

std::vector<std::string> split_list(const char* text) {
  std::vector<std::string> out;
  if (text == nullptr) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw civb::ConfigError(key + ": '" + v + "' is not a number");
  return out;
}

std::uint64_t parse_count(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw civb::ConfigError(key + ": '" + v + "' is not a nonnegative integer");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw civb::ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string real_text(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

civb_status copy_out(const std::string& s, char* buf, std::size_t cap, std::size_t* needed) {
  if (needed != nullptr) *needed = s.size();
  if (buf != nullptr && cap > 0) {
    const std::size_t n = std::min(cap - 1, s.size());
    std::memcpy(buf, s.data(), n);
    buf[n] = '\0';
  }
  return CIVB_OK;
}

void set_train(civb::TrainConfig& c, const std::string& key, const std::string& v) {
  if (key == "civ_lr") {
    c.civ_lr = parse_real(key, v);
  } else if (key == "treat_lr") {
    c.treat_lr = parse_real(key, v);
  } else if (key == "outcome_lr") {
    c.outcome_lr = parse_real(key, v);
  } else if (key == "epochs") {
    c.epochs_per_stage = parse_count(key, v);
  } else if (key == "alpha") {
    c.alpha = parse_real(key, v);
  } else if (key == "beta") {
    c.beta = parse_real(key, v);
  } else if (key == "l2_lambda") {
    c.l2_lambda = parse_real(key, v);
  } else if (key == "repr_dim") {
    c.repr_dim = parse_count(key, v);
  } else if (key == "hidden_dims") {
    c.hidden_dims.clear();
    for (const auto& h : split_list(v.c_str())) c.hidden_dims.push_back(parse_count(key, h));
  } else if (key == "seed") {
    c.seed = parse_count(key, v);
  } else if (key == "ablation") {
    c.ablation = civb::parse_ablation(v);
  } else if (key == "batch_size") {
    c.batch_size = parse_count(key, v);
  } else if (key == "balance_rows") {
    c.balance_rows = parse_count(key, v);
  } else if (key == "patience") {
    c.patience = parse_count(key, v);
  } else if (key == "min_delta") {
    c.min_delta = parse_real(key, v);
  } else if (key == "sinkhorn_epsilon") {
    c.sinkhorn.epsilon = parse_real(key, v);
  } else if (key == "sinkhorn_max_iter") {
    c.sinkhorn.max_iter = parse_count(key, v);
  } else if (key == "sinkhorn_tol") {
    c.sinkhorn.stop_tol = parse_real(key, v);
  } else if (key == "resample_s_hat") {
    c.resample_s_hat = parse_bool(key, v);
  } else {
    throw civb::ConfigError("unknown training key '" + key + "'");
  }
}

std::string get_train(const civb::TrainConfig& c, const std::string& key) {
  if (key == "civ_lr") return real_text(c.civ_lr);
  if (key == "treat_lr") return real_text(c.treat_lr);
  if (key == "outcome_lr") return real_text(c.outcome_lr);
  if (key == "epochs") return std::to_string(c.epochs_per_stage);
  if (key == "alpha") return real_text(c.alpha);
  if (key == "beta") return real_text(c.beta);
  if (key == "l2_lambda") return real_text(c.l2_lambda);
  if (key == "repr_dim") return std::to_string(c.repr_dim);
  if (key == "hidden_dims") {
    std::string s;
    for (std::size_t h : c.hidden_dims) s += (s.empty() ? "" : ",") + std::to_string(h);
    return s;
  }
  if (key == "seed") return std::to_string(c.seed);
  if (key == "ablation") return civb::to_string(c.ablation);
  if (key == "batch_size") return std::to_string(c.batch_size);
  if (key == "balance_rows") return std::to_string(c.balance_rows);
  if (key == "patience") return std::to_string(c.patience);
  if (key == "min_delta") return real_text(c.min_delta);
  if (key == "sinkhorn_epsilon") return real_text(c.sinkhorn.epsilon);
  if (key == "sinkhorn_max_iter") return std::to_string(c.sinkhorn.max_iter);
  if (key == "sinkhorn_tol") return real_text(c.sinkhorn.stop_tol);
  if (key == "resample_s_hat") return c.resample_s_hat ? "true" : "false";
  throw civb::ConfigError("unknown training key '" + key + "'");
}

}  // namespace

extern "C" {

const char* civb_version(void) { return CIVBALANCE_VERSION; }

const char* civb_status_name(civb_status status) {
  switch (status) {
    case CIVB_OK: return "ok";
    case CIVB_ERR_CONFIG: return "config";
    case CIVB_ERR_SHAPE: return "shape";
    case CIVB_ERR_NUMERIC: return "numeric";
    case CIVB_ERR_CONVERGENCE: return "convergence";
    case CIVB_ERR_DEGENERATE_GROUP: return "degenerate_group";
    case CIVB_ERR_INGESTION: return "ingestion";
    case CIVB_ERR_IO: return "io";
    case CIVB_ERR_ARGUMENT: return "argument";
    case CIVB_ERR_EXPERIMENT: return "experiment";
    case CIVB_ERR_NULL_POINTER: return "null_pointer";
    case CIVB_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* civb_last_error(void) { return g_last_error.c_str(); }

uint64_t civb_replication_seed(uint64_t base_seed, size_t r) { return civb::replication_seed(base_seed, r); }

civb_status civb_dataset_synthetic(size_t p, size_t q, size_t n, uint64_t seed, double noise_sd,
                                   civb_dataset** out) {
  CIVB_REQUIRE(out);
  return guarded([&] {
    const civb::SynSpec spec{p, q, n, seed, noise_sd};
    civb::CivDataset data = civb::generate_synthetic(spec);
    civb::DatasetManifest m = civb::manifest_for(spec, data);
    *out = new civb_dataset{std::move(data), spec.name(), std::move(m)};
  });
}

civb_status civb_dataset_semi_synthetic(const char* table_path, const char* drop_columns, size_t p, size_t q,
                                        uint64_t seed, double noise_sd, civb_dataset** out) {
  CIVB_REQUIRE(table_path);
  CIVB_REQUIRE(out);
  return guarded([&] {
    civb::SemiSynSpec spec;
    spec.covariate_table_path = table_path;
    spec.drop_columns = split_list(drop_columns);
    spec.p = p;
    spec.q = q;
    spec.seed = seed;
    spec.noise_sd = noise_sd;
    civb::SemiSynthetic semi = civb::build_semi_synthetic(spec);
    civb::DatasetManifest m = civb::manifest_for(spec, semi);
    *out = new civb_dataset{std::move(semi.data), spec.name(), std::move(m)};
  });
}

civb_status civb_dataset_load(const char* manifest_path, civb_dataset** out) {
  CIVB_REQUIRE(manifest_path);
  CIVB_REQUIRE(out);
  return guarded([&] {
    civb::LoadedDataset l = civb::read_dataset(manifest_path);
    *out = new civb_dataset{std::move(l.data), l.manifest.name, l.manifest};
  });
}

civb_status civb_dataset_save(const civb_dataset* d, const char* dir, const char* stem, char* buf, size_t cap,
                              size_t* needed) {
  CIVB_REQUIRE(d);
  CIVB_REQUIRE(dir);
  CIVB_REQUIRE(stem);
  std::string path;
  const civb_status s = guarded([&] {
    if (d->manifest) {
      path = civb::write_dataset(d->data, *d->manifest, dir, stem);
      return;
    }
    civb::DatasetManifest m;
    m.kind = "subset";
    m.name = d->name;
    m.p = d->data.dim();
    m.q = d->data.truth ? d->data.truth->u.cols() : 0;
    m.n = d->data.size();
    m.source_rows = d->data.size();
    m.true_ace = d->data.truth ? d->data.truth->true_ace : 0.0;
    m.notes.push_back("rows taken from a split of " + d->name);
    path = civb::write_dataset(d->data, m, dir, stem);
  });
  if (s != CIVB_OK) return s;
  return copy_out(path, buf, cap, needed);
}

size_t civb_dataset_rows(const civb_dataset* d) { return d == nullptr ? 0 : d->data.size(); }

size_t civb_dataset_dim(const civb_dataset* d) { return d == nullptr ? 0 : d->data.dim(); }

const char* civb_dataset_name(const civb_dataset* d) { return d == nullptr ? "" : d->name.c_str(); }

civb_status civb_dataset_true_ace(const civb_dataset* d, double* out) {
  CIVB_REQUIRE(d);
  CIVB_REQUIRE(out);
  if (!d->data.truth) return fail(CIVB_ERR_ARGUMENT, "dataset has no ground truth");
  *out = d->data.truth->true_ace;
  return CIVB_OK;
}

civb_status civb_dataset_column(const civb_dataset* d, const char* name, double* out, size_t len) {
  CIVB_REQUIRE(d);
  CIVB_REQUIRE(name);
  CIVB_REQUIRE(out);
  return guarded([&] {
    const civb::CivDataset& x = d->data;
    const std::string n = name;
    std::vector<double> col;
    if (n == "S") {
      col = x.s;
    } else if (n == "W") {
      col = x.w;
    } else if (n == "Y") {
      col = x.y;
    } else if ((n == "Y1" || n == "Y0") && x.truth) {
      col = n == "Y1" ? x.truth->y1 : x.truth->y0;
    } else if (n.rfind("C_", 0) == 0) {
      const std::uint64_t j = parse_count("column", n.substr(2));
      if (j < 1 || j > x.dim()) throw civb::ArgumentError("no column " + n);
      col = x.c.col_values(j - 1);
    } else {
      throw civb::ArgumentError("no column " + n);
    }
    if (len != col.size()) {
      throw civb::ShapeError("column " + n + " has " + std::to_string(col.size()) + " rows, buffer holds " +
                             std::to_string(len));
    }
    std::copy(col.begin(), col.end(), out);
  });
}

civb_status civb_dataset_split(const civb_dataset* d, const char* split, uint64_t seed, civb_dataset** train,
                               civb_dataset** val, civb_dataset** test) {
  CIVB_REQUIRE(d);
  CIVB_REQUIRE(split);
  CIVB_REQUIRE(train);
  CIVB_REQUIRE(test);
  return guarded([&] {
    const civb::SplitFractions f = civb::SplitFractions::parse(split);
    if (f.has_val() && val == nullptr) throw civb::ArgumentError("split has a validation part but val is NULL");
    civb::DataSplit parts = civb::split_dataset(d->data, f, seed);
    auto tr = std::make_unique<civb_dataset>(civb_dataset{std::move(parts.train), d->name, std::nullopt});
    auto te = std::make_unique<civb_dataset>(civb_dataset{std::move(parts.test), d->name, std::nullopt});
    std::unique_ptr<civb_dataset> va;
    if (parts.val) va = std::make_unique<civb_dataset>(civb_dataset{std::move(*parts.val), d->name, std::nullopt});
    *train = tr.release();
    *test = te.release();
    if (val != nullptr) *val = va.release();
  });
}

void civb_dataset_free(civb_dataset* d) { delete d; }

civb_config* civb_config_new(void) { return new (std::nothrow) civb_config{}; }

civb_config* civb_config_clone(const civb_config* cfg) {
  return cfg == nullptr ? nullptr : new (std::nothrow) civb_config{*cfg};
}

civb_status civb_config_set(civb_config* cfg, const char* key, const char* value) {
  CIVB_REQUIRE(cfg);
  CIVB_REQUIRE(key);
  CIVB_REQUIRE(value);
  return guarded([&] {
    civb::TrainConfig next = cfg->cfg;
    set_train(next, key, value);
    next.validate();
    cfg->cfg = std::move(next);
  });
}

civb_status civb_config_get(const civb_config* cfg, const char* key, char* buf, size_t cap, size_t* needed) {
  CIVB_REQUIRE(cfg);
  CIVB_REQUIRE(key);
  std::string v;
  const civb_status s = guarded([&] { v = get_train(cfg->cfg, key); });
  if (s != CIVB_OK) return s;
  return copy_out(v, buf, cap, needed);
}

void civb_config_free(civb_config* cfg) { delete cfg; }

civb_status civb_run(const civb_dataset* train, const civb_dataset* test, const civb_dataset* val,
                     const civb_config* cfg, civb_result** out) {
  CIVB_REQUIRE(train);
  CIVB_REQUIRE(cfg);
  CIVB_REQUIRE(out);
  return guarded([&] {
    civb::RunOptions opts;
    if (test != nullptr) opts.test = &test->data;
    if (val != nullptr) opts.validation = &val->data;
    *out = new civb_result{civb::run_cbrl_civ(train->data, cfg->cfg, opts), test != nullptr};
  });
}

civb_status civb_result_estimate(const civb_result* r, civb_estimate* out) {
  CIVB_REQUIRE(r);
  CIVB_REQUIRE(out);
  const civb::AceEstimate& e = r->run.estimate;
  const civb::Diagnostics& d = e.diagnostics;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  *out = civb_estimate{};
  out->ace = e.ace;
  out->has_test = r->has_test ? 1 : 0;
  out->ace_test = r->has_test ? r->run.ace_test : nan;
  out->has_within_error = e.within_error ? 1 : 0;
  out->within_error = e.within_error.value_or(nan);
  out->has_out_error = e.out_error ? 1 : 0;
  out->out_error = e.out_error.value_or(nan);
  out->loss_s = d.loss_s;
  out->loss_w = d.loss_w;
  out->loss_y = d.loss_y;
  out->ipm_s = d.ipm_s;
  out->ipm_w = d.ipm_w;
  out->epochs_civ = d.epochs_civ;
  out->epochs_treat = d.epochs_treat;
  out->epochs_outcome = d.epochs_outcome;
  out->warning_count = d.warnings.size();
  return CIVB_OK;
}

const char* civb_result_warning(const civb_result* r, size_t i) {
  if (r == nullptr || i >= r->run.estimate.diagnostics.warnings.size()) return nullptr;
  return r->run.estimate.diagnostics.warnings[i].c_str();
}

void civb_result_free(civb_result* r) { delete r; }

civb_experiment* civb_experiment_new(void) { return new (std::nothrow) civb_experiment{}; }

civb_status civb_experiment_set_synthetic(civb_experiment* e, size_t p, size_t q, size_t n, double noise_sd) {
  CIVB_REQUIRE(e);
  return guarded([&] {
    const civb::SynSpec spec{p, q, n, 0, noise_sd};
    spec.validate();
    e->cfg.dataset = spec;
  });
}

civb_status civb_experiment_set_semi_synthetic(civb_experiment* e, const char* table_path,
                                               const char* drop_columns, size_t p, size_t q, double noise_sd) {
  CIVB_REQUIRE(e);
  CIVB_REQUIRE(table_path);
  return guarded([&] {
    civb::SemiSynSpec spec;
    spec.covariate_table_path = table_path;
    spec.drop_columns = split_list(drop_columns);
    spec.p = p;
    spec.q = q;
    spec.noise_sd = noise_sd;
    spec.validate();
    e->cfg.dataset = spec;
  });
}

civb_status civb_experiment_set_dataset(civb_experiment* e, const char* manifest_path) {
  CIVB_REQUIRE(e);
  CIVB_REQUIRE(manifest_path);
  e->cfg.dataset = civb::DatasetFile{manifest_path};
  return CIVB_OK;
}

civb_status civb_experiment_set_methods(civb_experiment* e, const char* methods) {
  CIVB_REQUIRE(e);
  CIVB_REQUIRE(methods);
  return guarded([&] {
    std::vector<civb::Ablation> out;
    for (const auto& m : split_list(methods)) out.push_back(civb::parse_ablation(m));
    if (out.empty()) throw civb::ConfigError("no methods given");
    e->cfg.methods = std::move(out);
  });
}

civb_status civb_experiment_set(civb_experiment* e, const char* key, const char* value) {
  CIVB_REQUIRE(e);
  CIVB_REQUIRE(key);
  CIVB_REQUIRE(value);
  return guarded([&] {
    const std::string k = key;
    if (k == "replications") {
      e->cfg.replications = parse_count(k, value);
    } else if (k == "split") {
      e->cfg.split = civb::SplitFractions::parse(value);
    } else if (k == "base_seed") {
      e->cfg.base_seed = parse_count(k, value);
    } else if (k == "threads") {
      e->cfg.threads = parse_count(k, value);
    } else {
      throw civb::ConfigError("unknown experiment key '" + k + "'");
    }
  });
}

civb_status civb_experiment_set_config(civb_experiment* e, const civb_config* cfg) {
  CIVB_REQUIRE(e);
  CIVB_REQUIRE(cfg);
  e->cfg.train_cfg = cfg->cfg;
  return CIVB_OK;
}

void civb_experiment_free(civb_experiment* e) { delete e; }

civb_status civb_experiment_run(const civb_experiment* e, civb_report** out) {
  CIVB_REQUIRE(e);
  CIVB_REQUIRE(out);
  try {
    *out = new civb_report{civb::run_experiment(e->cfg), {}, {}};
    return CIVB_OK;
  } catch (const civb::ExperimentError& err) {
    *out = new civb_report{err.report(), {}, {}};
    return fail(CIVB_ERR_EXPERIMENT, err.what());
  } catch (...) {
    return guarded([] { throw; });
  }
}

civb_status civb_experiment_sweep(const civb_experiment* e, const double* grid, size_t len, civb_report** out) {
  CIVB_REQUIRE(e);
  CIVB_REQUIRE(out);
  if (grid == nullptr && len > 0) return fail(CIVB_ERR_NULL_POINTER, "grid is NULL");
  try {
    const std::vector<double> g(grid, grid + len);
    *out = new civb_report{civb::sweep_alpha_beta(e->cfg, g), {}, {}};
    return CIVB_OK;
  } catch (const civb::ExperimentError& err) {
    *out = new civb_report{err.report(), {}, {}};
    return fail(CIVB_ERR_EXPERIMENT, err.what());
  } catch (...) {
    return guarded([] { throw; });
  }
}

civb_status civb_report_set_kind(civb_report* r, const char* kind) {
  CIVB_REQUIRE(r);
  CIVB_REQUIRE(kind);
  r->report.kind = kind;
  r->json.clear();
  return CIVB_OK;
}

size_t civb_report_rows(const civb_report* r) { return r == nullptr ? 0 : r->report.rows.size(); }

civb_status civb_report_row_at(const civb_report* r, size_t i, civb_report_row* out) {
  CIVB_REQUIRE(r);
  CIVB_REQUIRE(out);
  if (i >= r->report.rows.size()) return fail(CIVB_ERR_ARGUMENT, "report row out of range");
  const civb::MethodSummary& m = r->report.rows[i];
  *out = civb_report_row{m.setting.c_str(), m.method.c_str(), m.alpha,      m.beta,       m.completed,
                         m.failed,          m.within_mean,     m.within_std, m.out_mean,   m.out_std,
                         m.std_degenerate ? 1 : 0};
  return CIVB_OK;
}

civb_status civb_report_out_errors(const civb_report* r, size_t i, double* out, size_t len) {
  CIVB_REQUIRE(r);
  CIVB_REQUIRE(out);
  if (i >= r->report.rows.size()) return fail(CIVB_ERR_ARGUMENT, "report row out of range");
  const auto& reps = r->report.rows[i].replications;
  if (len != reps.size()) {
    return fail(CIVB_ERR_SHAPE, "row has " + std::to_string(reps.size()) + " replications, buffer holds " +
                                    std::to_string(len));
  }
  for (std::size_t k = 0; k < reps.size(); ++k) {
    out[k] = reps[k].out_error.value_or(std::numeric_limits<double>::quiet_NaN());
  }
  return CIVB_OK;
}

const char* civb_report_json(const civb_report* r) {
  if (r == nullptr) return "";
  if (r->json.empty()) r->json = civb::report_to_json(r->report);
  return r->json.c_str();
}

const char* civb_report_summary(const civb_report* r) {
  if (r == nullptr) return "";
  r->summary = civb::summary_table(r->report);
  return r->summary.c_str();
}

civb_status civb_report_write(const civb_report* r, const char* path) {
  CIVB_REQUIRE(r);
  CIVB_REQUIRE(path);
  return guarded([&] { civb::write_report(r->report, path); });
}

civb_status civb_report_read(const char* path, civb_report** out) {
  CIVB_REQUIRE(path);
  CIVB_REQUIRE(out);
  return guarded([&] { *out = new civb_report{civb::read_report(path), {}, {}}; });
}

void civb_report_free(civb_report* r) { delete r; }

}  // extern "C"
