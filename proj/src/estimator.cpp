#include "civbalance/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "civbalance/errors.hpp"
#include "civbalance/rng.hpp"

namespace civb {

namespace {

// Sub-indices of the init and shuffle streams, one per network / stage.
enum Part : std::uint64_t { kCiv = 1, kTreat = 2, kRepr = 3, kHead1 = 4, kHead0 = 5 };

// Draw index for S-hat on validation rows, far from the per-epoch indices.
constexpr std::uint64_t kValidationDraw = 1ull << 40;

bool is_binary(double v) { return v == 0.0 || v == 1.0; }

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw ArgumentError(std::string(what) + " contains a non-finite value");
}

double mean_diff(std::span<const double> a, std::span<const double> b) {
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] - b[i];
  return s / static_cast<double>(a.size());
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, std::span<const std::size_t> rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(v.at(r));
  return out;
}

std::uint64_t init_seed(const TrainConfig& cfg, Part part) { return derive_seed(cfg.seed, Stream::init, part); }

std::vector<std::size_t> shuffled_rows(std::size_t n, const TrainConfig& cfg, Part stage, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(derive_seed(cfg.seed, Stream::shuffle, stage), Stream::shuffle, epoch);
  // Fisher-Yates on our own uniform draws so the order is the same everywhere.
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  return idx;
}

std::vector<std::span<const std::size_t>> batches(const std::vector<std::size_t>& order, std::size_t batch_size) {
  std::vector<std::span<const std::size_t>> out;
  const std::size_t bs = batch_size == 0 ? order.size() : batch_size;
  for (std::size_t k = 0; k < order.size(); k += bs) {
    out.emplace_back(order.data() + k, std::min(bs, order.size() - k));
  }
  return out;
}

double bce_value(std::span<const double> p, std::span<const double> t) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s -= t[i] * std::log(p[i]) + (1.0 - t[i]) * std::log(1.0 - p[i]);
  return s / static_cast<double>(p.size());
}

// Plateau tracker shared by every stage.
class EarlyStop {
 public:
  EarlyStop(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

  // Returns true when `loss` is the new best.
  bool update(double loss) {
    if (loss < best_ - min_delta_) {
      best_ = loss;
      stall_ = 0;
      return true;
    }
    ++stall_;
    return false;
  }
  bool done() const noexcept { return patience_ > 0 && stall_ >= patience_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stall_ = 0;
};

// SGD on mean binary cross-entropy. `inputs(epoch)` supplies the design
// matrix, which only changes between epochs when S-hat is resampled.
StageResult train_classifier(const MlpSpec& spec, const std::function<Matrix(std::size_t)>& inputs,
                             std::span<const double> target, double lr, const TrainConfig& cfg, Part stage,
                             const char* name) {
  StageResult res;
  res.net.spec = spec;
  res.net.params = mlp_init(spec);
  const std::size_t n = target.size();
  const Matrix t_all = Matrix::column(target);
  ParamSet best = res.net.params;
  EarlyStop stop(cfg.patience, cfg.min_delta);
  res.final_loss = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t epoch = 0; epoch < cfg.epochs_per_stage; ++epoch) {
    const Matrix x = inputs(epoch);
    const auto order = shuffled_rows(n, cfg, stage, epoch);
    for (auto rows : batches(order, cfg.batch_size)) {
      const Matrix xb = x.take_rows(rows);
      const Matrix tb = t_all.take_rows(rows);
      auto vg = value_and_grad(
          [&](Tape& tape, std::span<const Var> ps) {
            return ad::bce(mlp_forward(ps, spec, tape.constant(xb)), tb);
          },
          res.net.params, name);
      sgd_step(res.net.params, vg.grads, lr);
    }
    res.epochs = epoch + 1;
    const double loss = bce_value(res.net.forward(x).values(), target);
    if (!std::isfinite(loss)) throw NumericError(name, "non-finite training loss");
    if (stop.update(loss)) {
      best = res.net.params;
      res.final_loss = loss;
    }
    if (stop.done()) break;
  }
  res.net.params = std::move(best);
  return res;
}

std::vector<double> column_of(const Matrix& m) {
  const auto v = m.values();
  return {v.begin(), v.end()};
}

OutcomeInputs subset(const OutcomeInputs& in, std::span<const std::size_t> rows) {
  return {in.c.take_rows(rows), pick(in.y, rows), pick(in.p_treat, rows), pick(in.p_civ, rows)};
}

void check_inputs(const OutcomeInputs& in) {
  const std::size_t n = in.c.rows();
  if (in.y.size() != n || in.p_treat.size() != n || in.p_civ.size() != n) {
    throw ShapeError("outcome inputs: column lengths do not match C rows");
  }
}

struct Heads {
  Matrix z;
  Matrix f1;
  Matrix f0;
};

Heads predict(const OutcomeNets& nets, const Matrix& c) {
  Heads h;
  h.z = nets.repr.forward(c);
  h.f1 = nets.head1.forward(h.z);
  h.f0 = nets.head0.forward(h.z);
  return h;
}

double mixture_mse(const OutcomeNets& nets, const OutcomeInputs& in) {
  const Heads h = predict(nets, in.c);
  double s = 0.0;
  for (std::size_t i = 0; i < in.y.size(); ++i) {
    const double pred = h.f0[i] + (h.f1[i] - h.f0[i]) * in.p_treat[i];
    s += (in.y[i] - pred) * (in.y[i] - pred);
  }
  return s / static_cast<double>(in.y.size());
}

void add_warning(std::vector<std::string>* out, const std::string& msg) {
  if (out != nullptr && std::find(out->begin(), out->end(), msg) == out->end()) out->push_back(msg);
}

}  // namespace

// ---------------------------------------------------------------------------

void CivDataset::validate() const {
  const std::size_t n = c.rows();
  if (s.size() != n || w.size() != n || y.size() != n) {
    throw ShapeError("dataset columns have different lengths (C has " + std::to_string(n) + " rows)");
  }
  if (!c.all_finite()) throw ArgumentError("C contains a non-finite value");
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_binary(s[i])) throw ArgumentError("S must be 0 or 1 (row " + std::to_string(i + 1) + ")");
    if (!is_binary(w[i])) throw ArgumentError("W must be 0 or 1 (row " + std::to_string(i + 1) + ")");
  }
  check_finite(y, "Y");
  if (truth) {
    if (truth->y1.size() != n || truth->y0.size() != n) throw ShapeError("ground truth length does not match data");
    if (!truth->u.empty() && truth->u.rows() != n) throw ShapeError("hidden confounders do not match data rows");
  }
}

CivDataset CivDataset::take_rows(std::span<const std::size_t> rows) const {
  CivDataset out;
  out.c = c.take_rows(rows);
  out.s = pick(s, rows);
  out.w = pick(w, rows);
  out.y = pick(y, rows);
  if (truth) {
    GroundTruth t;
    t.y1 = pick(truth->y1, rows);
    t.y0 = pick(truth->y0, rows);
    if (!truth->u.empty()) t.u = truth->u.take_rows(rows);
    t.true_ace = mean_diff(t.y1, t.y0);
    out.truth = std::move(t);
  }
  return out;
}

const char* to_string(Ablation a) noexcept {
  switch (a) {
    case Ablation::full:
      return "full";
    case Ablation::no_civ_balance:
      return "no_civ_balance";
    case Ablation::no_balance:
      return "no_balance";
  }
  return "full";
}

Ablation parse_ablation(const std::string& name) {
  for (Ablation a : {Ablation::full, Ablation::no_civ_balance, Ablation::no_balance})
    if (name == to_string(a)) return a;
  throw ArgumentError("unknown ablation '" + name + "' (expected full, no_civ_balance or no_balance)");
}

double TrainConfig::effective_alpha() const noexcept { return ablation == Ablation::no_balance ? 0.0 : alpha; }

double TrainConfig::effective_beta() const noexcept { return ablation == Ablation::full ? beta : 0.0; }

void TrainConfig::validate() const {
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be finite and > 0");
  };
  auto nonneg = [](double v, const char* what) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be finite and >= 0");
  };
  positive(civ_lr, "civ_lr");
  positive(treat_lr, "treat_lr");
  positive(outcome_lr, "outcome_lr");
  nonneg(alpha, "alpha");
  nonneg(beta, "beta");
  nonneg(l2_lambda, "l2_lambda");
  nonneg(min_delta, "min_delta");
  if (repr_dim == 0) throw ConfigError("repr_dim must be >= 1");
  for (std::size_t h : hidden_dims)
    if (h == 0) throw ConfigError("hidden layer widths must be >= 1");
  sinkhorn.validate();
}

Standardizer Standardizer::fit(const Matrix& x) {
  if (x.rows() == 0) throw ArgumentError("cannot standardize an empty matrix");
  Standardizer s;
  const double n = static_cast<double>(x.rows());
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) m += x(r, c);
    m /= n;
    double v = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) v += (x(r, c) - m) * (x(r, c) - m);
    const double sd = std::sqrt(v / n);
    s.mean.push_back(m);
    s.scale.push_back(sd > 1e-12 ? sd : 1.0);
  }
  return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
  if (x.cols() != mean.size()) throw ShapeError("standardizer fitted on a different column count");
  Matrix out = x;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - mean[c]) / scale[c];
  return out;
}

// ---------------------------------------------------------------------------
// Stages 1 and 2

StageResult fit_civ_stage(const CivDataset& data, const TrainConfig& cfg) {
  data.validate();
  cfg.validate();
  const MlpSpec spec{data.dim(), cfg.hidden_dims, 1, OutputActivation::sigmoid, init_seed(cfg, kCiv)};
  return train_classifier(spec, [&](std::size_t) { return data.c; }, data.s, cfg.civ_lr, cfg, kCiv, "civ");
}

std::vector<double> sample_s_hat(const Network& civ, const Matrix& c, std::uint64_t seed, std::uint64_t draw) {
  const Matrix p = civ.forward(c);
  Rng rng = make_rng(seed, Stream::s_hat, draw);
  std::vector<double> s(p.rows());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = bernoulli(rng, p[i]) ? 1.0 : 0.0;
  return s;
}

StageResult fit_treatment_stage(const CivDataset& data, std::span<const double> s_hat, const TrainConfig& cfg) {
  data.validate();
  cfg.validate();
  if (s_hat.size() != data.size()) throw ShapeError("s_hat length does not match data rows");
  const MlpSpec spec{data.dim() + 1, cfg.hidden_dims, 1, OutputActivation::sigmoid, init_seed(cfg, kTreat)};
  const Matrix fixed = hconcat(Matrix::column(s_hat), data.c);
  return train_classifier(spec, [&](std::size_t) { return fixed; }, data.w, cfg.treat_lr, cfg, kTreat, "treatment");
}

std::vector<double> treat_prob(const Network& treat, std::span<const double> s, const Matrix& c) {
  if (s.size() != c.rows()) throw ShapeError("treat_prob: instrument length does not match C rows");
  return column_of(treat.forward(hconcat(Matrix::column(s), c)));
}

// ---------------------------------------------------------------------------
// Stage 3

ParamSet pack_outcome(const OutcomeNets& nets) {
  ParamSet out;
  auto add = [&](const char* prefix, const ParamSet& p) {
    for (std::size_t i = 0; i < p.count(); ++i) out.add(std::string(prefix) + p.name(i), p[i]);
  };
  add("repr.", nets.repr.params);
  add("head1.", nets.head1.params);
  add("head0.", nets.head0.params);
  return out;
}

void unpack_outcome(const ParamSet& packed, OutcomeNets& nets) {
  const std::size_t total = nets.repr.params.count() + nets.head1.params.count() + nets.head0.params.count();
  if (packed.count() != total) throw ShapeError("packed outcome parameters do not match the networks");
  std::size_t k = 0;
  for (ParamSet* p : {&nets.repr.params, &nets.head1.params, &nets.head0.params})
    for (std::size_t i = 0; i < p->count(); ++i) (*p)[i] = packed[k++];
}

OutcomeNets init_outcome_nets(std::size_t input_dim, const TrainConfig& cfg) {
  OutcomeNets nets;
  nets.repr.spec = {input_dim, cfg.hidden_dims, cfg.repr_dim, OutputActivation::identity, init_seed(cfg, kRepr)};
  nets.head1.spec = {cfg.repr_dim, cfg.hidden_dims, 1, OutputActivation::identity, init_seed(cfg, kHead1)};
  nets.head0.spec = {cfg.repr_dim, cfg.hidden_dims, 1, OutputActivation::identity, init_seed(cfg, kHead0)};
  for (Network* n : {&nets.repr, &nets.head1, &nets.head0}) n->params = mlp_init(n->spec);
  return nets;
}

Var outcome_loss(Tape& tape, std::span<const Var> params, const OutcomeNets& nets, const OutcomeInputs& in,
                 const TrainConfig& cfg, std::vector<std::string>* warnings,
                 std::span<const std::size_t> balance_rows) {
  check_inputs(in);
  const std::size_t nr = nets.repr.params.count();
  const std::size_t n1 = nets.head1.params.count();
  const std::size_t n0 = nets.head0.params.count();
  if (params.size() != nr + n1 + n0) throw ShapeError("outcome_loss: wrong number of parameter variables");
  const auto pr = params.subspan(0, nr);
  const auto p1 = params.subspan(nr, n1);
  const auto p0 = params.subspan(nr + n1, n0);

  const Var z = mlp_forward(pr, nets.repr.spec, tape.constant(in.c));
  const Var f1 = mlp_forward(p1, nets.head1.spec, z);
  const Var f0 = mlp_forward(p0, nets.head0.spec, z);
  const Var p_treat = tape.constant(Matrix::column(in.p_treat));
  // sum_w f_w(z) P(w | s, c) = f0 + (f1 - f0) P(W=1 | s, c)
  const Var pred = ad::add(f0, ad::mul(ad::sub(f1, f0), p_treat));
  Var total = ad::mse(pred, Matrix::column(in.y));

  const double alpha = cfg.effective_alpha();
  const double beta = cfg.effective_beta();
  if (alpha > 0.0 || beta > 0.0) {
    std::vector<std::size_t> rows(balance_rows.begin(), balance_rows.end());
    if (rows.empty()) {
      rows.resize(in.y.size());
      std::iota(rows.begin(), rows.end(), std::size_t{0});
    }
    const Var zs = standardize_cloud(ad::take_rows(z, rows));
    auto balance = [&](double weight, Var prob, const char* label) {
      if (weight == 0.0) return;
      try {
        total = ad::add(total, ad::scale(ipm_term(zs, prob, cfg.sinkhorn), weight));
      } catch (const DegenerateGroupError& e) {
        add_warning(warnings, std::string(label) + " balance term dropped: " + e.what());
      } catch (const ConvergenceError&) {
        // Nearly identical groups: the divergence is ~0 but converges slowly.
        add_warning(warnings, std::string(label) + " balance term skipped on a batch where sinkhorn did not converge");
      }
    };
    balance(alpha, tape.constant(Matrix::column(pick(in.p_treat, rows))), "treatment");
    balance(beta, tape.constant(Matrix::column(pick(in.p_civ, rows))), "instrument");
  }
  if (cfg.l2_lambda > 0.0) {
    total = ad::add(total, l2_penalty(nets.repr.params, pr, cfg.l2_lambda));
    total = ad::add(total, l2_penalty(nets.head1.params, p1, cfg.l2_lambda));
    total = ad::add(total, l2_penalty(nets.head0.params, p0, cfg.l2_lambda));
  }
  return total;
}

OutcomeFit fit_outcome_stage(const OutcomeInputs& train, const OutcomeInputs* val, const TrainConfig& cfg) {
  cfg.validate();
  check_inputs(train);
  if (val != nullptr) check_inputs(*val);
  OutcomeFit fit;
  fit.nets = init_outcome_nets(train.c.cols(), cfg);
  ParamSet params = pack_outcome(fit.nets);
  ParamSet best = params;
  AdamState adam = AdamState::for_params(params, cfg.outcome_lr);
  EarlyStop stop(cfg.patience, cfg.min_delta);
  const std::size_t n = train.y.size();
  OutcomeNets scratch = fit.nets;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs_per_stage; ++epoch) {
    const auto order = shuffled_rows(n, cfg, kRepr, epoch);
    double objective = 0.0;
    for (auto rows : batches(order, cfg.batch_size)) {
      const OutcomeInputs batch = subset(train, rows);
      std::vector<std::size_t> bal;
      if (cfg.balance_rows > 0 && rows.size() > cfg.balance_rows) {
        bal = shuffled_rows(rows.size(), cfg, kHead1, step);
        bal.resize(cfg.balance_rows);
      }
      ++step;
      auto vg = value_and_grad(
          [&](Tape& tape, std::span<const Var> ps) {
            return outcome_loss(tape, ps, fit.nets, batch, cfg, &fit.warnings, bal);
          },
          params, "outcome");
      adam_step(adam, params, vg.grads);
      objective += vg.value * static_cast<double>(rows.size());
    }
    fit.epochs = epoch + 1;
    double monitored = objective / static_cast<double>(n);
    if (val != nullptr) {
      unpack_outcome(params, scratch);
      monitored = mixture_mse(scratch, *val);
    }
    if (!std::isfinite(monitored)) throw NumericError("outcome", "non-finite monitored loss");
    if (stop.update(monitored)) best = params;
    if (stop.done()) break;
  }
  unpack_outcome(best, fit.nets);
  return fit;
}

double estimate_ace(const Network& repr, const Network& head0, const Network& head1, const Matrix& c) {
  if (c.rows() == 0) throw ArgumentError("estimate_ace needs at least one row");
  const Matrix z = repr.forward(c);
  return mean_diff(head1.forward(z).values(), head0.forward(z).values());
}

// ---------------------------------------------------------------------------

namespace {

void fill_diagnostics(const OutcomeNets& nets, const OutcomeInputs& in, const TrainConfig& cfg, Diagnostics& d) {
  d.loss_y = mixture_mse(nets, in);
  const std::size_t n = in.y.size();
  std::vector<std::size_t> rows = shuffled_rows(n, cfg, kHead0, 0);
  if (cfg.diagnostic_rows > 0 && rows.size() > cfg.diagnostic_rows) rows.resize(cfg.diagnostic_rows);
  const OutcomeInputs sub = subset(in, rows);
  const Matrix zs = standardize_cloud(nets.repr.forward(sub.c));
  auto measure = [&](std::span<const double> prob, const char* label) {
    try {
      return ipm_term(zs, prob, cfg.sinkhorn);
    } catch (const Error& e) {
      add_warning(&d.warnings, std::string(label) + " diagnostic divergence unavailable: " + e.what());
      return 0.0;
    }
  };
  d.ipm_w = measure(sub.p_treat, "treatment");
  d.ipm_s = measure(sub.p_civ, "instrument");
}

}  // namespace

RunResult run_cbrl_civ(const CivDataset& train, const TrainConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  train.validate();
  RunResult out;
  ModelBundle& m = out.model;
  Diagnostics& diag = out.estimate.diagnostics;

  m.standardizer = Standardizer::fit(train.c);
  CivDataset data = train;
  data.c = m.standardizer.apply(train.c);

  StageResult civ = fit_civ_stage(data, cfg);
  m.civ = civ.net;
  diag.epochs_civ = civ.epochs;
  const std::vector<double> p_civ = column_of(m.civ.forward(data.c));
  diag.loss_s = bce_value(p_civ, data.s);

  const std::vector<double> s_hat = sample_s_hat(m.civ, data.c, cfg.seed);
  StageResult treat;
  if (cfg.resample_s_hat) {
    const MlpSpec spec{data.dim() + 1, cfg.hidden_dims, 1, OutputActivation::sigmoid, init_seed(cfg, kTreat)};
    treat = train_classifier(
        spec,
        [&](std::size_t epoch) {
          return hconcat(Matrix::column(sample_s_hat(m.civ, data.c, cfg.seed, epoch)), data.c);
        },
        data.w, cfg.treat_lr, cfg, kTreat, "treatment");
  } else {
    treat = fit_treatment_stage(data, s_hat, cfg);
  }
  m.treat = treat.net;
  diag.epochs_treat = treat.epochs;

  const OutcomeInputs inputs{data.c, data.y, treat_prob(m.treat, s_hat, data.c), p_civ};
  diag.loss_w = bce_value(inputs.p_treat, data.w);

  std::optional<OutcomeInputs> val_inputs;
  if (opts.validation != nullptr) {
    opts.validation->validate();
    const Matrix cv = m.standardizer.apply(opts.validation->c);
    const auto sv = sample_s_hat(m.civ, cv, cfg.seed, kValidationDraw);
    val_inputs = OutcomeInputs{cv, opts.validation->y, treat_prob(m.treat, sv, cv), column_of(m.civ.forward(cv))};
  }

  OutcomeFit fit = fit_outcome_stage(inputs, val_inputs ? &*val_inputs : nullptr, cfg);
  m.repr = fit.nets.repr;
  m.head1 = fit.nets.head1;
  m.head0 = fit.nets.head0;
  diag.epochs_outcome = fit.epochs;
  diag.warnings = fit.warnings;
  fill_diagnostics(fit.nets, inputs, cfg, diag);

  out.estimate.ace = estimate_ace(m.repr, m.head0, m.head1, data.c);
  if (train.truth) out.estimate.within_error = std::abs(out.estimate.ace - train.truth->true_ace);
  if (opts.test != nullptr) {
    opts.test->validate();
    out.ace_test = estimate_ace(m.repr, m.head0, m.head1, m.standardizer.apply(opts.test->c));
    if (opts.test->truth) out.estimate.out_error = std::abs(out.ace_test - opts.test->truth->true_ace);
  }
  return out;
}

}  // namespace civb
