#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <utility>

#include "civbalance/balance.hpp"
#include "civbalance/errors.hpp"

namespace civb {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Below this a factorized row sum is recomputed entry by entry in log space.
constexpr double kTinySum = 1e-250;
// exp(x_i) * exp(y_j) is only safe while the balanced exponents stay small.
constexpr double kMaxFactorExponent = 600.0;
// Iterations before a growing violation disables over-relaxation.
constexpr std::size_t kRelaxGrace = 30;

Matrix squared_cost(const Matrix& x, const Matrix& y) {
  if (x.cols() != y.cols()) throw ShapeError("cloud dims differ: " + x.shape_str() + " vs " + y.shape_str());
  Matrix c(x.rows(), y.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* xi = x.row(i).data();
    for (std::size_t j = 0; j < y.rows(); ++j) {
      const double* yj = y.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < x.cols(); ++k) {
        const double d = xi[k] - yj[k];
        s += d * d;
      }
      c(i, j) = s;
    }
  }
  return c;
}

// Cost, its transpose, and the Gibbs kernels exp(-C/eps) for one point pair.
struct Geometry {
  Matrix cost;
  Matrix cost_t;
  Matrix kernel;
  Matrix kernel_t;
};

std::shared_ptr<const Geometry> make_geometry(const Matrix& x, const Matrix& y, double eps) {
  auto g = std::make_shared<Geometry>();
  g->cost = squared_cost(x, y);
  g->cost_t = transpose(g->cost);
  g->kernel = Matrix(g->cost.rows(), g->cost.cols());
  for (std::size_t i = 0; i < g->cost.size(); ++i) g->kernel[i] = std::exp(-g->cost[i] / eps);
  g->kernel_t = transpose(g->kernel);
  return g;
}

std::vector<double> safe_log(std::span<const double> w) {
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] > 0.0 ? std::log(w[i]) : kNegInf;
  return out;
}

// out_i = -eps * log sum_j w_j exp((pot_j - C_ij) / eps)
// `kernel` may be null, in which case every entry is evaluated in log space.
void softmin(const Matrix* kernel, const Matrix& cost, std::span<const double> log_w,
             std::span<const double> pot, double eps, std::span<double> out) {
  const std::size_t cols = cost.cols();
  std::vector<double> h(cols);
  double m = kNegInf;
  for (std::size_t j = 0; j < cols; ++j) {
    h[j] = log_w[j] == kNegInf ? kNegInf : log_w[j] + pot[j] / eps;
    m = std::max(m, h[j]);
  }
  std::vector<double> e(cols);
  for (std::size_t j = 0; j < cols; ++j) e[j] = h[j] == kNegInf ? 0.0 : std::exp(h[j] - m);
  for (std::size_t i = 0; i < cost.rows(); ++i) {
    double s = 0.0;
    if (kernel != nullptr) {
      const double* k = kernel->row(i).data();
      for (std::size_t j = 0; j < cols; ++j) s += k[j] * e[j];
    }
    if (s > kTinySum) {
      out[i] = -eps * (m + std::log(s));
      continue;
    }
    const double* c = cost.row(i).data();
    double mi = kNegInf;
    for (std::size_t j = 0; j < cols; ++j)
      if (h[j] != kNegInf) mi = std::max(mi, h[j] - c[j] / eps);
    double si = 0.0;
    for (std::size_t j = 0; j < cols; ++j)
      if (h[j] != kNegInf) si += std::exp(h[j] - c[j] / eps - mi);
    out[i] = -eps * (mi + std::log(si));
  }
}

// Q_ij = exp((f_i + g_j - C_ij) / eps): the plan density relative to a (x) b.
Matrix plan_density(const Geometry& geo, std::span<const double> f, std::span<const double> g, double eps,
                    bool use_kernel) {
  const std::size_t n = f.size();
  const std::size_t m = g.size();
  Matrix q(n, m);
  double mf = kNegInf;
  double mg = kNegInf;
  for (double v : f) mf = std::max(mf, v / eps);
  for (double v : g) mg = std::max(mg, v / eps);
  if (use_kernel && mf + mg <= kMaxFactorExponent) {
    const double shift = 0.5 * (mf - mg);
    std::vector<double> alpha(n);
    std::vector<double> beta(m);
    for (std::size_t i = 0; i < n; ++i) alpha[i] = std::exp(f[i] / eps - shift);
    for (std::size_t j = 0; j < m; ++j) beta[j] = std::exp(g[j] / eps + shift);
    for (std::size_t i = 0; i < n; ++i) {
      const double* k = geo.kernel.row(i).data();
      double* qi = q.row(i).data();
      for (std::size_t j = 0; j < m; ++j) qi[j] = k[j] * alpha[i] * beta[j];
    }
    return q;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double* c = geo.cost.row(i).data();
    double* qi = q.row(i).data();
    for (std::size_t j = 0; j < m; ++j) qi[j] = std::exp((f[i] + g[j] - c[j]) / eps);
  }
  return q;
}

struct OtProblem {
  std::shared_ptr<const Geometry> geo;
  std::vector<double> a;
  std::vector<double> b;
  double eps = 0.1;
  // a == b on a symmetric cost: solved with the symmetric averaged update.
  bool self = false;
};

// One iteration of the cross solver, everything needed to reverse it:
//   fg = F(g_prev), f = (1-w) f_prev + w fg, gf = G(f), g = (1-w) g_prev + w gf
// For the self solver only fg (= F(f_prev)) and f = (f_prev + fg)/2 are used.
struct IterRecord {
  std::vector<double> fg, f, gf, g;
  double relax = 1.0;
};

struct OtSolve {
  double value = 0.0;
  double violation = 0.0;
  std::size_t iterations = 0;
  std::vector<IterRecord> iters;  // potentials before the first iteration are 0
};

double weighted_sum(std::span<const double> w, std::span<const double> v) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] > 0.0) s += w[i] * v[i];
  return s;
}

// sum_i w_i |exp((p_i - q_i)/eps) - 1|: L1 error of one plan marginal.
double marginal_error(std::span<const double> w, std::span<const double> p, std::span<const double> q, double eps) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] > 0.0) s += w[i] * std::abs(std::exp((p[i] - q[i]) / eps) - 1.0);
  return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
}

[[noreturn]] void throw_no_convergence(std::size_t max_iter, double violation) {
  throw ConvergenceError(violation, "sinkhorn did not converge after " + std::to_string(max_iter) +
                                        " iterations (marginal violation " + std::to_string(violation) + ")");
}

// f <- (f + F(f)) / 2 with F(f)_i = -eps log sum_j a_j exp((f_j - C_ij)/eps).
// Converges in a handful of iterations where alternating updates crawl.
OtSolve solve_self(const OtProblem& p, const SinkhornConfig& cfg, bool keep_history) {
  const Geometry& geo = *p.geo;
  const double eps = p.eps;
  const auto log_a = safe_log(p.a);
  const std::size_t n = p.a.size();
  std::vector<double> f(n, 0.0), fg(n), f_next(n);
  softmin(&geo.kernel, geo.cost, log_a, f, eps, fg);
  OtSolve out;
  for (std::size_t t = 1;; ++t) {
    for (std::size_t i = 0; i < n; ++i) f_next[i] = t == 1 ? fg[i] : 0.5 * (f[i] + fg[i]);
    if (keep_history) out.iters.push_back({fg, f_next, {}, {}, 0.5});
    std::swap(f, f_next);
    softmin(&geo.kernel, geo.cost, log_a, f, eps, fg);
    out.iterations = t;
    out.violation = marginal_error(p.a, f, fg, eps);
    if (out.violation < cfg.stop_tol) break;
    if (t == cfg.max_iter) throw_no_convergence(cfg.max_iter, out.violation);
  }
  out.value = 2.0 * weighted_sum(p.a, f);
  if (!std::isfinite(out.value)) throw NumericError("sinkhorn", "non-finite transport cost");
  return out;
}

// Alternating updates with over-relaxation. If the violation blows up after
// the first few iterations, the rest of the solve is plain Sinkhorn.
OtSolve solve_cross(const OtProblem& p, const SinkhornConfig& cfg, bool keep_history) {
  const Geometry& geo = *p.geo;
  const double eps = p.eps;
  const std::size_t n = p.a.size();
  const std::size_t m = p.b.size();
  const auto log_a = safe_log(p.a);
  const auto log_b = safe_log(p.b);
  std::vector<double> f(n, 0.0), g(m, 0.0), fg(n), gf(m);
  softmin(&geo.kernel, geo.cost, log_b, g, eps, fg);
  OtSolve out;
  double relax = cfg.relaxation;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t t = 1;; ++t) {
    const double w = t == 1 ? 1.0 : relax;
    for (std::size_t i = 0; i < n; ++i) f[i] = (1.0 - w) * f[i] + w * fg[i];
    softmin(&geo.kernel_t, geo.cost_t, log_a, f, eps, gf);
    for (std::size_t j = 0; j < m; ++j) g[j] = (1.0 - w) * g[j] + w * gf[j];
    if (keep_history) out.iters.push_back({fg, f, gf, g, w});
    softmin(&geo.kernel, geo.cost, log_b, g, eps, fg);
    out.iterations = t;
    out.violation = marginal_error(p.a, f, fg, eps) + marginal_error(p.b, g, gf, eps);
    if (out.violation < cfg.stop_tol) break;
    if (t == cfg.max_iter) throw_no_convergence(cfg.max_iter, out.violation);
    // Early iterations are allowed to overshoot; a late blow-up is not.
    if (t > kRelaxGrace && out.violation > 10.0 * best) relax = 1.0;
    best = std::min(best, out.violation);
  }
  out.value = weighted_sum(p.a, f) + weighted_sum(p.b, g);
  if (!std::isfinite(out.value)) throw NumericError("sinkhorn", "non-finite transport cost");
  return out;
}

OtSolve solve_ot(const OtProblem& p, const SinkhornConfig& cfg, bool keep_history) {
  return p.self ? solve_self(p, cfg, keep_history) : solve_cross(p, cfg, keep_history);
}

// Reverse of out_i = -eps log sum_j w_j exp((pot_j - C_ij)/eps) given out_bar.
// R_ij = exp((out_i + pot_j - C_ij)/eps), so d out_i/d pot_j = -w_j R_ij,
// d out_i/d w_j = -eps R_ij and d out_i/d C_ij = w_j R_ij.
// With `transposed` the output runs over columns of C instead of rows.
void softmin_backward(const Geometry& geo, bool transposed, std::span<const double> out,
                      std::span<const double> pot, std::span<const double> w, std::span<const double> out_bar,
                      double eps, std::vector<double>* pot_bar, std::vector<double>& w_bar, Matrix& cost_bar) {
  const Matrix q = transposed ? plan_density(geo, pot, out, eps, true) : plan_density(geo, out, pot, eps, true);
  const std::size_t rows = q.rows();
  const std::size_t cols = q.cols();
  if (!transposed) {
    std::vector<double> acc(cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      const double ob = out_bar[i];
      if (ob == 0.0) continue;
      const double* qi = q.row(i).data();
      double* cb = cost_bar.row(i).data();
      for (std::size_t j = 0; j < cols; ++j) {
        const double v = qi[j] * ob;
        acc[j] += v;
        cb[j] += w[j] * v;
      }
    }
    for (std::size_t j = 0; j < cols; ++j) {
      if (pot_bar != nullptr) (*pot_bar)[j] -= w[j] * acc[j];
      w_bar[j] -= eps * acc[j];
    }
    return;
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const double* qi = q.row(i).data();
    double* cb = cost_bar.row(i).data();
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = qi[j] * out_bar[j];
      acc += v;
      cb[j] += w[i] * v;
    }
    if (pot_bar != nullptr) (*pot_bar)[i] -= w[i] * acc;
    w_bar[i] -= eps * acc;
  }
}

// Adds coef * d(value)/d(cost, a, b) by reversing every recorded iteration.
void ot_backward(const OtProblem& p, const OtSolve& s, double coef, Matrix& cost_bar, std::vector<double>& a_bar,
                 std::vector<double>& b_bar) {
  const Geometry& geo = *p.geo;
  const double eps = p.eps;
  const std::size_t n = p.a.size();
  const std::size_t m = p.b.size();
  const std::size_t steps = s.iters.size();

  if (p.self) {
    // value = 2 <a, f_T>; a enters both as output weight and inside F.
    // The weight gradient is split evenly between the two (equal) sides.
    std::vector<double> f_bar(n), h_bar(n), w_bar(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      f_bar[i] = 2.0 * coef * p.a[i];
      w_bar[i] = 2.0 * coef * s.iters.back().f[i];
    }
    const std::vector<double> zero(n, 0.0);
    for (std::size_t t = steps; t-- > 0;) {
      const IterRecord& it = s.iters[t];
      const double keep = t == 0 ? 0.0 : 0.5;
      for (std::size_t i = 0; i < n; ++i) {
        h_bar[i] = (1.0 - keep) * f_bar[i];
        f_bar[i] *= keep;
      }
      const auto& f_prev = t == 0 ? zero : s.iters[t - 1].f;
      softmin_backward(geo, false, it.fg, f_prev, p.a, h_bar, eps, t == 0 ? nullptr : &f_bar, w_bar, cost_bar);
    }
    for (std::size_t i = 0; i < n; ++i) {
      a_bar[i] += 0.5 * w_bar[i];
      b_bar[i] += 0.5 * w_bar[i];
    }
    return;
  }

  std::vector<double> f_bar(n), g_bar(m), out_bar_n(n), out_bar_m(m);
  for (std::size_t i = 0; i < n; ++i) {
    f_bar[i] = coef * p.a[i];
    a_bar[i] += coef * s.iters.back().f[i];
  }
  for (std::size_t j = 0; j < m; ++j) {
    g_bar[j] = coef * p.b[j];
    b_bar[j] += coef * s.iters.back().g[j];
  }
  const std::vector<double> g_zero(m, 0.0);
  for (std::size_t t = steps; t-- > 0;) {
    const IterRecord& it = s.iters[t];
    const double w = it.relax;
    // g = (1-w) g_prev + w G(f)
    for (std::size_t j = 0; j < m; ++j) {
      out_bar_m[j] = w * g_bar[j];
      g_bar[j] *= 1.0 - w;
    }
    softmin_backward(geo, true, it.gf, it.f, p.a, out_bar_m, eps, &f_bar, a_bar, cost_bar);
    // f = (1-w) f_prev + w F(g_prev)
    for (std::size_t i = 0; i < n; ++i) {
      out_bar_n[i] = w * f_bar[i];
      f_bar[i] *= 1.0 - w;
    }
    const auto& g_prev = t == 0 ? g_zero : s.iters[t - 1].g;
    softmin_backward(geo, false, it.fg, g_prev, p.b, out_bar_n, eps, t == 0 ? nullptr : &g_bar, b_bar, cost_bar);
  }
}

// d/dx, d/dy of C_ij = |x_i - y_j|^2 contracted with cost_bar.
void cost_backward(const Matrix& x, const Matrix& y, const Matrix& cost_bar, Matrix& x_bar, Matrix& y_bar) {
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* cb = cost_bar.row(i).data();
    const double* xi = x.row(i).data();
    double* xb = x_bar.row(i).data();
    for (std::size_t j = 0; j < y.rows(); ++j) {
      const double w = 2.0 * cb[j];
      if (w == 0.0) continue;
      const double* yj = y.row(j).data();
      double* yb = y_bar.row(j).data();
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = w * (xi[k] - yj[k]);
        xb[k] += diff;
        yb[k] -= diff;
      }
    }
  }
}

void check_weights(std::span<const double> w, std::size_t expected, const char* side) {
  if (w.size() != expected) throw ShapeError(std::string("cloud ") + side + ": weight count does not match points");
  double total = 0.0;
  bool positive = false;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ArgumentError(std::string("cloud ") + side + ": negative or non-finite weight");
    positive = positive || v > 0.0;
    total += v;
  }
  if (!positive) throw DegenerateGroupError(std::string("cloud ") + side + " has no positive weight");
  if (std::abs(total - 1.0) > 1e-9) throw ArgumentError(std::string("cloud ") + side + ": weights do not sum to 1");
}

struct Divergence {
  double value = 0.0;
  std::shared_ptr<const Geometry> geo_ab, geo_aa, geo_bb;
  OtProblem ab, aa, bb;
  OtSolve s_ab, s_aa, s_bb;
};

Divergence compute_divergence(const Matrix& xa, std::span<const double> wa, const Matrix& xb,
                              std::span<const double> wb, const SinkhornConfig& cfg, bool shared_points,
                              bool keep_history) {
  cfg.validate();
  check_weights(wa, xa.rows(), "a");
  check_weights(wb, xb.rows(), "b");
  if (xa.cols() != xb.cols()) throw ShapeError("cloud dims differ: " + xa.shape_str() + " vs " + xb.shape_str());
  Divergence d;
  const double eps = cfg.epsilon;
  d.geo_ab = make_geometry(xa, xb, eps);
  d.geo_aa = shared_points ? d.geo_ab : make_geometry(xa, xa, eps);
  d.geo_bb = shared_points ? d.geo_ab : make_geometry(xb, xb, eps);
  std::vector<double> a(wa.begin(), wa.end());
  std::vector<double> b(wb.begin(), wb.end());
  d.ab = OtProblem{d.geo_ab, a, b, eps};
  d.aa = OtProblem{d.geo_aa, a, a, eps, true};
  d.bb = OtProblem{d.geo_bb, b, b, eps, true};
  // Identical measures make the alternating solver crawl; the symmetric one
  // solves the same problem.
  d.ab.self = std::ranges::equal(wa, wb) && (shared_points || xa == xb);
  d.s_ab = solve_ot(d.ab, cfg, keep_history);
  d.s_aa = solve_ot(d.aa, cfg, keep_history);
  d.s_bb = solve_ot(d.bb, cfg, keep_history);
  d.value = d.s_ab.value - 0.5 * d.s_aa.value - 0.5 * d.s_bb.value;
  return d;
}

// w / sum(w) on a column variable.
Var normalize_column(Var w) {
  const Matrix& wv = w.value();
  double total = 0.0;
  for (double v : wv.values()) total += v;
  Matrix out = wv;
  for (double& v : out.values()) v /= total;
  return w.tape()->record(std::move(out), {w}, [w, total](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& y = tp.value(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
    Matrix gw(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) gw[i] = (g[i] - dot) / total;
    tp.accumulate(w, gw);
  });
}

void check_probs(std::span<const double> prob1) {
  double mass1 = 0.0;
  double mass0 = 0.0;
  for (double p : prob1) {
    if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("group probabilities must lie in [0, 1]");
    mass1 += p;
    mass0 += 1.0 - p;
  }
  if (mass1 < kMinGroupMass || mass0 < kMinGroupMass) {
    throw DegenerateGroupError("balance group has total probability mass below 1e-8");
  }
}

}  // namespace

void WeightedCloud::validate() const { check_weights(weights, points.rows(), "cloud"); }

void SinkhornConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("sinkhorn epsilon must be > 0");
  if (max_iter < 1) throw ConfigError("sinkhorn max_iter must be >= 1");
  if (!(stop_tol > 0.0)) throw ConfigError("sinkhorn stop_tol must be > 0");
  if (!(relaxation > 0.0 && relaxation < 2.0)) throw ConfigError("sinkhorn relaxation must be in (0, 2)");
}

CloudPair clouds_from_probs(const Matrix& z, std::span<const double> prob1) {
  if (z.rows() != prob1.size()) throw ShapeError("clouds_from_probs: Z rows do not match probabilities");
  check_probs(prob1);
  CloudPair out{{z, std::vector<double>(prob1.size())}, {z, std::vector<double>(prob1.size())}};
  double mass1 = 0.0;
  double mass0 = 0.0;
  for (double p : prob1) {
    mass1 += p;
    mass0 += 1.0 - p;
  }
  for (std::size_t i = 0; i < prob1.size(); ++i) {
    out.group1.weights[i] = prob1[i] / mass1;
    out.group0.weights[i] = (1.0 - prob1[i]) / mass0;
  }
  return out;
}

double exact_w1_1d(const WeightedCloud& a, const WeightedCloud& b) {
  a.validate();
  b.validate();
  if (a.dim() != 1 || b.dim() != 1) throw ShapeError("exact_w1_1d requires one-dimensional clouds");
  struct Atom {
    double x;
    double da;  // signed mass: +a, -b
  };
  std::vector<Atom> atoms;
  atoms.reserve(a.size() + b.size());
  for (std::size_t i = 0; i < a.size(); ++i) atoms.push_back({a.points[i], a.weights[i]});
  for (std::size_t j = 0; j < b.size(); ++j) atoms.push_back({b.points[j], -b.weights[j]});
  std::sort(atoms.begin(), atoms.end(), [](const Atom& l, const Atom& r) { return l.x < r.x; });
  // W1 = integral of |F_a - F_b|.
  double cdf_gap = 0.0;
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < atoms.size(); ++k) {
    cdf_gap += atoms[k].da;
    total += std::abs(cdf_gap) * (atoms[k + 1].x - atoms[k].x);
  }
  return total;
}

EntropicOtResult entropic_ot(const WeightedCloud& a, const WeightedCloud& b, const SinkhornConfig& cfg) {
  cfg.validate();
  a.validate();
  b.validate();
  OtProblem p{make_geometry(a.points, b.points, cfg.epsilon), a.weights, b.weights, cfg.epsilon};
  OtSolve s = solve_ot(p, cfg, true);
  return {s.value, s.iterations, s.violation};
}

double sinkhorn_divergence(const WeightedCloud& a, const WeightedCloud& b, const SinkhornConfig& cfg) {
  return compute_divergence(a.points, a.weights, b.points, b.weights, cfg, false, false).value;
}

Var sinkhorn_divergence(Var points_a, Var weights_a, Var points_b, Var weights_b, const SinkhornConfig& cfg) {
  Tape* tape = points_a.tape();
  for (Var v : {weights_a, points_b, weights_b}) {
    if (v.tape() != tape) throw ArgumentError("sinkhorn_divergence: variables on different tapes");
  }
  if (weights_a.value().cols() != 1 || weights_b.value().cols() != 1) {
    throw ShapeError("sinkhorn_divergence: weights must be column vectors");
  }
  const bool shared = points_a.id() == points_b.id();
  auto div = std::make_shared<Divergence>(compute_divergence(points_a.value(), weights_a.value().values(),
                                                             points_b.value(), weights_b.value().values(), cfg,
                                                             shared, tape->requires_grad(points_a) ||
                                                                         tape->requires_grad(points_b) ||
                                                                         tape->requires_grad(weights_a) ||
                                                                         tape->requires_grad(weights_b)));
  const double value = div->value;
  return tape->record(Matrix(1, 1, value), {points_a, weights_a, points_b, weights_b},
                      [div, points_a, weights_a, points_b, weights_b](Tape& tp, std::size_t self) {
                        const double g = tp.grad(self)[0];
                        const Matrix& xa = tp.value(points_a);
                        const Matrix& xb = tp.value(points_b);
                        const std::size_t n = xa.rows();
                        const std::size_t m = xb.rows();
                        std::vector<double> a_bar(n), b_bar(m), dummy_a(n), dummy_b(m);
                        Matrix xa_bar(n, xa.cols());
                        Matrix xb_bar(m, xb.cols());
                        if (div->geo_aa == div->geo_ab) {
                          // Shared points: one cost matrix collects all three terms.
                          Matrix cost_bar(n, m);
                          ot_backward(div->ab, div->s_ab, g, cost_bar, a_bar, b_bar);
                          std::vector<double> aa_bar1(n), aa_bar2(n), bb_bar1(m), bb_bar2(m);
                          ot_backward(div->aa, div->s_aa, -0.5 * g, cost_bar, aa_bar1, aa_bar2);
                          ot_backward(div->bb, div->s_bb, -0.5 * g, cost_bar, bb_bar1, bb_bar2);
                          for (std::size_t i = 0; i < n; ++i) a_bar[i] += aa_bar1[i] + aa_bar2[i];
                          for (std::size_t j = 0; j < m; ++j) b_bar[j] += bb_bar1[j] + bb_bar2[j];
                          cost_backward(xa, xb, cost_bar, xa_bar, xb_bar);
                        } else {
                          Matrix cb_ab(n, m), cb_aa(n, n), cb_bb(m, m);
                          ot_backward(div->ab, div->s_ab, g, cb_ab, a_bar, b_bar);
                          std::vector<double> aa_bar1(n), aa_bar2(n), bb_bar1(m), bb_bar2(m);
                          ot_backward(div->aa, div->s_aa, -0.5 * g, cb_aa, aa_bar1, aa_bar2);
                          ot_backward(div->bb, div->s_bb, -0.5 * g, cb_bb, bb_bar1, bb_bar2);
                          for (std::size_t i = 0; i < n; ++i) a_bar[i] += aa_bar1[i] + aa_bar2[i];
                          for (std::size_t j = 0; j < m; ++j) b_bar[j] += bb_bar1[j] + bb_bar2[j];
                          cost_backward(xa, xb, cb_ab, xa_bar, xb_bar);
                          cost_backward(xa, xa, cb_aa, xa_bar, xa_bar);
                          cost_backward(xb, xb, cb_bb, xb_bar, xb_bar);
                        }
                        tp.accumulate(points_a, xa_bar);
                        tp.accumulate(points_b, xb_bar);
                        tp.accumulate(weights_a, Matrix(n, 1, std::move(a_bar)));
                        tp.accumulate(weights_b, Matrix(m, 1, std::move(b_bar)));
                      });
}

namespace {

constexpr double kScaleFloor = 1e-12;

// Returns the centered matrix and its rms row norm.
std::pair<Matrix, double> center(const Matrix& z) {
  if (z.rows() == 0) throw ShapeError("standardize_cloud: empty point set");
  const double n = static_cast<double>(z.rows());
  Matrix u = z;
  for (std::size_t k = 0; k < z.cols(); ++k) {
    double m = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) m += z(i, k);
    m /= n;
    for (std::size_t i = 0; i < z.rows(); ++i) u(i, k) -= m;
  }
  double v = 0.0;
  for (double x : u.values()) v += x * x;
  return {std::move(u), std::sqrt(v / n + kScaleFloor)};
}

}  // namespace

Matrix standardize_cloud(const Matrix& z) {
  auto [u, s] = center(z);
  for (double& x : u.values()) x /= s;
  return u;
}

Var standardize_cloud(Var z) {
  auto [u, s] = center(z.value());
  Matrix y = u;
  for (double& x : y.values()) x /= s;
  return z.tape()->record(std::move(y), {z}, [z, u = std::move(u), s](Tape& tp, std::size_t self) {
    // y = u / s with s^2 = mean ||u_i||^2 + floor and u = z - colmean(z).
    const Matrix& g = tp.grad(self);
    const double n = static_cast<double>(u.rows());
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * u[i];
    const double k = dot / (n * s * s * s);
    Matrix ub(u.rows(), u.cols());
    for (std::size_t i = 0; i < g.size(); ++i) ub[i] = g[i] / s - k * u[i];
    for (std::size_t c = 0; c < ub.cols(); ++c) {
      double m = 0.0;
      for (std::size_t r = 0; r < ub.rows(); ++r) m += ub(r, c);
      m /= n;
      for (std::size_t r = 0; r < ub.rows(); ++r) ub(r, c) -= m;
    }
    tp.accumulate(z, ub);
  });
}

double ipm_term(const Matrix& z, std::span<const double> prob1, const SinkhornConfig& cfg) {
  const CloudPair clouds = clouds_from_probs(z, prob1);
  return compute_divergence(z, clouds.group0.weights, z, clouds.group1.weights, cfg, true, false).value;
}

Var ipm_term(Var z, Var prob1, const SinkhornConfig& cfg) {
  const Matrix& p = prob1.value();
  if (p.cols() != 1 || p.rows() != z.value().rows()) {
    throw ShapeError("ipm_term: prob1 must be a column matching Z rows");
  }
  check_probs(p.values());
  Var w1 = normalize_column(prob1);
  Var w0 = normalize_column(ad::add_scalar(ad::scale(prob1, -1.0), 1.0));
  return sinkhorn_divergence(z, w0, z, w1, cfg);
}

}  // namespace civb
