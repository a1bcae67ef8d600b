#pragma once

// Distribution balance between probability-weighted representation clouds,
// measured by the debiased entropic optimal-transport (Sinkhorn) divergence.

#include <cstddef>
#include <span>
#include <vector>

#include "civbalance/diffkit.hpp"
#include "civbalance/matrix.hpp"

namespace civb {

// Groups whose total probability mass falls below this are degenerate.
inline constexpr double kMinGroupMass = 1e-8;

struct WeightedCloud {
  Matrix points;                // n_points x dim
  std::vector<double> weights;  // nonnegative, sums to 1

  std::size_t size() const noexcept { return points.rows(); }
  std::size_t dim() const noexcept { return points.cols(); }
  void validate() const;
};

enum class CostKind { squared_euclidean };

struct SinkhornConfig {
  double epsilon = 0.1;
  std::size_t max_iter = 200;
  // Threshold on the L1 marginal violation of the transport plan.
  double stop_tol = 1e-6;
  // Over-relaxation factor for the alternating updates, in (0, 2).
  double relaxation = 1.7;
  CostKind cost = CostKind::squared_euclidean;

  void validate() const;
};

struct CloudPair {
  WeightedCloud group1;  // weights proportional to prob1
  WeightedCloud group0;  // weights proportional to 1 - prob1
};

// Both clouds use every row of Z; only the weights differ.
// Throws DegenerateGroupError if either side has mass < kMinGroupMass.
CloudPair clouds_from_probs(const Matrix& z, std::span<const double> prob1);

// Exact 1-Wasserstein distance between one-dimensional clouds.
double exact_w1_1d(const WeightedCloud& a, const WeightedCloud& b);

struct EntropicOtResult {
  double value = 0.0;
  std::size_t iterations = 0;
  double violation = 0.0;
};

// OT_eps(a, b) = <a, f> + <b, g> at the Sinkhorn fixed point, with squared
// euclidean cost and entropy measured relative to a (x) b.
// Throws ConvergenceError if the marginal violation stays above stop_tol.
EntropicOtResult entropic_ot(const WeightedCloud& a, const WeightedCloud& b, const SinkhornConfig& cfg);

// S_eps(a, b) = OT_eps(a, b) - OT_eps(a, a)/2 - OT_eps(b, b)/2.
double sinkhorn_divergence(const WeightedCloud& a, const WeightedCloud& b, const SinkhornConfig& cfg);

// Tape version. Weights are n x 1 columns. Gradients w.r.t. points and
// weights come from reverse-mode through every recorded Sinkhorn iteration.
Var sinkhorn_divergence(Var points_a, Var weights_a, Var points_b, Var weights_b, const SinkhornConfig& cfg);

// Centers Z and rescales it so the mean squared row norm is 1. The divergence
// is then insensitive to the overall scale of the representation, which keeps
// a fixed epsilon meaningful and removes the shrink-to-zero shortcut.
Var standardize_cloud(Var z);
Matrix standardize_cloud(const Matrix& z);

double ipm_term(const Matrix& z, std::span<const double> prob1, const SinkhornConfig& cfg);
// prob1 is an n x 1 column; differentiable w.r.t. z and prob1.
Var ipm_term(Var z, Var prob1, const SinkhornConfig& cfg);

}  // namespace civb
