#pragma once

// Exact transport oracles for one-dimensional clouds, used only by tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "civbalance/balance.hpp"

namespace civb::testing {

struct Atom {
  double x;
  double w;
};

inline std::vector<Atom> sorted_atoms(const WeightedCloud& c) {
  std::vector<Atom> atoms;
  for (std::size_t i = 0; i < c.size(); ++i) atoms.push_back({c.points[i], c.weights[i]});
  std::sort(atoms.begin(), atoms.end(), [](const Atom& l, const Atom& r) { return l.x < r.x; });
  return atoms;
}

// Monotone (north-west corner) coupling of sorted atoms, which is optimal in
// 1-D for every convex cost. Returns sum of pi_ij * |x_i - y_j|^order.
inline double monotone_coupling_cost(const WeightedCloud& a, const WeightedCloud& b, double order) {
  auto xa = sorted_atoms(a);
  auto xb = sorted_atoms(b);
  std::size_t i = 0;
  std::size_t j = 0;
  double ra = xa.empty() ? 0.0 : xa[0].w;
  double rb = xb.empty() ? 0.0 : xb[0].w;
  double total = 0.0;
  while (i < xa.size() && j < xb.size()) {
    const double m = std::min(ra, rb);
    total += m * std::pow(std::abs(xa[i].x - xb[j].x), order);
    ra -= m;
    rb -= m;
    if (ra <= 1e-15) {
      if (++i < xa.size()) ra = xa[i].w;
    }
    if (rb <= 1e-15) {
      if (++j < xb.size()) rb = xb[j].w;
    }
  }
  return total;
}

inline double brute_force_w1(const WeightedCloud& a, const WeightedCloud& b) {
  return monotone_coupling_cost(a, b, 1.0);
}

inline double exact_w2_squared_1d(const WeightedCloud& a, const WeightedCloud& b) {
  return monotone_coupling_cost(a, b, 2.0);
}

}  // namespace civb::testing
