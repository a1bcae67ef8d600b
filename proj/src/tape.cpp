#include <algorithm>
#include <cmath>

#include "civbalance/diffkit.hpp"
#include "civbalance/errors.hpp"

namespace civb {

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward) {
  Node node;
  node.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this) throw ArgumentError("variable belongs to a different tape");
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad_buffer(Var target) {
  Node& n = nodes_.at(target.id());
  if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

const Matrix& Tape::grad(Var v) { return grad_buffer(v); }
const Matrix& Tape::grad(std::size_t id) { return grad_buffer(Var(this, id)); }

void Tape::accumulate(Var target, const Matrix& g) {
  if (!nodes_.at(target.id()).requires_grad) return;
  Matrix& buf = grad_buffer(target);
  if (!buf.same_shape(g)) throw ShapeError("gradient shape " + g.shape_str() + " vs " + buf.shape_str());
  auto dst = buf.values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var scalar) {
  if (scalar.tape() != this) throw ArgumentError("variable belongs to a different tape");
  const Matrix& v = value(scalar);
  if (v.rows() != 1 || v.cols() != 1) throw ShapeError("backward target must be 1x1, got " + v.shape_str());
  for (auto& n : nodes_) n.grad = Matrix();
  grad_buffer(scalar)[0] = 1.0;
  for (std::size_t id = scalar.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, id);
  }
}

namespace ad {
namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) throw ArgumentError("variables on different tapes");
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": " + a.shape_str() + " vs " + b.shape_str());
}

template <class F>
Matrix map(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  auto src = a.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = *a.tape();
  return t.record(civb::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a)) tp.accumulate(a, matmul_nt(g, tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, matmul_tn(tp.value(a), g));
  });
}

Var add_bias(Var x, Var bias) {
  check_same_tape(x, bias);
  const Matrix& xv = x.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw ShapeError("add_bias: " + xv.shape_str() + " + " + bv.shape_str());
  }
  Matrix out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv[j];
  }
  return x.tape()->record(std::move(out), {x, bias}, [x, bias](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(x)) tp.accumulate(x, g);
    if (tp.requires_grad(bias)) {
      Matrix gb(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
      tp.accumulate(bias, gb);
    }
  });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  auto bv = b.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix g = tp.grad(self);
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  auto bv = b.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix g = tp.grad(self);
    tp.accumulate(a, g);
    if (tp.requires_grad(b)) tp.accumulate(b, map(g, [](double v) { return -v; }));
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a.value(), b.value(), "mul");
  Matrix out = a.value();
  auto bv = b.value().values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.requires_grad(a)) {
      Matrix ga = g;
      auto bv2 = tp.value(b).values();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv2[i];
      tp.accumulate(a, ga);
    }
    if (tp.requires_grad(b)) {
      Matrix gb = tp.grad(self);
      auto av = tp.value(a).values();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      tp.accumulate(b, gb);
    }
  });
}

Var scale(Var a, double k) {
  return a.tape()->record(map(a.value(), [k](double v) { return k * v; }), {a},
                          [a, k](Tape& tp, std::size_t self) {
                            tp.accumulate(a, map(tp.grad(self), [k](double v) { return k * v; }));
                          });
}

Var add_scalar(Var a, double k) {
  return a.tape()->record(map(a.value(), [k](double v) { return v + k; }), {a},
                          [a](Tape& tp, std::size_t self) {
                            const Matrix g = tp.grad(self);
                            tp.accumulate(a, g);
                          });
}

Var relu(Var a) {
  return a.tape()->record(map(a.value(), [](double v) { return v > 0.0 ? v : 0.0; }), {a},
                          [a](Tape& tp, std::size_t self) {
                            Matrix g = tp.grad(self);
                            auto av = tp.value(a).values();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              if (!(av[i] > 0.0)) g[i] = 0.0;
                            tp.accumulate(a, g);
                          });
}

Var sigmoid(Var a) {
  Matrix out = map(a.value(), [](double v) {
    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    return std::clamp(s, kProbClamp, 1.0 - kProbClamp);
  });
  return a.tape()->record(std::move(out), {a}, [a](Tape& tp, std::size_t self) {
    Matrix g = tp.grad(self);
    auto s = tp.value(self).values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool clamped = s[i] <= kProbClamp || s[i] >= 1.0 - kProbClamp;
      g[i] = clamped ? 0.0 : g[i] * s[i] * (1.0 - s[i]);
    }
    tp.accumulate(a, g);
  });
}

Var square(Var a) {
  return a.tape()->record(map(a.value(), [](double v) { return v * v; }), {a},
                          [a](Tape& tp, std::size_t self) {
                            Matrix g = tp.grad(self);
                            auto av = tp.value(a).values();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 2.0 * av[i];
                            tp.accumulate(a, g);
                          });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape()->record(Matrix(1, 1, s), {a}, [a](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    const Matrix& av = tp.value(a);
    tp.accumulate(a, Matrix(av.rows(), av.cols(), g));
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var concat_cols(Var a, Var b) {
  check_same_tape(a, b);
  return a.tape()->record(hconcat(a.value(), b.value()), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const std::size_t ca = tp.value(a).cols();
    const std::size_t cb = tp.value(b).cols();
    if (tp.requires_grad(a)) {
      Matrix ga(g.rows(), ca);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < ca; ++j) ga(i, j) = g(i, j);
      tp.accumulate(a, ga);
    }
    if (tp.requires_grad(b)) {
      Matrix gb(g.rows(), cb);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < cb; ++j) gb(i, j) = g(i, ca + j);
      tp.accumulate(b, gb);
    }
  });
}

Var take_rows(Var a, std::span<const std::size_t> rows) {
  const Matrix& av = a.value();
  for (std::size_t r : rows)
    if (r >= av.rows()) throw ShapeError("take_rows: row " + std::to_string(r) + " out of range for " + av.shape_str());
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return a.tape()->record(av.take_rows(idx), {a}, [a, idx](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(a)) return;
    const Matrix& g = tp.grad(self);
    Matrix ga(tp.value(a).rows(), g.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(idx[i], j) += g(i, j);
    tp.accumulate(a, ga);
  });
}

Var bce(Var p, const Matrix& target) {
  const Matrix& pv = p.value();
  check_same_shape(pv, target, "bce");
  if (pv.empty()) throw ShapeError("bce of empty matrix");
  const double n = static_cast<double>(pv.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    loss -= target[i] * std::log(pv[i]) + (1.0 - target[i]) * std::log(1.0 - pv[i]);
  }
  return p.tape()->record(Matrix(1, 1, loss / n), {p}, [p, target, n](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    const Matrix& pv2 = tp.value(p);
    Matrix gp(pv2.rows(), pv2.cols());
    for (std::size_t i = 0; i < gp.size(); ++i) {
      gp[i] = g * (-target[i] / pv2[i] + (1.0 - target[i]) / (1.0 - pv2[i])) / n;
    }
    tp.accumulate(p, gp);
  });
}

Var mse(Var pred, const Matrix& target) {
  const Matrix& pv = pred.value();
  check_same_shape(pv, target, "mse");
  if (pv.empty()) throw ShapeError("mse of empty matrix");
  const double n = static_cast<double>(pv.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double r = target[i] - pv[i];
    loss += r * r;
  }
  return pred.tape()->record(Matrix(1, 1, loss / n), {pred}, [pred, target, n](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    const Matrix& pv2 = tp.value(pred);
    Matrix gp(pv2.rows(), pv2.cols());
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] = -2.0 * g * (target[i] - pv2[i]) / n;
    tp.accumulate(pred, gp);
  });
}

}  // namespace ad
}  // namespace civb
