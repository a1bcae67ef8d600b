#pragma once

// Reverse-mode differentiation over dense matrices, small MLPs, and the
// SGD/Adam optimizers used by the three training stages.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "civbalance/matrix.hpp"

namespace civb {

inline constexpr double kProbClamp = 1e-6;

// ---------------------------------------------------------------------------
// Parameters

class ParamSet {
 public:
  void add(std::string name, Matrix value);

  std::size_t count() const noexcept { return tensors_.size(); }
  std::size_t total_size() const noexcept;

  const std::string& name(std::size_t i) const { return names_.at(i); }
  Matrix& operator[](std::size_t i) { return tensors_.at(i); }
  const Matrix& operator[](std::size_t i) const { return tensors_.at(i); }
  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);
  bool contains(const std::string& name) const noexcept;

  // Concatenation of all tensors in insertion order.
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

  // Same names and shapes, all zeros.
  ParamSet zeros_like() const;
  bool same_layout(const ParamSet& other) const noexcept;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> tensors_;
};

// Weight tensors are the ones named "*.weight"; biases are excluded from l2.
bool is_weight_name(const std::string& name) noexcept;

// ---------------------------------------------------------------------------
// Tape

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  const Matrix& value() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Reads the node's output gradient and accumulates into its inputs' grads.
  using Backward = std::function<void(Tape&, std::size_t node)>;

  Var constant(Matrix value);
  Var variable(Matrix value);
  // Records an operation whose value has already been computed. Parents are
  // only used for requires-grad propagation; `backward` does the accumulation.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var record(Matrix value, std::span<const Var> parents, Backward backward);

  const Matrix& value(Var v) const { return nodes_.at(v.id()).value; }
  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  // Gradient of the last backward() target w.r.t. this node (zeros if unused).
  const Matrix& grad(Var v);
  const Matrix& grad(std::size_t id);
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  // Accumulates `g` into the gradient buffer of `target`. Used by backward fns.
  void accumulate(Var target, const Matrix& g);
  Matrix& grad_buffer(Var target);

  // Seeds d(out)/d(out) = 1 for a 1x1 node and runs the reverse sweep.
  void backward(Var scalar);

  std::size_t size() const noexcept { return nodes_.size(); }
  std::vector<std::size_t> input_ids(std::size_t node) const { return nodes_.at(node).parents; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitive operations. All shapes are checked; mismatches throw ShapeError.

namespace ad {

Var matmul(Var a, Var b);
// x (n x k) + bias (1 x k) broadcast over rows.
Var add_bias(Var x, Var bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double k);
Var add_scalar(Var a, double k);
Var relu(Var a);
// Logistic sigmoid with outputs clamped to [kProbClamp, 1 - kProbClamp].
// Clamped entries pass zero gradient.
Var sigmoid(Var a);
Var square(Var a);
Var sum(Var a);   // 1x1
Var mean(Var a);  // 1x1
Var concat_cols(Var a, Var b);
// Rows of `a` in the given order; repeated rows accumulate their gradients.
Var take_rows(Var a, std::span<const std::size_t> rows);
// Mean binary cross-entropy -(1/n) sum[t log p + (1-t) log(1-p)] for p in (0,1).
Var bce(Var p, const Matrix& target);
// Mean squared error (1/n) sum (t - pred)^2.
Var mse(Var pred, const Matrix& target);

}  // namespace ad

// ---------------------------------------------------------------------------
// MLP

enum class OutputActivation { identity, sigmoid };

struct MlpSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 1;
  OutputActivation output_activation = OutputActivation::identity;
  std::uint64_t init_seed = 0;

  void validate() const;
  std::size_t param_count() const;
  std::size_t layer_count() const noexcept { return hidden_dims.size() + 1; }
};

// Glorot-uniform weights U(-sqrt(6/(fan_in+fan_out)), +...), zero biases.
// Tensors are named layer{k}.weight (fan_in x fan_out) and layer{k}.bias (1 x fan_out).
ParamSet mlp_init(const MlpSpec& spec);

// Hidden layers use ReLU. `params` are tape variables in ParamSet order.
Var mlp_forward(std::span<const Var> params, const MlpSpec& spec, Var x);
Matrix mlp_forward(const ParamSet& params, const MlpSpec& spec, const Matrix& x);

// Pushes every tensor of `params` onto the tape as a variable.
std::vector<Var> register_params(Tape& tape, const ParamSet& params);
// Pushes every tensor as a constant (frozen network).
std::vector<Var> register_constants(Tape& tape, const ParamSet& params);

// ---------------------------------------------------------------------------
// Losses and optimizers

// lambda * sum of squared weight entries (biases excluded).
double l2_penalty(const ParamSet& params, double lambda);
Var l2_penalty(const ParamSet& layout, std::span<const Var> params, double lambda);

using LossFn = std::function<Var(Tape&, std::span<const Var>)>;

struct ValueAndGrad {
  double value = 0.0;
  ParamSet grads;
};

// Evaluates `loss_fn` on a fresh tape and returns the loss with exact
// reverse-mode gradients for every tensor. Throws NumericError(stage) when
// the loss or any gradient is non-finite.
ValueAndGrad value_and_grad(const LossFn& loss_fn, const ParamSet& params,
                            const std::string& stage = "loss");

void sgd_step(ParamSet& params, const ParamSet& grads, double lr);

struct AdamState {
  std::size_t step = 0;
  ParamSet first_moment;
  ParamSet second_moment;
  double lr = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // Zero moments laid out like `params`.
  static AdamState for_params(const ParamSet& params, double lr);
};

void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads);

}  // namespace civb
