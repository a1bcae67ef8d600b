#include <cmath>

#include "civbalance/diffkit.hpp"
#include "civbalance/errors.hpp"
#include "civbalance/rng.hpp"

namespace civb {

void ParamSet::add(std::string name, Matrix value) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

std::size_t ParamSet::total_size() const noexcept {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

const Matrix& ParamSet::at(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return tensors_[i];
  throw ArgumentError("no parameter named " + name);
}

Matrix& ParamSet::at(const std::string& name) {
  return const_cast<Matrix&>(std::as_const(*this).at(name));
}

bool ParamSet::contains(const std::string& name) const noexcept {
  for (const auto& n : names_)
    if (n == name) return true;
  return false;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_size());
  for (const auto& t : tensors_) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

void ParamSet::unflatten(std::span<const double> flat) {
  if (flat.size() != total_size()) {
    throw ShapeError("unflatten: expected " + std::to_string(total_size()) + " values, got " +
                     std::to_string(flat.size()));
  }
  std::size_t off = 0;
  for (auto& t : tensors_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.size(), t.values().begin());
    off += t.size();
  }
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    out.add(names_[i], Matrix(tensors_[i].rows(), tensors_[i].cols()));
  }
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const noexcept {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (!tensors_[i].same_shape(other.tensors_[i])) return false;
  return true;
}

bool is_weight_name(const std::string& name) noexcept {
  constexpr std::string_view suffix = ".weight";
  return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void MlpSpec::validate() const {
  if (input_dim == 0 || output_dim == 0) throw ConfigError("mlp input and output dims must be >= 1");
  for (auto h : hidden_dims)
    if (h == 0) throw ConfigError("mlp hidden dims must be >= 1");
}

std::size_t MlpSpec::param_count() const {
  validate();
  std::size_t count = 0;
  std::size_t fan_in = input_dim;
  for (auto h : hidden_dims) {
    count += fan_in * h + h;
    fan_in = h;
  }
  return count + fan_in * output_dim + output_dim;
}

ParamSet mlp_init(const MlpSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.init_seed, Stream::init);
  ParamSet params;
  std::size_t fan_in = spec.input_dim;
  for (std::size_t layer = 0; layer < spec.layer_count(); ++layer) {
    const std::size_t fan_out = layer < spec.hidden_dims.size() ? spec.hidden_dims[layer] : spec.output_dim;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix w(fan_in, fan_out);
    for (double& v : w.values()) v = (2.0 * uniform01(rng) - 1.0) * bound;
    params.add("layer" + std::to_string(layer) + ".weight", std::move(w));
    params.add("layer" + std::to_string(layer) + ".bias", Matrix(1, fan_out));
    fan_in = fan_out;
  }
  return params;
}

Var mlp_forward(std::span<const Var> params, const MlpSpec& spec, Var x) {
  if (params.size() != 2 * spec.layer_count()) {
    throw ShapeError("mlp_forward: expected " + std::to_string(2 * spec.layer_count()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  if (x.value().cols() != spec.input_dim) {
    throw ShapeError("mlp_forward: input has " + std::to_string(x.value().cols()) + " columns, the network expects " +
                     std::to_string(spec.input_dim));
  }
  Var h = x;
  for (std::size_t layer = 0; layer < spec.layer_count(); ++layer) {
    h = ad::add_bias(ad::matmul(h, params[2 * layer]), params[2 * layer + 1]);
    if (layer + 1 < spec.layer_count()) h = ad::relu(h);
  }
  if (spec.output_activation == OutputActivation::sigmoid) h = ad::sigmoid(h);
  return h;
}

Matrix mlp_forward(const ParamSet& params, const MlpSpec& spec, const Matrix& x) {
  Tape tape;
  auto vars = register_constants(tape, params);
  return mlp_forward(vars, spec, tape.constant(x)).value();
}

std::vector<Var> register_params(Tape& tape, const ParamSet& params) {
  std::vector<Var> vars;
  vars.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) vars.push_back(tape.variable(params[i]));
  return vars;
}

std::vector<Var> register_constants(Tape& tape, const ParamSet& params) {
  std::vector<Var> vars;
  vars.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) vars.push_back(tape.constant(params[i]));
  return vars;
}

double l2_penalty(const ParamSet& params, double lambda) {
  if (lambda < 0.0) throw ConfigError("l2 lambda must be >= 0");
  double s = 0.0;
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!is_weight_name(params.name(i))) continue;
    for (double v : params[i].values()) s += v * v;
  }
  return lambda * s;
}

Var l2_penalty(const ParamSet& layout, std::span<const Var> params, double lambda) {
  if (lambda < 0.0) throw ConfigError("l2 lambda must be >= 0");
  if (params.size() != layout.count()) throw ShapeError("l2_penalty: layout/variable count mismatch");
  if (params.empty()) throw ArgumentError("l2_penalty: no parameters");
  Tape& tape = *params.front().tape();
  Var total = tape.constant(Matrix(1, 1));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!is_weight_name(layout.name(i))) continue;
    total = ad::add(total, ad::sum(ad::square(params[i])));
  }
  return ad::scale(total, lambda);
}

ValueAndGrad value_and_grad(const LossFn& loss_fn, const ParamSet& params, const std::string& stage) {
  Tape tape;
  auto vars = register_params(tape, params);
  Var loss = loss_fn(tape, vars);
  const Matrix& lv = tape.value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError(stage + ": loss must be scalar, got " + lv.shape_str());
  if (!std::isfinite(lv[0])) throw NumericError(stage, "non-finite loss");
  tape.backward(loss);
  ValueAndGrad out{lv[0], params.zeros_like()};
  for (std::size_t i = 0; i < vars.size(); ++i) {
    const Matrix& g = tape.grad(vars[i]);
    if (!g.all_finite()) throw NumericError(stage, "non-finite gradient for " + params.name(i));
    out.grads[i] = g;
  }
  return out;
}

void sgd_step(ParamSet& params, const ParamSet& grads, double lr) {
  if (!params.same_layout(grads)) throw ShapeError("sgd_step: gradient layout mismatch");
  if (!(lr > 0.0)) throw ConfigError("sgd learning rate must be > 0");
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto p = params[i].values();
    auto g = grads[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
  }
}

AdamState AdamState::for_params(const ParamSet& params, double lr) {
  AdamState s;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  s.lr = lr;
  return s;
}

void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads) {
  if (!params.same_layout(grads) || !params.same_layout(state.first_moment) ||
      !params.same_layout(state.second_moment)) {
    throw ShapeError("adam_step: layout mismatch");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto p = params[i].values();
    auto g = grads[i].values();
    auto m = state.first_moment[i].values();
    auto v = state.second_moment[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      p[k] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

}  // namespace civb
