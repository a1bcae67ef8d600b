#pragma once

// Three-stage conditional-IV estimator: instrument regression, treatment
// regression on the resampled instrument, and a balanced two-head outcome
// regression whose heads give the average causal effect.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "civbalance/balance.hpp"
#include "civbalance/diffkit.hpp"
#include "civbalance/matrix.hpp"

namespace civb {

// Hidden columns kept only for evaluation.
struct GroundTruth {
  std::vector<double> y1;
  std::vector<double> y0;
  Matrix u;  // unobserved confounders, may be empty
  double true_ace = 0.0;
};

struct CivDataset {
  Matrix c;  // n x p observed confounders
  std::vector<double> s;
  std::vector<double> w;
  std::vector<double> y;
  std::optional<GroundTruth> truth;

  std::size_t size() const noexcept { return c.rows(); }
  std::size_t dim() const noexcept { return c.cols(); }
  // Throws ShapeError on ragged columns, ArgumentError on non-binary S/W or
  // non-finite values.
  void validate() const;
  // Rows in the given order, ground truth included; true_ace is recomputed
  // over the subset.
  CivDataset take_rows(std::span<const std::size_t> rows) const;
};

enum class Ablation { full, no_civ_balance, no_balance };

const char* to_string(Ablation a) noexcept;
// Throws ArgumentError for unknown names.
Ablation parse_ablation(const std::string& name);

struct TrainConfig {
  double civ_lr = 0.05;
  double treat_lr = 0.05;
  double outcome_lr = 0.0005;
  std::size_t epochs_per_stage = 300;
  double alpha = 0.1;
  double beta = 0.1;
  double l2_lambda = 1e-4;
  std::size_t repr_dim = 16;
  std::vector<std::size_t> hidden_dims{32, 32};
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::full;

  // Mini-batch size for every stage; 0 means full batch.
  std::size_t batch_size = 0;
  // Rows per step on which the balance divergences are evaluated, drawn at
  // random from the batch; 0 uses the whole batch.
  std::size_t balance_rows = 256;
  // Plateau early stop: quit once the monitored loss has not improved by more
  // than min_delta for `patience` epochs.
  std::size_t patience = 30;
  double min_delta = 1e-6;
  // Balance-module epsilon and tolerance, with more iterations: groups with
  // nearly equal weights converge slowly.
  SinkhornConfig sinkhorn{0.1, 1000};
  // Rows used for the diagnostic divergences reported after training.
  std::size_t diagnostic_rows = 512;
  // Redraw S-hat every epoch instead of once per run.
  bool resample_s_hat = false;

  // Alpha/beta after the ablation has been applied.
  double effective_alpha() const noexcept;
  double effective_beta() const noexcept;
  void validate() const;
};

// A network together with the MlpSpec that fixes its shape.
struct Network {
  MlpSpec spec;
  ParamSet params;

  Matrix forward(const Matrix& x) const { return mlp_forward(params, spec, x); }
};

// Per-column affine map fitted on training rows only.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Matrix& x);
  Matrix apply(const Matrix& x) const;
};

struct ModelBundle {
  Standardizer standardizer;
  Network civ;    // p -> P(S=1 | c)
  Network treat;  // (s, c) -> P(W=1 | s, c)
  Network repr;   // p -> repr_dim
  Network head1;
  Network head0;
};

struct Diagnostics {
  double loss_s = 0.0;
  double loss_w = 0.0;
  double loss_y = 0.0;
  double ipm_s = 0.0;  // divergence between instrument groups of Z
  double ipm_w = 0.0;  // divergence between treatment groups of Z
  std::size_t epochs_civ = 0;
  std::size_t epochs_treat = 0;
  std::size_t epochs_outcome = 0;
  std::vector<std::string> warnings;
};

struct AceEstimate {
  double ace = 0.0;
  std::optional<double> within_error;
  std::optional<double> out_error;
  Diagnostics diagnostics;
};

struct StageResult {
  Network net;
  std::size_t epochs = 0;
  double final_loss = 0.0;
};

// Stage 1: binary cross-entropy of S given C by SGD. `data.c` must already be
// standardized.
StageResult fit_civ_stage(const CivDataset& data, const TrainConfig& cfg);

// S-hat_i ~ Bernoulli(P(S=1 | c_i)), drawn from the s_hat substream of `seed`.
std::vector<double> sample_s_hat(const Network& civ, const Matrix& c, std::uint64_t seed, std::uint64_t draw = 0);

// Stage 2: binary cross-entropy of W given (S-hat, C) by SGD.
StageResult fit_treatment_stage(const CivDataset& data, std::span<const double> s_hat, const TrainConfig& cfg);

// P(W=1 | s_i, c_i); the instrument is the first input column.
std::vector<double> treat_prob(const Network& treat, std::span<const double> s, const Matrix& c);

struct OutcomeNets {
  Network repr;
  Network head1;
  Network head0;
};

// Frozen per-row inputs of the outcome stage.
struct OutcomeInputs {
  Matrix c;
  std::vector<double> y;
  std::vector<double> p_treat;  // P(W=1 | s_hat, c)
  std::vector<double> p_civ;    // P(S=1 | c)
};

// L_Y + alpha * ipm(Z, p_treat) + beta * ipm(Z, p_civ) + l2 on the tape.
// `params` holds repr, head1 and head0 variables in that order. The
// divergences use the rows listed in `balance_rows` (all rows when empty). A
// degenerate balance group, or a divergence that does not converge, sets that
// term to zero and appends a warning.
Var outcome_loss(Tape& tape, std::span<const Var> params, const OutcomeNets& nets, const OutcomeInputs& in,
                 const TrainConfig& cfg, std::vector<std::string>* warnings = nullptr,
                 std::span<const std::size_t> balance_rows = {});

// Concatenated repr/head1/head0 parameters and the inverse split.
ParamSet pack_outcome(const OutcomeNets& nets);
void unpack_outcome(const ParamSet& packed, OutcomeNets& nets);

OutcomeNets init_outcome_nets(std::size_t input_dim, const TrainConfig& cfg);

struct OutcomeFit {
  OutcomeNets nets;
  std::size_t epochs = 0;
  std::vector<std::string> warnings;
};

// Stage 3: Adam on outcome_loss over shuffled mini-batches. With `val`, the
// validation L_Y drives early stopping and the best epoch is kept; otherwise
// the epoch-mean training objective does.
OutcomeFit fit_outcome_stage(const OutcomeInputs& train, const OutcomeInputs* val, const TrainConfig& cfg);

// mean over rows of head1(repr(c)) - head0(repr(c)). Throws ArgumentError on
// an empty C.
double estimate_ace(const Network& repr, const Network& head0, const Network& head1, const Matrix& c);

struct RunOptions {
  const CivDataset* test = nullptr;        // out-of-sample rows
  const CivDataset* validation = nullptr;  // early stopping for stage 3
};

struct RunResult {
  AceEstimate estimate;
  ModelBundle model;
  double ace_test = 0.0;  // estimate on the test rows when supplied
};

// Stages 1 -> 2 -> 3 on `train`, then the ACE on train (and test) rows.
// Deterministic given (data, cfg.seed).
RunResult run_cbrl_civ(const CivDataset& train, const TrainConfig& cfg, const RunOptions& opts = {});

}  // namespace civb
