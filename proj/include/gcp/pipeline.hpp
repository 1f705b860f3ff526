#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gcp/cost_model.hpp"
#include "gcp/data.hpp"
#include "gcp/importance.hpp"
#include "gcp/network.hpp"

// Global channel pruning: the frozen-filter L1 phase, budgeted prune steps,
// recovery with statistic refresh, T-fold alternation and the final fine-tune.
// Plus the baseline trainer, evaluation and a uniform-pruning reference.
namespace gcp {

struct GcpConfig {
  Objective objective = Objective::flops();
  double eta = 0.5;
  int iterations = 5;
  double lambda = 0.2;
  int epochs_reg = 1;
  int epochs_rec = 1;
  int epochs_finetune = 30;
  double lr_reg = 0.02;
  double lr_rec = 0.01;
  double lr_finetune = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;  // fine-tune only
  std::size_t batch_size = 128;
  std::size_t calibration_batches = 20;
  double bn_ema_momentum = 0.9;
  int max_lambda_doublings = 0;
  std::uint64_t seed = 1;

  void check() const;  // throws InputError
};

// ---------------------------------------------------------------------------
// History

struct IterationRecord {
  int iteration = 0;
  double cost_before = 0.0;
  double cost_after = 0.0;
  double budget = 0.0;
  double achieved = 0.0;
  double max_alpha = 0.0;
  double lambda = 0.0;
  int lambda_doublings = 0;
  double prunable_mass = 0.0;  // raw alpha summed over exact zeros after regularization
  std::size_t exact_zeros = 0;
  std::vector<double> reg_objective;  // mean loss + penalty per epoch
  std::vector<double> reg_loss;       // mean data loss per epoch
  std::vector<double> rec_loss;       // mean loss per recovery epoch
  double post_prune_loss = 0.0;       // FrozenStats, calibration batches
  double post_recovery_loss = 0.0;    // same batches after recovery + recalibration
  std::vector<std::size_t> pruned_per_group;
  std::size_t channels_pruned = 0;
};

struct PruneHistory {
  std::string objective;
  double original_cost = 0.0;
  double eta = 0.0;
  int iterations = 0;
  std::uint64_t seed = 0;
  std::vector<IterationRecord> steps;
  std::vector<double> finetune_loss;
  double final_cost = 0.0;
  std::vector<std::vector<bool>> final_keep;
};

// ---------------------------------------------------------------------------
// Building blocks

struct EvalResult {
  double loss = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;  // only meaningful with >= 5 classes
  std::size_t samples = 0;
};

EvalResult evaluate(const Model& model, const Dataset& data, std::size_t batch_size = 250,
                    BnMode mode = BnMode::FrozenStats);
EvalResult evaluate_batches(const Model& model, const std::vector<Batch>& batches);

// running <- m * running + (1 - m) * batch, for every BN in a BatchStats tape.
void update_running_stats(Model& model, const Tape<float>& tape, double momentum);

// Exact per-channel mean and population variance of every BN input pooled over
// the batches in BatchStats mode, stored as the frozen statistics.
void recalibrate_bn(Model& model, const std::vector<Batch>& batches);

// First `count` batches of a fixed-seed stream (used for calibration and
// the post-prune / post-recovery loss probes).
std::vector<Batch> calibration_set(const Dataset& data, std::size_t batch_size, std::size_t count,
                                   std::uint64_t seed);

// gamma * mask into gamma; mask reset to 1 (kept) / 0 (pruned). Function preserving.
void absorb_group_masks(Model& model);

// raw alpha / mean raw alpha over kept group channels.
std::vector<double> normalized_alpha(const std::vector<double>& alpha, const std::vector<ChannelGroup>& groups);

// Parameters the L1 penalty acts on: gamma of singleton groups, the shared
// mask of grouped ones.
double penalty_term(const Model& model, const std::vector<double>& alpha, double lambda);

struct RegStep {
  double loss = 0.0;
  double penalty = 0.0;  // evaluated at the pre-step parameters
  double objective = 0.0;
};

// One proximal SGD step of the regularization objective on one batch:
// beta/head take momentum SGD, gamma-type parameters take
// soft_threshold(p - lr * grad, lr * lambda * alpha[group]).
class RegularizeStepper {
 public:
  RegularizeStepper(const GcpConfig& cfg, std::vector<double> alpha_norm, double lambda);
  RegStep step(Model& model, const Batch& batch);

 private:
  const GcpConfig& cfg_;
  std::vector<double> alpha_;
  double lambda_;
  std::map<std::string, OptimState<float>> states_;
};

struct RegPhaseResult {
  std::vector<double> objective;
  std::vector<double> loss;
  double lambda = 0.0;
  int doublings = 0;
  double prunable_mass = 0.0;
  std::size_t exact_zeros = 0;
};

// Frozen filters, FrozenStats BN. Requires calibrated statistics. With
// step_budget > 0, lambda doubles (restarting from the phase-start state) while
// the alpha mass of exact zeros stays below the budget.
RegPhaseResult regularize_phase(Model& model, const Dataset& data, const GcpConfig& cfg,
                                const std::vector<double>& raw_alpha, int phase_index, double step_budget = 0.0);

// Mean data loss per epoch. Pruned gamma/beta receive no update.
std::vector<double> recovery_phase(Model& model, const Dataset& data, const GcpConfig& cfg, int phase_index);

// All surviving parameters trainable, BatchStats, cosine-decayed lr; ends with
// a calibration sweep. Returns mean loss per epoch.
std::vector<double> finetune(Model& model, const Dataset& data, const GcpConfig& cfg);

// Budgeted channel selection over an ascending ranking. `cost_of` prices a
// keep configuration; channels are taken in rank order (skipping a group's
// last survivor) until cost_of(start) - cost_of(current) >= budget.
struct PrunePlan {
  PruneMask mask;
  double achieved = 0.0;
  std::vector<std::size_t> pruned_per_group;
  std::size_t count = 0;
};

using CostFunction = std::function<double(const std::vector<std::vector<bool>>& keep)>;

PrunePlan plan_prune(const ImportanceVector& scores, const std::vector<ChannelGroup>& groups, double budget,
                     const CostFunction& cost_of);

// Cost of the model narrowed to a keep configuration.
CostFunction model_cost_function(const Model& model, const Objective& objective);

// Ranks, selects and applies the mask. Throws BudgetError on a shortfall.
PrunePlan prune_step(Model& model, const ImportanceVector& scores, const Objective& objective, double budget);

using ProgressFn = std::function<void(const std::string&)>;

// Algorithm driver. `history` is filled as iterations complete, so it survives
// an exception thrown by a later phase.
Model run_gcp(const Model& pretrained, const Dataset& data, const GcpConfig& cfg, PruneHistory& history,
              const ProgressFn& progress = {});

// ---------------------------------------------------------------------------
// Baseline training and the uniform reference

struct TrainConfig {
  int epochs = 30;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  double bn_ema_momentum = 0.9;
  std::uint64_t seed = 1;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double eval_top1 = 0.0;
};

// Trains an initialized model in place; cosine lr over `epochs`.
std::vector<EpochMetrics> train_model(Model& model, const Dataset& train, const Dataset& eval, const TrainConfig& cfg,
                                      const ProgressFn& progress = {});

// Keeps ceil((1 - fraction) * width) channels of each group, dropping the
// lowest summed |gamma * mask| over members.
PruneMask uniform_mask(const Model& model, double fraction);

// Smallest per-group fraction whose uniform mask removes at least
// target_reduction of the objective cost.
double uniform_fraction_for(const Model& model, const Objective& objective, double target_reduction);

}  // namespace gcp
