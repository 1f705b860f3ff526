#include "gcp/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "gcp/errors.hpp"

namespace gcp {

void GcpConfig::check() const {
  if (!(eta > 0.0 && eta < 1.0)) throw InputError("eta must lie in (0, 1)");
  if (iterations < 1) throw InputError("iterations must be >= 1");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InputError("lambda must be a finite non-negative number");
  if (epochs_reg < 0 || epochs_rec < 0 || epochs_finetune < 0) throw InputError("epoch counts must be >= 0");
  for (double lr : {lr_reg, lr_rec, lr_finetune}) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw InputError("learning rates must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InputError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw InputError("weight_decay must be >= 0");
  if (batch_size < 2) throw InputError("batch_size must be >= 2");
  if (calibration_batches < 1) throw InputError("calibration_batches must be >= 1");
  if (!(bn_ema_momentum >= 0.0 && bn_ema_momentum < 1.0)) throw InputError("bn_ema_momentum must lie in [0, 1)");
  if (max_lambda_doublings < 0) throw InputError("max_lambda_doublings must be >= 0");
  if (objective.kind == ObjectiveKind::Latency && !objective.table) {
    throw InputError("latency objective needs a latency table");
  }
}

namespace {

using States = std::map<std::string, OptimState<float>>;

OptimState<float>& state_for(States& states, const std::string& key, std::size_t size, double lr, double momentum,
                             double weight_decay) {
  OptimState<float>& s = states[key];
  if (s.velocity.size() != size) s.velocity.assign(size, 0.0f);
  s.lr = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  return s;
}

struct SgdRules {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool gamma = true;  // false when gamma-type parameters are stepped elsewhere
};

// Momentum SGD on a per-channel vector; pruned channels stay exactly zero.
void channel_step(std::vector<float>& param, std::vector<float> grad, OptimState<float>& state,
                  const std::vector<bool>& kept) {
  for (std::size_t c = 0; c < grad.size(); ++c) {
    if (!kept[c]) grad[c] = 0.0f;
  }
  sgd_momentum_step<float>(param, grad, state);
  for (std::size_t c = 0; c < param.size(); ++c) {
    if (!kept[c]) {
      param[c] = 0.0f;
      state.velocity[c] = 0.0f;
    }
  }
}

void apply_sgd(Model& model, const Gradients<float>& grads, States& states, const SgdRules& r) {
  const GroupIndex& gi = model.group_index();
  for (const auto& [id, g] : grads.conv_weights) {
    auto& w = model.conv_weights.at(id);
    auto& s = state_for(states, "conv:" + std::to_string(id), w.size(), r.lr, r.momentum, r.weight_decay);
    sgd_momentum_step<float>(w.data(), g.data(), s);
  }
  auto kept_of = [&](int bn_id) -> const std::vector<bool>& {
    return model.groups[static_cast<std::size_t>(gi.by_bn.at(bn_id))].kept;
  };
  if (r.gamma) {
    for (const auto& [id, g] : grads.gamma) {
      auto& p = model.bn.at(id).gamma;
      auto& s = state_for(states, "gamma:" + std::to_string(id), p.size(), r.lr, r.momentum, r.weight_decay);
      channel_step(p, g, s, kept_of(id));
    }
  }
  for (const auto& [id, g] : grads.beta) {
    auto& p = model.bn.at(id).beta;
    auto& s = state_for(states, "beta:" + std::to_string(id), p.size(), r.lr, r.momentum, r.weight_decay);
    channel_step(p, g, s, kept_of(id));
  }
  if (grads.head_weights) {
    auto& s = state_for(states, "head.weights", model.head_weights.size(), r.lr, r.momentum, r.weight_decay);
    sgd_momentum_step<float>(model.head_weights.data(), grads.head_weights->data(), s);
  }
  if (grads.head_bias) {
    auto& s = state_for(states, "head.bias", model.head_bias.size(), r.lr, r.momentum, 0.0);
    sgd_momentum_step<float>(model.head_bias, *grads.head_bias, s);
  }
  model.mark_modified();
}

double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double pi = std::acos(-1.0);
  return 0.5 * base * (1.0 + std::cos(pi * static_cast<double>(step) / static_cast<double>(total)));
}

void require_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericError(where + ": loss is not finite");
}

std::string batch_where(const std::string& phase, int epoch, std::size_t batch) {
  return phase + " epoch " + std::to_string(epoch + 1) + " batch " + std::to_string(batch + 1);
}

// Parameter the L1 penalty acts on for channel c of group g.
double penalized_value(const Model& model, std::size_t g, std::size_t c) {
  const ChannelGroup& group = model.groups[g];
  if (group.grouped()) return model.group_mask[g][c];
  return model.bn.at(group.members.front()).gamma[c];
}

double current_cost(const Model& model, const Objective& objective) {
  std::vector<std::vector<bool>> keep;
  for (const auto& g : model.groups) keep.push_back(g.kept);
  return model_cost_function(model, objective)(keep);
}

void emit(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

// BatchStats epochs with an EMA refresh after every step; shared by recovery,
// fine-tuning and baseline training.
double batch_stats_epoch(Model& model, const BatchStream& stream, std::size_t epoch_index, States& states,
                         SgdRules rules, double ema, double base_lr, std::size_t& step, std::size_t total_steps,
                         bool cosine, const std::string& phase, int epoch) {
  double sum = 0.0;
  std::size_t seen = 0;
  const auto order = stream.epoch(epoch_index);
  for (std::size_t b = 0; b < order.size(); ++b) {
    Batch batch = stream.gather(order[b]);
    rules.lr = cosine ? cosine_lr(base_lr, step, total_steps) : base_lr;
    ForwardResult<float> fw = forward(model, batch.images, BnMode::BatchStats, batch.labels, true);
    require_finite(*fw.loss, batch_where(phase, epoch, b));
    Gradients<float> grads = backward(model, fw.tape, fw.grad_logits);
    update_running_stats(model, fw.tape, ema);
    try {
      apply_sgd(model, grads, states, rules);
    } catch (const NumericError& e) {
      throw NumericError(batch_where(phase, epoch, b) + ": " + e.what());
    }
    sum += *fw.loss * static_cast<double>(batch.labels.size());
    seen += batch.labels.size();
    ++step;
  }
  return seen ? sum / static_cast<double>(seen) : 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Evaluation and BN statistics

EvalResult evaluate_batches(const Model& model, const std::vector<Batch>& batches) {
  EvalResult r;
  double loss_sum = 0.0;
  std::size_t top1 = 0, top5 = 0;
  for (const Batch& batch : batches) {
    ForwardResult<float> fw = forward(model, batch.images, BnMode::FrozenStats, batch.labels, false);
    const std::size_t n = batch.labels.size();
    const std::size_t classes = fw.logits.dim(1);
    loss_sum += *fw.loss * static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const float* row = fw.logits.data().data() + i * classes;
      const float target = row[batch.labels[i]];
      std::size_t above = 0;
      for (std::size_t k = 0; k < classes; ++k) {
        if (row[k] > target || (row[k] == target && static_cast<int>(k) < batch.labels[i])) ++above;
      }
      if (above == 0) ++top1;
      if (above < 5) ++top5;
    }
    r.samples += n;
  }
  if (r.samples == 0) throw InputError("evaluation set is empty");
  r.loss = loss_sum / static_cast<double>(r.samples);
  r.top1 = static_cast<double>(top1) / static_cast<double>(r.samples);
  r.top5 = static_cast<double>(top5) / static_cast<double>(r.samples);
  return r;
}

EvalResult evaluate(const Model& model, const Dataset& data, std::size_t batch_size, BnMode mode) {
  if (data.size() == 0) throw InputError("evaluation set is empty");
  if (mode == BnMode::FrozenStats) {
    BatchStream stream(data, batch_size, 0, false);
    std::vector<Batch> batches;
    EvalResult total;
    double loss_sum = 0.0, top1 = 0.0, top5 = 0.0;
    for (const auto& idx : stream.epoch(0)) {
      EvalResult part = evaluate_batches(model, {stream.gather(idx)});
      loss_sum += part.loss * static_cast<double>(part.samples);
      top1 += part.top1 * static_cast<double>(part.samples);
      top5 += part.top5 * static_cast<double>(part.samples);
      total.samples += part.samples;
    }
    const double n = static_cast<double>(total.samples);
    total.loss = loss_sum / n;
    total.top1 = top1 / n;
    total.top5 = top5 / n;
    return total;
  }
  // Batch-statistics evaluation: recalibrate a copy on the evaluation batches.
  Model copy = model;
  BatchStream stream(data, batch_size, 0, false);
  std::vector<Batch> batches;
  for (const auto& idx : stream.epoch(0)) batches.push_back(stream.gather(idx));
  recalibrate_bn(copy, batches);
  return evaluate_batches(copy, batches);
}

void update_running_stats(Model& model, const Tape<float>& tape, double momentum) {
  if (tape.mode != BnMode::BatchStats) throw UsageError("running statistics need a batch-statistics tape");
  const float m = static_cast<float>(momentum);
  for (const auto& [id, ctx] : tape.bn) {
    BnParams<float>& p = model.bn.at(id);
    for (std::size_t c = 0; c < p.channels(); ++c) {
      p.running_mean[c] = m * p.running_mean[c] + (1.0f - m) * ctx.batch_mean[c];
      p.running_var[c] = m * p.running_var[c] + (1.0f - m) * ctx.batch_var[c];
    }
  }
  model.statistics_calibrated = true;
  model.mark_modified();
}

void recalibrate_bn(Model& model, const std::vector<Batch>& batches) {
  if (batches.empty()) throw InputError("calibration needs at least one batch");
  struct Pooled {
    double count = 0.0;
    std::vector<double> mean, m2;
  };
  std::map<int, Pooled> pooled;
  const Topology& topo = model.topology();
  for (const Batch& batch : batches) {
    ForwardResult<float> fw = forward(model, batch.images, BnMode::BatchStats, {}, false);
    for (const auto& [id, ctx] : fw.tape.bn) {
      const ActivationShape& shape = topo.shapes[topo.at(id)];
      const double nb = static_cast<double>(batch.images.dim(0) * shape.height * shape.width);
      Pooled& p = pooled[id];
      if (p.mean.empty()) {
        p.mean.assign(ctx.batch_mean.size(), 0.0);
        p.m2.assign(ctx.batch_mean.size(), 0.0);
      }
      const double n = p.count + nb;
      for (std::size_t c = 0; c < p.mean.size(); ++c) {
        const double delta = static_cast<double>(ctx.batch_mean[c]) - p.mean[c];
        p.mean[c] += delta * nb / n;
        p.m2[c] += static_cast<double>(ctx.batch_var[c]) * nb + delta * delta * p.count * nb / n;
      }
      p.count = n;
    }
  }
  for (const auto& [id, p] : pooled) {
    BnParams<float>& bn = model.bn.at(id);
    for (std::size_t c = 0; c < p.mean.size(); ++c) {
      bn.running_mean[c] = static_cast<float>(p.mean[c]);
      bn.running_var[c] = static_cast<float>(p.m2[c] / p.count);
    }
  }
  model.statistics_calibrated = true;
  model.mark_modified();
}

std::vector<Batch> calibration_set(const Dataset& data, std::size_t batch_size, std::size_t count,
                                   std::uint64_t seed) {
  BatchStream stream(data, batch_size, seed, true);
  auto order = stream.epoch(0);
  std::vector<Batch> out;
  for (std::size_t b = 0; b < order.size() && b < count; ++b) out.push_back(stream.gather(order[b]));
  return out;
}

void absorb_group_masks(Model& model) {
  for (std::size_t g = 0; g < model.groups.size(); ++g) {
    const ChannelGroup& group = model.groups[g];
    for (std::size_t c = 0; c < group.channels; ++c) {
      const float m = model.group_mask[g][c];
      for (int id : group.members) model.bn.at(id).gamma[c] *= m;
      model.group_mask[g][c] = group.kept[c] ? 1.0f : 0.0f;
      if (!group.kept[c]) {
        for (int id : group.members) {
          model.bn.at(id).gamma[c] = 0.0f;
          model.bn.at(id).beta[c] = 0.0f;
        }
      }
    }
  }
  model.mark_modified();
}

std::vector<double> normalized_alpha(const std::vector<double>& alpha, const std::vector<ChannelGroup>& groups) {
  if (alpha.size() != groups.size()) throw DimensionError("alpha has one entry per group");
  double sum = 0.0, count = 0.0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double k = static_cast<double>(groups[g].kept_count());
    sum += alpha[g] * k;
    count += k;
  }
  if (!(count > 0.0) || !(sum > 0.0)) throw NumericError("alpha has no positive mass over kept channels");
  const double mean = sum / count;
  std::vector<double> out(alpha.size());
  for (std::size_t g = 0; g < alpha.size(); ++g) out[g] = alpha[g] / mean;
  return out;
}

double penalty_term(const Model& model, const std::vector<double>& alpha, double lambda) {
  double total = 0.0;
  for (std::size_t g = 0; g < model.groups.size(); ++g) {
    double s = 0.0;
    for (std::size_t c = 0; c < model.groups[g].channels; ++c) {
      if (model.groups[g].kept[c]) s += std::abs(penalized_value(model, g, c));
    }
    total += alpha[g] * s;
  }
  return lambda * total;
}

// ---------------------------------------------------------------------------
// Regularization

RegularizeStepper::RegularizeStepper(const GcpConfig& cfg, std::vector<double> alpha_norm, double lambda)
    : cfg_(cfg), alpha_(std::move(alpha_norm)), lambda_(lambda) {}

RegStep RegularizeStepper::step(Model& model, const Batch& batch) {
  if (alpha_.size() != model.groups.size()) throw DimensionError("alpha has one entry per group");
  model.trainable = Trainable::frozen_weights();
  RegStep out;
  out.penalty = penalty_term(model, alpha_, lambda_);
  ForwardResult<float> fw = forward(model, batch.images, BnMode::FrozenStats, batch.labels, true);
  out.loss = *fw.loss;
  out.objective = out.loss + out.penalty;
  require_finite(out.loss, "regularization");
  Gradients<float> grads = backward(model, fw.tape, fw.grad_logits);

  const double lr = cfg_.lr_reg;
  for (std::size_t g = 0; g < model.groups.size(); ++g) {
    const ChannelGroup& group = model.groups[g];
    const double threshold = lr * lambda_ * alpha_[g];
    std::vector<float>* param = nullptr;
    const std::vector<float>* grad = nullptr;
    if (group.grouped()) {
      param = &model.group_mask[g];
      auto it = grads.group_mask.find(static_cast<int>(g));
      if (it != grads.group_mask.end()) grad = &it->second;
    } else {
      const int id = group.members.front();
      param = &model.bn.at(id).gamma;
      auto it = grads.gamma.find(id);
      if (it != grads.gamma.end()) grad = &it->second;
    }
    if (!grad) throw UsageError("regularization step produced no gradient for group " + std::to_string(g));
    for (std::size_t c = 0; c < group.channels; ++c) {
      if (!group.kept[c]) {
        (*param)[c] = 0.0f;
        continue;
      }
      const double gc = (*grad)[c];
      if (!std::isfinite(gc)) throw NumericError("non-finite gradient in regularization");
      (*param)[c] = static_cast<float>(soft_threshold(static_cast<double>((*param)[c]) - lr * gc, threshold));
    }
  }
  SgdRules rules{lr, cfg_.momentum, 0.0, false};
  apply_sgd(model, grads, states_, rules);
  return out;
}

RegPhaseResult regularize_phase(Model& model, const Dataset& data, const GcpConfig& cfg,
                                const std::vector<double>& raw_alpha, int phase_index, double step_budget) {
  if (!model.statistics_calibrated) {
    throw UsageError("regularization runs on frozen statistics; calibrate the BN statistics first");
  }
  const std::vector<double> alpha = normalized_alpha(raw_alpha, model.groups);
  const Model snapshot = model;
  const Trainable saved = model.trainable;
  BatchStream stream(data, cfg.batch_size, cfg.seed * 7919 + static_cast<std::uint64_t>(phase_index) * 2, true);

  RegPhaseResult result;
  double lambda = cfg.lambda;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 0) model = snapshot;
    result = RegPhaseResult{};
    result.lambda = lambda;
    result.doublings = attempt;
    RegularizeStepper stepper(cfg, alpha, lambda);
    for (int e = 0; e < cfg.epochs_reg; ++e) {
      double obj = 0.0, loss = 0.0;
      std::size_t seen = 0;
      const auto order = stream.epoch(static_cast<std::size_t>(e));
      for (std::size_t b = 0; b < order.size(); ++b) {
        Batch batch = stream.gather(order[b]);
        RegStep s;
        try {
          s = stepper.step(model, batch);
        } catch (const NumericError& err) {
          throw NumericError(batch_where("regularization", e, b) + ": " + err.what());
        }
        obj += s.objective * static_cast<double>(batch.labels.size());
        loss += s.loss * static_cast<double>(batch.labels.size());
        seen += batch.labels.size();
      }
      result.objective.push_back(obj / static_cast<double>(seen));
      result.loss.push_back(loss / static_cast<double>(seen));
    }
    for (std::size_t g = 0; g < model.groups.size(); ++g) {
      for (std::size_t c = 0; c < model.groups[g].channels; ++c) {
        if (model.groups[g].kept[c] && penalized_value(model, g, c) == 0.0f) {
          ++result.exact_zeros;
          result.prunable_mass += raw_alpha[g];
        }
      }
    }
    if (step_budget <= 0.0 || result.prunable_mass >= step_budget || attempt >= cfg.max_lambda_doublings ||
        cfg.epochs_reg == 0) {
      break;
    }
    lambda *= 2.0;
  }
  model.trainable = saved;
  return result;
}

std::vector<double> recovery_phase(Model& model, const Dataset& data, const GcpConfig& cfg, int phase_index) {
  const Trainable saved = model.trainable;
  model.trainable = Trainable::all();
  BatchStream stream(data, cfg.batch_size, cfg.seed * 7919 + static_cast<std::uint64_t>(phase_index) * 2 + 1, true);
  States states;
  std::vector<double> losses;
  std::size_t step = 0;
  for (int e = 0; e < cfg.epochs_rec; ++e) {
    losses.push_back(batch_stats_epoch(model, stream, static_cast<std::size_t>(e), states,
                                       SgdRules{cfg.lr_rec, cfg.momentum, 0.0, true}, cfg.bn_ema_momentum, cfg.lr_rec,
                                       step, 0, false, "recovery", e));
  }
  model.trainable = saved;
  return losses;
}

std::vector<double> finetune(Model& model, const Dataset& data, const GcpConfig& cfg) {
  const Trainable saved = model.trainable;
  model.trainable = Trainable::all();
  BatchStream stream(data, cfg.batch_size, cfg.seed * 7919 + 999983, true);
  States states;
  std::vector<double> losses;
  std::size_t step = 0;
  const std::size_t total = stream.batches_per_epoch() * static_cast<std::size_t>(cfg.epochs_finetune);
  for (int e = 0; e < cfg.epochs_finetune; ++e) {
    losses.push_back(batch_stats_epoch(model, stream, static_cast<std::size_t>(e), states,
                                       SgdRules{cfg.lr_finetune, cfg.momentum, cfg.weight_decay, true},
                                       cfg.bn_ema_momentum, cfg.lr_finetune, step, total, true, "fine-tune", e));
  }
  recalibrate_bn(model, calibration_set(data, cfg.batch_size, cfg.calibration_batches, cfg.seed + 17));
  model.trainable = saved;
  return losses;
}

// ---------------------------------------------------------------------------
// Pruning

PrunePlan plan_prune(const ImportanceVector& scores, const std::vector<ChannelGroup>& groups, double budget,
                     const CostFunction& cost_of) {
  if (!(budget > 0.0) || !std::isfinite(budget)) throw InputError("prune budget must be positive");
  PrunePlan plan;
  plan.mask.keep.reserve(groups.size());
  std::vector<std::size_t> survivors;
  for (const auto& g : groups) {
    plan.mask.keep.push_back(g.kept);
    survivors.push_back(g.kept_count());
  }
  plan.pruned_per_group.assign(groups.size(), 0);
  const double start = cost_of(plan.mask.keep);
  for (std::size_t idx : rank_channels(scores)) {
    const ChannelScore& s = scores[idx];
    const auto g = static_cast<std::size_t>(s.group);
    if (g >= groups.size() || s.channel >= groups[g].channels) throw DimensionError("score refers to no channel");
    if (!plan.mask.keep[g][s.channel] || survivors[g] <= 1) continue;
    plan.mask.keep[g][s.channel] = false;
    --survivors[g];
    ++plan.pruned_per_group[g];
    ++plan.count;
    plan.achieved = start - cost_of(plan.mask.keep);
    if (plan.achieved >= budget) return plan;
  }
  std::ostringstream msg;
  msg << "budget " << budget << " unreachable: pruning every eligible channel removes only " << plan.achieved;
  throw BudgetError(msg.str());
}

CostFunction model_cost_function(const Model& model, const Objective& objective) {
  NetworkSpec spec = model.spec();
  std::vector<ChannelGroup> groups = model.groups;
  return [spec = std::move(spec), groups = std::move(groups), objective](const std::vector<std::vector<bool>>& keep) {
    return total_cost(shrink_spec(spec, groups, keep), objective).total;
  };
}

PrunePlan prune_step(Model& model, const ImportanceVector& scores, const Objective& objective, double budget) {
  PrunePlan plan = plan_prune(scores, model.groups, budget, model_cost_function(model, objective));
  apply_mask(model, plan.mask);
  return plan;
}

// ---------------------------------------------------------------------------
// Driver

Model run_gcp(const Model& pretrained, const Dataset& data, const GcpConfig& cfg, PruneHistory& history,
              const ProgressFn& progress) {
  cfg.check();
  if (cfg.objective.kind == ObjectiveKind::Latency) cfg.objective.table->check_covers(pretrained.spec());
  Model model = pretrained;
  const std::vector<Batch> calib = calibration_set(data, cfg.batch_size, cfg.calibration_batches, cfg.seed + 17);
  recalibrate_bn(model, calib);

  const double original = current_cost(model, cfg.objective);
  history = PruneHistory{};
  history.objective = objective_name(cfg.objective.kind);
  history.original_cost = original;
  history.eta = cfg.eta;
  history.iterations = cfg.iterations;
  history.seed = cfg.seed;

  for (int t = 1; t <= cfg.iterations; ++t) {
    const std::string tag = "iteration " + std::to_string(t) + "/" + std::to_string(cfg.iterations);
    IterationRecord rec;
    rec.iteration = t;
    rec.cost_before = current_cost(model, cfg.objective);
    rec.budget = step_budget(original, cfg.eta, cfg.iterations, t);

    absorb_group_masks(model);
    fold_all(model);
    std::vector<std::vector<bool>> keep;
    for (const auto& g : model.groups) keep.push_back(g.kept);
    const std::vector<double> alpha =
        group_alpha(shrink_spec(model.spec(), model.groups, keep), model.groups, cfg.objective);
    rec.max_alpha = *std::max_element(alpha.begin(), alpha.end());

    RegPhaseResult reg;
    try {
      reg = regularize_phase(model, data, cfg, alpha, t, rec.budget);
    } catch (const NumericError& e) {
      throw NumericError(tag + ", " + e.what());
    }
    rec.lambda = reg.lambda;
    rec.lambda_doublings = reg.doublings;
    rec.prunable_mass = reg.prunable_mass;
    rec.exact_zeros = reg.exact_zeros;
    rec.reg_objective = reg.objective;
    rec.reg_loss = reg.loss;
    emit(progress, tag + ": regularized, lambda " + std::to_string(reg.lambda) + ", " +
                       std::to_string(reg.exact_zeros) + " exact zeros");

    const ImportanceVector scores = importance_scores(model);
    PrunePlan plan = prune_step(model, scores, cfg.objective, rec.budget);
    absorb_group_masks(model);
    rec.pruned_per_group = plan.pruned_per_group;
    rec.channels_pruned = plan.count;
    rec.cost_after = current_cost(model, cfg.objective);
    rec.achieved = rec.cost_before - rec.cost_after;
    rec.post_prune_loss = evaluate_batches(model, calib).loss;

    try {
      rec.rec_loss = recovery_phase(model, data, cfg, t);
    } catch (const NumericError& e) {
      throw NumericError(tag + ", " + e.what());
    }
    recalibrate_bn(model, calib);
    rec.post_recovery_loss = evaluate_batches(model, calib).loss;
    history.steps.push_back(rec);
    emit(progress, tag + ": pruned " + std::to_string(plan.count) + " channels, cost " +
                       std::to_string(rec.cost_before) + " -> " + std::to_string(rec.cost_after) + ", loss " +
                       std::to_string(rec.post_prune_loss) + " -> " + std::to_string(rec.post_recovery_loss));
  }

  if (cfg.epochs_finetune > 0) {
    try {
      history.finetune_loss = finetune(model, data, cfg);
    } catch (const NumericError& e) {
      throw NumericError(std::string("fine-tune, ") + e.what());
    }
    emit(progress, "fine-tune done, final loss " + std::to_string(history.finetune_loss.back()));
  }
  history.final_cost = current_cost(model, cfg.objective);
  for (const auto& g : model.groups) history.final_keep.push_back(g.kept);
  return model;
}

// ---------------------------------------------------------------------------
// Baseline training and the uniform reference

std::vector<EpochMetrics> train_model(Model& model, const Dataset& train, const Dataset& eval, const TrainConfig& cfg,
                                      const ProgressFn& progress) {
  if (cfg.epochs < 0) throw InputError("epochs must be >= 0");
  if (cfg.batch_size < 2) throw InputError("batch_size must be >= 2");
  if (!(cfg.lr > 0.0)) throw InputError("learning rate must be positive");
  const Trainable saved = model.trainable;
  model.trainable = Trainable::all();
  BatchStream stream(train, cfg.batch_size, cfg.seed, true);
  States states;
  std::vector<EpochMetrics> metrics;
  std::size_t step = 0;
  const std::size_t total = stream.batches_per_epoch() * static_cast<std::size_t>(cfg.epochs);
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochMetrics m;
    m.epoch = e + 1;
    m.train_loss = batch_stats_epoch(model, stream, static_cast<std::size_t>(e), states,
                                     SgdRules{cfg.lr, cfg.momentum, cfg.weight_decay, true}, cfg.bn_ema_momentum,
                                     cfg.lr, step, total, true, "training", e);
    if (eval.size() > 0) m.eval_top1 = evaluate(model, eval).top1;
    metrics.push_back(m);
    emit(progress, "epoch " + std::to_string(m.epoch) + ": train loss " + std::to_string(m.train_loss) +
                       ", eval top-1 " + std::to_string(m.eval_top1));
  }
  model.trainable = saved;
  return metrics;
}

PruneMask uniform_mask(const Model& model, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw InputError("uniform fraction must lie in [0, 1)");
  PruneMask mask;
  for (std::size_t g = 0; g < model.groups.size(); ++g) {
    const ChannelGroup& group = model.groups[g];
    std::vector<bool> keep = group.kept;
    const std::size_t width = group.kept_count();
    std::size_t target = static_cast<std::size_t>(std::ceil((1.0 - fraction) * static_cast<double>(width) - 1e-9));
    target = std::max<std::size_t>(target, 1);
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t c = 0; c < group.channels; ++c) {
      if (!group.kept[c]) continue;
      double s = 0.0;
      for (int id : group.members) s += std::abs(model.bn.at(id).gamma[c] * model.group_mask[g][c]);
      ranked.emplace_back(s, c);
    }
    std::sort(ranked.begin(), ranked.end());
    for (std::size_t k = 0; k + target < width; ++k) keep[ranked[k].second] = false;
    mask.keep.push_back(std::move(keep));
  }
  return mask;
}

double uniform_fraction_for(const Model& model, const Objective& objective, double target_reduction) {
  if (!(target_reduction > 0.0 && target_reduction < 1.0)) throw InputError("target reduction must lie in (0, 1)");
  std::set<double> candidates;
  for (const auto& g : model.groups) {
    const std::size_t w = g.kept_count();
    for (std::size_t k = 1; k < w; ++k) candidates.insert(static_cast<double>(k) / static_cast<double>(w));
  }
  const CostFunction cost_of = model_cost_function(model, objective);
  std::vector<std::vector<bool>> current;
  for (const auto& g : model.groups) current.push_back(g.kept);
  const double base = cost_of(current);
  for (double f : candidates) {
    const PruneMask mask = uniform_mask(model, f);
    if (base - cost_of(mask.keep) >= target_reduction * base) return f;
  }
  throw BudgetError("uniform pruning cannot reach the target reduction");
}

}  // namespace gcp
