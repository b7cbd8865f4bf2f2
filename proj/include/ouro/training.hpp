#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ouro/data.hpp"
#include "ouro/recurrence.hpp"
#include "ouro/transformer.hpp"

namespace ouro {

struct TrainConfig {
  double lr_peak = 3e-4;
  double lr_min_ratio = 0.1;  // cosine floor as a fraction of lr_peak
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double clip_norm = 1.0;
  double adam_eps = 1e-8;
  Index warmup_steps = 100;
  Index total_steps = 2000;
  Index batch = 2;  // micro-batch
  Index accum = 16;
  Index seq_len = 256;
  std::uint64_t seed = 0;
  Index log_every = 1;
  Index checkpoint_every = 0;  // 0 = only at the end

  double lr_min() const { return lr_peak * lr_min_ratio; }
  void validate() const;
};

// Linear warmup 0 → lr_peak, then cosine lr_peak → lr_min. Steps past the
// end are clamped to lr_min.
double lr_at(Index step, const TrainConfig& cfg);

template <typename T>
struct OptimizerState {
  std::vector<Vec<T>> m;
  std::vector<Vec<T>> v;
  Index step = 0;
};

// One AdamW update with bias correction and decoupled weight decay. A
// parameter without a gradient is treated as having a zero gradient.
// Throws FreezingViolation if any listed tensor is frozen.
template <typename T>
void adamw_step(const NamedTensors<T>& params, OptimizerState<T>& state, double lr, const TrainConfig& cfg);

// Rescales all gradients so their joint L2 norm is at most max_norm and
// returns the norm before clipping. Non-finite gradients throw NumericError.
template <typename T>
double clip_global_norm(const NamedTensors<T>& params, double max_norm);

// Throws FreezingViolation naming the first frozen tensor holding a gradient.
template <typename T>
void audit_frozen(const NamedTensors<T>& frozen);

template <typename T>
void zero_grads(const NamedTensors<T>& params);

struct StepLog {
  Index step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

// Every log_every-th step and the last one.
inline bool is_logged(Index step, const TrainConfig& cfg) {
  return step % cfg.log_every == 0 || step == cfg.total_steps;
}

// `step lr loss grad_norm wall_ms`, tab-separated.
std::string format_step_log(const StepLog& log);

// Thrown when a step produces a non-finite loss; parameters still hold the
// values from the last completed step.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, Index step, std::vector<StepLog> history)
      : NumericError(what), step_(step), history_(std::move(history)) {}
  Index step() const { return step_; }
  const std::vector<StepLog>& history() const { return history_; }

 private:
  Index step_;
  std::vector<StepLog> history_;
};

template <typename T>
using LossFn = std::function<Tensor<T>(const TokenBatch&)>;
using BatchFn = std::function<TokenBatch()>;
using StepCallback = std::function<void(const StepLog&)>;

// Runs cfg.total_steps optimizer steps. Each step averages the loss over
// cfg.accum micro-batches, audits frozen tensors, clips, and applies AdamW.
// on_step sees every step; log_every and checkpoint_every are for the caller.
template <typename T>
std::vector<StepLog> train_loop(const NamedTensors<T>& trainable, const NamedTensors<T>& frozen, const BatchFn& next,
                                const LossFn<T>& loss_fn, const TrainConfig& cfg, OptimizerState<T>& state,
                                const StepCallback& on_step = {});

template <typename T>
Tensor<T> lm_loss(const Tensor<T>& logits, const TokenBatch& batch);

template <typename T>
std::vector<StepLog> train_base(const BaseModel<T>& model, std::span<const std::uint8_t> corpus,
                                const TrainConfig& cfg, const StepCallback& on_step = {});

template <typename T>
Tensor<T> ouroboros_loss(const OuroborosModel<T>& model, const TokenBatch& batch);

// Trains only the variant's trainables; everything in frozen_tensors() is
// audited after every backward pass.
template <typename T>
std::vector<StepLog> train_ouroboros(const OuroborosModel<T>& model, std::span<const std::uint8_t> corpus,
                                     const TrainConfig& cfg, const StepCallback& on_step = {});

// Mean loss over fixed batches without recording a tape.
template <typename T>
double evaluate_loss(const std::function<Tensor<T>(const TokenBatch&)>& loss_fn, const std::vector<TokenBatch>& batches);

// Whole-passage windows of at most `seq` tokens each (shorter tail kept).
std::vector<TokenBatch> passage_batches(const Passage& passage, Index seq);

struct GradCheckEntry {
  std::string name;
  Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> worst_per_tensor;
  GradCheckEntry worst;
  Index checked = 0;

  bool passed(double tol) const { return worst.rel_err < tol; }
  std::string to_text() const;
};

// |a − n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
// derivative is ~0 from being judged on round-off alone.
double grad_rel_err(double analytic, double numeric, double floor = 1e-6);

// Central differences against one backward pass. `loss_fn` must build the
// loss from the current parameter values; it is called under a tape once and
// without a tape for every probe. max_coords < 0 checks every coordinate.
GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn, const NamedTensors<double>& params,
                           double h = 1e-5, Index max_coords = -1, std::uint64_t seed = 0);

}  // namespace ouro
