#include "ouro/training.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

namespace ouro {

void TrainConfig::validate() const {
  if (!(lr_peak > 0.0)) throw ConfigError("lr_peak must be positive");
  if (lr_min_ratio < 0.0 || lr_min_ratio > 1.0) throw ConfigError("lr_min_ratio must lie in [0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (total_steps < 0) throw ConfigError("total_steps must be non-negative");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
  if (total_steps > 0 && warmup_steps >= total_steps) {
    throw ConfigError("warmup_steps (" + std::to_string(warmup_steps) + ") must be below total_steps (" +
                      std::to_string(total_steps) + ")");
  }
  if (batch < 1 || accum < 1 || seq_len < 1) throw ConfigError("batch, accum and seq_len must be positive");
  if (log_every < 1) throw ConfigError("log_every must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
}

double lr_at(Index step, const TrainConfig& cfg) {
  if (step < 0) throw ContractError("lr_at: negative step");
  if (step >= cfg.total_steps) return cfg.lr_min();
  if (step < cfg.warmup_steps) {
    return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_min() + 0.5 * (cfg.lr_peak - cfg.lr_min()) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void adamw_step(const NamedTensors<T>& params, OptimizerState<T>& state, double lr, const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Vec<T>::Zero(p.tensor.numel()));
      state.v.push_back(Vec<T>::Zero(p.tensor.numel()));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("optimizer state does not match the parameter list");
  for (const auto& p : params) {
    if (!p.tensor.requires_grad()) throw FreezingViolation("frozen tensor '" + p.name + "' was handed to the optimizer");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step_lr = static_cast<T>(lr), decay = static_cast<T>(lr * cfg.weight_decay);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2), eps = static_cast<T>(cfg.adam_eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& p = params[i].tensor;
    Vec<T>& value = p.mutable_value();
    Vec<T>& m = state.m[i];
    Vec<T>& v = state.v[i];
    if (p.has_grad()) {
      const Vec<T>& g = p.grad();
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    } else {
      m *= b1;
      v *= b2;
    }
    const auto m_hat = m.array() * inv_bc1;
    const auto v_hat = v.array() * inv_bc2;
    value.array() -= step_lr * (m_hat / (v_hat.sqrt() + eps)) + decay * value.array();
  }
}

template <typename T>
double clip_global_norm(const NamedTensors<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    const double s = static_cast<double>(p.tensor.grad().squaredNorm());
    if (!std::isfinite(s)) throw NumericError("non-finite gradient in '" + p.name + "'");
    sq += s;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      if (p.tensor.has_grad()) p.tensor.grad_accumulator() *= factor;
    }
  }
  return norm;
}

template <typename T>
void audit_frozen(const NamedTensors<T>& frozen) {
  for (const auto& f : frozen) {
    if (f.tensor.requires_grad() || f.tensor.has_grad()) {
      throw FreezingViolation("frozen tensor '" + f.name + "' participates in differentiation");
    }
  }
}

template <typename T>
void zero_grads(const NamedTensors<T>& params) {
  for (const auto& p : params) p.tensor.zero_grad();
}

std::string format_step_log(const StepLog& log) {
  std::ostringstream os;
  os.precision(8);
  os << log.step << '\t' << log.lr << '\t' << log.loss << '\t' << log.grad_norm << '\t' << log.wall_ms;
  return os.str();
}

template <typename T>
std::vector<StepLog> train_loop(const NamedTensors<T>& trainable, const NamedTensors<T>& frozen, const BatchFn& next,
                                const LossFn<T>& loss_fn, const TrainConfig& cfg, OptimizerState<T>& state,
                                const StepCallback& on_step) {
  cfg.validate();
  for (const auto& p : trainable) {
    if (!p.tensor.requires_grad()) throw FreezingViolation("trainable list contains frozen tensor '" + p.name + "'");
  }
  audit_frozen(frozen);
  std::vector<StepLog> history;
  using clock = std::chrono::steady_clock;
  for (Index step = 1; step <= cfg.total_steps; ++step) {
    const auto start = clock::now();
    zero_grads(trainable);
    double loss_sum = 0.0;
    for (Index micro = 0; micro < cfg.accum; ++micro) {
      const TokenBatch batch = next();
      Tape<T> tape;
      const Tensor<T> loss = loss_fn(batch);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        zero_grads(trainable);
        throw TrainingAborted("non-finite loss at step " + std::to_string(step), step, history);
      }
      loss_sum += value;
      tape.backward(scale(loss, static_cast<T>(1.0 / static_cast<double>(cfg.accum))));
    }
    audit_frozen(frozen);
    double grad_norm = 0.0;
    try {
      grad_norm = clip_global_norm(trainable, cfg.clip_norm);
    } catch (const NumericError& e) {
      zero_grads(trainable);
      throw TrainingAborted(std::string(e.what()) + " at step " + std::to_string(step), step, history);
    }
    const double lr = lr_at(step, cfg);
    adamw_step(trainable, state, lr, cfg);
    zero_grads(trainable);
    StepLog log{step, lr, loss_sum / static_cast<double>(cfg.accum), grad_norm,
                std::chrono::duration<double, std::milli>(clock::now() - start).count()};
    history.push_back(log);
    if (on_step) on_step(log);
  }
  return history;
}

template <typename T>
Tensor<T> lm_loss(const Tensor<T>& logits, const TokenBatch& batch) {
  const auto targets = batch.targets();
  return cross_entropy(logits, std::span<const std::int32_t>(targets));
}

template <typename T>
std::vector<StepLog> train_base(const BaseModel<T>& model, std::span<const std::uint8_t> corpus,
                                const TrainConfig& cfg, const StepCallback& on_step) {
  model.set_requires_grad(true);
  BatchSampler sampler(corpus, cfg.batch, cfg.seq_len, cfg.seed);
  OptimizerState<T> state;
  auto loss_fn = [&model](const TokenBatch& b) {
    const auto inputs = b.inputs();
    return lm_loss(model_forward(model, std::span<const std::int32_t>(inputs), b.batch, b.seq), b);
  };
  auto history = train_loop<T>(model.named_tensors(), {}, [&] { return sampler.next(); }, loss_fn, cfg, state, on_step);
  model.set_requires_grad(false);
  return history;
}

template <typename T>
Tensor<T> ouroboros_loss(const OuroborosModel<T>& model, const TokenBatch& batch) {
  const auto inputs = batch.inputs();
  return lm_loss(ouroboros_forward(model, std::span<const std::int32_t>(inputs), batch.batch, batch.seq,
                                   model.config.depth),
                 batch);
}

template <typename T>
std::vector<StepLog> train_ouroboros(const OuroborosModel<T>& model, std::span<const std::uint8_t> corpus,
                                     const TrainConfig& cfg, const StepCallback& on_step) {
  const NamedTensors<T> trainable = model.trainable_tensors();
  const NamedTensors<T> frozen = model.frozen_tensors();
  const Census census = trainable_param_census(model);
  if (census.trainable_total() == 0) throw ConfigError("variant has nothing to train");
  if (census.get("prelude") + census.get("recurrent") + census.get("coda") + census.get("embeddings_head") +
          census.get("lora_bases") !=
      census.frozen_total()) {
    throw FreezingViolation("census found trainable tensors outside the controller, gate and step norms");
  }
  for (const auto& p : trainable) p.tensor.set_requires_grad(true);
  for (const auto& f : frozen) f.tensor.set_requires_grad(false);
  BatchSampler sampler(corpus, cfg.batch, cfg.seq_len, cfg.seed);
  OptimizerState<T> state;
  auto loss_fn = [&model](const TokenBatch& b) { return ouroboros_loss(model, b); };
  return train_loop<T>(trainable, frozen, [&] { return sampler.next(); }, loss_fn, cfg, state, on_step);
}

template <typename T>
double evaluate_loss(const std::function<Tensor<T>(const TokenBatch&)>& loss_fn, const std::vector<TokenBatch>& batches) {
  double total = 0.0, weight = 0.0;
  for (const auto& b : batches) {
    const double w = static_cast<double>(b.batch * b.seq);
    total += w * static_cast<double>(loss_fn(b).item());
    weight += w;
  }
  if (weight == 0.0) throw DegenerateInputError("evaluate_loss: no batches");
  return total / weight;
}

std::vector<TokenBatch> passage_batches(const Passage& passage, Index seq) {
  const auto n = static_cast<Index>(passage.bytes.size());
  if (n < 2) throw DegenerateInputError("passage '" + passage.name + "' is shorter than two bytes");
  std::vector<TokenBatch> out;
  for (Index start = 0; start + 1 < n; start += seq) {
    const Index len = std::min(seq, n - 1 - start);
    const std::size_t offsets[] = {static_cast<std::size_t>(start)};
    out.push_back(batch_at(passage.bytes, offsets, len));
  }
  return out;
}

std::string GradCheckReport::to_text() const {
  std::ostringstream os;
  os.precision(6);
  os << "tensor\tworst_index\tanalytic\tnumeric\trel_err\n";
  for (const auto& e : worst_per_tensor) {
    os << e.name << '\t' << e.index << '\t' << e.analytic << '\t' << e.numeric << '\t' << e.rel_err << '\n';
  }
  os << "checked " << checked << " coordinates; worst " << worst.name << "[" << worst.index << "] rel_err "
     << worst.rel_err << '\n';
  return os.str();
}

double grad_rel_err(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn, const NamedTensors<double>& params,
                           double h, Index max_coords, std::uint64_t seed) {
  zero_grads(params);
  {
    Tape<double> tape;
    tape.backward(loss_fn());
  }
  GradCheckReport report;
  report.worst.rel_err = -1.0;
  std::mt19937_64 rng(seed);
  for (const auto& p : params) {
    const Index n = p.tensor.numel();
    std::vector<Index> coords;
    if (max_coords < 0 || max_coords >= n) {
      for (Index i = 0; i < n; ++i) coords.push_back(i);
    } else {
      std::uniform_int_distribution<Index> pick(0, n - 1);
      for (Index i = 0; i < max_coords; ++i) coords.push_back(pick(rng));
    }
    GradCheckEntry worst{p.name, 0, 0.0, 0.0, -1.0};
    Vec<double>& value = p.tensor.mutable_value();
    for (Index i : coords) {
      const double analytic = p.tensor.has_grad() ? p.tensor.grad()[i] : 0.0;
      const double saved = value[i];
      value[i] = saved + h;
      const double up = loss_fn().item();
      value[i] = saved - h;
      const double down = loss_fn().item();
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = grad_rel_err(analytic, numeric);
      ++report.checked;
      if (err > worst.rel_err) worst = {p.name, i, analytic, numeric, err};
    }
    report.worst_per_tensor.push_back(worst);
    if (worst.rel_err > report.worst.rel_err) report.worst = worst;
  }
  zero_grads(params);
  return report;
}

#define OURO_INSTANTIATE_TRAINING(T)                                                                              \
  template void adamw_step(const NamedTensors<T>&, OptimizerState<T>&, double, const TrainConfig&);               \
  template double clip_global_norm(const NamedTensors<T>&, double);                                               \
  template void audit_frozen(const NamedTensors<T>&);                                                             \
  template void zero_grads(const NamedTensors<T>&);                                                               \
  template std::vector<StepLog> train_loop(const NamedTensors<T>&, const NamedTensors<T>&, const BatchFn&,        \
                                           const LossFn<T>&, const TrainConfig&, OptimizerState<T>&,              \
                                           const StepCallback&);                                                  \
  template Tensor<T> lm_loss(const Tensor<T>&, const TokenBatch&);                                                \
  template std::vector<StepLog> train_base(const BaseModel<T>&, std::span<const std::uint8_t>, const TrainConfig&, \
                                           const StepCallback&);                                                  \
  template Tensor<T> ouroboros_loss(const OuroborosModel<T>&, const TokenBatch&);                                 \
  template std::vector<StepLog> train_ouroboros(const OuroborosModel<T>&, std::span<const std::uint8_t>,          \
                                                const TrainConfig&, const StepCallback&);                         \
  template double evaluate_loss(const std::function<Tensor<T>(const TokenBatch&)>&, const std::vector<TokenBatch>&);

OURO_INSTANTIATE_TRAINING(float)
OURO_INSTANTIATE_TRAINING(double)

}  // namespace ouro
