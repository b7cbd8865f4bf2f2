#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ouro/modulation.hpp"
#include "ouro/surgery.hpp"
#include "ouro/transformer.hpp"

namespace ouro {

// Unit of ablation. `nogate_controller` replaces the gated mix by h ← h_new;
// `baseline17` is prelude + recurrent layer + coda run once with no
// modulation, gate or step norm.
enum class Variant { controller, static_table, nogate_controller, baseline17 };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

struct OuroborosConfig {
  ModelConfig model;
  Index prelude = 2;
  Index recurrent = 4;
  Index coda = 2;
  Index rank = 32;
  double alpha = 16.0;
  Index controller_width = 128;  // s
  Index max_steps = 64;          // N_max
  Index depth = 4;               // N
  Variant variant = Variant::controller;
  double gate_bias = -2.0;

  SplitSpec split() const { return SplitSpec::make(model.n_layers, prelude, recurrent, coda); }
  void validate() const;
};

// Full-scale dimensions used for parameter accounting.
OuroborosConfig qwen3b_config();
OuroborosConfig toy_config();

// g = σ(W·[h_new ; h_old] + b); W: [d, 2d] starts at zero, b at gate_bias.
template <typename T>
struct GateParams {
  Tensor<T> w;
  Tensor<T> b;
  NamedTensors<T> named() const { return {{"gate.W", w}, {"gate.b", b}}; }
};

template <typename T>
GateParams<T> init_gate(Index d_model, double bias);

// One learnable RMSNorm scale per recurrence step, all ones at init.
template <typename T>
struct StepNormBank {
  std::vector<Tensor<T>> gammas;
  NamedTensors<T> named() const;
};

template <typename T>
StepNormBank<T> init_step_norms(Index d_model, Index max_steps);

// g ⊙ h_new + (1 − g) ⊙ h_old.
template <typename T>
Tensor<T> gated_mix(const Tensor<T>& h_new, const Tensor<T>& h_old, const GateParams<T>& gate);

template <typename T>
struct OuroborosModel {
  OuroborosConfig config;

  // Frozen.
  Tensor<T> embed;
  std::vector<LayerWeights<T>> prelude;
  LayerWeights<T> recurrent;
  std::vector<LayerWeights<T>> coda;
  Tensor<T> final_norm;
  Tensor<T> head;
  LoraBasisSet<T> bases;

  // Trainable; which of these exist depends on the variant.
  std::optional<ControllerParams<T>> controller;
  std::optional<StaticDiagTable<T>> static_table;
  std::optional<GateParams<T>> gate;
  std::optional<StepNormBank<T>> step_norms;

  NamedTensors<T> frozen_tensors() const;
  NamedTensors<T> trainable_tensors() const;
  NamedTensors<T> named_tensors() const;
};

// Trainable parts for cfg.variant, freshly initialised.
template <typename T>
void init_trainables(OuroborosModel<T>& model, std::uint64_t seed);

// Splits the base model, builds the frozen bases and initialises the
// trainables. Frozen weights are copies, so the base model is untouched.
template <typename T>
OuroborosModel<T> convert_model(const BaseModel<T>& base, const OuroborosConfig& cfg, std::uint64_t seed);

// Same model with another variant's trainables (frozen parts shared).
template <typename T>
OuroborosModel<T> with_variant(const OuroborosModel<T>& model, Variant variant, std::uint64_t seed);

// Switches that Algorithm-style wiring can bypass, for reference forwards.
struct ForwardOptions {
  bool lora = true;
  bool gate = true;
  bool step_norm = true;

  static ForwardOptions for_variant(Variant v);
};

// Hidden states after the prelude (index 0) and after each step.
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> states;
};

// embed → prelude → N × {pool → δ → modulated recurrent layer → StepNorm_t →
// gate} → coda → final norm → head. `mask` ([B, T], optional) restricts
// the pooled summary to real tokens.
template <typename T>
Tensor<T> ouroboros_forward(const OuroborosModel<T>& model, std::span<const std::int32_t> tokens, Index batch,
                            Index seq, Index depth, const Tensor<T>* mask = nullptr,
                            std::optional<ForwardOptions> options = std::nullopt, ForwardTrace<T>* trace = nullptr);

// Plain dense forward over prelude + recurrent + coda.
template <typename T>
Tensor<T> retained_forward(const OuroborosModel<T>& model, std::span<const std::int32_t> tokens, Index batch,
                           Index seq);

struct CensusEntry {
  std::string name;
  Index count = 0;
  bool trainable = false;
};

struct Census {
  std::vector<CensusEntry> entries;

  Index get(std::string_view name) const;
  Index trainable_total() const;
  Index frozen_total() const;
  std::string to_text() const;
};

// Parameter accounting from dimensions alone (no allocation).
Census census_from_config(const OuroborosConfig& cfg);

// Parameter accounting from the tensors a model actually holds.
template <typename T>
Census trainable_param_census(const OuroborosModel<T>& model);

}  // namespace ouro
