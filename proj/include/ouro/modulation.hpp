#pragma once

#include <array>
#include <random>

#include "ouro/surgery.hpp"
#include "ouro/transformer.hpp"

namespace ouro {

// Hypernetwork that maps the pooled hidden state and the step index to one
// diagonal vector per LoRA target:
//   z = SiLU(proj·h̄ + b)                     [B, 2s]
//   c = [z ; step_table[t]]                  [B, 3s]
//   y = style2 · SiLU(style1·c + b1) + b2    [B, s]
//   δ_k = head_k · y                         [B, r]
// Heads have no bias and start at zero, so δ ≡ 0 until training moves them.
template <typename T>
struct ControllerParams {
  Index width = 0;  // s
  Index rank = 0;   // r
  Index max_steps = 0;
  Tensor<T> proj_w, proj_b;      // [2s, d], [2s]
  Tensor<T> style1_w, style1_b;  // [2s, 3s], [2s]
  Tensor<T> style2_w, style2_b;  // [s, 2s], [s]
  std::array<Tensor<T>, kNumTargets> heads;  // [r, s] each
  Tensor<T> step_table;                      // [max_steps, s]

  NamedTensors<T> named() const;
};

template <typename T>
ControllerParams<T> init_controller(Index d_model, Index width, Index rank, Index max_steps, std::mt19937_64& rng);

// Step-indexed alternative: δ depends only on t.
template <typename T>
struct StaticDiagTable {
  Tensor<T> table;  // [max_steps, K, r], zero at init

  Index max_steps() const { return table.dim(0); }
  Index rank() const { return table.dim(2); }
  NamedTensors<T> named() const { return {{"static.table", table}}; }
};

template <typename T>
StaticDiagTable<T> init_static_table(Index rank, Index max_steps);

// Per-example diagonal vectors for one recurrence step, one [B, r] tensor per target.
template <typename T>
struct ModulationOutput {
  std::array<Tensor<T>, kNumTargets> delta;

  const Tensor<T>& of(Target t) const { return delta[static_cast<std::size_t>(t)]; }
  Index batch() const { return delta[0].dim(0); }
  Index rank() const { return delta[0].dim(1); }
};

template <typename T>
ModulationOutput<T> controller_forward(const Tensor<T>& pooled, Index step, const ControllerParams<T>& params);

template <typename T>
ModulationOutput<T> static_forward(Index step, Index batch, const StaticDiagTable<T>& table);

// Additive low-rank path (α/r)·((x·Aᵀ) ⊙ δ)·Bᵀ with δ broadcast over time.
// x: [B, T, in], a: [r, in], b: [out, r], delta: [B, r] -> [B, T, out].
template <typename T>
Tensor<T> lora_apply(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& delta,
                     double alpha, Index rank);

// Projection hook that adds the modulated LoRA path to every target.
template <typename T>
ProjectFn<T> lora_projector(const LoraBasisSet<T>& bases, const ModulationOutput<T>& modulation);

}  // namespace ouro
