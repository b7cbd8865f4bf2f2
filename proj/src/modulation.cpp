#include "ouro/modulation.hpp"

#include <cmath>

namespace ouro {

template <typename T>
NamedTensors<T> ControllerParams<T>::named() const {
  NamedTensors<T> out{{"controller.proj.W", proj_w},     {"controller.proj.b", proj_b},
                      {"controller.style1.W", style1_w}, {"controller.style1.b", style1_b},
                      {"controller.style2.W", style2_w}, {"controller.style2.b", style2_b}};
  for (int k = 0; k < kNumTargets; ++k) {
    out.push_back({"controller.head." + std::to_string(k), heads[static_cast<std::size_t>(k)]});
  }
  out.push_back({"controller.step_table", step_table});
  return out;
}

template <typename T>
ControllerParams<T> init_controller(Index d_model, Index width, Index rank, Index max_steps, std::mt19937_64& rng) {
  if (d_model <= 0 || width <= 0 || rank <= 0 || max_steps <= 0) {
    throw ConfigError("controller dimensions must be positive");
  }
  ControllerParams<T> p;
  p.width = width;
  p.rank = rank;
  p.max_steps = max_steps;
  auto dense = [&](Index out_dim, Index in_dim) {
    Tensor<T> w({out_dim, in_dim}, true);
    fill_normal(w, rng, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    return w;
  };
  p.proj_w = dense(2 * width, d_model);
  p.proj_b = Tensor<T>({2 * width}, true);
  p.style1_w = dense(2 * width, 3 * width);
  p.style1_b = Tensor<T>({2 * width}, true);
  p.style2_w = dense(width, 2 * width);
  p.style2_b = Tensor<T>({width}, true);
  for (auto& h : p.heads) h = Tensor<T>({rank, width}, true);
  p.step_table = Tensor<T>({max_steps, width}, true);
  return p;
}

template <typename T>
StaticDiagTable<T> init_static_table(Index rank, Index max_steps) {
  if (rank <= 0 || max_steps <= 0) throw ConfigError("static table dimensions must be positive");
  return StaticDiagTable<T>{Tensor<T>({max_steps, Index{kNumTargets}, rank}, true)};
}

template <typename T>
ModulationOutput<T> controller_forward(const Tensor<T>& pooled, Index step, const ControllerParams<T>& p) {
  if (step < 0 || step >= p.max_steps) {
    throw ConfigError("controller step " + std::to_string(step) + " outside [0, " + std::to_string(p.max_steps) + ")");
  }
  if (pooled.rank() != 2 || pooled.dim(1) != p.proj_w.dim(1)) {
    throw DimensionError("controller_forward: pooled state " + shape_str(pooled.shape()) + " does not match width " +
                         std::to_string(p.proj_w.dim(1)));
  }
  const Index batch = pooled.dim(0);
  const Tensor<T> z = silu(linear(pooled, p.proj_w, p.proj_b));
  const Tensor<T> e = tile_rows(select_row(p.step_table, step), batch);
  const Tensor<T> c = concat_last(z, e);
  const Tensor<T> style = linear(silu(linear(c, p.style1_w, p.style1_b)), p.style2_w, p.style2_b);
  ModulationOutput<T> out;
  for (std::size_t k = 0; k < out.delta.size(); ++k) out.delta[k] = linear(style, p.heads[k]);
  return out;
}

template <typename T>
ModulationOutput<T> static_forward(Index step, Index batch, const StaticDiagTable<T>& table) {
  if (step < 0 || step >= table.max_steps()) {
    throw ConfigError("static table step " + std::to_string(step) + " outside [0, " +
                      std::to_string(table.max_steps()) + ")");
  }
  const Tensor<T> tiled = tile_rows(select_row(table.table, step), batch);  // [B, K, r]
  ModulationOutput<T> out;
  for (int k = 0; k < kNumTargets; ++k) out.delta[static_cast<std::size_t>(k)] = select_middle(tiled, Index{k});
  return out;
}

template <typename T>
Tensor<T> lora_apply(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& delta,
                     double alpha, Index rank) {
  if (a.rank() != 2 || b.rank() != 2 || delta.rank() != 2 || a.dim(0) != rank || b.dim(1) != rank ||
      delta.dim(1) != rank) {
    throw DimensionError("lora_apply: rank " + std::to_string(rank) + " inconsistent with A " + shape_str(a.shape()) +
                         ", B " + shape_str(b.shape()) + ", delta " + shape_str(delta.shape()));
  }
  const Tensor<T> down = scale_rows_per_batch(linear(x, a), delta);
  return scale(linear(down, b), static_cast<T>(alpha / static_cast<double>(rank)));
}

template <typename T>
ProjectFn<T> lora_projector(const LoraBasisSet<T>& bases, const ModulationOutput<T>& modulation) {
  return [&bases, modulation](Target t, const Tensor<T>& x, const Tensor<T>& w) {
    return add(linear(x, w), lora_apply(x, bases.a_of(t), bases.b_of(t), modulation.of(t), bases.alpha, bases.rank));
  };
}

#define OURO_INSTANTIATE_MODULATION(T)                                                                       \
  template struct ControllerParams<T>;                                                                       \
  template ControllerParams<T> init_controller<T>(Index, Index, Index, Index, std::mt19937_64&);             \
  template StaticDiagTable<T> init_static_table<T>(Index, Index);                                            \
  template ModulationOutput<T> controller_forward(const Tensor<T>&, Index, const ControllerParams<T>&);      \
  template ModulationOutput<T> static_forward(Index, Index, const StaticDiagTable<T>&);                      \
  template Tensor<T> lora_apply(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                double, Index);                                                              \
  template ProjectFn<T> lora_projector(const LoraBasisSet<T>&, const ModulationOutput<T>&);

OURO_INSTANTIATE_MODULATION(float)
OURO_INSTANTIATE_MODULATION(double)

}  // namespace ouro
