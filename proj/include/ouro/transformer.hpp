#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ouro/ops.hpp"

namespace ouro {

struct ModelConfig {
  Index n_layers = 8;
  Index d_model = 64;
  Index n_heads = 4;
  Index n_kv_heads = 2;
  Index ffn_dim = 256;
  Index vocab = 256;
  Index max_seq = 256;
  double rope_theta = 10000.0;
  double norm_eps = 1e-6;

  Index head_dim() const { return d_model / n_heads; }
  Index kv_dim() const { return n_kv_heads * head_dim(); }

  // Throws ConfigError on any inconsistency.
  void validate() const;
};

// The seven projections of a decoder layer that receive low-rank updates.
enum class Target : int { q = 0, k, v, o, gate, up, down };
inline constexpr int kNumTargets = 7;
inline constexpr std::array<Target, kNumTargets> kAllTargets{Target::q,    Target::k,  Target::v,   Target::o,
                                                             Target::gate, Target::up, Target::down};

std::string_view target_name(Target t);

// (out, in) extents of a target's weight matrix.
std::pair<Index, Index> target_shape(const ModelConfig& cfg, Target t);

template <typename T>
struct LayerWeights {
  Tensor<T> q, k, v, o;
  Tensor<T> gate, up, down;
  Tensor<T> norm1, norm2;

  const Tensor<T>& target(Target t) const;
  NamedTensors<T> named(const std::string& prefix) const;
};

// Hook for projection k: given the layer input x and frozen weight w,
// returns x·wᵀ plus any extra contribution. Null means a plain linear map.
template <typename T>
using ProjectFn = std::function<Tensor<T>(Target, const Tensor<T>& x, const Tensor<T>& w)>;

template <typename T>
struct BaseModel {
  ModelConfig config;
  Tensor<T> embed;  // [V, d]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;  // [d]
  Tensor<T> head;        // [V, d], untied from embed

  NamedTensors<T> named_tensors() const;
  void set_requires_grad(bool flag) const;
};

template <typename T>
LayerWeights<T> init_layer(const ModelConfig& cfg, std::mt19937_64& rng);

template <typename T>
BaseModel<T> init_base_model(const ModelConfig& cfg, std::uint64_t seed);

// h + Attn(norm1(h)), then + SwiGLU(norm2(·)). Causal over the T axis.
template <typename T>
Tensor<T> layer_forward(const Tensor<T>& h, const LayerWeights<T>& w, const ModelConfig& cfg,
                        const ProjectFn<T>& project = {});

template <typename T>
Tensor<T> embed_tokens(const BaseModel<T>& model, std::span<const std::int32_t> tokens, Index batch, Index seq);

// Final norm then LM head.
template <typename T>
Tensor<T> lm_head(const Tensor<T>& h, const Tensor<T>& final_norm, const Tensor<T>& head, const ModelConfig& cfg);

// tokens: row-major [batch, seq] -> logits [batch, seq, V]
template <typename T>
Tensor<T> model_forward(const BaseModel<T>& model, std::span<const std::int32_t> tokens, Index batch, Index seq);

// Draws N(0, stddev²) into every element.
template <typename T>
void fill_normal(const Tensor<T>& t, std::mt19937_64& rng, double stddev);

}  // namespace ouro
