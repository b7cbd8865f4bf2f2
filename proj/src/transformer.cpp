#include "ouro/transformer.hpp"

#include <cmath>

namespace ouro {

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_kv_heads, "n_kv_heads");
  positive(ffn_dim, "ffn_dim");
  positive(vocab, "vocab");
  positive(max_seq, "max_seq");
  if (n_heads % n_kv_heads != 0) {
    throw ConfigError("n_heads (" + std::to_string(n_heads) + ") is not divisible by n_kv_heads (" +
                      std::to_string(n_kv_heads) + ")");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (head_dim() % 2 != 0) throw ConfigError("head_dim must be even for rotary positions");
  if (!(rope_theta > 0.0)) throw ConfigError("rope_theta must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
}

std::string_view target_name(Target t) {
  switch (t) {
    case Target::q: return "q";
    case Target::k: return "k";
    case Target::v: return "v";
    case Target::o: return "o";
    case Target::gate: return "gate";
    case Target::up: return "up";
    case Target::down: return "down";
  }
  return "?";
}

std::pair<Index, Index> target_shape(const ModelConfig& cfg, Target t) {
  const Index d = cfg.d_model;
  switch (t) {
    case Target::q:
    case Target::o: return {d, d};
    case Target::k:
    case Target::v: return {cfg.kv_dim(), d};
    case Target::gate:
    case Target::up: return {cfg.ffn_dim, d};
    case Target::down: return {d, cfg.ffn_dim};
  }
  return {0, 0};
}

template <typename T>
const Tensor<T>& LayerWeights<T>::target(Target t) const {
  switch (t) {
    case Target::q: return q;
    case Target::k: return k;
    case Target::v: return v;
    case Target::o: return o;
    case Target::gate: return gate;
    case Target::up: return up;
    case Target::down: return down;
  }
  throw ContractError("unknown target");
}

template <typename T>
NamedTensors<T> LayerWeights<T>::named(const std::string& prefix) const {
  NamedTensors<T> out;
  for (Target t : kAllTargets) out.push_back({prefix + std::string(target_name(t)), target(t)});
  out.push_back({prefix + "norm1", norm1});
  out.push_back({prefix + "norm2", norm2});
  return out;
}

template <typename T>
NamedTensors<T> BaseModel<T>::named_tensors() const {
  NamedTensors<T> out{{"embed", embed}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto part = layers[i].named("layers." + std::to_string(i) + ".");
    out.insert(out.end(), part.begin(), part.end());
  }
  out.push_back({"final_norm", final_norm});
  out.push_back({"head", head});
  return out;
}

template <typename T>
void BaseModel<T>::set_requires_grad(bool flag) const {
  for (const auto& nt : named_tensors()) nt.tensor.set_requires_grad(flag);
}

template <typename T>
void fill_normal(const Tensor<T>& t, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  auto& v = t.mutable_value();
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<T>(dist(rng));
}

template <typename T>
LayerWeights<T> init_layer(const ModelConfig& cfg, std::mt19937_64& rng) {
  const double base_std = 0.02;
  const double out_std = base_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  LayerWeights<T> w;
  auto make = [&](Target t, double stddev) {
    const auto [rows, cols] = target_shape(cfg, t);
    Tensor<T> m(Shape{rows, cols});
    fill_normal(m, rng, stddev);
    return m;
  };
  w.q = make(Target::q, base_std);
  w.k = make(Target::k, base_std);
  w.v = make(Target::v, base_std);
  w.o = make(Target::o, out_std);
  w.gate = make(Target::gate, base_std);
  w.up = make(Target::up, base_std);
  w.down = make(Target::down, out_std);
  w.norm1 = Tensor<T>::full({cfg.d_model}, T(1));
  w.norm2 = Tensor<T>::full({cfg.d_model}, T(1));
  return w;
}

template <typename T>
BaseModel<T> init_base_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  BaseModel<T> m;
  m.config = cfg;
  m.embed = Tensor<T>({cfg.vocab, cfg.d_model});
  fill_normal(m.embed, rng, 0.02);
  for (Index i = 0; i < cfg.n_layers; ++i) m.layers.push_back(init_layer<T>(cfg, rng));
  m.final_norm = Tensor<T>::full({cfg.d_model}, T(1));
  m.head = Tensor<T>({cfg.vocab, cfg.d_model});
  fill_normal(m.head, rng, 0.02);
  return m;
}

template <typename T>
Tensor<T> layer_forward(const Tensor<T>& h, const LayerWeights<T>& w, const ModelConfig& cfg,
                        const ProjectFn<T>& project) {
  if (h.rank() != 3 || h.dim(2) != cfg.d_model) {
    throw DimensionError("layer_forward: hidden state " + shape_str(h.shape()) + " does not have width " +
                         std::to_string(cfg.d_model));
  }
  if (h.dim(1) > cfg.max_seq) {
    throw ConfigError("sequence length " + std::to_string(h.dim(1)) + " exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  auto proj = [&](Target t, const Tensor<T>& x) {
    return project ? project(t, x, w.target(t)) : linear(x, w.target(t));
  };
  const T eps = static_cast<T>(cfg.norm_eps);
  const Tensor<T> x1 = rms_norm(h, w.norm1, eps);
  const Tensor<T> q = rope(proj(Target::q, x1), cfg.head_dim(), cfg.rope_theta);
  const Tensor<T> k = rope(proj(Target::k, x1), cfg.head_dim(), cfg.rope_theta);
  const Tensor<T> v = proj(Target::v, x1);
  const Tensor<T> attn = causal_attention(q, k, v, cfg.n_heads, cfg.n_kv_heads);
  const Tensor<T> h2 = add(h, proj(Target::o, attn));
  const Tensor<T> x2 = rms_norm(h2, w.norm2, eps);
  const Tensor<T> act = mul(silu(proj(Target::gate, x2)), proj(Target::up, x2));
  return add(h2, proj(Target::down, act));
}

template <typename T>
Tensor<T> embed_tokens(const BaseModel<T>& model, std::span<const std::int32_t> tokens, Index batch, Index seq) {
  if (seq > model.config.max_seq) {
    throw ConfigError("sequence length " + std::to_string(seq) + " exceeds max_seq " +
                      std::to_string(model.config.max_seq));
  }
  return embedding(model.embed, tokens, batch, seq);
}

template <typename T>
Tensor<T> lm_head(const Tensor<T>& h, const Tensor<T>& final_norm, const Tensor<T>& head, const ModelConfig& cfg) {
  return linear(rms_norm(h, final_norm, static_cast<T>(cfg.norm_eps)), head);
}

template <typename T>
Tensor<T> model_forward(const BaseModel<T>& model, std::span<const std::int32_t> tokens, Index batch, Index seq) {
  Tensor<T> h = embed_tokens(model, tokens, batch, seq);
  for (const auto& layer : model.layers) h = layer_forward(h, layer, model.config);
  return lm_head(h, model.final_norm, model.head, model.config);
}

#define OURO_INSTANTIATE_TRANSFORMER(T)                                                                       \
  template struct LayerWeights<T>;                                                                            \
  template struct BaseModel<T>;                                                                               \
  template void fill_normal(const Tensor<T>&, std::mt19937_64&, double);                                      \
  template LayerWeights<T> init_layer<T>(const ModelConfig&, std::mt19937_64&);                               \
  template BaseModel<T> init_base_model<T>(const ModelConfig&, std::uint64_t);                                \
  template Tensor<T> layer_forward(const Tensor<T>&, const LayerWeights<T>&, const ModelConfig&,              \
                                   const ProjectFn<T>&);                                                      \
  template Tensor<T> embed_tokens(const BaseModel<T>&, std::span<const std::int32_t>, Index, Index);          \
  template Tensor<T> lm_head(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ModelConfig&);        \
  template Tensor<T> model_forward(const BaseModel<T>&, std::span<const std::int32_t>, Index, Index);

OURO_INSTANTIATE_TRANSFORMER(float)
OURO_INSTANTIATE_TRANSFORMER(double)

}  // namespace ouro
