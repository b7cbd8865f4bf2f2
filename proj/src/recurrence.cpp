#include "ouro/recurrence.hpp"

#include <iomanip>
#include <sstream>

namespace ouro {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::controller: return "controller";
    case Variant::static_table: return "static";
    case Variant::nogate_controller: return "nogate";
    case Variant::baseline17: return "baseline17";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  if (name == "controller") return Variant::controller;
  if (name == "static") return Variant::static_table;
  if (name == "nogate") return Variant::nogate_controller;
  if (name == "baseline17" || name == "none") return Variant::baseline17;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected controller, static, nogate, baseline17)");
}

void OuroborosConfig::validate() const {
  model.validate();
  (void)split();
  if (rank < 1) throw ConfigError("rank must be at least 1");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (controller_width < 1) throw ConfigError("controller_width must be at least 1");
  if (max_steps < 1) throw ConfigError("max_steps must be at least 1");
  if (depth < 1) throw ContractError("depth must be at least 1");
  if (depth > max_steps) {
    throw ConfigError("depth " + std::to_string(depth) + " exceeds max_steps " + std::to_string(max_steps));
  }
  if (variant == Variant::baseline17 && depth != 1) throw ConfigError("baseline17 runs the recurrent layer once (depth 1)");
}

OuroborosConfig qwen3b_config() {
  OuroborosConfig c;
  c.model.n_layers = 36;
  c.model.d_model = 2048;
  c.model.n_heads = 16;
  c.model.n_kv_heads = 2;
  c.model.ffn_dim = 11008;
  c.model.vocab = 151936;
  c.model.max_seq = 2048;
  c.prelude = 8;
  c.recurrent = 18;
  c.coda = 8;
  c.rank = 32;
  c.alpha = 16.0;
  c.controller_width = 128;
  c.max_steps = 64;
  c.depth = 8;
  return c;
}

OuroborosConfig toy_config() {
  OuroborosConfig c;
  c.max_steps = 16;
  return c;
}

template <typename T>
GateParams<T> init_gate(Index d_model, double bias) {
  return GateParams<T>{Tensor<T>({d_model, 2 * d_model}, true), Tensor<T>::full({d_model}, static_cast<T>(bias), true)};
}

template <typename T>
NamedTensors<T> StepNormBank<T>::named() const {
  NamedTensors<T> out;
  for (std::size_t t = 0; t < gammas.size(); ++t) out.push_back({"stepnorm." + std::to_string(t), gammas[t]});
  return out;
}

template <typename T>
StepNormBank<T> init_step_norms(Index d_model, Index max_steps) {
  StepNormBank<T> bank;
  for (Index t = 0; t < max_steps; ++t) bank.gammas.push_back(Tensor<T>::full({d_model}, T(1), true));
  return bank;
}

template <typename T>
Tensor<T> gated_mix(const Tensor<T>& h_new, const Tensor<T>& h_old, const GateParams<T>& gate) {
  if (h_new.shape() != h_old.shape()) {
    throw DimensionError("gated_mix: h_new " + shape_str(h_new.shape()) + " vs h_old " + shape_str(h_old.shape()));
  }
  const Tensor<T> g = sigmoid(linear(concat_last(h_new, h_old), gate.w, gate.b));
  return blend(g, h_new, h_old);
}

template <typename T>
NamedTensors<T> OuroborosModel<T>::frozen_tensors() const {
  NamedTensors<T> out{{"embed", embed}};
  for (std::size_t i = 0; i < prelude.size(); ++i) {
    auto part = prelude[i].named("prelude." + std::to_string(i) + ".");
    out.insert(out.end(), part.begin(), part.end());
  }
  auto rec = recurrent.named("recurrent.");
  out.insert(out.end(), rec.begin(), rec.end());
  for (std::size_t i = 0; i < coda.size(); ++i) {
    auto part = coda[i].named("coda." + std::to_string(i) + ".");
    out.insert(out.end(), part.begin(), part.end());
  }
  out.push_back({"final_norm", final_norm});
  out.push_back({"head", head});
  auto lora = bases.named();
  out.insert(out.end(), lora.begin(), lora.end());
  return out;
}

template <typename T>
NamedTensors<T> OuroborosModel<T>::trainable_tensors() const {
  NamedTensors<T> out;
  auto append = [&](const NamedTensors<T>& part) { out.insert(out.end(), part.begin(), part.end()); };
  if (controller) append(controller->named());
  if (static_table) append(static_table->named());
  if (gate) append(gate->named());
  if (step_norms) append(step_norms->named());
  return out;
}

template <typename T>
NamedTensors<T> OuroborosModel<T>::named_tensors() const {
  NamedTensors<T> out = frozen_tensors();
  auto tr = trainable_tensors();
  out.insert(out.end(), tr.begin(), tr.end());
  return out;
}

template <typename T>
void init_trainables(OuroborosModel<T>& model, std::uint64_t seed) {
  const OuroborosConfig& cfg = model.config;
  const Index d = cfg.model.d_model;
  std::mt19937_64 rng(seed ^ 0x6f75726f626f726fULL);
  model.controller.reset();
  model.static_table.reset();
  model.gate.reset();
  model.step_norms.reset();
  switch (cfg.variant) {
    case Variant::controller:
      model.controller = init_controller<T>(d, cfg.controller_width, cfg.rank, cfg.max_steps, rng);
      model.gate = init_gate<T>(d, cfg.gate_bias);
      model.step_norms = init_step_norms<T>(d, cfg.max_steps);
      break;
    case Variant::nogate_controller:
      model.controller = init_controller<T>(d, cfg.controller_width, cfg.rank, cfg.max_steps, rng);
      model.step_norms = init_step_norms<T>(d, cfg.max_steps);
      break;
    case Variant::static_table:
      model.static_table = init_static_table<T>(cfg.rank, cfg.max_steps);
      model.gate = init_gate<T>(d, cfg.gate_bias);
      model.step_norms = init_step_norms<T>(d, cfg.max_steps);
      break;
    case Variant::baseline17:
      break;
  }
}

namespace {

template <typename T>
LayerWeights<T> frozen_copy(const LayerWeights<T>& w) {
  LayerWeights<T> c;
  c.q = w.q.detach();
  c.k = w.k.detach();
  c.v = w.v.detach();
  c.o = w.o.detach();
  c.gate = w.gate.detach();
  c.up = w.up.detach();
  c.down = w.down.detach();
  c.norm1 = w.norm1.detach();
  c.norm2 = w.norm2.detach();
  return c;
}

}  // namespace

template <typename T>
OuroborosModel<T> convert_model(const BaseModel<T>& base, const OuroborosConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (base.config.n_layers != cfg.model.n_layers || base.config.d_model != cfg.model.d_model) {
    throw ConfigError("base model dimensions do not match the conversion config");
  }
  const SplitSpec split = cfg.split();
  OuroborosModel<T> m;
  m.config = cfg;
  m.config.model = base.config;
  m.embed = base.embed.detach();
  for (Index l = 0; l < split.prelude; ++l) m.prelude.push_back(frozen_copy(base.layers[static_cast<std::size_t>(l)]));
  m.recurrent = frozen_copy(base.layers[static_cast<std::size_t>(split.recurrent)]);
  for (Index l = split.n_layers - split.coda; l < split.n_layers; ++l) {
    m.coda.push_back(frozen_copy(base.layers[static_cast<std::size_t>(l)]));
  }
  m.final_norm = base.final_norm.detach();
  m.head = base.head.detach();
  m.bases = build_bases(base, split, cfg.rank, cfg.alpha);
  init_trainables(m, seed);
  return m;
}

template <typename T>
OuroborosModel<T> with_variant(const OuroborosModel<T>& model, Variant variant, std::uint64_t seed) {
  OuroborosModel<T> m = model;
  m.config.variant = variant;
  if (variant == Variant::baseline17) m.config.depth = 1;
  init_trainables(m, seed);
  return m;
}

ForwardOptions ForwardOptions::for_variant(Variant v) {
  switch (v) {
    case Variant::controller:
    case Variant::static_table: return {true, true, true};
    case Variant::nogate_controller: return {true, false, true};
    case Variant::baseline17: return {false, false, false};
  }
  return {};
}

template <typename T>
Tensor<T> ouroboros_forward(const OuroborosModel<T>& model, std::span<const std::int32_t> tokens, Index batch,
                            Index seq, Index depth, const Tensor<T>* mask, std::optional<ForwardOptions> options,
                            ForwardTrace<T>* trace) {
  const OuroborosConfig& cfg = model.config;
  const ModelConfig& mc = cfg.model;
  if (depth < 1) throw ContractError("ouroboros_forward: depth must be at least 1");
  if (depth > cfg.max_steps) {
    throw ConfigError("depth " + std::to_string(depth) + " exceeds max_steps " + std::to_string(cfg.max_steps));
  }
  const ForwardOptions opt = options.value_or(ForwardOptions::for_variant(cfg.variant));
  if (opt.gate && !model.gate) throw ConfigError("forward needs a gate but the model has none");
  if (opt.step_norm && !model.step_norms) throw ConfigError("forward needs step norms but the model has none");
  const bool modulate = opt.lora && (model.controller || model.static_table);
  if (opt.lora && !modulate) throw ConfigError("forward needs a modulation source but the model has none");

  Tensor<T> h = embedding(model.embed, tokens, batch, seq);
  if (seq > mc.max_seq) throw ConfigError("sequence length exceeds max_seq");
  for (const auto& layer : model.prelude) h = layer_forward(h, layer, mc);
  if (trace) trace->states.push_back(h);

  Tensor<T> ones;
  if (modulate && model.controller && !mask) ones = Tensor<T>::full({batch, seq}, T(1));
  const T eps = static_cast<T>(mc.norm_eps);
  for (Index t = 0; t < depth; ++t) {
    Tensor<T> h_new;
    if (modulate) {
      const ModulationOutput<T> mod = model.controller
                                          ? controller_forward(mean_pool(h, mask ? *mask : ones), t, *model.controller)
                                          : static_forward(t, batch, *model.static_table);
      h_new = layer_forward(h, model.recurrent, mc, lora_projector(model.bases, mod));
    } else {
      h_new = layer_forward(h, model.recurrent, mc);
    }
    if (opt.step_norm) h_new = rms_norm(h_new, model.step_norms->gammas[static_cast<std::size_t>(t)], eps);
    h = opt.gate ? gated_mix(h_new, h, *model.gate) : h_new;
    if (trace) trace->states.push_back(h);
  }

  for (const auto& layer : model.coda) h = layer_forward(h, layer, mc);
  return lm_head(h, model.final_norm, model.head, mc);
}

template <typename T>
Tensor<T> retained_forward(const OuroborosModel<T>& model, std::span<const std::int32_t> tokens, Index batch,
                           Index seq) {
  const ModelConfig& mc = model.config.model;
  Tensor<T> h = embedding(model.embed, tokens, batch, seq);
  for (const auto& layer : model.prelude) h = layer_forward(h, layer, mc);
  h = layer_forward(h, model.recurrent, mc);
  for (const auto& layer : model.coda) h = layer_forward(h, layer, mc);
  return lm_head(h, model.final_norm, model.head, mc);
}

Index Census::get(std::string_view name) const {
  Index total = 0;
  for (const auto& e : entries) {
    const std::string_view n = e.name;
    if (n == name || (n.size() > name.size() && n.substr(0, name.size()) == name && n[name.size()] == '.')) {
      total += e.count;
    }
  }
  return total;
}

Index Census::trainable_total() const {
  Index total = 0;
  for (const auto& e : entries) total += e.trainable ? e.count : 0;
  return total;
}

Index Census::frozen_total() const {
  Index total = 0;
  for (const auto& e : entries) total += e.trainable ? 0 : e.count;
  return total;
}

std::string Census::to_text() const {
  std::ostringstream os;
  os << std::left << std::setw(26) << "component" << std::right << std::setw(16) << "parameters"
     << "  status\n";
  for (const auto& e : entries) {
    os << std::left << std::setw(26) << e.name << std::right << std::setw(16) << e.count << "  "
       << (e.trainable ? "trained" : "frozen") << "\n";
  }
  os << std::left << std::setw(26) << "total_trainable" << std::right << std::setw(16) << trainable_total() << "\n";
  os << std::left << std::setw(26) << "total_frozen" << std::right << std::setw(16) << frozen_total() << "\n";
  const double all = static_cast<double>(trainable_total() + frozen_total());
  os << std::left << std::setw(26) << "trainable_fraction" << std::right << std::setw(16) << std::fixed
     << std::setprecision(4) << (all > 0 ? 100.0 * static_cast<double>(trainable_total()) / all : 0.0) << " %\n";
  return os.str();
}

namespace {

Index layer_params(const ModelConfig& m) {
  Index n = 2 * m.d_model;
  for (Target t : kAllTargets) {
    const auto [o, i] = target_shape(m, t);
    n += o * i;
  }
  return n;
}

// Leaf census group for a tensor name.
std::string census_group(const std::string& name) {
  auto starts = [&](std::string_view p) { return name.rfind(p, 0) == 0; };
  if (starts("controller.proj")) return "controller.proj";
  if (starts("controller.style")) return "controller.style";
  if (starts("controller.head")) return "controller.heads";
  if (starts("controller.step_table")) return "controller.step_table";
  if (starts("static.")) return "static.table";
  if (name == "gate.W") return "gate.weights";
  if (name == "gate.b") return "gate.bias";
  if (starts("stepnorm.")) return "step_norms";
  if (starts("prelude.")) return "prelude";
  if (starts("recurrent.")) return "recurrent";
  if (starts("coda.")) return "coda";
  if (starts("lora.")) return "lora_bases";
  return "embeddings_head";
}

}  // namespace

Census census_from_config(const OuroborosConfig& cfg) {
  const ModelConfig& m = cfg.model;
  const Index d = m.d_model, s = cfg.controller_width, r = cfg.rank, n = cfg.max_steps;
  Census c;
  const bool has_controller = cfg.variant == Variant::controller || cfg.variant == Variant::nogate_controller;
  const bool has_gate = cfg.variant == Variant::controller || cfg.variant == Variant::static_table;
  const bool has_norms = cfg.variant != Variant::baseline17;
  if (has_controller) {
    c.entries.push_back({"controller.proj", 2 * s * d + 2 * s, true});
    c.entries.push_back({"controller.style", (2 * s * 3 * s + 2 * s) + (s * 2 * s + s), true});
    c.entries.push_back({"controller.heads", Index{kNumTargets} * r * s, true});
    c.entries.push_back({"controller.step_table", n * s, true});
  }
  if (cfg.variant == Variant::static_table) c.entries.push_back({"static.table", n * Index{kNumTargets} * r, true});
  if (has_gate) {
    c.entries.push_back({"gate.weights", d * 2 * d, true});
    c.entries.push_back({"gate.bias", d, true});
  }
  if (has_norms) c.entries.push_back({"step_norms", n * d, true});
  const Index per_layer = layer_params(m);
  c.entries.push_back({"prelude", cfg.prelude * per_layer, false});
  c.entries.push_back({"recurrent", per_layer, false});
  c.entries.push_back({"coda", cfg.coda * per_layer, false});
  c.entries.push_back({"embeddings_head", 2 * m.vocab * d + d, false});
  Index lora = 0;
  for (Target t : kAllTargets) {
    const auto [o, i] = target_shape(m, t);
    lora += r * (o + i);
  }
  c.entries.push_back({"lora_bases", lora, false});
  return c;
}

template <typename T>
Census trainable_param_census(const OuroborosModel<T>& model) {
  Census c;
  auto add = [&](const NamedTensors<T>& tensors, bool trainable) {
    for (const auto& nt : tensors) {
      const std::string group = census_group(nt.name);
      auto it = std::find_if(c.entries.begin(), c.entries.end(), [&](const CensusEntry& e) { return e.name == group; });
      if (it == c.entries.end()) {
        c.entries.push_back({group, nt.tensor.numel(), trainable});
      } else {
        it->count += nt.tensor.numel();
      }
    }
  };
  add(model.trainable_tensors(), true);
  add(model.frozen_tensors(), false);
  return c;
}

#define OURO_INSTANTIATE_RECURRENCE(T)                                                                           \
  template GateParams<T> init_gate<T>(Index, double);                                                            \
  template struct StepNormBank<T>;                                                                               \
  template StepNormBank<T> init_step_norms<T>(Index, Index);                                                     \
  template Tensor<T> gated_mix(const Tensor<T>&, const Tensor<T>&, const GateParams<T>&);                        \
  template struct OuroborosModel<T>;                                                                             \
  template void init_trainables(OuroborosModel<T>&, std::uint64_t);                                              \
  template OuroborosModel<T> convert_model(const BaseModel<T>&, const OuroborosConfig&, std::uint64_t);          \
  template OuroborosModel<T> with_variant(const OuroborosModel<T>&, Variant, std::uint64_t);                     \
  template Tensor<T> ouroboros_forward(const OuroborosModel<T>&, std::span<const std::int32_t>, Index, Index,     \
                                       Index, const Tensor<T>*, std::optional<ForwardOptions>, ForwardTrace<T>*); \
  template Tensor<T> retained_forward(const OuroborosModel<T>&, std::span<const std::int32_t>, Index, Index);    \
  template Census trainable_param_census(const OuroborosModel<T>&);

OURO_INSTANTIATE_RECURRENCE(float)
OURO_INSTANTIATE_RECURRENCE(double)

}  // namespace ouro
