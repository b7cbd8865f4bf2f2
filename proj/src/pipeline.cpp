#include "ouro/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

namespace ouro {

namespace fs = std::filesystem;

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw ContractError("format_double failed");
  return std::string(buf, end);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N value{};
  const char* first = text.data();
  const char* last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || text.empty()) {
    throw ConfigError("bad value for '" + key + "': '" + text + "'");
  }
  return value;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename N, typename F>
std::string join(const std::vector<N>& xs, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += fmt(xs[i]);
  }
  return out;
}

struct Binding {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

using Bindings = std::map<std::string, Binding>;

void bind_index(Bindings& b, const std::string& key, Index& field) {
  b[key] = {[&field, key](const std::string& v) { field = parse_number<Index>(key, v); },
            [&field] { return std::to_string(field); }};
}

void bind_double(Bindings& b, const std::string& key, double& field) {
  b[key] = {[&field, key](const std::string& v) { field = parse_number<double>(key, v); },
            [&field] { return format_double(field); }};
}

void bind_train(Bindings& b, const std::string& prefix, TrainConfig& t) {
  bind_double(b, prefix + "lr_peak", t.lr_peak);
  bind_double(b, prefix + "lr_min_ratio", t.lr_min_ratio);
  bind_double(b, prefix + "beta1", t.beta1);
  bind_double(b, prefix + "beta2", t.beta2);
  bind_double(b, prefix + "weight_decay", t.weight_decay);
  bind_double(b, prefix + "clip_norm", t.clip_norm);
  bind_double(b, prefix + "adam_eps", t.adam_eps);
  bind_index(b, prefix + "warmup_steps", t.warmup_steps);
  bind_index(b, prefix + "total_steps", t.total_steps);
  bind_index(b, prefix + "batch", t.batch);
  bind_index(b, prefix + "accum", t.accum);
  bind_index(b, prefix + "seq_len", t.seq_len);
  bind_index(b, prefix + "log_every", t.log_every);
  bind_index(b, prefix + "checkpoint_every", t.checkpoint_every);
}

Bindings bindings(RunConfig& c) {
  Bindings b;
  b["seed"] = {[&c](const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
               [&c] { return std::to_string(c.seed); }};
  ModelConfig& m = c.ouro.model;
  bind_index(b, "model.layers", m.n_layers);
  bind_index(b, "model.d_model", m.d_model);
  bind_index(b, "model.heads", m.n_heads);
  bind_index(b, "model.kv_heads", m.n_kv_heads);
  bind_index(b, "model.ffn_dim", m.ffn_dim);
  bind_index(b, "model.vocab", m.vocab);
  bind_index(b, "model.max_seq", m.max_seq);
  bind_double(b, "model.rope_theta", m.rope_theta);
  bind_double(b, "model.norm_eps", m.norm_eps);
  bind_index(b, "split.prelude", c.ouro.prelude);
  bind_index(b, "split.recurrent", c.ouro.recurrent);
  bind_index(b, "split.coda", c.ouro.coda);
  bind_index(b, "lora.rank", c.ouro.rank);
  bind_double(b, "lora.alpha", c.ouro.alpha);
  bind_index(b, "ouro.controller_width", c.ouro.controller_width);
  bind_index(b, "ouro.max_steps", c.ouro.max_steps);
  bind_index(b, "ouro.depth", c.ouro.depth);
  bind_double(b, "ouro.gate_bias", c.ouro.gate_bias);
  b["ouro.variant"] = {[&c](const std::string& v) { c.ouro.variant = parse_variant(v); },
                       [&c] { return std::string(variant_name(c.ouro.variant)); }};
  bind_train(b, "pretrain.", c.pretrain);
  bind_train(b, "train.", c.train);
  b["data.corpus"] = {[&c](const std::string& v) { c.corpus = v; }, [&c] { return c.corpus; }};
  bind_index(b, "data.synthetic_bytes", c.synthetic_bytes);
  b["data.heldout"] = {[&c](const std::string& v) { c.heldout = v; }, [&c] { return c.heldout; }};
  bind_index(b, "eval.seq_len", c.eval_seq);
  bind_index(b, "eval.batches", c.eval_batches);
  b["sweep.variants"] = {[&c](const std::string& v) {
                           c.sweep.variants.clear();
                           for (const auto& s : split_list(v)) c.sweep.variants.push_back(parse_variant(s));
                         },
                         [&c] {
                           return join(c.sweep.variants, [](Variant x) { return std::string(variant_name(x)); });
                         }};
  b["sweep.depths"] = {[&c](const std::string& v) {
                         c.sweep.depths.clear();
                         for (const auto& s : split_list(v)) c.sweep.depths.push_back(parse_number<Index>("sweep.depths", s));
                       },
                       [&c] { return join(c.sweep.depths, [](Index x) { return std::to_string(x); }); }};
  b["sweep.ranks"] = {[&c](const std::string& v) {
                        c.sweep.ranks.clear();
                        for (const auto& s : split_list(v)) c.sweep.ranks.push_back(parse_number<Index>("sweep.ranks", s));
                      },
                      [&c] { return join(c.sweep.ranks, [](Index x) { return std::to_string(x); }); }};
  b["sweep.lrs"] = {[&c](const std::string& v) {
                      c.sweep.lrs.clear();
                      for (const auto& s : split_list(v)) c.sweep.lrs.push_back(parse_number<double>("sweep.lrs", s));
                    },
                    [&c] { return join(c.sweep.lrs, [](double x) { return format_double(x); }); }};
  bind_index(b, "sweep.seeds", c.sweep.seeds);
  return b;
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

RunConfig::RunConfig() {
  pretrain.total_steps = 2000;
  pretrain.warmup_steps = 100;
  pretrain.lr_peak = 1e-3;
  pretrain.batch = 8;
  pretrain.accum = 1;
  pretrain.seq_len = 64;
  pretrain.log_every = 100;
  train = pretrain;
  train.lr_peak = 3e-4;
  eval_seq = 64;
}

void RunConfig::apply(const std::map<std::string, std::string>& kv) {
  Bindings b = bindings(*this);
  for (const auto& [key, value] : kv) {
    auto it = b.find(key);
    if (it == b.end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second.set(value);
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      if (msg.find(key) != std::string::npos) throw;
      throw ConfigError("config key '" + key + "': " + msg);
    }
  }
}

std::map<std::string, std::string> RunConfig::to_key_values() const {
  RunConfig copy = *this;
  std::map<std::string, std::string> out;
  for (const auto& [key, binding] : bindings(copy)) out[key] = binding.get();
  return out;
}

void RunConfig::validate() const {
  ouro.validate();
  pretrain.validate();
  train.validate();
  if (synthetic_bytes < 0) throw ConfigError("data.synthetic_bytes must be non-negative");
  if (eval_seq < 1 || eval_seq > ouro.model.max_seq) throw ConfigError("eval.seq_len must lie in [1, model.max_seq]");
  if (eval_batches < 1) throw ConfigError("eval.batches must be positive");
  if (train.seq_len > ouro.model.max_seq || pretrain.seq_len > ouro.model.max_seq) {
    throw ConfigError("seq_len exceeds model.max_seq");
  }
  if (sweep.seeds < 1) throw ConfigError("sweep.seeds must be positive");
  for (Index d : sweep.depths) {
    if (d < 1 || d > ouro.max_steps) throw ConfigError("sweep.depths entry " + std::to_string(d) + " out of range");
  }
  for (Index r : sweep.ranks) {
    if (r < 1) throw ConfigError("sweep.ranks entries must be positive");
  }
  for (double lr : sweep.lrs) {
    if (!(lr > 0.0)) throw ConfigError("sweep.lrs entries must be positive");
  }
}

RunConfig load_run_config(const fs::path& path) {
  RunConfig cfg;
  cfg.apply(parse_key_values(read_text(path)));
  return cfg;
}

ByteCorpus load_corpus(const RunConfig& cfg) {
  ByteCorpus corpus;
  if (cfg.corpus.empty()) {
    const std::string text = synthetic_corpus(static_cast<std::size_t>(cfg.synthetic_bytes), cfg.seed);
    corpus.train.assign(text.begin(), text.end());
  } else {
    corpus.train = read_bytes(cfg.corpus);
  }
  if (!cfg.heldout.empty() && fs::is_directory(cfg.heldout)) corpus.heldout = read_passages(cfg.heldout);
  corpus.check_disjoint();
  return corpus;
}

// ------------------------------------------------------------ model files

fs::path sidecar_path(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p.replace_extension(".cfg");
  return p;
}

namespace {

std::map<std::string, std::string> model_keys(const OuroborosConfig& oc) {
  RunConfig rc;
  rc.ouro = oc;
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : rc.to_key_values()) {
    if (k.starts_with("model.") || k.starts_with("split.") || k.starts_with("lora.") || k.starts_with("ouro.")) {
      out[k] = v;
    }
  }
  return out;
}

OuroborosConfig read_sidecar(const fs::path& checkpoint) {
  const fs::path side = sidecar_path(checkpoint);
  if (!fs::exists(side)) throw IoError("missing model description " + side.string());
  RunConfig rc;
  rc.apply(parse_key_values(read_text(side)));
  return rc.ouro;
}

}  // namespace

template <typename T>
void save_base_model(const fs::path& path, const BaseModel<T>& model) {
  save_checkpoint(path, model.named_tensors());
  OuroborosConfig oc = toy_config();
  oc.model = model.config;
  auto kv = model_keys(oc);
  std::erase_if(kv, [](const auto& e) { return !e.first.starts_with("model."); });
  write_text(sidecar_path(path), format_key_values(kv));
}

template <typename T>
BaseModel<T> load_base_model(const fs::path& path) {
  const OuroborosConfig oc = read_sidecar(path);
  BaseModel<T> model = init_base_model<T>(oc.model, 0);
  assign_tensors(model.named_tensors(), load_checkpoint<T>(path));
  return model;
}

template <typename T>
void save_ouroboros_model(const fs::path& path, const OuroborosModel<T>& model) {
  save_checkpoint(path, model.named_tensors());
  write_text(sidecar_path(path), format_key_values(model_keys(model.config)));
}

template <typename T>
OuroborosModel<T> skeleton_model(const OuroborosConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const SplitSpec split = cfg.split();
  const BaseModel<T> base = init_base_model<T>(cfg.model, seed);
  OuroborosModel<T> m;
  m.config = cfg;
  m.embed = base.embed;
  for (Index l = 0; l < split.prelude; ++l) m.prelude.push_back(base.layers[static_cast<std::size_t>(l)]);
  m.recurrent = base.layers[static_cast<std::size_t>(split.recurrent)];
  for (Index l = split.n_layers - split.coda; l < split.n_layers; ++l) {
    m.coda.push_back(base.layers[static_cast<std::size_t>(l)]);
  }
  m.final_norm = base.final_norm;
  m.head = base.head;
  m.bases = empty_bases<T>(cfg.model, cfg.rank, cfg.alpha);
  for (const auto& f : m.frozen_tensors()) f.tensor.set_requires_grad(false);
  init_trainables(m, seed);
  return m;
}

template <typename T>
OuroborosModel<T> load_ouroboros_model(const fs::path& path, std::optional<Variant> variant, std::uint64_t seed) {
  OuroborosConfig oc = read_sidecar(path);
  if (variant) {
    oc.variant = *variant;
    if (*variant == Variant::baseline17) oc.depth = 1;
  }
  OuroborosModel<T> m = skeleton_model<T>(oc, seed);
  std::set<std::string> wanted;
  for (const auto& d : m.named_tensors()) wanted.insert(d.name);
  NamedTensors<T> source = load_checkpoint<T>(path);
  std::erase_if(source, [&](const NamedTensor<T>& s) {
    return !wanted.contains(s.name) &&
           (s.name.starts_with("controller.") || s.name.starts_with("static.") || s.name.starts_with("gate.") ||
            s.name.starts_with("stepnorm."));
  });
  assign_tensors(m.frozen_tensors(), source, m.trainable_tensors());
  return m;
}

// ---------------------------------------------------------------- reports

std::string RunReport::tsv_header() {
  return "variant\tdepth\trank\tlr\tseed\tstep\ttrain_loss\theldout_loss\twall_seconds\tstatus";
}

std::string format_row_tsv(const ReportRow& r) {
  std::ostringstream os;
  os << r.variant << '\t' << r.depth << '\t' << r.rank << '\t' << format_double(r.lr) << '\t' << r.seed << '\t'
     << r.step << '\t' << format_double(r.train_loss) << '\t'
     << (std::isnan(r.heldout_loss) ? std::string("-") : format_double(r.heldout_loss)) << '\t'
     << format_double(r.wall_seconds) << '\t' << r.status;
  return os.str();
}

std::string format_row_json(const ReportRow& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"variant", r.variant},
                      {"depth", r.depth},
                      {"rank", r.rank},
                      {"lr", r.lr},
                      {"seed", r.seed},
                      {"step", r.step},
                      {"train_loss", num(r.train_loss)},
                      {"heldout_loss", num(r.heldout_loss)},
                      {"wall_seconds", r.wall_seconds},
                      {"status", r.status}};
  return j.dump();
}

std::string RunReport::to_tsv() const {
  std::string out = tsv_header() + "\n";
  for (const auto& r : rows) out += format_row_tsv(r) + "\n";
  return out;
}

std::string RunReport::to_jsonl() const {
  std::string out;
  for (const auto& r : rows) out += format_row_json(r) + "\n";
  return out;
}

std::string RunReport::pivot() const {
  struct Cell {
    double sum = 0.0;
    int n = 0;
    bool failed = false;
  };
  // Last row of every (variant, depth, rank, lr, seed) run.
  std::map<std::tuple<std::string, Index, Index, double, std::uint64_t>, const ReportRow*> last;
  for (const auto& r : rows) {
    auto key = std::make_tuple(r.variant, r.depth, r.rank, r.lr, r.seed);
    auto it = last.find(key);
    if (it == last.end() || r.step >= it->second->step) last[key] = &r;
  }
  std::map<std::pair<Index, double>, std::map<Index, std::map<std::string, Cell>>> blocks;
  std::vector<std::string> variants;
  for (const auto& [key, row] : last) {
    Cell& c = blocks[{row->rank, row->lr}][row->depth][row->variant];
    if (row->status != "ok" || !std::isfinite(row->train_loss)) {
      c.failed = true;
    } else {
      c.sum += row->train_loss;
      c.n += 1;
    }
    if (std::find(variants.begin(), variants.end(), row->variant) == variants.end()) variants.push_back(row->variant);
  }
  auto order = [](const std::string& v) {
    static const std::vector<std::string> pref{"controller", "static", "nogate", "baseline17"};
    auto it = std::find(pref.begin(), pref.end(), v);
    return it == pref.end() ? pref.size() : static_cast<std::size_t>(it - pref.begin());
  };
  std::stable_sort(variants.begin(), variants.end(),
                   [&](const std::string& a, const std::string& b) { return order(a) < order(b); });
  const bool has_delta = std::find(variants.begin(), variants.end(), "controller") != variants.end() &&
                         std::find(variants.begin(), variants.end(), "static") != variants.end();

  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  auto value = [](const Cell* c) -> std::string {
    if (!c) return "---";
    if (c->failed) return "NaN*";
    std::ostringstream v;
    v << std::fixed << std::setprecision(4) << c->sum / c->n;
    return v.str();
  };
  for (const auto& [block_key, by_depth] : blocks) {
    os << "rank " << block_key.first << ", lr " << format_double(block_key.second)
       << " (final training loss, mean over seeds)\n";
    os << "depth";
    for (const auto& v : variants) os << '\t' << v;
    if (has_delta) os << "\tdelta(static-controller)";
    os << '\n';
    for (const auto& [depth, by_variant] : by_depth) {
      os << depth;
      for (const auto& v : variants) {
        auto it = by_variant.find(v);
        os << '\t' << value(it == by_variant.end() ? nullptr : &it->second);
      }
      if (has_delta) {
        auto c = by_variant.find("controller");
        auto s = by_variant.find("static");
        if (c == by_variant.end() || s == by_variant.end() || c->second.failed || s->second.failed) {
          os << "\t---";
        } else {
          os << '\t' << s->second.sum / s->second.n - c->second.sum / c->second.n;
        }
      }
      os << '\n';
    }
  }
  bool any_failed = false;
  for (const auto& [k, row] : last) any_failed = any_failed || row->status != "ok";
  if (any_failed) os << "NaN* = at least one seed aborted on a non-finite loss\n";
  return os.str();
}

std::vector<CellSpec> sweep_cells(const SweepSpec& sweep, std::uint64_t base_seed) {
  std::vector<CellSpec> cells;
  for (Index rank : sweep.ranks) {
    for (Variant v : sweep.variants) {
      for (Index depth : sweep.depths) {
        for (double lr : sweep.lrs) {
          for (Index s = 0; s < sweep.seeds; ++s) {
            cells.push_back({v, depth, rank, lr, base_seed + static_cast<std::uint64_t>(s)});
          }
        }
      }
    }
  }
  return cells;
}

RunReport run_sweep(const std::vector<CellSpec>& cells, const CellRunner& runner,
                    const std::function<void(const ReportRow&)>& on_row) {
  RunReport report;
  auto emit = [&](const ReportRow& r) {
    report.rows.push_back(r);
    if (on_row) on_row(r);
  };
  for (const auto& cell : cells) {
    ReportRow base{std::string(variant_name(cell.variant)), cell.depth, cell.rank, cell.lr, cell.seed};
    try {
      for (const auto& r : runner(cell)) emit(r);
    } catch (const TrainingAborted& e) {
      for (const auto& log : e.history()) {
        ReportRow r = base;
        r.step = log.step;
        r.train_loss = log.loss;
        r.heldout_loss = nan();
        emit(r);
      }
      ReportRow r = base;
      r.step = e.step();
      r.train_loss = nan();
      r.heldout_loss = nan();
      r.status = "nan";
      emit(r);
    } catch (const NumericError&) {
      ReportRow r = base;
      r.train_loss = nan();
      r.heldout_loss = nan();
      r.status = "nan";
      emit(r);
    }
  }
  return report;
}

// ----------------------------------------------------------------- eval

double EvalReport::mean(const std::string& model) const {
  for (const auto& [name, losses] : models) {
    if (name != model) continue;
    if (losses.empty()) throw DegenerateInputError("no passages evaluated");
    double s = 0.0;
    for (double l : losses) s += l;
    return s / static_cast<double>(losses.size());
  }
  throw ContractError("no model named '" + model + "' in the evaluation");
}

Index EvalReport::beats(const std::string& model, const std::string& reference) const {
  const std::vector<double>* a = nullptr;
  const std::vector<double>* b = nullptr;
  for (const auto& [name, losses] : models) {
    if (name == model) a = &losses;
    if (name == reference) b = &losses;
  }
  if (!a || !b) throw ContractError("beats: unknown model");
  Index n = 0;
  for (std::size_t i = 0; i < a->size(); ++i) n += (*a)[i] < (*b)[i] ? 1 : 0;
  return n;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "passage";
  for (const auto& m : models) os << '\t' << m.first;
  os << '\n';
  for (std::size_t i = 0; i < passages.size(); ++i) {
    os << passages[i];
    for (const auto& m : models) os << '\t' << m.second[i];
    os << '\n';
  }
  const bool has_full = std::any_of(models.begin(), models.end(), [](const auto& m) { return m.first == "full"; });
  const bool has_17 =
      std::any_of(models.begin(), models.end(), [](const auto& m) { return m.first == "baseline17"; });
  const Index n = static_cast<Index>(passages.size());
  os << "\nmodel\tavg_loss\tbeats_17_layer\tbeats_full\n";
  for (const auto& m : models) {
    os << m.first << '\t' << mean(m.first) << '\t';
    if (has_17 && m.first != "baseline17" && m.first != "full") {
      os << beats(m.first, "baseline17") << '/' << n;
    } else {
      os << "---";
    }
    os << '\t';
    if (has_full && m.first != "full") {
      os << beats(m.first, "full") << '/' << n;
    } else {
      os << "---";
    }
    os << '\n';
  }
  return os.str();
}

template <typename T>
std::vector<double> passage_losses(const std::function<Tensor<T>(const TokenBatch&)>& loss_fn,
                                   const std::vector<Passage>& passages, Index seq) {
  std::vector<double> out;
  for (const auto& p : passages) out.push_back(evaluate_loss<T>(loss_fn, passage_batches(p, seq)));
  return out;
}

// ------------------------------------------------------------- commands

namespace {

class LogFile {
 public:
  explicit LogFile(const fs::path& path) : out_(path) {
    if (!out_) throw IoError("cannot open " + path.string());
    out_ << "step\tlr\tloss\tgrad_norm\twall_ms\n";
  }
  void write(const StepLog& log) { out_ << format_step_log(log) << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

void write_resolved_config(const RunConfig& cfg, const fs::path& out) {
  write_text(out / "run.cfg", format_key_values(cfg.to_key_values()));
}

template <typename T>
LossFn<T> ouro_loss_fn(const OuroborosModel<T>& model) {
  return [&model](const TokenBatch& b) { return ouroboros_loss(model, b); };
}

template <typename T>
double heldout_mean(const OuroborosModel<T>& model, const ByteCorpus& corpus, Index seq) {
  if (corpus.heldout.empty()) return nan();
  const auto losses = passage_losses<T>(ouro_loss_fn(model), corpus.heldout, seq);
  double s = 0.0;
  for (double l : losses) s += l;
  return s / static_cast<double>(losses.size());
}

}  // namespace

template <typename T>
std::vector<StepLog> run_pretrain(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  cfg.validate();
  fs::create_directories(out);
  write_resolved_config(cfg, out);
  const ByteCorpus corpus = load_corpus(cfg);
  BaseModel<T> model = init_base_model<T>(cfg.ouro.model, cfg.seed);
  TrainConfig tc = cfg.pretrain;
  tc.seed = cfg.seed;
  LogFile file(out / "pretrain.log.tsv");
  const fs::path ckpt = out / "base.ckpt";
  auto on_step = [&](const StepLog& s) {
    file.write(s);
    if (is_logged(s.step, tc)) log << format_step_log(s) << '\n';
    if (tc.checkpoint_every > 0 && s.step % tc.checkpoint_every == 0) save_base_model(ckpt, model);
  };
  std::vector<StepLog> history;
  try {
    history = train_base(model, corpus.train, tc, on_step);
  } catch (const TrainingAborted&) {
    model.set_requires_grad(false);
    save_base_model(out / "last_good.ckpt", model);
    throw;
  }
  save_base_model(ckpt, model);
  log << "wrote " << ckpt.string() << '\n';
  return history;
}

template <typename T>
OuroborosModel<T> run_surgery(const RunConfig& cfg, const fs::path& base_path, const fs::path& out,
                              std::ostream& log) {
  cfg.ouro.validate();
  fs::create_directories(out);
  const BaseModel<T> base = load_base_model<T>(base_path);
  OuroborosConfig oc = cfg.ouro;
  oc.model = base.config;
  OuroborosModel<T> model = convert_model(base, oc, cfg.seed);
  const fs::path ckpt = out / "ouroboros.ckpt";
  save_ouroboros_model(ckpt, model);
  const std::string manifest = surgery_manifest(model.config.split(), model.bases);
  write_text(out / "manifest.tsv", manifest);
  log << manifest << '\n' << trainable_param_census(model).to_text() << "wrote " << ckpt.string() << '\n';
  return model;
}

template <typename T>
std::vector<ReportRow> train_cell(const OuroborosModel<T>& converted, const CellSpec& cell, const RunConfig& cfg,
                                  const ByteCorpus& corpus) {
  if (converted.config.rank != cell.rank) throw ContractError("train_cell: converted model has another rank");
  OuroborosModel<T> model = with_variant(converted, cell.variant, cell.seed);
  model.config.depth = cell.variant == Variant::baseline17 ? 1 : cell.depth;
  TrainConfig tc = cfg.train;
  tc.lr_peak = cell.lr;
  tc.seed = cell.seed;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  const ReportRow proto{std::string(variant_name(cell.variant)), cell.depth, cell.rank, cell.lr, cell.seed};

  std::vector<ReportRow> rows;
  {
    BatchSampler first(corpus.train, tc.batch, tc.seq_len, tc.seed);
    ReportRow r = proto;
    r.train_loss = static_cast<double>(ouroboros_loss(model, first.next()).item());
    r.heldout_loss = heldout_mean(model, corpus, cfg.eval_seq);
    r.wall_seconds = elapsed();
    rows.push_back(r);
  }
  if (model.trainable_tensors().empty() || tc.total_steps == 0) return rows;

  train_ouroboros(model, corpus.train, tc, [&](const StepLog& s) {
    if (!is_logged(s.step, tc)) return;
    ReportRow r = proto;
    r.step = s.step;
    r.train_loss = s.loss;
    r.heldout_loss = nan();
    r.wall_seconds = elapsed();
    rows.push_back(r);
  });
  rows.back().heldout_loss = heldout_mean(model, corpus, cfg.eval_seq);
  rows.back().wall_seconds = elapsed();
  return rows;
}

template <typename T>
RunReport run_train(const RunConfig& cfg, const fs::path& model_path, const fs::path& out, std::ostream& log) {
  cfg.validate();
  fs::create_directories(out);
  write_resolved_config(cfg, out);
  const ByteCorpus corpus = load_corpus(cfg);
  OuroborosModel<T> model = load_ouroboros_model<T>(model_path, cfg.ouro.variant, cfg.seed);
  model.config.depth = cfg.ouro.variant == Variant::baseline17 ? 1 : cfg.ouro.depth;
  if (model.config.depth > model.config.max_steps) throw ConfigError("ouro.depth exceeds the model's max_steps");
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  const CellSpec cell{cfg.ouro.variant, model.config.depth, model.config.rank, tc.lr_peak, cfg.seed};
  const ReportRow proto{std::string(variant_name(cell.variant)), cell.depth, cell.rank, cell.lr, cell.seed};

  RunReport report;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  {
    BatchSampler first(corpus.train, tc.batch, tc.seq_len, tc.seed);
    ReportRow r = proto;
    r.train_loss = static_cast<double>(ouroboros_loss(model, first.next()).item());
    r.heldout_loss = heldout_mean(model, corpus, cfg.eval_seq);
    report.rows.push_back(r);
  }
  LogFile file(out / "train.log.tsv");
  const fs::path ckpt = out / "trained.ckpt";
  if (!model.trainable_tensors().empty() && tc.total_steps > 0) {
    try {
      train_ouroboros(model, corpus.train, tc, [&](const StepLog& s) {
        file.write(s);
        if (tc.checkpoint_every > 0 && s.step % tc.checkpoint_every == 0) save_ouroboros_model(ckpt, model);
        if (!is_logged(s.step, tc)) return;
        log << format_step_log(s) << '\n';
        ReportRow r = proto;
        r.step = s.step;
        r.train_loss = s.loss;
        r.heldout_loss = nan();
        r.wall_seconds = elapsed();
        report.rows.push_back(r);
      });
    } catch (const TrainingAborted&) {
      save_ouroboros_model(out / "last_good.ckpt", model);
      write_text(out / "report.tsv", report.to_tsv());
      throw;
    }
    report.rows.back().heldout_loss = heldout_mean(model, corpus, cfg.eval_seq);
  }
  save_ouroboros_model(ckpt, model);
  write_text(out / "report.tsv", report.to_tsv());
  write_text(out / "report.jsonl", report.to_jsonl());
  log << "wrote " << ckpt.string() << '\n';
  return report;
}

template <typename T>
EvalReport run_eval(const RunConfig& cfg, const fs::path& model_path, const std::optional<fs::path>& base_path,
                    const fs::path& out, std::ostream& log) {
  if (!fs::is_directory(cfg.heldout)) throw IoError("held-out directory not found: " + cfg.heldout);
  const std::vector<Passage> passages = read_passages(cfg.heldout);
  if (passages.empty()) throw IoError("no passages in " + cfg.heldout);
  const OuroborosModel<T> model = load_ouroboros_model<T>(model_path);
  const Index seq = std::min(cfg.eval_seq, model.config.model.max_seq);

  EvalReport report;
  for (const auto& p : passages) report.passages.push_back(p.name);
  if (base_path) {
    const BaseModel<T> base = load_base_model<T>(*base_path);
    LossFn<T> full = [&base](const TokenBatch& b) {
      const auto in = b.inputs();
      return lm_loss(model_forward(base, std::span<const std::int32_t>(in), b.batch, b.seq), b);
    };
    report.models.emplace_back("full", passage_losses<T>(full, passages, seq));
  }
  LossFn<T> retained = [&model](const TokenBatch& b) {
    const auto in = b.inputs();
    return lm_loss(retained_forward(model, std::span<const std::int32_t>(in), b.batch, b.seq), b);
  };
  report.models.emplace_back("baseline17", passage_losses<T>(retained, passages, seq));
  if (model.config.variant != Variant::baseline17) {
    report.models.emplace_back(std::string(variant_name(model.config.variant)),
                               passage_losses<T>(ouro_loss_fn(model), passages, seq));
  }
  fs::create_directories(out);
  const std::string text = report.to_text();
  write_text(out / "eval.tsv", text);
  log << text;
  return report;
}

template <typename T>
RunReport run_ablate(const RunConfig& cfg, const std::optional<fs::path>& base_path, const fs::path& out,
                     std::ostream& log) {
  cfg.validate();
  fs::create_directories(out);
  write_resolved_config(cfg, out);
  const ByteCorpus corpus = load_corpus(cfg);
  BaseModel<T> base;
  if (base_path) {
    base = load_base_model<T>(*base_path);
  } else {
    log << "no base checkpoint given; pretraining one\n";
    run_pretrain<T>(cfg, out / "base", log);
    base = load_base_model<T>(out / "base" / "base.ckpt");
  }
  std::map<Index, OuroborosModel<T>> converted;
  for (Index r : cfg.sweep.ranks) {
    OuroborosConfig oc = cfg.ouro;
    oc.model = base.config;
    oc.rank = r;
    converted.emplace(r, convert_model(base, oc, cfg.seed));
  }
  std::ofstream tsv(out / "report.tsv");
  std::ofstream jsonl(out / "report.jsonl");
  if (!tsv || !jsonl) throw IoError("cannot write reports under " + out.string());
  tsv << RunReport::tsv_header() << '\n';
  const auto cells = sweep_cells(cfg.sweep, cfg.seed);
  log << "running " << cells.size() << " cells\n";
  RunReport report = run_sweep(
      cells, [&](const CellSpec& c) { return train_cell(converted.at(c.rank), c, cfg, corpus); },
      [&](const ReportRow& r) {
        tsv << format_row_tsv(r) << '\n' << std::flush;
        jsonl << format_row_json(r) << '\n' << std::flush;
        if (r.status != "ok") log << "cell flagged: " << format_row_tsv(r) << '\n';
      });
  const std::string pivot = report.pivot();
  write_text(out / "pivot.txt", pivot);
  log << pivot;
  return report;
}

GradCheckReport run_gradcheck(std::uint64_t seed, Index max_coords) {
  OuroborosConfig oc;
  oc.model.n_layers = 4;
  oc.model.d_model = 16;
  oc.model.n_heads = 2;
  oc.model.n_kv_heads = 1;
  oc.model.ffn_dim = 32;
  oc.model.vocab = 32;
  oc.model.max_seq = 16;
  oc.prelude = 1;
  oc.recurrent = 1;
  oc.coda = 1;
  oc.rank = 4;
  oc.alpha = 8.0;
  oc.controller_width = 8;
  oc.max_steps = 4;
  oc.depth = 2;

  BaseModel<double> base = init_base_model<double>(oc.model, seed);
  std::mt19937_64 rng(seed + 17);
  // Larger weights than the 0.02 init keep every path numerically alive.
  for (const auto& t : base.named_tensors()) {
    if (t.name != "final_norm" && t.name.find("norm") == std::string::npos) fill_normal(t.tensor, rng, 0.3);
  }
  const Index batch = 2, seq = 6;
  std::vector<std::int32_t> tokens(static_cast<std::size_t>(batch * (seq + 1)));
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(oc.model.vocab - 1));
  for (auto& t : tokens) t = tok(rng);
  const TokenBatch tb{batch, seq, tokens};

  GradCheckReport total;
  total.worst.rel_err = -1.0;
  for (Variant v : {Variant::controller, Variant::static_table}) {
    oc.variant = v;
    OuroborosModel<double> model = convert_model(base, oc, seed);
    std::normal_distribution<double> noise(0.0, 0.3);
    for (const auto& p : model.trainable_tensors()) {
      for (Index i = 0; i < p.tensor.numel(); ++i) p.tensor.mutable_value()[i] += noise(rng);
    }
    const GradCheckReport r =
        grad_check([&] { return ouroboros_loss(model, tb); }, model.trainable_tensors(), 1e-5, max_coords, seed);
    for (const auto& e : r.worst_per_tensor) {
      if (v == Variant::static_table && !e.name.starts_with("static.")) continue;
      total.worst_per_tensor.push_back(e);
      if (e.rel_err > total.worst.rel_err) total.worst = e;
    }
    total.checked += r.checked;
  }
  return total;
}

#define OURO_INSTANTIATE_PIPELINE(T)                                                                               \
  template void save_base_model(const fs::path&, const BaseModel<T>&);                                             \
  template BaseModel<T> load_base_model(const fs::path&);                                                          \
  template void save_ouroboros_model(const fs::path&, const OuroborosModel<T>&);                                   \
  template OuroborosModel<T> load_ouroboros_model(const fs::path&, std::optional<Variant>, std::uint64_t);         \
  template OuroborosModel<T> skeleton_model(const OuroborosConfig&, std::uint64_t);                                \
  template std::vector<double> passage_losses(const std::function<Tensor<T>(const TokenBatch&)>&,                  \
                                              const std::vector<Passage>&, Index);                                 \
  template std::vector<StepLog> run_pretrain<T>(const RunConfig&, const fs::path&, std::ostream&);                 \
  template OuroborosModel<T> run_surgery<T>(const RunConfig&, const fs::path&, const fs::path&, std::ostream&);    \
  template std::vector<ReportRow> train_cell(const OuroborosModel<T>&, const CellSpec&, const RunConfig&,          \
                                             const ByteCorpus&);                                                   \
  template RunReport run_train<T>(const RunConfig&, const fs::path&, const fs::path&, std::ostream&);              \
  template EvalReport run_eval<T>(const RunConfig&, const fs::path&, const std::optional<fs::path>&,               \
                                  const fs::path&, std::ostream&);                                                 \
  template RunReport run_ablate<T>(const RunConfig&, const std::optional<fs::path>&, const fs::path&, std::ostream&);

OURO_INSTANTIATE_PIPELINE(float)
OURO_INSTANTIATE_PIPELINE(double)

}  // namespace ouro
