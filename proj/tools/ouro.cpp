#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include "ouro/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ouro;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kUsage = 2, kNumeric = 3, kIo = 4 };

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool f64 = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value run configuration file");
  cmd->add_option("--set", c.overrides, "override one config key (key=value), repeatable");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--out", c.out, "output directory (default: $OURO_OUT_DIR or ./runs)");
  cmd->add_flag("--f64", c.f64, "compute in double precision");
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg = load_run_config(c.config);
  std::map<std::string, std::string> kv;
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    kv[o.substr(0, eq)] = o.substr(eq + 1);
  }
  cfg.apply(kv);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

fs::path out_dir(const Common& c) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("OURO_OUT_DIR"); env && *env) return env;
  return "runs";
}

template <typename F>
auto dispatch(bool f64, F&& f) {
  return f64 ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recursive transformer with a modulation controller: pretrain, convert, train and evaluate"};
  app.require_subcommand(1);

  Common pre, surg, trn, evl, abl;
  std::string base_ckpt, model_ckpt, eval_base, ablate_base;
  std::optional<Index> rank, depth, steps;
  std::optional<double> alpha, lr;
  std::string variant;

  auto* c_pre = app.add_subcommand("pretrain", "train the dense base model on a byte corpus");
  add_common(c_pre, pre);
  c_pre->add_option("--steps", steps, "pretraining steps");

  auto* c_surg = app.add_subcommand("surgery", "split a base model and build the frozen low-rank bases");
  add_common(c_surg, surg);
  c_surg->add_option("--base", base_ckpt, "base checkpoint")->required();
  c_surg->add_option("--rank", rank, "low-rank basis rank");
  c_surg->add_option("--alpha", alpha, "low-rank scaling numerator");

  auto* c_trn = app.add_subcommand("train", "train the controller, gate and step norms of a converted model");
  add_common(c_trn, trn);
  c_trn->add_option("--model", model_ckpt, "converted model checkpoint")->required();
  c_trn->add_option("--variant", variant, "controller | static | nogate | baseline17");
  c_trn->add_option("--depth", depth, "recurrence depth N");
  c_trn->add_option("--steps", steps, "training steps");
  c_trn->add_option("--lr", lr, "peak learning rate");

  auto* c_evl = app.add_subcommand("eval", "per-passage held-out loss against the retained-layer baseline");
  add_common(c_evl, evl);
  c_evl->add_option("--model", model_ckpt, "trained model checkpoint")->required();
  c_evl->add_option("--base", eval_base, "base checkpoint, adds the full model as a reference");

  auto* c_abl = app.add_subcommand("ablate", "sweep variants x depths x ranks x lrs x seeds");
  add_common(c_abl, abl);
  c_abl->add_option("--base", ablate_base, "base checkpoint (pretrained in place if omitted)");

  Index gc_coords = -1;
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference check of every trainable group (f64)");
  c_gc->add_option("--seed", gc_seed, "random seed");
  c_gc->add_option("--coords", gc_coords, "coordinates sampled per tensor (-1 = all)");
  c_gc->add_option("--tol", gc_tol, "relative error tolerance");

  std::string dims = "toy";
  std::string params_config;
  auto* c_params = app.add_subcommand("params", "parameter census");
  c_params->add_option("--dims", dims, "toy | qwen3b")->check(CLI::IsMember({"toy", "qwen3b"}));
  c_params->add_option("--config", params_config, "run configuration for the toy dimensions");

  std::size_t corpus_bytes = 1 << 20;
  std::uint64_t corpus_seed = 0;
  std::string corpus_out = "corpus.txt";
  auto* c_corpus = app.add_subcommand("corpus", "write synthetic English-like training text");
  c_corpus->add_option("--bytes", corpus_bytes, "size in bytes");
  c_corpus->add_option("--seed", corpus_seed, "random seed");
  c_corpus->add_option("--out", corpus_out, "output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*c_pre) {
      RunConfig cfg = resolve_config(pre);
      if (steps) cfg.pretrain.total_steps = *steps;
      cfg.validate();
      dispatch(pre.f64, [&](auto t) { run_pretrain<decltype(t)>(cfg, out_dir(pre), std::cout); });
    } else if (*c_surg) {
      RunConfig cfg = resolve_config(surg);
      if (rank) cfg.ouro.rank = *rank;
      if (alpha) cfg.ouro.alpha = *alpha;
      dispatch(surg.f64, [&](auto t) { run_surgery<decltype(t)>(cfg, base_ckpt, out_dir(surg), std::cout); });
    } else if (*c_trn) {
      RunConfig cfg = resolve_config(trn);
      if (!variant.empty()) cfg.ouro.variant = parse_variant(variant);
      if (depth) cfg.ouro.depth = *depth;
      if (steps) cfg.train.total_steps = *steps;
      if (lr) cfg.train.lr_peak = *lr;
      dispatch(trn.f64, [&](auto t) { run_train<decltype(t)>(cfg, model_ckpt, out_dir(trn), std::cout); });
    } else if (*c_evl) {
      RunConfig cfg = resolve_config(evl);
      std::optional<fs::path> base;
      if (!eval_base.empty()) base = eval_base;
      dispatch(evl.f64, [&](auto t) { run_eval<decltype(t)>(cfg, model_ckpt, base, out_dir(evl), std::cout); });
    } else if (*c_abl) {
      RunConfig cfg = resolve_config(abl);
      std::optional<fs::path> base;
      if (!ablate_base.empty()) base = ablate_base;
      dispatch(abl.f64, [&](auto t) { run_ablate<decltype(t)>(cfg, base, out_dir(abl), std::cout); });
    } else if (*c_gc) {
      const GradCheckReport report = run_gradcheck(gc_seed, gc_coords);
      std::cout << report.to_text();
      if (!report.passed(gc_tol)) {
        std::cerr << "gradcheck failed: worst relative error " << report.worst.rel_err << " >= " << gc_tol << '\n';
        return kNumeric;
      }
    } else if (*c_params) {
      OuroborosConfig oc = qwen3b_config();
      if (dims == "toy") {
        RunConfig cfg;
        if (!params_config.empty()) cfg = load_run_config(params_config);
        oc = cfg.ouro;
      }
      std::cout << census_from_config(oc).to_text();
    } else if (*c_corpus) {
      write_text(corpus_out, synthetic_corpus(corpus_bytes, corpus_seed));
    }
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOk;
}
