#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ouro/data.hpp"
#include "ouro/recurrence.hpp"
#include "ouro/training.hpp"

namespace ouro {

struct SweepSpec {
  std::vector<Variant> variants{Variant::controller, Variant::static_table};
  std::vector<Index> depths{1, 2, 4, 8, 16};
  std::vector<Index> ranks{8, 32, 64};
  std::vector<double> lrs{3e-4, 1e-3};
  Index seeds = 3;  // seeds run as seed, seed+1, ...
};

// Everything a run needs, settable from a flat key=value file. Keys:
//   seed
//   model.{layers,d_model,heads,kv_heads,ffn_dim,vocab,max_seq,rope_theta,norm_eps}
//   split.{prelude,recurrent,coda}   lora.{rank,alpha}
//   ouro.{controller_width,max_steps,depth,variant,gate_bias}
//   pretrain.* and train.*: lr_peak lr_min_ratio beta1 beta2 weight_decay
//       clip_norm adam_eps warmup_steps total_steps batch accum seq_len
//       log_every checkpoint_every
//   data.{corpus,synthetic_bytes,heldout}   eval.{seq_len,batches}
//   sweep.{variants,depths,ranks,lrs,seeds}  (lists are comma-separated)
struct RunConfig {
  std::uint64_t seed = 0;
  OuroborosConfig ouro = toy_config();
  TrainConfig pretrain;
  TrainConfig train;
  std::string corpus;  // file or directory; empty means synthetic text
  Index synthetic_bytes = 1 << 20;
  std::string heldout = "data/heldout";
  Index eval_seq = 256;
  Index eval_batches = 8;
  SweepSpec sweep;

  RunConfig();

  // Throws ConfigError naming the key on unknown keys or unparsable values.
  void apply(const std::map<std::string, std::string>& kv);
  std::map<std::string, std::string> to_key_values() const;
  void validate() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

// Training corpus (file, directory or synthetic) plus held-out passages when
// the held-out directory exists. Disjointness is checked.
ByteCorpus load_corpus(const RunConfig& cfg);

// ------------------------------------------------------------ model files
//
// A model is a checkpoint plus a sidecar `.cfg` next to it holding the
// dimensions needed to rebuild the tensor layout.

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

template <typename T>
void save_base_model(const std::filesystem::path& path, const BaseModel<T>& model);
template <typename T>
BaseModel<T> load_base_model(const std::filesystem::path& path);

template <typename T>
void save_ouroboros_model(const std::filesystem::path& path, const OuroborosModel<T>& model);
// Trainables missing from the file (another variant was saved) keep their
// fresh initialisation.
template <typename T>
OuroborosModel<T> load_ouroboros_model(const std::filesystem::path& path, std::optional<Variant> variant = {},
                                       std::uint64_t seed = 0);

// Model with the layout of cfg and placeholder values, for loading into.
template <typename T>
OuroborosModel<T> skeleton_model(const OuroborosConfig& cfg, std::uint64_t seed = 0);

// ---------------------------------------------------------------- reports

struct ReportRow {
  std::string variant;
  Index depth = 0;
  Index rank = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  Index step = 0;
  double train_loss = 0.0;
  double heldout_loss = 0.0;  // NaN when not measured at this step
  double wall_seconds = 0.0;
  std::string status = "ok";  // "ok" or "nan"
};

struct RunReport {
  std::vector<ReportRow> rows;

  static std::string tsv_header();
  std::string to_tsv() const;
  std::string to_jsonl() const;
  // Final-step training loss averaged over seeds, one block per (rank, lr):
  // rows are depths, columns the variants, then Δ = static − controller.
  std::string pivot() const;
};

std::string format_row_tsv(const ReportRow& row);
std::string format_row_json(const ReportRow& row);

struct CellSpec {
  Variant variant = Variant::controller;
  Index depth = 1;
  Index rank = 32;
  double lr = 3e-4;
  std::uint64_t seed = 0;
};

// Runs one sweep cell and returns its rows. A NumericError (including
// TrainingAborted) marks the cell as failed instead of stopping the sweep.
using CellRunner = std::function<std::vector<ReportRow>(const CellSpec&)>;

std::vector<CellSpec> sweep_cells(const SweepSpec& sweep, std::uint64_t base_seed);
RunReport run_sweep(const std::vector<CellSpec>& cells, const CellRunner& runner,
                    const std::function<void(const ReportRow&)>& on_row = {});

// ----------------------------------------------------------------- eval

struct EvalReport {
  std::vector<std::string> passages;
  // Model label → loss per passage, in passage order.
  std::vector<std::pair<std::string, std::vector<double>>> models;

  double mean(const std::string& model) const;
  // Passages on which `model` has strictly lower loss than `reference`.
  Index beats(const std::string& model, const std::string& reference) const;
  std::string to_text() const;
};

template <typename T>
std::vector<double> passage_losses(const std::function<Tensor<T>(const TokenBatch&)>& loss_fn,
                                   const std::vector<Passage>& passages, Index seq);

// ------------------------------------------------------------- commands

template <typename T>
std::vector<StepLog> run_pretrain(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);

template <typename T>
OuroborosModel<T> run_surgery(const RunConfig& cfg, const std::filesystem::path& base,
                              const std::filesystem::path& out, std::ostream& log);

template <typename T>
RunReport run_train(const RunConfig& cfg, const std::filesystem::path& model, const std::filesystem::path& out,
                    std::ostream& log);

template <typename T>
EvalReport run_eval(const RunConfig& cfg, const std::filesystem::path& model,
                    const std::optional<std::filesystem::path>& base, const std::filesystem::path& out,
                    std::ostream& log);

// Converts the base once per rank and trains every cell of cfg.sweep.
template <typename T>
RunReport run_ablate(const RunConfig& cfg, const std::optional<std::filesystem::path>& base,
                     const std::filesystem::path& out, std::ostream& log);

// Trains one cell starting from a converted model. Rows: step 0, each
// logged step, and the final step (with held-out loss when passages exist).
template <typename T>
std::vector<ReportRow> train_cell(const OuroborosModel<T>& converted, const CellSpec& cell, const RunConfig& cfg,
                                  const ByteCorpus& corpus);

// Full toy loss (d=16, N=2) in f64 with randomised trainables, every
// trainable group of the controller and static variants.
GradCheckReport run_gradcheck(std::uint64_t seed, Index max_coords = 24);

}  // namespace ouro
