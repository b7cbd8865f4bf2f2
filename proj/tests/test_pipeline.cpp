#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <sys/wait.h>

#include "ouro/pipeline.hpp"
#include "test_util.hpp"

using namespace ouro;
using namespace ouro::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ouro_pipe_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig tiny_run() {
  RunConfig c;
  c.ouro.model.n_layers = 5;
  c.ouro.model.d_model = 16;
  c.ouro.model.n_heads = 2;
  c.ouro.model.n_kv_heads = 1;
  c.ouro.model.ffn_dim = 32;
  c.ouro.model.max_seq = 32;
  c.ouro.prelude = 1;
  c.ouro.recurrent = 2;
  c.ouro.coda = 1;
  c.ouro.rank = 4;
  c.ouro.controller_width = 8;
  c.ouro.max_steps = 8;
  c.ouro.depth = 2;
  for (TrainConfig* t : {&c.pretrain, &c.train}) {
    t->total_steps = 3;
    t->warmup_steps = 1;
    t->batch = 2;
    t->accum = 1;
    t->seq_len = 16;
    t->log_every = 1;
  }
  c.synthetic_bytes = 20000;
  c.heldout = (fs::path(OURO_SOURCE_DIR) / "data" / "heldout").string();
  c.eval_seq = 16;
  c.sweep.depths = {1, 2};
  c.sweep.ranks = {4};
  c.sweep.lrs = {1e-3};
  c.sweep.seeds = 1;
  return c;
}

int run_cli(const std::string& args, const fs::path& capture) {
  const std::string cmd = std::string(OURO_BINARY) + " " + args + " > " + capture.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) { return read_bytes(p); }

}  // namespace

TEST(RunConfig, UnknownKeyIsNamed) {
  RunConfig c;
  try {
    c.apply({{"train.lr_peek", "1e-3"}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.lr_peek"), std::string::npos);
  }
}

TEST(RunConfig, BadValueIsConfigError) {
  RunConfig c;
  EXPECT_THROW(c.apply({{"train.total_steps", "many"}}), ConfigError);
  EXPECT_THROW(c.apply({{"lora.alpha", "1.5x"}}), ConfigError);
  EXPECT_THROW(c.apply({{"ouro.variant", "dense"}}), ConfigError);
}

TEST(RunConfig, KeyValueRoundTrip) {
  RunConfig c = tiny_run();
  c.apply({{"ouro.variant", "static"}, {"sweep.depths", "1,4"}, {"train.lr_peak", "0.00123"}, {"seed", "17"}});
  EXPECT_EQ(c.ouro.variant, Variant::static_table);
  EXPECT_EQ(c.sweep.depths, (std::vector<Index>{1, 4}));
  RunConfig d;
  d.apply(c.to_key_values());
  EXPECT_EQ(d.to_key_values(), c.to_key_values());
  EXPECT_EQ(d.train.lr_peak, 0.00123);
  EXPECT_EQ(d.seed, 17u);
}

TEST(RunConfig, FileLoadAndValidation) {
  const fs::path dir = scratch_dir("cfg");
  write_text(dir / "run.cfg", "# tiny\nseed = 3\nouro.depth=2\n");
  const RunConfig c = load_run_config(dir / "run.cfg");
  EXPECT_EQ(c.seed, 3u);
  RunConfig bad = tiny_run();
  bad.eval_seq = 64;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = tiny_run();
  bad.sweep.depths = {9};
  EXPECT_THROW(bad.validate(), ConfigError);
  fs::remove_all(dir);
}

TEST(Sweep, CellOrderAndCardinality) {
  SweepSpec s;
  s.variants = {Variant::controller, Variant::static_table};
  s.depths = {1, 4};
  s.ranks = {8};
  s.lrs = {1e-3};
  s.seeds = 1;
  const auto cells = sweep_cells(s, 5);
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0].variant, Variant::controller);
  EXPECT_EQ(cells[0].depth, 1);
  EXPECT_EQ(cells[1].depth, 4);
  EXPECT_EQ(cells[2].variant, Variant::static_table);
  EXPECT_EQ(cells[0].seed, 5u);
  s.seeds = 3;
  EXPECT_EQ(sweep_cells(s, 0).size(), 12u);
}

TEST(Sweep, FailedCellIsFlaggedAndSweepContinues) {
  SweepSpec s;
  s.depths = {1, 4};
  s.ranks = {8};
  s.lrs = {1e-3};
  s.seeds = 1;
  const auto cells = sweep_cells(s, 0);
  Index streamed = 0;
  const RunReport report = run_sweep(
      cells,
      [](const CellSpec& c) -> std::vector<ReportRow> {
        if (c.variant == Variant::controller && c.depth == 4) {
          throw TrainingAborted("non-finite loss", 2, {StepLog{1, 1e-3, 2.0, 1.0, 1.0}});
        }
        ReportRow r{std::string(variant_name(c.variant)), c.depth, c.rank, c.lr, c.seed};
        r.step = 10;
        r.train_loss = c.variant == Variant::controller ? 1.0 : 1.5;
        r.heldout_loss = std::nan("");
        return {r};
      },
      [&](const ReportRow&) { ++streamed; });
  EXPECT_EQ(streamed, static_cast<Index>(report.rows.size()));
  Index flagged = 0, finals = 0;
  for (const auto& r : report.rows) {
    flagged += r.status == "nan";
    finals += r.status == "ok" && r.step == 10;
  }
  EXPECT_EQ(flagged, 1);
  EXPECT_EQ(finals, 3);

  const std::string pivot = report.pivot();
  EXPECT_NE(pivot.find("controller\tstatic\tdelta(static-controller)"), std::string::npos);
  EXPECT_NE(pivot.find("NaN*"), std::string::npos);
  EXPECT_NE(pivot.find("0.5000"), std::string::npos);

  std::istringstream lines(report.to_jsonl());
  std::string line;
  Index parsed = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("variant"));
    EXPECT_TRUE(j["heldout_loss"].is_null());
    ++parsed;
  }
  EXPECT_EQ(parsed, static_cast<Index>(report.rows.size()));
  const std::string tsv = report.to_tsv();
  EXPECT_EQ(tsv.rfind(RunReport::tsv_header(), 0), 0u);
}

TEST(Eval, MeansAndBeatCounts) {
  EvalReport r;
  r.passages = {"a", "b", "c"};
  r.models = {{"baseline17", {2.0, 2.0, 2.0}}, {"controller", {1.0, 2.0, 3.0}}};
  EXPECT_DOUBLE_EQ(r.mean("controller"), 2.0);
  EXPECT_EQ(r.beats("controller", "baseline17"), 1);
  EXPECT_EQ(r.beats("baseline17", "controller"), 1);
  EXPECT_NE(r.to_text().find("avg_loss"), std::string::npos);
}

TEST(ModelFiles, SidecarSitsNextToCheckpoint) {
  EXPECT_EQ(sidecar_path("runs/x/base.ckpt"), fs::path("runs/x/base.cfg"));
}

TEST(Commands, ZeroStepPretrainSavesTheInitialisation) {
  RunConfig c = tiny_run();
  c.pretrain.total_steps = 0;
  c.pretrain.warmup_steps = 0;
  const fs::path out = scratch_dir("pre0");
  std::ostringstream log;
  EXPECT_TRUE(run_pretrain<float>(c, out, log).empty());
  const auto loaded = load_base_model<float>(out / "base.ckpt");
  const auto fresh = init_base_model<float>(c.ouro.model, c.seed);
  const auto a = loaded.named_tensors(), b = fresh.named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tensor.value(), b[i].tensor.value()) << a[i].name;
  EXPECT_TRUE(fs::exists(out / "run.cfg"));
  fs::remove_all(out);
}

TEST(Commands, PretrainIsReproducible) {
  const RunConfig c = tiny_run();
  const fs::path a = scratch_dir("pre_a"), b = scratch_dir("pre_b");
  std::ostringstream log;
  run_pretrain<float>(c, a, log);
  run_pretrain<float>(c, b, log);
  EXPECT_EQ(file_bytes(a / "base.ckpt"), file_bytes(b / "base.ckpt"));
  EXPECT_TRUE(fs::exists(a / "pretrain.log.tsv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Commands, SurgeryTrainEvalChain) {
  const RunConfig c = tiny_run();
  const fs::path out = scratch_dir("chain");
  std::ostringstream log;
  run_pretrain<float>(c, out / "pre", log);
  const auto converted = run_surgery<float>(c, out / "pre" / "base.ckpt", out / "surgery", log);
  EXPECT_TRUE(fs::exists(out / "surgery" / "manifest.tsv"));
  EXPECT_NE(log.str().find("total_trainable"), std::string::npos);

  const RunReport report = run_train<float>(c, out / "surgery" / "ouroboros.ckpt", out / "train", log);
  ASSERT_EQ(report.rows.size(), 4u);
  EXPECT_EQ(report.rows.front().step, 0);
  EXPECT_EQ(report.rows.back().step, 3);
  EXPECT_TRUE(std::isfinite(report.rows.back().heldout_loss));
  EXPECT_TRUE(fs::exists(out / "train" / "report.jsonl"));

  const EvalReport eval = run_eval<float>(c, out / "train" / "trained.ckpt", out / "pre" / "base.ckpt", out / "eval", log);
  EXPECT_EQ(eval.passages.size(), 12u);
  ASSERT_EQ(eval.models.size(), 3u);
  EXPECT_EQ(eval.models[0].first, "full");
  EXPECT_EQ(eval.models[1].first, "baseline17");
  EXPECT_EQ(eval.models[2].first, "controller");
  fs::remove_all(out);
}

TEST(Commands, SurgeryRejectsAnInexactSplit) {
  RunConfig c = tiny_run();
  const fs::path out = scratch_dir("badsplit");
  std::ostringstream log;
  c.pretrain.total_steps = 0;
  c.pretrain.warmup_steps = 0;
  run_pretrain<float>(c, out / "pre", log);
  c.ouro.coda = 3;
  EXPECT_THROW(run_surgery<float>(c, out / "pre" / "base.ckpt", out / "s", log), ConfigError);
  fs::remove_all(out);
}

TEST(Commands, ControllerAndStaticCellsShareTheStepZeroLoss) {
  const RunConfig c = tiny_run();
  OuroborosConfig oc = c.ouro;
  const auto converted = convert_model(init_base_model<double>(oc.model, 1), oc, 2);
  const ByteCorpus corpus = load_corpus(c);
  const auto a = train_cell(converted, CellSpec{Variant::controller, 2, 4, 1e-3, 0}, c, corpus);
  const auto b = train_cell(converted, CellSpec{Variant::static_table, 2, 4, 1e-3, 0}, c, corpus);
  ASSERT_FALSE(a.empty());
  ASSERT_FALSE(b.empty());
  EXPECT_NEAR(a[0].train_loss, b[0].train_loss, 1e-12);
  EXPECT_NEAR(a[0].heldout_loss, b[0].heldout_loss, 1e-12);
  const auto base17 = train_cell(converted, CellSpec{Variant::baseline17, 2, 4, 1e-3, 0}, c, corpus);
  EXPECT_EQ(base17.size(), 1u);
}

TEST(Commands, ModelFileKeepsVariantAndValues) {
  const RunConfig c = tiny_run();
  auto m = convert_model(init_base_model<double>(c.ouro.model, 3), c.ouro, 4);
  std::mt19937_64 rng(5);
  fill_normal(m.gate->b, rng, 1.0);
  const fs::path dir = scratch_dir("modelfile");
  save_ouroboros_model(dir / "m.ckpt", m);
  EXPECT_TRUE(fs::exists(dir / "m.cfg"));
  const auto back = load_ouroboros_model<double>(dir / "m.ckpt");
  EXPECT_EQ(back.config.variant, Variant::controller);
  EXPECT_EQ(back.gate->b.value(), m.gate->b.value());
  const auto as_static = load_ouroboros_model<double>(dir / "m.ckpt", Variant::static_table, 1);
  EXPECT_TRUE(as_static.static_table.has_value());
  EXPECT_EQ(as_static.gate->b.value(), m.gate->b.value());
  fs::remove_all(dir);
}

TEST(GradCheckCommand, PassesOnTheToyModel) {
  const GradCheckReport r = run_gradcheck(0, 8);
  EXPECT_TRUE(r.passed(1e-4)) << r.to_text();
  EXPECT_GT(r.checked, 0);
}

TEST(Cli, ParamsAtFullScale) {
  const fs::path dir = scratch_dir("cli_params");
  ASSERT_EQ(run_cli("params --dims qwen3b", dir / "out.txt"), 0);
  const std::string text = read_text(dir / "out.txt");
  // Controller groups: proj, style, heads, step table.
  for (const char* n : {"524544", "131456", "28672", "8192"}) EXPECT_NE(text.find(n), std::string::npos) << n;
  EXPECT_NE(text.find("9214592"), std::string::npos);
  EXPECT_NE(text.find("8388608"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, ToyCensusSumsToItsTotal) {
  const fs::path dir = scratch_dir("cli_toy");
  ASSERT_EQ(run_cli("params --dims toy", dir / "out.txt"), 0);
  std::istringstream in(read_text(dir / "out.txt"));
  std::string line;
  long long trained = 0, total = -1;
  while (std::getline(in, line)) {
    std::istringstream f(line);
    std::string name, status;
    long long n = 0;
    if (!(f >> name >> n)) continue;
    f >> status;
    if (status == "trained") trained += n;
    if (name == "total_trainable") total = n;
  }
  EXPECT_EQ(trained, total);
  fs::remove_all(dir);
}

TEST(Cli, GradcheckExitsZero) {
  const fs::path dir = scratch_dir("cli_gc");
  EXPECT_EQ(run_cli("gradcheck --coords 6", dir / "out.txt"), 0);
  EXPECT_NE(read_text(dir / "out.txt").find("worst"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, UnknownConfigKeyExitsTwo) {
  const fs::path dir = scratch_dir("cli_bad");
  EXPECT_EQ(run_cli("pretrain --set no.such.key=1 --out " + (dir / "o").string(), dir / "out.txt"), 2);
  EXPECT_NE(read_text(dir / "out.txt").find("no.such.key"), std::string::npos);
  EXPECT_EQ(run_cli("frobnicate", dir / "out2.txt"), 2);
  fs::remove_all(dir);
}
