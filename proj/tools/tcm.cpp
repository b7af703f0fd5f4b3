#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tcm/datagen.hpp"
#include "tcm/io.hpp"
#include "tcm/metrics.hpp"
#include "tcm/model.hpp"
#include "tcm/oracle.hpp"
#include "tcm/train.hpp"
#include "tcm/tuner.hpp"

namespace {

using namespace tcm;

namespace fs = std::filesystem;

struct GenFlags {
  std::string families = "attention,convnet,mlp,rnn";
  int programs_per_family = 60;
  std::string machine = "sim-v2";
  int tile_cap = 16;
  int fusion_configs = 8;
  std::uint64_t seed = 42;
  std::string out;
};

struct TrainFlags {
  std::string task;
  std::string data;
  std::string config;
  std::string split_method = "random";
  std::int64_t steps = -1;  // -1 = config/default
  std::uint64_t seed = 1;
  std::string out;
};

struct EvalFlags {
  std::string checkpoint;
  std::string data;
  std::string task;  // optional cross-check against the checkpoint
  std::string split_method = "random";
  std::string split = "test";
  std::string out;
};

struct TuneFlags {
  std::string mode;
  std::string data;
  std::string checkpoint;
  int k = 10;
  std::int64_t model_budget = 200;
  std::int64_t hw_budget = 30;
  int repeats = 1;
  std::uint64_t seed = 7;
  std::string split_method = "random";
  std::string split = "test";
  std::string out;
};

OracleMachine resolve_machine(const std::string& spec) {
  if (spec == "sim-v2" || spec == "sim-v3") return machine_from_preset(spec);
  if (fs::exists(spec)) return load_machine(spec);
  throw std::invalid_argument("unknown machine preset: " + spec);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string split_file_name(const std::string& method) {
  if (method == "random") return "split_random.json";
  if (method == "family_holdout") return "split_family_holdout.json";
  throw std::invalid_argument("unknown split method: " + method);
}

const std::vector<std::string>& split_set(const DatasetSplit& split,
                                          const std::string& name) {
  if (name == "train") return split.train;
  if (name == "validation") return split.validation;
  if (name == "test") return split.test;
  throw std::invalid_argument("unknown split set: " + name);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config key " + key + ": expected bool, got " + v);
}

void apply_config_kv(const std::map<std::string, std::string>& kv,
                     ModelConfig& mc, TrainConfig& tc) {
  for (const auto& [k, v] : kv) {
    if (k == "model.opcode_embedding_dim") mc.opcode_embedding_dim = std::stoi(v);
    else if (k == "model.hidden_dim") mc.hidden_dim = std::stoi(v);
    else if (k == "model.gnn_layers") mc.gnn_layers = std::stoi(v);
    else if (k == "model.neighbor_cap") mc.neighbor_cap = std::stoi(v);
    else if (k == "model.directed") mc.directed = parse_bool(k, v);
    else if (k == "model.reduction") mc.reduction = reduction_from_name(v);
    else if (k == "model.node_final_layers") mc.node_final_layers = std::stoi(v);
    else if (k == "model.placement") {
      if (v == "node_features") mc.placement = Placement::kNodeFeatures;
      else if (v == "kernel_embedding") mc.placement = Placement::kKernelEmbedding;
      else throw std::invalid_argument("unknown placement: " + v);
    } else if (k == "model.transformer_layers") mc.transformer_layers = std::stoi(v);
    else if (k == "model.attention_heads") mc.attention_heads = std::stoi(v);
    else if (k == "model.use_static_perf") mc.use_static_perf = parse_bool(k, v);
    else if (k == "train.steps") tc.steps = std::stoll(v);
    else if (k == "train.batch_n") tc.batch_n = std::stoi(v);
    else if (k == "train.lr") tc.lr = std::stod(v);
    else if (k == "train.lr_decay") tc.lr_decay = std::stod(v);
    else if (k == "train.grad_clip") tc.grad_clip = std::stod(v);
    else if (k == "train.dropout") tc.dropout = std::stod(v);
    else if (k == "train.phi") tc.phi = phi_from_name(v);
    else if (k == "train.eval_every") tc.eval_every = std::stoll(v);
    else throw std::invalid_argument("unknown config key: " + k);
  }
}

void ensure_out_dir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory: " + out);
}

void add_outputs(RunManifest& m, const std::string& dir,
                 const std::vector<std::string>& names) {
  for (const std::string& n : names) m.outputs.emplace_back(n, hash_file(dir + "/" + n));
}

int cmd_gen(const GenFlags& f) {
  std::vector<std::string> families = split_csv(f.families);
  if (families.empty()) throw std::invalid_argument("no families given");
  for (const std::string& fam : families)
    if (std::find(family_names().begin(), family_names().end(), fam) ==
        family_names().end())
      throw std::invalid_argument("unknown family: " + fam);
  if (f.programs_per_family < 1)
    throw std::invalid_argument("programs-per-family must be >= 1");
  OracleMachine machine = resolve_machine(f.machine);
  ensure_out_dir(f.out);

  std::vector<ProgramGraph> programs;
  SizeClass classes[3] = {SizeClass::kSmall, SizeClass::kMedium, SizeClass::kLarge};
  for (const std::string& fam : families)
    for (int i = 0; i < f.programs_per_family; ++i)
      programs.push_back(
          gen_program(fam, classes[i % 3], derive_seed(f.seed, fam, i)));

  TileDataset tile =
      build_tile_dataset(programs, machine, f.tile_cap, derive_seed(f.seed, "tile"));
  for (const std::string& w : tile.warnings) std::cerr << "warning: " << w << "\n";
  FusionDataset fusion = build_fusion_dataset(programs, machine, f.fusion_configs,
                                              derive_seed(f.seed, "fusion"));
  DatasetSplit random_split = split_programs(programs, SplitMethod::kRandom,
                                             {0.8, 0.1, 0.1}, f.seed);
  std::optional<DatasetSplit> holdout_split;
  if (families.size() > 1) {
    bool has_attention =
        std::find(families.begin(), families.end(), "attention") != families.end();
    holdout_split =
        split_programs(programs, SplitMethod::kFamilyHoldout, {0.8, 0.1, 0.1},
                       f.seed, has_attention ? "attention" : families.front());
  }

  save_programs(f.out + "/programs.jsonl", programs);
  save_tile_dataset(f.out + "/kernels.jsonl", f.out + "/tile_samples.jsonl", tile);
  save_fusion_dataset(f.out + "/fusion_samples.jsonl", fusion);
  save_split(f.out + "/split_random.json", random_split);
  if (holdout_split)
    save_split(f.out + "/split_family_holdout.json", *holdout_split);
  atomic_write_file(f.out + "/machine.cfg", machine_to_text(machine));

  std::size_t tile_samples = 0;
  for (const auto& e : tile.entries) tile_samples += e.tiles.size();
  std::cout << "generated " << programs.size() << " programs, "
            << tile.entries.size() << " tile kernels (" << tile_samples
            << " samples), " << fusion.samples.size() << " fusion kernels\n";

  RunManifest m;
  m.command = "gen";
  m.seed = f.seed;
  m.config = {{"families", f.families},
              {"programs_per_family", std::to_string(f.programs_per_family)},
              {"machine", f.machine},
              {"tile_cap", std::to_string(f.tile_cap)},
              {"fusion_configs", std::to_string(f.fusion_configs)}};
  std::vector<std::string> outs = {"programs.jsonl", "kernels.jsonl",
                                   "tile_samples.jsonl", "fusion_samples.jsonl",
                                   "split_random.json", "machine.cfg"};
  if (holdout_split) outs.push_back("split_family_holdout.json");
  add_outputs(m, f.out, outs);
  write_manifest(f.out + "/manifest.json", m);
  return 0;
}

int cmd_train(const TrainFlags& f) {
  ModelConfig mc;
  TrainConfig tc;
  if (!f.config.empty()) apply_config_kv(load_kv_file(f.config), mc, tc);
  if (f.steps > 0) tc.steps = f.steps;
  tc.seed = f.seed;
  Task task;
  if (f.task == "tile") task = Task::kTileRank;
  else if (f.task == "fusion") task = Task::kFusionRegression;
  else throw std::invalid_argument("unknown task: " + f.task);
  tc.task = task;

  std::string split_path = f.data + "/" + split_file_name(f.split_method);
  DatasetSplit split = load_split(split_path);
  ensure_out_dir(f.out);

  RunManifest m;
  m.command = "train";
  m.seed = f.seed;
  m.config = {{"task", f.task},
              {"split_method", f.split_method},
              {"steps", std::to_string(tc.steps)},
              {"config_file", f.config}};
  m.inputs.emplace_back(split_path, hash_file(split_path));

  TrainResult result;
  if (task == Task::kTileRank) {
    std::string kpath = f.data + "/kernels.jsonl";
    std::string spath = f.data + "/tile_samples.jsonl";
    m.inputs.emplace_back(kpath, hash_file(kpath));
    m.inputs.emplace_back(spath, hash_file(spath));
    TileDataset ds = load_tile_dataset(kpath, spath);
    result = train_tile(ds, split, mc, tc);
  } else {
    std::string spath = f.data + "/fusion_samples.jsonl";
    m.inputs.emplace_back(spath, hash_file(spath));
    FusionDataset ds = load_fusion_dataset(spath);
    result = train_fusion(ds, split, mc, tc);
  }

  save_checkpoint(f.out + "/checkpoint_final.json", result.final_model);
  save_checkpoint(f.out + "/checkpoint_best.json", result.best_model);
  write_history_csv(f.out + "/history.csv", result.history);
  std::cout << "trained " << result.final_model.steps << " steps; best val metric "
            << format_double(result.best_val) << " at step " << result.best_step
            << "\n";
  add_outputs(m, f.out, {"checkpoint_final.json", "checkpoint_best.json",
                         "history.csv"});
  write_manifest(f.out + "/manifest.json", m);
  return 0;
}

int cmd_eval(const EvalFlags& f) {
  CostModel model = load_checkpoint(f.checkpoint);
  if (!f.task.empty()) {
    Task want = f.task == "tile" ? Task::kTileRank : Task::kFusionRegression;
    if (f.task != "tile" && f.task != "fusion")
      throw std::invalid_argument("unknown task: " + f.task);
    if (want != model.task)
      throw ArtifactError("checkpoint task mismatch: checkpoint is " +
                          std::string(task_name(model.task)) + ", requested " +
                          f.task);
  }
  std::string split_path = f.data + "/" + split_file_name(f.split_method);
  DatasetSplit split = load_split(split_path);
  const std::vector<std::string>& ids = split_set(split, f.split);
  ensure_out_dir(f.out);

  RunManifest m;
  m.command = "eval";
  m.config = {{"checkpoint", f.checkpoint},
              {"split_method", f.split_method},
              {"split", f.split},
              {"task", task_name(model.task)}};
  m.inputs.emplace_back(f.checkpoint, hash_file(f.checkpoint));
  m.inputs.emplace_back(split_path, hash_file(split_path));

  if (model.task == Task::kTileRank) {
    std::string kpath = f.data + "/kernels.jsonl";
    std::string spath = f.data + "/tile_samples.jsonl";
    m.inputs.emplace_back(kpath, hash_file(kpath));
    m.inputs.emplace_back(spath, hash_file(spath));
    TileDataset ds = load_tile_dataset(kpath, spath);
    TileEvalResult res = eval_tile(model, ds, detail::entries_for(ids, ds));
    write_tile_report_csv(f.out + "/report.csv", res);
    write_tile_report_json(f.out + "/report.json", res);
    std::cout << "tile eval over " << res.programs.size()
              << " programs: mean tile APE "
              << format_double(res.ape_agg.mean) << "%, mean tau "
              << format_double(res.tau_agg.mean) << "\n";
  } else {
    std::string spath = f.data + "/fusion_samples.jsonl";
    m.inputs.emplace_back(spath, hash_file(spath));
    FusionDataset ds = load_fusion_dataset(spath);
    FusionEvalResult res = eval_fusion(model, ds, detail::samples_for(ids, ds));
    write_fusion_report_csv(f.out + "/report.csv", res);
    write_fusion_report_json(f.out + "/report.json", res);
    std::cout << "fusion eval over " << res.programs.size()
              << " programs: mean MAPE " << format_double(res.mape_agg.mean)
              << "% (filter " << format_double(res.threshold) << " cycles)\n";
  }
  add_outputs(m, f.out, {"report.csv", "report.json"});
  write_manifest(f.out + "/manifest.json", m);
  return 0;
}

void append_summary_rows(std::vector<TuneRow>& rows, const std::string& strategy,
                         std::int64_t budget) {
  std::vector<double> speedups;
  for (const TuneRow& r : rows)
    if (std::isfinite(r.speedup)) speedups.push_back(r.speedup);
  if (speedups.empty()) return;
  std::sort(speedups.begin(), speedups.end());
  auto stat_row = [&](const char* name, double v) {
    TuneRow r;
    r.program_id = "ALL";
    r.strategy = strategy + "-" + name;
    r.budget = budget;
    r.speedup = v;
    rows.push_back(std::move(r));
  };
  stat_row("min", speedups.front());
  stat_row("median", percentile(speedups, 50.0));
  stat_row("max", speedups.back());
}

int cmd_tune(const TuneFlags& f) {
  bool needs_model = f.mode == "tile-topk" || f.mode == "fusion-model";
  if (f.mode != "tile-exhaustive" && f.mode != "tile-topk" &&
      f.mode != "fusion-hw" && f.mode != "fusion-model")
    throw std::invalid_argument("unknown mode: " + f.mode);
  if (needs_model && f.checkpoint.empty())
    throw ArtifactError("mode " + f.mode + " requires --checkpoint");

  OracleMachine machine = load_machine(f.data + "/machine.cfg");
  std::string split_path = f.data + "/" + split_file_name(f.split_method);
  DatasetSplit split = load_split(split_path);
  const std::vector<std::string>& ids = split_set(split, f.split);
  std::set<std::string> want(ids.begin(), ids.end());
  ensure_out_dir(f.out);

  CostModel model;
  if (needs_model) {
    model = load_checkpoint(f.checkpoint);
    Task need = f.mode == "tile-topk" ? Task::kTileRank : Task::kFusionRegression;
    if (model.task != need)
      throw ArtifactError("checkpoint task mismatch: mode " + f.mode +
                          " needs a " + task_name(need) + " model");
  }

  std::vector<TuneRow> rows;
  if (f.mode == "tile-exhaustive" || f.mode == "tile-topk") {
    TileDataset ds =
        load_tile_dataset(f.data + "/kernels.jsonl", f.data + "/tile_samples.jsonl");
    for (const TileKernelEntry& entry : ds.entries) {
      if (!want.count(entry.kernel.program_id)) continue;
      TuneResult res = f.mode == "tile-exhaustive"
                           ? exhaustive_tile(entry.kernel, machine)
                           : tile_topk(entry.kernel, model, f.k, machine);
      TuneRow r;
      r.program_id = entry.kernel.kernel_id;
      r.strategy = f.mode;
      r.budget = f.mode == "tile-exhaustive" ? res.hw_evals : f.k;
      r.seed = f.seed;
      r.chosen_runtime = res.chosen_runtime;
      r.baseline_runtime = res.baseline_runtime;
      r.exhaustive_runtime = res.exhaustive_runtime;
      r.speedup = res.speedup;
      r.model_evals = res.model_evals;
      r.hw_evals = res.hw_evals;
      rows.push_back(std::move(r));
    }
    if (rows.empty()) throw std::invalid_argument("no kernels in chosen split");
  } else {
    std::vector<ProgramGraph> programs = load_programs(f.data + "/programs.jsonl");
    bool any = false;
    for (const ProgramGraph& program : programs) {
      if (!want.count(program.program_id)) continue;
      any = true;
      double default_rt = oracle_fusion_total(
          program, greedy_fusion_config(program, machine), machine);
      for (int rep = 0; rep < f.repeats; ++rep) {
        std::uint64_t rep_seed = derive_seed(f.seed, program.program_id, rep);
        TuneRow r;
        r.program_id = program.program_id;
        r.strategy = f.mode;
        r.budget = f.hw_budget;
        r.seed = rep_seed;
        if (f.mode == "fusion-hw") {
          SASchedule sched;
          sched.seed = rep_seed;
          TuneResult res = sa_fusion(
              program, machine,
              [&](const FusionConfig& cfg) {
                return oracle_fusion_total(program, cfg, machine);
              },
              sched, f.hw_budget);
          r.chosen_runtime = res.chosen_runtime;
          r.hw_evals = res.hw_evals;
        } else {
          TuneResult res = model_guided_fusion_tune(
              program, model, machine, f.model_budget, f.hw_budget, rep_seed);
          r.chosen_runtime = res.chosen_runtime;
          r.predicted_runtime = res.predicted_runtime;
          r.model_evals = res.model_evals;
          r.hw_evals = res.hw_evals;
          if (!std::isfinite(res.chosen_runtime))
            std::cerr << program.program_id
                      << ": hw budget 0, phase-1 best returned unmeasured\n";
        }
        r.baseline_runtime = default_rt;
        if (std::isfinite(r.chosen_runtime))
          r.speedup = r.baseline_runtime / r.chosen_runtime;
        rows.push_back(std::move(r));
      }
    }
    if (!any) throw std::invalid_argument("no programs in chosen split");
  }
  append_summary_rows(rows, f.mode, f.hw_budget);
  write_tune_csv(f.out + "/tune.csv", rows);
  write_tune_json(f.out + "/tune.json", rows);
  std::cout << "tuned " << rows.size() << " rows (" << f.mode << ")\n";

  RunManifest m;
  m.command = "tune";
  m.seed = f.seed;
  m.config = {{"mode", f.mode},
              {"k", std::to_string(f.k)},
              {"model_budget", std::to_string(f.model_budget)},
              {"hw_budget", std::to_string(f.hw_budget)},
              {"repeats", std::to_string(f.repeats)},
              {"split_method", f.split_method},
              {"split", f.split},
              {"checkpoint", f.checkpoint}};
  m.inputs.emplace_back(split_path, hash_file(split_path));
  if (needs_model)
    m.inputs.emplace_back(f.checkpoint, hash_file(f.checkpoint));
  add_outputs(m, f.out, {"tune.csv", "tune.json"});
  write_manifest(f.out + "/manifest.json", m);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"learned cost model toolkit for tensor-program kernels"};
  app.require_subcommand(1);

  GenFlags gf;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--families", gf.families, "comma-separated program families");
  gen->add_option("--programs-per-family", gf.programs_per_family,
                  "programs per family, cycling size classes");
  gen->add_option("--machine", gf.machine, "machine preset name or config path");
  gen->add_option("--tile-cap", gf.tile_cap, "max tile samples per kernel");
  gen->add_option("--fusion-configs", gf.fusion_configs,
                  "random fusion configs per program");
  gen->add_option("--seed", gf.seed, "master seed");
  gen->add_option("--out", gf.out, "output directory")->required();

  TrainFlags tf;
  CLI::App* train = app.add_subcommand("train", "train a cost model");
  train->add_option("--task", tf.task, "tile or fusion")->required();
  train->add_option("--data", tf.data, "dataset directory")->required();
  train->add_option("--config", tf.config, "key=value config file");
  train->add_option("--split-method", tf.split_method, "random or family_holdout");
  train->add_option("--steps", tf.steps, "training steps");
  train->add_option("--seed", tf.seed, "training seed");
  train->add_option("--out", tf.out, "output directory")->required();

  EvalFlags ef;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ef.checkpoint, "checkpoint path")->required();
  eval->add_option("--data", ef.data, "dataset directory")->required();
  eval->add_option("--task", ef.task, "expected task (tile or fusion)");
  eval->add_option("--split-method", ef.split_method, "random or family_holdout");
  eval->add_option("--split", ef.split, "train, validation, or test");
  eval->add_option("--out", ef.out, "output directory")->required();

  TuneFlags uf;
  CLI::App* tune = app.add_subcommand("tune", "run an autotuning protocol");
  tune->add_option("--mode", uf.mode,
                   "tile-exhaustive, tile-topk, fusion-hw, or fusion-model")
      ->required();
  tune->add_option("--data", uf.data, "dataset directory")->required();
  tune->add_option("--checkpoint", uf.checkpoint, "checkpoint path");
  tune->add_option("--k", uf.k, "top-k tiles to measure");
  tune->add_option("--model-budget", uf.model_budget, "phase-1 model evaluations");
  tune->add_option("--hw-budget", uf.hw_budget, "oracle measurement budget");
  tune->add_option("--repeats", uf.repeats, "seeded repeats per program");
  tune->add_option("--seed", uf.seed, "master seed");
  tune->add_option("--split-method", uf.split_method, "random or family_holdout");
  tune->add_option("--split", uf.split, "train, validation, or test");
  tune->add_option("--out", uf.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(gf);
    if (train->parsed()) return cmd_train(tf);
    if (eval->parsed()) return cmd_eval(ef);
    return cmd_tune(uf);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
