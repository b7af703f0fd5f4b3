#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tcm/datagen.hpp"
#include "tcm/oracle.hpp"
#include "tcm/train.hpp"

namespace tcm {

struct Budget {
  std::int64_t model_evals = 0;
  std::int64_t hw_evals = 0;
  std::optional<double> wall_limit;
};

struct TuneResult {
  std::vector<std::int64_t> tile;  // tile strategies
  FusionConfig fusion;             // fusion strategies
  double chosen_runtime = std::numeric_limits<double>::quiet_NaN();
  double baseline_runtime = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> exhaustive_runtime;
  std::optional<double> predicted_runtime;  // model-guided fusion, phase 1
  double speedup = std::numeric_limits<double>::quiet_NaN();
  std::int64_t model_evals = 0;
  std::int64_t hw_evals = 0;
};

enum class SAStart { kDefault, kRandom };

struct SASchedule {
  double t0 = 0.5;
  double alpha = 0.995;
  std::int64_t steps = 0;  // extra cap on proposals; 0 = budget governs
  std::uint64_t seed = 0;
  SAStart start = SAStart::kDefault;
};

// The compiler-default tile: the largest feasible candidate in enumeration
// order. Fig.-5-style speedups are quoted against its measured runtime.
inline std::vector<std::int64_t> default_tile(
    const std::vector<std::vector<std::int64_t>>& tiles) {
  if (tiles.empty()) throw std::invalid_argument("no valid tiles");
  return tiles.back();
}

inline TuneResult exhaustive_tile(const KernelGraph& kernel,
                                  const OracleMachine& machine) {
  auto tiles = enumerate_tile_sizes(kernel, machine);
  TuneResult r;
  int best = 0;
  std::vector<double> measured(tiles.size());
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    measured[i] = measure(kernel, tiles[i], machine, 0).runtime_cycles;
    if (measured[i] < measured[best]) best = static_cast<int>(i);
  }
  r.tile = tiles[best];
  r.chosen_runtime = measured[best];
  r.exhaustive_runtime = measured[best];
  r.baseline_runtime =
      measure(kernel, default_tile(tiles), machine, 0).runtime_cycles;
  r.speedup = r.baseline_runtime / r.chosen_runtime;
  r.hw_evals = static_cast<std::int64_t>(tiles.size());
  return r;
}

inline TuneResult tile_topk(const KernelGraph& kernel, const CostModel& model,
                            int k, const OracleMachine& machine) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (model.task != Task::kTileRank)
    throw std::invalid_argument("tile_topk needs a tile-rank model");
  auto tiles = enumerate_tile_sizes(kernel, machine);
  std::optional<std::array<double, 4>> sp;
  if (model.config.use_static_perf) sp = static_analysis(kernel);

  PreppedKernel prep;
  prep.base = prep_base_input(model.scaler, kernel);
  for (const auto& tile : tiles) {
    KernelFeatures kf;
    kf.tile = tile;
    kf.static_perf = sp;
    prep.config_feats.push_back(detail::scale_kernel_vec(
        model.scaler,
        encode_kernel_features(kf, true, model.config.use_static_perf)));
  }

  std::vector<std::pair<double, int>> scored;
  for (int i = 0; i < static_cast<int>(tiles.size()); ++i)
    scored.emplace_back(
        predict_with(model.params, model.config, Task::kTileRank,
                     assemble_input(prep, i, model.config.placement)),
        i);
  std::sort(scored.begin(), scored.end());

  int kk = std::min<int>(k, static_cast<int>(tiles.size()));
  TuneResult r;
  r.model_evals = static_cast<std::int64_t>(tiles.size());
  r.hw_evals = kk;
  int best = -1;
  double best_rt = std::numeric_limits<double>::infinity();
  for (int rank = 0; rank < kk; ++rank) {
    int i = scored[rank].second;
    double rt = measure(kernel, tiles[i], machine, 0).runtime_cycles;
    if (rt < best_rt) {
      best_rt = rt;
      best = i;
    }
  }
  r.tile = tiles[best];
  r.chosen_runtime = best_rt;
  r.baseline_runtime =
      measure(kernel, default_tile(tiles), machine, 0).runtime_cycles;
  r.speedup = r.baseline_runtime / r.chosen_runtime;
  if (kk == static_cast<int>(tiles.size())) r.exhaustive_runtime = best_rt;
  return r;
}

// Program runtime under a fusion config, matching the dataset convention:
// each kernel measured at its best tile, summed.
inline double oracle_fusion_total(const ProgramGraph& program,
                                  const FusionConfig& cfg,
                                  const OracleMachine& machine,
                                  std::uint64_t seed = 0) {
  double total = 0.0;
  for (const KernelGraph& kernel : decompose(program, cfg)) {
    auto [tile, rt] = best_tile(kernel, machine);
    (void)rt;
    total += measure(kernel, tile, machine, seed).runtime_cycles;
  }
  return total;
}

// Simulated annealing over fusion configs. Energy is ln(objective) so the
// temperature scale is runtime-scale-free. The budget counts objective
// evaluations, start included; budget 0 returns the start config unmeasured.
inline TuneResult sa_fusion(
    const ProgramGraph& program, const OracleMachine& machine,
    const std::function<double(const FusionConfig&)>& objective,
    const SASchedule& schedule, std::int64_t budget) {
  if (!(schedule.alpha > 0.0 && schedule.alpha < 1.0))
    throw std::invalid_argument("alpha must be in (0, 1)");
  FusionConfig current =
      schedule.start == SAStart::kDefault
          ? greedy_fusion_config(program, machine)
          : random_fusion_config(program, machine,
                                 derive_seed(schedule.seed, "start"));
  TuneResult r;
  if (budget <= 0) {
    r.fusion = normalize_fusion_config(current);
    return r;
  }
  double cur_e = std::log(objective(current));
  r.hw_evals = 1;
  FusionConfig best = current;
  double best_e = cur_e;
  auto rng = make_rng(derive_seed(schedule.seed, "sa"));
  std::int64_t step = 0;
  while (r.hw_evals < budget &&
         (schedule.steps <= 0 || step < schedule.steps)) {
    FusionMove move = mutate_fusion_config(program, machine, current, rng);
    if (move.before.empty()) break;  // no feasible mutation left
    double e = std::log(objective(current));
    ++r.hw_evals;
    double delta = e - cur_e;
    double temp = schedule.t0 * std::pow(schedule.alpha, static_cast<double>(step));
    ++step;
    bool accept = delta <= 0.0;
    if (!accept && temp > 0.0) {
      double u = static_cast<double>(rng() >> 11) * 0x1p-53;
      accept = u < std::exp(-delta / temp);
    }
    if (accept) {
      cur_e = e;
      if (e < best_e) {
        best_e = e;
        best = current;
      }
    } else {
      undo_fusion_move(current, move);
    }
  }
  r.fusion = normalize_fusion_config(best);
  r.chosen_runtime = std::exp(best_e);
  return r;
}

// Phase 1: SA over the model's predicted program runtime, recording every
// distinct config it evaluates. Phase 2: measure the top configs by predicted
// runtime on the oracle, best measured wins. hw_budget 0 skips phase 2 and
// returns the predicted best unmeasured (chosen_runtime stays NaN).
inline TuneResult model_guided_fusion_tune(const ProgramGraph& program,
                                           const CostModel& model,
                                           const OracleMachine& machine,
                                           std::int64_t model_budget,
                                           std::int64_t hw_budget,
                                           std::uint64_t seed) {
  if (model_budget < 1) throw std::invalid_argument("model budget must be >= 1");
  if (hw_budget < 0) throw std::invalid_argument("hw budget must be >= 0");
  if (model.task != Task::kFusionRegression)
    throw std::invalid_argument("fusion tuning needs a fusion model");

  std::map<std::string, double> kernel_cache;  // canonical hash -> cycles
  auto predict_kernel = [&](const KernelGraph& kernel) {
    std::string key = canonical_kernel_hash(kernel).hex();
    auto it = kernel_cache.find(key);
    if (it != kernel_cache.end()) return it->second;
    PreppedKernel prep =
        prep_fusion_sample(model.scaler,
                           FusionSample{kernel, static_analysis(kernel), 0.0},
                           model.config.use_static_perf);
    double pred =
        predict_with(model.params, model.config, Task::kFusionRegression,
                     assemble_input(prep, 0, model.config.placement));
    kernel_cache.emplace(std::move(key), pred);
    return pred;
  };

  struct Candidate {
    double predicted;
    FusionConfig config;
  };
  std::map<std::string, Candidate> seen;  // fusion key -> candidate
  auto objective = [&](const FusionConfig& cfg) {
    double total = 0.0;
    for (const KernelGraph& kernel : decompose(program, cfg))
      total += predict_kernel(kernel);
    FusionConfig norm = normalize_fusion_config(cfg);
    std::string key = fusion_config_key(norm);
    seen.emplace(std::move(key), Candidate{total, std::move(norm)});
    return total;
  };

  SASchedule schedule;
  schedule.seed = derive_seed(seed, "model_sa");
  TuneResult phase1 = sa_fusion(program, machine, objective, schedule, model_budget);

  std::vector<const Candidate*> ranked;
  for (const auto& [key, cand] : seen) ranked.push_back(&cand);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Candidate* a, const Candidate* b) {
                     return a->predicted < b->predicted;
                   });

  TuneResult r;
  r.model_evals = phase1.hw_evals;  // phase 1 spends model evaluations
  if (hw_budget == 0) {
    r.fusion = ranked.front()->config;
    r.predicted_runtime = ranked.front()->predicted;
    return r;
  }
  r.baseline_runtime = oracle_fusion_total(
      program, greedy_fusion_config(program, machine), machine,
      derive_seed(seed, "default"));
  int take = std::min<std::int64_t>(hw_budget, static_cast<std::int64_t>(ranked.size()));
  int best = -1;
  double best_rt = std::numeric_limits<double>::infinity();
  for (int i = 0; i < take; ++i) {
    double rt = oracle_fusion_total(program, ranked[i]->config, machine,
                                    derive_seed(seed, "hw", i));
    ++r.hw_evals;
    if (rt < best_rt) {
      best_rt = rt;
      best = i;
    }
  }
  r.fusion = ranked[best]->config;
  r.predicted_runtime = ranked[best]->predicted;
  r.chosen_runtime = best_rt;
  r.speedup = r.baseline_runtime / r.chosen_runtime;
  return r;
}

}  // namespace tcm
