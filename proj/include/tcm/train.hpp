#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tcm/datagen.hpp"
#include "tcm/metrics.hpp"
#include "tcm/model.hpp"
#include "tcm/nn.hpp"
#include "tcm/tensor.hpp"

namespace tcm {

enum class Phi { kHinge, kLogistic };

inline const char* phi_name(Phi p) { return p == Phi::kHinge ? "hinge" : "logistic"; }

inline Phi phi_from_name(const std::string& s) {
  if (s == "hinge") return Phi::kHinge;
  if (s == "logistic") return Phi::kLogistic;
  throw std::invalid_argument("unknown phi: " + s);
}

namespace detail {

inline double phi_value(Phi phi, double z) {
  if (phi == Phi::kHinge) return z < 1.0 ? 1.0 - z : 0.0;
  // log(1 + e^-z), stable on both tails
  return z > 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

inline double phi_slope(Phi phi, double z) {
  if (phi == Phi::kHinge) return z < 1.0 ? -1.0 : 0.0;
  // -sigmoid(-z)
  return z >= 0.0 ? -std::exp(-z) / (1.0 + std::exp(-z))
                  : -1.0 / (1.0 + std::exp(z));
}

}  // namespace detail

// Eq.-1 pairwise rank loss: ordered pairs where the true runtime says i is
// slower than j, penalized by phi of the score difference, normalized by the
// unordered pair count n(n-1)/2 exactly as printed.
inline double rank_loss(const std::vector<double>& scores,
                        const std::vector<double>& targets, Phi phi) {
  std::size_t n = scores.size();
  if (n != targets.size() || n < 2)
    throw std::invalid_argument("rank_loss needs matching lists of size >= 2");
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (targets[i] - targets[j] > 0.0)
        sum += detail::phi_value(phi, scores[i] - scores[j]);
  return sum / (static_cast<double>(n) * (n - 1) / 2.0);
}

inline double mse_log_loss(const std::vector<double>& log_predictions,
                           const std::vector<double>& targets) {
  if (log_predictions.size() != targets.size() || targets.empty())
    throw std::invalid_argument("mse_log_loss needs matching nonempty lists");
  double sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] <= 0.0)
      throw std::invalid_argument("mse_log_loss: nonpositive target");
    double d = log_predictions[i] - std::log(targets[i]);
    sum += d * d;
  }
  return sum / targets.size();
}

// Tape version over a column of stacked scores; gradient d/dp_k sums the
// slopes of every ordered pair k participates in.
inline ad::TNode* rank_loss_node(ad::Graph& g, ad::TNode* scores,
                                 const std::vector<double>& targets, Phi phi) {
  int n = scores->rows();
  if (scores->cols() != 1 || static_cast<std::size_t>(n) != targets.size() || n < 2)
    throw std::invalid_argument("rank_loss needs an n x 1 score column, n >= 2");
  double denom = static_cast<double>(n) * (n - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (targets[i] - targets[j] > 0.0)
        sum += detail::phi_value(phi, scores->val.d[i] - scores->val.d[j]);
  return g.make(ad::Mat::scalar(sum / denom), {scores},
                [scores, targets, phi, denom](ad::TNode& node) {
                  double up = node.grad.d[0] / denom;
                  ad::Mat& gs = ad::accum(scores);
                  int m = scores->rows();
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < m; ++j)
                      if (targets[i] - targets[j] > 0.0) {
                        double s = detail::phi_slope(
                            phi, scores->val.d[i] - scores->val.d[j]);
                        gs.d[i] += up * s;
                        gs.d[j] -= up * s;
                      }
                });
}

inline ad::TNode* mse_log_loss_node(ad::Graph& g, ad::TNode* log_preds,
                                    const std::vector<double>& targets) {
  int n = log_preds->rows();
  if (log_preds->cols() != 1 || static_cast<std::size_t>(n) != targets.size() ||
      n < 1)
    throw std::invalid_argument("mse_log_loss needs an n x 1 column");
  std::vector<double> logt(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] <= 0.0)
      throw std::invalid_argument("mse_log_loss: nonpositive target");
    logt[i] = std::log(targets[i]);
  }
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = log_preds->val.d[i] - logt[i];
    sum += d * d;
  }
  return g.make(ad::Mat::scalar(sum / n), {log_preds},
                [log_preds, logt = std::move(logt)](ad::TNode& node) {
                  double up = node.grad.d[0];
                  ad::Mat& gp = ad::accum(log_preds);
                  int m = log_preds->rows();
                  for (int i = 0; i < m; ++i)
                    gp.d[i] += up * 2.0 * (log_preds->val.d[i] - logt[i]) / m;
                });
}

struct TrainConfig {
  Task task = Task::kTileRank;
  std::int64_t steps = 4000;
  int batch_n = 16;
  double lr = 1e-3;
  double lr_decay = 1.0;   // multiplied into lr every 10k steps
  double grad_clip = 0.0;  // 0 = no clipping
  double dropout = 0.1;
  Phi phi = Phi::kHinge;
  std::int64_t eval_every = 500;
  std::uint64_t seed = 0;
};

inline void validate_train_config(const TrainConfig& c) {
  if (c.steps <= 0) throw std::invalid_argument("steps must be > 0");
  if (c.task == Task::kTileRank && c.batch_n < 2)
    throw std::invalid_argument("tile task needs batch n >= 2");
  if (c.batch_n < 1) throw std::invalid_argument("batch n must be >= 1");
  if (c.eval_every <= 0) throw std::invalid_argument("eval_every must be > 0");
}

struct DivergenceError : std::runtime_error {
  std::int64_t step;
  explicit DivergenceError(std::int64_t s)
      : std::runtime_error("training diverged at step " + std::to_string(s)),
        step(s) {}
};

// A kernel encoded once: scaled node block shared by every config, plus the
// scaled kernel-feature vector per config. Batches assemble full inputs from
// these without re-encoding graphs.
struct PreppedKernel {
  ModelInput base;
  std::vector<std::vector<double>> config_feats;
};

namespace detail {

inline std::vector<double> scale_kernel_vec(const FeatureScaler& s,
                                            std::vector<double> raw) {
  if (raw.size() != s.kern_min.size())
    throw std::invalid_argument("kernel feature width mismatch");
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = scale_value(raw[i], s.kern_min[i], s.kern_max[i]);
  return raw;
}

}  // namespace detail

inline ModelInput prep_base_input(const FeatureScaler& scaler,
                                  const KernelGraph& kernel) {
  ModelInput raw =
      build_model_input(kernel, KernelFeatures{}, Placement::kKernelEmbedding,
                        /*with_tile=*/false, /*with_static=*/false);
  return scale_input(scaler, std::move(raw));
}

inline ModelInput assemble_input(const PreppedKernel& prep, int config,
                                 Placement placement) {
  const std::vector<double>& kf = prep.config_feats[config];
  ModelInput in = prep.base;
  in.placement = placement;
  if (placement == Placement::kKernelEmbedding || kf.empty()) {
    in.kernel_features = kf;
    return in;
  }
  int n = prep.base.node_features.rows;
  int nd = prep.base.node_features.cols;
  int width = nd + static_cast<int>(kf.size());
  in.node_features = Matrix(n, width);
  for (int r = 0; r < n; ++r) {
    const double* src =
        &prep.base.node_features.v[static_cast<std::size_t>(r) * nd];
    double* dst = &in.node_features.v[static_cast<std::size_t>(r) * width];
    std::copy(src, src + nd, dst);
    std::copy(kf.begin(), kf.end(), dst + nd);
  }
  in.kernel_features.clear();
  return in;
}

inline PreppedKernel prep_tile_entry(const FeatureScaler& scaler,
                                     const TileKernelEntry& entry,
                                     bool use_static) {
  PreppedKernel p;
  p.base = prep_base_input(scaler, entry.kernel);
  p.config_feats.reserve(entry.tiles.size());
  for (const auto& tile : entry.tiles) {
    KernelFeatures kf;
    kf.tile = tile;
    kf.static_perf = entry.static_perf;
    p.config_feats.push_back(detail::scale_kernel_vec(
        scaler, encode_kernel_features(kf, true, use_static)));
  }
  return p;
}

inline PreppedKernel prep_fusion_sample(const FeatureScaler& scaler,
                                        const FusionSample& sample,
                                        bool use_static) {
  PreppedKernel p;
  p.base = prep_base_input(scaler, sample.kernel);
  KernelFeatures kf;
  kf.static_perf = sample.static_perf;
  p.config_feats.push_back(detail::scale_kernel_vec(
      scaler, encode_kernel_features(kf, false, use_static)));
  return p;
}

// Forward with frozen parameters; fusion predictions come back in cycles.
inline double predict_with(const ParamSet& params, const ModelConfig& cfg,
                           Task task, const ModelInput& input) {
  ad::Graph g;
  BoundParams bp = BoundParams::bind_frozen(g, params);
  double out = forward_model(g, bp, input, cfg)->val.d[0];
  return task == Task::kFusionRegression ? std::exp(out) : out;
}

struct HistoryRow {
  std::int64_t step = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  CostModel final_model;
  CostModel best_model;
  double best_val = 0.0;
  std::int64_t best_step = 0;
  std::vector<HistoryRow> history;
};

namespace detail {

inline std::vector<int> entries_for(const std::vector<std::string>& ids,
                                    const TileDataset& ds) {
  std::set<std::string> want(ids.begin(), ids.end());
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(ds.entries.size()); ++i)
    if (want.count(ds.entries[i].kernel.program_id)) out.push_back(i);
  return out;
}

inline std::vector<int> samples_for(const std::vector<std::string>& ids,
                                    const FusionDataset& ds) {
  std::set<std::string> want(ids.begin(), ids.end());
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(ds.samples.size()); ++i)
    if (want.count(ds.samples[i].kernel.program_id)) out.push_back(i);
  return out;
}

}  // namespace detail

// Scaler fitted on the train split only.
inline FeatureScaler fit_tile_scaler(const TileDataset& ds,
                                     const std::vector<int>& train_entries,
                                     bool use_static) {
  ScalerFitter f;
  for (int e : train_entries) {
    const TileKernelEntry& entry = ds.entries[e];
    for (const Node& n : entry.kernel.nodes) f.add_node_row(build_node_features(n));
    for (const auto& tile : entry.tiles) {
      KernelFeatures kf;
      kf.tile = tile;
      kf.static_perf = entry.static_perf;
      f.add_kernel_vec(encode_kernel_features(kf, true, use_static));
    }
  }
  return f.finish();
}

inline FeatureScaler fit_fusion_scaler(const FusionDataset& ds,
                                       const std::vector<int>& train_samples,
                                       bool use_static) {
  ScalerFitter f;
  for (int s : train_samples) {
    const FusionSample& sample = ds.samples[s];
    for (const Node& n : sample.kernel.nodes) f.add_node_row(build_node_features(n));
    KernelFeatures kf;
    kf.static_perf = sample.static_perf;
    f.add_kernel_vec(encode_kernel_features(kf, false, use_static));
  }
  return f.finish();
}

inline TrainResult train_tile(const TileDataset& ds, const DatasetSplit& split,
                              const ModelConfig& mcfg, const TrainConfig& tcfg) {
  validate_train_config(tcfg);
  std::vector<int> train_e = detail::entries_for(split.train, ds);
  std::vector<int> val_e = detail::entries_for(split.validation, ds);
  if (train_e.empty()) throw std::invalid_argument("empty train split");

  CostModel model = init_cost_model(mcfg, Task::kTileRank,
                                    derive_seed(tcfg.seed, "init"));
  model.train_seed = tcfg.seed;
  model.scaler = fit_tile_scaler(ds, train_e, mcfg.use_static_perf);

  std::vector<PreppedKernel> prepped(ds.entries.size());
  std::vector<bool> has_prep(ds.entries.size(), false);
  auto prep = [&](int e) -> const PreppedKernel& {
    if (!has_prep[e]) {
      prepped[e] = prep_tile_entry(model.scaler, ds.entries[e],
                                   mcfg.use_static_perf);
      has_prep[e] = true;
    }
    return prepped[e];
  };

  BalancedTileSampler sampler(ds, train_e, tcfg.batch_n,
                              derive_seed(tcfg.seed, "batches"));
  auto dropout_rng = make_rng(derive_seed(tcfg.seed, "dropout"));
  AdamState adam;
  AdamConfig acfg;
  acfg.clip_norm = tcfg.grad_clip;

  auto validate = [&]() -> double {
    std::vector<double> taus;
    for (int e : val_e) {
      const PreppedKernel& p = prep(e);
      std::vector<double> preds;
      for (std::size_t c = 0; c < p.config_feats.size(); ++c)
        preds.push_back(predict_with(
            model.params, mcfg, Task::kTileRank,
            assemble_input(p, static_cast<int>(c), mcfg.placement)));
      if (preds.size() < 2) continue;
      auto tau = kendall_tau(preds, ds.entries[e].runtimes);
      if (tau) taus.push_back(*tau);
    }
    if (taus.empty()) return 0.0;
    double sum = 0.0;
    for (double t : taus) sum += t;
    return sum / taus.size();
  };

  TrainResult result;
  result.best_val = -2.0;  // any tau beats this
  for (std::int64_t step = 1; step <= tcfg.steps; ++step) {
    double lr = tcfg.lr * std::pow(tcfg.lr_decay,
                                   static_cast<double>((step - 1) / 10000));
    acfg.lr = lr;
    BalancedTileSampler::Batch batch = sampler.next();
    const PreppedKernel& p = prep(batch.entry);
    const TileKernelEntry& entry = ds.entries[batch.entry];

    ad::Graph g;
    BoundParams bp = BoundParams::bind(g, model.params);
    std::vector<ad::TNode*> preds;
    std::vector<double> targets;
    for (int c : batch.configs) {
      preds.push_back(forward_model(g, bp, assemble_input(p, c, mcfg.placement),
                                    mcfg, tcfg.dropout, &dropout_rng));
      targets.push_back(entry.runtimes[c]);
    }
    ad::TNode* loss =
        rank_loss_node(g, ad::concat_rows(g, preds), targets, tcfg.phi);
    double loss_v = loss->val.d[0];
    if (!std::isfinite(loss_v)) throw DivergenceError(step);
    g.backward(loss);
    try {
      adam_step(model.params, bp.grads(), adam, acfg);
    } catch (const std::runtime_error&) {
      throw DivergenceError(step);
    }
    model.steps = step;

    if (step % tcfg.eval_every == 0 || step == tcfg.steps) {
      double val = validate();
      result.history.push_back({step, loss_v, val, lr});
      if (val > result.best_val) {
        result.best_val = val;
        result.best_step = step;
        result.best_model = model;
      }
    }
  }
  result.final_model = std::move(model);
  if (result.best_step == 0) result.best_model = result.final_model;
  return result;
}

inline TrainResult train_fusion(const FusionDataset& ds,
                                const DatasetSplit& split,
                                const ModelConfig& mcfg,
                                const TrainConfig& tcfg) {
  validate_train_config(tcfg);
  std::vector<int> train_s = detail::samples_for(split.train, ds);
  std::vector<int> val_s = detail::samples_for(split.validation, ds);
  if (train_s.empty()) throw std::invalid_argument("empty train split");

  CostModel model = init_cost_model(mcfg, Task::kFusionRegression,
                                    derive_seed(tcfg.seed, "init"));
  model.train_seed = tcfg.seed;
  model.scaler = fit_fusion_scaler(ds, train_s, mcfg.use_static_perf);

  std::vector<PreppedKernel> prepped(ds.samples.size());
  std::vector<bool> has_prep(ds.samples.size(), false);
  auto prep = [&](int s) -> const PreppedKernel& {
    if (!has_prep[s]) {
      prepped[s] = prep_fusion_sample(model.scaler, ds.samples[s],
                                      mcfg.use_static_perf);
      has_prep[s] = true;
    }
    return prepped[s];
  };

  // D-29 filter for the validation metric, frozen from the train split.
  std::vector<double> train_rts;
  for (int s : train_s) train_rts.push_back(ds.samples[s].runtime_cycles);
  double threshold = percentile(train_rts, 75.0);

  BalancedFusionSampler sampler(ds, train_s, tcfg.batch_n,
                                derive_seed(tcfg.seed, "batches"));
  auto dropout_rng = make_rng(derive_seed(tcfg.seed, "dropout"));
  AdamState adam;
  AdamConfig acfg;
  acfg.clip_norm = tcfg.grad_clip;

  auto validate = [&]() -> double {
    std::vector<double> preds, truths;
    for (int s : val_s) {
      preds.push_back(predict_with(model.params, mcfg, Task::kFusionRegression,
                                   assemble_input(prep(s), 0, mcfg.placement)));
      truths.push_back(ds.samples[s].runtime_cycles);
    }
    if (preds.empty()) return std::numeric_limits<double>::infinity();
    auto m = mape(preds, truths, threshold);
    return m ? *m : std::numeric_limits<double>::infinity();
  };

  TrainResult result;
  result.best_val = std::numeric_limits<double>::infinity();
  for (std::int64_t step = 1; step <= tcfg.steps; ++step) {
    double lr = tcfg.lr * std::pow(tcfg.lr_decay,
                                   static_cast<double>((step - 1) / 10000));
    acfg.lr = lr;
    std::vector<int> batch = sampler.next();

    ad::Graph g;
    BoundParams bp = BoundParams::bind(g, model.params);
    std::vector<ad::TNode*> preds;
    std::vector<double> targets;
    for (int s : batch) {
      preds.push_back(forward_model(g, bp,
                                    assemble_input(prep(s), 0, mcfg.placement),
                                    mcfg, tcfg.dropout, &dropout_rng));
      targets.push_back(ds.samples[s].runtime_cycles);
    }
    ad::TNode* loss = mse_log_loss_node(g, ad::concat_rows(g, preds), targets);
    double loss_v = loss->val.d[0];
    if (!std::isfinite(loss_v)) throw DivergenceError(step);
    g.backward(loss);
    try {
      adam_step(model.params, bp.grads(), adam, acfg);
    } catch (const std::runtime_error&) {
      throw DivergenceError(step);
    }
    model.steps = step;

    if (step % tcfg.eval_every == 0 || step == tcfg.steps) {
      double val = validate();
      result.history.push_back({step, loss_v, val, lr});
      if (val < result.best_val) {
        result.best_val = val;
        result.best_step = step;
        result.best_model = model;
      }
    }
  }
  result.final_model = std::move(model);
  if (result.best_step == 0) result.best_model = result.final_model;
  return result;
}

struct TileEvalResult {
  std::vector<ProgramReport> programs;
  std::map<std::string, std::vector<KernelEval>> details;
  Aggregate ape_agg, tau_agg;
};

inline TileEvalResult eval_tile(const CostModel& model, const TileDataset& ds,
                                const std::vector<int>& entries) {
  if (entries.empty()) throw std::invalid_argument("empty evaluation split");
  TileEvalResult res;
  std::map<std::string, std::vector<int>> by_program;
  for (int e : entries) by_program[ds.entries[e].kernel.program_id].push_back(e);
  std::vector<std::optional<double>> apes, taus;
  for (const auto& [pid, es] : by_program) {
    ProgramReport rep;
    rep.program_id = pid;
    std::vector<KernelEval> evals;
    std::vector<double> kernel_taus;
    for (int e : es) {
      const TileKernelEntry& entry = ds.entries[e];
      PreppedKernel p =
          prep_tile_entry(model.scaler, entry, model.config.use_static_perf);
      KernelEval ke;
      ke.kernel_id = entry.kernel.kernel_id;
      ke.true_runtimes = entry.runtimes;
      for (std::size_t c = 0; c < p.config_feats.size(); ++c)
        ke.predicted.push_back(predict_with(
            model.params, model.config, Task::kTileRank,
            assemble_input(p, static_cast<int>(c), model.config.placement)));
      if (ke.predicted.size() >= 2) {
        auto tau = kendall_tau(ke.predicted, ke.true_runtimes);
        if (tau) kernel_taus.push_back(*tau);
      }
      evals.push_back(std::move(ke));
    }
    rep.kernel_count = static_cast<int>(evals.size());
    rep.tile_ape = tile_size_ape(evals);
    if (!kernel_taus.empty()) {
      double sum = 0.0;
      for (double t : kernel_taus) sum += t;
      rep.mean_tau = sum / kernel_taus.size();
    }
    apes.push_back(rep.tile_ape);
    taus.push_back(rep.mean_tau);
    res.details.emplace(pid, std::move(evals));
    res.programs.push_back(std::move(rep));
  }
  res.ape_agg = aggregate_values(apes);
  res.tau_agg = aggregate_values(taus);
  return res;
}

struct FusionEvalResult {
  std::vector<ProgramReport> programs;
  double threshold = 0.0;
  Aggregate mape_agg;
  std::optional<double> pooled_mape;
};

inline FusionEvalResult eval_fusion(const CostModel& model,
                                    const FusionDataset& ds,
                                    const std::vector<int>& samples,
                                    double threshold = 0.0) {
  if (samples.empty()) throw std::invalid_argument("empty evaluation split");
  FusionEvalResult res;
  if (threshold <= 0.0) {
    std::vector<double> rts;
    for (int s : samples) rts.push_back(ds.samples[s].runtime_cycles);
    threshold = percentile(rts, 75.0);
  }
  res.threshold = threshold;
  std::map<std::string, std::vector<int>> by_program;
  for (int s : samples) by_program[ds.samples[s].kernel.program_id].push_back(s);
  std::vector<std::optional<double>> mapes;
  std::vector<double> all_preds, all_truths;
  for (const auto& [pid, ss] : by_program) {
    ProgramReport rep;
    rep.program_id = pid;
    std::vector<double> preds, truths;
    for (int s : ss) {
      PreppedKernel p = prep_fusion_sample(model.scaler, ds.samples[s],
                                           model.config.use_static_perf);
      double pred = predict_with(model.params, model.config,
                                 Task::kFusionRegression,
                                 assemble_input(p, 0, model.config.placement));
      preds.push_back(pred);
      truths.push_back(ds.samples[s].runtime_cycles);
      if (truths.back() >= threshold) ++rep.filtered_count;
    }
    rep.kernel_count = static_cast<int>(preds.size());
    rep.mape_pct = mape(preds, truths, threshold);
    all_preds.insert(all_preds.end(), preds.begin(), preds.end());
    all_truths.insert(all_truths.end(), truths.begin(), truths.end());
    mapes.push_back(rep.mape_pct);
    res.programs.push_back(std::move(rep));
  }
  res.mape_agg = aggregate_values(mapes);
  res.pooled_mape = mape(all_preds, all_truths, threshold);
  return res;
}

}  // namespace tcm
