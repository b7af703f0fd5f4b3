#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tcm/features.hpp"
#include "tcm/graph.hpp"
#include "tcm/nn.hpp"
#include "tcm/tensor.hpp"

namespace tcm {

enum class Reduction { kPerNode, kColumnWise, kLstm, kTransformer };

inline const char* reduction_name(Reduction r) {
  switch (r) {
    case Reduction::kPerNode: return "per_node";
    case Reduction::kColumnWise: return "column_wise";
    case Reduction::kLstm: return "lstm";
    case Reduction::kTransformer: return "transformer";
  }
  throw std::logic_error("unhandled reduction");
}

inline Reduction reduction_from_name(const std::string& s) {
  if (s == "per_node") return Reduction::kPerNode;
  if (s == "column_wise") return Reduction::kColumnWise;
  if (s == "lstm") return Reduction::kLstm;
  if (s == "transformer") return Reduction::kTransformer;
  throw std::invalid_argument("unknown reduction: " + s);
}

enum class Task { kTileRank, kFusionRegression };

inline const char* task_name(Task t) {
  return t == Task::kTileRank ? "tile_rank" : "fusion_regression";
}

inline Task task_from_name(const std::string& s) {
  if (s == "tile_rank") return Task::kTileRank;
  if (s == "fusion_regression") return Task::kFusionRegression;
  throw std::invalid_argument("unknown task: " + s);
}

struct ModelConfig {
  int opcode_embedding_dim = 32;
  int hidden_dim = 64;
  int gnn_layers = 3;
  int neighbor_cap = 20;
  bool directed = true;
  Reduction reduction = Reduction::kColumnWise;
  int node_final_layers = 3;
  Placement placement = Placement::kNodeFeatures;
  int transformer_layers = 1;
  int attention_heads = 4;
  bool use_static_perf = true;
};

inline void validate_config(const ModelConfig& c) {
  if (c.opcode_embedding_dim < 1 || c.hidden_dim < 1 || c.gnn_layers < 1 ||
      c.neighbor_cap < 1 || c.node_final_layers < 1 || c.transformer_layers < 1 ||
      c.attention_heads < 1)
    throw std::invalid_argument("model config dims must be positive");
  if (c.hidden_dim % c.attention_heads != 0)
    throw std::invalid_argument("hidden_dim must be divisible by attention_heads");
}

struct CostModel {
  ModelConfig config;
  Task task = Task::kTileRank;
  ParamSet params;
  FeatureScaler scaler;
  std::uint64_t train_seed = 0;
  std::int64_t steps = 0;
};

inline int model_kernel_feature_dim(const ModelConfig& c, Task task) {
  return kernel_feature_dim(task == Task::kTileRank, c.use_static_perf);
}

inline CostModel init_cost_model(const ModelConfig& cfg, Task task,
                                 std::uint64_t seed) {
  validate_config(cfg);
  if (cfg.reduction == Reduction::kPerNode &&
      cfg.placement == Placement::kKernelEmbedding)
    throw std::invalid_argument(
        "per_node reduction cannot carry kernel-embedding features");
  CostModel m;
  m.config = cfg;
  m.task = task;
  m.params.init_seed = seed;
  int kf = model_kernel_feature_dim(cfg, task);
  int node_width = kNodeFeatureDim +
                   (cfg.placement == Placement::kNodeFeatures ? kf : 0);
  int h = cfg.hidden_dim;

  m.params.add("opcode_embedding", kOpVocabSize, cfg.opcode_embedding_dim);
  m.params.add("f1", cfg.opcode_embedding_dim + node_width, h);
  for (int k = 1; k <= cfg.gnn_layers; ++k) {
    std::string p = "sage" + std::to_string(k);
    if (cfg.directed) {
      m.params.add(p + ".in", h, h);
      m.params.add(p + ".out", h, h);
      m.params.add(p + ".comb", 3 * h, h);
    } else {
      m.params.add(p + ".agg", h, h);
      m.params.add(p + ".comb", 2 * h, h);
    }
  }

  int head_extra = cfg.placement == Placement::kKernelEmbedding ? kf : 0;
  switch (cfg.reduction) {
    case Reduction::kPerNode:
      for (int i = 1; i < cfg.node_final_layers; ++i)
        m.params.add("final" + std::to_string(i), h, h);
      m.params.add("final" + std::to_string(cfg.node_final_layers), h, 1);
      break;
    case Reduction::kColumnWise:
      m.params.add("head", 2 * h + head_extra, 1);
      break;
    case Reduction::kLstm:
      for (const char* gate : {"i", "f", "g", "o"}) {
        m.params.add(std::string("lstm.w") + gate, h, h);
        m.params.add(std::string("lstm.u") + gate, h, h);
      }
      m.params.add("head", h + head_extra, 1);
      break;
    case Reduction::kTransformer:
      for (int t = 1; t <= cfg.transformer_layers; ++t) {
        std::string p = "enc" + std::to_string(t);
        m.params.add(p + ".wq", h, h);
        m.params.add(p + ".wk", h, h);
        m.params.add(p + ".wv", h, h);
        m.params.add(p + ".wo", h, h);
        m.params.add(p + ".ff1", h, h);
        m.params.add(p + ".ff2", h, h);
      }
      m.params.add("head", h + head_extra, 1);
      break;
  }
  return m;
}

inline ad::TNode* embed_opcodes(ad::Graph& g, const BoundParams& bp,
                                const std::vector<int>& opcode_ids) {
  ad::TNode* table = bp.at("opcode_embedding");
  for (int id : opcode_ids)
    if (id < 0 || id >= table->rows())
      throw std::invalid_argument("opcode id out of range");
  return ad::gather_rows(g, table, opcode_ids);
}

namespace detail {

// Row-normalized adjacency over neighbor lists truncated to the cap by
// ascending node id; an empty list leaves a zero row (zero-vector slot).
inline ad::Mat mean_agg_matrix(const std::vector<std::vector<int>>& adj, int cap) {
  int n = static_cast<int>(adj.size());
  ad::Mat a(n, n);
  for (int i = 0; i < n; ++i) {
    int m = std::min<int>(cap, static_cast<int>(adj[i].size()));
    for (int j = 0; j < m; ++j) a.at(i, adj[i][j]) += 1.0 / m;
  }
  return a;
}

inline ad::Mat union_agg_matrix(const std::vector<std::vector<int>>& in_adj,
                                const std::vector<std::vector<int>>& out_adj,
                                int cap) {
  int n = static_cast<int>(in_adj.size());
  std::vector<std::vector<int>> merged(n);
  for (int i = 0; i < n; ++i) {
    std::vector<int> u;
    u.insert(u.end(), in_adj[i].begin(), in_adj[i].end());
    u.insert(u.end(), out_adj[i].begin(), out_adj[i].end());
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    merged[i] = std::move(u);
  }
  return mean_agg_matrix(merged, cap);
}

}  // namespace detail

inline ad::TNode* graphsage_encode(ad::Graph& g, const BoundParams& bp,
                                   const ModelInput& input,
                                   const ModelConfig& cfg) {
  if (!input.scaled)
    throw std::invalid_argument("graphsage_encode: input is not scaled");
  ad::TNode* emb = embed_opcodes(g, bp, input.opcode_ids);
  ad::Mat fm(input.node_features.rows, input.node_features.cols);
  fm.d = input.node_features.v;
  ad::TNode* feats = g.constant(std::move(fm));
  ad::TNode* e = feedforward(g, ad::concat_cols(g, {emb, feats}), bp.at("f1"),
                             Activation::kRelu);
  for (int k = 1; k <= cfg.gnn_layers; ++k) {
    std::string p = "sage" + std::to_string(k);
    std::vector<ad::TNode*> parts;
    if (cfg.directed) {
      ad::TNode* ain =
          g.constant(detail::mean_agg_matrix(input.in_adj, cfg.neighbor_cap));
      ad::TNode* aout =
          g.constant(detail::mean_agg_matrix(input.out_adj, cfg.neighbor_cap));
      parts = {e,
               ad::matmul(g, ain, feedforward(g, e, bp.at(p + ".in"),
                                              Activation::kRelu)),
               ad::matmul(g, aout, feedforward(g, e, bp.at(p + ".out"),
                                               Activation::kRelu))};
    } else {
      ad::TNode* a = g.constant(detail::union_agg_matrix(
          input.in_adj, input.out_adj, cfg.neighbor_cap));
      parts = {e, ad::matmul(g, a, feedforward(g, e, bp.at(p + ".agg"),
                                               Activation::kRelu))};
    }
    e = ad::l2_normalize_rows(
        g, feedforward(g, ad::concat_cols(g, parts), bp.at(p + ".comb"),
                       Activation::kRelu));
  }
  return e;
}

inline ad::TNode* reduce_kernel(ad::Graph& g, const BoundParams& bp,
                                ad::TNode* embeddings,
                                const std::vector<double>& kernel_features,
                                const std::vector<int>& canonical_order,
                                const ModelConfig& cfg) {
  if (embeddings->rows() < 1)
    throw std::invalid_argument("reduce_kernel: empty embeddings");
  auto with_kernel_feats = [&](ad::TNode* kappa) {
    if (kernel_features.empty()) return kappa;
    ad::Mat kf(1, static_cast<int>(kernel_features.size()));
    kf.d = kernel_features;
    return ad::concat_cols(g, {kappa, g.constant(std::move(kf))});
  };
  switch (cfg.reduction) {
    case Reduction::kPerNode: {
      ad::TNode* x = embeddings;
      for (int i = 1; i < cfg.node_final_layers; ++i)
        x = feedforward(g, x, bp.at("final" + std::to_string(i)),
                        Activation::kRelu);
      x = feedforward(g, x, bp.at("final" + std::to_string(cfg.node_final_layers)),
                      Activation::kNone);
      return ad::colwise_sum(g, x);
    }
    case Reduction::kColumnWise: {
      ad::TNode* kappa = ad::concat_cols(
          g, {ad::colwise_mean(g, embeddings), ad::colwise_max(g, embeddings)});
      return feedforward(g, with_kernel_feats(kappa), bp.at("head"),
                         Activation::kNone);
    }
    case Reduction::kLstm: {
      int h = embeddings->cols();
      LstmWeights w{bp.at("lstm.wi"), bp.at("lstm.ui"), bp.at("lstm.wf"),
                    bp.at("lstm.uf"), bp.at("lstm.wg"), bp.at("lstm.ug"),
                    bp.at("lstm.wo"), bp.at("lstm.uo")};
      LstmState s{g.constant(ad::Mat(1, h)), g.constant(ad::Mat(1, h))};
      for (int pos : canonical_order) {
        ad::TNode* x = ad::gather_rows(g, embeddings, {pos});
        s = lstm_step(g, s, x, w);
      }
      return feedforward(g, with_kernel_feats(s.h), bp.at("head"),
                         Activation::kNone);
    }
    case Reduction::kTransformer: {
      ad::TNode* x = embeddings;
      for (int t = 1; t <= cfg.transformer_layers; ++t) {
        std::string p = "enc" + std::to_string(t);
        EncoderWeights w{{bp.at(p + ".wq"), bp.at(p + ".wk"), bp.at(p + ".wv"),
                          bp.at(p + ".wo")},
                         bp.at(p + ".ff1"),
                         bp.at(p + ".ff2")};
        x = transformer_encoder(g, x, w, cfg.attention_heads);
      }
      return feedforward(g, with_kernel_feats(ad::colwise_sum(g, x)),
                         bp.at("head"), Activation::kNone);
    }
  }
  throw std::logic_error("unhandled reduction");
}

// Full differentiable pipeline for one encoded kernel. Dropout hits the node
// embeddings only, and only when a training RNG is supplied.
inline ad::TNode* forward_model(ad::Graph& g, const BoundParams& bp,
                                const ModelInput& input, const ModelConfig& cfg,
                                double dropout_rate = 0.0,
                                std::mt19937_64* rng = nullptr) {
  ad::TNode* e = graphsage_encode(g, bp, input, cfg);
  if (rng && dropout_rate > 0.0) e = dropout(g, e, dropout_rate, *rng);
  return reduce_kernel(g, bp, e, input.kernel_features, input.canonical_order,
                       cfg);
}

inline ModelInput encode_for_model(const CostModel& m, const KernelGraph& kernel,
                                   const KernelFeatures& kfeat) {
  return build_model_input(kernel, kfeat, m.scaler, m.config.placement,
                           m.task == Task::kTileRank, m.config.use_static_perf);
}

// Tile task: unitless score, lower = faster. Fusion task: runtime in cycles.
inline double predict(const CostModel& m, const KernelGraph& kernel,
                      const KernelFeatures& kfeat) {
  ModelInput input = encode_for_model(m, kernel, kfeat);
  ad::Graph g;
  BoundParams bp = BoundParams::bind_frozen(g, m.params);
  double out = forward_model(g, bp, input, m.config)->val.d[0];
  return m.task == Task::kFusionRegression ? std::exp(out) : out;
}

}  // namespace tcm
