#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fd_check.hpp"
#include "tcm/model.hpp"
#include "tcm/train.hpp"

namespace {

using namespace tcm;

ModelConfig tiny_config() {
  ModelConfig c;
  c.opcode_embedding_dim = 2;
  c.hidden_dim = 4;
  c.gnn_layers = 1;
  c.attention_heads = 1;
  return c;
}

// Random valid kernel: parameter sources feeding a DAG of elementwise ops.
KernelGraph random_kernel(std::mt19937_64& rng, int min_nodes = 3,
                          int max_nodes = 8) {
  int n = min_nodes + static_cast<int>(rng() % (max_nodes - min_nodes + 1));
  int params = 1 + static_cast<int>(rng() % 2);
  KernelGraph k;
  k.kernel_id = "rand";
  std::vector<std::int64_t> shape = {
      static_cast<std::int64_t>(1 + rng() % 64),
      static_cast<std::int64_t>(1 + rng() % 16)};
  for (int i = 0; i < n; ++i) {
    if (i < params) {
      k.nodes.push_back(make_node(i, Op::kParameter, shape));
      continue;
    }
    Op op = (rng() % 2) ? Op::kRelu : Op::kTanh;
    if (rng() % 4 == 0) op = Op::kAdd;
    k.nodes.push_back(make_node(i, op, shape, i == n - 1));
    k.edges.push_back({static_cast<int>(rng() % i), i});
    if (op == Op::kAdd) k.edges.push_back({static_cast<int>(rng() % i), i});
  }
  validate_kernel(k);
  return k;
}

FeatureScaler scaler_for(const ModelInput& in) {
  std::vector<ModelInput> one = {in};
  return fit_scaler(one);
}

TEST(Config, NamesAndValidation) {
  for (Reduction r : {Reduction::kPerNode, Reduction::kColumnWise,
                      Reduction::kLstm, Reduction::kTransformer})
    EXPECT_EQ(reduction_from_name(reduction_name(r)), r);
  EXPECT_THROW(reduction_from_name("mean"), std::invalid_argument);
  for (Task t : {Task::kTileRank, Task::kFusionRegression})
    EXPECT_EQ(task_from_name(task_name(t)), t);
  EXPECT_THROW(task_from_name("both"), std::invalid_argument);

  ModelConfig bad;
  bad.hidden_dim = 0;
  EXPECT_THROW(validate_config(bad), std::invalid_argument);
  ModelConfig odd;
  odd.hidden_dim = 65;
  odd.attention_heads = 4;
  EXPECT_THROW(validate_config(odd), std::invalid_argument);

  ModelConfig per_node = tiny_config();
  per_node.reduction = Reduction::kPerNode;
  per_node.placement = Placement::kKernelEmbedding;
  EXPECT_THROW(init_cost_model(per_node, Task::kTileRank, 1),
               std::invalid_argument);
}

TEST(Config, ParameterShapes) {
  ModelConfig c;  // defaults: 32/64, 3 layers, column_wise, directed
  CostModel m = init_cost_model(c, Task::kTileRank, 5);
  EXPECT_EQ(m.params.at("opcode_embedding").rows, kOpVocabSize);
  EXPECT_EQ(m.params.at("opcode_embedding").cols, 32);
  int kf = kernel_feature_dim(true, true);
  EXPECT_EQ(m.params.at("f1").rows, 32 + kNodeFeatureDim + kf);
  EXPECT_EQ(m.params.at("f1").cols, 64);
  for (int k = 1; k <= 3; ++k) {
    std::string p = "sage" + std::to_string(k);
    EXPECT_EQ(m.params.at(p + ".in").rows, 64);
    EXPECT_EQ(m.params.at(p + ".out").rows, 64);
    EXPECT_EQ(m.params.at(p + ".comb").rows, 192);
  }
  EXPECT_EQ(m.params.at("head").rows, 128);
  EXPECT_EQ(m.params.at("head").cols, 1);

  // Kernel-embedding placement moves the kernel block to the head input.
  ModelConfig ke = c;
  ke.placement = Placement::kKernelEmbedding;
  CostModel mk = init_cost_model(ke, Task::kTileRank, 5);
  EXPECT_EQ(mk.params.at("f1").rows, 32 + kNodeFeatureDim);
  EXPECT_EQ(mk.params.at("head").rows, 128 + kf);

  ModelConfig undirected = c;
  undirected.directed = false;
  CostModel mu = init_cost_model(undirected, Task::kTileRank, 5);
  EXPECT_EQ(mu.params.at("sage1.agg").rows, 64);
  EXPECT_EQ(mu.params.at("sage1.comb").rows, 128);
  EXPECT_THROW(mu.params.at("sage1.in"), std::invalid_argument);
}

TEST(EmbedOpcodes, LookupAndGradientLocality) {
  ad::Graph g;
  ParamSet ps;
  ps.init_seed = 2;
  ps.add("opcode_embedding", kOpVocabSize, 3);
  BoundParams bp = BoundParams::bind(g, ps);
  ad::TNode* rows = embed_opcodes(g, bp, {4, 7, 4});
  ASSERT_EQ(rows->rows(), 3);
  for (int c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(rows->val.at(0, c), rows->val.at(2, c));
    EXPECT_DOUBLE_EQ(rows->val.at(0, c), ps.at("opcode_embedding").at(4, c));
  }
  EXPECT_THROW(embed_opcodes(g, bp, {12}), std::invalid_argument);
  EXPECT_THROW(embed_opcodes(g, bp, {-1}), std::invalid_argument);

  g.backward(ad::sum_all(g, rows));
  const ad::Mat& grad = bp.at("opcode_embedding")->grad;
  for (int r = 0; r < kOpVocabSize; ++r) {
    double want = r == 4 ? 2.0 : (r == 7 ? 1.0 : 0.0);
    for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(grad.at(r, c), want);
  }
}

// Hand-built two-node graph A->B where every weight composes to identity:
// epsilon^1_B = l2(eps^0_B + mean_in) = l2([1,0] + [0,1]).
TEST(GraphSage, PinnedIdentityExample) {
  ModelConfig cfg = tiny_config();
  cfg.hidden_dim = 2;

  ParamSet ps;
  ps.init_seed = 0;
  ps.add("opcode_embedding", 1, 2);
  ps.add("f1", 4, 2);
  ps.add("sage1.in", 2, 2);
  ps.add("sage1.out", 2, 2);
  ps.add("sage1.comb", 6, 2);
  for (auto& [name, mat] : ps.values) std::fill(mat.d.begin(), mat.d.end(), 0.0);
  ps.at("f1").at(2, 0) = 1.0;  // pass node features through
  ps.at("f1").at(3, 1) = 1.0;
  ps.at("sage1.in").at(0, 0) = 1.0;
  ps.at("sage1.in").at(1, 1) = 1.0;
  ps.at("sage1.comb").at(0, 0) = 1.0;  // own embedding plus in-mean
  ps.at("sage1.comb").at(1, 1) = 1.0;
  ps.at("sage1.comb").at(2, 0) = 1.0;
  ps.at("sage1.comb").at(3, 1) = 1.0;

  ModelInput in;
  in.node_features = Matrix(2, 2);
  in.node_features.at(0, 1) = 1.0;  // A = [0,1]
  in.node_features.at(1, 0) = 1.0;  // B = [1,0]
  in.opcode_ids = {0, 0};
  in.in_adj = {{}, {0}};
  in.out_adj = {{1}, {}};
  in.canonical_order = {0, 1};
  in.raw_node_dim = 2;
  in.scaled = true;

  ad::Graph g;
  BoundParams bp = BoundParams::bind_frozen(g, ps);
  ad::TNode* e = graphsage_encode(g, bp, in, cfg);
  double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(e->val.at(1, 0), inv_sqrt2, 1e-12);
  EXPECT_NEAR(e->val.at(1, 1), inv_sqrt2, 1e-12);

  in.scaled = false;
  EXPECT_THROW(graphsage_encode(g, bp, in, cfg), std::invalid_argument);
}

TEST(GraphSage, UnitNormRows) {
  std::mt19937_64 rng(41);
  ModelConfig cfg = tiny_config();
  cfg.gnn_layers = 2;
  cfg.use_static_perf = false;
  CostModel m = init_cost_model(cfg, Task::kFusionRegression, 3);
  for (int it = 0; it < 50; ++it) {
    KernelGraph k = random_kernel(rng);
    ModelInput raw =
        build_model_input(k, {}, Placement::kNodeFeatures, false, false);
    ModelInput in = scale_input(scaler_for(raw), raw);
    ad::Graph g;
    BoundParams bp = BoundParams::bind_frozen(g, m.params);
    ad::TNode* e = graphsage_encode(g, bp, in, cfg);
    for (int r = 0; r < e->rows(); ++r) {
      double norm = 0.0;
      for (int c = 0; c < e->cols(); ++c) norm += e->val.at(r, c) * e->val.at(r, c);
      norm = std::sqrt(norm);
      if (norm > 0.0) EXPECT_NEAR(norm, 1.0, 1e-9);
    }
  }
}

TEST(GraphSage, IsolatedNodeSeesOnlyItself) {
  ModelConfig cfg = tiny_config();
  cfg.use_static_perf = false;
  CostModel m = init_cost_model(cfg, Task::kFusionRegression, 9);

  KernelGraph pair;
  pair.kernel_id = "pair";
  pair.nodes = {make_node(0, Op::kParameter, {16}),
                make_node(1, Op::kParameter, {32}),
                make_node(2, Op::kRelu, {16}, true)};
  pair.edges = {{0, 2}};

  KernelGraph solo;  // node 1 alone, same features
  solo.kernel_id = "solo";
  solo.nodes = {make_node(1, Op::kParameter, {32})};

  ModelInput raw_pair =
      build_model_input(pair, {}, Placement::kNodeFeatures, false, false);
  FeatureScaler s = scaler_for(raw_pair);
  ModelInput in_pair = scale_input(s, raw_pair);
  ModelInput in_solo = scale_input(
      s, build_model_input(solo, {}, Placement::kNodeFeatures, false, false));

  ad::Graph g;
  BoundParams bp = BoundParams::bind_frozen(g, m.params);
  ad::TNode* ep = graphsage_encode(g, bp, in_pair, cfg);
  ad::TNode* es = graphsage_encode(g, bp, in_solo, cfg);
  for (int c = 0; c < ep->cols(); ++c)
    EXPECT_NEAR(ep->val.at(1, c), es->val.at(0, c), 1e-12);
}

TEST(ReduceKernel, PerNodeSumExample) {
  ModelConfig cfg = tiny_config();
  cfg.reduction = Reduction::kPerNode;
  cfg.node_final_layers = 1;
  ParamSet ps;
  ps.add("final1", 1, 1);
  ps.at("final1").d[0] = 1.0;

  ad::Graph g;
  BoundParams bp = BoundParams::bind_frozen(g, ps);
  ad::Mat e(2, 1);
  e.d = {1.5, 2.5};
  ad::TNode* out = reduce_kernel(g, bp, g.constant(e), {}, {0, 1}, cfg);
  EXPECT_DOUBLE_EQ(out->val.d[0], 4.0);
}

TEST(ReduceKernel, ColumnWiseHeadInputExample) {
  ModelConfig cfg = tiny_config();
  cfg.reduction = Reduction::kColumnWise;
  ad::Mat e(2, 2);
  e.d = {1.0, 2.0, 3.0, 0.0};
  std::vector<double> want = {2.0, 1.0, 3.0, 2.0};  // [mean | max]
  for (int basis = 0; basis < 4; ++basis) {
    ParamSet ps;
    ps.add("head", 4, 1);
    std::fill(ps.at("head").d.begin(), ps.at("head").d.end(), 0.0);
    ps.at("head").d[basis] = 1.0;
    ad::Graph g;
    BoundParams bp = BoundParams::bind_frozen(g, ps);
    ad::TNode* out = reduce_kernel(g, bp, g.constant(e), {}, {0, 1}, cfg);
    EXPECT_DOUBLE_EQ(out->val.d[0], want[basis]);
  }
}

TEST(ReduceKernel, KernelFeaturesJoinTheHead) {
  ModelConfig cfg = tiny_config();
  cfg.reduction = Reduction::kColumnWise;
  ParamSet ps;
  ps.add("head", 6, 1);
  std::fill(ps.at("head").d.begin(), ps.at("head").d.end(), 0.0);
  ps.at("head").d[4] = 1.0;  // reads the first kernel feature
  ad::Graph g;
  BoundParams bp = BoundParams::bind_frozen(g, ps);
  ad::Mat e(2, 2);
  ad::TNode* out = reduce_kernel(g, bp, g.constant(e), {0.25, 9.0}, {0, 1}, cfg);
  EXPECT_DOUBLE_EQ(out->val.d[0], 0.25);
}

struct Relabeled {
  KernelGraph kernel;
  std::vector<int> new_pos;  // old position -> new position
};

Relabeled relabel(const KernelGraph& k, std::mt19937_64& rng) {
  int n = static_cast<int>(k.nodes.size());
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);  // old position -> new id
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);  // new position -> old position

  Relabeled out;
  out.kernel = k;
  out.kernel.nodes.clear();
  out.new_pos.assign(n, 0);
  for (int np = 0; np < n; ++np) {
    int op = order[np];
    Node nd = k.nodes[op];
    nd.id = ids[op];
    out.kernel.nodes.push_back(nd);
    out.new_pos[op] = np;
  }
  std::map<int, int> id_of;  // old id -> new id
  for (int p = 0; p < n; ++p) id_of[k.nodes[p].id] = ids[p];
  for (Edge& e : out.kernel.edges) e = {id_of[e.first], id_of[e.second]};
  return out;
}

TEST(GraphSage, PermutationEquivariance) {
  std::mt19937_64 rng(47);
  ModelConfig cfg = tiny_config();
  cfg.gnn_layers = 2;
  cfg.use_static_perf = false;
  CostModel m = init_cost_model(cfg, Task::kFusionRegression, 13);

  for (int it = 0; it < 150; ++it) {
    KernelGraph k = random_kernel(rng);
    Relabeled r = relabel(k, rng);

    ModelInput raw_a =
        build_model_input(k, {}, Placement::kNodeFeatures, false, false);
    FeatureScaler s = scaler_for(raw_a);
    ModelInput a = scale_input(s, raw_a);
    ModelInput b = scale_input(
        s, build_model_input(r.kernel, {}, Placement::kNodeFeatures, false, false));

    ad::Graph g;
    BoundParams bp = BoundParams::bind_frozen(g, m.params);
    ad::TNode* ea = graphsage_encode(g, bp, a, cfg);
    ad::TNode* eb = graphsage_encode(g, bp, b, cfg);
    for (int p = 0; p < ea->rows(); ++p)
      for (int c = 0; c < ea->cols(); ++c)
        ASSERT_NEAR(ea->val.at(p, c), eb->val.at(r.new_pos[p], c), 1e-9);
  }
}

TEST(Forward, SymmetricReductionsArePermutationInvariant) {
  std::mt19937_64 rng(53);
  for (Reduction red : {Reduction::kPerNode, Reduction::kColumnWise}) {
    ModelConfig cfg = tiny_config();
    cfg.reduction = red;
    cfg.use_static_perf = false;
    CostModel m = init_cost_model(cfg, Task::kFusionRegression, 17);
    for (int it = 0; it < 100; ++it) {
      KernelGraph k = random_kernel(rng);
      Relabeled r = relabel(k, rng);
      ModelInput raw_a =
          build_model_input(k, {}, Placement::kNodeFeatures, false, false);
      FeatureScaler s = scaler_for(raw_a);
      ModelInput a = scale_input(s, raw_a);
      ModelInput b = scale_input(s, build_model_input(r.kernel, {},
                                                      Placement::kNodeFeatures,
                                                      false, false));
      ad::Graph g;
      BoundParams bp = BoundParams::bind_frozen(g, m.params);
      double pa = forward_model(g, bp, a, cfg)->val.d[0];
      double pb = forward_model(g, bp, b, cfg)->val.d[0];
      ASSERT_NEAR(pa, pb, 1e-9);
    }
  }
}

TEST(Forward, OrderPreservingRelabelKeepsSequenceReductions) {
  std::mt19937_64 rng(59);
  for (Reduction red : {Reduction::kLstm, Reduction::kTransformer}) {
    ModelConfig cfg = tiny_config();
    cfg.reduction = red;
    cfg.use_static_perf = false;
    CostModel m = init_cost_model(cfg, Task::kFusionRegression, 19);
    for (int it = 0; it < 30; ++it) {
      KernelGraph k = random_kernel(rng);
      KernelGraph shifted = k;  // ids shifted, order preserved
      std::map<int, int> remap;
      for (Node& n : shifted.nodes) {
        remap[n.id] = n.id * 7 + 3;
        n.id = remap[n.id];
      }
      for (Edge& e : shifted.edges) e = {remap[e.first], remap[e.second]};

      ModelInput raw_a =
          build_model_input(k, {}, Placement::kNodeFeatures, false, false);
      FeatureScaler s = scaler_for(raw_a);
      ModelInput a = scale_input(s, raw_a);
      ModelInput b = scale_input(s, build_model_input(shifted, {},
                                                      Placement::kNodeFeatures,
                                                      false, false));
      EXPECT_EQ(a.canonical_order, b.canonical_order);
      ad::Graph g;
      BoundParams bp = BoundParams::bind_frozen(g, m.params);
      ASSERT_NEAR(forward_model(g, bp, a, cfg)->val.d[0],
                  forward_model(g, bp, b, cfg)->val.d[0], 1e-12);
    }
  }
}

TEST(Predict, DeterministicAndPositiveForFusion) {
  std::mt19937_64 rng(61);
  KernelGraph k = random_kernel(rng);
  ModelConfig cfg = tiny_config();
  CostModel m = init_cost_model(cfg, Task::kFusionRegression, 23);
  ModelInput raw = build_model_input(k, KernelFeatures{{}, static_analysis(k)},
                                     cfg.placement, false, true);
  m.scaler = scaler_for(raw);

  KernelFeatures kf;
  kf.static_perf = static_analysis(k);
  double p1 = predict(m, k, kf);
  double p2 = predict(m, k, kf);
  EXPECT_EQ(p1, p2);
  EXPECT_GT(p1, 0.0);  // exp of the head output

  CostModel tile = init_cost_model(cfg, Task::kTileRank, 23);
  KernelGraph ak;
  ak.kernel_id = "a";
  ak.nodes = {make_node(0, Op::kParameter, {64}),
              make_node(1, Op::kRelu, {64}, true)};
  ak.edges = {{0, 1}};
  KernelFeatures tf;
  tf.tile = {16};
  tf.static_perf = static_analysis(ak);
  ModelInput traw = build_model_input(ak, tf, cfg.placement, true, true);
  tile.scaler = scaler_for(traw);
  double s16 = predict(tile, ak, tf);
  EXPECT_TRUE(std::isfinite(s16));
}

TEST(Predict, ArgminInvariantUnderPositiveScaling) {
  std::mt19937_64 rng(67);
  std::vector<double> scores;
  for (int i = 0; i < 20; ++i)
    scores.push_back(std::uniform_real_distribution<>(-5, 5)(rng));
  auto argmin = [](const std::vector<double>& v) {
    return std::min_element(v.begin(), v.end()) - v.begin();
  };
  std::vector<double> scaled = scores;
  for (double& s : scaled) s *= 3.75;
  EXPECT_EQ(argmin(scores), argmin(scaled));
}

TEST(Forward, EndToEndRankLossGradients) {
  // Five-node kernel, three tile configs, logistic phi (smooth everywhere).
  KernelGraph k;
  k.kernel_id = "five";
  k.nodes = {make_node(0, Op::kParameter, {64, 32}),
             make_node(1, Op::kParameter, {64, 32}),
             make_node(2, Op::kAdd, {64, 32}),
             make_node(3, Op::kTanh, {64, 32}),
             make_node(4, Op::kRelu, {64, 32}, true)};
  k.edges = {{0, 2}, {1, 2}, {2, 3}, {3, 4}};

  ModelConfig cfg = tiny_config();
  CostModel m = init_cost_model(cfg, Task::kTileRank, 29);

  std::vector<std::vector<std::int64_t>> tiles = {{8, 8}, {16, 32}, {64, 4}};
  std::array<double, 4> sp = static_analysis(k);
  std::vector<ModelInput> raws;
  for (const auto& t : tiles)
    raws.push_back(build_model_input(k, KernelFeatures{t, sp}, cfg.placement,
                                     true, true));
  FeatureScaler s = fit_scaler(raws);
  std::vector<ModelInput> inputs;
  for (const auto& r : raws) inputs.push_back(scale_input(s, r));
  std::vector<double> targets = {300.0, 100.0, 200.0};

  std::vector<std::string> names;
  std::vector<ad::Mat> leaves;
  for (const auto& [name, mat] : m.params.values) {
    names.push_back(name);
    leaves.push_back(mat);
  }
  auto build = [&](ad::Graph& g, std::vector<ad::TNode*>& in) {
    BoundParams bp;
    bp.g = &g;
    for (std::size_t i = 0; i < names.size(); ++i) bp.nodes[names[i]] = in[i];
    std::vector<ad::TNode*> scores;
    for (const ModelInput& mi : inputs)
      scores.push_back(forward_model(g, bp, mi, cfg));
    return rank_loss_node(g, ad::concat_rows(g, scores), targets,
                          Phi::kLogistic);
  };
  tcmtest::FdReport rep = tcmtest::fd_gradients(build, leaves);
  EXPECT_LT(rep.max_rel, 1e-4);
  EXPECT_GT(rep.checked, 300);
}

}  // namespace
