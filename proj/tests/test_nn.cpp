#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd_check.hpp"
#include "tcm/nn.hpp"

namespace {

using namespace tcm;
using tcmtest::fd_gradients;
using tcmtest::project;
using tcmtest::rand_mat;
using tcmtest::rand_mat_away;
using tcmtest::rand_mat_distinct;

constexpr double kTol = 1e-4;
constexpr int kSeeds = 10;

void expect_grads(const tcmtest::BuildFn& build, std::vector<ad::Mat> xs,
                  int min_checked = 1) {
  tcmtest::FdReport rep = fd_gradients(build, std::move(xs));
  EXPECT_LT(rep.max_rel, kTol);
  EXPECT_GE(rep.checked, min_checked);
}

TEST(Grad, ElementwiseBinaryOps) {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<ad::Mat> xs = {rand_mat(3, 4, rng), rand_mat(3, 4, rng)};
    auto make = [seed](ad::TNode* (*op)(ad::Graph&, ad::TNode*, ad::TNode*)) {
      return [op, seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
        return project(g, op(g, in[0], in[1]), 100 + seed);
      };
    };
    expect_grads(make(&ad::add), xs, 24);
    expect_grads(make(&ad::sub), xs, 24);
    expect_grads(make(&ad::mul), xs, 24);
  }
}

TEST(Grad, MatmulAndTranspose) {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::matmul(g, in[0], in[1]), 200 + seed);
        },
        {rand_mat(2, 3, rng), rand_mat(3, 4, rng)}, 18);
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::transpose(g, in[0]), 300 + seed);
        },
        {rand_mat(2, 5, rng)}, 10);
  }
}

TEST(Grad, ScaleConcatSliceGather) {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::scale(g, in[0], -2.5), 400 + seed);
        },
        {rand_mat(3, 3, rng)});
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::concat_rows(g, {in[0], in[1]}), 500 + seed);
        },
        {rand_mat(2, 3, rng), rand_mat(4, 3, rng)});
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::concat_cols(g, {in[0], in[1]}), 600 + seed);
        },
        {rand_mat(3, 2, rng), rand_mat(3, 5, rng)});
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::slice_cols(g, in[0], 1, 3), 700 + seed);
        },
        {rand_mat(2, 6, rng)});
    // Duplicate gather indices must accumulate, not overwrite.
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::gather_rows(g, in[0], {2, 0, 2, 1}), 800 + seed);
        },
        {rand_mat(4, 3, rng)});
  }
}

TEST(Grad, Nonlinearities) {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::relu(g, in[0]), 900 + seed);
        },
        {rand_mat_away(3, 4, rng)});
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::tanh_(g, in[0]), 1000 + seed);
        },
        {rand_mat(3, 4, rng)});
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::sigmoid(g, in[0]), 1100 + seed);
        },
        {rand_mat(3, 4, rng)});
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::softmax_rows(g, in[0]), 1200 + seed);
        },
        {rand_mat(3, 4, rng, -2.0, 2.0)});
  }
}

TEST(Grad, Reductions) {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::colwise_sum(g, in[0]), 1300 + seed);
        },
        {rand_mat(4, 3, rng)});
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::colwise_mean(g, in[0]), 1400 + seed);
        },
        {rand_mat(4, 3, rng)});
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::colwise_max(g, in[0]), 1500 + seed);
        },
        {rand_mat_distinct(4, 3, rng)});
    expect_grads(
        [](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return ad::sum_all(g, in[0]);
        },
        {rand_mat(4, 3, rng)});
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          return project(g, ad::l2_normalize_rows(g, in[0]), 1600 + seed);
        },
        {rand_mat_away(3, 4, rng)});
  }
}

TEST(Grad, FeedforwardAllActivations) {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    for (Activation act : {Activation::kNone, Activation::kRelu, Activation::kTanh}) {
      expect_grads(
          [seed, act](ad::Graph& g, std::vector<ad::TNode*>& in) {
            return project(g, feedforward(g, in[0], in[1], act), 1700 + seed);
          },
          {rand_mat_away(3, 4, rng), rand_mat(4, 5, rng)});
    }
  }
}

TEST(Grad, LstmFourStepSequence) {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<ad::Mat> xs;
    for (int i = 0; i < 8; ++i) xs.push_back(rand_mat(3, 3, rng));  // weights
    for (int i = 0; i < 4; ++i) xs.push_back(rand_mat(2, 3, rng));  // inputs
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          LstmWeights w{in[0], in[1], in[2], in[3], in[4], in[5], in[6], in[7]};
          LstmState s{g.constant(ad::Mat(2, 3)), g.constant(ad::Mat(2, 3))};
          for (int t = 0; t < 4; ++t) s = lstm_step(g, s, in[8 + t], w);
          return project(g, s.h, 1800 + seed);
        },
        xs, 96);
  }
}

TEST(Grad, AttentionAndEncoder) {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<ad::Mat> attn = {rand_mat(3, 4, rng), rand_mat(4, 4, rng),
                                 rand_mat(4, 4, rng), rand_mat(4, 4, rng),
                                 rand_mat(4, 4, rng)};
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          AttentionWeights w{in[1], in[2], in[3], in[4]};
          return project(g, multi_head_attention(g, in[0], w, 2), 1900 + seed);
        },
        attn, 60);

    std::vector<ad::Mat> enc = attn;
    enc.push_back(rand_mat(4, 6, rng));
    enc.push_back(rand_mat(6, 4, rng));
    expect_grads(
        [seed](ad::Graph& g, std::vector<ad::TNode*>& in) {
          EncoderWeights w{{in[1], in[2], in[3], in[4]}, in[5], in[6]};
          return project(g, transformer_encoder(g, in[0], w, 2), 2000 + seed);
        },
        enc, 100);
  }
}

TEST(Values, PinnedExamples) {
  ad::Graph g;
  // l2 normalization of [3,4]
  ad::Mat m(1, 2);
  m.d = {3.0, 4.0};
  ad::TNode* n = ad::l2_normalize_rows(g, g.constant(std::move(m)));
  EXPECT_DOUBLE_EQ(n->val.d[0], 0.6);
  EXPECT_DOUBLE_EQ(n->val.d[1], 0.8);

  // relu(-2) is 0 with zero gradient
  ad::TNode* x = g.param(ad::Mat::scalar(-2.0));
  ad::TNode* r = ad::relu(g, x);
  EXPECT_DOUBLE_EQ(r->val.d[0], 0.0);
  g.backward(ad::sum_all(g, r));
  EXPECT_DOUBLE_EQ(x->grad.d[0], 0.0);

  // d(sum x^2)/dx at [1,2] is [2,4]
  ad::Graph g2;
  ad::Mat v(1, 2);
  v.d = {1.0, 2.0};
  ad::TNode* p = g2.param(v);
  g2.backward(ad::sum_all(g2, ad::mul(g2, p, p)));
  EXPECT_DOUBLE_EQ(p->grad.d[0], 2.0);
  EXPECT_DOUBLE_EQ(p->grad.d[1], 4.0);
}

TEST(Values, ZeroRowBlocksNormalizationGradient) {
  ad::Graph g;
  ad::Mat m(2, 2);
  m.d = {0.0, 0.0, 3.0, 4.0};
  ad::TNode* p = g.param(m);
  ad::TNode* n = ad::l2_normalize_rows(g, p);
  EXPECT_DOUBLE_EQ(n->val.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(n->val.at(0, 1), 0.0);
  g.backward(ad::sum_all(g, n));
  EXPECT_DOUBLE_EQ(p->grad.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(p->grad.at(0, 1), 0.0);
}

TEST(Values, LstmFixedPointsAndBounds) {
  ad::Graph g;
  auto zeros = [&](int r, int c) { return g.constant(ad::Mat(r, c)); };
  LstmWeights w{zeros(3, 3), zeros(3, 3), zeros(3, 3), zeros(3, 3),
                zeros(3, 3), zeros(3, 3), zeros(3, 3), zeros(3, 3)};
  LstmState s{zeros(1, 3), zeros(1, 3)};
  std::mt19937_64 rng(5);
  LstmState next = lstm_step(g, s, g.constant(rand_mat(1, 3, rng)), w);
  for (double v : next.h->val.d) EXPECT_DOUBLE_EQ(v, 0.0);
  for (double v : next.c->val.d) EXPECT_DOUBLE_EQ(v, 0.0);

  // With arbitrary weights the hidden state stays inside (-1, 1).
  std::vector<ad::TNode*> ws;
  for (int i = 0; i < 8; ++i)
    ws.push_back(g.constant(rand_mat(3, 3, rng, -3.0, 3.0)));
  LstmWeights big{ws[0], ws[1], ws[2], ws[3], ws[4], ws[5], ws[6], ws[7]};
  LstmState st{zeros(1, 3), zeros(1, 3)};
  for (int t = 0; t < 6; ++t) {
    st = lstm_step(g, st, g.constant(rand_mat(1, 3, rng, -5.0, 5.0)), big);
    for (double v : st.h->val.d) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Values, SinglePositionAttentionIsIdentityWeighted) {
  // One sequence position: softmax over a 1x1 score matrix is exactly 1,
  // so attention reduces to x*Wv*Wo.
  ad::Graph g;
  std::mt19937_64 rng(9);
  ad::TNode* x = g.constant(rand_mat(1, 4, rng));
  AttentionWeights w{g.constant(rand_mat(4, 4, rng)), g.constant(rand_mat(4, 4, rng)),
                     g.constant(rand_mat(4, 4, rng)), g.constant(rand_mat(4, 4, rng))};
  ad::TNode* out = multi_head_attention(g, x, w, 2);
  ad::TNode* direct = ad::matmul(g, ad::matmul(g, x, w.wv), w.wo);
  for (std::size_t i = 0; i < out->val.size(); ++i)
    EXPECT_NEAR(out->val.d[i], direct->val.d[i], 1e-12);

  EXPECT_THROW(multi_head_attention(g, x, w, 3), std::invalid_argument);
}

TEST(Values, ShapeMismatchNamesOperation) {
  ad::Graph g;
  ad::TNode* a = g.constant(ad::Mat(2, 3));
  ad::TNode* b = g.constant(ad::Mat(3, 2));
  try {
    ad::add(g, a, b);
    FAIL() << "expected shape mismatch";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("2x3"), std::string::npos);
    EXPECT_NE(msg.find("3x2"), std::string::npos);
  }
  EXPECT_THROW(ad::matmul(g, a, a), std::invalid_argument);
}

TEST(Params, GlorotInitIsIndependentPerName) {
  ParamSet a;
  a.init_seed = 7;
  a.add("w1", 4, 4);
  a.add("w2", 4, 4);
  ParamSet b;
  b.init_seed = 7;
  b.add("w2", 4, 4);  // insertion order must not matter
  b.add("w1", 4, 4);
  b.add("extra", 2, 2);
  EXPECT_EQ(a.at("w1").d, b.at("w1").d);
  EXPECT_EQ(a.at("w2").d, b.at("w2").d);
  EXPECT_NE(a.at("w1").d, a.at("w2").d);

  double bound = std::sqrt(6.0 / 8.0);
  for (double v : a.at("w1").d) {
    EXPECT_GE(v, -bound);
    EXPECT_LE(v, bound);
  }
  EXPECT_THROW(a.add("w1", 2, 2), std::invalid_argument);
  EXPECT_THROW(a.at("nope"), std::invalid_argument);
}

TEST(Adam, ZeroGradientLeavesParamsUntouched) {
  ParamSet ps;
  ps.init_seed = 3;
  ps.add("w", 2, 2);
  std::vector<double> before = ps.at("w").d;
  AdamState st;
  adam_step(ps, {{"w", ad::Mat(2, 2)}}, st, AdamConfig{});
  EXPECT_EQ(ps.at("w").d, before);
  EXPECT_EQ(st.t, 1);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  ParamSet ps;
  ps.init_seed = 3;
  ps.add("w", 1, 4);
  std::vector<double> before = ps.at("w").d;
  ad::Mat grad(1, 4);
  grad.d = {0.5, -0.5, 2.0, -2.0};
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 1e-2;
  adam_step(ps, {{"w", grad}}, st, cfg);
  for (int i = 0; i < 4; ++i) {
    double delta = ps.at("w").d[i] - before[i];
    double want = -cfg.lr * (grad.d[i] > 0 ? 1.0 : -1.0);
    EXPECT_NEAR(delta, want, 1e-6);
  }
}

TEST(Adam, GlobalNormClipping) {
  ParamSet ps;
  ps.init_seed = 3;
  ps.add("w", 1, 4);
  ad::Mat grad(1, 4);
  grad.d = {5.0, 5.0, 5.0, 5.0};  // norm 10
  AdamState st;
  AdamConfig cfg;
  cfg.clip_norm = 1.0;
  adam_step(ps, {{"w", grad}}, st, cfg);
  // First-moment state records the clipped gradient: norm (1-beta1)*1.0.
  double norm = 0.0;
  for (double v : st.m.at("w").d) norm += v * v;
  EXPECT_NEAR(std::sqrt(norm), 0.1, 1e-12);
}

TEST(Adam, NonFiniteGradientAborts) {
  ParamSet ps;
  ps.init_seed = 3;
  ps.add("w", 1, 2);
  ad::Mat grad(1, 2);
  grad.d = {1.0, std::nan("")};
  AdamState st;
  EXPECT_THROW(adam_step(ps, {{"w", grad}}, st, AdamConfig{}), std::runtime_error);

  ad::Mat bad_shape(2, 1);
  EXPECT_THROW(adam_step(ps, {{"w", bad_shape}}, st, AdamConfig{}),
               std::invalid_argument);
  EXPECT_THROW(adam_step(ps, {}, st, AdamConfig{}), std::invalid_argument);
}

TEST(Dropout, InvertedScaling) {
  ad::Graph g;
  std::mt19937_64 rng(31);
  ad::Mat m(8, 8);
  for (double& v : m.d) v = 1.0;
  ad::TNode* x = g.constant(m);
  EXPECT_EQ(dropout(g, x, 0.0, rng), x);  // identity, no new node

  double rate = 0.25;
  ad::TNode* d = dropout(g, x, rate, rng);
  int kept = 0;
  for (double v : d->val.d) {
    if (v != 0.0) {
      EXPECT_NEAR(v, 1.0 / (1.0 - rate), 1e-12);
      ++kept;
    }
  }
  EXPECT_GT(kept, 30);
  EXPECT_LT(kept, 64);
  EXPECT_THROW(dropout(g, x, 1.0, rng), std::invalid_argument);
}

}  // namespace
