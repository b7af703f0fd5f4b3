#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tcm/rng.hpp"
#include "tcm/tensor.hpp"

namespace tcm {

// Named parameters in a deterministic (sorted) order. Initialization derives
// one RNG per parameter from (seed, name), so adding a parameter never
// perturbs the values of the others.
struct ParamSet {
  std::map<std::string, ad::Mat> values;
  std::uint64_t init_seed = 0;

  ad::Mat& at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }
  const ad::Mat& at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }

  // Glorot-uniform init: bound sqrt(6 / (fan_in + fan_out)).
  void add(const std::string& name, int rows, int cols) {
    if (values.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    ad::Mat m(rows, cols);
    double bound = std::sqrt(6.0 / (rows + cols));
    auto rng = make_rng(derive_seed(init_seed, "param." + name));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : m.d) v = dist(rng);
    values.emplace(name, std::move(m));
  }
};

// Parameters bound into a tape for one forward/backward pass.
struct BoundParams {
  ad::Graph* g = nullptr;
  std::map<std::string, ad::TNode*> nodes;

  static BoundParams bind(ad::Graph& graph, const ParamSet& ps) {
    BoundParams b;
    b.g = &graph;
    for (const auto& [name, mat] : ps.values) b.nodes[name] = graph.param(mat);
    return b;
  }
  static BoundParams bind_frozen(ad::Graph& graph, const ParamSet& ps) {
    BoundParams b;
    b.g = &graph;
    for (const auto& [name, mat] : ps.values) b.nodes[name] = graph.constant(mat);
    return b;
  }

  ad::TNode* at(const std::string& name) const {
    auto it = nodes.find(name);
    if (it == nodes.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }

  std::map<std::string, ad::Mat> grads() const {
    std::map<std::string, ad::Mat> out;
    for (const auto& [name, node] : nodes) out.emplace(name, node->grad);
    return out;
  }
};

enum class Activation { kNone, kRelu, kTanh };

// Bias-free dense layer: activation(x * W).
inline ad::TNode* feedforward(ad::Graph& g, ad::TNode* x, ad::TNode* w,
                              Activation act) {
  ad::TNode* y = ad::matmul(g, x, w);
  switch (act) {
    case Activation::kNone: return y;
    case Activation::kRelu: return ad::relu(g, y);
    case Activation::kTanh: return ad::tanh_(g, y);
  }
  throw std::logic_error("unhandled activation");
}

struct LstmWeights {
  ad::TNode *wi, *ui, *wf, *uf, *wg, *ug, *wo, *uo;
};

struct LstmState {
  ad::TNode* h;
  ad::TNode* c;
};

// Standard gated update, bias-free like every other layer here.
inline LstmState lstm_step(ad::Graph& g, const LstmState& s, ad::TNode* x,
                           const LstmWeights& w) {
  auto gate = [&](ad::TNode* wx, ad::TNode* uh) {
    return ad::add(g, ad::matmul(g, x, wx), ad::matmul(g, s.h, uh));
  };
  ad::TNode* i = ad::sigmoid(g, gate(w.wi, w.ui));
  ad::TNode* f = ad::sigmoid(g, gate(w.wf, w.uf));
  ad::TNode* cand = ad::tanh_(g, gate(w.wg, w.ug));
  ad::TNode* c = ad::add(g, ad::mul(g, f, s.c), ad::mul(g, i, cand));
  ad::TNode* h = ad::mul(g, ad::sigmoid(g, gate(w.wo, w.uo)), ad::tanh_(g, c));
  return {h, c};
}

struct AttentionWeights {
  ad::TNode *wq, *wk, *wv, *wo;  // all model_dim x model_dim
};

// Scaled dot-product attention with `heads` column-sliced heads.
inline ad::TNode* multi_head_attention(ad::Graph& g, ad::TNode* x,
                                       const AttentionWeights& w, int heads) {
  int dim = x->cols();
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("attention: model width not divisible by heads");
  int dk = dim / heads;
  ad::TNode* q = ad::matmul(g, x, w.wq);
  ad::TNode* k = ad::matmul(g, x, w.wk);
  ad::TNode* v = ad::matmul(g, x, w.wv);
  std::vector<ad::TNode*> outs;
  outs.reserve(heads);
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int h = 0; h < heads; ++h) {
    ad::TNode* qh = ad::slice_cols(g, q, h * dk, dk);
    ad::TNode* kh = ad::slice_cols(g, k, h * dk, dk);
    ad::TNode* vh = ad::slice_cols(g, v, h * dk, dk);
    ad::TNode* scores =
        ad::scale(g, ad::matmul(g, qh, ad::transpose(g, kh)), inv_sqrt);
    outs.push_back(ad::matmul(g, ad::softmax_rows(g, scores), vh));
  }
  return ad::matmul(g, ad::concat_cols(g, outs), w.wo);
}

struct EncoderWeights {
  AttentionWeights attn;
  ad::TNode *ff1, *ff2;
};

// Attention and feedforward sublayers, each wrapped in a residual
// connection; no normalization layers.
inline ad::TNode* transformer_encoder(ad::Graph& g, ad::TNode* x,
                                      const EncoderWeights& w, int heads) {
  ad::TNode* y = ad::add(g, x, multi_head_attention(g, x, w.attn, heads));
  ad::TNode* ff = feedforward(g, feedforward(g, y, w.ff1, Activation::kRelu),
                              w.ff2, Activation::kNone);
  return ad::add(g, y, ff);
}

// Inverted-scaling dropout mask as a tape constant; identity when rate is 0.
inline ad::TNode* dropout(ad::Graph& g, ad::TNode* x, double rate,
                          std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  ad::Mat mask(x->rows(), x->cols());
  std::bernoulli_distribution keep(1.0 - rate);
  double scale = 1.0 / (1.0 - rate);
  for (double& v : mask.d) v = keep(rng) ? scale : 0.0;
  return ad::mul(g, x, g.constant(std::move(mask)));
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables clipping
};

struct AdamState {
  std::map<std::string, ad::Mat> m, v;
  std::int64_t t = 0;
};

// One Adam update with bias correction and optional global-norm clipping.
// Non-finite gradients abort training rather than poisoning the parameters.
inline void adam_step(ParamSet& params, std::map<std::string, ad::Mat> grads,
                      AdamState& state, const AdamConfig& cfg) {
  double sq = 0.0;
  for (const auto& [name, gmat] : grads) {
    for (double v : gmat.d) {
      if (!std::isfinite(v)) throw std::runtime_error("diverged");
      sq += v * v;
    }
  }
  double norm = std::sqrt(sq);
  if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
    double f = cfg.clip_norm / norm;
    for (auto& [name, gmat] : grads)
      for (double& v : gmat.d) v *= f;
  }
  state.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, pmat] : params.values) {
    auto git = grads.find(name);
    if (git == grads.end()) throw std::invalid_argument("missing gradient: " + name);
    const ad::Mat& gmat = git->second;
    if (gmat.rows != pmat.rows || gmat.cols != pmat.cols)
      ad::shape_error("adam", pmat, gmat);
    ad::Mat& m = state.m.try_emplace(name, ad::Mat(pmat.rows, pmat.cols)).first->second;
    ad::Mat& v = state.v.try_emplace(name, ad::Mat(pmat.rows, pmat.cols)).first->second;
    for (std::size_t i = 0; i < pmat.size(); ++i) {
      double gi = gmat.d[i];
      m.d[i] = cfg.beta1 * m.d[i] + (1.0 - cfg.beta1) * gi;
      v.d[i] = cfg.beta2 * v.d[i] + (1.0 - cfg.beta2) * gi * gi;
      double mhat = m.d[i] / bc1;
      double vhat = v.d[i] / bc2;
      pmat.d[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace tcm
