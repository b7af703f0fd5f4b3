#pragma once

// Central-difference gradient checking shared by the unit tests and the
// acceptance gate. Builders must produce a scalar tape root from a fixed
// list of differentiable leaves so the same closure can be re-evaluated at
// perturbed inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "tcm/nn.hpp"

namespace tcmtest {

using BuildFn =
    std::function<tcm::ad::TNode*(tcm::ad::Graph&, std::vector<tcm::ad::TNode*>&)>;

struct FdReport {
  double max_rel = 0.0;
  int checked = 0;
};

inline double scalar_of(const BuildFn& build, const std::vector<tcm::ad::Mat>& xs) {
  tcm::ad::Graph g;
  std::vector<tcm::ad::TNode*> nodes;
  nodes.reserve(xs.size());
  for (const auto& m : xs) nodes.push_back(g.param(m));
  tcm::ad::TNode* out = build(g, nodes);
  return out->val.d[0];
}

// Max relative error between tape gradients and central differences over
// every element of every leaf. Denominator floors at 1 so near-zero
// gradients are compared absolutely.
inline FdReport fd_gradients(const BuildFn& build, std::vector<tcm::ad::Mat> xs,
                             double h = 1e-3) {
  tcm::ad::Graph g;
  std::vector<tcm::ad::TNode*> nodes;
  nodes.reserve(xs.size());
  for (const auto& m : xs) nodes.push_back(g.param(m));
  tcm::ad::TNode* out = build(g, nodes);
  if (out->rows() != 1 || out->cols() != 1)
    throw std::logic_error("fd_gradients: builder must return a scalar");
  g.backward(out);

  FdReport rep;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t j = 0; j < xs[i].size(); ++j) {
      double keep = xs[i].d[j];
      xs[i].d[j] = keep + h;
      double fp = scalar_of(build, xs);
      xs[i].d[j] = keep - h;
      double fm = scalar_of(build, xs);
      xs[i].d[j] = keep;
      double num = (fp - fm) / (2.0 * h);
      double ana = nodes[i]->grad.d[j];
      double rel = std::abs(ana - num) /
                   std::max({1.0, std::abs(ana), std::abs(num)});
      rep.max_rel = std::max(rep.max_rel, rel);
      ++rep.checked;
    }
  }
  return rep;
}

inline tcm::ad::Mat rand_mat(int r, int c, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  tcm::ad::Mat m(r, c);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : m.d) v = dist(rng);
  return m;
}

// Values bounded away from zero, for kinked ops like relu.
inline tcm::ad::Mat rand_mat_away(int r, int c, std::mt19937_64& rng,
                                  double margin = 0.1) {
  tcm::ad::Mat m = rand_mat(r, c, rng);
  for (double& v : m.d) {
    while (std::abs(v) < margin)
      v = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
  }
  return m;
}

// Column entries separated by at least `gap`, for colwise_max.
inline tcm::ad::Mat rand_mat_distinct(int r, int c, std::mt19937_64& rng,
                                      double gap = 0.05) {
  while (true) {
    tcm::ad::Mat m = rand_mat(r, c, rng);
    bool ok = true;
    for (int j = 0; j < c && ok; ++j)
      for (int a = 0; a < r && ok; ++a)
        for (int b = a + 1; b < r && ok; ++b)
          if (std::abs(m.at(a, j) - m.at(b, j)) < gap) ok = false;
    if (ok) return m;
  }
}

// Fixed random projection to a scalar so every output direction of the op
// under test contributes to the gradient.
inline tcm::ad::TNode* project(tcm::ad::Graph& g, tcm::ad::TNode* x,
                               std::uint64_t seed) {
  tcm::ad::Mat w(x->rows(), x->cols());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (double& v : w.d) v = dist(rng);
  return tcm::ad::sum_all(g, tcm::ad::mul(g, x, g.constant(std::move(w))));
}

}  // namespace tcmtest
