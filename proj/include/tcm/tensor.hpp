#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tcm {
namespace ad {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// Dense row-major matrix; the only tensor rank the model needs.
struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> d;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), d(static_cast<std::size_t>(r) * c, 0.0) {}
  static Mat zeros(int r, int c) { return Mat(r, c); }
  static Mat scalar(double v) {
    Mat m(1, 1);
    m.d[0] = v;
    return m;
  }

  double& at(int r, int c) { return d[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return d[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return d.size(); }
  EMap map() { return EMap(d.data(), rows, cols); }
  ECMap map() const { return ECMap(d.data(), rows, cols); }
  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

inline void shape_error(const std::string& op, const Mat& a, const Mat& b) {
  throw std::invalid_argument(op + ": shape mismatch " + a.shape_str() + " vs " +
                              b.shape_str());
}

class Graph;

// One tape entry: forward value, gradient buffer, and a closure that scatters
// this node's gradient into its parents.
struct TNode {
  Mat val;
  Mat grad;
  bool needs_grad = false;
  bool touched = false;
  std::function<void()> back;

  int rows() const { return val.rows; }
  int cols() const { return val.cols; }
};

// Append-only arena; backward is a single reverse scan in creation order,
// which is already a valid topological order of the tape.
class Graph {
 public:
  TNode* leaf(Mat value, bool needs_grad) {
    nodes_.emplace_back();
    TNode* n = &nodes_.back();
    n->val = std::move(value);
    n->needs_grad = needs_grad;
    if (needs_grad) n->grad = Mat(n->val.rows, n->val.cols);
    return n;
  }

  TNode* constant(Mat value) { return leaf(std::move(value), false); }
  TNode* param(const Mat& value) { return leaf(value, true); }

  // Custom op: value plus a backward closure. The closure must accumulate
  // into each parent's grad and set its touched flag (use accum()).
  TNode* make(Mat value, std::initializer_list<TNode*> parents,
              std::function<void(TNode&)> back) {
    bool ng = false;
    for (TNode* p : parents) ng = ng || p->needs_grad;
    TNode* n = leaf(std::move(value), ng);
    if (ng && back) {
      n->back = [n, fn = std::move(back)]() { fn(*n); };
    }
    return n;
  }

  void backward(TNode* root) {
    if (root->val.rows != 1 || root->val.cols != 1)
      throw std::invalid_argument("backward: root must be scalar");
    if (!root->needs_grad) return;
    root->grad.d[0] = 1.0;
    root->touched = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (it->touched && it->back) it->back();
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::deque<TNode> nodes_;
};

// Marks the parent live for the reverse scan; all gradient writes go
// through the returned reference.
inline Mat& accum(TNode* p) {
  p->touched = true;
  return p->grad;
}

inline TNode* matmul(Graph& g, TNode* a, TNode* b) {
  if (a->cols() != b->rows()) shape_error("matmul", a->val, b->val);
  Mat out(a->rows(), b->cols());
  out.map() = a->val.map() * b->val.map();
  return g.make(std::move(out), {a, b}, [a, b](TNode& n) {
    if (a->needs_grad) accum(a).map() += n.grad.map() * b->val.map().transpose();
    if (b->needs_grad) accum(b).map() += a->val.map().transpose() * n.grad.map();
  });
}

inline TNode* add(Graph& g, TNode* a, TNode* b) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    shape_error("add", a->val, b->val);
  Mat out(a->rows(), a->cols());
  out.map() = a->val.map() + b->val.map();
  return g.make(std::move(out), {a, b}, [a, b](TNode& n) {
    if (a->needs_grad) accum(a).map() += n.grad.map();
    if (b->needs_grad) accum(b).map() += n.grad.map();
  });
}

inline TNode* sub(Graph& g, TNode* a, TNode* b) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    shape_error("sub", a->val, b->val);
  Mat out(a->rows(), a->cols());
  out.map() = a->val.map() - b->val.map();
  return g.make(std::move(out), {a, b}, [a, b](TNode& n) {
    if (a->needs_grad) accum(a).map() += n.grad.map();
    if (b->needs_grad) accum(b).map() -= n.grad.map();
  });
}

inline TNode* mul(Graph& g, TNode* a, TNode* b) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    shape_error("mul", a->val, b->val);
  Mat out(a->rows(), a->cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.d[i] = a->val.d[i] * b->val.d[i];
  return g.make(std::move(out), {a, b}, [a, b](TNode& n) {
    if (a->needs_grad) {
      Mat& ga = accum(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.d[i] += n.grad.d[i] * b->val.d[i];
    }
    if (b->needs_grad) {
      Mat& gb = accum(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb.d[i] += n.grad.d[i] * a->val.d[i];
    }
  });
}

inline TNode* scale(Graph& g, TNode* a, double s) {
  Mat out(a->rows(), a->cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.d[i] = a->val.d[i] * s;
  return g.make(std::move(out), {a}, [a, s](TNode& n) {
    Mat& ga = accum(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.d[i] += n.grad.d[i] * s;
  });
}

inline TNode* transpose(Graph& g, TNode* a) {
  Mat out(a->cols(), a->rows());
  out.map() = a->val.map().transpose();
  return g.make(std::move(out), {a}, [a](TNode& n) {
    accum(a).map() += n.grad.map().transpose();
  });
}

inline TNode* concat_cols(Graph& g, const std::vector<TNode*>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: empty input");
  int rows = parts[0]->rows(), cols = 0;
  for (TNode* p : parts) {
    if (p->rows() != rows) shape_error("concat", parts[0]->val, p->val);
    cols += p->cols();
  }
  Mat out(rows, cols);
  int off = 0;
  for (TNode* p : parts) {
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < p->cols(); ++c) out.at(r, off + c) = p->val.at(r, c);
    off += p->cols();
  }
  bool ng = false;
  for (TNode* p : parts) ng = ng || p->needs_grad;
  TNode* n = g.leaf(std::move(out), ng);
  if (ng) {
    std::vector<TNode*> ps = parts;
    n->back = [n, ps]() {
      int off2 = 0;
      for (TNode* p : ps) {
        if (p->needs_grad) {
          Mat& gp = accum(p);
          for (int r = 0; r < p->rows(); ++r)
            for (int c = 0; c < p->cols(); ++c) gp.at(r, c) += n->grad.at(r, off2 + c);
        }
        off2 += p->cols();
      }
    };
  }
  return n;
}

inline TNode* concat_rows(Graph& g, const std::vector<TNode*>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: empty input");
  int cols = parts[0]->cols(), rows = 0;
  for (TNode* p : parts) {
    if (p->cols() != cols) shape_error("concat", parts[0]->val, p->val);
    rows += p->rows();
  }
  Mat out(rows, cols);
  int off = 0;
  for (TNode* p : parts) {
    for (int r = 0; r < p->rows(); ++r)
      for (int c = 0; c < cols; ++c) out.at(off + r, c) = p->val.at(r, c);
    off += p->rows();
  }
  bool ng = false;
  for (TNode* p : parts) ng = ng || p->needs_grad;
  TNode* n = g.leaf(std::move(out), ng);
  if (ng) {
    std::vector<TNode*> ps = parts;
    n->back = [n, ps]() {
      int off2 = 0;
      for (TNode* p : ps) {
        if (p->needs_grad) {
          Mat& gp = accum(p);
          for (int r = 0; r < p->rows(); ++r)
            for (int c = 0; c < p->cols(); ++c) gp.at(r, c) += n->grad.at(off2 + r, c);
        }
        off2 += p->rows();
      }
    };
  }
  return n;
}

inline TNode* slice_cols(Graph& g, TNode* a, int start, int len) {
  if (start < 0 || len < 1 || start + len > a->cols())
    throw std::invalid_argument("slice: range out of bounds");
  Mat out(a->rows(), len);
  for (int r = 0; r < a->rows(); ++r)
    for (int c = 0; c < len; ++c) out.at(r, c) = a->val.at(r, start + c);
  return g.make(std::move(out), {a}, [a, start, len](TNode& n) {
    Mat& ga = accum(a);
    for (int r = 0; r < a->rows(); ++r)
      for (int c = 0; c < len; ++c) ga.at(r, start + c) += n.grad.at(r, c);
  });
}

inline TNode* gather_rows(Graph& g, TNode* a, std::vector<int> idx) {
  for (int i : idx)
    if (i < 0 || i >= a->rows())
      throw std::invalid_argument("gather: row index out of range");
  Mat out(static_cast<int>(idx.size()), a->cols());
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (int c = 0; c < a->cols(); ++c)
      out.at(static_cast<int>(r), c) = a->val.at(idx[r], c);
  return g.make(std::move(out), {a}, [a, idx = std::move(idx)](TNode& n) {
    Mat& ga = accum(a);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (int c = 0; c < ga.cols; ++c)
        ga.at(idx[r], c) += n.grad.at(static_cast<int>(r), c);
  });
}

inline TNode* relu(Graph& g, TNode* a) {
  Mat out(a->rows(), a->cols());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.d[i] = a->val.d[i] > 0.0 ? a->val.d[i] : 0.0;
  return g.make(std::move(out), {a}, [a](TNode& n) {
    Mat& ga = accum(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (a->val.d[i] > 0.0) ga.d[i] += n.grad.d[i];
  });
}

inline TNode* tanh_(Graph& g, TNode* a) {
  Mat out(a->rows(), a->cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.d[i] = std::tanh(a->val.d[i]);
  return g.make(std::move(out), {a}, [a](TNode& n) {
    Mat& ga = accum(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga.d[i] += n.grad.d[i] * (1.0 - n.val.d[i] * n.val.d[i]);
  });
}

inline TNode* sigmoid(Graph& g, TNode* a) {
  Mat out(a->rows(), a->cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = a->val.d[i];
    out.d[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
  }
  return g.make(std::move(out), {a}, [a](TNode& n) {
    Mat& ga = accum(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga.d[i] += n.grad.d[i] * n.val.d[i] * (1.0 - n.val.d[i]);
  });
}

inline TNode* softmax_rows(Graph& g, TNode* a) {
  Mat out(a->rows(), a->cols());
  for (int r = 0; r < a->rows(); ++r) {
    double mx = a->val.at(r, 0);
    for (int c = 1; c < a->cols(); ++c) mx = std::max(mx, a->val.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < a->cols(); ++c) {
      double e = std::exp(a->val.at(r, c) - mx);
      out.at(r, c) = e;
      sum += e;
    }
    for (int c = 0; c < a->cols(); ++c) out.at(r, c) /= sum;
  }
  return g.make(std::move(out), {a}, [a](TNode& n) {
    Mat& ga = accum(a);
    for (int r = 0; r < ga.rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c < ga.cols; ++c) dot += n.grad.at(r, c) * n.val.at(r, c);
      for (int c = 0; c < ga.cols; ++c)
        ga.at(r, c) += n.val.at(r, c) * (n.grad.at(r, c) - dot);
    }
  });
}

inline TNode* colwise_sum(Graph& g, TNode* a) {
  Mat out(1, a->cols());
  for (int r = 0; r < a->rows(); ++r)
    for (int c = 0; c < a->cols(); ++c) out.at(0, c) += a->val.at(r, c);
  return g.make(std::move(out), {a}, [a](TNode& n) {
    Mat& ga = accum(a);
    for (int r = 0; r < ga.rows; ++r)
      for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += n.grad.at(0, c);
  });
}

inline TNode* colwise_mean(Graph& g, TNode* a) {
  if (a->rows() < 1) throw std::invalid_argument("mean: empty input");
  double inv = 1.0 / a->rows();
  Mat out(1, a->cols());
  for (int r = 0; r < a->rows(); ++r)
    for (int c = 0; c < a->cols(); ++c) out.at(0, c) += a->val.at(r, c) * inv;
  return g.make(std::move(out), {a}, [a, inv](TNode& n) {
    Mat& ga = accum(a);
    for (int r = 0; r < ga.rows; ++r)
      for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += n.grad.at(0, c) * inv;
  });
}

// Gradient routes to the first (lowest row index) argmax per column.
inline TNode* colwise_max(Graph& g, TNode* a) {
  if (a->rows() < 1) throw std::invalid_argument("max: empty input");
  Mat out(1, a->cols());
  std::vector<int> arg(a->cols(), 0);
  for (int c = 0; c < a->cols(); ++c) {
    double best = a->val.at(0, c);
    for (int r = 1; r < a->rows(); ++r)
      if (a->val.at(r, c) > best) {
        best = a->val.at(r, c);
        arg[c] = r;
      }
    out.at(0, c) = best;
  }
  return g.make(std::move(out), {a}, [a, arg = std::move(arg)](TNode& n) {
    Mat& ga = accum(a);
    for (int c = 0; c < ga.cols; ++c) ga.at(arg[c], c) += n.grad.at(0, c);
  });
}

inline TNode* sum_all(Graph& g, TNode* a) {
  Mat out(1, 1);
  for (double v : a->val.d) out.d[0] += v;
  return g.make(std::move(out), {a}, [a](TNode& n) {
    Mat& ga = accum(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.d[i] += n.grad.d[0];
  });
}

// Row-wise x/||x||; a zero row stays zero and blocks gradient flow.
inline TNode* l2_normalize_rows(Graph& g, TNode* a) {
  Mat out(a->rows(), a->cols());
  std::vector<double> norms(a->rows(), 0.0);
  for (int r = 0; r < a->rows(); ++r) {
    double s = 0.0;
    for (int c = 0; c < a->cols(); ++c) s += a->val.at(r, c) * a->val.at(r, c);
    norms[r] = std::sqrt(s);
    if (norms[r] > 0.0)
      for (int c = 0; c < a->cols(); ++c) out.at(r, c) = a->val.at(r, c) / norms[r];
  }
  return g.make(std::move(out), {a}, [a, norms = std::move(norms)](TNode& n) {
    Mat& ga = accum(a);
    for (int r = 0; r < ga.rows; ++r) {
      if (norms[r] <= 0.0) continue;
      double dot = 0.0;
      for (int c = 0; c < ga.cols; ++c) dot += n.grad.at(r, c) * n.val.at(r, c);
      for (int c = 0; c < ga.cols; ++c)
        ga.at(r, c) += (n.grad.at(r, c) - dot * n.val.at(r, c)) / norms[r];
    }
  });
}

}  // namespace ad
}  // namespace tcm
