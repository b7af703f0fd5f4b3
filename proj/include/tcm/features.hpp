#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "tcm/graph.hpp"

namespace tcm {

// Per-feature pad length for variable-sized dimension lists.
inline constexpr int kDimPad = 6;

// Fixed-size encoding of a dimension list: P padded/truncated entries,
// then the sum and product over the FULL original list (the product is the
// tensor volume and must survive truncation).
inline std::vector<double> encode_dim_list(const std::vector<std::int64_t>& values,
                                           int pad = kDimPad) {
  if (pad < 1) throw std::invalid_argument("pad length must be >= 1");
  std::vector<double> out(static_cast<std::size_t>(pad) + 2, 0.0);
  for (std::size_t i = 0; i < values.size() && i < static_cast<std::size_t>(pad); ++i)
    out[i] = static_cast<double>(values[i]);
  double sum = 0.0, prod = 1.0;
  for (std::int64_t v : values) {
    sum += static_cast<double>(v);
    prod *= static_cast<double>(v);
  }
  out[pad] = sum;
  out[pad + 1] = prod;
  return out;
}

inline constexpr int kDimBlock = kDimPad + 2;
// shape, layout, strides, padding, filter_size blocks + is_output flag.
inline constexpr int kNodeFeatureDim = 5 * kDimBlock + 1;

inline std::vector<double> build_node_features(const Node& node) {
  std::vector<double> out;
  out.reserve(kNodeFeatureDim);
  auto append = [&out](const std::vector<double>& block) {
    out.insert(out.end(), block.begin(), block.end());
  };
  append(encode_dim_list(node.shape));
  std::vector<std::int64_t> layout64(node.layout.begin(), node.layout.end());
  append(encode_dim_list(layout64));
  append(encode_dim_list(node.strides));
  append(encode_dim_list(node.padding));
  append(encode_dim_list(node.filter));
  out.push_back(node.is_output ? 1.0 : 0.0);
  return out;
}

// Whole-kernel inputs: tile size (tile-size task only) and the optional
// static performance 4-vector (flops, bytes read, bytes written, special ops).
struct KernelFeatures {
  std::vector<std::int64_t> tile;
  std::optional<std::array<double, 4>> static_perf;
};

inline std::vector<double> encode_kernel_features(const KernelFeatures& kf,
                                                  bool with_tile,
                                                  bool with_static) {
  std::vector<double> out;
  if (with_tile) {
    std::vector<double> t = encode_dim_list(kf.tile);
    out.insert(out.end(), t.begin(), t.end());
  }
  if (with_static) {
    std::array<double, 4> sp = kf.static_perf.value_or(std::array<double, 4>{});
    out.insert(out.end(), sp.begin(), sp.end());
  }
  return out;
}

inline int kernel_feature_dim(bool with_tile, bool with_static) {
  return (with_tile ? kDimBlock : 0) + (with_static ? 4 : 0);
}

// Where the kernel-feature vector enters the network: duplicated onto every
// node row, or carried separately and concatenated to the kernel embedding.
enum class Placement { kNodeFeatures, kKernelEmbedding };

struct Matrix {
  int rows = 0, cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
};

// Encoded kernel: adjacency (by node position), node-feature matrix, opcode
// ids, the separately-carried kernel features, and the canonical node order.
struct ModelInput {
  std::vector<std::vector<int>> in_adj;   // positions of in-neighbors, ascending id
  std::vector<std::vector<int>> out_adj;  // positions of out-neighbors, ascending id
  Matrix node_features;
  std::vector<int> opcode_ids;
  std::vector<double> kernel_features;  // empty when duplicated onto node rows
  std::vector<int> canonical_order;     // node positions in topological order
  Placement placement = Placement::kNodeFeatures;
  int raw_node_dim = 0;  // node-feature width before any kernel-feature block
  bool scaled = false;
};

// Min/max ranges observed on the training set, over node-feature rows
// (first block) and kernel-feature vectors (second block).
struct FeatureScaler {
  std::vector<double> node_min, node_max;
  std::vector<double> kern_min, kern_max;
  bool fitted = false;

  int feature_count() const {
    return static_cast<int>(node_min.size() + kern_min.size());
  }
};

inline double scale_value(double x, double lo, double hi) {
  // Degenerate range maps to 0; out-of-range values extrapolate linearly.
  if (hi <= lo) return 0.0;
  return (x - lo) / (hi - lo);
}

// Elementwise (x - min) / (max - min) over the flat [node | kernel] layout.
inline std::vector<double> apply_scaler(const FeatureScaler& s,
                                        const std::vector<double>& raw) {
  if (static_cast<int>(raw.size()) != s.feature_count())
    throw std::invalid_argument("apply_scaler: dimension mismatch");
  std::vector<double> out(raw.size());
  std::size_t nn = s.node_min.size();
  for (std::size_t i = 0; i < nn; ++i)
    out[i] = scale_value(raw[i], s.node_min[i], s.node_max[i]);
  for (std::size_t i = 0; i < s.kern_min.size(); ++i)
    out[nn + i] = scale_value(raw[nn + i], s.kern_min[i], s.kern_max[i]);
  return out;
}

namespace detail {

inline void accumulate(std::vector<double>& lo, std::vector<double>& hi,
                       const double* row, std::size_t n) {
  if (lo.empty()) {
    lo.assign(row, row + n);
    hi.assign(row, row + n);
    return;
  }
  if (lo.size() != n)
    throw std::invalid_argument("fit_scaler: inconsistent feature widths");
  for (std::size_t i = 0; i < n; ++i) {
    lo[i] = std::min(lo[i], row[i]);
    hi[i] = std::max(hi[i], row[i]);
  }
}

}  // namespace detail

// Incremental fitting from raw feature rows, for callers that never
// materialize full ModelInputs. Equivalent ranges give identical scalers.
struct ScalerFitter {
  FeatureScaler s;

  void add_node_row(const std::vector<double>& row) {
    detail::accumulate(s.node_min, s.node_max, row.data(), row.size());
  }
  void add_kernel_vec(const std::vector<double>& vec) {
    if (!vec.empty())
      detail::accumulate(s.kern_min, s.kern_max, vec.data(), vec.size());
  }
  FeatureScaler finish() {
    if (s.node_min.empty()) throw std::invalid_argument("empty training set");
    s.fitted = true;
    return s;
  }
};

template <typename InputRange>
FeatureScaler fit_scaler(const InputRange& training_inputs) {
  FeatureScaler s;
  std::size_t seen = 0;
  for (const ModelInput& in : training_inputs) {
    ++seen;
    std::size_t nd = static_cast<std::size_t>(in.raw_node_dim);
    std::size_t width = static_cast<std::size_t>(in.node_features.cols);
    for (int r = 0; r < in.node_features.rows; ++r) {
      const double* row = &in.node_features.v[static_cast<std::size_t>(r) * width];
      detail::accumulate(s.node_min, s.node_max, row, nd);
      if (width > nd)
        detail::accumulate(s.kern_min, s.kern_max, row + nd, width - nd);
    }
    if (!in.kernel_features.empty())
      detail::accumulate(s.kern_min, s.kern_max, in.kernel_features.data(),
                         in.kernel_features.size());
  }
  if (seen == 0) throw std::invalid_argument("empty training set");
  s.fitted = true;
  return s;
}

inline ModelInput build_model_input(const KernelGraph& kernel,
                                    const KernelFeatures& kfeat,
                                    Placement placement, bool with_tile,
                                    bool with_static) {
  ModelInput in;
  in.placement = placement;
  in.raw_node_dim = kNodeFeatureDim;

  auto index = detail::id_index(kernel.nodes);
  int n = static_cast<int>(kernel.nodes.size());
  in.in_adj.resize(n);
  in.out_adj.resize(n);
  for (const Edge& e : kernel.edges) {
    int p = index.at(e.first), c = index.at(e.second);
    in.in_adj[c].push_back(p);
    in.out_adj[p].push_back(c);
  }
  auto by_id = [&](int a, int b) { return kernel.nodes[a].id < kernel.nodes[b].id; };
  for (auto& l : in.in_adj) std::sort(l.begin(), l.end(), by_id);
  for (auto& l : in.out_adj) std::sort(l.begin(), l.end(), by_id);

  std::vector<int> order = canonical_topo_sort(kernel);
  in.canonical_order.reserve(order.size());
  for (int id : order) in.canonical_order.push_back(index.at(id));

  if (with_tile) {
    const Node* out_node = nullptr;
    for (const Node& nd : kernel.nodes)
      if (nd.is_output) out_node = &nd;
    if (out_node && kfeat.tile.size() != out_node->shape.size())
      throw std::invalid_argument("tile rank does not match output rank");
  }
  std::vector<double> kvec = encode_kernel_features(kfeat, with_tile, with_static);
  int kd = static_cast<int>(kvec.size());

  int width = kNodeFeatureDim + (placement == Placement::kNodeFeatures ? kd : 0);
  in.node_features = Matrix(n, width);
  in.opcode_ids.reserve(n);
  for (int i = 0; i < n; ++i) {
    const Node& nd = kernel.nodes[i];
    in.opcode_ids.push_back(static_cast<int>(nd.opcode));
    std::vector<double> feats = build_node_features(nd);
    for (int c = 0; c < kNodeFeatureDim; ++c) in.node_features.at(i, c) = feats[c];
    if (placement == Placement::kNodeFeatures)
      for (int c = 0; c < kd; ++c)
        in.node_features.at(i, kNodeFeatureDim + c) = kvec[c];
  }
  if (placement == Placement::kKernelEmbedding) in.kernel_features = std::move(kvec);
  return in;
}

inline ModelInput scale_input(const FeatureScaler& s, ModelInput in) {
  if (!s.fitted) throw std::invalid_argument("scaler not fitted");
  std::size_t nd = static_cast<std::size_t>(in.raw_node_dim);
  std::size_t width = static_cast<std::size_t>(in.node_features.cols);
  if (s.node_min.size() != nd ||
      (width > nd && s.kern_min.size() != width - nd))
    throw std::invalid_argument("scaler width mismatch");
  for (int r = 0; r < in.node_features.rows; ++r) {
    double* row = &in.node_features.v[static_cast<std::size_t>(r) * width];
    for (std::size_t i = 0; i < nd; ++i)
      row[i] = scale_value(row[i], s.node_min[i], s.node_max[i]);
    for (std::size_t i = nd; i < width; ++i)
      row[i] = scale_value(row[i], s.kern_min[i - nd], s.kern_max[i - nd]);
  }
  for (std::size_t i = 0; i < in.kernel_features.size(); ++i)
    in.kernel_features[i] =
        scale_value(in.kernel_features[i], s.kern_min[i], s.kern_max[i]);
  in.scaled = true;
  return in;
}

inline ModelInput build_model_input(const KernelGraph& kernel,
                                    const KernelFeatures& kfeat,
                                    const FeatureScaler& scaler,
                                    Placement placement, bool with_tile,
                                    bool with_static) {
  return scale_input(scaler,
                     build_model_input(kernel, kfeat, placement, with_tile, with_static));
}

}  // namespace tcm
