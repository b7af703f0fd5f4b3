#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tcm/rng.hpp"

namespace tcm {

// Closed opcode vocabulary; unknown names are rejected at parse time.
enum class Op : std::uint8_t {
  kParameter = 0,
  kAdd,
  kMul,
  kMatmul,
  kConv2d,
  kReduceSum,
  kTranspose,
  kReshape,
  kTanh,
  kRelu,
  kConcat,
  kBroadcast,
};

inline constexpr int kOpVocabSize = 12;

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kParameter: return "parameter";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kMatmul: return "matmul";
    case Op::kConv2d: return "conv2d";
    case Op::kReduceSum: return "reduce_sum";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kConcat: return "concat";
    case Op::kBroadcast: return "broadcast";
  }
  throw std::invalid_argument("bad opcode id");
}

inline Op op_from_name(const std::string& name) {
  for (int i = 0; i < kOpVocabSize; ++i) {
    Op op = static_cast<Op>(i);
    if (name == op_name(op)) return op;
  }
  throw std::invalid_argument("unknown opcode: " + name);
}

// One tensor operation. `shape` describes the output tensor; `filter`
// is nonempty only for conv2d.
struct Node {
  int id = 0;
  Op opcode = Op::kParameter;
  std::vector<std::int64_t> shape;
  std::vector<int> layout;
  std::vector<std::int64_t> strides;
  std::vector<std::int64_t> padding;
  std::vector<std::int64_t> filter;
  bool is_output = false;

  std::int64_t elems() const {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
  }
  // 4-byte elements throughout.
  std::int64_t bytes() const { return 4 * elems(); }
};

inline Node make_node(int id, Op op, std::vector<std::int64_t> shape,
                      bool is_output = false) {
  Node n;
  n.id = id;
  n.opcode = op;
  n.layout.resize(shape.size());
  std::iota(n.layout.begin(), n.layout.end(), 0);
  n.strides.assign(shape.size(), 1);
  n.padding.assign(shape.size(), 0);
  n.shape = std::move(shape);
  n.is_output = is_output;
  return n;
}

using Edge = std::pair<int, int>;  // producer id -> consumer id

// A fused subgraph of operations: the unit of runtime prediction.
struct KernelGraph {
  std::string kernel_id;
  std::string program_id;
  std::string family;
  std::vector<Node> nodes;
  std::vector<Edge> edges;

  const Node* find(int id) const {
    for (const Node& n : nodes)
      if (n.id == id) return &n;
    return nullptr;
  }
};

// Program-scale graph before fusion; same node/edge structure.
struct ProgramGraph {
  std::string program_id;
  std::string family;
  std::uint64_t seed = 0;
  std::vector<Node> nodes;
  std::vector<Edge> edges;
};

namespace detail {

inline std::unordered_map<int, int> id_index(const std::vector<Node>& nodes) {
  std::unordered_map<int, int> m;
  m.reserve(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!m.emplace(nodes[i].id, static_cast<int>(i)).second)
      throw std::invalid_argument("duplicate node id " +
                                  std::to_string(nodes[i].id));
  }
  return m;
}

}  // namespace detail

// Kahn's algorithm; among ready nodes the smallest id goes first, so the
// result is independent of edge-list order.
inline std::vector<int> canonical_topo_sort(const std::vector<Node>& nodes,
                                            const std::vector<Edge>& edges) {
  auto index = detail::id_index(nodes);
  std::vector<int> indegree(nodes.size(), 0);
  std::vector<std::vector<int>> out(nodes.size());
  for (const Edge& e : edges) {
    auto p = index.find(e.first);
    auto c = index.find(e.second);
    if (p == index.end() || c == index.end())
      throw std::invalid_argument("edge references unknown node");
    out[p->second].push_back(c->second);
    ++indegree[c->second];
  }
  std::priority_queue<int, std::vector<int>, std::greater<int>> ready;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (indegree[i] == 0) ready.push(nodes[i].id);
  std::vector<int> order;
  order.reserve(nodes.size());
  while (!ready.empty()) {
    int id = ready.top();
    ready.pop();
    order.push_back(id);
    for (int ci : out[index.at(id)])
      if (--indegree[ci] == 0) ready.push(nodes[ci].id);
  }
  if (order.size() != nodes.size()) throw std::invalid_argument("not a DAG");
  return order;
}

inline std::vector<int> canonical_topo_sort(const KernelGraph& k) {
  return canonical_topo_sort(k.nodes, k.edges);
}

inline constexpr int kMaxRank = 6;

// Structural checks shared by kernels and programs.
inline void validate_nodes_edges(const std::vector<Node>& nodes,
                                 const std::vector<Edge>& edges) {
  auto index = detail::id_index(nodes);
  for (const Node& n : nodes) {
    int rank = static_cast<int>(n.shape.size());
    if (rank < 1 || rank > kMaxRank)
      throw std::invalid_argument("node " + std::to_string(n.id) +
                                  ": rank must be in [1," +
                                  std::to_string(kMaxRank) + "]");
    for (std::int64_t d : n.shape)
      if (d <= 0) throw std::invalid_argument("nonpositive dimension size");
    std::vector<int> perm = n.layout;
    std::sort(perm.begin(), perm.end());
    std::vector<int> want(rank);
    std::iota(want.begin(), want.end(), 0);
    if (perm != want)
      throw std::invalid_argument("layout is not a permutation of 0..rank-1");
    if (n.strides.size() != n.shape.size())
      throw std::invalid_argument("strides rank mismatch");
    for (std::int64_t s : n.strides)
      if (s <= 0) throw std::invalid_argument("nonpositive stride");
    for (std::int64_t p : n.padding)
      if (p < 0) throw std::invalid_argument("negative padding");
    if ((n.opcode == Op::kConv2d) != !n.filter.empty())
      throw std::invalid_argument("filter_size must be nonempty iff conv2d");
    for (std::int64_t f : n.filter)
      if (f <= 0) throw std::invalid_argument("nonpositive filter size");
  }
  std::set<Edge> seen;
  std::vector<int> indegree(nodes.size(), 0);
  for (const Edge& e : edges) {
    auto p = index.find(e.first);
    auto c = index.find(e.second);
    if (p == index.end() || c == index.end())
      throw std::invalid_argument("edge references unknown node");
    seen.insert(e);
    ++indegree[c->second];
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    bool is_param = nodes[i].opcode == Op::kParameter;
    if (is_param && indegree[i] != 0)
      throw std::invalid_argument("parameter node " +
                                  std::to_string(nodes[i].id) +
                                  " has producers");
  }
  canonical_topo_sort(nodes, edges);  // throws on cycles
}

inline void validate_kernel(const KernelGraph& k) {
  if (k.nodes.empty()) throw std::invalid_argument("empty kernel");
  validate_nodes_edges(k.nodes, k.edges);
  auto index = detail::id_index(k.nodes);
  std::vector<int> indegree(k.nodes.size(), 0);
  for (const Edge& e : k.edges) ++indegree[index.at(e.second)];
  bool any_output = false;
  for (std::size_t i = 0; i < k.nodes.size(); ++i) {
    any_output |= k.nodes[i].is_output;
    // Kernel inputs are exactly the parameter nodes.
    if (indegree[i] == 0 && k.nodes[i].opcode != Op::kParameter)
      throw std::invalid_argument("non-parameter source node " +
                                  std::to_string(k.nodes[i].id));
  }
  if (!any_output) throw std::invalid_argument("kernel has no output node");
}

inline void validate_program(const ProgramGraph& p) {
  if (p.nodes.empty()) throw std::invalid_argument("empty program");
  validate_nodes_edges(p.nodes, p.edges);
}

// 128-bit structural hash over the canonical node order; node id values do
// not enter the hash, so relabelings that preserve the canonical order
// collide (that is the point: duplicates differing only in ids dedupe).
struct Hash128 {
  std::uint64_t lo = 0, hi = 0;
  bool operator==(const Hash128& o) const { return lo == o.lo && hi == o.hi; }
  std::string hex() const {
    static const char* d = "0123456789abcdef";
    std::string s(32, '0');
    for (int i = 0; i < 16; ++i) {
      s[15 - i] = d[(hi >> (4 * i)) & 0xf];
      s[31 - i] = d[(lo >> (4 * i)) & 0xf];
    }
    return s;
  }
};

inline Hash128 canonical_kernel_hash(const KernelGraph& k) {
  std::vector<int> order = canonical_topo_sort(k);
  std::unordered_map<int, int> pos;
  pos.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    pos[order[i]] = static_cast<int>(i);
  std::uint64_t a = 0xcbf29ce484222325ULL;
  std::uint64_t b = 0x84222325cbf29ce4ULL;
  auto feed = [&](std::uint64_t v) {
    a = fnv1a64_step(a, v);
    b = fnv1a64_step(b, mix64(v));
  };
  feed(k.nodes.size());
  for (int id : order) {
    const Node& n = *k.find(id);
    feed(static_cast<std::uint64_t>(n.opcode));
    feed(n.is_output ? 1 : 0);
    for (auto* vec : {&n.shape, &n.strides, &n.padding, &n.filter}) {
      feed(vec->size());
      for (std::int64_t v : *vec) feed(static_cast<std::uint64_t>(v));
    }
    feed(n.layout.size());
    for (int v : n.layout) feed(static_cast<std::uint64_t>(v));
  }
  std::vector<std::pair<int, int>> es;
  es.reserve(k.edges.size());
  for (const Edge& e : k.edges) es.emplace_back(pos.at(e.first), pos.at(e.second));
  std::sort(es.begin(), es.end());
  feed(es.size());
  for (auto& e : es) {
    feed(static_cast<std::uint64_t>(e.first));
    feed(static_cast<std::uint64_t>(e.second));
  }
  return Hash128{a, b};
}

}  // namespace tcm
