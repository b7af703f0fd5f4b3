#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tcm/graph.hpp"
#include "tcm/oracle.hpp"
#include "tcm/rng.hpp"

namespace tcm {

inline const std::vector<std::string>& family_names() {
  static const std::vector<std::string> f = {"attention", "convnet", "mlp", "rnn"};
  return f;
}

enum class SizeClass { kSmall, kMedium, kLarge };

inline const char* size_class_name(SizeClass s) {
  switch (s) {
    case SizeClass::kSmall: return "small";
    case SizeClass::kMedium: return "medium";
    case SizeClass::kLarge: return "large";
  }
  throw std::logic_error("unhandled size class");
}

inline SizeClass size_class_from_name(const std::string& s) {
  if (s == "small") return SizeClass::kSmall;
  if (s == "medium") return SizeClass::kMedium;
  if (s == "large") return SizeClass::kLarge;
  throw std::invalid_argument("unknown size class: " + s);
}

namespace detail {

struct ProgramBuilder {
  ProgramGraph p;
  int next_id = 0;

  int add(Op op, std::vector<std::int64_t> shape,
          std::vector<std::int64_t> filter = {},
          std::vector<std::int64_t> padding = {}) {
    Node n = make_node(next_id++, op, std::move(shape));
    if (!filter.empty()) n.filter = std::move(filter);
    if (!padding.empty()) n.padding = std::move(padding);
    p.nodes.push_back(std::move(n));
    return p.nodes.back().id;
  }

  void edge(int from, int to) { p.edges.emplace_back(from, to); }

  // Sinks become program outputs.
  ProgramGraph finish() {
    std::set<int> has_consumer;
    for (const Edge& e : p.edges) has_consumer.insert(e.first);
    for (Node& n : p.nodes)
      if (!has_consumer.count(n.id)) n.is_output = true;
    validate_program(p);
    return std::move(p);
  }
};

inline std::int64_t pick(std::mt19937_64& rng, const std::vector<std::int64_t>& v) {
  return v[rng() % v.size()];
}

inline int pick_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

inline std::vector<std::int64_t> dense_dims(SizeClass sc) {
  switch (sc) {
    case SizeClass::kSmall: return {8, 16, 24, 32, 48, 64};
    case SizeClass::kMedium: return {16, 32, 48, 64, 96, 128};
    case SizeClass::kLarge: return {32, 64, 96, 128, 192, 256};
  }
  throw std::logic_error("unhandled size class");
}

inline std::vector<std::int64_t> spatial_dims(SizeClass sc) {
  switch (sc) {
    case SizeClass::kSmall: return {8, 12, 16};
    case SizeClass::kMedium: return {12, 16, 24};
    case SizeClass::kLarge: return {16, 24, 32};
  }
  throw std::logic_error("unhandled size class");
}

inline std::vector<std::int64_t> channel_dims(SizeClass sc) {
  switch (sc) {
    case SizeClass::kSmall: return {8, 16, 24, 32};
    case SizeClass::kMedium: return {16, 24, 32, 48};
    case SizeClass::kLarge: return {24, 32, 48, 64};
  }
  throw std::logic_error("unhandled size class");
}

inline ProgramGraph gen_mlp(SizeClass sc, std::mt19937_64& rng) {
  ProgramBuilder b;
  int layers = sc == SizeClass::kSmall    ? pick_int(rng, 4, 7)
               : sc == SizeClass::kMedium ? pick_int(rng, 12, 20)
                                          : pick_int(rng, 30, 55);
  auto dims = dense_dims(sc);
  std::int64_t batch = pick(rng, dims);
  std::int64_t width = pick(rng, dims);
  int prev = b.add(Op::kParameter, {batch, width});
  for (int l = 0; l < layers; ++l) {
    std::int64_t next_w = pick(rng, dims);
    int w = b.add(Op::kParameter, {width, next_w});
    int mm = b.add(Op::kMatmul, {batch, next_w});
    b.edge(prev, mm);
    b.edge(w, mm);
    int bias = b.add(Op::kParameter, {batch, next_w});
    int sum = b.add(Op::kAdd, {batch, next_w});
    b.edge(mm, sum);
    b.edge(bias, sum);
    int act = b.add(l % 3 == 2 ? Op::kTanh : Op::kRelu, {batch, next_w});
    b.edge(sum, act);
    prev = act;
    width = next_w;
  }
  return b.finish();
}

inline ProgramGraph gen_convnet(SizeClass sc, std::mt19937_64& rng) {
  ProgramBuilder b;
  int blocks = sc == SizeClass::kSmall    ? pick_int(rng, 5, 8)
               : sc == SizeClass::kMedium ? pick_int(rng, 14, 22)
                                          : pick_int(rng, 36, 60);
  std::int64_t hw = pick(rng, spatial_dims(sc));
  std::int64_t chan = pick(rng, channel_dims(sc));
  int prev = b.add(Op::kParameter, {hw, hw, chan});
  int skip = prev;
  for (int blk = 0; blk < blocks; ++blk) {
    bool residual = blk % 3 == 2;
    std::int64_t out_c = residual ? chan : pick(rng, channel_dims(sc));
    std::int64_t f = pick(rng, {1, 3, 5});
    int conv = b.add(Op::kConv2d, {hw, hw, out_c}, {f, f},
                     {(f - 1) / 2, (f - 1) / 2});
    b.edge(prev, conv);
    int bias = b.add(Op::kParameter, {hw, hw, out_c});
    int sum = b.add(Op::kAdd, {hw, hw, out_c});
    b.edge(conv, sum);
    b.edge(bias, sum);
    int act = b.add(Op::kRelu, {hw, hw, out_c});
    b.edge(sum, act);
    if (residual) {
      int res = b.add(Op::kAdd, {hw, hw, out_c});
      b.edge(act, res);
      b.edge(skip, res);
      act = res;
      skip = res;
    }
    prev = act;
    chan = out_c;
  }
  std::int64_t flat = hw * hw * chan;
  int rs = b.add(Op::kReshape, {1, flat});
  b.edge(prev, rs);
  int w = b.add(Op::kParameter, {flat, 10});
  int head = b.add(Op::kMatmul, {1, 10});
  b.edge(rs, head);
  b.edge(w, head);
  return b.finish();
}

inline ProgramGraph gen_rnn(SizeClass sc, std::mt19937_64& rng) {
  ProgramBuilder b;
  int steps = sc == SizeClass::kSmall    ? pick_int(rng, 4, 7)
              : sc == SizeClass::kMedium ? pick_int(rng, 12, 20)
                                         : pick_int(rng, 28, 50);
  auto dims = dense_dims(sc);
  std::int64_t batch = pick(rng, dims);
  std::int64_t in_d = pick(rng, dims);
  std::int64_t hid = pick(rng, dims);
  int wx = b.add(Op::kParameter, {in_d, hid});
  int wh = b.add(Op::kParameter, {hid, hid});
  int h = b.add(Op::kParameter, {batch, hid});
  int gate_src = h;
  for (int t = 0; t < steps; ++t) {
    int x = b.add(Op::kParameter, {batch, in_d});
    int mm1 = b.add(Op::kMatmul, {batch, hid});
    b.edge(x, mm1);
    b.edge(wx, mm1);
    int mm2 = b.add(Op::kMatmul, {batch, hid});
    b.edge(h, mm2);
    b.edge(wh, mm2);
    int sum = b.add(Op::kAdd, {batch, hid});
    b.edge(mm1, sum);
    b.edge(mm2, sum);
    int act = b.add(Op::kTanh, {batch, hid});
    b.edge(sum, act);
    h = act;
    if (t % 3 == 2) {
      int gate = b.add(Op::kMul, {batch, hid});
      b.edge(h, gate);
      b.edge(gate_src, gate);
      h = gate;
      gate_src = gate;
    }
  }
  return b.finish();
}

inline ProgramGraph gen_attention(SizeClass sc, std::mt19937_64& rng) {
  ProgramBuilder b;
  int blocks = sc == SizeClass::kSmall    ? pick_int(rng, 2, 3)
               : sc == SizeClass::kMedium ? pick_int(rng, 4, 7)
                                          : pick_int(rng, 10, 18);
  auto dims = dense_dims(sc);
  std::int64_t seq = pick(rng, dims);
  std::int64_t dim = pick(rng, dims);
  int x0 = b.add(Op::kParameter, {seq, dim});
  int prev = x0;
  for (int blk = 0; blk < blocks; ++blk) {
    int proj[3];
    for (int& mm : proj) {
      int w = b.add(Op::kParameter, {dim, dim});
      mm = b.add(Op::kMatmul, {seq, dim});
      b.edge(prev, mm);
      b.edge(w, mm);
    }
    int kt = b.add(Op::kTranspose, {dim, seq});
    b.edge(proj[1], kt);
    int scores = b.add(Op::kMatmul, {seq, seq});
    b.edge(proj[0], scores);
    b.edge(kt, scores);
    int rs = b.add(Op::kReduceSum, {seq, 1});
    b.edge(scores, rs);
    int bc = b.add(Op::kBroadcast, {seq, seq});
    b.edge(rs, bc);
    int attn = b.add(Op::kMul, {seq, seq});
    b.edge(scores, attn);
    b.edge(bc, attn);
    int ctx = b.add(Op::kMatmul, {seq, dim});
    b.edge(attn, ctx);
    b.edge(proj[2], ctx);
    int wf = b.add(Op::kParameter, {dim, dim});
    int ff = b.add(Op::kMatmul, {seq, dim});
    b.edge(ctx, ff);
    b.edge(wf, ff);
    int act = b.add(Op::kRelu, {seq, dim});
    b.edge(ff, act);
    prev = act;
    if (blk == 0) {
      int cc = b.add(Op::kConcat, {seq, 2 * dim});
      b.edge(prev, cc);
      b.edge(x0, cc);
      int wc = b.add(Op::kParameter, {2 * dim, dim});
      int mm = b.add(Op::kMatmul, {seq, dim});
      b.edge(cc, mm);
      b.edge(wc, mm);
      int act2 = b.add(Op::kRelu, {seq, dim});
      b.edge(mm, act2);
      prev = act2;
    }
  }
  return b.finish();
}

}  // namespace detail

inline ProgramGraph gen_program(const std::string& family, SizeClass size_class,
                                std::uint64_t seed) {
  auto rng = make_rng(derive_seed(seed, "gen." + family));
  ProgramGraph p;
  if (family == "mlp") p = detail::gen_mlp(size_class, rng);
  else if (family == "convnet") p = detail::gen_convnet(size_class, rng);
  else if (family == "rnn") p = detail::gen_rnn(size_class, rng);
  else if (family == "attention") p = detail::gen_attention(size_class, rng);
  else throw std::invalid_argument("unknown family: " + family);
  p.family = family;
  p.seed = seed;
  std::ostringstream id;
  id << family << "-" << size_class_name(size_class) << "-" << seed;
  p.program_id = id.str();
  return p;
}

// Group assignment over the program's non-parameter nodes; parameters
// replicate into consuming groups at decompose time.
struct FusionConfig {
  std::map<int, int> group_of;
};

namespace detail {

inline std::map<int, std::vector<int>> fusion_groups(const FusionConfig& cfg) {
  std::map<int, std::vector<int>> g;
  for (const auto& [node, grp] : cfg.group_of) g[grp].push_back(node);
  return g;
}

}  // namespace detail

// Renumber groups 0..G-1 by ascending smallest member id.
inline FusionConfig normalize_fusion_config(const FusionConfig& cfg) {
  std::map<int, int> remap;  // old group id (keyed by min node) -> new id
  std::map<int, int> min_node;
  for (const auto& [node, grp] : cfg.group_of) {
    auto it = min_node.find(grp);
    if (it == min_node.end() || node < it->second) min_node[grp] = node;
  }
  std::vector<std::pair<int, int>> order;  // (min node, old group)
  for (const auto& [grp, mn] : min_node) order.emplace_back(mn, grp);
  std::sort(order.begin(), order.end());
  for (std::size_t i = 0; i < order.size(); ++i)
    remap[order[i].second] = static_cast<int>(i);
  FusionConfig out;
  for (const auto& [node, grp] : cfg.group_of) out.group_of[node] = remap[grp];
  return out;
}

inline std::string fusion_config_key(const FusionConfig& cfg) {
  FusionConfig n = normalize_fusion_config(cfg);
  std::ostringstream ss;
  for (const auto& [node, grp] : n.group_of) ss << node << ":" << grp << ";";
  return ss.str();
}

inline void validate_fusion_config(const ProgramGraph& program,
                                   const FusionConfig& cfg) {
  std::set<int> param_ids, nonparam_ids;
  for (const Node& n : program.nodes)
    (n.opcode == Op::kParameter ? param_ids : nonparam_ids).insert(n.id);
  for (const auto& [node, grp] : cfg.group_of) {
    if (param_ids.count(node))
      throw std::invalid_argument("fusion config assigns parameter node " +
                                  std::to_string(node));
    if (!nonparam_ids.count(node))
      throw std::invalid_argument("fusion config references unknown node " +
                                  std::to_string(node));
  }
  for (int id : nonparam_ids)
    if (!cfg.group_of.count(id))
      throw std::invalid_argument("fusion config misses node " +
                                  std::to_string(id));

  auto groups = detail::fusion_groups(cfg);

  // Weak connectivity of each group's induced subgraph.
  for (const auto& [grp, members] : groups) {
    if (members.size() == 1) continue;
    std::set<int> in_group(members.begin(), members.end());
    std::map<int, std::vector<int>> undirected;
    for (const Edge& e : program.edges)
      if (in_group.count(e.first) && in_group.count(e.second)) {
        undirected[e.first].push_back(e.second);
        undirected[e.second].push_back(e.first);
      }
    std::vector<int> stack = {members[0]};
    std::set<int> seen = {members[0]};
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      for (int w : undirected[v])
        if (seen.insert(w).second) stack.push_back(w);
    }
    if (seen.size() != members.size())
      throw std::invalid_argument("fusion group " + std::to_string(grp) +
                                  " is not weakly connected");
  }

  // Acyclicity of the contracted group graph (Kahn).
  std::map<int, std::set<int>> succ;
  std::map<int, int> indeg;
  for (const auto& [grp, members] : groups) indeg[grp] = 0;
  for (const Edge& e : program.edges) {
    auto a = cfg.group_of.find(e.first);
    auto b = cfg.group_of.find(e.second);
    if (a == cfg.group_of.end() || b == cfg.group_of.end()) continue;
    if (a->second != b->second && succ[a->second].insert(b->second).second)
      indeg[b->second] += 1;
  }
  std::vector<int> ready;
  for (const auto& [grp, d] : indeg)
    if (d == 0) ready.push_back(grp);
  std::size_t done = 0;
  while (!ready.empty()) {
    int g = ready.back();
    ready.pop_back();
    ++done;
    for (int s : succ[g])
      if (--indeg[s] == 0) ready.push_back(s);
  }
  if (done != groups.size()) {
    for (const auto& [grp, d] : indeg)
      if (d > 0)
        throw std::invalid_argument("fusion config creates a cycle through group " +
                                    std::to_string(grp));
  }
}

inline FusionConfig finest_fusion_config(const ProgramGraph& program) {
  FusionConfig cfg;
  int g = 0;
  for (const Node& n : program.nodes)
    if (n.opcode != Op::kParameter) cfg.group_of[n.id] = g++;
  return cfg;
}

namespace detail {

struct ProgramIndex {
  std::unordered_map<int, int> pos;                // node id -> position
  std::vector<std::vector<int>> producers;         // by position, node ids
  std::vector<std::vector<int>> consumers;         // by position, node ids

  explicit ProgramIndex(const ProgramGraph& p) {
    pos = id_index(p.nodes);
    producers.resize(p.nodes.size());
    consumers.resize(p.nodes.size());
    for (const Edge& e : p.edges) {
      producers[pos.at(e.second)].push_back(e.first);
      consumers[pos.at(e.first)].push_back(e.second);
    }
    for (auto& v : producers) std::sort(v.begin(), v.end());
    for (auto& v : consumers) std::sort(v.begin(), v.end());
  }
};

// A group is usable as a kernel only if it has exactly one output node and
// its all-ones-tile working set fits the scratchpad; the tile enumerator's
// preconditions then hold for every kernel any generator can emit.
inline bool group_feasible(const ProgramGraph& program, const ProgramIndex& idx,
                           const std::vector<int>& members,
                           const FusionConfig& cfg, const OracleMachine& machine) {
  std::set<int> in_group(members.begin(), members.end());
  std::int64_t out_elems = 0;
  int outputs = 0;
  std::set<int> external_inputs;
  for (int id : members) {
    const Node& n = program.nodes[idx.pos.at(id)];
    bool is_out = n.is_output;
    for (int c : idx.consumers[idx.pos.at(id)])
      if (!in_group.count(c)) is_out = true;
    if (is_out) {
      ++outputs;
      out_elems = n.elems();
    }
    for (int p : idx.producers[idx.pos.at(id)])
      if (!in_group.count(p)) external_inputs.insert(p);
  }
  if (outputs != 1) return false;
  double ws = 0.0;
  double oe = static_cast<double>(out_elems);
  for (int id : members) {
    const Node& n = program.nodes[idx.pos.at(id)];
    ws += std::ceil(static_cast<double>(n.elems()) / oe) * 4.0;
  }
  for (int id : external_inputs) {
    const Node& n = program.nodes[idx.pos.at(id)];
    ws += std::ceil(static_cast<double>(n.elems()) / oe) * 4.0;
  }
  return ws <= static_cast<double>(machine.scratchpad_bytes);
}

// Untiled footprint of a group: all member tensors plus everything read
// from outside. The greedy fuser's merge criterion.
inline double group_full_bytes(const ProgramGraph& program,
                               const ProgramIndex& idx,
                               const std::vector<int>& members) {
  std::set<int> in_group(members.begin(), members.end());
  std::set<int> external_inputs;
  double bytes = 0.0;
  for (int id : members) {
    bytes += static_cast<double>(program.nodes[idx.pos.at(id)].bytes());
    for (int p : idx.producers[idx.pos.at(id)])
      if (!in_group.count(p)) external_inputs.insert(p);
  }
  for (int id : external_inputs)
    bytes += static_cast<double>(program.nodes[idx.pos.at(id)].bytes());
  return bytes;
}

// Would merging the groups of `a` and `b` close a directed cycle: is there a
// path from b's group back to a's group through other groups?
inline bool merge_creates_cycle(const ProgramGraph& program,
                                const FusionConfig& cfg, int ga, int gb) {
  std::map<int, std::set<int>> succ;
  for (const Edge& e : program.edges) {
    auto a = cfg.group_of.find(e.first);
    auto b = cfg.group_of.find(e.second);
    if (a != cfg.group_of.end() && b != cfg.group_of.end() &&
        a->second != b->second)
      succ[a->second].insert(b->second);
  }
  // The merged group is cyclic iff some ga=>gb path detours through a third
  // group (that group would then both feed and consume the merge), or gb
  // already reaches ga.
  std::vector<int> stack;
  std::set<int> seen;
  for (int s : succ[ga])
    if (s != gb && seen.insert(s).second) stack.push_back(s);
  while (!stack.empty()) {
    int g = stack.back();
    stack.pop_back();
    if (g == gb) return true;
    for (int s : succ[g])
      if (seen.insert(s).second) stack.push_back(s);
  }
  stack = {gb};
  seen = {gb};
  while (!stack.empty()) {
    int g = stack.back();
    stack.pop_back();
    for (int s : succ[g]) {
      if (s == ga) return true;
      if (seen.insert(s).second) stack.push_back(s);
    }
  }
  return false;
}

inline std::vector<int> group_members(const FusionConfig& cfg, int grp) {
  std::vector<int> m;
  for (const auto& [node, g] : cfg.group_of)
    if (g == grp) m.push_back(node);
  return m;
}

}  // namespace detail

// Deterministic stand-in for the compiler's default fusion heuristic: walk
// edges in id order and merge producer into consumer whenever the merged
// group stays acyclic, uniquely-outputting, and small enough to fit the
// scratchpad untiled.
inline FusionConfig greedy_fusion_config(const ProgramGraph& program,
                                         const OracleMachine& machine) {
  detail::ProgramIndex idx(program);
  FusionConfig cfg = finest_fusion_config(program);
  std::vector<Edge> edges = program.edges;
  std::sort(edges.begin(), edges.end());
  bool changed = true;
  while (changed) {
    changed = false;
    for (const Edge& e : edges) {
      auto a = cfg.group_of.find(e.first);
      auto b = cfg.group_of.find(e.second);
      if (a == cfg.group_of.end() || b == cfg.group_of.end()) continue;
      if (a->second == b->second) continue;
      int ga = a->second, gb = b->second;
      if (detail::merge_creates_cycle(program, cfg, ga, gb)) continue;
      std::vector<int> merged = detail::group_members(cfg, ga);
      std::vector<int> mb = detail::group_members(cfg, gb);
      merged.insert(merged.end(), mb.begin(), mb.end());
      std::sort(merged.begin(), merged.end());
      if (detail::group_full_bytes(program, idx, merged) >
          static_cast<double>(machine.scratchpad_bytes))
        continue;
      FusionConfig trial = cfg;
      for (int id : mb) trial.group_of[id] = ga;
      if (!detail::group_feasible(program, idx, merged, trial, machine)) continue;
      cfg = std::move(trial);
      changed = true;
    }
  }
  return normalize_fusion_config(cfg);
}

// Record of the assignments a mutation overwrote; writing them back undoes
// the move exactly.
struct FusionMove {
  std::map<int, int> before;
};

inline void undo_fusion_move(FusionConfig& cfg, const FusionMove& move) {
  for (const auto& [node, grp] : move.before) cfg.group_of[node] = grp;
}

namespace detail {

inline bool try_merge(const ProgramGraph& program, const ProgramIndex& idx,
                      const OracleMachine& machine, FusionConfig& cfg,
                      const Edge& e, FusionMove* move) {
  auto a = cfg.group_of.find(e.first);
  auto b = cfg.group_of.find(e.second);
  if (a == cfg.group_of.end() || b == cfg.group_of.end()) return false;
  int ga = a->second, gb = b->second;
  if (ga == gb) return false;
  if (merge_creates_cycle(program, cfg, ga, gb)) return false;
  std::vector<int> ma = group_members(cfg, ga);
  std::vector<int> mb = group_members(cfg, gb);
  std::vector<int> merged = ma;
  merged.insert(merged.end(), mb.begin(), mb.end());
  std::sort(merged.begin(), merged.end());
  FusionConfig trial = cfg;
  for (int id : mb) trial.group_of[id] = ga;
  if (!group_feasible(program, idx, merged, trial, machine)) return false;
  if (move)
    for (int id : mb) move->before[id] = gb;
  cfg = std::move(trial);
  return true;
}

// Split a group along an internal bridge edge. Returns false when the group
// has no bridge whose two sides form feasible groups.
inline bool try_split(const ProgramGraph& program, const ProgramIndex& idx,
                      const OracleMachine& machine, FusionConfig& cfg, int grp,
                      std::mt19937_64& rng, FusionMove* move) {
  std::vector<int> members = group_members(cfg, grp);
  if (members.size() < 2) return false;
  std::set<int> in_group(members.begin(), members.end());
  std::vector<Edge> internal;
  for (const Edge& e : program.edges)
    if (in_group.count(e.first) && in_group.count(e.second)) internal.push_back(e);
  std::shuffle(internal.begin(), internal.end(), rng);
  int fresh = 0;
  for (const auto& [node, g] : cfg.group_of) fresh = std::max(fresh, g + 1);
  for (const Edge& cut : internal) {
    // Connected component of the cut consumer with the cut edge removed.
    std::set<int> comp = {cut.second};
    std::vector<int> stack = {cut.second};
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      auto visit = [&](int w) {
        if (in_group.count(w) && comp.insert(w).second) stack.push_back(w);
      };
      for (int w : idx.consumers[idx.pos.at(v)]) visit(w);
      for (int w : idx.producers[idx.pos.at(v)])
        if (!(v == cut.second && w == cut.first)) visit(w);
    }
    if (comp.count(cut.first)) continue;  // not a bridge
    std::vector<int> side_a, side_b;
    for (int id : members) (comp.count(id) ? side_b : side_a).push_back(id);
    FusionConfig trial = cfg;
    for (int id : side_b) trial.group_of[id] = fresh;
    if (!group_feasible(program, idx, side_a, trial, machine)) continue;
    if (!group_feasible(program, idx, side_b, trial, machine)) continue;
    if (move)
      for (int id : side_b) move->before[id] = grp;
    cfg = std::move(trial);
    return true;
  }
  return false;
}

}  // namespace detail

// Start from singletons and greedily merge a random subset of edges; the
// acceptance probability varies with the seed so configs span coarse to fine.
inline FusionConfig random_fusion_config(const ProgramGraph& program,
                                         const OracleMachine& machine,
                                         std::uint64_t seed) {
  detail::ProgramIndex idx(program);
  auto rng = make_rng(derive_seed(seed, "random_fusion"));
  FusionConfig cfg = finest_fusion_config(program);
  std::vector<Edge> edges;
  for (const Edge& e : program.edges)
    if (cfg.group_of.count(e.first) && cfg.group_of.count(e.second))
      edges.push_back(e);
  std::shuffle(edges.begin(), edges.end(), rng);
  double p = 0.15 + 0.7 * (static_cast<double>(rng() >> 11) * 0x1p-53);
  for (const Edge& e : edges) {
    if (static_cast<double>(rng() >> 11) * 0x1p-53 > p) continue;
    detail::try_merge(program, idx, machine, cfg, e, nullptr);
  }
  return normalize_fusion_config(cfg);
}

// One merge or split, chosen at random, validity repaired by rejection.
// Returns the applied move; an empty move means no valid mutation was found.
inline FusionMove mutate_fusion_config(const ProgramGraph& program,
                                       const OracleMachine& machine,
                                       FusionConfig& cfg, std::mt19937_64& rng) {
  detail::ProgramIndex idx(program);
  std::vector<Edge> edges;
  for (const Edge& e : program.edges)
    if (cfg.group_of.count(e.first) && cfg.group_of.count(e.second))
      edges.push_back(e);
  std::sort(edges.begin(), edges.end());
  for (int attempt = 0; attempt < 64; ++attempt) {
    FusionMove move;
    bool do_merge = (rng() & 1) == 0;
    if (do_merge && !edges.empty()) {
      const Edge& e = edges[rng() % edges.size()];
      if (detail::try_merge(program, idx, machine, cfg, e, &move)) return move;
    } else {
      std::vector<int> groups;
      for (const auto& [node, g] : cfg.group_of) groups.push_back(g);
      std::sort(groups.begin(), groups.end());
      groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
      int grp = groups[rng() % groups.size()];
      if (detail::try_split(program, idx, machine, cfg, grp, rng, &move))
        return move;
    }
  }
  return FusionMove{};
}

inline FusionMove mutate_fusion_config(const ProgramGraph& program,
                                       const OracleMachine& machine,
                                       FusionConfig& cfg, std::uint64_t seed) {
  auto rng = make_rng(derive_seed(seed, "mutate_fusion"));
  return mutate_fusion_config(program, machine, cfg, rng);
}

// One kernel per group. Cross-group and program-parameter inputs become
// parameter nodes in the consumer; externally consumed nodes and program
// outputs carry is_output.
inline std::vector<KernelGraph> decompose(const ProgramGraph& program,
                                          const FusionConfig& config) {
  validate_fusion_config(program, config);
  FusionConfig cfg = normalize_fusion_config(config);
  detail::ProgramIndex idx(program);
  auto groups = detail::fusion_groups(cfg);
  std::vector<KernelGraph> kernels;
  kernels.reserve(groups.size());
  for (const auto& [grp, members] : groups) {
    std::set<int> in_group(members.begin(), members.end());
    KernelGraph k;
    k.program_id = program.program_id;
    k.family = program.family;
    k.kernel_id = program.program_id + ":g" + std::to_string(grp);
    std::set<int> external_inputs;
    for (int id : members) {
      Node n = program.nodes[idx.pos.at(id)];
      bool is_out = n.is_output;
      for (int c : idx.consumers[idx.pos.at(id)])
        if (!in_group.count(c)) is_out = true;
      n.is_output = is_out;
      k.nodes.push_back(std::move(n));
      for (int p : idx.producers[idx.pos.at(id)])
        if (!in_group.count(p)) external_inputs.insert(p);
    }
    for (int id : external_inputs) {
      const Node& src = program.nodes[idx.pos.at(id)];
      k.nodes.push_back(make_node(id, Op::kParameter, src.shape));
    }
    std::sort(k.nodes.begin(), k.nodes.end(),
              [](const Node& a, const Node& b) { return a.id < b.id; });
    for (const Edge& e : program.edges)
      if (in_group.count(e.second) &&
          (in_group.count(e.first) || external_inputs.count(e.first)))
        k.edges.push_back(e);
    std::sort(k.edges.begin(), k.edges.end());
    validate_kernel(k);
    kernels.push_back(std::move(k));
  }
  return kernels;
}

struct TileKernelEntry {
  KernelGraph kernel;
  std::array<double, 4> static_perf{};
  std::vector<std::vector<std::int64_t>> tiles;
  std::vector<double> runtimes;
};

struct TileDataset {
  std::vector<TileKernelEntry> entries;
  std::vector<std::string> warnings;
};

struct FusionSample {
  KernelGraph kernel;
  std::array<double, 4> static_perf{};
  double runtime_cycles = 0.0;
};

struct FusionDataset {
  std::vector<FusionSample> samples;
};

// Kernels come from the compiler-default (greedy) fusion of each program; up
// to `per_kernel_cap` tiles per kernel, sampled without replacement.
inline TileDataset build_tile_dataset(const std::vector<ProgramGraph>& programs,
                                      const OracleMachine& machine,
                                      int per_kernel_cap, std::uint64_t seed) {
  if (per_kernel_cap < 2)
    throw std::invalid_argument("per_kernel_cap must be >= 2");
  TileDataset ds;
  for (const ProgramGraph& program : programs) {
    FusionConfig cfg = greedy_fusion_config(program, machine);
    for (KernelGraph& kernel : decompose(program, cfg)) {
      auto tiles = enumerate_tile_sizes(kernel, machine);
      if (tiles.size() < 2) {
        ds.warnings.push_back("kernel " + kernel.kernel_id +
                              " has fewer than 2 valid tiles; dropped");
        continue;
      }
      if (static_cast<int>(tiles.size()) > per_kernel_cap) {
        auto rng = make_rng(derive_seed(seed, "tile_sample." + kernel.kernel_id));
        std::shuffle(tiles.begin(), tiles.end(), rng);
        tiles.resize(per_kernel_cap);
        std::sort(tiles.begin(), tiles.end());
      }
      TileKernelEntry entry;
      entry.static_perf = static_analysis(kernel);
      std::uint64_t mseed = derive_seed(seed, "measure");
      for (const auto& t : tiles) {
        entry.tiles.push_back(t);
        entry.runtimes.push_back(measure(kernel, t, machine, mseed).runtime_cycles);
      }
      entry.kernel = std::move(kernel);
      ds.entries.push_back(std::move(entry));
    }
  }
  return ds;
}

// Random fusion configs per program; kernels deduplicated across the whole
// dataset by canonical hash. Each kernel's label is its best-tile runtime
// (the compiler tiles every kernel it actually emits).
inline FusionDataset build_fusion_dataset(
    const std::vector<ProgramGraph>& programs, const OracleMachine& machine,
    int configs_per_program, std::uint64_t seed) {
  if (configs_per_program < 1)
    throw std::invalid_argument("configs_per_program must be >= 1");
  FusionDataset ds;
  std::set<std::string> seen;
  std::uint64_t mseed = derive_seed(seed, "measure");
  for (const ProgramGraph& program : programs) {
    for (int i = 0; i < configs_per_program; ++i) {
      FusionConfig cfg = random_fusion_config(
          program, machine, derive_seed(seed, program.program_id, i));
      for (KernelGraph& kernel : decompose(program, cfg)) {
        Hash128 h = canonical_kernel_hash(kernel);
        if (!seen.insert(h.hex()).second) continue;
        FusionSample s;
        s.static_perf = static_analysis(kernel);
        auto [tile, rt] = best_tile(kernel, machine);
        s.runtime_cycles = measure(kernel, tile, machine, mseed).runtime_cycles;
        (void)rt;
        s.kernel = std::move(kernel);
        ds.samples.push_back(std::move(s));
      }
    }
  }
  return ds;
}

struct DatasetSplit {
  std::string method;
  std::vector<std::string> train, validation, test;
};

enum class SplitMethod { kRandom, kFamilyHoldout };

inline DatasetSplit split_programs(const std::vector<ProgramGraph>& programs,
                                   SplitMethod method,
                                   std::array<double, 3> ratios,
                                   std::uint64_t seed,
                                   const std::string& holdout_family = "attention") {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split ratios must sum to 1");
  DatasetSplit out;
  if (method == SplitMethod::kRandom) {
    out.method = "random";
    std::vector<std::string> ids;
    for (const auto& p : programs) ids.push_back(p.program_id);
    auto rng = make_rng(derive_seed(seed, "split.random"));
    std::shuffle(ids.begin(), ids.end(), rng);
    std::size_t n = ids.size();
    auto cut = [&](double frac) {
      return static_cast<std::size_t>(std::floor(frac * n + 0.5));
    };
    std::size_t c1 = cut(ratios[0]);
    std::size_t c2 = cut(ratios[0] + ratios[1]);
    out.train.assign(ids.begin(), ids.begin() + c1);
    out.validation.assign(ids.begin() + c1, ids.begin() + c2);
    out.test.assign(ids.begin() + c2, ids.end());
    return out;
  }
  out.method = "family_holdout";
  std::set<std::string> fams;
  for (const auto& p : programs) fams.insert(p.family);
  if (fams.size() < 2)
    throw std::invalid_argument("family_holdout needs at least 2 families");
  if (!fams.count(holdout_family))
    throw std::invalid_argument("holdout family not present: " + holdout_family);
  std::vector<std::string> rest;
  for (const auto& p : programs) {
    if (p.family == holdout_family) out.test.push_back(p.program_id);
    else rest.push_back(p.program_id);
  }
  auto rng = make_rng(derive_seed(seed, "split.family"));
  std::shuffle(rest.begin(), rest.end(), rng);
  double tv = ratios[0] + ratios[1];
  std::size_t c1 = static_cast<std::size_t>(
      std::floor(ratios[0] / tv * rest.size() + 0.5));
  out.train.assign(rest.begin(), rest.begin() + c1);
  out.validation.assign(rest.begin() + c1, rest.end());
  return out;
}

// Infinite deterministic batch stream: families round-robin in sorted order,
// kernels uniform within the family, and (tile task) each batch holding up
// to n distinct configs of a single kernel.
class BalancedTileSampler {
 public:
  struct Batch {
    int entry = -1;
    std::vector<int> configs;
  };

  BalancedTileSampler(const TileDataset& ds, const std::vector<int>& entries,
                      int batch_n, std::uint64_t seed)
      : ds_(&ds), batch_n_(batch_n), rng_(make_rng(derive_seed(seed, "sampler"))) {
    if (batch_n < 2) throw std::invalid_argument("tile batch needs n >= 2");
    std::map<std::string, std::vector<int>> by_family;
    for (int e : entries) {
      if (ds.entries[e].tiles.size() < 2) continue;  // rank pairs impossible
      by_family[ds.entries[e].kernel.family].push_back(e);
    }
    for (auto& [fam, list] : by_family) families_.push_back(std::move(list));
    if (families_.empty())
      throw std::invalid_argument("no kernels with >= 2 configs to sample");
  }

  Batch next() {
    const std::vector<int>& fam = families_[cursor_ % families_.size()];
    ++cursor_;
    Batch b;
    b.entry = fam[rng_() % fam.size()];
    const auto& entry = ds_->entries[b.entry];
    int total = static_cast<int>(entry.tiles.size());
    if (total <= batch_n_) {
      b.configs.resize(total);
      for (int i = 0; i < total; ++i) b.configs[i] = i;
    } else {
      std::vector<int> all(total);
      for (int i = 0; i < total; ++i) all[i] = i;
      for (int i = 0; i < batch_n_; ++i) {
        int j = i + static_cast<int>(rng_() % (total - i));
        std::swap(all[i], all[j]);
      }
      b.configs.assign(all.begin(), all.begin() + batch_n_);
    }
    return b;
  }

 private:
  const TileDataset* ds_;
  int batch_n_;
  std::mt19937_64 rng_;
  std::vector<std::vector<int>> families_;
  std::size_t cursor_ = 0;
};

class BalancedFusionSampler {
 public:
  BalancedFusionSampler(const FusionDataset& ds, const std::vector<int>& samples,
                        int batch_n, std::uint64_t seed)
      : batch_n_(batch_n), rng_(make_rng(derive_seed(seed, "sampler"))) {
    if (batch_n < 1) throw std::invalid_argument("batch needs n >= 1");
    std::map<std::string, std::vector<int>> by_family;
    for (int s : samples) by_family[ds.samples[s].kernel.family].push_back(s);
    for (auto& [fam, list] : by_family) families_.push_back(std::move(list));
    if (families_.empty()) throw std::invalid_argument("empty dataset");
  }

  std::vector<int> next() {
    std::vector<int> batch(batch_n_);
    for (int i = 0; i < batch_n_; ++i) {
      const std::vector<int>& fam = families_[cursor_ % families_.size()];
      ++cursor_;
      batch[i] = fam[rng_() % fam.size()];
    }
    return batch;
  }

 private:
  int batch_n_;
  std::mt19937_64 rng_;
  std::vector<std::vector<int>> families_;
  std::size_t cursor_ = 0;
};

}  // namespace tcm
