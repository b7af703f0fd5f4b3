#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tcm/graph.hpp"
#include "tcm/rng.hpp"

namespace tcm {

// Simplified accelerator: software-managed scratchpad fed from HBM, separate
// vector and matrix units, fixed per-kernel launch overhead.
struct OracleMachine {
  std::int64_t scratchpad_bytes = 1 << 20;
  std::int64_t bandwidth_bytes_per_cycle = 64;
  std::int64_t peak_transfer_bytes = 4096;
  std::int64_t vector_flops_per_cycle = 128;
  std::int64_t matrix_flops_per_cycle = 4096;
  std::int64_t vector_width = 8;
  std::int64_t startup_cycles = 500;
  double noise_sigma = 0.0;
};

inline void validate_machine(const OracleMachine& m) {
  if (m.scratchpad_bytes <= 0 || m.bandwidth_bytes_per_cycle <= 0 ||
      m.peak_transfer_bytes <= 0 || m.vector_flops_per_cycle <= 0 ||
      m.matrix_flops_per_cycle <= 0 || m.vector_width <= 0 ||
      m.startup_cycles <= 0)
    throw std::invalid_argument("machine parameters must be positive");
  if (m.noise_sigma < 0)
    throw std::invalid_argument("noise_sigma must be >= 0");
}

inline OracleMachine sim_v2() { return OracleMachine{}; }

inline OracleMachine sim_v3() {
  OracleMachine m;
  m.matrix_flops_per_cycle *= 2;
  m.bandwidth_bytes_per_cycle = m.bandwidth_bytes_per_cycle * 3 / 2;
  return m;
}

inline OracleMachine machine_from_preset(const std::string& name) {
  if (name == "sim-v2") return sim_v2();
  if (name == "sim-v3") return sim_v3();
  throw std::invalid_argument("unknown machine preset: " + name);
}

inline OracleMachine parse_machine(const std::string& text) {
  OracleMachine m;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("bad machine config line: " + line);
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    if (key == "noise_sigma") {
      m.noise_sigma = std::stod(val);
      continue;
    }
    std::int64_t v = std::stoll(val);
    if (key == "scratchpad_bytes") m.scratchpad_bytes = v;
    else if (key == "bandwidth_bytes_per_cycle") m.bandwidth_bytes_per_cycle = v;
    else if (key == "peak_transfer_bytes") m.peak_transfer_bytes = v;
    else if (key == "vector_flops_per_cycle") m.vector_flops_per_cycle = v;
    else if (key == "matrix_flops_per_cycle") m.matrix_flops_per_cycle = v;
    else if (key == "vector_width") m.vector_width = v;
    else if (key == "startup_cycles") m.startup_cycles = v;
    else throw std::invalid_argument("unknown machine key: " + key);
  }
  validate_machine(m);
  return m;
}

inline std::string machine_to_text(const OracleMachine& m) {
  std::ostringstream ss;
  ss << "scratchpad_bytes=" << m.scratchpad_bytes << "\n"
     << "bandwidth_bytes_per_cycle=" << m.bandwidth_bytes_per_cycle << "\n"
     << "peak_transfer_bytes=" << m.peak_transfer_bytes << "\n"
     << "vector_flops_per_cycle=" << m.vector_flops_per_cycle << "\n"
     << "matrix_flops_per_cycle=" << m.matrix_flops_per_cycle << "\n"
     << "vector_width=" << m.vector_width << "\n"
     << "startup_cycles=" << m.startup_cycles << "\n"
     << "noise_sigma=" << m.noise_sigma << "\n";
  return ss.str();
}

inline OracleMachine load_machine(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open machine config: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_machine(ss.str());
}

inline void save_machine(const OracleMachine& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write machine config: " + path);
  f << machine_to_text(m);
}

struct RuntimeSample {
  std::string kernel_id;
  std::vector<std::int64_t> tile;
  double runtime_cycles = 0.0;
  bool measured = false;
};

namespace detail {

// Per-node flop counts. Data-movement opcodes cost zero; matmul and conv2d
// charge 2*N multiply-accumulates against the contraction depth taken from
// the first (lowest-id) producer's trailing dimension.
inline double node_flops(const Node& node, const Node* first_producer) {
  double out_elems = static_cast<double>(node.elems());
  switch (node.opcode) {
    case Op::kAdd:
    case Op::kMul:
    case Op::kTanh:
    case Op::kRelu:
      return out_elems;
    case Op::kMatmul: {
      if (!first_producer || first_producer->shape.empty())
        throw std::invalid_argument("matmul node needs a producer");
      return 2.0 * out_elems * static_cast<double>(first_producer->shape.back());
    }
    case Op::kConv2d: {
      if (!first_producer || first_producer->shape.empty())
        throw std::invalid_argument("conv2d node needs a producer");
      double filt = 1.0;
      for (std::int64_t f : node.filter) filt *= static_cast<double>(f);
      return 2.0 * out_elems * filt *
             static_cast<double>(first_producer->shape.back());
    }
    case Op::kReduceSum: {
      if (!first_producer)
        throw std::invalid_argument("reduce_sum node needs a producer");
      return static_cast<double>(first_producer->elems());
    }
    case Op::kParameter:
    case Op::kTranspose:
    case Op::kReshape:
    case Op::kConcat:
    case Op::kBroadcast:
      return 0.0;
  }
  throw std::logic_error("unhandled opcode");
}

// Everything about a kernel the runtime formula needs that does not depend
// on the tile; built once, reused across the whole tile sweep.
struct KernelCost {
  std::vector<double> flops;    // per node, unpadded whole-shape flops
  std::vector<double> elems;    // per node
  std::vector<bool> special;    // matmul/conv2d flag per node
  double flops_total = 0.0;
  double bytes_in = 0.0;
  double bytes_out = 0.0;
  int special_ops = 0;
  int output_count = 0;
  std::vector<std::int64_t> out_shape;  // unique output node, if any
  double out_elems = 0.0;
};

inline KernelCost kernel_cost(const KernelGraph& k) {
  auto index = id_index(k.nodes);
  std::vector<const Node*> first_prod(k.nodes.size(), nullptr);
  for (const Edge& e : k.edges) {
    const Node& p = k.nodes[index.at(e.first)];
    const Node*& slot = first_prod[index.at(e.second)];
    if (!slot || p.id < slot->id) slot = &p;
  }
  KernelCost c;
  c.flops.reserve(k.nodes.size());
  for (std::size_t i = 0; i < k.nodes.size(); ++i) {
    const Node& n = k.nodes[i];
    double f = node_flops(n, first_prod[i]);
    c.flops.push_back(f);
    c.elems.push_back(static_cast<double>(n.elems()));
    bool sp = n.opcode == Op::kMatmul || n.opcode == Op::kConv2d;
    c.special.push_back(sp);
    c.flops_total += f;
    if (sp) ++c.special_ops;
    if (n.opcode == Op::kParameter) c.bytes_in += static_cast<double>(n.bytes());
    if (n.is_output) {
      c.bytes_out += static_cast<double>(n.bytes());
      ++c.output_count;
      c.out_shape = n.shape;
      c.out_elems = static_cast<double>(n.elems());
    }
  }
  return c;
}

inline void require_unique_output(const KernelCost& c) {
  if (c.output_count != 1)
    throw std::invalid_argument("kernel requires a unique output node");
}

inline double tile_volume(const std::vector<std::int64_t>& tile) {
  double v = 1.0;
  for (std::int64_t t : tile) v *= static_cast<double>(t);
  return v;
}

inline void check_tile(const KernelCost& c, const std::vector<std::int64_t>& tile) {
  require_unique_output(c);
  if (tile.size() != c.out_shape.size())
    throw std::invalid_argument("invalid tile: rank mismatch");
  for (std::size_t d = 0; d < tile.size(); ++d)
    if (tile[d] < 1 || tile[d] > c.out_shape[d])
      throw std::invalid_argument("invalid tile: dimension out of range");
}

// Per-iteration scratchpad residency: each node's tensor scales with the
// fraction of the output covered by one (unpadded) tile.
inline double working_set_bytes(const KernelCost& c,
                                const std::vector<std::int64_t>& tile) {
  double frac = tile_volume(tile) / c.out_elems;
  double bytes = 0.0;
  for (double e : c.elems) bytes += std::ceil(e * frac) * 4.0;
  return bytes;
}

inline double runtime_from_cost(const KernelCost& c,
                                const std::vector<std::int64_t>& tile,
                                const OracleMachine& m) {
  check_tile(c, tile);
  double iters = 1.0;
  for (std::size_t d = 0; d < tile.size(); ++d)
    iters *= std::ceil(static_cast<double>(c.out_shape[d]) /
                       static_cast<double>(tile[d]));

  if (working_set_bytes(c, tile) > static_cast<double>(m.scratchpad_bytes))
    throw std::invalid_argument("invalid tile: working set exceeds scratchpad");

  auto transfer = [&m](double bytes) {
    if (bytes <= 0.0) return 0.0;
    double eff = std::min(1.0, bytes / static_cast<double>(m.peak_transfer_bytes));
    return std::ceil(bytes /
                     (static_cast<double>(m.bandwidth_bytes_per_cycle) * eff));
  };
  double transfer_cycles =
      transfer(c.bytes_in / iters) + transfer(c.bytes_out / iters);

  double padded = 1.0;
  double vw = static_cast<double>(m.vector_width);
  for (std::int64_t t : tile)
    padded *= std::ceil(static_cast<double>(t) / vw) * vw;
  double frac = padded / c.out_elems;
  double compute_cycles = 0.0;
  for (std::size_t i = 0; i < c.flops.size(); ++i) {
    if (c.flops[i] <= 0.0) continue;
    double rate = static_cast<double>(c.special[i] ? m.matrix_flops_per_cycle
                                                   : m.vector_flops_per_cycle);
    compute_cycles += std::ceil(c.flops[i] * frac / rate);
  }

  return static_cast<double>(m.startup_cycles) +
         iters * std::max(transfer_cycles, compute_cycles);
}

inline std::vector<std::int64_t> dim_candidates(std::int64_t d) {
  std::vector<std::int64_t> out;
  for (std::int64_t t = 1; t < d; t *= 2) out.push_back(t);
  out.push_back(d);
  return out;
}

}  // namespace detail

inline double tile_iterations(const std::vector<std::int64_t>& shape,
                              const std::vector<std::int64_t>& tile) {
  if (shape.size() != tile.size())
    throw std::invalid_argument("tile rank does not match shape rank");
  double iters = 1.0;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (tile[d] < 1 || tile[d] > shape[d])
      throw std::invalid_argument("tile dimension out of range");
    iters *= std::ceil(static_cast<double>(shape[d]) /
                       static_cast<double>(tile[d]));
  }
  return iters;
}

// All tile vectors over the power-of-two (plus full-dimension) grid whose
// per-iteration working set fits the scratchpad, in lexicographic order.
inline std::vector<std::vector<std::int64_t>> enumerate_tile_sizes(
    const KernelGraph& kernel, const OracleMachine& machine) {
  detail::KernelCost c = detail::kernel_cost(kernel);
  detail::require_unique_output(c);
  std::vector<std::vector<std::int64_t>> axes;
  for (std::int64_t d : c.out_shape) axes.push_back(detail::dim_candidates(d));

  std::vector<std::vector<std::int64_t>> out;
  std::vector<std::int64_t> cur(axes.size(), 1);
  std::vector<std::size_t> idx(axes.size(), 0);
  double cap = static_cast<double>(machine.scratchpad_bytes);
  while (true) {
    for (std::size_t d = 0; d < axes.size(); ++d) cur[d] = axes[d][idx[d]];
    if (detail::working_set_bytes(c, cur) <= cap) out.push_back(cur);
    std::size_t d = axes.size();
    while (d > 0) {
      --d;
      if (++idx[d] < axes[d].size()) break;
      idx[d] = 0;
      if (d == 0) {
        if (out.empty())
          throw std::runtime_error("kernel exceeds scratchpad at minimum tile");
        return out;
      }
    }
  }
}

inline double kernel_runtime(const KernelGraph& kernel,
                             const std::vector<std::int64_t>& tile,
                             const OracleMachine& machine) {
  return detail::runtime_from_cost(detail::kernel_cost(kernel), tile, machine);
}

// Flops, bytes read from parameters, bytes written by outputs, count of
// matrix-unit ops; whole-kernel totals, independent of any tile choice.
inline std::array<double, 4> static_analysis(const KernelGraph& kernel) {
  detail::KernelCost c = detail::kernel_cost(kernel);
  return {c.flops_total, c.bytes_in, c.bytes_out,
          static_cast<double>(c.special_ops)};
}

namespace detail {

inline double standard_normal(std::mt19937_64& rng) {
  double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1p-53;  // (0,1]
  double u2 = static_cast<double>(rng() >> 11) * 0x1p-53;          // [0,1)
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
}

}  // namespace detail

// Min of three noisy runs; noise is one-sided multiplicative, so measured
// values never undershoot the analytic runtime.
inline RuntimeSample measure(const KernelGraph& kernel,
                             const std::vector<std::int64_t>& tile,
                             const OracleMachine& machine, std::uint64_t seed) {
  double analytic = kernel_runtime(kernel, tile, machine);
  std::uint64_t h = fnv1a64(kernel.kernel_id);
  for (std::int64_t t : tile) h = fnv1a64_step(h, static_cast<std::uint64_t>(t));
  h = fnv1a64_step(h, seed);
  std::mt19937_64 rng(mix64(h));
  double best = 0.0;
  for (int run = 0; run < 3; ++run) {
    double factor =
        1.0 + std::abs(detail::standard_normal(rng)) * machine.noise_sigma;
    double v = analytic * factor;
    if (run == 0 || v < best) best = v;
  }
  RuntimeSample s;
  s.kernel_id = kernel.kernel_id;
  s.tile = tile;
  s.runtime_cycles = best;
  s.measured = machine.noise_sigma > 0.0;
  return s;
}

inline double program_runtime(const std::vector<double>& kernel_runtimes) {
  double total = 0.0;
  for (double r : kernel_runtimes) total += r;
  return total;
}

// Exhaustive minimum over the enumerated tile grid; ties resolve to the
// earliest candidate in enumeration order.
inline std::pair<std::vector<std::int64_t>, double> best_tile(
    const KernelGraph& kernel, const OracleMachine& machine) {
  detail::KernelCost c = detail::kernel_cost(kernel);
  auto tiles = enumerate_tile_sizes(kernel, machine);
  std::vector<std::int64_t> best;
  double best_rt = 0.0;
  for (const auto& t : tiles) {
    double rt = detail::runtime_from_cost(c, t, machine);
    if (best.empty() || rt < best_rt) {
      best = t;
      best_rt = rt;
    }
  }
  return {best, best_rt};
}

}  // namespace tcm
