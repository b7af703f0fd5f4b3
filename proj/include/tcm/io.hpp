#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcm/datagen.hpp"
#include "tcm/graph.hpp"
#include "tcm/model.hpp"
#include "tcm/train.hpp"
#include "tcm/tuner.hpp"

namespace tcm {

// I/O failures (missing files, parse errors) exit 5; artifact mismatches
// (wrong version, bad checksum, wrong task) exit 4.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kKernelSchema = "tcm-kernel-v1";
inline constexpr const char* kProgramSchema = "tcm-program-v1";
inline constexpr const char* kSampleSchema = "tcm-sample-v1";
inline constexpr const char* kCheckpointSchema = "tcm-ckpt-v1";
inline constexpr const char* kToolVersion = "tcm 1.0";

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void atomic_write_file(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f << content;
    if (!f.flush()) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path);
}

inline std::string hash_hex(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  static const char* hexd = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = hexd[h & 0xf];
    h >>= 4;
  }
  buf[16] = '\0';
  return std::string(buf);
}

inline std::string hash_file(const std::string& path) {
  return hash_hex(read_file(path));
}

// Shortest round-trip decimal form; CSV cells stay bit-faithful.
inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_optional(const std::optional<double>& v) {
  return v.has_value() ? format_double(*v) : std::string();
}

namespace detail {

inline nlohmann::json dims_json(const std::vector<std::int64_t>& d) {
  return nlohmann::json(d);
}

inline std::vector<std::int64_t> dims_from(const nlohmann::json& j) {
  return j.get<std::vector<std::int64_t>>();
}

inline nlohmann::json node_to_json(const Node& n) {
  nlohmann::json j;
  j["id"] = n.id;
  j["opcode"] = op_name(n.opcode);
  j["shape"] = dims_json(n.shape);
  j["strides"] = dims_json(n.strides);
  j["padding"] = dims_json(n.padding);
  j["filter"] = dims_json(n.filter);
  j["layout"] = nlohmann::json(n.layout);
  j["is_output"] = n.is_output;
  return j;
}

inline Node node_from_json(const nlohmann::json& j) {
  Node n;
  n.id = j.at("id").get<int>();
  n.opcode = op_from_name(j.at("opcode").get<std::string>());
  n.shape = dims_from(j.at("shape"));
  n.strides = dims_from(j.at("strides"));
  n.padding = dims_from(j.at("padding"));
  n.filter = dims_from(j.at("filter"));
  n.layout = j.at("layout").get<std::vector<int>>();
  n.is_output = j.at("is_output").get<bool>();
  return n;
}

inline nlohmann::json edges_to_json(const std::vector<Edge>& edges) {
  nlohmann::json j = nlohmann::json::array();
  for (const Edge& e : edges) j.push_back({e.first, e.second});
  return j;
}

inline std::vector<Edge> edges_from_json(const nlohmann::json& j) {
  std::vector<Edge> edges;
  for (const auto& e : j) edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
  return edges;
}

inline nlohmann::json parse_line(const std::string& line, const std::string& path,
                                 std::size_t lineno) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
  }
}

inline void check_schema(const nlohmann::json& j, const char* want,
                         const std::string& where) {
  std::string got = j.value("version", "");
  if (got != want)
    throw ArtifactError(where + ": schema version mismatch: expected " +
                        want + ", got " + (got.empty() ? "<none>" : got));
}

template <typename Fn>
void for_each_record(const std::string& path, const char* schema, Fn&& fn) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = parse_line(line, path, lineno);
    check_schema(j, schema, path + ":" + std::to_string(lineno));
    fn(j);
  }
}

}  // namespace detail

inline nlohmann::json kernel_to_json(const KernelGraph& k) {
  nlohmann::json j;
  j["version"] = kKernelSchema;
  j["program_id"] = k.program_id;
  j["family"] = k.family;
  j["kernel_id"] = k.kernel_id;
  nlohmann::json nodes = nlohmann::json::array();
  for (const Node& n : k.nodes) nodes.push_back(detail::node_to_json(n));
  j["nodes"] = std::move(nodes);
  j["edges"] = detail::edges_to_json(k.edges);
  return j;
}

inline KernelGraph kernel_from_json(const nlohmann::json& j) {
  detail::check_schema(j, kKernelSchema, "kernel record");
  KernelGraph k;
  k.program_id = j.at("program_id").get<std::string>();
  k.family = j.at("family").get<std::string>();
  k.kernel_id = j.at("kernel_id").get<std::string>();
  for (const auto& n : j.at("nodes")) k.nodes.push_back(detail::node_from_json(n));
  k.edges = detail::edges_from_json(j.at("edges"));
  validate_kernel(k);
  return k;
}

inline nlohmann::json program_to_json(const ProgramGraph& p) {
  nlohmann::json j;
  j["version"] = kProgramSchema;
  j["program_id"] = p.program_id;
  j["family"] = p.family;
  j["seed"] = p.seed;
  nlohmann::json nodes = nlohmann::json::array();
  for (const Node& n : p.nodes) nodes.push_back(detail::node_to_json(n));
  j["nodes"] = std::move(nodes);
  j["edges"] = detail::edges_to_json(p.edges);
  return j;
}

inline ProgramGraph program_from_json(const nlohmann::json& j) {
  detail::check_schema(j, kProgramSchema, "program record");
  ProgramGraph p;
  p.program_id = j.at("program_id").get<std::string>();
  p.family = j.at("family").get<std::string>();
  p.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& n : j.at("nodes")) p.nodes.push_back(detail::node_from_json(n));
  p.edges = detail::edges_from_json(j.at("edges"));
  validate_program(p);
  return p;
}

inline void save_programs(const std::string& path,
                          const std::vector<ProgramGraph>& programs) {
  std::string out;
  for (const ProgramGraph& p : programs) out += program_to_json(p).dump() + "\n";
  atomic_write_file(path, out);
}

inline std::vector<ProgramGraph> load_programs(const std::string& path) {
  std::vector<ProgramGraph> programs;
  detail::for_each_record(path, kProgramSchema, [&](const nlohmann::json& j) {
    programs.push_back(program_from_json(j));
  });
  return programs;
}

// Tile datasets are stored as a kernels file (one graph per line) plus a
// samples file referencing kernels by id; fusion samples inline their kernel
// because decompose reuses ids across fusion configs.
inline void save_tile_dataset(const std::string& kernels_path,
                              const std::string& samples_path,
                              const TileDataset& ds) {
  std::string kout, sout;
  for (const TileKernelEntry& e : ds.entries) {
    kout += kernel_to_json(e.kernel).dump() + "\n";
    for (std::size_t i = 0; i < e.tiles.size(); ++i) {
      nlohmann::json j;
      j["version"] = kSampleSchema;
      j["program_id"] = e.kernel.program_id;
      j["family"] = e.kernel.family;
      j["kernel_id"] = e.kernel.kernel_id;
      j["config"] = {{"tile", detail::dims_json(e.tiles[i])}};
      j["runtime_cycles"] = e.runtimes[i];
      j["static_perf"] = e.static_perf;
      sout += j.dump() + "\n";
    }
  }
  atomic_write_file(kernels_path, kout);
  atomic_write_file(samples_path, sout);
}

inline TileDataset load_tile_dataset(const std::string& kernels_path,
                                     const std::string& samples_path) {
  std::map<std::string, KernelGraph> kernels;
  detail::for_each_record(kernels_path, kKernelSchema,
                          [&](const nlohmann::json& j) {
                            KernelGraph k = kernel_from_json(j);
                            std::string id = k.kernel_id;
                            if (!kernels.emplace(id, std::move(k)).second)
                              throw ArtifactError("duplicate kernel_id: " + id);
                          });
  TileDataset ds;
  std::map<std::string, int> entry_of;
  detail::for_each_record(samples_path, kSampleSchema, [&](const nlohmann::json& j) {
    std::string kid = j.at("kernel_id").get<std::string>();
    auto [it, fresh] = entry_of.try_emplace(kid, static_cast<int>(ds.entries.size()));
    if (fresh) {
      auto kit = kernels.find(kid);
      if (kit == kernels.end())
        throw ArtifactError("sample references unknown kernel_id: " + kid);
      TileKernelEntry e;
      e.kernel = kit->second;
      e.static_perf = j.at("static_perf").get<std::array<double, 4>>();
      ds.entries.push_back(std::move(e));
    }
    TileKernelEntry& e = ds.entries[it->second];
    e.tiles.push_back(detail::dims_from(j.at("config").at("tile")));
    e.runtimes.push_back(j.at("runtime_cycles").get<double>());
  });
  return ds;
}

inline void save_fusion_dataset(const std::string& samples_path,
                                const FusionDataset& ds) {
  std::string out;
  for (const FusionSample& s : ds.samples) {
    nlohmann::json j;
    j["version"] = kSampleSchema;
    j["program_id"] = s.kernel.program_id;
    j["family"] = s.kernel.family;
    j["kernel_id"] = s.kernel.kernel_id;
    j["kernel"] = kernel_to_json(s.kernel);
    j["config"] = {{"fusion_kernel", true}};
    j["runtime_cycles"] = s.runtime_cycles;
    j["static_perf"] = s.static_perf;
    out += j.dump() + "\n";
  }
  atomic_write_file(samples_path, out);
}

inline FusionDataset load_fusion_dataset(const std::string& samples_path) {
  FusionDataset ds;
  detail::for_each_record(samples_path, kSampleSchema, [&](const nlohmann::json& j) {
    FusionSample s;
    s.kernel = kernel_from_json(j.at("kernel"));
    s.static_perf = j.at("static_perf").get<std::array<double, 4>>();
    s.runtime_cycles = j.at("runtime_cycles").get<double>();
    ds.samples.push_back(std::move(s));
  });
  return ds;
}

inline void save_split(const std::string& path, const DatasetSplit& split) {
  nlohmann::json j;
  j["method"] = split.method;
  j["train"] = split.train;
  j["validation"] = split.validation;
  j["test"] = split.test;
  atomic_write_file(path, j.dump(2) + "\n");
}

inline DatasetSplit load_split(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
  DatasetSplit s;
  s.method = j.at("method").get<std::string>();
  s.train = j.at("train").get<std::vector<std::string>>();
  s.validation = j.at("validation").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  return s;
}

namespace detail {

inline nlohmann::json model_to_json(const CostModel& m) {
  nlohmann::json j;
  j["task"] = task_name(m.task);
  j["config"] = {
      {"opcode_embedding_dim", m.config.opcode_embedding_dim},
      {"hidden_dim", m.config.hidden_dim},
      {"gnn_layers", m.config.gnn_layers},
      {"neighbor_cap", m.config.neighbor_cap},
      {"directed", m.config.directed},
      {"reduction", reduction_name(m.config.reduction)},
      {"node_final_layers", m.config.node_final_layers},
      {"placement", m.config.placement == Placement::kNodeFeatures
                        ? "node_features"
                        : "kernel_embedding"},
      {"transformer_layers", m.config.transformer_layers},
      {"attention_heads", m.config.attention_heads},
      {"use_static_perf", m.config.use_static_perf},
  };
  j["train_seed"] = m.train_seed;
  j["steps"] = m.steps;
  j["init_seed"] = m.params.init_seed;
  j["scaler"] = {{"fitted", m.scaler.fitted},
                 {"node_min", m.scaler.node_min},
                 {"node_max", m.scaler.node_max},
                 {"kern_min", m.scaler.kern_min},
                 {"kern_max", m.scaler.kern_max}};
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, mat] : m.params.values)
    params[name] = {{"rows", mat.rows}, {"cols", mat.cols}, {"data", mat.d}};
  j["params"] = std::move(params);
  return j;
}

inline CostModel model_from_json(const nlohmann::json& j) {
  CostModel m;
  m.task = task_from_name(j.at("task").get<std::string>());
  const nlohmann::json& c = j.at("config");
  m.config.opcode_embedding_dim = c.at("opcode_embedding_dim").get<int>();
  m.config.hidden_dim = c.at("hidden_dim").get<int>();
  m.config.gnn_layers = c.at("gnn_layers").get<int>();
  m.config.neighbor_cap = c.at("neighbor_cap").get<int>();
  m.config.directed = c.at("directed").get<bool>();
  m.config.reduction = reduction_from_name(c.at("reduction").get<std::string>());
  m.config.node_final_layers = c.at("node_final_layers").get<int>();
  std::string placement = c.at("placement").get<std::string>();
  if (placement == "node_features")
    m.config.placement = Placement::kNodeFeatures;
  else if (placement == "kernel_embedding")
    m.config.placement = Placement::kKernelEmbedding;
  else
    throw ArtifactError("unknown placement: " + placement);
  m.config.transformer_layers = c.at("transformer_layers").get<int>();
  m.config.attention_heads = c.at("attention_heads").get<int>();
  m.config.use_static_perf = c.at("use_static_perf").get<bool>();
  m.train_seed = j.at("train_seed").get<std::uint64_t>();
  m.steps = j.at("steps").get<std::int64_t>();
  m.params.init_seed = j.at("init_seed").get<std::uint64_t>();
  const nlohmann::json& s = j.at("scaler");
  m.scaler.fitted = s.at("fitted").get<bool>();
  m.scaler.node_min = s.at("node_min").get<std::vector<double>>();
  m.scaler.node_max = s.at("node_max").get<std::vector<double>>();
  m.scaler.kern_min = s.at("kern_min").get<std::vector<double>>();
  m.scaler.kern_max = s.at("kern_max").get<std::vector<double>>();
  for (const auto& [name, pj] : j.at("params").items()) {
    ad::Mat mat(pj.at("rows").get<int>(), pj.at("cols").get<int>());
    std::vector<double> data = pj.at("data").get<std::vector<double>>();
    if (data.size() != mat.d.size())
      throw ArtifactError("parameter " + name + ": shape does not match data");
    mat.d = std::move(data);
    m.params.values.emplace(name, std::move(mat));
  }
  return m;
}

}  // namespace detail

// Checkpoint wrapper {version, checksum, model}; the checksum covers the
// serialized model document, so edits to either side are detected.
inline void save_checkpoint(const std::string& path, const CostModel& m) {
  std::string body = detail::model_to_json(m).dump();
  nlohmann::json j;
  j["version"] = kCheckpointSchema;
  j["checksum"] = hash_hex(body);
  j["model"] = nlohmann::json::parse(body);
  atomic_write_file(path, j.dump() + "\n");
}

inline CostModel load_checkpoint(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
  std::string version = j.value("version", "");
  if (version != kCheckpointSchema)
    throw ArtifactError("checkpoint version mismatch: expected " +
                        std::string(kCheckpointSchema) + ", got " +
                        (version.empty() ? "<none>" : version));
  if (!j.contains("model") || !j.contains("checksum"))
    throw ArtifactError("checkpoint missing model or checksum");
  std::string body = j.at("model").dump();
  if (hash_hex(body) != j.at("checksum").get<std::string>())
    throw ArtifactError("checkpoint checksum mismatch: " + path);
  return detail::model_from_json(j.at("model"));
}

inline void write_history_csv(const std::string& path,
                              const std::vector<HistoryRow>& rows) {
  std::string out = "step,train_loss,val_metric,lr\n";
  for (const HistoryRow& r : rows)
    out += std::to_string(r.step) + "," + format_double(r.train_loss) + "," +
           format_double(r.val_metric) + "," + format_double(r.lr) + "\n";
  atomic_write_file(path, out);
}

namespace detail {

inline std::string aggregate_cell(const Aggregate& a, int row) {
  if (a.count == 0) return std::string();
  return format_double(row == 0 ? a.median : row == 1 ? a.mean : a.geomean);
}

}  // namespace detail

inline void write_tile_report_csv(const std::string& path,
                                  const TileEvalResult& res) {
  std::string out = "program_id,kernel_count,tile_ape_pct,mean_kendall_tau\n";
  for (const ProgramReport& r : res.programs)
    out += r.program_id + "," + std::to_string(r.kernel_count) + "," +
           format_optional(r.tile_ape) + "," + format_optional(r.mean_tau) + "\n";
  const char* names[3] = {"Median", "Mean", "Geomean"};
  for (int row = 0; row < 3; ++row)
    out += std::string(names[row]) + ",," +
           detail::aggregate_cell(res.ape_agg, row) + "," +
           detail::aggregate_cell(res.tau_agg, row) + "\n";
  atomic_write_file(path, out);
}

inline void write_tile_report_json(const std::string& path,
                                   const TileEvalResult& res) {
  nlohmann::json j;
  nlohmann::json programs = nlohmann::json::array();
  for (const ProgramReport& r : res.programs) {
    nlohmann::json pj;
    pj["program_id"] = r.program_id;
    pj["kernel_count"] = r.kernel_count;
    if (r.tile_ape) pj["tile_ape_pct"] = *r.tile_ape;
    if (r.mean_tau) pj["mean_kendall_tau"] = *r.mean_tau;
    nlohmann::json kernels = nlohmann::json::array();
    for (const KernelEval& k : res.details.at(r.program_id)) {
      nlohmann::json kj;
      kj["kernel_id"] = k.kernel_id;
      kj["true_runtimes"] = k.true_runtimes;
      kj["predicted"] = k.predicted;
      kernels.push_back(std::move(kj));
    }
    pj["kernels"] = std::move(kernels);
    programs.push_back(std::move(pj));
  }
  j["programs"] = std::move(programs);
  j["aggregates"] = {
      {"tile_ape_pct",
       {{"median", res.ape_agg.median},
        {"mean", res.ape_agg.mean},
        {"geomean", res.ape_agg.geomean},
        {"count", res.ape_agg.count},
        {"missing", res.ape_agg.missing}}},
      {"mean_kendall_tau",
       {{"median", res.tau_agg.median},
        {"mean", res.tau_agg.mean},
        {"geomean", res.tau_agg.geomean},
        {"count", res.tau_agg.count},
        {"missing", res.tau_agg.missing}}},
  };
  atomic_write_file(path, j.dump(2) + "\n");
}

inline void write_fusion_report_csv(const std::string& path,
                                    const FusionEvalResult& res) {
  std::string out = "program_id,kernel_count,filtered_count,mape_pct\n";
  for (const ProgramReport& r : res.programs)
    out += r.program_id + "," + std::to_string(r.kernel_count) + "," +
           std::to_string(r.filtered_count) + "," +
           format_optional(r.mape_pct) + "\n";
  const Aggregate& a = res.mape_agg;
  auto agg_row = [&](const char* name, double v) {
    out += std::string(name) + ",,," +
           (a.count > 0 ? format_double(v) : std::string()) + "\n";
  };
  agg_row("Median", a.median);
  agg_row("Mean", a.mean);
  agg_row("Geomean", a.geomean);
  atomic_write_file(path, out);
}

inline void write_fusion_report_json(const std::string& path,
                                     const FusionEvalResult& res) {
  nlohmann::json j;
  j["runtime_filter_cycles"] = res.threshold;
  if (res.pooled_mape) j["pooled_mape_pct"] = *res.pooled_mape;
  nlohmann::json programs = nlohmann::json::array();
  for (const ProgramReport& r : res.programs) {
    nlohmann::json pj;
    pj["program_id"] = r.program_id;
    pj["kernel_count"] = r.kernel_count;
    pj["filtered_count"] = r.filtered_count;
    if (r.mape_pct) pj["mape_pct"] = *r.mape_pct;
    programs.push_back(std::move(pj));
  }
  j["programs"] = std::move(programs);
  j["aggregates"] = {{"mape_pct",
                      {{"median", res.mape_agg.median},
                       {"mean", res.mape_agg.mean},
                       {"geomean", res.mape_agg.geomean},
                       {"count", res.mape_agg.count},
                       {"missing", res.mape_agg.missing}}}};
  atomic_write_file(path, j.dump(2) + "\n");
}

struct TuneRow {
  std::string program_id;  // kernel_id for tile strategies
  std::string strategy;
  std::int64_t budget = 0;
  std::uint64_t seed = 0;
  double chosen_runtime = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> predicted_runtime;
  double baseline_runtime = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> exhaustive_runtime;
  double speedup = std::numeric_limits<double>::quiet_NaN();
  std::int64_t model_evals = 0;
  std::int64_t hw_evals = 0;
};

inline std::string finite_or_empty(double v) {
  return std::isfinite(v) ? format_double(v) : std::string();
}

// A row with no chosen_runtime is an unmeasured result (hw budget 0); the
// JSON variant carries an explicit measured flag.
inline void write_tune_csv(const std::string& path,
                           const std::vector<TuneRow>& rows) {
  std::string out =
      "program_id,strategy,budget,seed,chosen_runtime,predicted_runtime,"
      "baseline_runtime,exhaustive_runtime,speedup,model_evals,hw_evals\n";
  for (const TuneRow& r : rows)
    out += r.program_id + "," + r.strategy + "," + std::to_string(r.budget) +
           "," + std::to_string(r.seed) + "," + finite_or_empty(r.chosen_runtime) +
           "," + format_optional(r.predicted_runtime) + "," +
           finite_or_empty(r.baseline_runtime) + "," +
           format_optional(r.exhaustive_runtime) + "," +
           finite_or_empty(r.speedup) + "," + std::to_string(r.model_evals) +
           "," + std::to_string(r.hw_evals) + "\n";
  atomic_write_file(path, out);
}

inline void write_tune_json(const std::string& path,
                            const std::vector<TuneRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const TuneRow& r : rows) {
    nlohmann::json rj;
    rj["program_id"] = r.program_id;
    rj["strategy"] = r.strategy;
    rj["budget"] = r.budget;
    rj["seed"] = r.seed;
    rj["measured"] = std::isfinite(r.chosen_runtime);
    if (std::isfinite(r.chosen_runtime)) rj["chosen_runtime"] = r.chosen_runtime;
    if (r.predicted_runtime) rj["predicted_runtime"] = *r.predicted_runtime;
    if (std::isfinite(r.baseline_runtime))
      rj["baseline_runtime"] = r.baseline_runtime;
    if (r.exhaustive_runtime) rj["exhaustive_runtime"] = *r.exhaustive_runtime;
    if (std::isfinite(r.speedup)) rj["speedup"] = r.speedup;
    rj["model_evals"] = r.model_evals;
    rj["hw_evals"] = r.hw_evals;
    j.push_back(std::move(rj));
  }
  atomic_write_file(path, j.dump(2) + "\n");
}

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;   // path, hash
  std::vector<std::pair<std::string, std::string>> outputs;  // path, hash
};

inline void write_manifest(const std::string& path, const RunManifest& m) {
  nlohmann::json j;
  j["tool_version"] = kToolVersion;
  j["command"] = m.command;
  j["config"] = m.config;
  j["seed"] = m.seed;
  auto files = [](const std::vector<std::pair<std::string, std::string>>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [p, h] : v) arr.push_back({{"path", p}, {"fnv1a64", h}});
    return arr;
  };
  j["inputs"] = files(m.inputs);
  j["outputs"] = files(m.outputs);
  atomic_write_file(path, j.dump(2) + "\n");
}

// key=value config files; '#' comments and blank lines ignored.
inline std::map<std::string, std::string> parse_kv_text(const std::string& text,
                                                        const std::string& where) {
  std::map<std::string, std::string> kv;
  std::istringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError(where + ":" + std::to_string(lineno) + ": expected key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline std::map<std::string, std::string> load_kv_file(const std::string& path) {
  return parse_kv_text(read_file(path), path);
}

}  // namespace tcm
