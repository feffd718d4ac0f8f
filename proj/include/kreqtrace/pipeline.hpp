/*
 * Copyright 2026 The kreqtrace Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 *
 * SPDX-License-Identifier: Apache-2.0
 */

// Subcommand bodies behind the kreqtrace executable. Each takes a fully
// populated RunConfig and returns the process exit status:
//   0  success
//   1  strict-mode parse failure, or a non-empty diff
//   2  configuration error; nothing is written

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "kreqtrace/dag.hpp"
#include "kreqtrace/engine.hpp"
#include "kreqtrace/ingest.hpp"
#include "kreqtrace/net.hpp"
#include "kreqtrace/record.hpp"
#include "kreqtrace/synth.hpp"

namespace kreqtrace {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

inline constexpr std::size_t kMinRenderWidth = 40;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string subcommand;
  std::vector<std::filesystem::path> inputs;
  IngestConfig ingest;
  bool strict = false;
  // The single input is one already time-ordered stream.
  bool merged = false;
  std::vector<std::string> user_events;
  std::filesystem::path out_dir;
  std::size_t width = 100;
  std::uint64_t seed = 1;

  // synth
  std::string topology;  // file path, or "random"
  std::size_t requests = 10;
  std::size_t cpus = 4;
  FaultSpec fault;
  bool fault_at_set = false;

  // diff / render
  std::filesystem::path truth;
  std::filesystem::path dags;
  std::filesystem::path dag;
};

inline std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    if (comma == std::string_view::npos) comma = text.size();
    auto item = detail::trim(text.substr(start, comma - start));
    if (!item.empty()) out.emplace_back(item);
    start = comma + 1;
  }
  return out;
}

inline std::vector<Endpoint> parse_gateways(std::string_view text) {
  std::vector<Endpoint> out;
  for (const auto& item : split_list(text)) {
    auto ep = parse_endpoint(item);
    if (!ep) throw ConfigError("bad gateway endpoint '" + item + "'");
    out.push_back(*ep);
  }
  return out;
}

inline std::set<Pid> parse_pids(std::string_view text) {
  std::set<Pid> out;
  for (const auto& item : split_list(text)) {
    Pid pid = 0;
    if (!detail::to_uint(item, pid)) throw ConfigError("bad pid '" + item + "'");
    out.insert(pid);
  }
  return out;
}

inline Backend backend_from(std::string_view name) {
  auto b = parse_backend(name);
  if (!b) throw ConfigError("unknown backend '" + std::string(name) + "'");
  return *b;
}

// Lists may be given as JSON arrays or comma-separated strings.
inline std::vector<std::string> json_list(const nlohmann::json& j) {
  if (j.is_string()) return split_list(j.get<std::string>());
  std::vector<std::string> out;
  for (const auto& v : j) out.push_back(v.is_string() ? v.get<std::string>() : v.dump());
  return out;
}

// Applies a config file document. Keys mirror the long flag names.
inline void apply_config_json(RunConfig& config, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "backend") {
        config.ingest.backend = backend_from(v.get<std::string>());
      } else if (key == "gateway") {
        config.ingest.gateway_endpoints.clear();
        for (const auto& g : json_list(v)) {
          auto eps = parse_gateways(g);
          config.ingest.gateway_endpoints.insert(config.ingest.gateway_endpoints.end(),
                                                 eps.begin(), eps.end());
        }
      } else if (key == "pids") {
        config.ingest.pid_allowlist.clear();
        for (const auto& p : json_list(v)) {
          auto pids = parse_pids(p);
          config.ingest.pid_allowlist.insert(pids.begin(), pids.end());
        }
      } else if (key == "follow-forks") {
        config.ingest.follow_forks = v.get<bool>();
      } else if (key == "user-events") {
        config.user_events = json_list(v);
      } else if (key == "strict") {
        config.strict = v.get<bool>();
      } else if (key == "merged") {
        config.merged = v.get<bool>();
      } else if (key == "out") {
        config.out_dir = v.get<std::string>();
      } else if (key == "width") {
        config.width = v.get<std::size_t>();
      } else if (key == "seed") {
        config.seed = v.get<std::uint64_t>();
      } else if (key == "inputs") {
        config.inputs.clear();
        for (const auto& p : json_list(v)) config.inputs.emplace_back(p);
      } else if (key == "topology") {
        config.topology = v.get<std::string>();
      } else if (key == "requests") {
        config.requests = v.get<std::size_t>();
      } else if (key == "cpus") {
        config.cpus = v.get<std::size_t>();
      } else if (key == "fault") {
        auto kind = parse_fault_kind(v.get<std::string>());
        if (!kind) throw ConfigError("unknown fault mode " + v.dump());
        config.fault.kind = *kind;
      } else if (key == "fault-p") {
        config.fault.probability = v.get<double>();
      } else if (key == "fault-at") {
        config.fault.at_ns = v.get<std::uint64_t>();
        config.fault_at_set = true;
      } else if (key == "truth") {
        config.truth = v.get<std::string>();
      } else if (key == "dags") {
        config.dags = v.get<std::string>();
      } else if (key == "dag") {
        config.dag = v.get<std::string>();
      } else {
        throw ConfigError("unknown config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
}

inline void load_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  apply_config_json(config, j);
}

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string trace_file_name(TraceId id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "trace-%06llu.json", static_cast<unsigned long long>(id));
  return buf;
}

inline std::string stream_extension(Backend b) {
  return b == Backend::kFtrace ? ".ftrace.txt" : ".bpft.txt";
}

inline void check_out_dir(const RunConfig& config) {
  if (config.out_dir.empty()) throw ConfigError("--out is required");
  if (std::filesystem::exists(config.out_dir) &&
      !std::filesystem::is_directory(config.out_dir)) {
    throw ConfigError(config.out_dir.string() + " is not a directory");
  }
}

// Clears generated files from an earlier run so the tree matches this one.
inline void prepare_out_dir(const std::filesystem::path& dir,
                            std::string_view prefix, std::string_view suffix) {
  std::filesystem::create_directories(dir);
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    auto name = entry.path().filename().string();
    if (entry.is_regular_file() && name.starts_with(prefix) && name.ends_with(suffix)) {
      std::filesystem::remove(entry.path());
    }
  }
}

}  // namespace detail

// Result of the in-memory reconstruction pipeline.
struct Reconstruction {
  std::vector<ParseStats> parse;
  EnginePools pools;
  std::vector<RequestDag> dags;
};

// Runs ingest, replay and dag building over already-parsed streams.
inline Reconstruction reconstruct_streams(std::vector<std::vector<TraceRecord>> streams,
                                          const IngestConfig& ingest,
                                          const std::vector<std::string>& user_events) {
  Reconstruction out;
  {
    Engine engine(EngineConfig{ingest.gateway_endpoints, user_events});
    PidFilter filter(ingest);
    merge_each(std::move(streams), [&](TraceRecord&& record) {
      if (filter.keep(record)) engine.consume(record);
    });
    out.pools = engine.finalize();
  }
  out.dags = build_all_dags(out.pools);
  for (const auto& dag : out.dags) validate_dag(dag);
  return out;
}

inline std::string diagnostics_json(const RunConfig& config, const Reconstruction& r) {
  using nlohmann::json;
  json files = json::array();
  for (std::size_t i = 0; i < r.parse.size(); ++i) {
    const auto& s = r.parse[i];
    files.push_back({{"path", config.inputs[i].generic_string()},
                     {"lines", s.lines},
                     {"records", s.records},
                     {"skipped", s.skipped},
                     {"malformed", s.malformed},
                     {"malformed_lines", s.malformed_lines}});
  }
  std::uint64_t orphans = 0;
  for (const auto& d : r.dags) orphans += d.orphans.size();
  json gateways = json::array();
  for (const auto& g : config.ingest.gateway_endpoints) gateways.push_back(g.to_string());
  json doc{{"schema_version", "1"},
           {"backend", backend_name(config.ingest.backend)},
           {"gateways", gateways},
           {"inputs", files},
           {"counters", r.pools.counters.as_map()},
           {"minted", r.pools.minted()},
           {"traces", r.dags.size()},
           {"orphan_states", orphans},
           {"user_events", r.pools.user_events},
           {"unattributed", unattributed_map(r.pools)}};
  return doc.dump(2) + "\n";
}

inline int cmd_reconstruct(const RunConfig& config, std::ostream& err = std::cerr) {
  try {
    config.ingest.validate();
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    detail::check_out_dir(config);
    if (config.inputs.empty()) throw ConfigError("no input files");
    if (config.merged && config.inputs.size() != 1) {
      throw ConfigError("--merged takes exactly one input file");
    }
    for (const auto& p : config.inputs) {
      if (!std::filesystem::is_regular_file(p)) {
        throw ConfigError("input file not found: " + p.string());
      }
    }
    EventCatalog check(config.user_events);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  Reconstruction r;
  std::vector<std::vector<TraceRecord>> streams;
  for (const auto& path : config.inputs) {
    ParseStats stats;
    try {
      streams.push_back(read_trace_file(path, config.ingest.backend, config.strict, stats));
    } catch (const MalformedLine& e) {
      err << "error: " << path.string() << ": " << e.what() << "\n";
      return kExitFailure;
    }
    r.parse.push_back(stats);
  }
  try {
    auto built = reconstruct_streams(std::move(streams), config.ingest, config.user_events);
    r.pools = std::move(built.pools);
    r.dags = std::move(built.dags);
  } catch (const UnsortedStream& e) {
    err << "error: " << config.inputs[e.stream_index()].string() << ": " << e.what() << "\n";
    return kExitFailure;
  }

  const auto traces_dir = config.out_dir / "traces";
  detail::prepare_out_dir(traces_dir, "trace-", ".json");
  for (const auto& dag : r.dags) {
    detail::write_file(traces_dir / detail::trace_file_name(dag.trace_id), export_json(dag));
  }
  std::string tsv = r.dags.empty() ? Summary{}.to_tsv() : summarize(r.dags).to_tsv();
  detail::write_file(config.out_dir / "summary.tsv", tsv);
  detail::write_file(config.out_dir / "diagnostics.json", diagnostics_json(config, r));
  return kExitOk;
}

inline TopologySpec load_topology(const RunConfig& config) {
  if (config.topology.empty()) throw ConfigError("--topology is required");
  if (config.topology == "random") return random_topology(config.seed);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(config.topology));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(config.topology + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return topology_from_json(j);
}

// Writes per-CPU streams, ground truth, the topology actually used, a
// matching reconstruct config and the fault manifest.
inline int cmd_synth(const RunConfig& config, std::ostream& err = std::cerr) {
  TopologySpec topo;
  Simulation sim;
  try {
    detail::check_out_dir(config);
    if (config.requests < 1) throw ConfigError("--requests must be >= 1");
    if (config.cpus < 1) throw ConfigError("--cpus must be >= 1");
    if (config.fault.probability < 0.0 || config.fault.probability > 1.0) {
      throw ConfigError("--fault-p must be within [0, 1]");
    }
    topo = load_topology(config);
    sim = simulate(topo, config.requests, config.cpus, config.seed);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  FaultSpec fault = config.fault;
  if (fault.kind == FaultKind::kTruncate && !config.fault_at_set) {
    std::uint64_t lo = UINT64_MAX, hi = 0;
    for (const auto& s : sim.streams) {
      if (s.empty()) continue;
      lo = std::min(lo, s.front().timestamp_ns);
      hi = std::max(hi, s.back().timestamp_ns);
    }
    fault.at_ns = lo == UINT64_MAX ? 0 : lo + (hi - lo) / 2;
  }
  auto faulted = inject_faults(std::move(sim.streams), fault, config.seed);

  const Backend backend = config.ingest.backend;
  const auto ext = detail::stream_extension(backend);
  detail::prepare_out_dir(config.out_dir, "cpu", ext);
  for (std::size_t c = 0; c < faulted.streams.size(); ++c) {
    std::string text;
    for (const auto& r : faulted.streams[c]) text += format_line(backend, r) + "\n";
    detail::write_file(config.out_dir / ("cpu" + std::to_string(c) + ext), text);
  }
  std::string manifest;
  for (const auto& r : faulted.manifest) manifest += format_line(backend, r) + "\n";
  detail::write_file(config.out_dir / ("faults" + ext), manifest);
  detail::write_file(config.out_dir / "ground_truth.json", truth_to_json(sim.truth));
  detail::write_file(config.out_dir / "topology.json", topology_to_json(topo).dump(2) + "\n");

  nlohmann::json run{{"backend", backend_name(backend)},
                     {"gateway", nlohmann::json::array()},
                     {"user-events", sim.truth.user_events}};
  for (const auto& g : sim.truth.gateways) run["gateway"].push_back(g.to_string());
  detail::write_file(config.out_dir / "reconstruct.json", run.dump(2) + "\n");
  return kExitOk;
}

// Loads a reconstruct output directory back into dags plus unattributed
// counts.
inline std::vector<RequestDag> load_dag_dir(const std::filesystem::path& dir,
                                            std::map<std::string, std::uint64_t>& unattributed) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir / "traces")) {
    auto name = entry.path().filename().string();
    if (name.starts_with("trace-") && name.ends_with(".json")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<RequestDag> dags;
  for (const auto& f : files) dags.push_back(dag_from_json(detail::read_file(f)));
  auto diag = nlohmann::json::parse(detail::read_file(dir / "diagnostics.json"));
  unattributed = diag.at("unattributed").get<std::map<std::string, std::uint64_t>>();
  return dags;
}

inline int cmd_diff(const RunConfig& config, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  if (config.truth.empty() || config.dags.empty()) {
    err << "error: --truth and --dags are required\n";
    return kExitConfig;
  }
  GroundTruth truth;
  std::vector<RequestDag> dags;
  std::map<std::string, std::uint64_t> unattributed;
  try {
    truth = truth_from_json(detail::read_file(config.truth));
    dags = load_dag_dir(config.dags, unattributed);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  auto report = compare(dags, unattributed, truth);
  out << report.to_text();
  return report.empty() ? kExitOk : kExitFailure;
}

inline int cmd_render(const RunConfig& config, std::ostream& out = std::cout,
                      std::ostream& err = std::cerr) {
  if (config.width < kMinRenderWidth) {
    err << "error: --width must be at least " << kMinRenderWidth << "\n";
    return kExitConfig;
  }
  if (config.dag.empty()) {
    err << "error: --dag is required\n";
    return kExitConfig;
  }
  RequestDag dag;
  try {
    dag = dag_from_json(detail::read_file(config.dag));
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  out << render_gantt(dag, config.width);
  return kExitOk;
}

inline int run(const RunConfig& config, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  if (config.subcommand == "reconstruct") return cmd_reconstruct(config, err);
  if (config.subcommand == "synth") return cmd_synth(config, err);
  if (config.subcommand == "diff") return cmd_diff(config, out, err);
  if (config.subcommand == "render") return cmd_render(config, out, err);
  err << "error: unknown subcommand '" << config.subcommand << "'\n";
  return kExitConfig;
}

}  // namespace kreqtrace
