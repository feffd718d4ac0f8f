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

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.

#include <spawn.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kreqtrace.hpp"

extern char** environ;

namespace {

using namespace kreqtrace;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

const fs::path kData = KREQTRACE_DATA_DIR;
const std::string kCli = KREQTRACE_CLI;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

// The randomized workload for a seed: at most 10 services, 50 requests,
// 4 CPUs.
struct Run {
  std::uint64_t seed;
  TopologySpec topology;
  std::size_t requests;
  std::size_t cpus;
};

Run run_for(std::uint64_t seed) {
  return {seed, random_topology(seed, 10, 4), 1 + (seed * 7) % 50, 1 + seed % 4};
}

IngestConfig ingest_for(const GroundTruth& truth) {
  IngestConfig c;
  c.gateway_endpoints = truth.gateways;
  return c;
}

Reconstruction rebuild(std::vector<std::vector<TraceRecord>> streams, const GroundTruth& truth) {
  return reconstruct_streams(std::move(streams), ingest_for(truth), truth.user_events);
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("kreqtrace-acceptance-" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Outcome oracle_equivalence() {
  auto t0 = Clock::now();
  std::size_t failures = 0, reuse = 0, fork = 0, nodes = 0;
  std::string first;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    auto run = run_for(seed);
    for (const auto& s : run.topology.services) {
      (s.worker == WorkerModel::kReuse ? reuse : fork)++;
    }
    auto sim = simulate(run.topology, run.requests, run.cpus, seed);
    auto r = rebuild(sim.streams, sim.truth);
    auto report = compare(r.dags, unattributed_map(r.pools), sim.truth);
    for (const auto& t : sim.truth.traces) nodes += t.nodes.size();
    if (!report.empty()) {
      if (failures++ == 0) first = "seed " + std::to_string(seed) + ": " + report.to_text();
    }
  }
  double secs = seconds_since(t0);
  std::ostringstream d;
  d << "100 seeds, " << nodes << " truth spans, " << reuse << " reuse / " << fork
    << " fork services, " << failures << " non-empty diffs, " << secs << " s";
  if (!first.empty()) d << "; first: " << first.substr(0, 300);
  return {failures == 0 && reuse > 0 && fork > 0 && secs < 60.0, d.str()};
}

Outcome fork_call_fixture() {
  auto out = scratch("fork_call");
  RunConfig config;
  config.subcommand = "reconstruct";
  load_config_file(config, kData / "fork_call/reconstruct.json");
  config.inputs = {kData / "fork_call/cpu0.ftrace.txt", kData / "fork_call/cpu1.ftrace.txt"};
  config.out_dir = out;
  std::ostringstream err;
  if (cmd_reconstruct(config, err) != kExitOk) return {false, "reconstruct failed: " + err.str()};

  auto text = slurp(out / "traces/trace-000001.json");
  auto dag = dag_from_json(text);
  auto truth = truth_from_json(slurp(kData / "fork_call/ground_truth.json"));

  auto owner = [&](const std::string& id) {
    const DagNode* n = dag.find(id);
    return n ? n->owner_pid : Pid{0};
  };
  bool fork_edge = false, tcp_edge = false;
  for (const auto& e : dag.edges) {
    if (e.cause == EdgeCause::kFork && owner(e.parent) == 2066822 && owner(e.child) == 2066823) {
      fork_edge = true;
    }
    if (e.cause == EdgeCause::kTcp && owner(e.parent) == 2066823 && owner(e.child) == 1966384) {
      tcp_edge = true;
    }
  }
  bool tallies = truth.traces.size() == 1 && truth.traces[0].nodes.size() == dag.nodes.size();
  if (tallies) {
    for (const auto& tn : truth.traces[0].nodes) {
      bool found = false;
      for (const auto& n : dag.nodes) {
        if (n.owner_pid == tn.owner_pid && n.kind == tn.kind) {
          found = n.tallies.at("page_fault_user") == tn.tallies.at("page_fault_user") &&
                  n.tallies.at("sched_migrate_task") == tn.tallies.at("sched_migrate_task");
        }
      }
      tallies = tallies && found;
    }
  }
  bool golden = text == slurp(kData / "fork_call/golden/trace-000001.json");
  std::ostringstream d;
  d << "fork edge 2066822->2066823 " << (fork_edge ? "yes" : "NO") << ", tcp edge 2066823->1966384 "
    << (tcp_edge ? "yes" : "NO") << ", tallies match truth " << (tallies ? "yes" : "NO")
    << ", golden byte-identical " << (golden ? "yes" : "NO");
  return {fork_edge && tcp_edge && tallies && golden, d.str()};
}

Outcome merge_correctness() {
  std::mt19937_64 gen(20261016);
  std::size_t violations = 0, records = 0;
  for (int round = 0; round < 1000; ++round) {
    std::size_t cpus = 1 + gen() % 8;
    std::vector<std::vector<TraceRecord>> streams(cpus);
    for (std::size_t c = 0; c < cpus; ++c) {
      std::uint64_t ts = gen() % 50;
      std::size_t n = gen() % 200;
      for (std::size_t i = 0; i < n; ++i) {
        ts += gen() % 4;  // frequent cross-stream ties
        TraceRecord r;
        r.timestamp_ns = ts;
        // Some streams share a cpu id so the stream-index tiebreak is exercised.
        r.cpu = static_cast<std::uint32_t>(c % 3);
        r.pid = static_cast<Pid>(1 + gen() % 20);
        r.event = "e" + std::to_string(round) + "." + std::to_string(c) + "." + std::to_string(i);
        r.seq = i;
        streams[c].push_back(r);
      }
    }
    std::vector<TraceRecord> oracle;
    for (const auto& s : streams) oracle.insert(oracle.end(), s.begin(), s.end());
    std::stable_sort(oracle.begin(), oracle.end(), [](const TraceRecord& a, const TraceRecord& b) {
      if (a.timestamp_ns != b.timestamp_ns) return a.timestamp_ns < b.timestamp_ns;
      if (a.cpu != b.cpu) return a.cpu < b.cpu;
      return a.seq < b.seq;
    });
    auto merged = merge_streams(streams);
    records += oracle.size();
    if (merged.size() != oracle.size()) {
      ++violations;
      continue;
    }
    for (std::size_t i = 0; i < merged.size(); ++i) {
      if (!(merged[i] == oracle[i])) ++violations;
    }
  }
  return {violations == 0,
          "1000 interleavings, " + std::to_string(records) + " records, " +
              std::to_string(violations) + " violations"};
}

// Shared by the two conservation checks: every fault-free run plus
// drop-user-events and truncate variants.
struct Variant {
  std::string name;
  std::vector<std::vector<TraceRecord>> streams;
  GroundTruth truth;
  Reconstruction r;
};

std::vector<Variant> conservation_runs() {
  std::vector<Variant> out;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    auto run = run_for(seed);
    auto sim = simulate(run.topology, run.requests, run.cpus, seed);
    auto dropped = inject_faults(sim.streams, {FaultKind::kDropUserEvents, 0.05, 0}, seed);
    for (auto* v : {&sim.streams, &dropped.streams}) {
      Variant var;
      var.name = "seed " + std::to_string(seed) + (v == &sim.streams ? "" : " drop-user");
      var.streams = *v;
      var.truth = sim.truth;
      var.r = rebuild(var.streams, sim.truth);
      out.push_back(std::move(var));
    }
  }
  return out;
}

Outcome mint_conservation(const std::vector<Variant>& runs) {
  std::size_t bad = 0, checked = 0;
  std::string first;
  for (const auto& v : runs) {
    ++checked;
    if (v.r.pools.minted() != v.truth.external_arrivals) {
      if (bad++ == 0) {
        first = v.name + ": minted " + std::to_string(v.r.pools.minted()) + " arrivals " +
                std::to_string(v.truth.external_arrivals);
      }
    }
  }
  return {bad == 0, std::to_string(checked) + " runs, " + std::to_string(bad) + " mismatches" +
                        (first.empty() ? "" : "; " + first)};
}

Outcome tally_conservation(const std::vector<Variant>& runs) {
  std::size_t bad = 0, checked = 0;
  std::uint64_t occurrences = 0;
  std::string first;
  for (const auto& v : runs) {
    // Occurrences counted straight from the streams.
    std::map<std::string, std::uint64_t> seen;
    std::set<std::string> tracked(v.truth.user_events.begin(), v.truth.user_events.end());
    for (const auto& s : v.streams) {
      for (const auto& r : s) {
        if (r.pid != kExternalPid && tracked.count(r.event)) ++seen[r.event];
      }
    }
    const auto& pools = v.r.pools;
    for (std::size_t i = 0; i < pools.user_events.size(); ++i) {
      std::uint64_t sum = pools.unattributed[i];
      for (const auto& st : pools.states) sum += st.tallies[i];
      ++checked;
      occurrences += seen[pools.user_events[i]];
      if (sum != seen[pools.user_events[i]]) {
        if (bad++ == 0) {
          first = v.name + " " + pools.user_events[i] + ": " + std::to_string(sum) + " vs " +
                  std::to_string(seen[pools.user_events[i]]);
        }
      }
    }
  }
  return {bad == 0 && checked > 0,
          std::to_string(checked) + " (run, event) pairs, " + std::to_string(occurrences) +
              " occurrences, " + std::to_string(bad) + " mismatches" +
              (first.empty() ? "" : "; " + first)};
}

Outcome robustness() {
  std::size_t structure_diffs = 0, tally_only = 0, crashes = 0, invalid = 0, runs = 0;
  std::uint64_t orphans = 0, open = 0;
  std::string first;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    auto run = run_for(seed);
    auto sim = simulate(run.topology, run.requests, run.cpus, seed);

    auto dropped = inject_faults(sim.streams, {FaultKind::kDropUserEvents, 0.05, 0}, seed);
    auto r = rebuild(dropped.streams, sim.truth);
    auto report = compare(r.dags, unattributed_map(r.pools), sim.truth);
    if (!report.structure_empty()) {
      if (structure_diffs++ == 0) first = "seed " + std::to_string(seed) + ": " + report.to_text();
    }
    if (!report.empty()) ++tally_only;

    std::uint64_t lo = UINT64_MAX, hi = 0;
    for (const auto& s : sim.streams) {
      if (s.empty()) continue;
      lo = std::min(lo, s.front().timestamp_ns);
      hi = std::max(hi, s.back().timestamp_ns);
    }
    for (FaultSpec fault : {FaultSpec{FaultKind::kDropStructural, 0.02, 0},
                            FaultSpec{FaultKind::kTruncate, 0, lo + (hi - lo) / 2}}) {
      ++runs;
      try {
        auto faulted = inject_faults(sim.streams, fault, seed);
        // Same path as the CLI: streams -> dags -> validation -> diagnostics.
        Reconstruction rr;
        rr.pools = replay(merge_streams(faulted.streams),
                          EngineConfig{sim.truth.gateways, sim.truth.user_events});
        rr.dags = build_all_dags(rr.pools);
        for (const auto& d : rr.dags) {
          try {
            validate_dag(d);
          } catch (const InvalidDag&) {
            ++invalid;
          }
          orphans += d.orphans.size();
          for (const auto& n : d.nodes) open += (n.flags & kOpenAtEnd) ? 1 : 0;
        }
        RunConfig cfg;
        cfg.ingest = ingest_for(sim.truth);
        auto diag = nlohmann::json::parse(diagnostics_json(cfg, rr));
        if (!diag.contains("counters") || diag["counters"].empty()) ++crashes;
      } catch (const std::exception& e) {
        if (crashes++ == 0) first = "seed " + std::to_string(seed) + ": " + e.what();
      }
    }
  }
  std::ostringstream d;
  d << "drop-user-events(0.05): " << structure_diffs << " structural diffs (" << tally_only
    << "/100 runs with tally-only diffs); drop-structural(0.02) + truncate(mid): " << runs
    << " runs, " << crashes << " failures, " << invalid << " invalid dags, " << orphans
    << " orphans and " << open << " open_at_end states reported";
  if (!first.empty()) d << "; first: " << first.substr(0, 300);
  return {structure_diffs == 0 && crashes == 0 && invalid == 0, d.str()};
}

Outcome determinism() {
  auto base = scratch("determinism");
  std::size_t compared = 0;
  for (const char* fault : {"none", "drop-structural"}) {
    RunConfig synth;
    synth.topology = "random";
    synth.seed = 33;
    synth.requests = 50;
    synth.cpus = 4;
    synth.fault.kind = *parse_fault_kind(fault);
    synth.fault.probability = 0.02;
    synth.out_dir = base / fault / "in";
    std::ostringstream err;
    if (cmd_synth(synth, err) != kExitOk) return {false, "synth failed: " + err.str()};

    std::vector<std::map<std::string, std::string>> trees;
    for (const char* name : {"a", "b"}) {
      RunConfig config;
      config.subcommand = "reconstruct";
      load_config_file(config, synth.out_dir / "reconstruct.json");
      for (int c = 0; c < 4; ++c) {
        config.inputs.push_back(synth.out_dir / ("cpu" + std::to_string(c) + ".ftrace.txt"));
      }
      config.out_dir = base / fault / name;
      if (cmd_reconstruct(config, err) != kExitOk) return {false, "reconstruct failed: " + err.str()};
      trees.push_back(tree(config.out_dir));
    }
    if (trees[0] != trees[1]) return {false, std::string("output trees differ for ") + fault};
    compared += trees[0].size();
  }
  return {true, "2 workloads x 2 runs, " + std::to_string(compared) + " files byte-identical"};
}

// Runs the CLI in a child process and reports wall time and peak RSS.
struct ChildStats {
  int status = -1;
  double seconds = 0;
  long max_rss_kb = 0;
};

ChildStats run_child(const std::vector<std::string>& args) {
  std::vector<char*> argv;
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  ChildStats stats;
  auto t0 = Clock::now();
  pid_t pid = 0;
  if (posix_spawn(&pid, argv[0], nullptr, nullptr, argv.data(), environ) != 0) return stats;
  int status = 0;
  struct rusage usage {};
  wait4(pid, &status, 0, &usage);
  stats.seconds = seconds_since(t0);
  stats.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  stats.max_rss_kb = usage.ru_maxrss;
  return stats;
}

long self_rss_kb() {
  std::ifstream in("/proc/self/statm");
  long pages = 0, resident = 0;
  in >> pages >> resident;
  return resident * (::sysconf(_SC_PAGESIZE) / 1024);
}

// ru_maxrss of a spawned child also covers the parent's address space up to
// exec, so the figure is an upper bound. Runs first, while this process is
// small, and inputs come from the CLI rather than an in-process synth.
Outcome throughput() {
  auto base = scratch("throughput");
  auto topo = random_topology(7);
  // Scale the request count from a small probe run.
  std::size_t probe_records = 0;
  for (const auto& s : simulate(topo, 200, 4, 7).streams) probe_records += s.size();
  const std::size_t target = 1'000'000;
  std::size_t requests = target * 200 / probe_records * 105 / 100 + 1;

  auto in = base / "in";
  auto synth = run_child({kCli, "synth", "--topology", "random", "--seed", "7", "--requests",
                          std::to_string(requests), "--cpus", "4", "--out", in.string()});
  if (synth.status != 0) return {false, "synth exited with " + std::to_string(synth.status)};

  std::vector<std::string> args{kCli, "reconstruct", "--config",
                                (in / "reconstruct.json").string(), "--out",
                                (base / "out").string()};
  for (int c = 0; c < 4; ++c) args.push_back((in / ("cpu" + std::to_string(c) + ".ftrace.txt")).string());
  long parent_kb = self_rss_kb();
  auto stats = run_child(args);
  if (stats.status != 0) return {false, "reconstruct exited with " + std::to_string(stats.status)};
  auto diag = nlohmann::json::parse(slurp(base / "out/diagnostics.json"));
  std::uint64_t records = diag["counters"]["records"].get<std::uint64_t>();
  double mb = static_cast<double>(stats.max_rss_kb) / 1024.0;
  std::ostringstream d;
  d << records << " records, " << diag["traces"] << " traces in " << stats.seconds
    << " s, peak RSS " << mb << " MB (parent at spawn " << parent_kb / 1024 << " MB)";
  fs::remove_all(base);
  return {records >= target && stats.seconds < 30.0 && mb < 1024.0, d.str()};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&failed](const std::string& name, const std::function<Outcome()>& check) {
    Outcome o;
    auto t0 = Clock::now();
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s %-22s %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  };

  report("throughput", throughput);
  report("oracle-equivalence", oracle_equivalence);
  report("fork-call-fixture", fork_call_fixture);
  report("merge-correctness", merge_correctness);
  std::vector<Variant> runs;
  report("mint-conservation", [&] {
    runs = conservation_runs();
    return mint_conservation(runs);
  });
  report("tally-conservation", [&] { return tally_conservation(runs); });
  report("robustness", robustness);
  report("determinism", determinism);

  fs::remove_all(fs::temp_directory_path() / ("kreqtrace-acceptance-" + std::to_string(::getpid())));
  std::printf("%d of 8 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
