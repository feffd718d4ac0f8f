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

#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "kreqtrace/dag.hpp"
#include "kreqtrace/synth.hpp"

namespace kreqtrace {
namespace {

TopologySpec fork_call() {
  std::ifstream in(std::string(KREQTRACE_DATA_DIR) + "/fork_call/topology.json");
  return topology_from_json(nlohmann::json::parse(in));
}

TopologySpec chain(std::size_t tiers) {
  TopologySpec t;
  for (std::size_t i = 0; i < tiers; ++i) {
    ServiceSpec s;
    s.name = "tier" + std::to_string(i);
    s.listen = {"10.2.0." + std::to_string(i + 1), static_cast<std::uint16_t>(7000 + i)};
    if (i + 1 < tiers) s.calls = {"tier" + std::to_string(i + 1)};
    t.services.push_back(s);
  }
  t.gateway = "tier0";
  t.user_event_rates = {{"page_fault_user", 1.5}};
  return t;
}

struct Rebuilt {
  EnginePools pools;
  std::vector<RequestDag> dags;
};

Rebuilt rebuild(const std::vector<std::vector<TraceRecord>>& streams, const GroundTruth& truth) {
  Rebuilt r;
  r.pools = replay(merge_streams(streams), EngineConfig{truth.gateways, truth.user_events});
  r.dags = build_all_dags(r.pools);
  return r;
}

DiffReport diff_of(const std::vector<std::vector<TraceRecord>>& streams, const GroundTruth& truth) {
  auto r = rebuild(streams, truth);
  return compare(r.dags, unattributed_map(r.pools), truth);
}

TEST(Simulate, OneServiceOneRequestOneCpu) {
  auto t = chain(1);
  t.user_event_rates.clear();
  t.idle_user_event_rate = 0;
  auto sim = simulate(t, 1, 1, 5);
  ASSERT_EQ(sim.streams.size(), 1u);
  ASSERT_EQ(sim.truth.traces.size(), 1u);
  ASSERT_EQ(sim.truth.traces[0].nodes.size(), 1u);
  EXPECT_EQ(sim.truth.external_arrivals, 1u);
  std::size_t receives = 0, sends = 0;
  for (const auto& r : sim.streams[0]) {
    if (r.event == events::kTcpRcvSpaceAdjust) ++receives;
    if (r.event == events::kSockSendmsgProbe) ++sends;
  }
  EXPECT_EQ(receives, 1u);
  EXPECT_EQ(sends, 1u);
  EXPECT_TRUE(diff_of(sim.streams, sim.truth).empty());
}

TEST(Simulate, ThreeTierChainHasThirtySpans) {
  auto sim = simulate(chain(3), 10, 2, 8);
  ASSERT_EQ(sim.truth.traces.size(), 10u);
  std::size_t spans = 0;
  for (const auto& t : sim.truth.traces) {
    EXPECT_EQ(t.nodes.size(), 3u);
    spans += t.nodes.size();
  }
  EXPECT_EQ(spans, 30u);
  EXPECT_TRUE(diff_of(sim.streams, sim.truth).empty());
}

TEST(Simulate, ForkCallTruthIsForkThenTcp) {
  auto sim = simulate(fork_call(), 1, 2, 3);
  ASSERT_EQ(sim.truth.traces.size(), 1u);
  const auto& nodes = sim.truth.traces[0].nodes;
  ASSERT_EQ(nodes.size(), 3u);
  EXPECT_EQ(nodes[0].owner_pid, 2066822u);
  EXPECT_EQ(nodes[1].kind, StateKind::kFork);
  EXPECT_EQ(nodes[1].owner_pid, 2066823u);
  EXPECT_EQ(nodes[1].peer_pid, 2066822u);
  EXPECT_EQ(*nodes[1].parent, 0u);
  EXPECT_EQ(nodes[2].kind, StateKind::kNetwork);
  EXPECT_EQ(nodes[2].owner_pid, 1966384u);
  EXPECT_EQ(nodes[2].peer_pid, 2066823u);
  EXPECT_EQ(*nodes[2].parent, 1u);
  EXPECT_EQ(sim.truth.fork_edges, (std::vector<std::pair<Pid, Pid>>{{2066822, 2066823}}));
}

TEST(Simulate, RejectsBadTopologies) {
  auto cyclic = chain(3);
  cyclic.services[2].calls = {"tier0"};
  EXPECT_THROW(simulate(cyclic, 1, 1, 1), InvalidTopology);
  auto no_gateway = chain(2);
  no_gateway.gateway = "nope";
  EXPECT_THROW(simulate(no_gateway, 1, 1, 1), InvalidTopology);
  auto unknown_call = chain(2);
  unknown_call.services[1].calls = {"ghost"};
  EXPECT_THROW(simulate(unknown_call, 1, 1, 1), InvalidTopology);
  auto structural = chain(1);
  structural.user_event_rates = {{"sys_enter_read", 1.0}};
  EXPECT_THROW(simulate(structural, 1, 1, 1), std::invalid_argument);
  EXPECT_THROW(simulate(chain(1), 0, 1, 1), std::invalid_argument);
  EXPECT_THROW(simulate(chain(1), 1, 0, 1), std::invalid_argument);
}

TEST(Simulate, SameSeedSameOutput) {
  auto topo = random_topology(21);
  auto a = simulate(topo, 25, 4, 77);
  auto b = simulate(topo, 25, 4, 77);
  EXPECT_EQ(a.streams, b.streams);
  EXPECT_EQ(truth_to_json(a.truth), truth_to_json(b.truth));
  auto c = simulate(topo, 25, 4, 78);
  EXPECT_NE(a.streams, c.streams);
}

TEST(Simulate, StreamsAreOrderedAndParse) {
  for (std::uint64_t seed = 1; seed <= 15; ++seed) {
    auto sim = simulate(random_topology(seed), 20, 4, seed);
    for (std::size_t c = 0; c < sim.streams.size(); ++c) {
      const auto& s = sim.streams[c];
      for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_EQ(s[i].cpu, c);
        EXPECT_EQ(s[i].seq, i);
        if (i > 0) {
          EXPECT_LT(s[i - 1].timestamp_ns, s[i].timestamp_ns);
        }
      }
      for (Backend b : {Backend::kFtrace, Backend::kBpftrace}) {
        std::string text;
        for (const auto& r : s) text += format_line(b, r) + "\n";
        std::istringstream in(text);
        ParseStats stats;
        EXPECT_EQ(parse_stream(in, b, true, stats), s);
      }
    }
  }
}

TEST(Simulate, KeepaliveReusesConnections) {
  auto topo = chain(3);
  topo.keepalive = true;
  auto sim = simulate(topo, 10, 2, 4);
  std::map<std::string, int> uses;
  for (const auto& s : sim.streams) {
    for (const auto& r : s) {
      if (r.event == events::kTcpRcvSpaceAdjust && r.pid != 0) {
        uses[*r.arg("daddr") + ":" + *r.arg("dport") + ">" + *r.arg("saddr")]++;
      }
    }
  }
  EXPECT_TRUE(std::any_of(uses.begin(), uses.end(), [](const auto& u) { return u.second > 2; }));
  EXPECT_TRUE(diff_of(sim.streams, sim.truth).empty());
}

TEST(Simulate, DuplicateReceivesAreAbsorbed) {
  auto topo = random_topology(6);
  topo.duplicate_receive = true;
  auto sim = simulate(topo, 10, 2, 6);
  auto r = rebuild(sim.streams, sim.truth);
  EXPECT_GT(r.pools.counters.duplicate_receive, 0u);
  EXPECT_TRUE(compare(r.dags, unattributed_map(r.pools), sim.truth).empty());
}

TEST(Faults, ZeroProbabilityIsIdentity) {
  auto sim = simulate(random_topology(3), 10, 3, 3);
  for (auto kind : {FaultKind::kDropUserEvents, FaultKind::kDropStructural,
                    FaultKind::kOrphanProbes}) {
    auto out = inject_faults(sim.streams, {kind, 0.0, 0}, 9);
    EXPECT_EQ(out.streams, sim.streams);
    EXPECT_TRUE(out.manifest.empty());
  }
  EXPECT_THROW(inject_faults(sim.streams, {FaultKind::kDropStructural, 1.5, 0}, 1),
               std::invalid_argument);
}

// Multiset of (ts, cpu, pid, event) for comparing streams irrespective of seq.
std::multiset<std::tuple<std::uint64_t, std::uint32_t, Pid, std::string>> bag(
    const std::vector<std::vector<TraceRecord>>& streams) {
  std::multiset<std::tuple<std::uint64_t, std::uint32_t, Pid, std::string>> out;
  for (const auto& s : streams) {
    for (const auto& r : s) out.emplace(r.timestamp_ns, r.cpu, r.pid, r.event);
  }
  return out;
}

TEST(Faults, DropUserEventsRemovesOnlyUserEvents) {
  auto sim = simulate(random_topology(12), 30, 3, 12);
  auto out = inject_faults(sim.streams, {FaultKind::kDropUserEvents, 0.05, 0}, 4);
  ASSERT_FALSE(out.manifest.empty());
  EventCatalog catalog(sim.truth.user_events);
  for (const auto& r : out.manifest) EXPECT_TRUE(catalog.is_user(r.event)) << r.event;
  auto kept = bag(out.streams);
  auto removed = bag({out.manifest});
  kept.insert(removed.begin(), removed.end());
  EXPECT_EQ(kept, bag(sim.streams));
  EXPECT_EQ(inject_faults(sim.streams, {FaultKind::kDropUserEvents, 0.05, 0}, 4).manifest,
            out.manifest);
}

TEST(Faults, TruncateManifestIsEverythingPastTheCut) {
  auto sim = simulate(random_topology(5), 20, 4, 5);
  std::uint64_t lo = UINT64_MAX, hi = 0;
  for (const auto& s : sim.streams) {
    for (const auto& r : s) {
      lo = std::min(lo, r.timestamp_ns);
      hi = std::max(hi, r.timestamp_ns);
    }
  }
  const std::uint64_t cut = lo + (hi - lo) / 2;
  auto out = inject_faults(sim.streams, {FaultKind::kTruncate, 0, cut}, 1);
  std::vector<std::vector<TraceRecord>> beyond(1);
  for (const auto& s : sim.streams) {
    for (const auto& r : s) {
      if (r.timestamp_ns > cut) beyond[0].push_back(r);
    }
  }
  EXPECT_EQ(bag({out.manifest}), bag(beyond));
  for (const auto& s : out.streams) {
    for (const auto& r : s) EXPECT_LE(r.timestamp_ns, cut);
  }
}

// Cutting the stream leaves exactly the truth states alive at the cut
// flagged open_at_end.
TEST(Faults, TruncationFlagsExactlyTheInFlightStates) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto sim = simulate(random_topology(seed), 20, 3, seed);
    // Cut through the middle of some span so something is in flight.
    const auto& pick = sim.truth.traces[seed % sim.truth.traces.size()].nodes.back();
    const std::uint64_t cut = pick.start_ns + (pick.end_ns - pick.start_ns) / 2;
    auto out = inject_faults(sim.streams, {FaultKind::kTruncate, 0, cut}, seed);
    auto r = rebuild(out.streams, sim.truth);

    std::set<std::tuple<Pid, Pid, TraceId, std::uint64_t>> expected, flagged;
    for (const auto& t : sim.truth.traces) {
      for (const auto& n : t.nodes) {
        if (n.start_ns <= cut && n.end_ns > cut) {
          expected.emplace(n.owner_pid, n.peer_pid, t.trace_id, n.start_ns);
        }
      }
    }
    for (const auto& st : r.pools.states) {
      if (st.flags & kOpenAtEnd) flagged.emplace(st.owner, st.key.peer, st.trace(), st.start_ns);
    }
    EXPECT_FALSE(expected.empty()) << "seed " << seed;
    EXPECT_EQ(flagged, expected) << "seed " << seed;
    for (const auto& d : r.dags) EXPECT_NO_THROW(validate_dag(d));
  }
}

TEST(Faults, OrphanProbesLeaveStructureUnchanged) {
  auto sim = simulate(random_topology(9), 30, 3, 9);
  auto out = inject_faults(sim.streams, {FaultKind::kOrphanProbes, 0.3, 0}, 2);
  ASSERT_FALSE(out.manifest.empty());
  auto r = rebuild(out.streams, sim.truth);
  EXPECT_EQ(r.pools.counters.orphan_probe, out.manifest.size());
  EXPECT_TRUE(compare(r.dags, unattributed_map(r.pools), sim.truth).empty());
}

TEST(Compare, FaultFreeRunsAreEmpty) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto sim = simulate(random_topology(seed), 15, 3, seed);
    auto report = diff_of(sim.streams, sim.truth);
    EXPECT_TRUE(report.empty()) << "seed " << seed << "\n" << report.to_text();
  }
}

TEST(Compare, OneDroppedUserEventIsOneTallyDiff) {
  auto topo = chain(3);
  topo.idle_user_event_rate = 0;
  auto sim = simulate(topo, 5, 2, 31);
  auto streams = sim.streams;
  bool dropped = false;
  for (auto& s : streams) {
    for (auto it = s.begin(); it != s.end() && !dropped; ++it) {
      if (it->event == events::kPageFaultUser) {
        s.erase(it);
        dropped = true;
        break;
      }
    }
    if (dropped) {
      for (std::size_t i = 0; i < s.size(); ++i) s[i].seq = i;
      break;
    }
  }
  ASSERT_TRUE(dropped);
  auto report = diff_of(streams, sim.truth);
  ASSERT_EQ(report.entries.size(), 1u) << report.to_text();
  EXPECT_EQ(report.entries[0].kind, DiffKind::kTally);
  EXPECT_EQ(std::abs(report.entries[0].magnitude), 1);
  EXPECT_TRUE(report.structure_empty());
}

TEST(Compare, TruthAgainstItselfIsEmpty) {
  auto sim = simulate(random_topology(2), 10, 2, 2);
  auto round = truth_from_json(truth_to_json(sim.truth));
  EXPECT_EQ(truth_to_json(round), truth_to_json(sim.truth));
  EXPECT_TRUE(diff_of(sim.streams, round).empty());
}

TEST(Compare, MissingTracesAreReportedNotThrown) {
  auto sim = simulate(chain(2), 4, 1, 1);
  auto r = rebuild(sim.streams, sim.truth);
  r.dags.pop_back();
  auto report = compare(r.dags, unattributed_map(r.pools), sim.truth);
  EXPECT_EQ(report.count(DiffKind::kTraceCount), 1u);
  EXPECT_GT(report.count(DiffKind::kMissingNode), 0u);
  EXPECT_FALSE(report.structure_empty());
}

TEST(Topology, JsonRoundTrip) {
  auto topo = random_topology(17);
  auto back = topology_from_json(topology_to_json(topo));
  EXPECT_EQ(topology_to_json(back), topology_to_json(topo));
  EXPECT_THROW(topology_from_json(nlohmann::json::parse(R"({"services": []})")), InvalidTopology);
}

TEST(Topology, RandomStaysWithinBounds) {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    auto topo = random_topology(seed);
    EXPECT_NO_THROW(topo.validate());
    EXPECT_LE(topo.services.size(), 10u);
    for (const auto& s : topo.services) EXPECT_LE(s.calls.size(), 4u);
  }
}

}  // namespace
}  // namespace kreqtrace
