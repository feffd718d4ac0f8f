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

// Per-trace request DAGs built from a finalized engine snapshot, plus the
// canonical JSON export, a text Gantt rendering and cross-trace summaries.
//
// JSON schema (schema_version "1"):
//   {
//     "diagnostics": {"counters": {...}, "orphans": [node...]},
//     "edges": [{"cause": "tcp"|"fork", "child": id, "parent": id}...],
//     "nodes": [node...],             // sorted by (start_ns, state_id)
//     "root": id,
//     "schema_version": "1",
//     "trace_id": n
//   }
//   node = {comm, duration_ns, end_ns, flags[], identity{}, kind,
//           owner_pid, start_ns, state_id, tallies{}}
// Object keys are emitted in sorted order and edges lexicographically, so
// identical DAGs always serialize to identical bytes.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kreqtrace/engine.hpp"
#include "kreqtrace/net.hpp"
#include "kreqtrace/record.hpp"

namespace kreqtrace {

enum class EdgeCause : std::uint8_t { kTcp, kFork };

inline std::string_view cause_name(EdgeCause c) {
  return c == EdgeCause::kTcp ? "tcp" : "fork";
}

inline std::string_view kind_name(StateKind k) {
  return k == StateKind::kNetwork ? "network" : "fork";
}

struct DagNode {
  std::string state_id;
  StateKind kind = StateKind::kNetwork;
  Pid owner_pid = 0;
  std::string comm;
  std::uint64_t start_ns = 0;
  std::uint64_t end_ns = 0;
  std::uint8_t flags = 0;
  StateKey identity;
  Endpoint source;
  std::map<std::string, std::uint64_t> tallies;

  std::uint64_t duration_ns() const { return end_ns - start_ns; }
  bool operator==(const DagNode&) const = default;
};

struct DagEdge {
  std::string parent;
  std::string child;
  EdgeCause cause = EdgeCause::kTcp;

  auto operator<=>(const DagEdge&) const = default;
  bool operator==(const DagEdge&) const = default;
};

struct RequestDag {
  TraceId trace_id = 0;
  std::string root;
  // Depth-first order from the root, children by (start_ns, state_id).
  std::vector<DagNode> nodes;
  std::vector<DagEdge> edges;
  // States of this trace that are not reachable from the root.
  std::vector<DagNode> orphans;

  const DagNode* find(std::string_view id) const {
    for (const auto& n : nodes) {
      if (n.state_id == id) return &n;
    }
    return nullptr;
  }
};

class UnknownTrace : public std::runtime_error {
 public:
  explicit UnknownTrace(TraceId id)
      : std::runtime_error("trace " + std::to_string(id) + " was never minted") {}
};

class InvalidDag : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline bool node_order_less(const DagNode& a, const DagNode& b) {
  if (a.start_ns != b.start_ns) return a.start_ns < b.start_ns;
  return a.state_id < b.state_id;
}

}  // namespace detail

inline std::string canonical_key(const StateKey& key) {
  std::string out(kind_name(key.kind));
  out += '|';
  out += std::to_string(key.peer);
  if (key.kind == StateKind::kNetwork) {
    out += '|';
    out += key.tuple.to_string();
  }
  out += '|';
  out += std::to_string(key.trace);
  return out;
}

// "<net|fork>:<owner pid>:<fnv1a-64 of the state key>"
inline std::string state_id_for(StateKind kind, Pid owner, const StateKey& key) {
  return std::string(kind == StateKind::kNetwork ? "net" : "fork") + ":" +
         std::to_string(owner) + ":" + detail::hex64(detail::fnv1a(canonical_key(key)));
}

inline DagNode make_node(const ThreadState& state,
                         const std::vector<std::string>& user_events) {
  DagNode node;
  node.state_id = state_id_for(state.key.kind, state.owner, state.key);
  node.kind = state.key.kind;
  node.owner_pid = state.owner;
  node.comm = state.comm;
  node.start_ns = state.start_ns;
  node.end_ns = state.end_ns.value_or(state.start_ns);
  node.flags = state.flags;
  node.identity = state.key;
  node.source = state.source;
  for (std::size_t i = 0; i < user_events.size(); ++i) {
    node.tallies[user_events[i]] = i < state.tallies.size() ? state.tallies[i] : 0;
  }
  return node;
}

namespace detail {

// Builds one DAG from the arena indices of a single trace's states.
inline RequestDag assemble(TraceId trace, const std::vector<std::size_t>& members,
                           const EnginePools& pools) {
  RequestDag dag;
  dag.trace_id = trace;

  std::unordered_map<std::size_t, DagNode> nodes;
  std::set<std::string> used_ids;
  for (std::size_t index : members) {
    DagNode node = make_node(pools.states[index], pools.user_events);
    if (!used_ids.insert(node.state_id).second) {
      std::string base = node.state_id;
      for (int n = 2; !used_ids.insert(node.state_id).second; ++n) {
        node.state_id = base + "#" + std::to_string(n);
      }
    }
    nodes.emplace(index, std::move(node));
  }

  std::unordered_map<std::size_t, std::vector<std::size_t>> children;
  std::vector<std::size_t> roots;
  for (std::size_t index : members) {
    const auto& cause = pools.states[index].cause;
    if (cause && nodes.count(*cause) != 0) {
      children[*cause].push_back(index);
    } else if (!cause) {
      roots.push_back(index);
    }
  }
  auto by_time = [&nodes](std::size_t a, std::size_t b) {
    return node_order_less(nodes.at(a), nodes.at(b));
  };
  for (auto& [parent, kids] : children) std::sort(kids.begin(), kids.end(), by_time);
  std::sort(roots.begin(), roots.end(), by_time);

  // The minted gateway state is the root; prefer it over anything else
  // that lost its cause.
  std::optional<std::size_t> root;
  for (std::size_t r : roots) {
    const auto& key = pools.states[r].key;
    if (key.kind == StateKind::kNetwork && key.peer == kExternalPid) {
      root = r;
      break;
    }
  }

  std::set<std::size_t> visited;
  if (root) {
    dag.root = nodes.at(*root).state_id;
    // Iterative preorder DFS.
    std::vector<std::size_t> stack{*root};
    while (!stack.empty()) {
      std::size_t current = stack.back();
      stack.pop_back();
      if (!visited.insert(current).second) continue;
      dag.nodes.push_back(nodes.at(current));
      auto it = children.find(current);
      if (it == children.end()) continue;
      for (auto kid = it->second.rbegin(); kid != it->second.rend(); ++kid) {
        const ThreadState& child = pools.states[*kid];
        dag.edges.push_back({nodes.at(current).state_id, nodes.at(*kid).state_id,
                             child.key.kind == StateKind::kFork ? EdgeCause::kFork
                                                                : EdgeCause::kTcp});
        stack.push_back(*kid);
      }
    }
  }
  for (std::size_t index : members) {
    if (visited.count(index) == 0) dag.orphans.push_back(nodes.at(index));
  }
  std::sort(dag.orphans.begin(), dag.orphans.end(), node_order_less);
  std::sort(dag.edges.begin(), dag.edges.end());
  return dag;
}

}  // namespace detail

// Every minted trace, in trace id order.
inline std::vector<RequestDag> build_all_dags(const EnginePools& pools) {
  std::vector<std::vector<std::size_t>> by_trace(pools.minted());
  for (std::size_t i = 0; i < pools.states.size(); ++i) {
    TraceId t = pools.states[i].trace();
    if (t >= 1 && t <= pools.minted()) by_trace[t - 1].push_back(i);
  }
  std::vector<RequestDag> out;
  out.reserve(by_trace.size());
  for (std::size_t t = 0; t < by_trace.size(); ++t) {
    out.push_back(detail::assemble(t + 1, by_trace[t], pools));
  }
  return out;
}

inline RequestDag build_dag(TraceId trace, const EnginePools& pools) {
  if (trace == 0 || trace > pools.minted()) throw UnknownTrace(trace);
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < pools.states.size(); ++i) {
    if (pools.states[i].trace() == trace) members.push_back(i);
  }
  return detail::assemble(trace, members, pools);
}

// Checks: unique ids, edges reference nodes, every non-root node has an
// incoming edge, no cycles, everything reachable from the root, and children
// never start before their parent.
inline void validate_dag(const RequestDag& dag) {
  std::map<std::string, const DagNode*> by_id;
  for (const auto& node : dag.nodes) {
    if (!by_id.emplace(node.state_id, &node).second) {
      throw InvalidDag("duplicate state id " + node.state_id);
    }
  }
  if (dag.nodes.empty()) {
    if (!dag.edges.empty()) throw InvalidDag("edges without nodes");
    return;
  }
  if (by_id.count(dag.root) == 0) throw InvalidDag("root is not a node");

  std::map<std::string, std::vector<std::string>> out_edges;
  std::map<std::string, std::size_t> in_degree;
  for (const auto& edge : dag.edges) {
    auto p = by_id.find(edge.parent);
    auto c = by_id.find(edge.child);
    if (p == by_id.end() || c == by_id.end()) {
      throw InvalidDag("edge references unknown node");
    }
    if (c->second->start_ns < p->second->start_ns) {
      throw InvalidDag("child " + edge.child + " starts before its parent");
    }
    out_edges[edge.parent].push_back(edge.child);
    ++in_degree[edge.child];
  }
  if (in_degree.count(dag.root) != 0) throw InvalidDag("root has an incoming edge");

  // Kahn's algorithm; every node must be consumed, starting from the root.
  std::vector<std::string> ready{dag.root};
  std::size_t seen = 0;
  while (!ready.empty()) {
    std::string id = ready.back();
    ready.pop_back();
    ++seen;
    for (const auto& child : out_edges[id]) {
      if (--in_degree[child] == 0) ready.push_back(child);
    }
  }
  if (seen != dag.nodes.size()) {
    throw InvalidDag("cycle or node unreachable from root in trace " +
                     std::to_string(dag.trace_id));
  }
}

inline nlohmann::json node_to_json(const DagNode& node) {
  using nlohmann::json;
  json flags = json::array();
  if (node.flags & kEndedByExit) flags.push_back("ended_by_exit");
  if (node.flags & kOpenAtEnd) flags.push_back("open_at_end");
  json identity;
  identity["trace_id"] = node.identity.trace;
  if (node.kind == StateKind::kNetwork) {
    identity["source_thread"] = node.identity.peer;
    identity["tuple"] = node.identity.tuple.to_string();
    identity["source"] = node.source.to_string();
  } else {
    identity["parent_thread"] = node.identity.peer;
  }
  json tallies = json::object();
  for (const auto& [event, count] : node.tallies) tallies[event] = count;
  return json{{"comm", node.comm},
              {"duration_ns", node.duration_ns()},
              {"end_ns", node.end_ns},
              {"flags", flags},
              {"identity", identity},
              {"kind", kind_name(node.kind)},
              {"owner_pid", node.owner_pid},
              {"start_ns", node.start_ns},
              {"state_id", node.state_id},
              {"tallies", tallies}};
}

inline std::string export_json(const RequestDag& dag) {
  using nlohmann::json;
  std::vector<const DagNode*> nodes;
  for (const auto& n : dag.nodes) nodes.push_back(&n);
  std::sort(nodes.begin(), nodes.end(), [](const DagNode* a, const DagNode* b) {
    return detail::node_order_less(*a, *b);
  });
  json jnodes = json::array();
  std::uint64_t open_at_end = 0;
  std::uint64_t ended_by_exit = 0;
  for (const DagNode* n : nodes) {
    jnodes.push_back(node_to_json(*n));
    if (n->flags & kOpenAtEnd) ++open_at_end;
    if (n->flags & kEndedByExit) ++ended_by_exit;
  }
  std::vector<DagEdge> edges = dag.edges;
  std::sort(edges.begin(), edges.end());
  json jedges = json::array();
  for (const auto& e : edges) {
    jedges.push_back({{"cause", cause_name(e.cause)},
                      {"child", e.child},
                      {"parent", e.parent}});
  }
  json orphans = json::array();
  for (const auto& o : dag.orphans) orphans.push_back(node_to_json(o));
  json doc{{"diagnostics",
            {{"counters",
              {{"ended_by_exit", ended_by_exit},
               {"open_at_end", open_at_end},
               {"orphans", dag.orphans.size()}}},
             {"orphans", orphans}}},
           {"edges", jedges},
           {"nodes", jnodes},
           {"root", dag.root},
           {"schema_version", "1"},
           {"trace_id", dag.trace_id}};
  return doc.dump(2) + "\n";
}

namespace detail {

inline std::optional<Tcp4Tuple> parse_tuple(std::string_view text) {
  auto arrow = text.find("->");
  if (arrow == std::string_view::npos) return std::nullopt;
  auto a = parse_endpoint(text.substr(0, arrow));
  auto b = parse_endpoint(text.substr(arrow + 2));
  if (!a || !b) return std::nullopt;
  return Tcp4Tuple{*a, *b};
}

inline DagNode node_from_json(const nlohmann::json& j) {
  DagNode node;
  node.state_id = j.at("state_id").get<std::string>();
  node.kind = j.at("kind").get<std::string>() == "fork" ? StateKind::kFork
                                                         : StateKind::kNetwork;
  node.owner_pid = j.at("owner_pid").get<Pid>();
  node.comm = j.at("comm").get<std::string>();
  node.start_ns = j.at("start_ns").get<std::uint64_t>();
  node.end_ns = j.at("end_ns").get<std::uint64_t>();
  for (const auto& f : j.at("flags")) {
    if (f == "ended_by_exit") node.flags |= kEndedByExit;
    if (f == "open_at_end") node.flags |= kOpenAtEnd;
  }
  const auto& id = j.at("identity");
  node.identity.kind = node.kind;
  node.identity.trace = id.at("trace_id").get<TraceId>();
  if (node.kind == StateKind::kNetwork) {
    node.identity.peer = id.at("source_thread").get<Pid>();
    auto tuple = parse_tuple(id.at("tuple").get<std::string>());
    auto source = parse_endpoint(id.at("source").get<std::string>());
    if (!tuple || !source) throw InvalidDag("bad tuple in " + node.state_id);
    node.identity.tuple = *tuple;
    node.source = *source;
  } else {
    node.identity.peer = id.at("parent_thread").get<Pid>();
  }
  for (const auto& [event, count] : j.at("tallies").items()) {
    node.tallies[event] = count.get<std::uint64_t>();
  }
  return node;
}

}  // namespace detail

// Reads a document written by export_json. Nodes come back in DFS order.
inline RequestDag dag_from_json(std::string_view text) {
  auto doc = nlohmann::json::parse(text);
  if (doc.at("schema_version") != "1") throw InvalidDag("unsupported schema version");
  RequestDag dag;
  dag.trace_id = doc.at("trace_id").get<TraceId>();
  dag.root = doc.at("root").get<std::string>();
  std::vector<DagNode> flat;
  for (const auto& n : doc.at("nodes")) flat.push_back(detail::node_from_json(n));
  for (const auto& e : doc.at("edges")) {
    dag.edges.push_back({e.at("parent").get<std::string>(),
                         e.at("child").get<std::string>(),
                         e.at("cause") == "fork" ? EdgeCause::kFork : EdgeCause::kTcp});
  }
  for (const auto& o : doc.at("diagnostics").at("orphans")) {
    dag.orphans.push_back(detail::node_from_json(o));
  }

  std::map<std::string, std::vector<const DagNode*>> kids;
  std::map<std::string, const DagNode*> by_id;
  for (const auto& n : flat) by_id[n.state_id] = &n;
  for (const auto& e : dag.edges) {
    if (by_id.count(e.child)) kids[e.parent].push_back(by_id[e.child]);
  }
  for (auto& [parent, list] : kids) {
    std::sort(list.begin(), list.end(), [](const DagNode* a, const DagNode* b) {
      return detail::node_order_less(*a, *b);
    });
  }
  std::set<std::string> done;
  std::function<void(const std::string&)> visit = [&](const std::string& id) {
    if (!done.insert(id).second || by_id.count(id) == 0) return;
    dag.nodes.push_back(*by_id[id]);
    for (const DagNode* k : kids[id]) visit(k->state_id);
  };
  visit(dag.root);
  for (const auto& n : flat) {
    if (done.count(n.state_id) == 0) dag.nodes.push_back(n);
  }
  return dag;
}

// One row per node in DFS order: a bar of `width` cells placed within the
// trace window, then the pid, comm, kind and per-event tallies, indented
// by depth.
inline std::string render_gantt(const RequestDag& dag, std::size_t width) {
  if (width < 40) throw std::invalid_argument("gantt width must be >= 40");
  std::ostringstream out;
  if (dag.nodes.empty()) {
    out << "trace " << dag.trace_id << "  (no states)\n";
    return out.str();
  }
  std::uint64_t t0 = dag.nodes.front().start_ns;
  std::uint64_t t1 = dag.nodes.front().end_ns;
  for (const auto& n : dag.nodes) {
    t0 = std::min(t0, n.start_ns);
    t1 = std::max(t1, n.end_ns);
  }
  std::uint64_t window = t1 - t0;
  out << "trace " << dag.trace_id << "  window " << t0 << ".." << t1 << "  ("
      << window << " ns, " << dag.nodes.size() << " states)\n";

  auto cell = [&](std::uint64_t t) -> std::size_t {
    if (window == 0) return 0;
    auto scaled = static_cast<unsigned __int128>(t - t0) * width / window;
    return static_cast<std::size_t>(scaled);
  };

  std::map<std::string, std::vector<const DagNode*>> kids;
  std::map<std::string, const DagNode*> by_id;
  for (const auto& n : dag.nodes) by_id[n.state_id] = &n;
  for (const auto& e : dag.edges) {
    if (by_id.count(e.child)) kids[e.parent].push_back(by_id[e.child]);
  }
  for (auto& [parent, list] : kids) {
    std::sort(list.begin(), list.end(), [](const DagNode* a, const DagNode* b) {
      return detail::node_order_less(*a, *b);
    });
  }

  auto row = [&](const DagNode& n, std::size_t depth) {
    std::size_t begin = 0;
    std::size_t end = width;
    if (window != 0) {
      begin = std::min(cell(n.start_ns), width - 1);
      end = std::max(cell(n.end_ns), begin + 1);
    }
    std::string bar(width, '.');
    for (std::size_t c = begin; c < end; ++c) bar[c] = '#';
    out << '|' << bar << "|  " << std::string(2 * depth, ' ') << n.owner_pid << ' '
        << n.comm << ' ' << kind_name(n.kind);
    if (n.flags & kEndedByExit) out << " [ended_by_exit]";
    if (n.flags & kOpenAtEnd) out << " [open_at_end]";
    for (const auto& [event, count] : n.tallies) out << ' ' << event << '=' << count;
    out << '\n';
  };

  std::set<std::string> done;
  std::function<void(const DagNode&, std::size_t)> visit = [&](const DagNode& n,
                                                               std::size_t depth) {
    if (!done.insert(n.state_id).second) return;
    row(n, depth);
    for (const DagNode* k : kids[n.state_id]) visit(*k, depth + 1);
  };
  if (by_id.count(dag.root)) visit(*by_id[dag.root], 0);
  for (const auto& n : dag.nodes) {
    if (done.count(n.state_id) == 0) visit(n, 0);
  }
  return out.str();
}

struct SummaryRow {
  TraceId trace_id = 0;
  std::uint64_t total_span_ns = 0;
  std::size_t node_count = 0;
  std::map<std::string, std::uint64_t> event_totals;
};

struct Summary {
  std::vector<std::string> events;
  std::vector<SummaryRow> rows;
  std::uint64_t min_span_ns = 0;
  std::uint64_t median_span_ns = 0;
  std::uint64_t max_span_ns = 0;

  std::string to_tsv() const {
    std::ostringstream out;
    out << "trace_id\ttotal_span_ns\tnodes";
    for (const auto& e : events) out << '\t' << e;
    out << '\n';
    for (const auto& r : rows) {
      out << r.trace_id << '\t' << r.total_span_ns << '\t' << r.node_count;
      for (const auto& e : events) {
        auto it = r.event_totals.find(e);
        out << '\t' << (it == r.event_totals.end() ? 0 : it->second);
      }
      out << '\n';
    }
    out << "# span_ns min=" << min_span_ns << " median=" << median_span_ns
        << " max=" << max_span_ns << '\n';
    return out.str();
  }
};

// Total span is the trace window (earliest start to latest end). For an even
// number of traces the median is the floor of the two middle values' mean.
inline Summary summarize(const std::vector<RequestDag>& dags) {
  if (dags.empty()) throw std::invalid_argument("summarize needs at least one dag");
  Summary summary;
  std::set<std::string> events;
  for (const auto& dag : dags) {
    SummaryRow row;
    row.trace_id = dag.trace_id;
    row.node_count = dag.nodes.size();
    if (!dag.nodes.empty()) {
      std::uint64_t t0 = dag.nodes.front().start_ns;
      std::uint64_t t1 = dag.nodes.front().end_ns;
      for (const auto& n : dag.nodes) {
        t0 = std::min(t0, n.start_ns);
        t1 = std::max(t1, n.end_ns);
        for (const auto& [event, count] : n.tallies) {
          row.event_totals[event] += count;
          events.insert(event);
        }
      }
      row.total_span_ns = t1 - t0;
    }
    summary.rows.push_back(std::move(row));
  }
  summary.events.assign(events.begin(), events.end());
  std::vector<std::uint64_t> spans;
  for (const auto& r : summary.rows) spans.push_back(r.total_span_ns);
  std::sort(spans.begin(), spans.end());
  summary.min_span_ns = spans.front();
  summary.max_span_ns = spans.back();
  std::size_t mid = spans.size() / 2;
  summary.median_span_ns =
      spans.size() % 2 == 1 ? spans[mid] : spans[mid - 1] + (spans[mid] - spans[mid - 1]) / 2;
  return summary;
}

}  // namespace kreqtrace
