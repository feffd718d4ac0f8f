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

// Synthetic kernel-event workloads with known answers.
//
// A declarative topology (services, their call lists and worker model) is
// driven by a stream of external requests. Every message produces the
// structural events a real capture would contain: syscall enter, send probe
// and syscall exit on the sender; syscall enter, tcp_rcv_space_adjust and
// syscall exit on the receiver. Fork-per-request services fork a child for
// each request and answer after it exits. User events are sprinkled over
// spans with Poisson counts. The records are scattered over simulated CPUs;
// each per-CPU stream is time ordered.
//
// Alongside the streams the simulator keeps the ground-truth span tree of
// every request, which compare() checks reconstructed DAGs against.
//
// Workers serve one request at a time, so every state has exactly one
// causing state and user-event attribution is exact.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kreqtrace/dag.hpp"
#include "kreqtrace/engine.hpp"
#include "kreqtrace/ingest.hpp"
#include "kreqtrace/net.hpp"
#include "kreqtrace/record.hpp"

namespace kreqtrace {

class InvalidTopology : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class WorkerModel : std::uint8_t { kReuse, kForkPerRequest };

struct ServiceSpec {
  std::string name;
  Endpoint listen;
  WorkerModel worker = WorkerModel::kReuse;
  // Downstream services, called sequentially in this order.
  std::vector<std::string> calls;
  std::uint64_t service_time_lo_ns = 20'000;
  std::uint64_t service_time_hi_ns = 80'000;
  // Thread ids handed out before any generated ones.
  std::vector<Pid> pinned_pids;
  std::vector<Pid> pinned_fork_pids;
  // Overrides the topology-wide rate for the listed events.
  std::map<std::string, double> user_event_rates;
};

struct TopologySpec {
  std::vector<ServiceSpec> services;
  std::string gateway;
  // Mean occurrences per span.
  std::map<std::string, double> user_event_rates;
  // Mean occurrences per worker thread outside any span.
  double idle_user_event_rate = 0.5;
  std::string client_ip = "192.168.100.1";
  std::uint64_t arrival_gap_lo_ns = 10'000;
  std::uint64_t arrival_gap_hi_ns = 150'000;
  bool keepalive = false;
  // Emit every tcp_rcv_space_adjust twice.
  bool duplicate_receive = false;

  std::vector<std::string> user_events() const {
    std::set<std::string> names;
    for (const auto& [e, r] : user_event_rates) names.insert(e);
    for (const auto& s : services) {
      for (const auto& [e, r] : s.user_event_rates) names.insert(e);
    }
    return {names.begin(), names.end()};
  }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < services.size(); ++i) {
      if (services[i].name == name) return i;
    }
    throw InvalidTopology("unknown service '" + name + "'");
  }

  const ServiceSpec& gateway_service() const { return services[index_of(gateway)]; }

  void validate() const {
    if (services.empty()) throw InvalidTopology("topology has no services");
    std::set<std::string> names;
    std::set<Endpoint> listens;
    for (const auto& s : services) {
      if (s.name.empty()) throw InvalidTopology("service without a name");
      if (!names.insert(s.name).second) {
        throw InvalidTopology("duplicate service '" + s.name + "'");
      }
      if (s.listen.port == 0) throw InvalidTopology(s.name + ": listen port is 0");
      if (!listens.insert(s.listen).second) {
        throw InvalidTopology(s.name + ": listen endpoint already in use");
      }
      if (s.service_time_lo_ns < 4 || s.service_time_hi_ns < s.service_time_lo_ns) {
        throw InvalidTopology(s.name + ": bad service time range");
      }
    }
    if (names.count(gateway) == 0) {
      throw InvalidTopology("gateway '" + gateway + "' is not a service");
    }
    for (const auto& s : services) {
      std::set<std::string> seen;
      for (const auto& c : s.calls) {
        if (names.count(c) == 0) {
          throw InvalidTopology(s.name + " calls unknown service '" + c + "'");
        }
        if (!seen.insert(c).second) {
          throw InvalidTopology(s.name + " calls '" + c + "' twice");
        }
      }
    }
    // Acyclic call graph (three-colour DFS).
    std::vector<int> colour(services.size(), 0);
    std::function<void(std::size_t)> visit = [&](std::size_t i) {
      colour[i] = 1;
      for (const auto& c : services[i].calls) {
        std::size_t j = index_of(c);
        if (colour[j] == 1) {
          throw InvalidTopology("call graph has a cycle through '" + c + "'");
        }
        if (colour[j] == 0) visit(j);
      }
      colour[i] = 2;
    };
    for (std::size_t i = 0; i < services.size(); ++i) {
      if (colour[i] == 0) visit(i);
    }
    EventCatalog check(user_events());  // rejects structural names
    auto check_rates = [](const std::map<std::string, double>& rates) {
      for (const auto& [e, r] : rates) {
        if (!(r >= 0.0) || !std::isfinite(r)) {
          throw InvalidTopology("bad rate for " + e);
        }
      }
    };
    check_rates(user_event_rates);
    for (const auto& s : services) check_rates(s.user_event_rates);
    if (!(idle_user_event_rate >= 0.0)) throw InvalidTopology("bad idle rate");
    if (arrival_gap_hi_ns < arrival_gap_lo_ns) throw InvalidTopology("bad arrival gap");
  }
};

// One node of a request's true span tree.
struct TruthNode {
  StateKind kind = StateKind::kNetwork;
  Pid owner_pid = 0;
  Pid peer_pid = 0;  // requesting thread (network) or parent (fork)
  std::string comm;
  std::uint64_t start_ns = 0;
  std::uint64_t end_ns = 0;
  std::optional<std::size_t> parent;  // index within the trace
  std::map<std::string, std::uint64_t> tallies;
};

struct TruthTrace {
  TraceId trace_id = 0;
  std::vector<TruthNode> nodes;  // nodes[0] is the gateway state
};

struct GroundTruth {
  std::vector<TruthTrace> traces;
  std::uint64_t external_arrivals = 0;
  std::vector<std::pair<Pid, Pid>> fork_edges;
  std::vector<std::string> user_events;
  std::vector<Endpoint> gateways;
  std::map<std::string, std::uint64_t> event_totals;
  std::map<std::string, std::uint64_t> unattributed;
};

struct Simulation {
  std::vector<std::vector<TraceRecord>> streams;  // one per CPU
  GroundTruth truth;
};

namespace detail {

// Integer and real draws built directly on the 64-bit engine output, so a
// seed produces the same workload with every standard library.
class SplitRng {
 public:
  explicit SplitRng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  std::uint64_t uniform(std::uint64_t lo, std::uint64_t hi) {
    if (hi <= lo) return lo;
    std::uint64_t span = hi - lo + 1;
    if (span == 0) return next();
    return lo + next() % span;
  }

  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  bool chance(double p) { return unit() < p; }

  std::uint64_t poisson(double mean) {
    if (mean <= 0.0) return 0;
    double limit = std::exp(-mean);
    double product = unit();
    std::uint64_t k = 0;
    while (product > limit) {
      ++k;
      product *= unit();
    }
    return k;
  }

 private:
  std::mt19937_64 engine_;
};

inline constexpr std::uint64_t kStep = 1000;

struct CallPlan {
  std::size_t service = 0;
  std::vector<std::uint64_t> segments;  // work before, between and after calls
  std::vector<CallPlan> children;
  std::uint64_t begin = 0;  // receive syscall enter on the worker
  std::uint64_t end = 0;    // response syscall exit on the worker
};

struct Worker {
  Pid pid = 0;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> busy;

  bool free_during(std::uint64_t begin, std::uint64_t end) const {
    for (const auto& [b, e] : busy) {
      if (!(end < b || begin > e)) return false;
    }
    return true;
  }
};

class Simulator {
 public:
  Simulator(const TopologySpec& topology, std::size_t cpus, std::uint64_t seed)
      : topology_(topology), cpus_(cpus), rng_(seed) {
    user_events_ = topology_.user_events();
    workers_.resize(topology_.services.size());
    for (const auto& s : topology_.services) {
      for (Pid p : s.pinned_pids) pinned_.insert(p);
      for (Pid p : s.pinned_fork_pids) pinned_.insert(p);
    }
    next_pid_ = static_cast<Pid>(1000 + rng_.uniform(0, 60'000));
    base_ns_ = 1'000'000'000ULL * (1 + rng_.uniform(0, 99));
    next_fork_pin_.assign(topology_.services.size(), 0);
    for (std::size_t i = 0; i < topology_.services.size(); ++i) {
      next_port_[topology_.services[i].listen.ip] = 40000;
    }
    next_port_[topology_.client_ip] = 50000;
  }

  Simulation run(std::size_t requests) {
    std::size_t gateway = topology_.index_of(topology_.gateway);
    std::vector<CallPlan> plans;
    std::uint64_t arrival = base_ns_;
    for (std::size_t r = 0; r < requests; ++r) {
      if (r > 0) {
        arrival += rng_.uniform(topology_.arrival_gap_lo_ns, topology_.arrival_gap_hi_ns);
      }
      CallPlan plan = sample(gateway);
      layout(plan, arrival);
      plans.push_back(std::move(plan));
    }

    for (std::size_t r = 0; r < plans.size(); ++r) {
      TruthTrace trace;
      trace.trace_id = r + 1;
      current_ = &trace;
      Endpoint client{topology_.client_ip, take_port(topology_.client_ip)};
      handle(plans[r], kExternalPid, client, std::nullopt);
      current_ = nullptr;
      traces_.push_back(std::move(trace));
    }
    emit_idle_user_events();
    return finish(requests);
  }

 private:
  CallPlan sample(std::size_t service) {
    const ServiceSpec& spec = topology_.services[service];
    CallPlan plan;
    plan.service = service;
    std::uint64_t total = rng_.uniform(spec.service_time_lo_ns, spec.service_time_hi_ns);
    std::size_t pieces = spec.calls.size() + 1;
    // Split the service time into positive pieces.
    std::vector<std::uint64_t> cuts;
    for (std::size_t i = 0; i + 1 < pieces; ++i) cuts.push_back(rng_.uniform(0, total));
    std::sort(cuts.begin(), cuts.end());
    std::uint64_t last = 0;
    for (std::uint64_t c : cuts) {
      plan.segments.push_back(c - last + kStep);
      last = c;
    }
    plan.segments.push_back(total - last + kStep);
    for (const auto& callee : spec.calls) {
      plan.children.push_back(sample(topology_.index_of(callee)));
    }
    return plan;
  }

  // Assigns absolute times; the worker's receive syscall starts at `begin`.
  std::uint64_t layout(CallPlan& plan, std::uint64_t begin) {
    const ServiceSpec& spec = topology_.services[plan.service];
    plan.begin = begin;
    std::uint64_t cursor = begin + 2 * kStep;
    bool forks = spec.worker == WorkerModel::kForkPerRequest;
    if (forks) cursor += kStep;
    for (std::size_t i = 0; i < plan.children.size(); ++i) {
      cursor += plan.segments[i];
      std::uint64_t callee_end = layout(plan.children[i], cursor + 4 * kStep);
      cursor = callee_end + 2 * kStep;
    }
    cursor += plan.segments.back();
    if (forks) cursor += kStep;  // child exit
    plan.end = cursor + 3 * kStep;
    return plan.end;
  }

  Pid fresh_pid() {
    while (pinned_.count(next_pid_) != 0) ++next_pid_;
    return next_pid_++;
  }

  std::uint16_t take_port(const std::string& ip) {
    std::uint16_t& port = next_port_[ip];
    std::uint16_t out = port;
    port = port >= 60999 ? 32768 : static_cast<std::uint16_t>(port + 1);
    return out;
  }

  Pid pick_worker(const CallPlan& plan) {
    const ServiceSpec& spec = topology_.services[plan.service];
    auto& workers = workers_[plan.service];
    for (auto& w : workers) {
      if (w.free_during(plan.begin, plan.end)) {
        w.busy.emplace_back(plan.begin, plan.end);
        return w.pid;
      }
    }
    Worker w;
    w.pid = workers.size() < spec.pinned_pids.size() ? spec.pinned_pids[workers.size()]
                                                     : fresh_pid();
    w.busy.emplace_back(plan.begin, plan.end);
    workers.push_back(w);
    comms_[w.pid] = comm_of(plan.service);
    return w.pid;
  }

  std::string comm_of(std::size_t service) const {
    return topology_.services[service].name.substr(0, 15);
  }

  std::size_t push(std::uint64_t ts, Pid pid, std::string event,
                   std::vector<std::pair<std::string, std::string>> args) {
    TraceRecord r;
    r.timestamp_ns = ts;
    r.pid = pid;
    r.comm = comms_[pid];
    r.event = std::move(event);
    r.args = std::move(args);
    r.cpu = static_cast<std::uint32_t>(rng_.uniform(0, cpus_ - 1));
    events_.push_back(std::move(r));
    return events_.size() - 1;
  }

  static std::vector<std::pair<std::string, std::string>> tuple_args(
      const Endpoint& local, const Endpoint& remote) {
    return {{"saddr", local.ip},
            {"sport", std::to_string(local.port)},
            {"daddr", remote.ip},
            {"dport", std::to_string(remote.port)}};
  }

  // Returns the event index of the send probe.
  std::size_t emit_send(std::uint64_t t, Pid pid, const Endpoint& local,
                        const Endpoint& remote) {
    auto sc = static_cast<Syscall>(rng_.uniform(0, 3));
    std::string fd = std::to_string(3 + rng_.uniform(0, 60));
    std::string len = std::to_string(64 + rng_.uniform(0, 4000));
    push(t, pid, events::enter(sc), {{"fd", fd}, {"len", len}});
    std::size_t probe = push(t + kStep, pid, std::string(events::kSockSendmsgProbe),
                             tuple_args(local, remote));
    if (sc == Syscall::kSendmsg) {
      push(t + kStep + kStep / 2, pid, std::string(events::kSysSendmsgProbe),
           tuple_args(local, remote));
    }
    push(t + 2 * kStep, pid, events::exit(sc), {{"ret", len}});
    return probe;
  }

  void emit_receive_enter(std::uint64_t t, Pid pid, Syscall sc) {
    push(t, pid, events::enter(sc),
         {{"fd", std::to_string(3 + rng_.uniform(0, 60))}, {"len", "65536"}});
  }

  // tcp_rcv_space_adjust reports the receiving socket's own view.
  std::size_t emit_receive_data(std::uint64_t t, Pid pid, Syscall sc,
                                const Endpoint& local, const Endpoint& remote) {
    std::size_t rcv = push(t, pid, std::string(events::kTcpRcvSpaceAdjust),
                           tuple_args(local, remote));
    if (topology_.duplicate_receive) {
      push(t + kStep / 2, pid, std::string(events::kTcpRcvSpaceAdjust),
           tuple_args(local, remote));
    }
    push(t + kStep, pid, events::exit(sc),
         {{"ret", std::to_string(64 + rng_.uniform(0, 4000))}});
    return rcv;
  }

  std::size_t add_node(StateKind kind, Pid owner, Pid peer,
                       std::optional<std::size_t> parent) {
    TruthNode node;
    node.kind = kind;
    node.owner_pid = owner;
    node.peer_pid = peer;
    node.comm = comms_[owner];
    node.parent = parent;
    current_->nodes.push_back(std::move(node));
    return current_->nodes.size() - 1;
  }

  // Poisson user events strictly inside the span of `node`.
  void emit_span_user_events(std::size_t service, std::size_t node, Pid owner,
                             std::uint64_t start, std::uint64_t end) {
    const ServiceSpec& spec = topology_.services[service];
    for (const auto& event : user_events_) {
      double rate = 0.0;
      if (auto it = spec.user_event_rates.find(event); it != spec.user_event_rates.end()) {
        rate = it->second;
      } else if (auto jt = topology_.user_event_rates.find(event);
                 jt != topology_.user_event_rates.end()) {
        rate = jt->second;
      }
      std::uint64_t count = rng_.poisson(rate);
      current_->nodes[node].tallies[event] = count;
      for (std::uint64_t i = 0; i < count; ++i) {
        push(rng_.uniform(start + 1, end - 1), owner, event, user_event_args(event, owner));
      }
    }
  }

  std::vector<std::pair<std::string, std::string>> user_event_args(
      const std::string& event, Pid pid) {
    if (event == events::kPageFaultUser) {
      char addr[32];
      std::snprintf(addr, sizeof(addr), "0x%llx",
                    static_cast<unsigned long long>(0x7f0000000000ULL + rng_.uniform(0, 1u << 30)));
      return {{"address", addr}, {"error_code", "0x6"}};
    }
    if (event == events::kMigrateTask) {
      std::string from = std::to_string(rng_.uniform(0, cpus_ - 1));
      std::string to = std::to_string(rng_.uniform(0, cpus_ - 1));
      return {{"comm", comms_[pid]}, {"pid", std::to_string(pid)}, {"prio", "120"},
              {"orig_cpu", from}, {"dest_cpu", to}};
    }
    return {};
  }

  // Services one request: `caller` sent it from `caller_ep`.
  void handle(const CallPlan& plan, Pid caller, const Endpoint& caller_ep,
              std::optional<std::size_t> caller_node) {
    const ServiceSpec& spec = topology_.services[plan.service];
    Pid worker = pick_worker(plan);
    std::uint64_t t = plan.begin;

    auto recv_sc = static_cast<Syscall>(4 + rng_.uniform(0, 3));
    emit_receive_enter(t, worker, recv_sc);
    std::size_t start = emit_receive_data(t + kStep, worker, recv_sc, spec.listen, caller_ep);
    std::size_t node = add_node(StateKind::kNetwork, worker, caller, caller_node);
    pending_.push_back({trace_index(), node, start, 0});
    std::size_t pending_net = pending_.size() - 1;

    Pid actor = worker;
    std::size_t actor_node = node;
    std::optional<std::size_t> fork_pending;
    std::uint64_t fork_start = 0;
    std::uint64_t cursor = t + 2 * kStep;
    bool forks = spec.worker == WorkerModel::kForkPerRequest;
    if (forks) {
      cursor += kStep;
      std::size_t& pin = next_fork_pin_[plan.service];
      actor = pin < spec.pinned_fork_pids.size() ? spec.pinned_fork_pids[pin++] : fresh_pid();
      comms_[actor] = comm_of(plan.service);
      std::size_t fork_event =
          push(cursor, worker, std::string(events::kProcessFork),
               {{"comm", comms_[worker]},
                {"pid", std::to_string(worker)},
                {"child_comm", comms_[actor]},
                {"child_pid", std::to_string(actor)}});
      actor_node = add_node(StateKind::kFork, actor, worker, node);
      fork_edges_.emplace_back(worker, actor);
      pending_.push_back({trace_index(), actor_node, fork_event, 0});
      fork_pending = pending_.size() - 1;
      fork_start = cursor;
    }

    for (std::size_t i = 0; i < plan.children.size(); ++i) {
      cursor += plan.segments[i];
      const CallPlan& child = plan.children[i];
      const Endpoint& callee = topology_.services[child.service].listen;
      Endpoint local = connection(actor, child, spec.listen.ip);
      emit_send(cursor, actor, local, callee);
      auto wait_sc = static_cast<Syscall>(4 + rng_.uniform(0, 3));
      emit_receive_enter(cursor + 3 * kStep, actor, wait_sc);
      handle(child, actor, local, actor_node);
      // The callee's response probe is at child.end - kStep.
      emit_receive_data(child.end + kStep, actor, wait_sc, local, callee);
      cursor = child.end + 2 * kStep;
    }
    cursor += plan.segments.back();

    if (forks) {
      cursor += kStep;
      std::size_t exit_event = push(cursor, actor, std::string(events::kProcessExit),
                                    {{"comm", comms_[actor]},
                                     {"pid", std::to_string(actor)},
                                     {"prio", "120"}});
      pending_[*fork_pending].end_event = exit_event;
      emit_span_user_events(plan.service, actor_node, actor, fork_start, cursor);
    }

    std::size_t response = emit_send(cursor + kStep, worker, spec.listen, caller_ep);
    pending_[pending_net].end_event = response;
    emit_span_user_events(plan.service, node, worker, t + kStep, cursor + 2 * kStep);
  }

  // The caller's local endpoint for a call. With keepalive, a caller thread
  // keeps one connection per callee service and reuses it once idle.
  Endpoint connection(Pid caller, const CallPlan& child, const std::string& ip) {
    if (topology_.keepalive) {
      auto& pool = keepalive_[{caller, child.service}];
      for (auto& [port, busy_until] : pool) {
        if (busy_until < child.begin) {
          busy_until = child.end;
          return {ip, port};
        }
      }
      std::uint16_t port = take_port(ip);
      pool.emplace_back(port, child.end);
      return {ip, port};
    }
    return {ip, take_port(ip)};
  }

  std::size_t trace_index() const { return traces_.size(); }

  void emit_idle_user_events() {
    if (user_events_.empty()) return;
    std::uint64_t after = base_ns_;
    for (const auto& e : events_) after = std::max(after, e.timestamp_ns);
    after += 10 * kStep;
    for (std::size_t s = 0; s < workers_.size(); ++s) {
      for (const auto& w : workers_[s]) {
        for (const auto& event : user_events_) {
          std::uint64_t count = rng_.poisson(topology_.idle_user_event_rate);
          idle_counts_[event] += count;
          for (std::uint64_t i = 0; i < count; ++i) {
            push(after + rng_.uniform(0, 100 * kStep), w.pid, event,
                 user_event_args(event, w.pid));
          }
        }
      }
    }
  }

  Simulation finish(std::size_t requests) {
    // Global order by (planned time, emission order), then strictly
    // increasing timestamps at least 2 ns apart.
    std::vector<std::size_t> order(events_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [this](std::size_t a, std::size_t b) {
      return events_[a].timestamp_ns < events_[b].timestamp_ns;
    });
    std::uint64_t previous = 0;
    bool first = true;
    for (std::size_t i : order) {
      auto& ts = events_[i].timestamp_ns;
      if (!first) ts = std::max(ts, previous + 2);
      previous = ts;
      first = false;
    }

    Simulation sim;
    for (const auto& p : pending_) {
      auto& node = traces_[p.trace].nodes[p.node];
      node.start_ns = events_[p.start_event].timestamp_ns;
      node.end_ns = events_[p.end_event].timestamp_ns;
    }
    sim.streams.resize(cpus_);
    for (std::size_t i : order) {
      auto& stream = sim.streams[events_[i].cpu];
      events_[i].seq = stream.size();
      stream.push_back(std::move(events_[i]));
    }

    GroundTruth& truth = sim.truth;
    truth.traces = std::move(traces_);
    truth.external_arrivals = requests;
    truth.fork_edges = std::move(fork_edges_);
    truth.user_events = user_events_;
    truth.gateways = {topology_.gateway_service().listen};
    for (const auto& event : user_events_) {
      std::uint64_t in_spans = 0;
      for (const auto& trace : truth.traces) {
        for (const auto& node : trace.nodes) {
          auto it = node.tallies.find(event);
          if (it != node.tallies.end()) in_spans += it->second;
        }
      }
      truth.unattributed[event] = idle_counts_[event];
      truth.event_totals[event] = in_spans + idle_counts_[event];
    }
    return sim;
  }

  struct PendingSpan {
    std::size_t trace;
    std::size_t node;
    std::size_t start_event;
    std::size_t end_event;
  };

  const TopologySpec& topology_;
  std::size_t cpus_;
  SplitRng rng_;
  std::vector<std::string> user_events_;
  std::vector<std::vector<Worker>> workers_;
  std::set<Pid> pinned_;
  std::vector<std::size_t> next_fork_pin_;
  std::map<std::string, std::uint16_t> next_port_;
  std::map<std::pair<Pid, std::size_t>,
           std::vector<std::pair<std::uint16_t, std::uint64_t>>>
      keepalive_;
  std::unordered_map<Pid, std::string> comms_;
  Pid next_pid_ = 1000;
  std::uint64_t base_ns_ = 0;
  std::vector<TraceRecord> events_;
  std::vector<PendingSpan> pending_;
  std::vector<TruthTrace> traces_;
  TruthTrace* current_ = nullptr;
  std::vector<std::pair<Pid, Pid>> fork_edges_;
  std::map<std::string, std::uint64_t> idle_counts_;
};

}  // namespace detail

inline Simulation simulate(const TopologySpec& topology, std::size_t request_count,
                           std::size_t cpus, std::uint64_t seed) {
  if (request_count < 1) throw std::invalid_argument("request_count must be >= 1");
  if (cpus < 1) throw std::invalid_argument("cpus must be >= 1");
  topology.validate();
  detail::Simulator sim(topology, cpus, seed);
  return sim.run(request_count);
}

// A random acyclic topology: 1-10 services, each calling up to four
// services with a higher index, mixed worker models.
inline TopologySpec random_topology(std::uint64_t seed, std::size_t max_services = 10,
                                    std::size_t max_fanout = 4) {
  detail::SplitRng rng(seed * 0x9e3779b97f4a7c15ULL + 17);
  TopologySpec topo;
  std::size_t n = static_cast<std::size_t>(rng.uniform(1, max_services));
  for (std::size_t i = 0; i < n; ++i) {
    ServiceSpec s;
    s.name = i == 0 ? "frontend" : "svc" + std::to_string(i);
    s.listen = {"10.1." + std::to_string(i / 200) + "." + std::to_string(i % 200 + 1),
                static_cast<std::uint16_t>(i == 0 ? 8080 : 9000 + rng.uniform(0, 999))};
    s.worker = rng.chance(0.4) ? WorkerModel::kForkPerRequest : WorkerModel::kReuse;
    s.service_time_lo_ns = rng.uniform(5'000, 20'000);
    s.service_time_hi_ns = s.service_time_lo_ns + rng.uniform(0, 60'000);
    std::size_t later = n - 1 - i;
    std::size_t fanout = static_cast<std::size_t>(rng.uniform(0, std::min(max_fanout, later)));
    std::vector<std::size_t> candidates;
    for (std::size_t j = i + 1; j < n; ++j) candidates.push_back(j);
    for (std::size_t k = 0; k < fanout; ++k) {
      std::size_t pick = static_cast<std::size_t>(rng.uniform(k, candidates.size() - 1));
      std::swap(candidates[k], candidates[pick]);
      s.calls.push_back("svc" + std::to_string(candidates[k]));
    }
    topo.services.push_back(std::move(s));
  }
  topo.gateway = "frontend";
  topo.user_event_rates[std::string(events::kPageFaultUser)] =
      static_cast<double>(rng.uniform(0, 400)) / 100.0;
  topo.user_event_rates[std::string(events::kMigrateTask)] =
      static_cast<double>(rng.uniform(0, 200)) / 100.0;
  topo.keepalive = rng.chance(0.5);
  topo.duplicate_receive = rng.chance(0.3);
  topo.arrival_gap_lo_ns = rng.uniform(1'000, 20'000);
  topo.arrival_gap_hi_ns = topo.arrival_gap_lo_ns + rng.uniform(0, 200'000);
  return topo;
}

// ---------------------------------------------------------------------------
// Fault injection

enum class FaultKind : std::uint8_t {
  kNone,
  kDropUserEvents,
  kDropStructural,
  kTruncate,
  kOrphanProbes,
};

struct FaultSpec {
  FaultKind kind = FaultKind::kNone;
  double probability = 0.0;    // drop / orphan modes
  std::uint64_t at_ns = 0;     // truncate
};

struct FaultResult {
  std::vector<std::vector<TraceRecord>> streams;
  // Removed records, or inserted ones for kOrphanProbes.
  std::vector<TraceRecord> manifest;
};

inline std::optional<FaultKind> parse_fault_kind(std::string_view name) {
  if (name == "none") return FaultKind::kNone;
  if (name == "drop-user-events") return FaultKind::kDropUserEvents;
  if (name == "drop-structural") return FaultKind::kDropStructural;
  if (name == "truncate") return FaultKind::kTruncate;
  if (name == "orphan-probes") return FaultKind::kOrphanProbes;
  return std::nullopt;
}

inline FaultResult inject_faults(std::vector<std::vector<TraceRecord>> streams,
                                 const FaultSpec& fault, std::uint64_t seed) {
  if (fault.probability < 0.0 || fault.probability > 1.0) {
    throw std::invalid_argument("fault probability must be within [0, 1]");
  }
  FaultResult result;
  detail::SplitRng rng(seed ^ 0x5eedfa17ULL);
  static const EventCatalog catalog;

  auto renumber = [](std::vector<TraceRecord>& stream) {
    for (std::size_t i = 0; i < stream.size(); ++i) stream[i].seq = i;
  };

  if (fault.kind == FaultKind::kOrphanProbes) {
    // Re-emit chosen send probes right after their syscall exit, where no
    // syscall is open on the thread.
    struct Pos {
      std::size_t stream;
      std::size_t index;
    };
    std::vector<Pos> order;
    for (std::size_t s = 0; s < streams.size(); ++s) {
      for (std::size_t i = 0; i < streams[s].size(); ++i) order.push_back({s, i});
    }
    std::stable_sort(order.begin(), order.end(), [&](const Pos& a, const Pos& b) {
      return record_order_less(streams[a.stream][a.index], streams[b.stream][b.index]);
    });
    std::unordered_map<Pid, TraceRecord> pending;
    std::vector<std::vector<std::pair<std::size_t, TraceRecord>>> inserts(streams.size());
    for (const auto& pos : order) {
      const TraceRecord& r = streams[pos.stream][pos.index];
      auto cls = catalog.classify(r.event);
      if (cls.kind == EventKind::kTcpSend && pending.count(r.pid) == 0 &&
          rng.chance(fault.probability)) {
        pending.emplace(r.pid, r);
      } else if (cls.kind == EventKind::kSyscallExit) {
        auto it = pending.find(r.pid);
        if (it == pending.end()) continue;
        TraceRecord copy = it->second;
        copy.timestamp_ns = r.timestamp_ns + 1;
        copy.cpu = r.cpu;
        result.manifest.push_back(copy);
        inserts[pos.stream].emplace_back(pos.index + 1, std::move(copy));
        pending.erase(it);
      }
    }
    for (std::size_t s = 0; s < streams.size(); ++s) {
      auto& ins = inserts[s];
      for (auto it = ins.rbegin(); it != ins.rend(); ++it) {
        streams[s].insert(streams[s].begin() + static_cast<std::ptrdiff_t>(it->first),
                          std::move(it->second));
      }
      renumber(streams[s]);
    }
    result.streams = std::move(streams);
    return result;
  }

  for (auto& stream : streams) {
    std::vector<TraceRecord> kept;
    kept.reserve(stream.size());
    for (auto& r : stream) {
      bool drop = false;
      switch (fault.kind) {
        case FaultKind::kNone:
        case FaultKind::kOrphanProbes:
          break;
        case FaultKind::kDropUserEvents:
          drop = !catalog.is_structural(r.event) && rng.chance(fault.probability);
          break;
        case FaultKind::kDropStructural:
          drop = catalog.is_structural(r.event) && rng.chance(fault.probability);
          break;
        case FaultKind::kTruncate:
          drop = r.timestamp_ns > fault.at_ns;
          break;
      }
      if (drop) {
        result.manifest.push_back(std::move(r));
      } else {
        kept.push_back(std::move(r));
      }
    }
    renumber(kept);
    result.streams.push_back(std::move(kept));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Comparison against ground truth

enum class DiffKind : std::uint8_t {
  kTraceCount,
  kMissingNode,
  kExtraNode,
  kMissingEdge,
  kExtraEdge,
  kTally,
  kUnattributed,
};

struct DiffEntry {
  DiffKind kind;
  TraceId trace_id = 0;
  std::string detail;
  std::int64_t magnitude = 0;
};

struct DiffReport {
  std::vector<DiffEntry> entries;

  bool empty() const { return entries.empty(); }

  bool structure_empty() const {
    return std::none_of(entries.begin(), entries.end(), [](const DiffEntry& e) {
      return e.kind != DiffKind::kTally && e.kind != DiffKind::kUnattributed;
    });
  }

  std::size_t count(DiffKind kind) const {
    return static_cast<std::size_t>(std::count_if(
        entries.begin(), entries.end(), [kind](const DiffEntry& e) { return e.kind == kind; }));
  }

  std::string to_text() const {
    static const char* names[] = {"trace-count", "missing-node", "extra-node",
                                  "missing-edge", "extra-edge", "tally", "unattributed"};
    std::ostringstream out;
    for (const auto& e : entries) {
      out << names[static_cast<int>(e.kind)] << "\ttrace=" << e.trace_id << '\t' << e.detail;
      if (e.magnitude != 0) out << "\tdelta=" << e.magnitude;
      out << '\n';
    }
    return out.str();
  }
};

namespace detail {

inline std::string signature(StateKind kind, Pid owner, Pid peer, std::uint64_t start,
                             std::uint64_t end) {
  return std::string(kind_name(kind)) + " owner=" + std::to_string(owner) +
         " peer=" + std::to_string(peer) + " [" + std::to_string(start) + "," +
         std::to_string(end) + "]";
}

}  // namespace detail

// Nodes are matched by (kind, owner, peer, start, end); edges by the
// signatures of their endpoints. Tallies are compared on matched nodes and
// the unattributed counters globally.
inline DiffReport compare(const std::vector<RequestDag>& dags,
                          const std::map<std::string, std::uint64_t>& unattributed,
                          const GroundTruth& truth) {
  DiffReport report;
  if (dags.size() != truth.traces.size()) {
    report.entries.push_back({DiffKind::kTraceCount, 0,
                              "dags=" + std::to_string(dags.size()) +
                                  " truth=" + std::to_string(truth.traces.size()),
                              static_cast<std::int64_t>(dags.size()) -
                                  static_cast<std::int64_t>(truth.traces.size())});
  }
  std::map<TraceId, const RequestDag*> by_trace;
  for (const auto& d : dags) by_trace[d.trace_id] = &d;

  for (const auto& trace : truth.traces) {
    using Tallies = std::map<std::string, std::uint64_t>;
    std::map<std::string, const Tallies*> expected;
    std::set<std::string> expected_edges;
    std::vector<std::string> sigs;
    for (const auto& n : trace.nodes) {
      sigs.push_back(detail::signature(n.kind, n.owner_pid, n.peer_pid, n.start_ns, n.end_ns));
      expected[sigs.back()] = &n.tallies;
    }
    for (std::size_t i = 0; i < trace.nodes.size(); ++i) {
      if (auto p = trace.nodes[i].parent) {
        expected_edges.insert(sigs[*p] + " -> " + sigs[i] + " (" +
                              (trace.nodes[i].kind == StateKind::kFork ? "fork" : "tcp") + ")");
      }
    }

    std::map<std::string, const Tallies*> actual;
    std::set<std::string> actual_edges;
    auto it = by_trace.find(trace.trace_id);
    if (it != by_trace.end()) {
      const RequestDag& dag = *it->second;
      std::map<std::string, std::string> sig_of;
      auto add = [&](const DagNode& n) {
        std::string sig =
            detail::signature(n.kind, n.owner_pid, n.identity.peer, n.start_ns, n.end_ns);
        sig_of[n.state_id] = sig;
        actual[sig] = &n.tallies;
      };
      for (const auto& n : dag.nodes) add(n);
      for (const auto& n : dag.orphans) add(n);
      for (const auto& e : dag.edges) {
        actual_edges.insert(sig_of[e.parent] + " -> " + sig_of[e.child] + " (" +
                            std::string(cause_name(e.cause)) + ")");
      }
    }

    for (const auto& [sig, tallies] : expected) {
      auto a = actual.find(sig);
      if (a == actual.end()) {
        report.entries.push_back({DiffKind::kMissingNode, trace.trace_id, sig, 1});
        continue;
      }
      std::set<std::string> events;
      for (const auto& [e, c] : *tallies) events.insert(e);
      for (const auto& [e, c] : *a->second) events.insert(e);
      for (const auto& e : events) {
        auto get = [&e](const Tallies& t) {
          auto f = t.find(e);
          return f == t.end() ? std::uint64_t{0} : f->second;
        };
        std::int64_t delta = static_cast<std::int64_t>(get(*a->second)) -
                             static_cast<std::int64_t>(get(*tallies));
        if (delta != 0) {
          report.entries.push_back({DiffKind::kTally, trace.trace_id, sig + " " + e, delta});
        }
      }
    }
    for (const auto& [sig, tallies] : actual) {
      if (expected.count(sig) == 0) {
        report.entries.push_back({DiffKind::kExtraNode, trace.trace_id, sig, 1});
      }
    }
    for (const auto& e : expected_edges) {
      if (actual_edges.count(e) == 0) {
        report.entries.push_back({DiffKind::kMissingEdge, trace.trace_id, e, 1});
      }
    }
    for (const auto& e : actual_edges) {
      if (expected_edges.count(e) == 0) {
        report.entries.push_back({DiffKind::kExtraEdge, trace.trace_id, e, 1});
      }
    }
  }
  for (const auto& d : dags) {
    if (d.trace_id == 0 || d.trace_id > truth.traces.size()) {
      report.entries.push_back({DiffKind::kExtraNode, d.trace_id,
                                "trace not in ground truth",
                                static_cast<std::int64_t>(d.nodes.size())});
    }
  }

  std::set<std::string> events(truth.user_events.begin(), truth.user_events.end());
  for (const auto& [e, c] : unattributed) events.insert(e);
  for (const auto& e : events) {
    auto get = [&e](const std::map<std::string, std::uint64_t>& m) {
      auto f = m.find(e);
      return f == m.end() ? std::uint64_t{0} : f->second;
    };
    std::int64_t delta = static_cast<std::int64_t>(get(unattributed)) -
                         static_cast<std::int64_t>(get(truth.unattributed));
    if (delta != 0) report.entries.push_back({DiffKind::kUnattributed, 0, e, delta});
  }
  return report;
}

inline std::map<std::string, std::uint64_t> unattributed_map(const EnginePools& pools) {
  std::map<std::string, std::uint64_t> out;
  for (std::size_t i = 0; i < pools.user_events.size(); ++i) {
    out[pools.user_events[i]] = pools.unattributed[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON forms of topologies and ground truth

inline nlohmann::json topology_to_json(const TopologySpec& t) {
  using nlohmann::json;
  json services = json::array();
  for (const auto& s : t.services) {
    json js{{"name", s.name},
            {"listen", s.listen.to_string()},
            {"worker", s.worker == WorkerModel::kReuse ? "reuse" : "fork"},
            {"calls", s.calls},
            {"service_time_ns", {s.service_time_lo_ns, s.service_time_hi_ns}}};
    if (!s.pinned_pids.empty()) js["pids"] = s.pinned_pids;
    if (!s.pinned_fork_pids.empty()) js["fork_pids"] = s.pinned_fork_pids;
    if (!s.user_event_rates.empty()) js["user_event_rates"] = s.user_event_rates;
    services.push_back(std::move(js));
  }
  return json{{"services", services},
              {"gateway", t.gateway},
              {"user_event_rates", t.user_event_rates},
              {"idle_user_event_rate", t.idle_user_event_rate},
              {"client_ip", t.client_ip},
              {"arrival_gap_ns", {t.arrival_gap_lo_ns, t.arrival_gap_hi_ns}},
              {"keepalive", t.keepalive},
              {"duplicate_receive", t.duplicate_receive}};
}

inline TopologySpec topology_from_json(const nlohmann::json& j) {
  TopologySpec t;
  try {
    for (const auto& js : j.at("services")) {
      ServiceSpec s;
      s.name = js.at("name").get<std::string>();
      auto listen = parse_endpoint(js.at("listen").get<std::string>());
      if (!listen) throw InvalidTopology(s.name + ": bad listen endpoint");
      s.listen = *listen;
      std::string worker = js.value("worker", "reuse");
      if (worker == "fork") {
        s.worker = WorkerModel::kForkPerRequest;
      } else if (worker != "reuse") {
        throw InvalidTopology(s.name + ": worker must be 'reuse' or 'fork'");
      }
      s.calls = js.value("calls", std::vector<std::string>{});
      if (js.contains("service_time_ns")) {
        s.service_time_lo_ns = js["service_time_ns"].at(0).get<std::uint64_t>();
        s.service_time_hi_ns = js["service_time_ns"].at(1).get<std::uint64_t>();
      }
      s.pinned_pids = js.value("pids", std::vector<Pid>{});
      s.pinned_fork_pids = js.value("fork_pids", std::vector<Pid>{});
      s.user_event_rates = js.value("user_event_rates", std::map<std::string, double>{});
      t.services.push_back(std::move(s));
    }
    t.gateway = j.at("gateway").get<std::string>();
    t.user_event_rates = j.value("user_event_rates", std::map<std::string, double>{});
    t.idle_user_event_rate = j.value("idle_user_event_rate", t.idle_user_event_rate);
    t.client_ip = j.value("client_ip", t.client_ip);
    if (j.contains("arrival_gap_ns")) {
      t.arrival_gap_lo_ns = j["arrival_gap_ns"].at(0).get<std::uint64_t>();
      t.arrival_gap_hi_ns = j["arrival_gap_ns"].at(1).get<std::uint64_t>();
    }
    t.keepalive = j.value("keepalive", false);
    t.duplicate_receive = j.value("duplicate_receive", false);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidTopology(std::string("topology: ") + e.what());
  }
  t.validate();
  return t;
}

inline std::string truth_to_json(const GroundTruth& g) {
  using nlohmann::json;
  json traces = json::array();
  for (const auto& t : g.traces) {
    json nodes = json::array();
    for (std::size_t i = 0; i < t.nodes.size(); ++i) {
      const auto& n = t.nodes[i];
      nodes.push_back({{"index", i},
                       {"kind", kind_name(n.kind)},
                       {"owner_pid", n.owner_pid},
                       {"peer_pid", n.peer_pid},
                       {"comm", n.comm},
                       {"start_ns", n.start_ns},
                       {"end_ns", n.end_ns},
                       {"parent", n.parent ? json(*n.parent) : json(nullptr)},
                       {"tallies", n.tallies}});
    }
    traces.push_back({{"trace_id", t.trace_id}, {"nodes", nodes}});
  }
  json forks = json::array();
  for (const auto& [p, c] : g.fork_edges) forks.push_back({p, c});
  json gateways = json::array();
  for (const auto& e : g.gateways) gateways.push_back(e.to_string());
  json doc{{"schema_version", "1"},
           {"external_arrivals", g.external_arrivals},
           {"fork_edges", forks},
           {"gateways", gateways},
           {"user_events", g.user_events},
           {"event_totals", g.event_totals},
           {"unattributed", g.unattributed},
           {"traces", traces}};
  return doc.dump(2) + "\n";
}

inline GroundTruth truth_from_json(std::string_view text) {
  auto doc = nlohmann::json::parse(text);
  GroundTruth g;
  g.external_arrivals = doc.at("external_arrivals").get<std::uint64_t>();
  for (const auto& f : doc.at("fork_edges")) {
    g.fork_edges.emplace_back(f.at(0).get<Pid>(), f.at(1).get<Pid>());
  }
  for (const auto& e : doc.at("gateways")) {
    if (auto ep = parse_endpoint(e.get<std::string>())) g.gateways.push_back(*ep);
  }
  g.user_events = doc.at("user_events").get<std::vector<std::string>>();
  g.event_totals = doc.at("event_totals").get<std::map<std::string, std::uint64_t>>();
  g.unattributed = doc.at("unattributed").get<std::map<std::string, std::uint64_t>>();
  for (const auto& jt : doc.at("traces")) {
    TruthTrace t;
    t.trace_id = jt.at("trace_id").get<TraceId>();
    for (const auto& jn : jt.at("nodes")) {
      TruthNode n;
      n.kind = jn.at("kind") == "fork" ? StateKind::kFork : StateKind::kNetwork;
      n.owner_pid = jn.at("owner_pid").get<Pid>();
      n.peer_pid = jn.at("peer_pid").get<Pid>();
      n.comm = jn.at("comm").get<std::string>();
      n.start_ns = jn.at("start_ns").get<std::uint64_t>();
      n.end_ns = jn.at("end_ns").get<std::uint64_t>();
      if (!jn.at("parent").is_null()) n.parent = jn.at("parent").get<std::size_t>();
      n.tallies = jn.at("tallies").get<std::map<std::string, std::uint64_t>>();
      t.nodes.push_back(std::move(n));
    }
    g.traces.push_back(std::move(t));
  }
  return g;
}

}  // namespace kreqtrace
