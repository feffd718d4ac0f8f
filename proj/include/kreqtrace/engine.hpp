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

// Thread state model replay.
//
// Every traced thread owns a store of states. A network state spans one
// incoming TCP request, from the receive that delivered it to the send that
// answered it. A fork state spans a child thread's lifetime and carries the
// trace ids its parent was serving when it forked. Trace ids travel along
// REQUEST transmissions and forks; fresh ids are minted when an untraced
// client reaches a gateway endpoint.
//
// The engine consumes one globally ordered record stream and is
// single-threaded. finalize() closes what is still open and hands the
// pools over by value.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kreqtrace/net.hpp"
#include "kreqtrace/record.hpp"

namespace kreqtrace {

using TraceId = std::uint64_t;

enum class StateKind : std::uint8_t { kNetwork, kFork };
enum class TransmissionType : std::uint8_t { kUnknown, kRequest, kResponse };

inline constexpr std::uint8_t kOpenAtEnd = 1;
inline constexpr std::uint8_t kEndedByExit = 2;

// Network: (source thread, tuple, trace). Fork: (parent thread, trace) with
// an empty tuple.
struct StateKey {
  StateKind kind = StateKind::kNetwork;
  Pid peer = 0;
  Tcp4Tuple tuple;
  TraceId trace = 0;

  auto operator<=>(const StateKey&) const = default;
  bool operator==(const StateKey&) const = default;
};

struct ThreadState {
  StateKey key;
  Pid owner = 0;
  std::string comm;
  Endpoint source;  // requester endpoint, network states only
  std::uint64_t start_ns = 0;
  std::optional<std::uint64_t> end_ns;
  std::uint8_t flags = 0;
  // Indexed like EventCatalog::user_events().
  std::vector<std::uint64_t> tallies;
  // Index of the state whose thread caused this one; none for trace roots.
  std::optional<std::size_t> cause;

  bool active() const { return !end_ns.has_value(); }
  TraceId trace() const { return key.trace; }
};

struct Thread {
  Pid pid = 0;
  std::string comm;
  std::optional<Pid> parent;
  bool alive = true;
  std::optional<Syscall> in_syscall;
  // All states ever owned, in creation order (indices into the arena).
  std::vector<std::size_t> store;
  // Active states by key. A key can recur once its state has ended, e.g. a
  // second call within one trace over the same keep-alive connection.
  std::map<StateKey, std::size_t> by_key;
  // Non-ended states, creation order.
  std::vector<std::size_t> active;
  // Connections already sent on during the current syscall.
  std::vector<ConnectionKey> sent_this_syscall;
};

struct SocketRecord {
  ConnectionKey key;
  Pid sender_thread = kExternalPid;
  TransmissionType transmission_type = TransmissionType::kUnknown;
  Tcp4Tuple last_direction{};
  // Trace minted for the client request currently arriving on a gateway.
  std::optional<TraceId> external_trace{};
};

struct EngineCounters {
  std::uint64_t records = 0;
  std::uint64_t orphan_probe = 0;
  std::uint64_t receive_on_unknown_socket = 0;
  std::uint64_t duplicate_receive = 0;
  std::uint64_t duplicate_send_probe = 0;
  std::uint64_t multi_match_response = 0;
  std::uint64_t nested_syscall = 0;
  std::uint64_t exit_unknown_pid = 0;
  std::uint64_t missing_tuple = 0;
  std::uint64_t non_tcp = 0;
  std::uint64_t idle_pid = 0;
  std::uint64_t ignored_events = 0;

  std::map<std::string, std::uint64_t> as_map() const {
    return {{"duplicate_receive", duplicate_receive},
            {"duplicate_send_probe", duplicate_send_probe},
            {"exit_unknown_pid", exit_unknown_pid},
            {"idle_pid", idle_pid},
            {"ignored_events", ignored_events},
            {"missing_tuple", missing_tuple},
            {"multi_match_response", multi_match_response},
            {"nested_syscall", nested_syscall},
            {"non_tcp", non_tcp},
            {"orphan_probe", orphan_probe},
            {"receive_on_unknown_socket", receive_on_unknown_socket},
            {"records", records}};
  }
};

struct EnginePools {
  std::unordered_map<Pid, Thread> thread_pool;
  std::unordered_map<Pid, Thread> terminated_pool;
  std::unordered_map<ConnectionKey, SocketRecord, ConnectionKeyHash> socket_pool;
  TraceId next_trace_id = 1;
  // Every state ever created; threads refer to these by index.
  std::vector<ThreadState> states;
  std::vector<std::string> user_events;
  std::vector<std::uint64_t> unattributed;  // per user event
  EngineCounters counters;

  TraceId minted() const { return next_trace_id - 1; }

  const Thread* find_thread(Pid pid) const {
    auto it = thread_pool.find(pid);
    if (it != thread_pool.end()) return &it->second;
    it = terminated_pool.find(pid);
    return it == terminated_pool.end() ? nullptr : &it->second;
  }
};

struct EngineConfig {
  std::vector<Endpoint> gateway_endpoints;
  std::vector<std::string> user_events;
};

class Engine {
 public:
  explicit Engine(const EngineConfig& config)
      : catalog_(config.user_events),
        gateways_(config.gateway_endpoints.begin(),
                  config.gateway_endpoints.end()) {
    pools_.user_events = catalog_.user_events();
    pools_.unattributed.assign(pools_.user_events.size(), 0);
  }

  const EventCatalog& catalog() const { return catalog_; }
  const EnginePools& pools() const { return pools_; }
  std::optional<std::uint64_t> last_timestamp() const { return last_ts_; }

  void consume(const TraceRecord& record) {
    ++pools_.counters.records;
    last_ts_ = record.timestamp_ns;
    if (record.pid == kExternalPid) {
      ++pools_.counters.idle_pid;
      return;
    }
    auto cls = catalog_.classify(record.event);
    switch (cls.kind) {
      case EventKind::kSyscallEnter:
      case EventKind::kSyscallExit:
        handle_syscall_boundary(record, cls);
        break;
      case EventKind::kTcpSend:
        handle_tcp_send(record);
        break;
      case EventKind::kTcpReceive:
        handle_tcp_receive(record);
        break;
      case EventKind::kFork:
        handle_fork(record);
        break;
      case EventKind::kExit:
        handle_exit(record);
        break;
      case EventKind::kUser:
        attribute_user_event(record, cls.user_index);
        break;
      case EventKind::kOther:
        ++pools_.counters.ignored_events;
        break;
    }
  }

  void handle_syscall_boundary(const TraceRecord& record) {
    handle_syscall_boundary(record, catalog_.classify(record.event));
  }

  void handle_syscall_boundary(const TraceRecord& record, EventClass cls) {
    Thread& thread = thread_for(record);
    if (cls.kind == EventKind::kSyscallEnter) {
      if (thread.in_syscall) ++pools_.counters.nested_syscall;
      thread.in_syscall = cls.syscall;
    } else if (cls.kind == EventKind::kSyscallExit) {
      thread.in_syscall.reset();
    }
    thread.sent_this_syscall.clear();
  }

  // Send side: the socket now carries a REQUEST from this thread, unless the
  // destination is the requester of one of this thread's active network
  // states, in which case it is the RESPONSE that ends that state.
  void handle_tcp_send(const TraceRecord& record) {
    Thread& thread = thread_for(record);
    if (!thread.in_syscall || !is_send_syscall(*thread.in_syscall)) {
      ++pools_.counters.orphan_probe;
      return;
    }
    auto tuple = tcp_tuple(record);
    if (!tuple) return;
    ConnectionKey key(*tuple);
    // sock_sendmsg and __sys_sendmsg can both fire for one sendmsg call.
    if (std::find(thread.sent_this_syscall.begin(),
                  thread.sent_this_syscall.end(),
                  key) != thread.sent_this_syscall.end()) {
      ++pools_.counters.duplicate_send_probe;
      return;
    }
    thread.sent_this_syscall.push_back(key);

    auto [it, inserted] =
        pools_.socket_pool.try_emplace(key, SocketRecord{.key = key});
    SocketRecord& sock = it->second;
    sock.sender_thread = thread.pid;
    sock.transmission_type = TransmissionType::kRequest;
    sock.last_direction = *tuple;
    sock.external_trace.reset();

    bool matched = false;
    for (std::size_t i = 0; i < thread.active.size(); ++i) {
      ThreadState& state = pools_.states[thread.active[i]];
      if (state.key.kind != StateKind::kNetwork ||
          state.source != tuple->destination) {
        continue;
      }
      if (matched) {
        ++pools_.counters.multi_match_response;
        break;
      }
      matched = true;
      sock.transmission_type = TransmissionType::kResponse;
      end_state(thread, i, record.timestamp_ns, 0);
      --i;
    }
  }

  // Receive side: propagate the sender's active traces onto this thread, or
  // mint a new trace when an untraced client reaches a gateway.
  void handle_tcp_receive(const TraceRecord& record) {
    Thread& thread = thread_for(record);
    if (!thread.in_syscall || !is_receive_syscall(*thread.in_syscall)) {
      ++pools_.counters.orphan_probe;
      return;
    }
    auto tuple = tcp_tuple(record);
    if (!tuple) return;
    ConnectionKey key(*tuple);
    auto it = pools_.socket_pool.find(key);

    if (auto gateway = gateway_side(*tuple)) {
      // Fresh client data: nothing was sent toward the gateway since the
      // last outbound transmission, so the sender is not a traced thread.
      bool fresh = it == pools_.socket_pool.end() ||
                   it->second.last_direction.destination != *gateway;
      if (fresh) {
        Endpoint client = tuple->source == *gateway ? tuple->destination
                                                    : tuple->source;
        Tcp4Tuple inbound{client, *gateway};
        TraceId trace = pools_.next_trace_id++;
        auto [pos, inserted] =
            pools_.socket_pool.try_emplace(key, SocketRecord{.key = key});
        SocketRecord& sock = pos->second;
        sock.sender_thread = kExternalPid;
        sock.transmission_type = TransmissionType::kRequest;
        sock.last_direction = inbound;
        sock.external_trace = trace;
        create_state(thread,
                     StateKey{StateKind::kNetwork, kExternalPid, inbound, trace},
                     client, record.timestamp_ns, std::nullopt);
        return;
      }
    }

    if (it == pools_.socket_pool.end()) {
      ++pools_.counters.receive_on_unknown_socket;
      return;
    }
    const SocketRecord& sock = it->second;
    if (sock.transmission_type != TransmissionType::kRequest) return;

    const Tcp4Tuple& inbound = sock.last_direction;
    if (sock.sender_thread == kExternalPid) {
      if (!sock.external_trace) return;
      StateKey state_key{StateKind::kNetwork, kExternalPid, inbound,
                         *sock.external_trace};
      if (thread.by_key.count(state_key) != 0) {
        ++pools_.counters.duplicate_receive;
        return;
      }
      create_state(thread, state_key, inbound.source, record.timestamp_ns,
                   std::nullopt);
      return;
    }

    auto sender_it = pools_.thread_pool.find(sock.sender_thread);
    if (sender_it == pools_.thread_pool.end()) return;
    const Thread& sender = sender_it->second;
    Pid sender_pid = sender.pid;
    // Copied up front: the sender may be this very thread.
    std::vector<std::pair<TraceId, std::size_t>> traces =
        active_traces_with_cause(sender);
    for (const auto& [trace, cause] : traces) {
      StateKey state_key{StateKind::kNetwork, sender_pid, inbound, trace};
      if (thread.by_key.count(state_key) != 0) {
        ++pools_.counters.duplicate_receive;
        continue;
      }
      create_state(thread, state_key, inbound.source, record.timestamp_ns,
                   cause);
    }
  }

  void handle_fork(const TraceRecord& record) {
    auto child_pid = arg_u64(record, "child_pid");
    if (!child_pid || *child_pid == kExternalPid) {
      ++pools_.counters.ignored_events;
      return;
    }
    Thread& parent = thread_for(record);
    Pid parent_pid = parent.pid;
    auto traces = active_traces_with_cause(parent);

    Pid cpid = static_cast<Pid>(*child_pid);
    const std::string* child_comm = record.arg("child_comm");
    Thread& child =
        spawn_thread(cpid, child_comm != nullptr ? *child_comm : record.comm);
    child.parent = parent_pid;
    for (const auto& [trace, cause] : traces) {
      StateKey key{StateKind::kFork, parent_pid, {}, trace};
      if (child.by_key.count(key) != 0) continue;
      create_state(child, key, {}, record.timestamp_ns, cause);
    }
  }

  void handle_exit(const TraceRecord& record) {
    Pid pid = record.pid;
    if (auto arg_pid = arg_u64(record, "pid")) pid = static_cast<Pid>(*arg_pid);
    auto it = pools_.thread_pool.find(pid);
    if (it == pools_.thread_pool.end()) {
      ++pools_.counters.exit_unknown_pid;
      return;
    }
    Thread& thread = it->second;
    while (!thread.active.empty()) {
      const ThreadState& state = pools_.states[thread.active.front()];
      std::uint8_t flag =
          state.key.kind == StateKind::kNetwork ? kEndedByExit : 0;
      end_state(thread, 0, record.timestamp_ns, flag);
    }
    thread.alive = false;
    thread.in_syscall.reset();
    pools_.terminated_pool.insert_or_assign(pid, std::move(thread));
    pools_.thread_pool.erase(it);
  }

  void attribute_user_event(const TraceRecord& record, std::size_t index) {
    Thread& thread = thread_for(record);
    if (thread.active.empty()) {
      ++pools_.unattributed[index];
      return;
    }
    for (std::size_t state : thread.active) {
      ++pools_.states[state].tallies[index];
    }
  }

  // Closes every still-active state at end_ns and flags it open_at_end.
  EnginePools finalize(std::uint64_t end_ns) {
    for (auto* pool : {&pools_.thread_pool, &pools_.terminated_pool}) {
      for (auto& [pid, thread] : *pool) {
        while (!thread.active.empty()) {
          end_state(thread, 0, std::max(end_ns, pools_.states[thread.active.front()].start_ns),
                    kOpenAtEnd);
        }
      }
    }
    EnginePools out = std::move(pools_);
    pools_ = EnginePools{};
    pools_.user_events = catalog_.user_events();
    pools_.unattributed.assign(pools_.user_events.size(), 0);
    last_ts_.reset();
    return out;
  }

  EnginePools finalize() { return finalize(last_ts_.value_or(0)); }

 private:
  Thread& spawn_thread(Pid pid, const std::string& comm) {
    auto [it, inserted] = pools_.thread_pool.try_emplace(pid);
    if (inserted) {
      it->second.pid = pid;
      it->second.comm = comm;
    }
    return it->second;
  }

  Thread& thread_for(const TraceRecord& record) {
    return spawn_thread(record.pid, record.comm);
  }

  std::optional<Tcp4Tuple> tcp_tuple(const TraceRecord& record) {
    if (const std::string* proto = record.arg("proto")) {
      if (*proto != "tcp" && *proto != "TCP" && *proto != "6" &&
          *proto != "IPPROTO_TCP") {
        ++pools_.counters.non_tcp;
        return std::nullopt;
      }
    }
    auto tuple = tuple_from_args(record);
    if (!tuple) ++pools_.counters.missing_tuple;
    return tuple;
  }

  std::optional<Endpoint> gateway_side(const Tcp4Tuple& tuple) const {
    if (gateways_.count(tuple.destination) != 0) return tuple.destination;
    if (gateways_.count(tuple.source) != 0) return tuple.source;
    return std::nullopt;
  }

  // Ascending trace ids paired with the first active state carrying each.
  std::vector<std::pair<TraceId, std::size_t>> active_traces_with_cause(
      const Thread& thread) const {
    std::vector<std::pair<TraceId, std::size_t>> out;
    for (std::size_t index : thread.active) {
      TraceId trace = pools_.states[index].trace();
      if (std::none_of(out.begin(), out.end(),
                       [trace](const auto& p) { return p.first == trace; })) {
        out.emplace_back(trace, index);
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  void create_state(Thread& thread, const StateKey& key, const Endpoint& source,
                    std::uint64_t ts, std::optional<std::size_t> cause) {
    ThreadState state;
    state.key = key;
    state.owner = thread.pid;
    state.comm = thread.comm;
    state.source = source;
    state.start_ns = ts;
    state.tallies.assign(pools_.user_events.size(), 0);
    state.cause = cause;
    std::size_t index = pools_.states.size();
    pools_.states.push_back(std::move(state));
    thread.store.push_back(index);
    thread.by_key.emplace(key, index);
    thread.active.push_back(index);
  }

  void end_state(Thread& thread, std::size_t active_pos, std::uint64_t ts,
                 std::uint8_t flags) {
    ThreadState& state = pools_.states[thread.active[active_pos]];
    state.end_ns = std::max(ts, state.start_ns);
    state.flags |= flags;
    thread.by_key.erase(state.key);
    thread.active.erase(thread.active.begin() +
                        static_cast<std::ptrdiff_t>(active_pos));
  }

  EventCatalog catalog_;
  std::set<Endpoint> gateways_;
  EnginePools pools_;
  std::optional<std::uint64_t> last_ts_;
};

// Replays an ordered stream and finalizes at its last timestamp.
inline EnginePools replay(const std::vector<TraceRecord>& records,
                          const EngineConfig& config) {
  Engine engine(config);
  for (const auto& record : records) engine.consume(record);
  return engine.finalize();
}

}  // namespace kreqtrace
