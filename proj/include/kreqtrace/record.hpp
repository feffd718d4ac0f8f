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

#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kreqtrace/net.hpp"

namespace kreqtrace {

using Pid = std::uint32_t;

// Stands in for any sender that is not a traced application thread.
inline constexpr Pid kExternalPid = 0;

// One normalized kernel event.
struct TraceRecord {
  std::uint64_t timestamp_ns = 0;
  std::uint32_t cpu = 0;
  Pid pid = 0;
  std::string comm;
  std::string event;
  // Insertion-ordered; keys are unique.
  std::vector<std::pair<std::string, std::string>> args;
  // Position within the source stream.
  std::uint64_t seq = 0;

  bool operator==(const TraceRecord&) const = default;

  const std::string* arg(std::string_view key) const {
    for (const auto& [k, v] : args) {
      if (k == key) return &v;
    }
    return nullptr;
  }

  // Adds the key, or replaces its value if already present.
  void set_arg(std::string key, std::string value) {
    for (auto& [k, v] : args) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    args.emplace_back(std::move(key), std::move(value));
  }
};

// Reads an unsigned integer argument; nullopt if missing or not a number.
inline std::optional<std::uint64_t> arg_u64(const TraceRecord& record,
                                            std::string_view key) {
  const std::string* value = record.arg(key);
  if (value == nullptr || value->empty()) return std::nullopt;
  std::uint64_t out = 0;
  auto [ptr, ec] =
      std::from_chars(value->data(), value->data() + value->size(), out);
  if (ec != std::errc{} || ptr != value->data() + value->size()) {
    return std::nullopt;
  }
  return out;
}

// Extracts saddr/sport/daddr/dport. The tuple is returned in the orientation
// the probe reported it.
inline std::optional<Tcp4Tuple> tuple_from_args(const TraceRecord& record) {
  const std::string* saddr = record.arg("saddr");
  const std::string* daddr = record.arg("daddr");
  auto sport = arg_u64(record, "sport");
  auto dport = arg_u64(record, "dport");
  if (saddr == nullptr || daddr == nullptr || !sport || !dport ||
      *sport > 65535 || *dport > 65535) {
    return std::nullopt;
  }
  return Tcp4Tuple{{*saddr, static_cast<std::uint16_t>(*sport)},
                   {*daddr, static_cast<std::uint16_t>(*dport)}};
}

enum class Syscall : std::uint8_t {
  kSendto,
  kSendmsg,
  kWrite,
  kWritev,
  kRecvfrom,
  kRecvmsg,
  kRead,
  kReadv,
};

inline constexpr std::array<std::string_view, 8> kSyscallNames = {
    "sendto", "sendmsg", "write", "writev",
    "recvfrom", "recvmsg", "read", "readv"};

inline std::string_view syscall_name(Syscall s) {
  return kSyscallNames[static_cast<std::size_t>(s)];
}

inline bool is_send_syscall(Syscall s) { return s <= Syscall::kWritev; }
inline bool is_receive_syscall(Syscall s) { return s >= Syscall::kRecvfrom; }

namespace events {
inline constexpr std::string_view kSockSendmsgProbe = "kprobe_sock_sendmsg";
inline constexpr std::string_view kSysSendmsgProbe = "kprobe___sys_sendmsg";
inline constexpr std::string_view kTcpRcvSpaceAdjust = "tcp_rcv_space_adjust";
inline constexpr std::string_view kProcessFork = "sched_process_fork";
inline constexpr std::string_view kProcessExit = "sched_process_exit";
inline constexpr std::string_view kPageFaultUser = "page_fault_user";
inline constexpr std::string_view kMigrateTask = "sched_migrate_task";

inline std::string enter(Syscall s) {
  return "sys_enter_" + std::string(syscall_name(s));
}
inline std::string exit(Syscall s) {
  return "sys_exit_" + std::string(syscall_name(s));
}
}  // namespace events

enum class EventKind : std::uint8_t {
  kSyscallEnter,
  kSyscallExit,
  kTcpSend,
  kTcpReceive,
  kFork,
  kExit,
  kUser,
  kOther,
};

struct EventClass {
  EventKind kind = EventKind::kOther;
  Syscall syscall = Syscall::kSendto;  // enter/exit only
  std::size_t user_index = 0;          // user events only
};

// The events the reconstructor consumes, plus the analyst's extra events
// that get tallied per state. The two sets never intersect.
class EventCatalog {
 public:
  EventCatalog() : EventCatalog(std::vector<std::string>{}) {}

  explicit EventCatalog(std::vector<std::string> user_events) {
    std::sort(user_events.begin(), user_events.end());
    user_events.erase(std::unique(user_events.begin(), user_events.end()),
                      user_events.end());
    for (std::size_t s = 0; s < kSyscallNames.size(); ++s) {
      auto sc = static_cast<Syscall>(s);
      classes_.emplace(events::enter(sc),
                       EventClass{EventKind::kSyscallEnter, sc, 0});
      classes_.emplace(events::exit(sc),
                       EventClass{EventKind::kSyscallExit, sc, 0});
    }
    classes_.emplace(std::string(events::kSockSendmsgProbe),
                     EventClass{EventKind::kTcpSend});
    classes_.emplace(std::string(events::kSysSendmsgProbe),
                     EventClass{EventKind::kTcpSend});
    classes_.emplace(std::string(events::kTcpRcvSpaceAdjust),
                     EventClass{EventKind::kTcpReceive});
    classes_.emplace(std::string(events::kProcessFork),
                     EventClass{EventKind::kFork});
    classes_.emplace(std::string(events::kProcessExit),
                     EventClass{EventKind::kExit});
    for (std::size_t i = 0; i < user_events.size(); ++i) {
      if (user_events[i].empty()) {
        throw std::invalid_argument("empty user event name");
      }
      if (classes_.count(user_events[i]) != 0) {
        throw std::invalid_argument("user event '" + user_events[i] +
                                    "' is a structural event");
      }
      classes_.emplace(user_events[i], EventClass{EventKind::kUser,
                                                  Syscall::kSendto, i});
    }
    user_events_ = std::move(user_events);
  }

  static const std::vector<std::string>& structural_events() {
    static const std::vector<std::string> names = [] {
      std::vector<std::string> out;
      for (std::size_t s = 0; s < kSyscallNames.size(); ++s) {
        out.push_back(events::enter(static_cast<Syscall>(s)));
        out.push_back(events::exit(static_cast<Syscall>(s)));
      }
      out.emplace_back(events::kSockSendmsgProbe);
      out.emplace_back(events::kSysSendmsgProbe);
      out.emplace_back(events::kTcpRcvSpaceAdjust);
      out.emplace_back(events::kProcessFork);
      out.emplace_back(events::kProcessExit);
      return out;
    }();
    return names;
  }

  // Sorted, deduplicated.
  const std::vector<std::string>& user_events() const { return user_events_; }

  EventClass classify(const std::string& event) const {
    auto it = classes_.find(event);
    return it == classes_.end() ? EventClass{} : it->second;
  }

  bool is_structural(const std::string& event) const {
    auto kind = classify(event).kind;
    return kind != EventKind::kUser && kind != EventKind::kOther;
  }

  bool is_user(const std::string& event) const {
    return classify(event).kind == EventKind::kUser;
  }

 private:
  std::unordered_map<std::string, EventClass> classes_;
  std::vector<std::string> user_events_;
};

}  // namespace kreqtrace
