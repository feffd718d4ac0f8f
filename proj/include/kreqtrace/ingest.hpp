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

// Trace-log ingestion: line parsers for the two textual backends, the
// matching emitters, per-CPU stream merging and PID filtering.
//
// ftrace lines:
//   <comm>-<pid> [<cpu>] <flags> <sec>.<usec|nsec>: <event>: k=v k=v ...
// The flags column may be absent (trace-cmd report). Raw syscall
// tracepoints printed as `sys_sendto(fd: 3, ...)` and `sys_sendto -> 0x2a`
// are mapped onto sys_enter_sendto / sys_exit_sendto.
//
// bpftrace lines are tab separated, as printed by scripts/capture/kreq.bt:
//   <ts_ns>\t<cpu>\t<pid>\t<comm>\t<event>\tk=v\tk=v ...

#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kreqtrace/net.hpp"
#include "kreqtrace/record.hpp"

namespace kreqtrace {

enum class Backend { kFtrace, kBpftrace };

inline std::optional<Backend> parse_backend(std::string_view name) {
  if (name == "ftrace") return Backend::kFtrace;
  if (name == "bpftrace") return Backend::kBpftrace;
  return std::nullopt;
}

inline std::string_view backend_name(Backend b) {
  return b == Backend::kFtrace ? "ftrace" : "bpftrace";
}

struct IngestConfig {
  Backend backend = Backend::kFtrace;
  std::set<Pid> pid_allowlist;  // empty accepts every pid
  bool follow_forks = false;
  std::vector<Endpoint> gateway_endpoints;

  void validate() const {
    if (gateway_endpoints.empty()) {
      throw std::invalid_argument(
          "at least one gateway endpoint is required to mint trace ids");
    }
  }
};

class MalformedLine : public std::runtime_error {
 public:
  MalformedLine(std::size_t line_number, const std::string& what)
      : std::runtime_error("line " + std::to_string(line_number) + ": " +
                           what),
        line_number_(line_number) {}

  std::size_t line_number() const { return line_number_; }

 private:
  std::size_t line_number_;
};

class UnsortedStream : public std::runtime_error {
 public:
  UnsortedStream(std::size_t stream_index, std::size_t position)
      : std::runtime_error("stream " + std::to_string(stream_index) +
                           " is not time ordered at record " +
                           std::to_string(position)),
        stream_index_(stream_index),
        position_(position) {}

  std::size_t stream_index() const { return stream_index_; }
  std::size_t position() const { return position_; }

 private:
  std::size_t stream_index_;
  std::size_t position_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' ||
                        s.back() == '\r' || s.back() == '\n')) {
    s.remove_suffix(1);
  }
  return s;
}

inline bool all_digits(std::string_view s) {
  return !s.empty() &&
         std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

template <typename T>
bool to_uint(std::string_view s, T& out) {
  if (!all_digits(s)) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

// "<sec>.<frac>" with 6 or 9 fractional digits.
inline std::optional<std::uint64_t> parse_seconds(std::string_view s) {
  auto dot = s.find('.');
  if (dot == std::string_view::npos) return std::nullopt;
  std::uint64_t sec = 0;
  std::uint64_t frac = 0;
  auto frac_text = s.substr(dot + 1);
  if (!to_uint(s.substr(0, dot), sec) || !to_uint(frac_text, frac)) {
    return std::nullopt;
  }
  if (frac_text.size() == 6) {
    frac *= 1000;
  } else if (frac_text.size() != 9) {
    return std::nullopt;
  }
  if (sec > (UINT64_MAX - frac) / 1'000'000'000ULL) return std::nullopt;
  return sec * 1'000'000'000ULL + frac;
}

inline void add_arg(TraceRecord& record, std::string_view key,
                    std::string_view value) {
  if (record.arg(key) == nullptr) {
    record.args.emplace_back(std::string(key), std::string(value));
  }
}

// Space separated key=value tokens. A token without a key continues the
// previous value (e.g. a comm containing a space).
inline void parse_kv_tokens(std::string_view rest, TraceRecord& record) {
  std::string* previous = nullptr;
  std::unordered_set<std::string> seen;
  while (!rest.empty()) {
    auto start = rest.find_first_not_of(' ');
    if (start == std::string_view::npos) break;
    rest.remove_prefix(start);
    auto end = rest.find(' ');
    auto token = rest.substr(0, end);
    rest.remove_prefix(end == std::string_view::npos ? rest.size() : end);
    auto eq = token.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      if (previous != nullptr) {
        previous->push_back(' ');
        previous->append(token);
      }
      continue;
    }
    std::string key(token.substr(0, eq));
    if (!seen.insert(key).second) {
      previous = nullptr;
      continue;
    }
    record.args.emplace_back(std::move(key), std::string(token.substr(eq + 1)));
    previous = &record.args.back().second;
  }
}

// `sys_sendto(fd: 5, buff: 7f00, len: 12)` → sys_enter_sendto fd=5 ...
inline bool parse_raw_syscall(std::string_view rest, TraceRecord& record) {
  if (rest.substr(0, 4) != "sys_") return false;
  std::size_t i = 4;
  while (i < rest.size() &&
         (std::isalnum(static_cast<unsigned char>(rest[i])) || rest[i] == '_')) {
    ++i;
  }
  auto name = rest.substr(4, i - 4);
  if (name.empty()) return false;
  auto tail = rest.substr(i);
  if (!tail.empty() && tail.front() == '(') {
    auto close = tail.rfind(')');
    if (close == std::string_view::npos) return false;
    record.event = "sys_enter_" + std::string(name);
    auto body = tail.substr(1, close - 1);
    while (!body.empty()) {
      auto comma = body.find(',');
      auto item = trim(body.substr(0, comma));
      body.remove_prefix(comma == std::string_view::npos ? body.size()
                                                         : comma + 1);
      auto colon = item.find(':');
      if (colon == std::string_view::npos) continue;
      add_arg(record, trim(item.substr(0, colon)), trim(item.substr(colon + 1)));
    }
    return true;
  }
  if (tail.substr(0, 4) == " -> ") {
    record.event = "sys_exit_" + std::string(name);
    add_arg(record, "ret", trim(tail.substr(4)));
    return true;
  }
  return false;
}

inline bool is_ftrace_banner(std::string_view line) {
  if (line.empty() || line.front() == '#') return true;
  if (line.substr(0, 5) == "cpus=" || line.substr(0, 7) == "version") {
    return true;
  }
  if (line.substr(0, 4) == "CPU " &&
      line.find("is empty") != std::string_view::npos) {
    return true;
  }
  if (line.substr(0, 4) == "CPU:" &&
      line.find("LOST") != std::string_view::npos) {
    return true;
  }
  return false;
}

}  // namespace detail

// Returns nullopt for comment and banner lines.
inline std::optional<TraceRecord> parse_ftrace_line(std::string_view line,
                                                    std::size_t line_number = 0) {
  using detail::trim;
  line = trim(line);
  if (detail::is_ftrace_banner(line)) return std::nullopt;

  // Locate "[<cpu>]" preceded by whitespace.
  std::size_t open = 0;
  std::size_t close = 0;
  for (std::size_t pos = line.find(" ["); pos != std::string_view::npos;
       pos = line.find(" [", pos + 1)) {
    auto end = line.find(']', pos + 2);
    if (end != std::string_view::npos &&
        detail::all_digits(line.substr(pos + 2, end - pos - 2))) {
      open = pos + 1;
      close = end;
      break;
    }
  }
  if (close == 0) throw MalformedLine(line_number, "missing [cpu] column");

  TraceRecord record;
  auto task = trim(line.substr(0, open));
  // Optional "(  tgid)" column, present with the record-tgid option.
  if (!task.empty() && task.back() == ')') {
    auto paren = task.rfind('(');
    if (paren != std::string_view::npos) task = trim(task.substr(0, paren));
  }
  auto dash = task.rfind('-');
  if (dash == std::string_view::npos || dash == 0 ||
      !detail::to_uint(task.substr(dash + 1), record.pid)) {
    throw MalformedLine(line_number, "expected <comm>-<pid>");
  }
  record.comm = std::string(task.substr(0, dash));
  if (!detail::to_uint(line.substr(open + 1, close - open - 1), record.cpu)) {
    throw MalformedLine(line_number, "bad cpu");
  }

  auto rest = trim(line.substr(close + 1));
  std::optional<std::uint64_t> ts;
  for (int column = 0; column < 2 && !ts; ++column) {
    auto space = rest.find(' ');
    auto token = rest.substr(0, space);
    if (!token.empty() && token.back() == ':') {
      ts = detail::parse_seconds(token.substr(0, token.size() - 1));
    }
    if (!ts && column == 1) break;
    if (space == std::string_view::npos) {
      rest = {};
      break;
    }
    rest = trim(rest.substr(space + 1));
  }
  if (!ts) throw MalformedLine(line_number, "bad timestamp");
  record.timestamp_ns = *ts;

  if (rest.empty()) throw MalformedLine(line_number, "missing event");
  if (detail::parse_raw_syscall(rest, record)) return record;

  auto colon = rest.find(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw MalformedLine(line_number, "missing event name");
  }
  auto name = rest.substr(0, colon);
  if (name.find(' ') != std::string_view::npos) {
    throw MalformedLine(line_number, "bad event name");
  }
  record.event = std::string(name);
  detail::parse_kv_tokens(rest.substr(colon + 1), record);
  return record;
}

// Returns nullopt for blank lines and probe-attach banners.
inline std::optional<TraceRecord> parse_bpftrace_line(std::string_view line,
                                                      std::size_t line_number = 0) {
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) {
    line.remove_suffix(1);
  }
  auto trimmed = detail::trim(line);
  if (trimmed.empty() || trimmed.front() == '#' ||
      trimmed.substr(0, 10) == "Attaching ") {
    return std::nullopt;
  }

  std::vector<std::string_view> fields;
  while (true) {
    auto tab = line.find('\t');
    fields.push_back(line.substr(0, tab));
    if (tab == std::string_view::npos) break;
    line.remove_prefix(tab + 1);
  }
  if (fields.size() < 5) throw MalformedLine(line_number, "expected >= 5 fields");

  TraceRecord record;
  if (!detail::to_uint(fields[0], record.timestamp_ns)) {
    throw MalformedLine(line_number, "bad timestamp");
  }
  if (!detail::to_uint(fields[1], record.cpu)) {
    throw MalformedLine(line_number, "bad cpu");
  }
  if (!detail::to_uint(fields[2], record.pid)) {
    throw MalformedLine(line_number, "bad pid");
  }
  if (fields[4].empty()) throw MalformedLine(line_number, "empty event");
  record.comm = std::string(fields[3]);
  record.event = std::string(fields[4]);
  for (std::size_t i = 5; i < fields.size(); ++i) {
    auto eq = fields[i].find('=');
    if (eq == std::string_view::npos || eq == 0) {
      throw MalformedLine(line_number, "argument without key");
    }
    detail::add_arg(record, fields[i].substr(0, eq), fields[i].substr(eq + 1));
  }
  return record;
}

inline std::optional<TraceRecord> parse_line(Backend backend,
                                             std::string_view line,
                                             std::size_t line_number) {
  return backend == Backend::kFtrace ? parse_ftrace_line(line, line_number)
                                     : parse_bpftrace_line(line, line_number);
}

inline std::string format_ftrace_line(const TraceRecord& r) {
  std::string task = r.comm + "-" + std::to_string(r.pid);
  std::string out;
  if (task.size() < 16) out.append(16 - task.size(), ' ');
  out += task;
  char cpu[8];
  std::snprintf(cpu, sizeof(cpu), "%03u", r.cpu);
  char frac[16];
  std::snprintf(frac, sizeof(frac), "%09llu",
                static_cast<unsigned long long>(r.timestamp_ns % 1'000'000'000ULL));
  out += " [";
  out += cpu;
  out += "] .... ";
  out += std::to_string(r.timestamp_ns / 1'000'000'000ULL);
  out += '.';
  out += frac;
  out += ": ";
  out += r.event;
  out += ':';
  for (const auto& [k, v] : r.args) {
    out += ' ';
    out += k;
    out += '=';
    out += v;
  }
  return out;
}

inline std::string format_bpftrace_line(const TraceRecord& r) {
  std::string out = std::to_string(r.timestamp_ns);
  out += '\t';
  out += std::to_string(r.cpu);
  out += '\t';
  out += std::to_string(r.pid);
  out += '\t';
  out += r.comm;
  out += '\t';
  out += r.event;
  for (const auto& [k, v] : r.args) {
    out += '\t';
    out += k;
    out += '=';
    out += v;
  }
  return out;
}

inline std::string format_line(Backend backend, const TraceRecord& r) {
  return backend == Backend::kFtrace ? format_ftrace_line(r)
                                     : format_bpftrace_line(r);
}

struct ParseStats {
  std::size_t lines = 0;
  std::size_t records = 0;
  std::size_t skipped = 0;
  std::size_t malformed = 0;
  // Line numbers of the first few malformed lines.
  std::vector<std::size_t> malformed_lines;
};

// Parses a whole stream; seq is assigned in order of appearance. In strict
// mode the first MalformedLine propagates, otherwise it is counted.
inline std::vector<TraceRecord> parse_stream(std::istream& in, Backend backend,
                                             bool strict, ParseStats& stats) {
  std::vector<TraceRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    ++stats.lines;
    try {
      auto record = parse_line(backend, line, stats.lines);
      if (!record) {
        ++stats.skipped;
        continue;
      }
      record->seq = out.size();
      out.push_back(std::move(*record));
      ++stats.records;
    } catch (const MalformedLine&) {
      if (strict) throw;
      ++stats.malformed;
      if (stats.malformed_lines.size() < 16) {
        stats.malformed_lines.push_back(stats.lines);
      }
    }
  }
  return out;
}

inline std::vector<TraceRecord> read_trace_file(const std::filesystem::path& path,
                                                Backend backend, bool strict,
                                                ParseStats& stats) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_stream(in, backend, strict, stats);
}

// Orders by (timestamp, cpu, seq).
inline bool record_order_less(const TraceRecord& a, const TraceRecord& b) {
  if (a.timestamp_ns != b.timestamp_ns) return a.timestamp_ns < b.timestamp_ns;
  if (a.cpu != b.cpu) return a.cpu < b.cpu;
  return a.seq < b.seq;
}

// k-way merge of individually time-ordered streams. Ties are broken by
// (cpu, seq, stream index), which makes the result equal to a stable sort of
// the concatenated inputs by (timestamp, cpu, seq).
// k-way merge by (timestamp, cpu, seq, stream index). Each record is moved
// into `visit` in order and each stream is released once drained. Every
// stream is checked for order before the first visit.
template <typename Visit>
void merge_each(std::vector<std::vector<TraceRecord>> streams, Visit&& visit) {
  for (std::size_t s = 0; s < streams.size(); ++s) {
    const auto& stream = streams[s];
    for (std::size_t i = 1; i < stream.size(); ++i) {
      if (stream[i].timestamp_ns < stream[i - 1].timestamp_ns) {
        throw UnsortedStream(s, i);
      }
    }
  }

  struct Head {
    std::size_t stream;
    std::size_t index;
  };
  auto greater = [&streams](const Head& a, const Head& b) {
    const auto& ra = streams[a.stream][a.index];
    const auto& rb = streams[b.stream][b.index];
    if (record_order_less(ra, rb)) return false;
    if (record_order_less(rb, ra)) return true;
    return a.stream > b.stream;
  };
  std::priority_queue<Head, std::vector<Head>, decltype(greater)> heap(greater);
  for (std::size_t s = 0; s < streams.size(); ++s) {
    if (!streams[s].empty()) heap.push({s, 0});
  }
  while (!heap.empty()) {
    Head head = heap.top();
    heap.pop();
    visit(std::move(streams[head.stream][head.index]));
    if (head.index + 1 < streams[head.stream].size()) {
      heap.push({head.stream, head.index + 1});
    } else {
      std::vector<TraceRecord>().swap(streams[head.stream]);
    }
  }
}

inline std::vector<TraceRecord> merge_streams(
    std::vector<std::vector<TraceRecord>> streams) {
  std::size_t total = 0;
  for (const auto& stream : streams) total += stream.size();
  std::vector<TraceRecord> out;
  out.reserve(total);
  merge_each(std::move(streams), [&out](TraceRecord&& r) { out.push_back(std::move(r)); });
  return out;
}

// Keeps records of allow-listed pids; with follow_forks, children forked by
// an allowed thread join the allow-list from the fork record onward. Must see
// records in merged order.
class PidFilter {
 public:
  explicit PidFilter(const IngestConfig& config)
      : enabled_(!config.pid_allowlist.empty()),
        follow_forks_(config.follow_forks),
        allowed_(config.pid_allowlist.begin(), config.pid_allowlist.end()) {}

  bool keep(const TraceRecord& record) {
    if (!enabled_) return true;
    if (allowed_.count(record.pid) == 0) return false;
    if (follow_forks_ && record.event == events::kProcessFork) {
      if (auto child = arg_u64(record, "child_pid")) {
        allowed_.insert(static_cast<Pid>(*child));
      }
    }
    return true;
  }

 private:
  bool enabled_;
  bool follow_forks_;
  std::unordered_set<Pid> allowed_;
};

inline std::vector<TraceRecord> filter_records(std::vector<TraceRecord> records,
                                               const IngestConfig& config) {
  PidFilter filter(config);
  std::vector<TraceRecord> out;
  for (auto& record : records) {
    if (filter.keep(record)) out.push_back(std::move(record));
  }
  return out;
}

}  // namespace kreqtrace
