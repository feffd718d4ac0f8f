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

#include <charconv>
#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace kreqtrace {

// An (ip, port) pair. The address is kept in its textual form; both IPv4 and
// bracket-free IPv6 literals are accepted.
struct Endpoint {
  std::string ip;
  std::uint16_t port = 0;

  auto operator<=>(const Endpoint&) const = default;
  bool operator==(const Endpoint&) const = default;

  std::string to_string() const {
    if (ip.find(':') != std::string::npos) {
      return "[" + ip + "]:" + std::to_string(port);
    }
    return ip + ":" + std::to_string(port);
  }
};

// Parses "10.0.0.1:8080" or "[fe80::1]:8080".
inline std::optional<Endpoint> parse_endpoint(std::string_view text) {
  std::string_view host;
  std::string_view port_text;
  if (!text.empty() && text.front() == '[') {
    auto close = text.find(']');
    if (close == std::string_view::npos || close + 1 >= text.size() ||
        text[close + 1] != ':') {
      return std::nullopt;
    }
    host = text.substr(1, close - 1);
    port_text = text.substr(close + 2);
  } else {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos) return std::nullopt;
    host = text.substr(0, colon);
    port_text = text.substr(colon + 1);
    if (host.find(':') != std::string_view::npos) return std::nullopt;
  }
  if (host.empty() || port_text.empty()) return std::nullopt;
  unsigned port = 0;
  auto [ptr, ec] = std::from_chars(port_text.data(),
                                   port_text.data() + port_text.size(), port);
  if (ec != std::errc{} || ptr != port_text.data() + port_text.size() ||
      port > 65535) {
    return std::nullopt;
  }
  return Endpoint{std::string(host), static_cast<std::uint16_t>(port)};
}

// A TCP 4-tuple in the orientation it was observed in.
struct Tcp4Tuple {
  Endpoint source;
  Endpoint destination;

  auto operator<=>(const Tcp4Tuple&) const = default;
  bool operator==(const Tcp4Tuple&) const = default;

  Tcp4Tuple reversed() const { return {destination, source}; }

  std::string to_string() const {
    return source.to_string() + "->" + destination.to_string();
  }
};

// Direction-free connection identity: the endpoint pair in sorted order.
struct ConnectionKey {
  Endpoint low;
  Endpoint high;

  explicit ConnectionKey(const Tcp4Tuple& tuple) {
    if (tuple.destination < tuple.source) {
      low = tuple.destination;
      high = tuple.source;
    } else {
      low = tuple.source;
      high = tuple.destination;
    }
  }

  auto operator<=>(const ConnectionKey&) const = default;
  bool operator==(const ConnectionKey&) const = default;
};

struct ConnectionKeyHash {
  std::size_t operator()(const ConnectionKey& key) const noexcept {
    std::hash<std::string> h;
    std::size_t seed = h(key.low.ip);
    auto mix = [&seed](std::size_t v) {
      seed ^= v + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2);
    };
    mix(key.low.port);
    mix(h(key.high.ip));
    mix(key.high.port);
    return seed;
  }
};

}  // namespace kreqtrace
