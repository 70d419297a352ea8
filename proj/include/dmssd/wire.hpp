#pragma once

#include <charconv>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dmssd/common.hpp"

namespace dmssd::wire {

// Line protocol, one message per line, decimal ASCII integers:
//   STATE <ver> <id> <tick> <x> <y>
//   GET MODEL [<ver>]
//   MODEL <ver> <len> <crc>      followed by <len> raw bytes

inline constexpr std::uint32_t kProtocolVersion = 1;

struct StateMessage {
  std::uint32_t version = kProtocolVersion;
  std::uint32_t robot_id = 0;
  std::uint64_t tick = 0;
  std::int32_t x = 0;
  std::int32_t y = 0;

  friend bool operator==(const StateMessage&, const StateMessage&) = default;
};

struct GetModel {
  std::optional<std::uint64_t> have_version;

  friend bool operator==(const GetModel&, const GetModel&) = default;
};

struct ModelHeader {
  std::uint64_t version = 1;
  std::uint64_t length = 0;
  std::uint32_t crc = 0;

  friend bool operator==(const ModelHeader&, const ModelHeader&) = default;
};

using Message = std::variant<StateMessage, GetModel, ModelHeader>;

inline std::string encode(const StateMessage& m) {
  return "STATE " + std::to_string(m.version) + ' ' + std::to_string(m.robot_id) + ' ' + std::to_string(m.tick) + ' ' +
         std::to_string(m.x) + ' ' + std::to_string(m.y) + '\n';
}

inline std::string encode(const GetModel& m) {
  return m.have_version ? "GET MODEL " + std::to_string(*m.have_version) + '\n' : std::string("GET MODEL\n");
}

inline std::string encode(const ModelHeader& m) {
  return "MODEL " + std::to_string(m.version) + ' ' + std::to_string(m.length) + ' ' + std::to_string(m.crc) + '\n';
}

inline std::string encode(const Message& m) {
  return std::visit([](const auto& v) { return encode(v); }, m);
}

namespace detail {

inline std::vector<std::string_view> split_spaces(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    if (line[i] == ' ') throw FormatError("wire: unexpected space");
    const std::size_t j = line.find(' ', i);
    const std::size_t end = j == std::string_view::npos ? line.size() : j;
    out.push_back(line.substr(i, end - i));
    if (j == std::string_view::npos) break;
    i = j + 1;
    if (i == line.size()) throw FormatError("wire: trailing space");
  }
  return out;
}

template <class T>
T parse_int(std::string_view s) {
  T v{};
  if (s.empty() || (s.size() > 1 && s[0] == '0') || (s.size() > 2 && s[0] == '-' && s[1] == '0'))
    throw FormatError("wire: malformed integer '" + std::string(s) + "'");
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw FormatError("wire: malformed integer '" + std::string(s) + "'");
  return v;
}

}  // namespace detail

// Decodes one line (with or without its trailing newline).
inline Message decode(std::string_view line) {
  if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
  if (line.find('\n') != std::string_view::npos) throw FormatError("wire: embedded newline");
  const auto t = detail::split_spaces(line);
  if (t.empty()) throw FormatError("wire: empty message");
  if (t[0] == "STATE") {
    if (t.size() != 6) throw FormatError("wire: STATE expects 5 fields");
    StateMessage m;
    m.version = detail::parse_int<std::uint32_t>(t[1]);
    m.robot_id = detail::parse_int<std::uint32_t>(t[2]);
    m.tick = detail::parse_int<std::uint64_t>(t[3]);
    m.x = detail::parse_int<std::int32_t>(t[4]);
    m.y = detail::parse_int<std::int32_t>(t[5]);
    if (m.version != kProtocolVersion) throw FormatError("wire: unsupported protocol version");
    return m;
  }
  if (t[0] == "GET") {
    if (t.size() < 2 || t.size() > 3 || t[1] != "MODEL") throw FormatError("wire: malformed GET");
    GetModel m;
    if (t.size() == 3) m.have_version = detail::parse_int<std::uint64_t>(t[2]);
    return m;
  }
  if (t[0] == "MODEL") {
    if (t.size() != 4) throw FormatError("wire: MODEL expects 3 fields");
    ModelHeader m;
    m.version = detail::parse_int<std::uint64_t>(t[1]);
    m.length = detail::parse_int<std::uint64_t>(t[2]);
    m.crc = detail::parse_int<std::uint32_t>(t[3]);
    if (m.version < 1) throw FormatError("wire: versions start at 1");
    return m;
  }
  throw FormatError("wire: unknown verb '" + std::string(t[0]) + "'");
}

}  // namespace dmssd::wire
