#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dmssd/common.hpp"
#include "dmssd/env.hpp"
#include "dmssd/gridmap.hpp"
#include "dmssd/neural.hpp"
#include "dmssd/wire.hpp"

namespace dmssd::swarm {

using Clock = std::chrono::steady_clock;

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

inline Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  Endpoint ep;
  std::string port = text;
  if (colon != std::string::npos) {
    ep.host = text.substr(0, colon);
    port = text.substr(colon + 1);
  }
  try {
    const int p = std::stoi(port);
    if (p < 0 || p > 65535) throw std::out_of_range("port");
    ep.port = static_cast<std::uint16_t>(p);
  } catch (const std::exception&) {
    throw ConfigError("bad endpoint '" + text + "'");
  }
  return ep;
}

// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { reset(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

struct NetError : Error {
  using Error::Error;
};

inline sockaddr_in make_addr(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) throw NetError("bad IPv4 address " + ep.host);
  return addr;
}

inline std::uint16_t local_port(const Socket& s) {
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  if (::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len) != 0) throw NetError("getsockname failed");
  return ntohs(addr.sin_port);
}

inline Socket udp_bind(const Endpoint& ep) {
  Socket s(::socket(AF_INET, SOCK_DGRAM, 0));
  if (!s.valid()) throw NetError("udp socket failed");
  const sockaddr_in addr = make_addr(ep);
  if (::bind(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0)
    throw NetError("udp bind failed: " + std::string(std::strerror(errno)));
  return s;
}

inline void udp_send(const Socket& s, const Endpoint& to, std::string_view payload) {
  const sockaddr_in addr = make_addr(to);
  // Best effort: state broadcasts are periodic, a lost datagram is superseded.
  (void)::sendto(s.fd(), payload.data(), payload.size(), 0, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr));
}

inline Socket tcp_listen(const Endpoint& ep) {
  Socket s(::socket(AF_INET, SOCK_STREAM, 0));
  if (!s.valid()) throw NetError("tcp socket failed");
  const int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  const sockaddr_in addr = make_addr(ep);
  if (::bind(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0)
    throw NetError("tcp bind failed: " + std::string(std::strerror(errno)));
  if (::listen(s.fd(), 64) != 0) throw NetError("listen failed");
  return s;
}

inline bool wait_readable(int fd, int timeout_ms) {
  pollfd p{fd, POLLIN, 0};
  int rc = 0;
  do {
    rc = ::poll(&p, 1, timeout_ms);
  } while (rc < 0 && errno == EINTR);
  return rc > 0;
}

inline Socket tcp_connect(const Endpoint& ep, int timeout_ms) {
  Socket s(::socket(AF_INET, SOCK_STREAM, 0));
  if (!s.valid()) throw NetError("tcp socket failed");
  const sockaddr_in addr = make_addr(ep);
  const int flags = ::fcntl(s.fd(), F_GETFL, 0);
  ::fcntl(s.fd(), F_SETFL, flags | O_NONBLOCK);
  if (::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
    if (errno != EINPROGRESS) throw NetError("connect failed: " + std::string(std::strerror(errno)));
    pollfd p{s.fd(), POLLOUT, 0};
    if (::poll(&p, 1, timeout_ms) <= 0) throw NetError("connect timed out");
    int err = 0;
    socklen_t len = sizeof(err);
    ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) throw NetError("connect failed: " + std::string(std::strerror(err)));
  }
  ::fcntl(s.fd(), F_SETFL, flags);
  return s;
}

inline void send_all(const Socket& s, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(s.fd(), data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw NetError("send failed: " + std::string(std::strerror(errno)));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

// Buffered reader over a stream socket with a per-call deadline.
class StreamReader {
 public:
  StreamReader(const Socket& s, int timeout_ms) : s_(s), timeout_ms_(timeout_ms) {}

  std::string read_line(std::size_t max_len = 256) {
    for (;;) {
      if (const auto nl = buf_.find('\n'); nl != std::string::npos) {
        std::string line = buf_.substr(0, nl + 1);
        buf_.erase(0, nl + 1);
        return line;
      }
      if (buf_.size() > max_len) throw NetError("line too long");
      fill();
    }
  }

  std::string read_exact(std::size_t n) {
    while (buf_.size() < n) fill();
    std::string out = buf_.substr(0, n);
    buf_.erase(0, n);
    return out;
  }

 private:
  void fill() {
    if (!wait_readable(s_.fd(), timeout_ms_)) throw NetError("read timed out");
    char tmp[65536];
    const ssize_t n = ::recv(s_.fd(), tmp, sizeof(tmp), 0);
    if (n < 0 && errno == EINTR) return;
    if (n <= 0) throw NetError("connection closed");
    buf_.append(tmp, static_cast<std::size_t>(n));
  }

  const Socket& s_;
  int timeout_ms_;
  std::string buf_;
};

// ---------------------------------------------------------------------------
// Model distribution.

struct ModelAnnouncement {
  std::uint64_t version = 1;
  std::string payload;  // model file bytes

  wire::ModelHeader header() const { return {version, payload.size(), crc32_of(payload)}; }
};

// Serves the model file named at construction. Each request re-reads the
// file; new, valid contents bump the version.
class ModelServer {
 public:
  ModelServer(std::string path, Socket listener) : path_(std::move(path)), listener_(std::move(listener)) {
    current_.payload = read_file_bytes(path_);
    deserialize_model(current_.payload);  // must be a valid model at startup
  }

  std::uint16_t port() const { return local_port(listener_); }

  ModelAnnouncement refresh() {
    std::lock_guard lock(mu_);
    try {
      std::string bytes = read_file_bytes(path_);
      if (bytes != current_.payload) {
        deserialize_model(bytes);  // a half-written file keeps the old model
        current_.payload = std::move(bytes);
        ++current_.version;
      }
    } catch (const Error&) {
    }
    return current_;
  }

  // Handles connections until `stop` is set.
  void serve(const std::atomic<bool>& stop) {
    while (!stop.load()) {
      if (!wait_readable(listener_.fd(), 50)) continue;
      Socket client(::accept(listener_.fd(), nullptr, nullptr));
      if (!client.valid()) continue;
      try {
        handle(client);
      } catch (const Error&) {
      }
    }
  }

  void handle(const Socket& client) {
    StreamReader reader(client, 2000);
    const auto msg = wire::decode(reader.read_line());
    if (!std::holds_alternative<wire::GetModel>(msg)) throw FormatError("model server: expected GET MODEL");
    const ModelAnnouncement a = refresh();
    send_all(client, wire::encode(a.header()));
    send_all(client, a.payload);
  }

 private:
  std::string path_;
  Socket listener_;
  std::mutex mu_;
  ModelAnnouncement current_;
};

struct FetchedModel {
  std::uint64_t version = 0;
  std::string payload;
  PolicyValueNet net;
};

// One request/response exchange. Throws on transport or integrity errors.
inline FetchedModel fetch_model_once(const Endpoint& server, std::optional<std::uint64_t> have, int timeout_ms) {
  Socket s = tcp_connect(server, timeout_ms);
  send_all(s, wire::encode(wire::GetModel{have}));
  StreamReader reader(s, timeout_ms);
  const auto msg = wire::decode(reader.read_line());
  const auto* header = std::get_if<wire::ModelHeader>(&msg);
  if (header == nullptr) throw FormatError("model client: expected MODEL header");
  if (header->length > (1u << 30)) throw FormatError("model client: payload too large");
  FetchedModel out;
  out.version = header->version;
  out.payload = reader.read_exact(static_cast<std::size_t>(header->length));
  if (crc32_of(out.payload) != header->crc) throw FormatError("model client: checksum mismatch");
  out.net = deserialize_model(out.payload);
  return out;
}

// Keeps the newest valid model seen; failed fetches leave it untouched.
class ModelClient {
 public:
  explicit ModelClient(Endpoint server, int retries = 3, int timeout_ms = 1000)
      : server_(std::move(server)), retries_(retries), timeout_ms_(timeout_ms) {}

  // True when a newer version was installed.
  bool poll() {
    for (int attempt = 0; attempt < retries_; ++attempt) {
      try {
        FetchedModel m = fetch_model_once(server_, current_ ? std::optional(current_->version) : std::nullopt, timeout_ms_);
        if (current_ && m.version <= current_->version) return false;
        current_ = std::move(m);
        return true;
      } catch (const Error&) {
        ++failures_;
      }
    }
    return false;
  }

  const std::optional<FetchedModel>& current() const { return current_; }
  int failures() const { return failures_; }

 private:
  Endpoint server_;
  int retries_;
  int timeout_ms_;
  int failures_ = 0;
  std::optional<FetchedModel> current_;
};

// ---------------------------------------------------------------------------
// Robot process.

struct Peer {
  std::uint32_t id = 0;
  Endpoint endpoint;
};

struct RobotOptions {
  std::uint32_t id = 0;
  Coord start;
  EnvConfig env;  // n_p, coordinate scale and step budget
  std::vector<Peer> peers;
  int tick_ms = 100;
  int peer_timeout_ms = 1000;
  int max_ticks = 0;  // 0 selects env.episode_budget()
  std::optional<Endpoint> model_server;
  int model_poll_ticks = 0;  // 0 disables periodic refresh
  int crash_at_tick = -1;  // fault injection: SIGKILL self at this tick
};

struct RobotReport {
  std::uint32_t id = 0;
  bool met = false;
  Coord final_cell;
  int steps = 0;
  int ticks = 0;
  bool degraded = false;
  std::uint64_t model_version = 0;
  std::vector<TraceRow> trace;
};

// Latest peer states, last-writer-wins per robot id; non-increasing ticks
// are dropped.
class PeerTable {
 public:
  struct Entry {
    std::vector<std::pair<std::uint64_t, Coord>> history;
    Clock::time_point last_heard;
  };

  bool accept(const wire::StateMessage& m) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(m.robot_id);
    if (it == entries_.end()) return false;
    auto& h = it->second.history;
    if (!h.empty() && m.tick <= h.back().first) return false;
    h.emplace_back(m.tick, Coord{m.x, m.y});
    it->second.last_heard = Clock::now();
    cv_.notify_all();
    return true;
  }

  void add_peer(std::uint32_t id) {
    std::lock_guard lock(mu_);
    entries_[id].last_heard = Clock::now();
  }

  // Waits until every id in `ids` has reported `tick` or later.
  void wait_for_tick(const std::vector<std::uint32_t>& ids, std::uint64_t tick, Clock::time_point deadline) {
    std::unique_lock lock(mu_);
    cv_.wait_until(lock, deadline, [&] {
      return std::all_of(ids.begin(), ids.end(), [&](std::uint32_t id) {
        const auto& h = entries_.at(id).history;
        return !h.empty() && h.back().first >= tick;
      });
    });
  }

  // State at `tick` if known, else the latest earlier one, else the oldest.
  std::optional<std::pair<std::uint64_t, Coord>> state_at(std::uint32_t id, std::uint64_t tick) const {
    std::lock_guard lock(mu_);
    const auto& h = entries_.at(id).history;
    if (h.empty()) return std::nullopt;
    auto it = std::upper_bound(h.begin(), h.end(), tick, [](std::uint64_t t, const auto& e) { return t < e.first; });
    if (it == h.begin()) return h.front();
    return *std::prev(it);
  }

  Clock::time_point last_heard(std::uint32_t id) const {
    std::lock_guard lock(mu_);
    return entries_.at(id).last_heard;
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::uint32_t, Entry> entries_;
};

inline constexpr std::uint64_t kObstacleStreamSalt = 0x0b57ac1e5eedULL;

// Local decide/act loop of one robot: broadcast own state, gather the
// freshest peer states, act greedily on the local model copy, stop after
// two consecutive ticks of unanimity.
inline RobotReport robot_loop(PolicyValueNet model, const GridMap& map, Socket udp, const RobotOptions& opt) {
  if (static_cast<int>(opt.peers.size()) + 1 > opt.env.n_p)
    throw ContractError("robot_loop: more robots than the model's n_p");
  if (model.input_dim() != opt.env.obs_dim()) throw ContractError("robot_loop: model does not match n_p");
  if (!map.is_passable(opt.start)) throw ContractError("robot_loop: start cell is blocked");

  RobotReport report;
  report.id = opt.id;

  std::optional<ModelClient> client;
  if (opt.model_server) {
    client.emplace(*opt.model_server, 2, 500);
    if (client->poll()) {
      model = client->current()->net;
      report.model_version = client->current()->version;
    }
  }

  PeerTable table;
  std::vector<std::uint32_t> live;
  for (const auto& p : opt.peers) {
    table.add_peer(p.id);
    live.push_back(p.id);
  }
  std::sort(live.begin(), live.end());

  std::atomic<bool> stop{false};
  std::thread receiver([&] {
    char buf[512];
    while (!stop.load()) {
      if (!wait_readable(udp.fd(), 20)) continue;
      const ssize_t n = ::recv(udp.fd(), buf, sizeof(buf), 0);
      if (n <= 0) continue;
      try {
        const auto msg = wire::decode(std::string_view(buf, static_cast<std::size_t>(n)));
        if (const auto* s = std::get_if<wire::StateMessage>(&msg)) table.accept(*s);
      } catch (const Error&) {
      }
    }
  });

  const auto broadcast = [&](std::uint64_t tick, Coord pos) {
    const std::string line = wire::encode(wire::StateMessage{wire::kProtocolVersion, opt.id, tick, pos.x, pos.y});
    for (const auto& p : opt.peers) udp_send(udp, p.endpoint, line);
  };

  GridMap world = map;
  Rng obstacle_rng(map.seed() ^ kObstacleStreamSalt);
  Coord pos = opt.start;
  const int max_ticks = opt.max_ticks > 0 ? opt.max_ticks : opt.env.episode_budget();
  int unanimous = 0;
  const auto timeout = std::chrono::milliseconds(opt.peer_timeout_ms);

  int tick = 0;
  for (; tick < max_ticks; ++tick) {
    const auto tick_start = Clock::now();
    if (tick == opt.crash_at_tick) ::raise(SIGKILL);
    broadcast(static_cast<std::uint64_t>(tick), pos);

    if (client && opt.model_poll_ticks > 0 && tick > 0 && tick % opt.model_poll_ticks == 0 && client->poll()) {
      model = client->current()->net;
      report.model_version = client->current()->version;
    }

    table.wait_for_tick(live, static_cast<std::uint64_t>(tick), tick_start + timeout);

    // Peers silent past the timeout leave the rendezvous; peers merely
    // behind contribute their last known cell.
    EnvState snapshot;
    snapshot.positions.push_back(pos);
    std::vector<std::uint32_t> still_live;
    for (auto id : live) {
      const auto st = table.state_at(id, static_cast<std::uint64_t>(tick));
      if (!st || st->first < static_cast<std::uint64_t>(tick)) {
        report.degraded = true;
        if (Clock::now() - table.last_heard(id) >= timeout) continue;
        if (!st) continue;
      }
      still_live.push_back(id);
      snapshot.positions.push_back(st->second);
    }
    live = std::move(still_live);
    snapshot.active_count = static_cast<int>(snapshot.positions.size());

    Rng target_rng(static_cast<std::uint64_t>(tick));
    snapshot.target = compute_target(snapshot.positions, world, target_rng);

    const bool together = std::all_of(snapshot.positions.begin(), snapshot.positions.end(),
                                      [&](Coord c) { return c == pos; });
    int action = static_cast<int>(Action::Stay);
    if (together) {
      ++unanimous;
    } else {
      unanimous = 0;
      const ObsVector obs = build_observation(snapshot, world, 0, opt.env);
      action = greedy_action(masked_distribution(model.forward(obs).logits, action_mask(snapshot, world, 0)));
      if (action != static_cast<int>(Action::Stay)) {
        pos = apply_action(pos, action);
        ++report.steps;
      }
    }
    report.trace.push_back(TraceRow{tick, static_cast<int>(opt.id), snapshot.positions.front(), action, 0.0,
                                    snapshot.target, together, false});
    if (live.empty() || unanimous >= 2) {
      report.met = true;
      break;
    }
    world.step_dynamic(obstacle_rng);

    const auto next = tick_start + std::chrono::milliseconds(opt.tick_ms);
    if (opt.tick_ms > 0) std::this_thread::sleep_until(next);
  }
  report.ticks = tick + (report.met ? 1 : 0);
  report.final_cell = pos;
  if (!report.met && !report.trace.empty()) report.trace.back().truncated = true;

  // Linger so slower peers still see this robot's final ticks.
  for (int extra = 1; extra <= 2; ++extra) broadcast(static_cast<std::uint64_t>(tick + extra), pos);

  stop = true;
  receiver.join();
  return report;
}

// ---------------------------------------------------------------------------
// Multi-process harness.

struct OrchestrateOptions {
  int robots = 3;
  EnvConfig env;
  std::uint64_t seed = 0;
  std::vector<Coord> starts;  // empty: sampled from `seed`
  int tick_ms = 0;
  int peer_timeout_ms = 500;
  int max_ticks = 0;
  int budget_ms = 60'000;
  bool model_server = true;
  bool kill_server_after_start = false;
  int kill_robot = -1;  // index of a robot that dies at `kill_at_tick`
  int kill_at_tick = -1;
};

struct RunReport {
  bool success = false;
  std::optional<Coord> meeting_cell;
  std::vector<Coord> starts;
  std::vector<RobotReport> robots;  // surviving robots only
  std::vector<int> lost;  // robot indices that never reported
  std::string trace_csv;
  std::string failure;
};

namespace detail {

inline std::string encode_report(const RobotReport& r) {
  std::ostringstream out;
  out << "REPORT " << r.id << ' ' << r.met << ' ' << r.final_cell.x << ' ' << r.final_cell.y << ' ' << r.steps << ' '
      << r.ticks << ' ' << r.degraded << ' ' << r.model_version << ' ' << r.trace.size() << '\n';
  for (const auto& t : r.trace) {
    out << t.t << ' ' << t.robot_id << ' ' << t.pos.x << ' ' << t.pos.y << ' ' << t.action << ' ' << t.target.x << ' '
        << t.target.y << ' ' << t.done << ' ' << t.truncated << '\n';
  }
  return out.str();
}

inline RobotReport decode_report(const std::string& text) {
  std::istringstream in(text);
  std::string tag;
  RobotReport r;
  std::size_t n = 0;
  if (!(in >> tag >> r.id >> r.met >> r.final_cell.x >> r.final_cell.y >> r.steps >> r.ticks >> r.degraded >>
        r.model_version >> n) ||
      tag != "REPORT")
    throw FormatError("orchestrate: malformed robot report");
  r.trace.resize(n);
  for (auto& t : r.trace) {
    if (!(in >> t.t >> t.robot_id >> t.pos.x >> t.pos.y >> t.action >> t.target.x >> t.target.y >> t.done >>
          t.truncated))
      throw FormatError("orchestrate: malformed trace row");
  }
  return r;
}

inline void write_fd(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      return;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

}  // namespace detail

inline std::vector<Coord> sample_starts(const GridMap& map, EnvConfig cfg, int robots, std::uint64_t seed) {
  cfg.fixed_robot_count = robots;
  cfg.n_p = std::max(cfg.n_p, robots);
  Env env(cfg, map);
  Rng rng(seed);
  env.reset(rng);
  return env.state().positions;
}

inline std::string trace_csv(std::vector<TraceRow> rows) {
  std::sort(rows.begin(), rows.end(),
            [](const TraceRow& a, const TraceRow& b) { return std::tie(a.t, a.robot_id) < std::tie(b.t, b.robot_id); });
  std::ostringstream out;
  write_trace_header(out);
  write_trace_rows(out, rows);
  return out.str();
}

// Spawns a model server and one process per robot on loopback, collects
// their reports and checks for a common meeting cell.
inline RunReport orchestrate(const GridMap& map, const std::string& model_path, const OrchestrateOptions& opt) {
  if (opt.robots < 1) throw ContractError("orchestrate: need at least one robot");
  const PolicyValueNet model = load_model(model_path);

  RunReport run;
  run.starts = opt.starts.empty() ? (opt.robots >= 2 ? sample_starts(map, opt.env, opt.robots, opt.seed)
                                                     : std::vector<Coord>{map.coord(0)})
                                  : opt.starts;
  if (static_cast<int>(run.starts.size()) != opt.robots) throw ContractError("orchestrate: wrong number of starts");
  if (opt.robots == 1 && opt.starts.empty()) {
    Rng rng(opt.seed);
    run.starts[0] = nearest_free_cell(map, map.coord(rng.below(map.cell_count())), rng);
  }

  // Sockets are bound before forking so every port is known up front.
  std::vector<Socket> udp;
  std::vector<Peer> peers;
  for (int i = 0; i < opt.robots; ++i) {
    udp.push_back(udp_bind({"127.0.0.1", 0}));
    peers.push_back({static_cast<std::uint32_t>(i), {"127.0.0.1", local_port(udp.back())}});
  }

  pid_t server_pid = -1;
  std::optional<Endpoint> server_ep;
  if (opt.model_server) {
    Socket listener = tcp_listen({"127.0.0.1", 0});
    server_ep = Endpoint{"127.0.0.1", local_port(listener)};
    server_pid = ::fork();
    if (server_pid < 0) throw Error("orchestrate: fork failed");
    if (server_pid == 0) {
      udp.clear();
      try {
        ModelServer server(model_path, std::move(listener));
        std::atomic<bool> never{false};
        server.serve(never);
      } catch (...) {
      }
      ::_exit(0);
    }
  }

  struct Child {
    pid_t pid = -1;
    int fd = -1;
    std::string buf;
    bool ready = false;
    bool closed = false;
  };
  std::vector<Child> children(static_cast<std::size_t>(opt.robots));
  for (int i = 0; i < opt.robots; ++i) {
    int fds[2];
    if (::pipe(fds) != 0) throw Error("orchestrate: pipe failed");
    const pid_t pid = ::fork();
    if (pid < 0) throw Error("orchestrate: fork failed");
    if (pid == 0) {
      ::close(fds[0]);
      Socket mine = std::move(udp[static_cast<std::size_t>(i)]);
      udp.clear();
      RobotOptions ro;
      ro.id = static_cast<std::uint32_t>(i);
      ro.start = run.starts[static_cast<std::size_t>(i)];
      ro.env = opt.env;
      for (const auto& p : peers) {
        if (p.id != ro.id) ro.peers.push_back(p);
      }
      ro.tick_ms = opt.tick_ms;
      ro.peer_timeout_ms = opt.peer_timeout_ms;
      ro.max_ticks = opt.max_ticks;
      ro.model_server = server_ep;
      if (i == opt.kill_robot) ro.crash_at_tick = opt.kill_at_tick;
      int code = 0;
      try {
        // Signal readiness once the model is in hand (fetched or local).
        std::optional<ModelClient> warm;
        PolicyValueNet net = model;
        std::uint64_t version = 0;
        if (server_ep) {
          warm.emplace(*server_ep, 3, 1000);
          if (warm->poll()) {
            net = warm->current()->net;
            version = warm->current()->version;
          }
        }
        detail::write_fd(fds[1], "READY\n");
        ro.model_server.reset();
        RobotReport rep = robot_loop(net, map, std::move(mine), ro);
        rep.model_version = version;
        detail::write_fd(fds[1], detail::encode_report(rep));
      } catch (const std::exception& e) {
        detail::write_fd(fds[1], std::string("ERROR ") + e.what() + "\n");
        code = 1;
      }
      ::close(fds[1]);
      ::_exit(code);
    }
    ::close(fds[1]);
    children[static_cast<std::size_t>(i)].pid = pid;
    children[static_cast<std::size_t>(i)].fd = fds[0];
  }
  udp.clear();

  const auto deadline = Clock::now() + std::chrono::milliseconds(opt.budget_ms);
  bool server_killed = false;
  for (;;) {
    std::vector<pollfd> fds;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < children.size(); ++i) {
      if (children[i].closed) continue;
      fds.push_back({children[i].fd, POLLIN, 0});
      idx.push_back(i);
    }
    if (fds.empty()) break;
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    if (left <= 0) break;
    const int rc = ::poll(fds.data(), fds.size(), static_cast<int>(std::min<long long>(left, 100)));
    if (rc < 0 && errno != EINTR) break;
    for (std::size_t k = 0; k < fds.size(); ++k) {
      if (!(fds[k].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      Child& c = children[idx[k]];
      char tmp[65536];
      const ssize_t n = ::read(c.fd, tmp, sizeof(tmp));
      if (n <= 0) {
        c.closed = true;
        ::close(c.fd);
        continue;
      }
      c.buf.append(tmp, static_cast<std::size_t>(n));
      if (!c.ready && c.buf.rfind("READY\n", 0) == 0) {
        c.ready = true;
        c.buf.erase(0, 6);
      }
    }
    if (opt.kill_server_after_start && !server_killed && server_pid > 0 &&
        std::all_of(children.begin(), children.end(), [](const Child& c) { return c.ready || c.closed; })) {
      ::kill(server_pid, SIGKILL);
      server_killed = true;
    }
  }

  std::vector<TraceRow> rows;
  for (std::size_t i = 0; i < children.size(); ++i) {
    Child& c = children[i];
    if (!c.closed) {
      ::kill(c.pid, SIGKILL);
      ::close(c.fd);
    }
    int status = 0;
    ::waitpid(c.pid, &status, 0);
    if (c.buf.rfind("REPORT", 0) != 0) {
      run.lost.push_back(static_cast<int>(i));
      if (c.buf.rfind("ERROR", 0) == 0 && run.failure.empty()) run.failure = c.buf;
      continue;
    }
    RobotReport r = detail::decode_report(c.buf);
    rows.insert(rows.end(), r.trace.begin(), r.trace.end());
    run.robots.push_back(std::move(r));
  }
  if (server_pid > 0) {
    if (!server_killed) ::kill(server_pid, SIGKILL);
    int status = 0;
    ::waitpid(server_pid, &status, 0);
  }

  run.trace_csv = trace_csv(std::move(rows));
  const bool all_met = !run.robots.empty() &&
                       std::all_of(run.robots.begin(), run.robots.end(), [](const RobotReport& r) { return r.met; });
  if (all_met) {
    const Coord cell = run.robots.front().final_cell;
    if (std::all_of(run.robots.begin(), run.robots.end(), [&](const RobotReport& r) { return r.final_cell == cell; })) {
      run.success = true;
      run.meeting_cell = cell;
    }
  }
  if (!run.success && run.failure.empty()) {
    std::ostringstream why;
    why << "no common meeting cell:";
    for (const auto& r : run.robots)
      why << " robot " << r.id << (r.met ? " met at (" : " stopped at (") << r.final_cell.x << ',' << r.final_cell.y
          << ") after " << r.ticks << " ticks;";
    run.failure = why.str();
  }
  return run;
}

}  // namespace dmssd::swarm
