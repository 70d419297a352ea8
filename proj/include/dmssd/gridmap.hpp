#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dmssd/common.hpp"

namespace dmssd {

// Occupancy grid. Static obstacles never move; dynamic obstacles are kept as
// an ordered list (their index fixes the stepping order) mirrored into an
// occupancy layer for O(1) lookups.
class GridMap {
 public:
  GridMap() = default;

  GridMap(int width, int height, std::uint64_t seed = 0)
      : width_(width), height_(height), seed_(seed),
        static_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), 0),
        dynamic_layer_(static_.size(), 0) {
    if (width < 1 || height < 1) throw ConfigError("GridMap: dimensions must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t cell_count() const { return static_.size(); }

  bool in_bounds(Coord c) const { return c.x >= 0 && c.y >= 0 && c.x < width_ && c.y < height_; }
  std::size_t index(Coord c) const {
    return static_cast<std::size_t>(c.y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(c.x);
  }
  Coord coord(std::size_t idx) const {
    return {static_cast<int>(idx % static_cast<std::size_t>(width_)),
            static_cast<int>(idx / static_cast<std::size_t>(width_))};
  }

  bool is_static(Coord c) const { return static_[index(c)] != 0; }
  bool is_dynamic(Coord c) const { return dynamic_layer_[index(c)] != 0; }
  // Free of static obstacles: the notion used by distances and feasibility.
  bool is_passable(Coord c) const { return in_bounds(c) && !is_static(c); }
  // Free of every obstacle: the notion used by action masking.
  bool is_open(Coord c) const { return in_bounds(c) && !is_static(c) && !is_dynamic(c); }

  void set_static(Coord c, bool blocked = true) {
    check(c);
    if (blocked && is_dynamic(c)) throw ConfigError("GridMap: static obstacle over dynamic obstacle");
    static_[index(c)] = blocked ? 1 : 0;
  }

  void add_dynamic(Coord c) {
    check(c);
    if (is_static(c) || is_dynamic(c)) throw ConfigError("GridMap: dynamic obstacle on occupied cell");
    dynamic_.push_back(c);
    dynamic_layer_[index(c)] = 1;
  }

  const std::vector<Coord>& dynamic_obstacles() const { return dynamic_; }
  std::size_t static_count() const { return static_cast<std::size_t>(std::count(static_.begin(), static_.end(), 1)); }

  std::vector<Coord>& spawn_hints() { return spawn_hints_; }
  const std::vector<Coord>& spawn_hints() const { return spawn_hints_; }

  // Each obstacle, in index order, picks uniformly among staying and its
  // in-bounds 4-neighbours that hold neither a static nor a dynamic obstacle
  // (positions already updated earlier in the same pass count).
  void step_dynamic(Rng& rng) {
    for (auto& pos : dynamic_) {
      std::array<Coord, kNumActions> choices{};
      int n = 0;
      choices[static_cast<std::size_t>(n++)] = pos;
      for (int a = 0; a < 4; ++a) {
        const Coord next = apply_action(pos, a);
        if (is_open(next)) choices[static_cast<std::size_t>(n++)] = next;
      }
      const Coord picked = choices[static_cast<std::size_t>(rng.below_int(n))];
      if (picked != pos) {
        dynamic_layer_[index(pos)] = 0;
        dynamic_layer_[index(picked)] = 1;
        pos = picked;
      }
    }
  }

  friend bool operator==(const GridMap& a, const GridMap& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.seed_ == b.seed_ && a.static_ == b.static_ &&
           a.dynamic_ == b.dynamic_ && a.spawn_hints_ == b.spawn_hints_;
  }

 private:
  void check(Coord c) const {
    if (!in_bounds(c)) throw ContractError("GridMap: coordinate out of bounds");
  }

  int width_ = 0;
  int height_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<std::uint8_t> static_;
  std::vector<std::uint8_t> dynamic_layer_;
  std::vector<Coord> dynamic_;
  std::vector<Coord> spawn_hints_;
};

// Shortest 4-connected step counts from one source, static obstacles blocking.
struct DistanceField {
  static constexpr int kUnreachable = std::numeric_limits<int>::max();

  Coord source;
  int width = 0;
  std::vector<int> dist;

  int at(Coord c) const {
    return dist[static_cast<std::size_t>(c.y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(c.x)];
  }
  bool reachable(Coord c) const { return at(c) != kUnreachable; }
};

inline GridMap generate_map(int width, int height, double static_density, double dynamic_density,
                            std::uint64_t seed) {
  if (width < 3 || height < 3) throw ConfigError("generate_map: dimensions must be at least 3x3");
  if (!(static_density >= 0.0 && static_density < 0.5) || !(dynamic_density >= 0.0 && dynamic_density < 0.5))
    throw ConfigError("generate_map: densities must lie in [0, 0.5)");

  GridMap map(width, height, seed);
  Rng rng(seed);
  for (std::size_t i = 0; i < map.cell_count(); ++i) {
    if (rng.uniform() < static_density) map.set_static(map.coord(i));
  }
  for (std::size_t i = 0; i < map.cell_count(); ++i) {
    const Coord c = map.coord(i);
    if (map.is_static(c)) continue;
    if (rng.uniform() < dynamic_density) map.add_dynamic(c);
  }
  return map;
}

inline DistanceField shortest_path_distances(const GridMap& map, Coord source) {
  if (!map.in_bounds(source) || map.is_static(source))
    throw ContractError("shortest_path_distances: source is not a passable cell");

  DistanceField field{source, map.width(), std::vector<int>(map.cell_count(), DistanceField::kUnreachable)};
  std::vector<std::size_t> queue;
  queue.reserve(map.cell_count());
  field.dist[map.index(source)] = 0;
  queue.push_back(map.index(source));
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const Coord c = map.coord(queue[head]);
    const int d = field.dist[queue[head]];
    for (int a = 0; a < 4; ++a) {
      const Coord n = apply_action(c, a);
      if (!map.is_passable(n)) continue;
      const std::size_t ni = map.index(n);
      if (field.dist[ni] != DistanceField::kUnreachable) continue;
      field.dist[ni] = d + 1;
      queue.push_back(ni);
    }
  }
  return field;
}

// Connected-component labels over passable cells; -1 marks static obstacles.
inline std::vector<int> component_labels(const GridMap& map) {
  std::vector<int> label(map.cell_count(), -1);
  int next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < map.cell_count(); ++start) {
    if (label[start] != -1 || map.is_static(map.coord(start))) continue;
    label[start] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      const Coord c = map.coord(stack.back());
      stack.pop_back();
      for (int a = 0; a < 4; ++a) {
        const Coord n = apply_action(c, a);
        if (!map.is_passable(n)) continue;
        const std::size_t ni = map.index(n);
        if (label[ni] != -1) continue;
        label[ni] = next;
        stack.push_back(ni);
      }
    }
    ++next;
  }
  return label;
}

inline bool is_rendezvous_feasible(const GridMap& map, const std::vector<Coord>& positions) {
  if (positions.empty()) throw ContractError("is_rendezvous_feasible: no positions");
  for (const Coord& p : positions) {
    if (!map.is_passable(p)) throw ContractError("is_rendezvous_feasible: position on obstacle or off-grid");
  }
  const DistanceField field = shortest_path_distances(map, positions.front());
  return std::all_of(positions.begin(), positions.end(), [&](Coord p) { return field.reachable(p); });
}

inline GridMap step_dynamic_obstacles(const GridMap& map, Rng& rng) {
  GridMap next = map;
  next.step_dynamic(rng);
  return next;
}

// Returns `cell` if acceptable, else a uniformly chosen acceptable
// 4-neighbour, else a uniformly chosen acceptable cell at the smallest
// Manhattan ring around `cell`. `acceptable` defaults to "no static obstacle".
inline Coord nearest_free_cell(const GridMap& map, Coord cell, Rng& rng,
                               const std::function<bool(Coord)>& acceptable = {}) {
  const auto ok = [&](Coord c) {
    if (!map.is_passable(c)) return false;
    return !acceptable || acceptable(c);
  };
  if (ok(cell)) return cell;

  std::vector<Coord> candidates;
  for (int a = 0; a < 4; ++a) {
    const Coord n = apply_action(cell, a);
    if (ok(n)) candidates.push_back(n);
  }
  if (!candidates.empty()) return candidates[rng.below(candidates.size())];

  const int max_radius = map.width() + map.height();
  for (int r = 2; r <= max_radius; ++r) {
    for (int dx = -r; dx <= r; ++dx) {
      const int rem = r - std::abs(dx);
      const Coord a{cell.x + dx, cell.y - rem};
      if (ok(a)) candidates.push_back(a);
      if (rem != 0) {
        const Coord b{cell.x + dx, cell.y + rem};
        if (ok(b)) candidates.push_back(b);
      }
    }
    if (!candidates.empty()) return candidates[rng.below(candidates.size())];
  }
  throw MapDegenerateError("nearest_free_cell: no free cell on map");
}

// Text map format: header `DMSMAP 1 <X> <Y> <seed>`, then Y rows of X
// characters from {'.', '#', 'D', 'R'}.
inline void write_map(std::ostream& out, const GridMap& map) {
  out << "DMSMAP 1 " << map.width() << ' ' << map.height() << ' ' << map.seed() << '\n';
  std::vector<char> row(static_cast<std::size_t>(map.width()));
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      const Coord c{x, y};
      char ch = '.';
      if (map.is_static(c)) ch = '#';
      else if (map.is_dynamic(c)) ch = 'D';
      else if (std::find(map.spawn_hints().begin(), map.spawn_hints().end(), c) != map.spawn_hints().end()) ch = 'R';
      row[static_cast<std::size_t>(x)] = ch;
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
    out << '\n';
  }
}

inline std::string map_to_string(const GridMap& map) {
  std::ostringstream out;
  write_map(out, map);
  return out.str();
}

inline GridMap read_map(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("map: missing header");
  std::istringstream header(line);
  std::string magic;
  int version = 0;
  int width = 0;
  int height = 0;
  std::uint64_t seed = 0;
  if (!(header >> magic >> version >> width >> height >> seed) || magic != "DMSMAP")
    throw FormatError("map: malformed header '" + line + "'");
  if (version != 1) throw FormatError("map: unsupported version " + std::to_string(version));
  if (width < 1 || height < 1) throw FormatError("map: non-positive dimensions");

  GridMap map(width, height, seed);
  for (int y = 0; y < height; ++y) {
    if (!std::getline(in, line)) throw FormatError("map: expected " + std::to_string(height) + " rows");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (static_cast<int>(line.size()) != width)
      throw FormatError("map: ragged row " + std::to_string(y) + " (length " + std::to_string(line.size()) + ")");
    for (int x = 0; x < width; ++x) {
      const Coord c{x, y};
      switch (line[static_cast<std::size_t>(x)]) {
        case '.': break;
        case '#': map.set_static(c); break;
        case 'D': map.add_dynamic(c); break;
        case 'R': map.spawn_hints().push_back(c); break;
        default: throw FormatError("map: unknown cell character in row " + std::to_string(y));
      }
    }
  }
  return map;
}

inline GridMap map_from_string(const std::string& text) {
  std::istringstream in(text);
  return read_map(in);
}

inline GridMap load_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("map: cannot open " + path);
  return read_map(in);
}

inline void save_map(const std::string& path, const GridMap& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("map: cannot write " + path);
  write_map(out, map);
}

}  // namespace dmssd
