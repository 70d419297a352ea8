#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dmssd/common.hpp"
#include "dmssd/gridmap.hpp"
#include "dmssd/neural.hpp"

namespace dmssd {

// Which reward function drives the learner. Only `Ours` keeps action
// masking; every other variant either drops it explicitly or carries a
// collision term that needs collisions to be possible.
enum class RewardVariant { Ours, OursNoMask, BaselineA, BaselineB, BaselineC };

inline const char* variant_name(RewardVariant v) {
  switch (v) {
    case RewardVariant::Ours: return "ours";
    case RewardVariant::OursNoMask: return "ours_no_mask";
    case RewardVariant::BaselineA: return "baseline_A";
    case RewardVariant::BaselineB: return "baseline_B";
    case RewardVariant::BaselineC: return "baseline_C";
  }
  return "?";
}

inline RewardVariant parse_variant(const std::string& s) {
  for (auto v : {RewardVariant::Ours, RewardVariant::OursNoMask, RewardVariant::BaselineA, RewardVariant::BaselineB,
                 RewardVariant::BaselineC}) {
    if (s == variant_name(v)) return v;
  }
  throw ConfigError("unknown reward variant '" + s + "'");
}

inline bool masking_enabled(RewardVariant v) { return v == RewardVariant::Ours; }

struct EnvConfig {
  int width = 20;
  int height = 20;
  double static_density = 0.05;
  double dynamic_density = 0.02;
  std::uint64_t map_seed = 1;
  int n_p = 3;
  double r_goal = 10.0;
  double r1 = 1.0;
  double r2 = -10.0;
  double r3 = -5.0;
  int max_episode_steps = 0;  // 0 selects 8 * (width + height)
  double coordinate_scale = 100.0;
  int fixed_robot_count = 0;  // 0 draws uniformly from [2, n_p] at every reset
  RewardVariant variant = RewardVariant::Ours;
  int close_radius = 1;  // "close to the goal" threshold for baseline A

  int episode_budget() const { return max_episode_steps > 0 ? max_episode_steps : 8 * (width + height); }
  int obs_dim() const { return 2 * n_p + 1; }

  void validate() const {
    if (width < 3 || height < 3) throw ConfigError("env: map must be at least 3x3");
    if (n_p < 2) throw ConfigError("env: n_p must be at least 2");
    if (!(r1 > 0.0)) throw ConfigError("env: r1 must be positive");
    if (!(r2 < 0.0) || !(r3 < 0.0)) throw ConfigError("env: r2 and r3 must be negative");
    if (!(std::abs(r1) < std::abs(r3) && std::abs(r3) < std::abs(r2)))
      throw ConfigError("env: rewards must satisfy |r1| < |r3| < |r2|");
    if (r_goal < 0.0) throw ConfigError("env: r_goal must be non-negative");
    if (max_episode_steps < 0) throw ConfigError("env: max_episode_steps must be positive");
    if (!(coordinate_scale > 0.0)) throw ConfigError("env: coordinate_scale must be positive");
    if (fixed_robot_count != 0 && (fixed_robot_count < 2 || fixed_robot_count > n_p))
      throw ConfigError("env: fixed_robot_count must lie in [2, n_p]");
    if (close_radius < 0) throw ConfigError("env: close_radius must be non-negative");
  }
};

struct EnvState {
  std::vector<Coord> positions;
  int active_count = 0;
  Coord target;
  int t = 0;
  bool done = false;
  double prev_potential = 0.0;
};

using ObsVector = std::vector<double>;

struct StepInfo {
  bool truncated = false;
  bool unreachable = false;
  bool collision = false;  // learner bumped into an obstacle (unmasked variants only)
  std::vector<int> actions;  // executed action per active robot, learner first
};

struct StepResult {
  ObsVector obs;  // learner observation after the step
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

// -- pure building blocks ----------------------------------------------------

inline ActionMask action_mask(const EnvState& state, const GridMap& map, int robot_index) {
  if (robot_index < 0 || robot_index >= state.active_count) throw ContractError("action_mask: robot index out of range");
  const Coord here = state.positions[static_cast<std::size_t>(robot_index)];
  ActionMask mask{};
  for (int a = 0; a < kNumActions; ++a) {
    mask[static_cast<std::size_t>(a)] = a == static_cast<int>(Action::Stay) || map.is_open(apply_action(here, a));
  }
  return mask;
}

// Half-up rounding of the per-axis mean, computed exactly in integers.
inline Coord centroid(const std::vector<Coord>& positions) {
  if (positions.empty()) throw ContractError("centroid: no positions");
  long long sx = 0;
  long long sy = 0;
  for (const Coord& p : positions) {
    sx += p.x;
    sy += p.y;
  }
  const long long n = static_cast<long long>(positions.size());
  const auto half_up = [n](long long s) {
    const long long num = 2 * s + n;
    const long long den = 2 * n;
    return static_cast<int>(num >= 0 ? num / den : -((-num + den - 1) / den));
  };
  return {half_up(sx), half_up(sy)};
}

// Centroid target, remapped to a free cell in the robots' component when
// the centroid falls on a static obstacle or in another component.
inline Coord compute_target(const std::vector<Coord>& positions, const GridMap& map, Rng& rng,
                            const std::vector<int>* labels = nullptr) {
  const Coord c = centroid(positions);
  std::vector<int> own;
  if (labels == nullptr) {
    own = component_labels(map);
    labels = &own;
  }
  const int component = (*labels)[map.index(positions.front())];
  return nearest_free_cell(map, c, rng, [&](Coord p) { return (*labels)[map.index(p)] == component; });
}

inline double reward(double prev_potential, double new_potential, bool all_met, const EnvConfig& cfg) {
  const double diff = prev_potential - new_potential;
  double shaping = cfg.r3;
  if (diff < 0.0) shaping = cfg.r1;
  else if (diff > 0.0) shaping = cfg.r2;
  return (all_met ? cfg.r_goal : 0.0) + shaping;
}

// Inputs to the comparison reward functions; distances are BFS steps from
// the learner to the decision-time target.
struct TransitionFacts {
  int prev_distance = 0;
  int new_distance = 0;
  bool all_met = false;
  bool collision = false;
};

inline double baseline_reward(RewardVariant v, const TransitionFacts& f, const EnvConfig& cfg) {
  switch (v) {
    case RewardVariant::BaselineA:
      if (f.collision) return -10.0;
      if (f.all_met) return 5.0;
      if (f.new_distance <= cfg.close_radius) return 1.0 + f.new_distance;
      return 10.0 * (f.prev_distance - f.new_distance);
    case RewardVariant::BaselineB: {
      const double per_move = 10.0 / cfg.episode_budget();
      if (f.collision) return -per_move - 1.0;
      if (f.all_met) return 10.0 - per_move;
      if (f.new_distance == f.prev_distance - 1) return 20.0 - per_move;
      return -per_move;
    }
    case RewardVariant::BaselineC:
      if (f.collision) return -300.0;
      if (f.all_met) return 25.0;
      return -1.0;
    case RewardVariant::Ours:
    case RewardVariant::OursNoMask:
      break;
  }
  throw ContractError("baseline_reward: not a baseline variant");
}

// -- environment ---------------------------------------------------------------

// Distances to every cell from a given source, memoised per source for small
// maps (the static layer never changes during an environment's lifetime).
class DistanceOracle {
 public:
  static constexpr std::size_t kCacheLimit = 4096;

  explicit DistanceOracle(const GridMap& map) : map_(&map) {
    if (map.cell_count() <= kCacheLimit) cache_.resize(map.cell_count());
  }

  const DistanceField& from(Coord source) const {
    if (cache_.empty()) {
      scratch_ = shortest_path_distances(*map_, source);
      return scratch_;
    }
    auto& slot = cache_[map_->index(source)];
    if (!slot) slot = std::make_unique<DistanceField>(shortest_path_distances(*map_, source));
    return *slot;
  }

  void rebind(const GridMap& map) { map_ = &map; }

 private:
  const GridMap* map_;
  mutable std::vector<std::unique_ptr<DistanceField>> cache_;
  mutable DistanceField scratch_;
};

inline int distance_or_guard(const DistanceField& field, Coord c, std::size_t cells) {
  const int d = field.at(c);
  return d == DistanceField::kUnreachable ? static_cast<int>(cells) : d;
}

// Observation for `robot_index`: its own (x, y), the other active robots in
// ascending index order, zero padding up to 2 * n_p, then the summed BFS
// distance to the others.
inline ObsVector build_observation(const EnvState& state, const GridMap& map, int robot_index, const EnvConfig& cfg,
                                   const DistanceOracle* oracle = nullptr) {
  if (robot_index < 0 || robot_index >= state.active_count)
    throw ContractError("build_observation: robot index out of range");
  ObsVector obs(static_cast<std::size_t>(cfg.obs_dim()), 0.0);
  const double scale = cfg.coordinate_scale;
  const Coord self = state.positions[static_cast<std::size_t>(robot_index)];
  obs[0] = self.x / scale;
  obs[1] = self.y / scale;
  std::size_t slot = 2;
  for (int i = 0; i < state.active_count; ++i) {
    if (i == robot_index) continue;
    const Coord p = state.positions[static_cast<std::size_t>(i)];
    obs[slot++] = p.x / scale;
    obs[slot++] = p.y / scale;
  }

  std::optional<DistanceField> local;
  const DistanceField* field = nullptr;
  if (oracle != nullptr) {
    field = &oracle->from(self);
  } else {
    local = shortest_path_distances(map, self);
    field = &*local;
  }
  long long sum = 0;
  for (int i = 0; i < state.active_count; ++i) {
    if (i == robot_index) continue;
    sum += distance_or_guard(*field, state.positions[static_cast<std::size_t>(i)], map.cell_count());
  }
  obs.back() = static_cast<double>(sum) / (scale * cfg.n_p);
  return obs;
}

// One row per robot per step of an exported episode trace.
struct TraceRow {
  int t = 0;
  int robot_id = 0;
  Coord pos;
  int action = -1;
  double reward = 0.0;
  Coord target;
  bool done = false;
  bool truncated = false;
};

inline void write_trace_header(std::ostream& out) { out << "t,robot_id,x,y,action,reward,target_x,target_y,done,truncated\n"; }

inline void write_trace_rows(std::ostream& out, const std::vector<TraceRow>& rows) {
  for (const auto& r : rows) {
    out << r.t << ',' << r.robot_id << ',' << r.pos.x << ',' << r.pos.y << ',' << r.action << ',' << r.reward << ','
        << r.target.x << ',' << r.target.y << ',' << (r.done ? 1 : 0) << ',' << (r.truncated ? 1 : 0) << '\n';
  }
}

class Env {
 public:
  explicit Env(EnvConfig cfg)
      : Env(cfg, generate_map(cfg.width, cfg.height, cfg.static_density, cfg.dynamic_density, cfg.map_seed)) {}

  Env(EnvConfig cfg, GridMap map) : cfg_(cfg), map_(std::move(map)), oracle_(std::make_unique<DistanceOracle>(map_)) {
    cfg_.width = map_.width();
    cfg_.height = map_.height();
    cfg_.validate();
    labels_ = component_labels(map_);
  }

  Env(const Env& other) : Env(other.cfg_, other.map_) { state_ = other.state_; }
  Env(Env&& other) : Env(static_cast<const Env&>(other)) {}
  Env& operator=(const Env&) = delete;

  const EnvConfig& config() const { return cfg_; }
  const GridMap& map() const { return map_; }
  const EnvState& state() const { return state_; }
  const DistanceOracle& distances() const { return *oracle_; }
  const std::vector<int>& components() const { return labels_; }

  void enable_trace(bool on) {
    tracing_ = on;
    trace_.clear();
  }
  const std::vector<TraceRow>& trace() const { return trace_; }

  ObsVector reset(Rng& rng) {
    const int count = cfg_.fixed_robot_count != 0 ? cfg_.fixed_robot_count : 2 + rng.below_int(cfg_.n_p - 1);
    std::vector<std::size_t> starts;
    for (std::size_t i = 0; i < map_.cell_count(); ++i) {
      if (map_.is_open(map_.coord(i))) starts.push_back(i);
    }
    constexpr int kRetries = 100;
    for (int attempt = 0; attempt < kRetries && !starts.empty(); ++attempt) {
      const int component = labels_[starts[rng.below(starts.size())]];
      std::vector<std::size_t> pool;
      for (auto i : starts) {
        if (labels_[i] == component) pool.push_back(i);
      }
      if (static_cast<int>(pool.size()) < count) continue;
      std::vector<Coord> positions;
      for (int k = 0; k < count; ++k) {
        const auto j = static_cast<std::size_t>(k) + rng.below(pool.size() - static_cast<std::size_t>(k));
        std::swap(pool[static_cast<std::size_t>(k)], pool[j]);
        positions.push_back(map_.coord(pool[static_cast<std::size_t>(k)]));
      }
      return reset_with(std::move(positions), rng);
    }
    throw MapDegenerateError("reset: no connected component holds enough free cells");
  }

  // Places robots explicitly; robot 0 is the learner.
  ObsVector reset_with(std::vector<Coord> positions, Rng& rng) {
    if (positions.size() < 2 || static_cast<int>(positions.size()) > cfg_.n_p)
      throw ContractError("reset: robot count outside [2, n_p]");
    if (!is_rendezvous_feasible(map_, positions)) throw MapDegenerateError("reset: robots cannot meet");
    state_ = EnvState{};
    state_.positions = std::move(positions);
    state_.active_count = static_cast<int>(state_.positions.size());
    state_.target = compute_target(state_.positions, map_, rng, &labels_);
    state_.prev_potential = potential(state_.positions.front(), state_.target);
    state_.done = all_colocated();
    trace_.clear();
    if (tracing_) record(std::vector<int>(static_cast<std::size_t>(state_.active_count), -1), 0.0, false);
    return observation(0);
  }

  ActionMask true_mask(int robot) const { return action_mask(state_, map_, robot); }

  // The mask the policy sees: the true mask, or all-valid when the reward
  // variant runs without masking.
  ActionMask policy_mask(int robot) const {
    if (masking_enabled(cfg_.variant)) return true_mask(robot);
    ActionMask all;
    all.fill(true);
    return all;
  }

  ObsVector observation(int robot) const { return build_observation(state_, map_, robot, cfg_, oracle_.get()); }

  double potential(Coord learner, Coord target) const {
    const int d = oracle_->from(target).at(learner);
    if (d == DistanceField::kUnreachable) return -static_cast<double>(map_.cell_count());
    return -static_cast<double>(d);
  }

  // `others(obs, mask, rng) -> action` drives every non-learner robot.
  template <class OtherPolicy>
  StepResult step(int learner_action, OtherPolicy&& others, Rng& rng) {
    if (learner_action < 0 || learner_action >= kNumActions) throw ContractError("step: action index out of range");
    if (state_.done) throw ContractError("step: episode already finished; call reset");

    StepResult result;
    result.info.actions.assign(static_cast<std::size_t>(state_.active_count), static_cast<int>(Action::Stay));

    const Coord decision_target = state_.target;
    const Coord learner_before = state_.positions.front();
    const double before = potential(learner_before, decision_target);
    result.info.unreachable = before <= -static_cast<double>(map_.cell_count());

    // learner
    result.info.collision = !move_robot(0, learner_action);
    result.info.actions[0] = learner_action;
    const double after = potential(state_.positions.front(), decision_target);

    // everyone else, in index order, on the freshest positions
    for (int i = 1; i < state_.active_count; ++i) {
      const ObsVector obs = observation(i);
      const int a = others(obs, policy_mask(i), rng);
      move_robot(i, a);
      result.info.actions[static_cast<std::size_t>(i)] = a;
    }

    state_.target = compute_target(state_.positions, map_, rng, &labels_);
    ++state_.t;
    state_.done = all_colocated();

    if (cfg_.variant == RewardVariant::Ours || cfg_.variant == RewardVariant::OursNoMask) {
      result.reward = reward(before, after, state_.done, cfg_);
    } else {
      const TransitionFacts facts{static_cast<int>(-before), static_cast<int>(-after), state_.done,
                                  result.info.collision};
      result.reward = baseline_reward(cfg_.variant, facts, cfg_);
    }
    result.done = state_.done;
    result.info.truncated = !state_.done && state_.t >= cfg_.episode_budget();
    state_.prev_potential = potential(state_.positions.front(), state_.target);

    // Obstacles move between ticks, so the returned masks already reflect
    // where they will be when the next actions execute.
    if (!state_.done && !result.info.truncated) map_.step_dynamic(rng);

    if (tracing_) record(result.info.actions, result.reward, result.info.truncated);
    result.obs = observation(0);
    return result;
  }

  // Non-learners sample from `net` under their own masks.
  StepResult step(int learner_action, const PolicyValueNet& net, Rng& rng) {
    return step(
        learner_action,
        [&net](const ObsVector& obs, const ActionMask& mask, Rng& r) {
          return sample_action(masked_distribution(net.forward(obs).logits, mask), r);
        },
        rng);
  }

  bool all_colocated() const {
    for (int i = 1; i < state_.active_count; ++i) {
      if (state_.positions[static_cast<std::size_t>(i)] != state_.positions.front()) return false;
    }
    return true;
  }

 private:
  // Returns false when the move was blocked (a collision).
  bool move_robot(int robot, int action) {
    auto& pos = state_.positions[static_cast<std::size_t>(robot)];
    if (action == static_cast<int>(Action::Stay)) return true;
    const Coord next = apply_action(pos, action);
    if (!map_.is_open(next)) {
      if (masking_enabled(cfg_.variant)) throw ContractError("step: masked action submitted");
      return false;
    }
    pos = next;
    return true;
  }

  void record(const std::vector<int>& actions, double learner_reward, bool truncated) {
    for (int i = 0; i < state_.active_count; ++i) {
      trace_.push_back(TraceRow{state_.t, i, state_.positions[static_cast<std::size_t>(i)],
                                actions[static_cast<std::size_t>(i)], i == 0 ? learner_reward : 0.0, state_.target,
                                state_.done, truncated});
    }
  }

  EnvConfig cfg_;
  GridMap map_;
  std::unique_ptr<DistanceOracle> oracle_;
  std::vector<int> labels_;
  EnvState state_;
  bool tracing_ = false;
  std::vector<TraceRow> trace_;
};

}  // namespace dmssd
