#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dmssd/common.hpp"
#include "dmssd/config.hpp"
#include "dmssd/env.hpp"
#include "dmssd/gridmap.hpp"
#include "dmssd/neural.hpp"
#include "dmssd/ppo.hpp"

namespace dmssd {

// Bottleneck BFS distance from the robots to `target`.
inline int optimal_steps(const GridMap& map, const std::vector<Coord>& positions, Coord target) {
  if (!is_rendezvous_feasible(map, positions)) throw ContractError("optimal_steps: robots cannot meet");
  const DistanceField field = shortest_path_distances(map, target);
  int worst = 0;
  for (const Coord& p : positions) {
    if (!field.reachable(p)) throw ContractError("optimal_steps: target unreachable");
    worst = std::max(worst, field.at(p));
  }
  return worst;
}

// Same, with the target taken as the centroid of `positions`. Remapping
// ties (obstacle centroids) are broken with a fixed-seed stream.
inline int optimal_steps(const GridMap& map, const std::vector<Coord>& positions) {
  if (!is_rendezvous_feasible(map, positions)) throw ContractError("optimal_steps: robots cannot meet");
  Rng rng(0);
  return optimal_steps(map, positions, compute_target(positions, map, rng));
}

enum class ActionSelection { Greedy, Sample };

// Every robot, learner included, follows `net`.
struct PolicyDriver {
  const PolicyValueNet* net;
  ActionSelection mode = ActionSelection::Greedy;

  int operator()(const ObsVector& obs, const ActionMask& mask, Rng& rng) const {
    const Probs p = masked_distribution(net->forward(obs).logits, mask);
    return mode == ActionSelection::Greedy ? greedy_action(p) : sample_action(p, rng);
  }
};

struct EvalEpisode {
  std::vector<Coord> initial_positions;
  Coord initial_target;
  int optimal = 0;  // bottleneck distance to the initial target
  int steps = 0;
  bool achieved = false;
  Coord meeting_cell;
  int bottleneck_to_meeting = 0;  // bottleneck distance to the cell actually met at
  double reward_sum = 0.0;

  std::optional<int> gap() const {
    if (!achieved) return std::nullopt;
    return steps - optimal;
  }
};

// Runs one episode from the environment's current reset state.
template <class Policy>
EvalEpisode run_episode(Env& env, const ObsVector& first_obs, Policy&& policy, Rng& rng) {
  EvalEpisode ep;
  ep.initial_positions = env.state().positions;
  ep.initial_target = env.state().target;
  ep.optimal = optimal_steps(env.map(), ep.initial_positions, ep.initial_target);
  ObsVector obs = first_obs;
  if (env.state().done) {
    ep.achieved = true;
  }
  while (!ep.achieved) {
    const int a = policy(obs, env.policy_mask(0), rng);
    StepResult r = env.step(a, policy, rng);
    ++ep.steps;
    ep.reward_sum += r.reward;
    if (r.done) ep.achieved = true;
    if (r.done || r.info.truncated) break;
    obs = std::move(r.obs);
  }
  ep.meeting_cell = env.state().positions.front();
  if (ep.achieved) {
    const DistanceField field = shortest_path_distances(env.map(), ep.meeting_cell);
    for (const Coord& p : ep.initial_positions) ep.bottleneck_to_meeting = std::max(ep.bottleneck_to_meeting, field.at(p));
  }
  return ep;
}

struct GapReport {
  std::vector<EvalEpisode> episodes;
  int achieved = 0;
  std::optional<double> median_gap;
  std::optional<double> mean_gap;
  double success_rate = 0.0;
  bool lower_bound_holds = true;  // steps >= bottleneck distance to the actual meeting cell
};

inline std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline GapReport summarize(std::vector<EvalEpisode> episodes) {
  GapReport r;
  std::vector<double> gaps;
  for (const auto& ep : episodes) {
    if (!ep.achieved) continue;
    ++r.achieved;
    gaps.push_back(static_cast<double>(*ep.gap()));
    if (ep.steps < ep.bottleneck_to_meeting) r.lower_bound_holds = false;
  }
  r.median_gap = median(gaps);
  if (!gaps.empty()) {
    double s = 0.0;
    for (double g : gaps) s += g;
    r.mean_gap = s / static_cast<double>(gaps.size());
  }
  r.success_rate = episodes.empty() ? 0.0 : static_cast<double>(r.achieved) / static_cast<double>(episodes.size());
  r.episodes = std::move(episodes);
  return r;
}

// Greedy rollouts of `net` on fresh resets; `map` overrides generation.
inline GapReport optimality_gap(const PolicyValueNet& net, const EnvConfig& cfg, int trials, std::uint64_t seed,
                                const GridMap* map = nullptr, ActionSelection mode = ActionSelection::Greedy) {
  if (net.input_dim() != cfg.obs_dim()) throw ContractError("optimality_gap: model does not match n_p");
  Env env = map != nullptr ? Env(cfg, *map) : Env(cfg);
  Rng rng(seed);
  std::vector<EvalEpisode> episodes;
  episodes.reserve(static_cast<std::size_t>(trials));
  const PolicyDriver policy{&net, mode};
  for (int i = 0; i < trials; ++i) {
    const ObsVector obs = env.reset(rng);
    episodes.push_back(run_episode(env, obs, policy, rng));
  }
  return summarize(std::move(episodes));
}

// Rendezvous success rate with exactly k robots under a model trained for
// n_p >= k (absent robots are zero-padded).
inline double padding_compat(const PolicyValueNet& net, EnvConfig cfg, int k, int episodes, std::uint64_t seed,
                             const GridMap* map = nullptr) {
  if (k < 2 || k > cfg.n_p) throw ContractError("padding_compat: robot count must lie in [2, n_p]");
  if (episodes < 1) throw ContractError("padding_compat: need at least one episode");
  cfg.fixed_robot_count = k;
  return optimality_gap(net, cfg, episodes, seed, map).success_rate;
}

struct LatencyStats {
  int samples = 0;
  double mean_us = 0.0;
  double p50_us = 0.0;
  double p99_us = 0.0;
  double max_us = 0.0;
  bool p99_under_30ms() const { return p99_us < 30'000.0; }
};

// Wall-clock cost of forward + mask + sample per action, over observations
// of random robot placements on a map of the given size.
inline LatencyStats bench_inference(const PolicyValueNet& net, const EnvConfig& cfg, int samples, std::uint64_t seed) {
  if (samples < 1) throw ContractError("bench_inference: need at least one sample");
  Env env(cfg);
  Rng rng(seed);
  std::vector<std::pair<ObsVector, ActionMask>> inputs;
  inputs.reserve(static_cast<std::size_t>(samples));
  for (int i = 0; i < samples; ++i) {
    env.reset(rng);
    const int robot = rng.below_int(env.state().active_count);
    inputs.emplace_back(env.observation(robot), env.true_mask(robot));
  }

  std::vector<double> us(static_cast<std::size_t>(samples));
  volatile int sink = 0;
  for (int i = 0; i < samples; ++i) {
    const auto& [obs, mask] = inputs[static_cast<std::size_t>(i)];
    const auto t0 = std::chrono::steady_clock::now();
    const Probs p = masked_distribution(net.forward(obs).logits, mask);
    sink = sink + sample_action(p, rng);
    const auto t1 = std::chrono::steady_clock::now();
    us[static_cast<std::size_t>(i)] = std::chrono::duration<double, std::micro>(t1 - t0).count();
  }

  LatencyStats s;
  s.samples = samples;
  for (double u : us) s.mean_us += u;
  s.mean_us /= samples;
  std::sort(us.begin(), us.end());
  const auto pct = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * samples)) - 1;
    return us[std::min(idx, us.size() - 1)];
  };
  s.p50_us = pct(0.50);
  s.p99_us = pct(0.99);
  s.max_us = us.back();
  return s;
}

// Same trainer, different reward function.
inline TrainResult run_baseline(RewardVariant variant, TrainConfig cfg, const TrainOutputs& outputs = {},
                                const GridMap* map = nullptr) {
  cfg.env.variant = variant;
  return train(cfg, outputs, map);
}

// Mean of the MST column over iterations [first, last), skipping NA rows.
inline std::optional<double> mean_mst(const std::vector<IterationMetrics>& metrics, std::size_t first,
                                      std::size_t last) {
  double s = 0.0;
  int n = 0;
  for (std::size_t i = first; i < std::min(last, metrics.size()); ++i) {
    if (!metrics[i].mst) continue;
    s += *metrics[i].mst;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return s / n;
}

// Curves for plotting: one row per (label, iteration) with MST and RM
// averaged across the runs sharing a label, plus their spread.
struct Curve {
  std::string label;
  std::vector<std::vector<IterationMetrics>> runs;
};

inline void write_curves(std::ostream& out, const std::vector<Curve>& curves) {
  out << "label,iteration,mst_mean,mst_std,rm_mean,rm_std,runs\n";
  for (const auto& c : curves) {
    std::size_t iters = 0;
    for (const auto& r : c.runs) iters = std::max(iters, r.size());
    for (std::size_t i = 0; i < iters; ++i) {
      std::vector<double> mst;
      std::vector<double> rm;
      for (const auto& r : c.runs) {
        if (i >= r.size()) continue;
        if (r[i].mst) mst.push_back(*r[i].mst);
        if (r[i].rm) rm.push_back(*r[i].rm);
      }
      const auto stats = [&out](const std::vector<double>& v) {
        if (v.empty()) {
          out << ",NA,NA";
          return;
        }
        double m = 0.0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - m) * (x - m);
        out << ',' << m << ',' << std::sqrt(var / static_cast<double>(v.size()));
      };
      out << c.label << ',' << (i + 1);
      stats(mst);
      stats(rm);
      out << ',' << c.runs.size() << '\n';
    }
  }
}

// Reads back a metrics CSV written by `train`.
inline std::vector<IterationMetrics> read_metrics_csv(std::istream& in) {
  std::vector<IterationMetrics> rows;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("metrics: empty file");
  if (line != "iteration,env_steps,mst,rm,policy_loss,value_loss,entropy,seconds")
    throw FormatError("metrics: unexpected header '" + line + "'");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cols.push_back(cell);
    if (cols.size() != 8) throw FormatError("metrics: expected 8 columns");
    const auto opt = [](const std::string& s) -> std::optional<double> {
      if (s == "NA") return std::nullopt;
      return std::stod(s);
    };
    IterationMetrics m;
    m.iteration = std::stoi(cols[0]);
    m.env_steps = std::stoll(cols[1]);
    m.mst = opt(cols[2]);
    m.rm = opt(cols[3]);
    m.policy_loss = std::stod(cols[4]);
    m.value_loss = std::stod(cols[5]);
    m.entropy = std::stod(cols[6]);
    m.seconds = std::stod(cols[7]);
    rows.push_back(m);
  }
  return rows;
}

}  // namespace dmssd
