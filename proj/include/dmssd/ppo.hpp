#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dmssd/common.hpp"
#include "dmssd/config.hpp"
#include "dmssd/env.hpp"
#include "dmssd/neural.hpp"

namespace dmssd {

struct EpisodeStats {
  int length = 0;
  double reward_sum = 0.0;
  bool achieved = false;
  std::vector<Coord> initial_positions;
  Coord final_cell;
};

// Mean length over achieved episodes; nullopt when none were achieved.
inline std::optional<double> mean_steps_taken(const std::vector<EpisodeStats>& stats) {
  if (stats.empty()) throw ContractError("mean_steps_taken: no episodes");
  double sum = 0.0;
  int n = 0;
  for (const auto& s : stats) {
    if (!s.achieved) continue;
    sum += s.length;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

inline double rewards_mean(const std::vector<EpisodeStats>& stats) {
  if (stats.empty()) throw ContractError("rewards_mean: no episodes");
  double sum = 0.0;
  for (const auto& s : stats) sum += s.reward_sum;
  return sum / static_cast<double>(stats.size());
}

struct RolloutBuffer {
  int obs_dim = 0;
  std::vector<double> obs;  // row-major, one row per step
  std::vector<int> actions;
  std::vector<ActionMask> masks;
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<std::uint8_t> terminal;   // episode ended with rendezvous
  std::vector<std::uint8_t> truncated;  // episode cut at the step budget
  std::vector<double> truncation_values;  // V(final obs) for truncated steps
  double bootstrap_value = 0.0;  // V(obs after the last step) if still running

  std::vector<double> advantages;
  std::vector<double> returns;
  bool advantages_ready = false;

  std::vector<EpisodeStats> episodes;  // episodes completed inside this buffer

  std::size_t size() const { return actions.size(); }
  std::span<const double> observation(std::size_t i) const {
    return {obs.data() + i * static_cast<std::size_t>(obs_dim), static_cast<std::size_t>(obs_dim)};
  }
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Generalised advantage estimation. Terminal steps zero the tail; truncated
// steps bootstrap from their stored final-state value and also cut the tail
// (the next stored step belongs to a new episode).
inline GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                             std::span<const std::uint8_t> terminal, std::span<const std::uint8_t> truncated,
                             std::span<const double> truncation_values, double gamma, double lambda,
                             double bootstrap_value) {
  const std::size_t n = rewards.size();
  if (values.size() != n || terminal.size() != n || truncated.size() != n || truncation_values.size() != n)
    throw ContractError("compute_gae: sequence lengths differ");
  GaeResult r{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  double next_adv = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    double next_value = 0.0;
    double carry = 0.0;
    if (terminal[k]) {
      next_value = 0.0;
    } else if (truncated[k]) {
      next_value = truncation_values[k];
    } else {
      next_value = k + 1 < n ? values[k + 1] : bootstrap_value;
      carry = gamma * lambda * next_adv;
    }
    const double delta = rewards[k] + gamma * next_value - values[k];
    r.advantages[k] = delta + carry;
    next_adv = r.advantages[k];
  }
  for (std::size_t k = 0; k < n; ++k) r.returns[k] = r.advantages[k] + values[k];
  return r;
}

inline void finish_rollout(RolloutBuffer& buf, const PpoConfig& cfg) {
  if (buf.advantages_ready) throw ContractError("finish_rollout: advantages already computed");
  auto gae = compute_gae(buf.rewards, buf.values, buf.terminal, buf.truncated, buf.truncation_values, cfg.gamma,
                         cfg.gae_lambda, buf.bootstrap_value);
  buf.advantages = std::move(gae.advantages);
  buf.returns = std::move(gae.returns);
  buf.advantages_ready = true;
}

// Persistent rollout state: the environment keeps running across
// iterations, so an episode may span two buffers.
struct RolloutWorker {
  Env env;
  Rng rng;
  ObsVector obs;
  bool needs_reset = true;
  int episode_length = 0;
  double episode_reward = 0.0;
  std::vector<Coord> episode_start;

  RolloutWorker(Env e, std::uint64_t seed) : env(std::move(e)), rng(seed) {}
};

inline RolloutBuffer collect_rollout(RolloutWorker& worker, const PolicyValueNet& net, int rollout_steps) {
  Env& env = worker.env;
  if (net.input_dim() != env.config().obs_dim())
    throw ContractError("collect_rollout: network input does not match environment observation");
  RolloutBuffer buf;
  buf.obs_dim = net.input_dim();
  const auto n = static_cast<std::size_t>(rollout_steps);
  buf.obs.reserve(n * static_cast<std::size_t>(buf.obs_dim));
  for (auto* v : {&buf.log_probs, &buf.rewards, &buf.values, &buf.truncation_values}) v->reserve(n);

  for (int step = 0; step < rollout_steps; ++step) {
    if (worker.needs_reset) {
      worker.obs = env.reset(worker.rng);
      worker.needs_reset = false;
      worker.episode_length = 0;
      worker.episode_reward = 0.0;
      worker.episode_start = env.state().positions;
    }
    const ActionMask mask = env.policy_mask(0);
    const NetOutput out = net.forward(worker.obs);
    const Probs probs = masked_distribution(out.logits, mask);
    const int action = sample_action(probs, worker.rng);

    buf.obs.insert(buf.obs.end(), worker.obs.begin(), worker.obs.end());
    buf.actions.push_back(action);
    buf.masks.push_back(mask);
    buf.log_probs.push_back(std::log(probs[static_cast<std::size_t>(action)]));
    buf.values.push_back(out.value);

    StepResult res = env.step(action, net, worker.rng);
    ++worker.episode_length;
    worker.episode_reward += res.reward;
    buf.rewards.push_back(res.reward);
    buf.terminal.push_back(res.done ? 1 : 0);
    buf.truncated.push_back(res.info.truncated ? 1 : 0);
    buf.truncation_values.push_back(res.info.truncated ? net.forward(res.obs).value : 0.0);

    if (res.done || res.info.truncated) {
      buf.episodes.push_back(EpisodeStats{worker.episode_length, worker.episode_reward, res.done,
                                          worker.episode_start, env.state().positions.front()});
      worker.needs_reset = true;
    } else {
      worker.obs = std::move(res.obs);
    }
  }
  buf.bootstrap_value = worker.needs_reset ? 0.0 : net.forward(worker.obs).value;
  return buf;
}

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  int minibatches = 0;
};

// Per-sample loss pieces of the clipped PPO objective, with the gradient
// with respect to the logits and the value.
struct SampleLoss {
  double policy = 0.0;  // -min(r A, clip(r) A)
  double unclipped = 0.0;  // -r A
  double value = 0.0;  // (V - R)^2
  double entropy = 0.0;
  double ratio = 1.0;
  double log_prob = 0.0;
  Logits dlogits{};
  double dvalue = 0.0;
};

// Gradients are those of  policy + vf_coef * value - ent_coef * entropy,
// scaled by `weight` (1 / minibatch size).
inline SampleLoss ppo_sample_loss(const NetOutput& out, const ActionMask& mask, int action, double old_log_prob,
                                  double advantage, double ret, const PpoConfig& cfg, double weight) {
  SampleLoss s;
  const Probs p = masked_distribution(out.logits, mask);
  const auto a = static_cast<std::size_t>(action);
  const auto lpe = log_prob_entropy(p, action);
  s.log_prob = lpe.log_prob;
  s.entropy = lpe.entropy;
  s.ratio = std::exp(lpe.log_prob - old_log_prob);
  const double surr1 = s.ratio * advantage;
  const double clipped = std::clamp(s.ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range);
  const double surr2 = clipped * advantage;
  s.policy = -std::min(surr1, surr2);
  s.unclipped = -surr1;
  // d(policy)/d(log_prob): live only when the unclipped branch is the minimum.
  const double dlogp = surr1 <= surr2 ? -advantage * s.ratio : 0.0;

  const double diff = out.value - ret;
  s.value = diff * diff;
  s.dvalue = weight * cfg.vf_coef * 2.0 * diff;

  for (std::size_t j = 0; j < kNumActions; ++j) {
    if (!mask[j]) continue;  // masked logits are replaced by a constant
    const double dlogp_dz = (j == a ? 1.0 : 0.0) - p[j];
    const double dH_dz = p[j] > 0.0 ? -p[j] * (std::log(p[j]) + s.entropy) : 0.0;
    s.dlogits[j] = weight * (dlogp * dlogp_dz - cfg.ent_coef * dH_dz);
  }
  return s;
}

inline double clip_grad_norm(std::span<double> grads, double max_norm) {
  double sq = 0.0;
  for (double g : grads) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for (double& g : grads) g *= scale;
  }
  return norm;
}

inline std::vector<double> normalized_advantages(const std::vector<double>& adv) {
  const double n = static_cast<double>(adv.size());
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double std_dev = adv.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  std::vector<double> out(adv.size());
  for (std::size_t i = 0; i < adv.size(); ++i) out[i] = (adv[i] - mean) / (std_dev + 1e-8);
  return out;
}

inline UpdateStats ppo_update(const RolloutBuffer& buf, PolicyValueNet& net, OptimState& opt, const PpoConfig& cfg,
                              Rng& rng) {
  if (!buf.advantages_ready) throw ContractError("ppo_update: advantages not computed");
  const std::size_t n = buf.size();
  if (n == 0) return {};
  if (opt.m.size() != net.size()) opt = OptimState(net.size());

  const std::vector<double> adv = n > 1 ? normalized_advantages(buf.advantages) : buf.advantages;
  const std::size_t batch = std::min(n, static_cast<std::size_t>(cfg.minibatch_size));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grads(net.size());
  ForwardCache cache;
  UpdateStats stats;
  double clipped_count = 0.0;
  double samples = 0.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      const double weight = 1.0 / static_cast<double>(end - start);
      std::fill(grads.begin(), grads.end(), 0.0);
      double pl = 0.0;
      double vl = 0.0;
      double ent = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        net.forward(buf.observation(i), cache);
        const SampleLoss s = ppo_sample_loss(cache.out, buf.masks[i], buf.actions[i], buf.log_probs[i], adv[i],
                                             buf.returns[i], cfg, weight);
        net.backward(cache, s.dlogits, s.dvalue, grads);
        pl += s.policy * weight;
        vl += s.value * weight;
        ent += s.entropy * weight;
        stats.approx_kl += (s.ratio - 1.0) - (s.log_prob - buf.log_probs[i]);
        if (std::abs(s.ratio - 1.0) > cfg.clip_range) clipped_count += 1.0;
        samples += 1.0;
      }
      const double total = pl + cfg.vf_coef * vl - cfg.ent_coef * ent;
      if (!std::isfinite(total)) {
        std::ostringstream msg;
        msg << "ppo_update: non-finite loss (policy " << pl << ", value " << vl << ", entropy " << ent << ") at epoch "
            << epoch << ", minibatch starting " << start;
        throw TrainingError(msg.str());
      }
      clip_grad_norm(grads, cfg.max_grad_norm);
      adam_step(net.params(), grads, opt, cfg.learning_rate);
      stats.policy_loss += pl;
      stats.value_loss += vl;
      stats.entropy += ent;
      ++stats.minibatches;
    }
  }
  const double mb = std::max(1, stats.minibatches);
  stats.policy_loss /= mb;
  stats.value_loss /= mb;
  stats.entropy /= mb;
  stats.approx_kl /= std::max(1.0, samples);
  stats.clip_fraction = clipped_count / std::max(1.0, samples);
  return stats;
}

// ---------------------------------------------------------------------------
// Training driver.

struct IterationMetrics {
  int iteration = 0;
  long long env_steps = 0;
  std::optional<double> mst;
  std::optional<double> rm;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double seconds = 0.0;
};

inline void write_metrics_header(std::ostream& out) {
  out << "iteration,env_steps,mst,rm,policy_loss,value_loss,entropy,seconds\n";
}

inline void write_metrics_row(std::ostream& out, const IterationMetrics& m) {
  const auto opt = [&out](const std::optional<double>& v) {
    if (v) out << std::setprecision(10) << *v;
    else out << "NA";
  };
  out << m.iteration << ',' << m.env_steps << ',';
  opt(m.mst);
  out << ',';
  opt(m.rm);
  out << ',' << std::setprecision(10) << m.policy_loss << ',' << m.value_loss << ',' << m.entropy << ','
      << std::fixed << std::setprecision(3) << m.seconds << std::defaultfloat << '\n';
}

struct TrainResult {
  PolicyValueNet net;
  std::vector<IterationMetrics> metrics;
  std::vector<std::vector<EpisodeStats>> episodes;  // per iteration
};

// Where a run writes its artifacts; an empty directory keeps everything in
// memory.
struct TrainOutputs {
  std::filesystem::path dir;
  std::ostream* log = nullptr;
};

inline PolicyValueNet make_network(const TrainConfig& cfg, Rng& rng) {
  PolicyValueNet net(cfg.env.obs_dim(), cfg.env.n_p, cfg.ppo.hidden, cfg.ppo.hidden);
  net.initialize(rng);
  return net;
}

inline TrainResult train(const TrainConfig& cfg, const TrainOutputs& outputs = {}, const GridMap* map = nullptr) {
  cfg.validate();
  Rng master(cfg.seed);
  Rng init_rng = master.split();
  Rng update_rng = master.split();
  const std::uint64_t env_seed = master.next_u64();

  Env env = map != nullptr ? Env(cfg.env, *map) : Env(cfg.env);
  RolloutWorker worker(std::move(env), env_seed);

  TrainResult result{make_network(cfg, init_rng), {}, {}};
  OptimState opt(result.net.size());

  std::ofstream metrics_file;
  const bool to_disk = !outputs.dir.empty();
  if (to_disk) {
    std::filesystem::create_directories(outputs.dir);
    metrics_file.open(outputs.dir / "metrics.csv", std::ios::binary);
    if (!metrics_file) throw Error("train: cannot write metrics.csv");
    write_metrics_header(metrics_file);
    metrics_file.flush();
    save_model((outputs.dir / "model.bin").string(), result.net);
  }

  long long env_steps = 0;
  for (int it = 1; it <= cfg.ppo.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    RolloutBuffer buf = collect_rollout(worker, result.net, cfg.ppo.rollout_steps);
    finish_rollout(buf, cfg.ppo);
    const UpdateStats us = ppo_update(buf, result.net, opt, cfg.ppo, update_rng);
    env_steps += static_cast<long long>(buf.size());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    IterationMetrics m;
    m.iteration = it;
    m.env_steps = env_steps;
    if (!buf.episodes.empty()) {
      m.mst = mean_steps_taken(buf.episodes);
      m.rm = rewards_mean(buf.episodes);
    }
    m.policy_loss = us.policy_loss;
    m.value_loss = us.value_loss;
    m.entropy = us.entropy;
    m.seconds = cfg.record_timing ? secs : 0.0;
    result.metrics.push_back(m);
    result.episodes.push_back(std::move(buf.episodes));

    if (outputs.log != nullptr) {
      *outputs.log << "iter " << it << " steps " << env_steps << " mst " << (m.mst ? std::to_string(*m.mst) : "NA")
                   << " rm " << (m.rm ? std::to_string(*m.rm) : "NA") << " episodes "
                   << result.episodes.back().size() << " (" << std::fixed << std::setprecision(2) << secs << "s)"
                   << std::defaultfloat << '\n';
    }
    if (to_disk) {
      write_metrics_row(metrics_file, m);
      metrics_file.flush();
      if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0)
        save_model((outputs.dir / "model.bin").string(), result.net);
    }
  }
  if (to_disk) save_model((outputs.dir / "model.bin").string(), result.net);
  return result;
}

}  // namespace dmssd
