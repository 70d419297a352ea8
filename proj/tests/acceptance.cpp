// Acceptance gate: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Artifacts (curves, metrics, models) go to $DMSSD_ACCEPTANCE_DIR,
// default ./acceptance_artifacts.

#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmssd/evalsuite.hpp"
#include "dmssd/swarm.hpp"
#include "support.hpp"

using namespace dmssd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

fs::path artifact_dir() {
  const char* env = std::getenv("DMSSD_ACCEPTANCE_DIR");
  fs::path dir = env != nullptr && *env != '\0' ? fs::path(env) : fs::path("acceptance_artifacts");
  fs::create_directories(dir);
  return dir;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Shared desk-scale setup: 20x20, 3 robots, 5% static / 2% dynamic, 60
// iterations, seeds 1..3.

constexpr std::uint64_t kSeeds[] = {1, 2, 3};
constexpr int kIterations = 60;

TrainConfig desk_config(RewardVariant variant, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.env.width = cfg.env.height = 20;
  cfg.env.static_density = 0.05;
  cfg.env.dynamic_density = 0.02;
  cfg.env.n_p = 3;
  cfg.env.fixed_robot_count = 3;
  cfg.env.variant = variant;
  cfg.ppo.iterations = kIterations;
  cfg.seed = seed;
  return cfg;
}

struct Trained {
  std::map<std::pair<RewardVariant, std::uint64_t>, TrainResult> runs;

  const TrainResult& get(RewardVariant v, std::uint64_t seed, const fs::path& dir) {
    const auto key = std::make_pair(v, seed);
    auto it = runs.find(key);
    if (it != runs.end()) return it->second;
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = train(desk_config(v, seed), {dir / variant_name(v) / ("seed" + std::to_string(seed))});
    std::cerr << "  trained " << variant_name(v) << " seed " << seed << " in " << fmt(seconds_since(t0), 1) << "s\n";
    return runs.emplace(key, std::move(r)).first->second;
  }
};

// Seed-averaged mean MST over iterations [first, last); nullopt when a seed
// never achieved a rendezvous in that window.
std::optional<double> seed_mean_mst(Trained& t, RewardVariant v, std::size_t first, std::size_t last,
                                    const fs::path& dir) {
  double s = 0.0;
  for (auto seed : kSeeds) {
    const auto m = mean_mst(t.get(v, seed, dir).metrics, first, last);
    if (!m) return std::nullopt;
    s += *m;
  }
  return s / std::size(kSeeds);
}

// ---------------------------------------------------------------------------

Outcome criterion1() {
  EnvConfig cfg;
  cfg.width = 5;
  cfg.height = 3;
  cfg.static_density = cfg.dynamic_density = 0.0;
  cfg.n_p = 2;
  constexpr int kLeft = 2, kRight = 3, kStay = 4;
  const auto others = [](int a) { return [a](const ObsVector&, const ActionMask&, Rng&) { return a; }; };

  struct Case {
    const char* name;
    Coord learner, other;
    int learner_action, other_action;
    double expected;
    bool terminal;
  };
  const std::vector<Case> cases = {
      {"approach", {0, 1}, {4, 1}, kRight, kStay, 1.0, false},
      {"retreat", {1, 1}, {4, 1}, kLeft, kStay, -10.0, false},
      {"stay", {1, 1}, {4, 1}, kStay, kStay, -5.0, false},
      {"approach+goal", {1, 1}, {3, 1}, kRight, kLeft, 11.0, true},
      {"retreat+goal", {2, 1}, {1, 1}, kLeft, kStay, 0.0, true},
      {"stay+goal", {2, 1}, {1, 1}, kStay, kRight, 5.0, true},
  };
  int exact = 0;
  std::string misses;
  for (const auto& c : cases) {
    Env env(cfg, GridMap(5, 3, 0));
    Rng rng(0);
    env.reset_with({c.learner, c.other}, rng);
    const StepResult r = env.step(c.learner_action, others(c.other_action), rng);
    if (r.reward == c.expected && r.done == c.terminal) {
      ++exact;
    } else {
      misses += std::string(" ") + c.name + "=" + fmt(r.reward);
    }
  }
  const bool formula = reward(-3, -2, false, EnvConfig{}) == 1.0 && reward(-3, -4, false, EnvConfig{}) == -10.0 &&
                       reward(-3, -3, false, EnvConfig{}) == -5.0 && reward(-1, 0, true, EnvConfig{}) == 11.0 &&
                       reward(-1, -2, true, EnvConfig{}) == 0.0 && reward(0, 0, true, EnvConfig{}) == 5.0;
  return {exact == 6 && formula,
          std::to_string(exact) + "/6 environment cases exact, formula " + (formula ? "exact" : "WRONG") + misses};
}

Outcome criterion2() {
  Rng rng(2024);
  long long sampled = 0, masked = 0, illegal = 0;
  while (sampled < 100000) {
    EnvConfig cfg;
    cfg.width = 5 + rng.below_int(20);
    cfg.height = 5 + rng.below_int(20);
    cfg.static_density = 0.2 * rng.uniform();
    cfg.dynamic_density = 0.2 * rng.uniform();
    cfg.map_seed = rng.next_u64();
    cfg.n_p = 2 + rng.below_int(4);
    cfg.max_episode_steps = 50;
    Env env(cfg);
    // random network, sharpened so masked moves would often be preferred
    PolicyValueNet net(cfg.obs_dim(), cfg.n_p, 16, 16);
    for (double& p : net.params()) p = 2.0 * rng.normal();

    ObsVector obs;
    try {
      obs = env.reset(rng);
    } catch (const MapDegenerateError&) {
      continue;
    }
    for (int t = 0; t < 50 && sampled < 100000; ++t) {
      const EnvState before = env.state();
      const GridMap map_before = env.map();
      std::vector<ActionMask> masks;
      for (int i = 0; i < before.active_count; ++i) masks.push_back(env.true_mask(i));
      const int a = sample_action(masked_distribution(net.forward(obs).logits, masks[0]), rng);
      StepResult r = env.step(a, PolicyDriver{&net, ActionSelection::Sample}, rng);
      for (int i = 0; i < before.active_count; ++i) {
        const int ai = r.info.actions[static_cast<std::size_t>(i)];
        ++sampled;
        // robots act in index order on fresh positions, but the obstacle
        // layer is fixed for the whole step, so the decision-time mask of
        // robot i is the one computed before the step
        if (!masks[static_cast<std::size_t>(i)][static_cast<std::size_t>(ai)]) ++masked;
        const Coord from = before.positions[static_cast<std::size_t>(i)];
        const Coord to = env.state().positions[static_cast<std::size_t>(i)];
        if (to != apply_action(from, ai) || (ai != 4 && !map_before.is_open(to)) || env.map().is_static(to)) ++illegal;
      }
      if (r.done || r.info.truncated) break;
      obs = std::move(r.obs);
    }
  }
  return {masked == 0 && illegal == 0, std::to_string(sampled) + " sampled actions, " + std::to_string(masked) +
                                           " masked, " + std::to_string(illegal) + " illegal landings"};
}

Outcome criterion3() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(3);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    PolicyValueNet net = oracle::random_net(3, 64, rng);
    const auto x = oracle::random_input(net.input_dim(), rng);
    worst = std::max(worst, oracle::max_fd_relative_error(net, x, rng));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          "100 pairs, 2x64 net, max relative error " + [&] {
            std::ostringstream o;
            o << std::scientific << std::setprecision(2) << worst;
            return o.str();
          }() + " (< 1e-4), " + fmt(secs, 1) + "s (< 60s)"};
}

Outcome criterion4() {
  Rng rng(4);
  long long mismatches = 0;
  for (int c = 0; c < 10000; ++c) {
    const int w = 1 + rng.below_int(8), h = 1 + rng.below_int(8);
    GridMap map(w, h, 0);
    std::vector<std::size_t> cells(map.cell_count());
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
    rng.shuffle(cells);
    const int k = rng.below_int(std::min(12, w * h) + 1);
    for (int i = 0; i < k; ++i) map.set_static(map.coord(cells[static_cast<std::size_t>(i)]));

    const std::size_t n = map.cell_count();
    constexpr int kInf = 1 << 29;
    std::vector<int> d(n * n, kInf);
    for (std::size_t i = 0; i < n; ++i) {
      const Coord ci = map.coord(i);
      if (map.is_static(ci)) continue;
      d[i * n + i] = 0;
      for (int a = 0; a < 4; ++a) {
        const Coord nb = apply_action(ci, a);
        if (map.is_passable(nb)) d[i * n + map.index(nb)] = 1;
      }
    }
    for (std::size_t m = 0; m < n; ++m)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] = std::min(d[i * n + j], d[i * n + m] + d[m * n + j]);
    for (std::size_t s = 0; s < n; ++s) {
      if (map.is_static(map.coord(s))) continue;
      const DistanceField f = shortest_path_distances(map, map.coord(s));
      for (std::size_t t = 0; t < n; ++t) {
        const int fw = d[s * n + t] >= kInf ? DistanceField::kUnreachable : d[s * n + t];
        if (f.dist[t] != fw) ++mismatches;
      }
    }
  }
  return {mismatches == 0, "10000 maps up to 8x8 with <= 12 obstacles, " + std::to_string(mismatches) +
                               " distance mismatches against Floyd-Warshall"};
}

// Mean oracle optimal steps over the achieved episodes of the final 10
// iterations, pooled over seeds.
double mean_oracle_optimal(Trained& t, const fs::path& dir, const GridMap& map) {
  double s = 0.0;
  long long n = 0;
  for (auto seed : kSeeds) {
    const TrainResult& r = t.get(RewardVariant::Ours, seed, dir);
    for (std::size_t it = r.episodes.size() - 10; it < r.episodes.size(); ++it) {
      for (const auto& e : r.episodes[it]) {
        if (!e.achieved) continue;
        s += optimal_steps(map, e.initial_positions);
        ++n;
      }
    }
  }
  return n > 0 ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

Outcome criterion5(Trained& t, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto first5 = seed_mean_mst(t, RewardVariant::Ours, 0, 5, dir);
  const auto final10 = seed_mean_mst(t, RewardVariant::Ours, kIterations - 10, kIterations, dir);
  const EnvConfig env = desk_config(RewardVariant::Ours, 1).env;
  const GridMap map = generate_map(env.width, env.height, env.static_density, env.dynamic_density, env.map_seed);
  const double optimal = mean_oracle_optimal(t, dir, map);
  const double secs = seconds_since(t0);
  if (!first5 || !final10) return {false, "no rendezvous achieved in the first-5 or final-10 window"};
  const bool bound = *final10 <= 2.0 * optimal;
  const bool trend = *final10 < 0.5 * *first5;
  return {bound && trend && secs <= 1800.0,
          "final-10 MST " + fmt(*final10, 2) + " vs 2x oracle optimal " + fmt(2.0 * optimal, 2) +
              (bound ? " (ok)" : " (EXCEEDED)") + "; first-5 MST " + fmt(*first5, 2) + ", drop " +
              fmt(100.0 * (1.0 - *final10 / *first5), 1) + "% (>= 50% " + (trend ? "ok" : "MISSED") + "); " +
              fmt(secs, 0) + "s for 3 seeds"};
}

Outcome criterion6(Trained& t, const fs::path& dir) {
  const TrainResult& r = t.get(RewardVariant::Ours, 1, dir);
  const EnvConfig env = desk_config(RewardVariant::Ours, 1).env;
  const GapReport g = optimality_gap(r.net, env, 100, 606);
  const bool median_ok = g.median_gap && *g.median_gap <= 5.0;
  return {median_ok && g.lower_bound_holds,
          "100 greedy trials, " + std::to_string(g.achieved) + " achieved, median gap " +
              (g.median_gap ? fmt(*g.median_gap, 1) : std::string("NA")) + " (<= 5), lower bound " +
              (g.lower_bound_holds ? "holds for all achieved trials" : "VIOLATED")};
}

Outcome criterion7(Trained& t, const fs::path& dir) {
  const TrainResult& r = t.get(RewardVariant::Ours, 1, dir);
  EnvConfig small = desk_config(RewardVariant::Ours, 1).env;
  EnvConfig large = small;
  large.width = large.height = 70;
  const LatencyStats a = bench_inference(r.net, small, 10000, 707);
  const LatencyStats b = bench_inference(r.net, large, 10000, 708);
  const double ratio = a.mean_us / b.mean_us;
  const bool ok = a.p99_under_30ms() && b.p99_under_30ms() && ratio >= 0.5 && ratio <= 2.0;
  return {ok, "p99 " + fmt(a.p99_us, 1) + "us (20x20), " + fmt(b.p99_us, 1) + "us (70x70), limit 30000us; mean ratio " +
                  fmt(ratio, 3) + " in [0.5, 2]"};
}

Outcome criterion8(Trained& t, const fs::path& dir) {
  const std::vector<RewardVariant> variants = {RewardVariant::Ours, RewardVariant::OursNoMask, RewardVariant::BaselineA,
                                               RewardVariant::BaselineB, RewardVariant::BaselineC};
  std::vector<Curve> curves;
  std::map<RewardVariant, double> final10;
  for (auto v : variants) {
    Curve c{variant_name(v), {}};
    for (auto seed : kSeeds) c.runs.push_back(t.get(v, seed, dir).metrics);
    curves.push_back(std::move(c));
    const auto m = seed_mean_mst(t, v, kIterations - 10, kIterations, dir);
    final10[v] = m ? *m : std::numeric_limits<double>::infinity();
  }
  std::ofstream out(dir / "ablation_curves.csv", std::ios::binary);
  write_curves(out, curves);

  bool lowest = true;
  std::string detail;
  for (auto v : variants) {
    if (v != RewardVariant::Ours && !(final10[RewardVariant::Ours] < final10[v])) lowest = false;
    detail += std::string(detail.empty() ? "" : ", ") + variant_name(v) + " " +
              (std::isfinite(final10[v]) ? fmt(final10[v], 2) : std::string("NA"));
  }
  return {lowest, "final-10 MST: " + detail + "; curves in " + (dir / "ablation_curves.csv").string()};
}

Outcome criterion9(const fs::path& dir) {
  TrainConfig cfg = desk_config(RewardVariant::Ours, 1);
  cfg.env.n_p = 4;
  cfg.env.fixed_robot_count = 0;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = train(cfg, {dir / "padding_np4"});
  std::cerr << "  trained n_p=4 model in " << fmt(seconds_since(t0), 1) << "s\n";
  const double k2 = padding_compat(r.net, cfg.env, 2, 100, 902);
  const double k3 = padding_compat(r.net, cfg.env, 3, 100, 903);
  return {k2 >= 0.9 && k3 >= 0.9,
          "n_p=4 model, success k=2 " + fmt(k2, 2) + ", k=3 " + fmt(k3, 2) + " over 100 episodes each (>= 0.90)"};
}

Outcome criterion10(Trained& t, const fs::path& dir) {
  const TrainResult& r = t.get(RewardVariant::Ours, 1, dir);
  const fs::path model = dir / "swarm_model.bin";
  save_model(model.string(), r.net);
  EnvConfig env = desk_config(RewardVariant::Ours, 1).env;
  env.width = env.height = 15;
  env.fixed_robot_count = 0;
  const GridMap map = generate_map(15, 15, env.static_density, env.dynamic_density, 15);
  save_map((dir / "swarm_map.txt").string(), map);

  int ok = 0;
  std::ofstream log(dir / "swarm_runs.csv", std::ios::binary);
  log << "scenario,run,success,meeting_x,meeting_y,survivors\n";
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 100; ++i) {
    swarm::OrchestrateOptions opt;
    opt.robots = 3;
    opt.env = env;
    opt.seed = 1000 + static_cast<std::uint64_t>(i);
    const swarm::RunReport rep = swarm::orchestrate(map, model.string(), opt);
    ok += rep.success ? 1 : 0;
    log << "all," << i << ',' << rep.success << ',' << (rep.meeting_cell ? rep.meeting_cell->x : -1) << ','
        << (rep.meeting_cell ? rep.meeting_cell->y : -1) << ',' << rep.robots.size() << '\n';
  }
  std::cerr << "  100 orchestrated runs in " << fmt(seconds_since(t0), 1) << "s\n";

  // One robot dies a few ticks in and the model server goes away once every
  // robot holds the model.
  int killed_ok = 0;
  const int kill_runs = 20;
  for (int i = 0; i < kill_runs; ++i) {
    swarm::OrchestrateOptions opt;
    opt.robots = 3;
    opt.env = env;
    opt.seed = 2000 + static_cast<std::uint64_t>(i);
    opt.kill_robot = i % 3;
    opt.kill_at_tick = 2;
    opt.kill_server_after_start = true;
    opt.peer_timeout_ms = 300;
    const swarm::RunReport rep = swarm::orchestrate(map, model.string(), opt);
    const bool survivors_met = rep.success && rep.robots.size() == 2 && rep.lost.size() == 1;
    killed_ok += survivors_met ? 1 : 0;
    log << "kill," << i << ',' << survivors_met << ',' << (rep.meeting_cell ? rep.meeting_cell->x : -1) << ','
        << (rep.meeting_cell ? rep.meeting_cell->y : -1) << ',' << rep.robots.size() << '\n';
  }

  Rng rng(10);
  int identical = 0;
  for (int i = 0; i < 10000; ++i) {
    wire::Message m;
    switch (rng.below_int(3)) {
      case 0:
        m = wire::StateMessage{wire::kProtocolVersion, static_cast<std::uint32_t>(rng.next_u64()), rng.next_u64(),
                               static_cast<std::int32_t>(rng.next_u64()), static_cast<std::int32_t>(rng.next_u64())};
        break;
      case 1:
        m = rng.below_int(2) == 0 ? wire::GetModel{} : wire::GetModel{rng.next_u64()};
        break;
      default:
        m = wire::ModelHeader{1 + rng.below(1u << 20), rng.next_u64(), static_cast<std::uint32_t>(rng.next_u64())};
    }
    identical += wire::decode(wire::encode(m)) == m ? 1 : 0;
  }

  const bool kill_ok = killed_ok * 100 >= 95 * kill_runs;
  return {ok >= 95 && kill_ok && identical == 10000,
          std::to_string(ok) + "/100 runs met at a common cell (>= 95); survivors met in " + std::to_string(killed_ok) +
              "/" + std::to_string(kill_runs) + " kill runs (server also killed); " + std::to_string(identical) +
              "/10000 fuzzed messages round-trip"};
}

Outcome criterion11(const fs::path& dir) {
  const auto same_file = [](const fs::path& a, const fs::path& b) {
    return read_file_bytes(a.string()) == read_file_bytes(b.string());
  };
  save_map((dir / "det_map_a.txt").string(), generate_map(50, 50, 0.05, 0.02, 42));
  save_map((dir / "det_map_b.txt").string(), generate_map(50, 50, 0.05, 0.02, 42));
  TrainConfig cfg = desk_config(RewardVariant::Ours, 7);
  cfg.ppo.iterations = 5;
  train(cfg, {dir / "det_train_a"});
  train(cfg, {dir / "det_train_b"});
  const bool maps = same_file(dir / "det_map_a.txt", dir / "det_map_b.txt");
  const bool metrics = same_file(dir / "det_train_a" / "metrics.csv", dir / "det_train_b" / "metrics.csv");
  const bool models = same_file(dir / "det_train_a" / "model.bin", dir / "det_train_b" / "model.bin");
  return {maps && metrics && models, std::string("map files ") + (maps ? "identical" : "DIFFER") + ", metrics CSVs " +
                                         (metrics ? "identical" : "DIFFER") + ", model files " +
                                         (models ? "identical" : "DIFFER")};
}

}  // namespace

int main() {
  const fs::path dir = artifact_dir();
  Trained trained;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 reward exactness", criterion1},
      {"2 masking soundness", criterion2},
      {"3 gradient correctness", criterion3},
      {"4 BFS oracle equivalence", criterion4},
      {"5 desk-scale convergence", [&] { return criterion5(trained, dir); }},
      {"6 optimality gap", [&] { return criterion6(trained, dir); }},
      {"7 inference latency", [&] { return criterion7(trained, dir); }},
      {"8 reward ablation", [&] { return criterion8(trained, dir); }},
      {"9 padding compatibility", [&] { return criterion9(dir); }},
      {"10 swarm liveness", [&] { return criterion10(trained, dir); }},
      {"11 determinism", [&] { return criterion11(dir); }},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    std::cerr << "criterion " << name << "...\n";
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << name << ": " << o.detail << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
