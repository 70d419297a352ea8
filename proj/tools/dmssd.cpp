// dmssd: command-line front end for map generation, training, evaluation,
// benchmarking, reward ablation and swarm deployment.

#include <csignal>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dmssd/config.hpp"
#include "dmssd/evalsuite.hpp"
#include "dmssd/gridmap.hpp"
#include "dmssd/neural.hpp"
#include "dmssd/ppo.hpp"
#include "dmssd/swarm.hpp"

namespace fs = std::filesystem;
using namespace dmssd;

namespace {

enum ExitCode : int { kOk = 0, kConfigError = 2, kRuntimeError = 3, kAcceptanceFailure = 4 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string map_path;
};

TrainConfig resolve(const Common& c) {
  TrainConfig cfg;
  if (!c.config_path.empty()) cfg = load_config(c.config_path, cfg);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed_given) cfg.seed = c.seed;
  cfg.validate();
  return cfg;
}

// <root>/<verb>-<UTC timestamp>-s<seed>, root from DMSSD_RUN_DIR or ./runs.
fs::path make_run_dir(const std::string& verb, std::uint64_t seed) {
  const char* env_root = std::getenv("DMSSD_RUN_DIR");
  const fs::path root = env_root != nullptr && *env_root != '\0' ? fs::path(env_root) : fs::path("runs");
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%SZ", &tm);
  const std::string base = verb + "-" + stamp + "-s" + std::to_string(seed);
  fs::path dir = root / base;
  for (int i = 1; fs::exists(dir); ++i) dir = root / (base + "." + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

fs::path start_run(const std::string& verb, const TrainConfig& cfg) {
  const fs::path dir = make_run_dir(verb, cfg.seed);
  write_text(dir / "config.cfg", config_to_string(cfg));
  std::cout << "run directory: " << dir.string() << '\n';
  return dir;
}

std::optional<GridMap> maybe_map(const Common& c) {
  if (c.map_path.empty()) return std::nullopt;
  return load_map(c.map_path);
}

Coord parse_coord(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw ConfigError("expected x,y, got '" + text + "'");
  try {
    return {std::stoi(text.substr(0, comma)), std::stoi(text.substr(comma + 1))};
  } catch (const std::exception&) {
    throw ConfigError("expected x,y, got '" + text + "'");
  }
}

void add_common(CLI::App* cmd, Common& c, bool with_map = true) {
  cmd->add_option("-c,--config", c.config_path, "flat key = value config file");
  cmd->add_option("-s,--set", c.overrides, "override, key=value (repeatable)");
  cmd->add_option_function<std::uint64_t>(
      "--seed",
      [&c](std::uint64_t v) {
        c.seed = v;
        c.seed_given = true;
      },
      "master seed (default: config value, 0)");
  if (with_map) cmd->add_option("--map", c.map_path, "map file; default generates one from the config");
}

void print_gap(std::ostream& out, const GapReport& r) {
  out << "trials " << r.episodes.size() << " achieved " << r.achieved << " success_rate " << r.success_rate
      << " median_gap " << (r.median_gap ? std::to_string(*r.median_gap) : "NA") << " mean_gap "
      << (r.mean_gap ? std::to_string(*r.mean_gap) : "NA") << " lower_bound " << (r.lower_bound_holds ? "ok" : "VIOLATED")
      << '\n';
}

void write_episodes_csv(const fs::path& path, const GapReport& r) {
  std::ofstream out(path, std::ios::binary);
  out << "trial,robots,optimal,steps,achieved,gap,meeting_x,meeting_y,bottleneck_to_meeting,reward_sum\n";
  for (std::size_t i = 0; i < r.episodes.size(); ++i) {
    const auto& e = r.episodes[i];
    out << i << ',' << e.initial_positions.size() << ',' << e.optimal << ',' << e.steps << ',' << e.achieved << ',';
    if (e.gap()) out << *e.gap();
    else out << "NA";
    out << ',' << e.meeting_cell.x << ',' << e.meeting_cell.y << ',' << e.bottleneck_to_meeting << ',' << e.reward_sum
        << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dmssd: multi-robot rendezvous with masked PPO"};
  app.require_subcommand(1);

  Common common;

  // gen-map
  auto* gen = app.add_subcommand("gen-map", "generate a random obstacle map");
  int gen_x = 20, gen_y = 20;
  double gen_static = 0.05, gen_dynamic = 0.02;
  std::uint64_t gen_seed = 0;
  std::string gen_output;
  gen->add_option("--x", gen_x, "width")->capture_default_str();
  gen->add_option("--y", gen_y, "height")->capture_default_str();
  gen->add_option("--static", gen_static, "static obstacle density")->capture_default_str();
  gen->add_option("--dynamic", gen_dynamic, "dynamic obstacle density")->capture_default_str();
  gen->add_option("--seed", gen_seed, "map seed")->capture_default_str();
  gen->add_option("-o,--output", gen_output, "also copy the map here");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a policy with PPO");
  add_common(train_cmd, common);

  // eval / gap
  std::string model_path;
  int trials = 100;
  bool sample_actions = false;
  auto* eval_cmd = app.add_subcommand("eval", "roll out a model and report success rate and steps");
  add_common(eval_cmd, common);
  eval_cmd->add_option("-m,--model", model_path, "model file")->required();
  eval_cmd->add_option("--trials", trials, "episodes")->capture_default_str();
  eval_cmd->add_flag("--sample", sample_actions, "sample actions instead of argmax");

  double max_median_gap = 5.0;
  auto* gap_cmd = app.add_subcommand("gap", "optimality gap against the BFS oracle");
  add_common(gap_cmd, common);
  gap_cmd->add_option("-m,--model", model_path, "model file")->required();
  gap_cmd->add_option("--trials", trials, "episodes")->capture_default_str();
  gap_cmd->add_option("--max-median-gap", max_median_gap, "acceptance threshold")->capture_default_str();

  // bench
  int samples = 10000;
  std::vector<int> bench_sizes{20, 70};
  auto* bench_cmd = app.add_subcommand("bench", "per-action inference latency");
  add_common(bench_cmd, common, false);
  bench_cmd->add_option("-m,--model", model_path, "model file")->required();
  bench_cmd->add_option("--samples", samples, "observations per map size")->capture_default_str();
  bench_cmd->add_option("--sizes", bench_sizes, "square map sizes")->capture_default_str();

  // baseline
  std::vector<std::string> variants;
  auto* base_cmd = app.add_subcommand("baseline", "train with a comparison reward function");
  add_common(base_cmd, common);
  base_cmd->add_option("--variant", variants, "ours, ours_no_mask, baseline_A, baseline_B, baseline_C or all")
      ->required();

  // compat
  std::vector<int> compat_k;
  double min_success = 0.9;
  auto* compat_cmd = app.add_subcommand("compat", "success rate with fewer robots than n_p");
  add_common(compat_cmd, common);
  compat_cmd->add_option("-m,--model", model_path, "model file")->required();
  compat_cmd->add_option("-k", compat_k, "robot counts")->required();
  compat_cmd->add_option("--episodes", trials, "episodes per k")->capture_default_str();
  compat_cmd->add_option("--min-success", min_success, "acceptance threshold")->capture_default_str();

  // serve-model
  std::string bind = "127.0.0.1:0";
  auto* serve_cmd = app.add_subcommand("serve-model", "serve a model file over TCP until interrupted");
  serve_cmd->add_option("-m,--model", model_path, "model file")->required();
  serve_cmd->add_option("--bind", bind, "host:port")->capture_default_str();

  // robot
  std::uint32_t robot_id = 0;
  std::string start_text;
  std::vector<std::string> peer_texts;
  std::string server_text;
  int tick_ms = 100, peer_timeout_ms = 1000, max_ticks = 0;
  auto* robot_cmd = app.add_subcommand("robot", "run one robot process");
  add_common(robot_cmd, common);
  robot_cmd->add_option("-m,--model", model_path, "local model copy")->required();
  robot_cmd->add_option("--id", robot_id, "robot id")->required();
  robot_cmd->add_option("--start", start_text, "start cell x,y")->required();
  robot_cmd->add_option("--bind", bind, "UDP host:port")->required();
  robot_cmd->add_option("--peer", peer_texts, "id@host:port (repeatable)");
  robot_cmd->add_option("--server", server_text, "model server host:port");
  robot_cmd->add_option("--tick-ms", tick_ms, "tick period")->capture_default_str();
  robot_cmd->add_option("--peer-timeout-ms", peer_timeout_ms, "drop peers silent this long")->capture_default_str();
  robot_cmd->add_option("--max-ticks", max_ticks, "0 uses the episode budget")->capture_default_str();

  // orchestrate
  int robots = 3, runs = 1, kill_robot = -1, kill_at = -1, orch_tick_ms = 0;
  double min_rate = 0.95;
  bool kill_server = false;
  auto* orch_cmd = app.add_subcommand("orchestrate", "spawn a model server and robot processes on loopback");
  add_common(orch_cmd, common);
  orch_cmd->add_option("-m,--model", model_path, "model file")->required();
  orch_cmd->add_option("--robots", robots, "robot processes")->capture_default_str();
  orch_cmd->add_option("--runs", runs, "independent runs (seed, seed+1, ...)")->capture_default_str();
  orch_cmd->add_option("--tick-ms", orch_tick_ms, "tick period; 0 runs as fast as peers answer")->capture_default_str();
  orch_cmd->add_option("--peer-timeout-ms", peer_timeout_ms, "drop peers silent this long")->capture_default_str();
  orch_cmd->add_option("--kill-robot", kill_robot, "robot index to kill")->capture_default_str();
  orch_cmd->add_option("--kill-at", kill_at, "tick at which it dies")->capture_default_str();
  orch_cmd->add_flag("--kill-server", kill_server, "kill the model server once robots hold the model");
  orch_cmd->add_option("--min-rate", min_rate, "acceptance threshold on the success rate")->capture_default_str();

  // plot-data
  std::vector<std::string> curve_specs;
  auto* plot_cmd = app.add_subcommand("plot-data", "merge metrics CSVs into per-curve MST/RM series");
  plot_cmd->add_option("--curve", curve_specs, "label=metrics.csv (repeat a label to average runs)")->required();
  plot_cmd->add_option_function<std::uint64_t>("--seed", [&common](std::uint64_t v) {
    common.seed = v;
    common.seed_given = true;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*gen) {
      const GridMap map = generate_map(gen_x, gen_y, gen_static, gen_dynamic, gen_seed);
      TrainConfig cfg;
      cfg.env.width = gen_x;
      cfg.env.height = gen_y;
      cfg.env.static_density = gen_static;
      cfg.env.dynamic_density = gen_dynamic;
      cfg.env.map_seed = gen_seed;
      cfg.seed = gen_seed;
      const fs::path dir = start_run("gen-map", cfg);
      save_map((dir / "map.txt").string(), map);
      if (!gen_output.empty()) save_map(gen_output, map);
      std::cout << "map " << gen_x << 'x' << gen_y << " static " << map.static_count() << " dynamic "
                << map.dynamic_obstacles().size() << '\n';
      return kOk;
    }

    if (*train_cmd) {
      const TrainConfig cfg = resolve(common);
      const auto map = maybe_map(common);
      const fs::path dir = start_run("train", cfg);
      const TrainResult r = train(cfg, {dir, &std::cout}, map ? &*map : nullptr);
      std::cout << "final MST (last 10) "
                << [&] {
                     const auto m = mean_mst(r.metrics, r.metrics.size() > 10 ? r.metrics.size() - 10 : 0, r.metrics.size());
                     return m ? std::to_string(*m) : std::string("NA");
                   }()
                << '\n';
      return kOk;
    }

    if (*eval_cmd || *gap_cmd) {
      const TrainConfig cfg = resolve(common);
      const auto map = maybe_map(common);
      const PolicyValueNet net = load_model(model_path);
      const fs::path dir = start_run(*eval_cmd ? "eval" : "gap", cfg);
      const GapReport r = optimality_gap(net, cfg.env, trials, cfg.seed, map ? &*map : nullptr,
                                         sample_actions ? ActionSelection::Sample : ActionSelection::Greedy);
      write_episodes_csv(dir / "episodes.csv", r);
      std::ostringstream summary;
      print_gap(summary, r);
      write_text(dir / "summary.txt", summary.str());
      std::cout << summary.str();
      if (*gap_cmd && (!r.median_gap || *r.median_gap > max_median_gap || !r.lower_bound_holds))
        return kAcceptanceFailure;
      return kOk;
    }

    if (*bench_cmd) {
      const TrainConfig cfg = resolve(common);
      const PolicyValueNet net = load_model(model_path);
      if (net.n_p() != cfg.env.n_p) throw ConfigError("bench: config n_p does not match the model");
      const fs::path dir = start_run("bench", cfg);
      std::ofstream out(dir / "bench.csv", std::ios::binary);
      out << "size,samples,mean_us,p50_us,p99_us,max_us\n";
      bool ok = true;
      for (int size : bench_sizes) {
        EnvConfig env = cfg.env;
        env.width = env.height = size;
        const LatencyStats s = bench_inference(net, env, samples, cfg.seed);
        out << size << ',' << s.samples << ',' << s.mean_us << ',' << s.p50_us << ',' << s.p99_us << ',' << s.max_us
            << '\n';
        std::cout << size << 'x' << size << " mean " << s.mean_us << "us p99 " << s.p99_us << "us\n";
        ok = ok && s.p99_under_30ms();
      }
      return ok ? kOk : kAcceptanceFailure;
    }

    if (*base_cmd) {
      TrainConfig cfg = resolve(common);
      const auto map = maybe_map(common);
      std::vector<RewardVariant> list;
      for (const auto& v : variants) {
        if (v == "all") {
          list = {RewardVariant::Ours, RewardVariant::OursNoMask, RewardVariant::BaselineA, RewardVariant::BaselineB,
                  RewardVariant::BaselineC};
        } else {
          try {
            list.push_back(parse_variant(v));
          } catch (const Error& e) {
            throw ConfigError(e.what());
          }
        }
      }
      const fs::path dir = start_run("baseline", cfg);
      std::vector<Curve> curves;
      for (const RewardVariant v : list) {
        const fs::path sub = dir / variant_name(v);
        TrainResult r = run_baseline(v, cfg, {sub, &std::cout}, map ? &*map : nullptr);
        curves.push_back({variant_name(v), {std::move(r.metrics)}});
        const auto& m = curves.back().runs.front();
        const auto tail = mean_mst(m, m.size() > 10 ? m.size() - 10 : 0, m.size());
        std::cout << variant_name(v) << " final MST (last 10) " << (tail ? std::to_string(*tail) : "NA") << '\n';
      }
      std::ofstream out(dir / "curves.csv", std::ios::binary);
      write_curves(out, curves);
      return kOk;
    }

    if (*compat_cmd) {
      const TrainConfig cfg = resolve(common);
      const auto map = maybe_map(common);
      const PolicyValueNet net = load_model(model_path);
      const fs::path dir = start_run("compat", cfg);
      std::ofstream out(dir / "compat.csv", std::ios::binary);
      out << "k,episodes,success_rate\n";
      bool ok = true;
      for (int k : compat_k) {
        const double rate = padding_compat(net, cfg.env, k, trials, cfg.seed, map ? &*map : nullptr);
        out << k << ',' << trials << ',' << rate << '\n';
        std::cout << "k=" << k << " success_rate " << rate << '\n';
        ok = ok && rate >= min_success;
      }
      return ok ? kOk : kAcceptanceFailure;
    }

    if (*serve_cmd) {
      swarm::ModelServer server(model_path, swarm::tcp_listen(swarm::parse_endpoint(bind)));
      std::cout << "serving " << model_path << " on port " << server.port() << std::endl;
      static std::atomic<bool> stop{false};
      std::signal(SIGINT, [](int) { stop = true; });
      std::signal(SIGTERM, [](int) { stop = true; });
      server.serve(stop);
      return kOk;
    }

    if (*robot_cmd) {
      const TrainConfig cfg = resolve(common);
      if (common.map_path.empty()) throw ConfigError("robot: --map is required");
      const GridMap map = load_map(common.map_path);
      swarm::RobotOptions ro;
      ro.id = robot_id;
      ro.start = parse_coord(start_text);
      ro.env = cfg.env;
      ro.tick_ms = tick_ms;
      ro.peer_timeout_ms = peer_timeout_ms;
      ro.max_ticks = max_ticks;
      for (const auto& p : peer_texts) {
        const auto at = p.find('@');
        if (at == std::string::npos) throw ConfigError("peer must be id@host:port, got '" + p + "'");
        swarm::Peer peer;
        try {
          peer.id = static_cast<std::uint32_t>(std::stoul(p.substr(0, at)));
        } catch (const std::exception&) {
          throw ConfigError("bad peer id in '" + p + "'");
        }
        peer.endpoint = swarm::parse_endpoint(p.substr(at + 1));
        ro.peers.push_back(peer);
      }
      if (!server_text.empty()) ro.model_server = swarm::parse_endpoint(server_text);
      const fs::path dir = start_run("robot", cfg);
      const swarm::RobotReport rep =
          swarm::robot_loop(load_model(model_path), map, swarm::udp_bind(swarm::parse_endpoint(bind)), ro);
      write_text(dir / "trace.csv", swarm::trace_csv(rep.trace));
      std::cout << "robot " << rep.id << (rep.met ? " met at " : " stopped at ") << rep.final_cell.x << ','
                << rep.final_cell.y << " steps " << rep.steps << " ticks " << rep.ticks
                << (rep.degraded ? " (degraded)" : "") << '\n';
      return rep.met ? kOk : kAcceptanceFailure;
    }

    if (*orch_cmd) {
      const TrainConfig cfg = resolve(common);
      const GridMap map = common.map_path.empty() ? generate_map(cfg.env.width, cfg.env.height, cfg.env.static_density,
                                                                 cfg.env.dynamic_density, cfg.env.map_seed)
                                                  : load_map(common.map_path);
      const fs::path dir = start_run("orchestrate", cfg);
      save_map((dir / "map.txt").string(), map);
      std::ofstream summary(dir / "runs.csv", std::ios::binary);
      summary << "run,seed,success,meeting_x,meeting_y,survivors,lost\n";
      int successes = 0;
      for (int i = 0; i < runs; ++i) {
        swarm::OrchestrateOptions opt;
        opt.robots = robots;
        opt.env = cfg.env;
        opt.seed = cfg.seed + static_cast<std::uint64_t>(i);
        opt.tick_ms = orch_tick_ms;
        opt.peer_timeout_ms = peer_timeout_ms;
        opt.kill_robot = kill_robot;
        opt.kill_at_tick = kill_at;
        opt.kill_server_after_start = kill_server;
        const swarm::RunReport rep = swarm::orchestrate(map, model_path, opt);
        successes += rep.success ? 1 : 0;
        summary << i << ',' << opt.seed << ',' << rep.success << ',';
        if (rep.meeting_cell) summary << rep.meeting_cell->x << ',' << rep.meeting_cell->y;
        else summary << "NA,NA";
        summary << ',' << rep.robots.size() << ',' << rep.lost.size() << '\n';
        write_text(dir / ("trace_" + std::to_string(i) + ".csv"), rep.trace_csv);
        if (!rep.success) std::cout << "run " << i << ": " << rep.failure << '\n';
      }
      const double rate = static_cast<double>(successes) / std::max(runs, 1);
      std::cout << "success " << successes << '/' << runs << '\n';
      return rate >= min_rate ? kOk : kAcceptanceFailure;
    }

    if (*plot_cmd) {
      std::vector<Curve> curves;
      for (const auto& spec : curve_specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) throw ConfigError("curve must be label=path, got '" + spec + "'");
        const std::string label = spec.substr(0, eq);
        std::ifstream in(spec.substr(eq + 1));
        if (!in) throw ConfigError("cannot open " + spec.substr(eq + 1));
        auto rows = read_metrics_csv(in);
        auto it = std::find_if(curves.begin(), curves.end(), [&](const Curve& c) { return c.label == label; });
        if (it == curves.end()) curves.push_back({label, {std::move(rows)}});
        else it->runs.push_back(std::move(rows));
      }
      TrainConfig cfg;
      cfg.seed = common.seed;
      const fs::path dir = start_run("plot-data", cfg);
      std::ofstream out(dir / "curves.csv", std::ios::binary);
      write_curves(out, curves);
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}
