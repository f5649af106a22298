// Command-line front end: run a single simulation, sweep a grid, print the
// closed-form time formulas, race the quadratic, audit a serialized tree, or
// dump a timing preset.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "birch/experiments.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDeadlock = 3;

birch::Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw birch::ConfigError("cannot open config: " + path);
  return birch::Config::parse(in);
}

int cmd_simulate(const std::string& config_path, std::int64_t seed,
                 const std::string& out, bool no_coords) {
  birch::Config cfg = load_config(config_path);
  if (seed >= 0) cfg.set("run.seed", std::to_string(seed));
  birch::RunSpec rs = birch::build_run_spec(cfg);
  birch::RunOutput run = birch::execute(rs);
  const birch::RunResult& r = run.result;

  if (!out.empty()) {
    std::ofstream trace(out + ".trace.csv");
    birch::write_trace_csv(trace, r.trace,
                           cfg.get_int("run.decimate", 1));
    std::ofstream tree(out + ".tree.txt");
    r.tree.write(tree, !no_coords);
    std::ofstream branch(out + ".branch.txt");
    r.rec.write(branch);
  }

  std::cout << "method=" << rs.method << "\n"
            << "gamma=" << run.gamma << "\n"
            << "updates=" << r.trace.update_count() << "\n"
            << "final_time=" << r.trace.final_time << "\n"
            << "discarded=" << r.trace.discarded << "\n"
            << "peak_bandwidth=" << birch::measure_peak_bandwidth(r.trace) << "\n"
            << "update_frequency=" << birch::measure_update_frequency(r.trace)
            << "\n";
  if (!r.trace.branch_loss.empty())
    std::cout << "final_loss=" << r.trace.branch_loss.back() << "\n";

  const std::int64_t claimed = run.policy->claimed_R();
  if (claimed >= 0 && r.rec.branch.size() > 1) {
    const birch::ConditionReport rep =
        birch::verify_conditions(r.tree, r.rec, claimed);
    std::cout << "claimed_R=" << claimed << "\n"
              << "R_observed=" << rep.R_observed << "\n"
              << "repr_violations=" << rep.repr_violations.size() << "\n"
              << "fork_residual=" << rep.fork_identity_max_residual << "\n"
              << "conditions_ok=" << (rep.ok() ? 1 : 0) << "\n";
  }
  if (r.deadlock) {
    std::cerr << "policy made no progress before its event queue drained\n";
    return kExitDeadlock;
  }
  return 0;
}

int cmd_grid(const std::string& config_path, std::int64_t seed, int jobs,
             const std::string& out) {
  birch::Config cfg = load_config(config_path);
  if (seed >= 0) cfg.set("run.seed", std::to_string(seed));
  birch::GridSpec gs;
  gs.base = birch::build_run_spec(cfg);
  gs.methods = birch::Config::split(cfg.get("grid.methods", gs.base.method), ',');
  if (cfg.has("grid.gamma_grid"))
    gs.gamma_grid = birch::Config::split_nums(cfg.get("grid.gamma_grid"));
  if (cfg.has("grid.B_grid"))
    for (double v : birch::Config::split_nums(cfg.get("grid.B_grid")))
      gs.B_grid.push_back(static_cast<std::int64_t>(v));
  if (cfg.has("grid.seeds")) {
    gs.seeds.clear();
    for (double v : birch::Config::split_nums(cfg.get("grid.seeds")))
      gs.seeds.push_back(static_cast<std::uint64_t>(v));
  }
  gs.horizon = cfg.get_num("grid.horizon", 1000.0);
  if (cfg.has("grid.loss_target"))
    gs.loss_target = cfg.get_num("grid.loss_target", 0.0);

  const auto cells = birch::run_grid(gs, jobs);
  if (out.empty()) {
    birch::write_grid_csv(std::cout, cells);
  } else {
    std::ofstream csv(out + ".csv");
    birch::write_grid_csv(csv, cells);
    std::ofstream dat(out + ".dat");
    birch::write_grid_dat(dat, cells);
  }
  return 0;
}

int cmd_formulas(const std::string& config_path) {
  birch::Config cfg = load_config(config_path);
  birch::RunSpec rs = birch::build_run_spec(cfg);
  const double sig_sq = rs.sigma * rs.sigma;
  std::cout.precision(12);
  std::cout << "t_rennala=" << birch::t_rennala(rs.timing.h, rs.hyper.B) << "\n"
            << "t_local=" << birch::t_local(rs.timing.h, rs.hyper.B) << "\n"
            << "t_localasync=" << birch::t_localasync(rs.timing.h, rs.hyper.B)
            << "\n"
            << "t_asynclocal="
            << birch::t_asynclocal(rs.timing.h, rs.hyper.B, rs.hyper.M) << "\n"
            << "t_dualprocess="
            << birch::t_dualprocess(rs.timing.h, rs.timing.tau, rs.hyper.B)
            << "\n"
            << "optimal_B=" << birch::optimal_B(std::max(sig_sq, 1e-12), rs.eps)
            << "\n"
            << "optimal_M="
            << birch::optimal_M(std::max(sig_sq, 1e-12),
                                static_cast<std::int64_t>(rs.timing.n()), rs.eps)
            << "\n"
            << "optimal_s="
            << birch::optimal_s(static_cast<std::int64_t>(rs.timing.n()), rs.eps,
                                std::max(sig_sq, 1e-12))
            << "\n";
  birch::BoundInputs bi;
  bi.L = rs.problem->smoothness();
  bi.delta = rs.problem->value(rs.x0) - rs.problem->min_value();
  bi.sigma_sq = sig_sq;
  bi.eps = rs.eps;
  bi.n = static_cast<std::int64_t>(rs.timing.n());
  for (const char* m : {"rennala", "local", "ringmaster", "cycle",
                        "synchronized", "fedavg-canonical"})
    std::cout << "bound_" << m << "="
              << birch::total_time_bound(m, rs.timing, bi) << "\n";
  return 0;
}

int cmd_race(const std::string& config_path) {
  double mu = 0.01, L = 1.0, h = 1.0;
  int n = 4;
  std::int64_t B = 64;
  double target = 1e-6;
  if (!config_path.empty()) {
    birch::Config cfg = load_config(config_path);
    mu = cfg.get_num("race.mu", mu);
    L = cfg.get_num("race.L", L);
    n = static_cast<int>(cfg.get_int("race.n", n));
    B = cfg.get_int("race.B", B);
    h = cfg.get_num("race.h", h);
    target = cfg.get_num("race.loss_target", target);
  }
  const birch::RaceResult res = birch::quadratic_race(mu, L, n, B, h, target);
  std::cout << "time_rennala=" << res.time_rennala << "\n"
            << "time_ringmaster=" << res.time_ringmaster << "\n"
            << "ratio=" << res.time_rennala / res.time_ringmaster << "\n"
            << "gamma_rennala=" << res.gamma_rennala << "\n"
            << "gamma_ringmaster=" << res.gamma_ringmaster << "\n"
            << "ringmaster_x_monotone=" << res.ringmaster_x_monotone << "\n";
  return 0;
}

int cmd_verify(const std::string& tree_path, const std::string& branch_path,
               std::int64_t claimed_R) {
  std::ifstream tin(tree_path);
  if (!tin) throw birch::ConfigError("cannot open tree: " + tree_path);
  const birch::ComputationTree tree = birch::ComputationTree::read(tin);
  std::cout << "nodes=" << tree.node_count() << "\n";
  if (branch_path.empty()) return 0;
  std::ifstream bin(branch_path);
  if (!bin) throw birch::ConfigError("cannot open branch: " + branch_path);
  const birch::MainBranchRecord rec = birch::MainBranchRecord::read(bin);
  const birch::ConditionReport rep = birch::verify_conditions(
      tree, rec, claimed_R >= 0 ? claimed_R : std::numeric_limits<std::int64_t>::max());
  std::cout << "branch_len=" << rec.branch.size() << "\n"
            << "R_observed=" << rep.R_observed << "\n"
            << "repr_violations=" << rep.repr_violations.size() << "\n"
            << "structure_violations=" << rep.structure_violations.size() << "\n"
            << "fork_residual=" << rep.fork_identity_max_residual << "\n"
            << "conditions_ok=" << (rep.ok() ? 1 : 0) << "\n";
  return rep.ok() ? 0 : 1;
}

int cmd_presets(const std::string& regime, int n, std::int64_t seed) {
  const birch::TimingModel tm =
      birch::regime_preset(regime, static_cast<std::size_t>(n),
                           static_cast<std::uint64_t>(seed));
  std::cout << "# worker h tau\n";
  for (std::size_t i = 0; i < tm.n(); ++i)
    std::cout << i << ' ' << tm.h[i] << ' ' << tm.tau[i] << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distributed SGD simulator with computation-tree audits"};
  app.require_subcommand(1);

  std::string config_path, out, tree_path, branch_path, regime = "classical";
  std::int64_t seed = -1, claimed_R = -1;
  int jobs = 1, n = 4;
  bool no_coords = false;

  CLI::App* sim = app.add_subcommand("simulate", "run one method once");
  sim->add_option("--config", config_path)->required();
  sim->add_option("--seed", seed);
  sim->add_option("--out", out);
  sim->add_flag("--no-coords", no_coords,
                "omit step vectors from the tree dump");

  CLI::App* grid = app.add_subcommand("grid", "sweep methods x step sizes x seeds");
  grid->add_option("--config", config_path)->required();
  grid->add_option("--seed", seed);
  grid->add_option("--jobs", jobs);
  grid->add_option("--out", out);

  CLI::App* formulas_cmd = app.add_subcommand("formulas", "closed-form times and bounds");
  formulas_cmd->add_option("--config", config_path)->required();

  CLI::App* race = app.add_subcommand("quadratic-race",
                                      "batch vs delay-bounded quadratic race");
  race->add_option("--config", config_path);

  CLI::App* verify = app.add_subcommand("verify-tree", "audit a serialized tree");
  verify->add_option("--tree", tree_path)->required();
  verify->add_option("--branch", branch_path);
  verify->add_option("--claimed-R", claimed_R);

  CLI::App* presets = app.add_subcommand("presets", "print a timing regime");
  presets->add_option("--regime", regime);
  presets->add_option("--n", n);
  presets->add_option("--seed", seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) return cmd_simulate(config_path, seed, out, no_coords);
    if (grid->parsed()) return cmd_grid(config_path, seed, jobs, out);
    if (formulas_cmd->parsed()) return cmd_formulas(config_path);
    if (race->parsed()) return cmd_race(config_path);
    if (verify->parsed())
      return cmd_verify(tree_path, branch_path, claimed_R);
    if (presets->parsed())
      return cmd_presets(regime, n, seed < 0 ? 0 : seed);
  } catch (const birch::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const birch::TimingError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const birch::PolicyError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const birch::ProblemError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
