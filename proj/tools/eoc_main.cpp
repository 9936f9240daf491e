#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "eoc/config.hpp"
#include "eoc/csv.hpp"
#include "eoc/demo.hpp"
#include "eoc/dynopt.hpp"
#include "eoc/errors.hpp"
#include "eoc/estim.hpp"
#include "eoc/nmpc.hpp"
#include "eoc/parallel.hpp"
#include "eoc/sim.hpp"

namespace fs = std::filesystem;
using namespace eoc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitInfeasible = 4;

struct RunManifest {
    std::string workflow;
    fs::path config_dir;
    fs::path out_dir;
    std::uint64_t seed = 1;
    std::string mode;
    std::string estimator;
    double tol = 1e-6;
};

void write_manifest(const RunManifest& m) {
    nlohmann::ordered_json j;
    j["workflow"] = m.workflow;
    j["config_dir"] = m.config_dir.string();
    j["out_dir"] = m.out_dir.string();
    j["seed"] = m.seed;
    if (!m.mode.empty()) j["mode"] = m.mode;
    if (!m.estimator.empty()) j["estimator"] = m.estimator;
    j["tol"] = m.tol;
    j["workers"] = parallel::worker_count();
    std::ofstream out(m.out_dir / "manifest.json");
    out << j.dump(2) << "\n";
}

std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> t(n);
    for (int i = 0; i < n; ++i) t[i] = a + (b - a) * i / (n - 1);
    return t;
}

// Event schedule CSV: header "time,<name>...", one row per event time; value
// cells give the interval value starting at that row's time (last row blank).
sim::EventSchedule load_events_csv(const fs::path& path) {
    auto table = csv::read_table(path);
    sim::EventSchedule sched;
    std::vector<model::AbsName> names;
    for (std::size_t c = 1; c < table.header.size(); ++c) names.push_back(model::AbsName::parse(table.header[c]));
    std::vector<std::vector<double>> series(names.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        std::string where = "at " + path.string() + " line " + std::to_string(table.row_lines[r]);
        sched.times.push_back(csv::parse_number(table.rows[r][0], where));
        bool last = r + 1 == table.rows.size();
        if (last) continue;
        for (std::size_t c = 0; c < names.size(); ++c) {
            auto v = csv::parse_cell(table.rows[r].size() > c + 1 ? table.rows[r][c + 1] : "");
            if (!v) throw ConfigError("missing event value " + where);
            series[c].push_back(*v);
        }
    }
    for (std::size_t c = 0; c < names.size(); ++c) sched.series.push_back({names[c], series[c]});
    return sched;
}

int cmd_simulate(const RunManifest& m) {
    auto settings = config::Settings::load(m.config_dir / "sim.toml");
    double T = settings.number_or("T", 10.0);
    int n_points = static_cast<int>(settings.integer_or("n_points", 100));
    sim::IntegrateOptions opts;
    if (settings.has("h_max")) opts.h_max = settings.number("h_max");

    auto model = demo::make_simple_dae();
    auto ctx = sim::SimContext(model->setup());
    auto vals = model->collect_var_val();
    auto grid = linspace(0.0, T, n_points);

    sim::EventSchedule sched;
    if (settings.has("events")) {
        sched = load_events_csv(m.config_dir / settings.text("events"));
    } else if (settings.boolean_or("random_p_events", false)) {
        // randomized piecewise parameter values, seeded for reproducibility
        sched.times = grid;
        sim::EventSchedule::Series s;
        s.name = model::AbsName::parse(settings.text_or("random_p_name", "simple_dae.pg[0]"));
        double std_dev = settings.number_or("random_p_std", 1.0);
        for (int k = 0; k + 1 < n_points; ++k)
            s.values.push_back(std_dev * parallel::keyed_normal(m.seed, 11, k, 0));
        sched.series.push_back(std::move(s));
    }

    auto traj = ctx.simulate_with_events(grid, sched, vals.x0, vals.z0, vals.p, vals.u, opts);
    auto u_rows = sim::applied_u_rows(ctx.dae(), grid, sched, vals.u);
    sim::export_trajectory_csv(m.out_dir / "trajectory.csv", ctx.dae(), traj, &u_rows);
    model->load_values_and_trajectory_xz(traj.x, traj.z, grid);
    model->dump(m.out_dir / "model_values.json");
    std::printf("simulate: wrote %s (%d rows)\n", (m.out_dir / "trajectory.csv").c_str(), n_points);
    return kExitOk;
}

int cmd_optimize(const RunManifest& m) {
    auto settings = config::Settings::load(m.config_dir / "optimize.toml");
    auto sched = dynopt::ControlSchedule::load_csv(m.config_dir / "schedule.csv");

    auto model = demo::make_simple_dae();
    dynopt::Transcriber tr(*model, sched);
    for (const auto& e : sched.tv_bounds) tr.add_tv_decision(e.name);
    for (const auto& e : sched.ti_bounds) tr.add_ti_decision(e.name);
    tr.add_objective_terminal(model::AbsName::parse(settings.text_or("objective", "simple_dae.obj[0]")));

    std::vector<std::string> relaxable;
    if (fs::exists(m.config_dir / "constraints.csv")) {
        auto t = csv::read_table(m.config_dir / "constraints.csv");
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            std::string where = "at constraints.csv line " + std::to_string(t.row_lines[r]);
            const auto& row = t.rows[r];
            if (row.size() < 5) throw ConfigError("malformed constraint row " + where);
            std::vector<double> times;
            if (row[2] == "grid[1:]")
                times.assign(sched.grid.begin() + 1, sched.grid.end());
            else if (row[2] == "final")
                times.push_back(sched.grid.back());
            else
                for (const auto& cell : csv::split_line(row[2])) times.push_back(csv::parse_number(cell, where));
            auto lb = csv::parse_cell(row[3]);
            auto ub = csv::parse_cell(row[4]);
            bool relax = row.size() > 5 && (row[5] == "1" || row[5] == "true");
            double weight = row.size() > 6 && !row[6].empty() ? csv::parse_number(row[6], where) : 1e3;
            tr.add_path_constraint(row[0], model::AbsName::parse(row[1]), times,
                                   lb ? *lb : -std::numeric_limits<double>::infinity(),
                                   ub ? *ub : std::numeric_limits<double>::infinity(), relax, weight);
            if (relax) relaxable.push_back(row[0]);
        }
    }

    sim::IntegrateOptions sim_opts;
    if (settings.has("h_max")) sim_opts.h_max = settings.number("h_max");
    auto problem = tr.transcribe(sim_opts);

    nlp::SqpOptions opts;
    opts.tol = m.tol;
    opts.max_iter = static_cast<int>(settings.integer_or("max_iter", 150));
    opts.n_random_sample = static_cast<int>(settings.integer_or("n_random_sample", 0));
    opts.seed = m.seed;
    opts.log_path = (m.out_dir / "iterations.csv").string();

    auto step = problem.solve_step(opts);
    bool relaxed = false;
    if (step.sol.status != nlp::SolveStatus::Optimal && !relaxable.empty()) {
        auto relaxed_problem = problem.relax(relaxable);
        auto rstep = relaxed_problem.solve_step(opts);
        if (rstep.sol.status == nlp::SolveStatus::Optimal) {
            step = rstep;
            relaxed = true;
            relaxed_problem.export_solution_csv(m.out_dir / "solution.csv", step);
        }
    } else {
        problem.export_solution_csv(m.out_dir / "solution.csv", step);
    }
    if (step.sol.status != nlp::SolveStatus::Optimal) {
        std::fprintf(stderr, "error: optimize: solver status %s\n", nlp::status_name(step.sol.status).c_str());
        return kExitInfeasible;
    }
    std::printf("optimize: status %s%s, objective %.9g, wrote %s\n", nlp::status_name(step.sol.status).c_str(),
                relaxed ? " (relaxed)" : "", step.sol.f, (m.out_dir / "solution.csv").c_str());
    return kExitOk;
}

int cmd_estimate(const RunManifest& m) {
    auto settings = config::Settings::load(m.config_dir / "estimate.toml");
    auto model = demo::make_simple_dae();

    int n_experiments = static_cast<int>(settings.integer_or("n_experiments", 1));
    std::vector<estim::ExperimentData> experiments;
    for (int e = 1; e <= n_experiments; ++e) {
        auto exp = estim::load_measurement_csv(m.config_dir / ("measurement_" + std::to_string(e) + ".csv"),
                                               "exp-" + std::to_string(e));
        auto doe = m.config_dir / ("doe_" + std::to_string(e) + ".csv");
        if (fs::exists(doe)) estim::load_doe_csv(doe, exp);
        experiments.push_back(std::move(exp));
    }

    auto params = estim::load_param_files(m.config_dir / "params_init.csv", m.config_dir / "params_bounds.csv");

    estim::BuildOptions opts;
    std::string estname = !m.estimator.empty() ? m.estimator : settings.text_or("estimator", "ml");
    opts.estimator = estname == "ols" ? estim::EstimatorKind::Ols
                                      : (estname == "map" ? estim::EstimatorKind::Map : estim::EstimatorKind::Ml);
    opts.log_param = settings.boolean_or("log_param", false);
    opts.estimate_init_variables = settings.boolean_or("estimate_init_variables", false);
    for (const auto& s : settings.list_or("init_state_names"))
        opts.init_state_names.push_back(model::AbsName::parse(s));
    if (opts.estimator == estim::EstimatorKind::Map)
        opts.priors = estim::load_prior_csv(m.config_dir / "params_prior.csv");
    if (settings.has("h_max")) opts.sim_opts.h_max = settings.number("h_max");
    if (settings.has("min_grid_points")) opts.min_grid_points = static_cast<int>(settings.integer("min_grid_points"));

    // state-decision bounds from the config, applied to the model variables
    if (settings.has("state_lb") && settings.has("state_ub")) {
        auto lbs = settings.number_list_or("state_lb");
        auto ubs = settings.number_list_or("state_ub");
        auto names = settings.list_or("init_state_names");
        for (std::size_t i = 0; i < names.size() && i < lbs.size() && i < ubs.size(); ++i) {
            auto [var, comp] = model->resolve(model::AbsName::parse(names[i]));
            var->lb[comp] = lbs[i];
            var->ub[comp] = ubs[i];
        }
    }

    std::vector<estim::OutputConstraint> cons;
    if (fs::exists(m.config_dir / "constraints.csv")) {
        auto t = csv::read_table(m.config_dir / "constraints.csv");
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            auto lb = csv::parse_cell(t.rows[r][1]);
            auto ub = csv::parse_cell(t.rows[r][2]);
            cons.push_back({model::AbsName::parse(t.rows[r][0]),
                            lb ? *lb : -std::numeric_limits<double>::infinity(),
                            ub ? *ub : std::numeric_limits<double>::infinity()});
        }
    }

    auto problem = estim::build_problem(*model, std::move(experiments), params, opts);
    nlp::SqpOptions solver;
    solver.tol = m.tol;
    solver.max_iter = static_cast<int>(settings.integer_or("max_iter", 100));
    solver.n_random_sample = static_cast<int>(settings.integer_or("n_random_sample", 0));
    solver.seed = m.seed;
    auto result = estim::estimate(problem, solver, cons, settings.boolean_or("diagnose", false));

    estim::write_estimates_csv(m.out_dir / "estimates.csv", result);
    estim::write_covariance_csv(m.out_dir / "covariance.csv", result);
    estim::write_predictions_csv(m.out_dir / "predictions.csv", result);
    if (result.sol.status != nlp::SolveStatus::Optimal) {
        std::fprintf(stderr, "error: estimate: solver status %s\n", nlp::status_name(result.sol.status).c_str());
        return kExitNumerical;
    }
    std::printf("estimate: status %s, objective %.9g, wrote %s\n", nlp::status_name(result.sol.status).c_str(),
                result.objective, (m.out_dir / "estimates.csv").c_str());
    return kExitOk;
}

int cmd_nmpc(const RunManifest& m, int resume_from) {
    auto cfg = nmpc::load_config_dir(m.config_dir);
    if (!m.mode.empty()) cfg.mode = nmpc::mode_from_string(m.mode);
    cfg.seed = m.seed;
    cfg.est_opts.tol = m.tol;
    cfg.ocp_opts.tol = m.tol;
    cfg.validate();

    nmpc::ClosedLoop loop(cfg, [] { return demo::make_simple_dae(); }, m.out_dir);
    if (resume_from > 0)
        loop.resume(resume_from);
    else
        loop.run();
    double obj = loop.plant_objective();
    auto viol = loop.plant_violations();
    double worst = viol.empty() ? 0.0 : *std::max_element(viol.begin(), viol.end());
    std::printf("nmpc(%s): plant objective %.9g, worst constraint violation %.6g, wrote %s\n",
                nmpc::mode_name(cfg.mode).c_str(), obj, worst, (m.out_dir / "summary.csv").c_str());
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"equation-oriented modeling, optimization and control toolkit"};
    app.require_subcommand(1);

    std::string config_dir, out_dir, mode, estimator;
    std::uint64_t seed = 1;
    double tol = 1e-6;
    int resume_from = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_dir, "configuration directory")->required();
        sub->add_option("--out", out_dir, "output directory")->required();
        sub->add_option("--seed", seed, "random seed");
        sub->add_option("--tol", tol, "solver tolerance");
    };
    auto* sim_cmd = app.add_subcommand("simulate", "integrate the bundled demo system");
    add_common(sim_cmd);
    auto* opt_cmd = app.add_subcommand("optimize", "solve the dynamic optimization problem");
    add_common(opt_cmd);
    auto* est_cmd = app.add_subcommand("estimate", "estimate model parameters from experiments");
    add_common(est_cmd);
    est_cmd->add_option("--estimator", estimator, "ols | ml | map");
    auto* nmpc_cmd = app.add_subcommand("nmpc", "run the shrinking-horizon control loop");
    add_common(nmpc_cmd);
    nmpc_cmd->add_option("--mode", mode, "open_loop | state | adaptive");
    nmpc_cmd->add_option("--resume", resume_from, "resume from this interval (reads emitted files)");

    CLI11_PARSE(app, argc, argv);

    RunManifest manifest;
    manifest.config_dir = config_dir;
    manifest.out_dir = out_dir;
    manifest.seed = seed;
    manifest.tol = tol;
    manifest.mode = mode;
    manifest.estimator = estimator;

    try {
        if (!fs::exists(manifest.config_dir)) throw ConfigError("config directory not found: " + config_dir);
        fs::create_directories(manifest.out_dir);
        int rc = kExitConfig;
        if (app.got_subcommand(sim_cmd)) {
            manifest.workflow = "simulate";
            write_manifest(manifest);
            rc = cmd_simulate(manifest);
        } else if (app.got_subcommand(opt_cmd)) {
            manifest.workflow = "optimize";
            write_manifest(manifest);
            rc = cmd_optimize(manifest);
        } else if (app.got_subcommand(est_cmd)) {
            manifest.workflow = "estimate";
            write_manifest(manifest);
            rc = cmd_estimate(manifest);
        } else if (app.got_subcommand(nmpc_cmd)) {
            manifest.workflow = "nmpc";
            write_manifest(manifest);
            rc = cmd_nmpc(manifest, resume_from);
        }
        return rc;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: config: %s\n", e.what());
        return kExitConfig;
    } catch (const DomainError& e) {
        std::fprintf(stderr, "error: numerical: %s\n", e.what());
        return kExitNumerical;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "error: numerical: %s\n", e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumerical;
    }
}
