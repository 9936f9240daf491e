#include "eoc/nmpc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "eoc/config.hpp"
#include "eoc/csv.hpp"
#include "eoc/errors.hpp"
#include "eoc/parallel.hpp"

namespace eoc::nmpc {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::uint64_t kTagMeasurement = 1;
constexpr std::uint64_t kTagActuator = 2;
constexpr std::uint64_t kTagStateSample = 3;
} // namespace

Mode mode_from_string(const std::string& s) {
    if (s == "open_loop") return Mode::OpenLoop;
    if (s == "state") return Mode::State;
    if (s == "adaptive") return Mode::Adaptive;
    throw ConfigError("unknown nmpc mode '" + s + "' (expected open_loop, state or adaptive)");
}

std::string mode_name(Mode m) {
    switch (m) {
    case Mode::OpenLoop: return "open_loop";
    case Mode::State: return "state";
    case Mode::Adaptive: return "adaptive";
    }
    return "?";
}

std::vector<double> NmpcConfig::control_grid() const {
    std::vector<double> g(n_intervals + 1);
    for (int j = 0; j <= n_intervals; ++j) g[j] = j * tau();
    return g;
}

std::vector<double> NmpcConfig::scenario_points(double t_begin, double t_end, int refine) const {
    std::set<double> pts;
    double dt = tau();
    for (int j = 0; j <= n_intervals; ++j) {
        double t = j * dt;
        if (t >= t_begin - 1e-12 && t <= t_end + 1e-12) pts.insert(t);
        if (j < n_intervals) {
            double fe = feed_end(j);
            if (fe < (j + 1) * dt - 1e-12 && fe > t_begin + 1e-12 && fe < t_end - 1e-12) pts.insert(fe);
            for (int r = 1; r < refine; ++r) {
                double tr = j * dt + dt * r / refine;
                if (tr > t_begin + 1e-12 && tr < t_end - 1e-12) pts.insert(tr);
            }
        }
    }
    for (int j = 1; j <= n_intervals; ++j) {
        double s = sample_time(j);
        if (s > t_begin + 1e-12 && s < t_end - 1e-12) pts.insert(s);
    }
    pts.insert(t_begin);
    pts.insert(t_end);
    return {pts.begin(), pts.end()};
}

void NmpcConfig::validate() const {
    if (n_intervals <= 0) throw ConfigError("nmpc: the number of control intervals must be positive");
    if (!(T > 0)) throw ConfigError("nmpc: batch duration must be positive");
    if (!(dt_feed > 0) || dt_feed > tau() + 1e-12)
        throw ConfigError("nmpc: feed window must satisfy 0 < dt_feed <= tau");
    if (!(dt_prep > 0) || dt_prep >= tau())
        throw ConfigError("nmpc: preparation time must satisfy 0 < dt_prep < tau");
    if (control.path.empty()) throw ConfigError("nmpc: no control named");
    if (static_cast<int>(u_init.size()) != n_intervals || static_cast<int>(u_lb.size()) != n_intervals ||
        static_cast<int>(u_ub.size()) != n_intervals)
        throw ConfigError("nmpc: control bounds must have one entry per interval");
    if (measured.empty()) throw ConfigError("nmpc: no measured outputs");
    if (objective_terminal.path.empty()) throw ConfigError("nmpc: no terminal objective variable");
}

PlantSimulator::PlantSimulator(const NmpcConfig& cfg, std::unique_ptr<model::Model> truth_model)
    : cfg_(cfg), model_(std::move(truth_model)) {
    for (const auto& [name, value] : cfg_.truth) model_->set_value(name, value);
    ctx_ = std::make_shared<sim::SimContext>(model_->setup());
    auto vals = model_->collect_var_val();
    x0_ = vals.x0;
    z0_ = vals.z0;
    p_ = vals.p;
    u_ = vals.u;
}

const model::DaeProblem& PlantSimulator::dae() const { return ctx_->dae(); }

double PlantSimulator::apply_control(int k, double commanded) {
    if (k != static_cast<int>(actual_.size()))
        throw ConfigError("plant: controls must be applied in interval order (got " + std::to_string(k) +
                          ", expected " + std::to_string(actual_.size()) + ")");
    double actual = commanded;
    if (cfg_.actuator_std > 0.0)
        actual = commanded * (1.0 + cfg_.actuator_std * parallel::keyed_normal(cfg_.seed, kTagActuator, k, 0));
    commanded_.push_back(commanded);
    actual_.push_back(actual);
    return actual;
}

void PlantSimulator::restore_applied(const std::vector<double>& commanded, const std::vector<double>& actual) {
    commanded_ = commanded;
    actual_ = actual;
}

std::vector<double> PlantSimulator::scenario_grid(double t_end, int refine) const {
    return cfg_.scenario_points(0.0, t_end, refine);
}

sim::EventSchedule PlantSimulator::control_schedule(const std::vector<double>& grid) const {
    sim::EventSchedule sched;
    if (actual_.empty()) return sched;
    sched.times = grid;
    sim::EventSchedule::Series s;
    s.name = cfg_.control;
    double tau = cfg_.tau();
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        double t = grid[i];
        int k = std::min(static_cast<int>((t + 1e-12) / tau), cfg_.n_intervals - 1);
        double v = 0.0;
        if (k < static_cast<int>(actual_.size()) && t < cfg_.feed_end(k) - 1e-12) v = actual_[k];
        s.values.push_back(v);
    }
    sched.series.push_back(std::move(s));
    return sched;
}

sim::Trajectory PlantSimulator::simulate_to(double t_end) const {
    auto grid = scenario_grid(t_end);
    return ctx_->simulate_with_events(grid, control_schedule(grid), x0_, z0_, p_, u_, cfg_.sim_opts);
}

sim::Trajectory PlantSimulator::fine_trajectory() const {
    double t_end = cfg_.tau() * static_cast<double>(actual_.size());
    auto grid = scenario_grid(t_end);
    sim::IntegrateOptions opts = cfg_.sim_opts;
    opts.dense_output = true;
    return ctx_->simulate_with_events(grid, control_schedule(grid), x0_, z0_, p_, u_, opts);
}

Eigen::VectorXd PlantSimulator::state_at(double t) const {
    auto traj = simulate_to(t);
    int row = static_cast<int>(traj.time.size()) - 1;
    for (std::size_t i = 0; i < traj.time.size(); ++i)
        if (std::abs(traj.time[i] - t) <= 1e-9 * std::max(1.0, std::abs(t))) row = static_cast<int>(i);
    Eigen::VectorXd x(traj.x.cols());
    x = traj.x.row(row).transpose();
    return x;
}

Eigen::VectorXd PlantSimulator::measure(int sample_j) const {
    double t = cfg_.sample_time(sample_j);
    auto traj = simulate_to(t);
    int row = static_cast<int>(traj.time.size()) - 1;
    Eigen::VectorXd y(cfg_.measured.size());
    const auto& d = dae();
    for (std::size_t i = 0; i < cfg_.measured.size(); ++i) {
        auto loc = d.find(cfg_.measured[i].name);
        double v = loc.kind == model::VarKind::X ? traj.x(row, loc.pos) : traj.z(row, loc.pos);
        if (cfg_.measured[i].actual_std > 0.0)
            v += cfg_.measured[i].actual_std *
                 parallel::keyed_normal(cfg_.seed, kTagMeasurement, static_cast<std::uint64_t>(sample_j), i);
        y[static_cast<Eigen::Index>(i)] = v;
    }
    return y;
}

Eigen::VectorXd PlantSimulator::measure_state(int k, double t) const {
    Eigen::VectorXd x = state_at(t);
    Eigen::VectorXd y(cfg_.measured.size());
    const auto& d = dae();
    for (std::size_t i = 0; i < cfg_.measured.size(); ++i) {
        auto loc = d.find(cfg_.measured[i].name);
        if (loc.kind != model::VarKind::X)
            throw ConfigError("state substitution requires measured differential states ('" +
                              cfg_.measured[i].name.str() + "' is not one)");
        double v = x[loc.pos];
        if (cfg_.measured[i].actual_std > 0.0)
            v += cfg_.measured[i].actual_std *
                 parallel::keyed_normal(cfg_.seed, kTagStateSample, static_cast<std::uint64_t>(k), i);
        y[static_cast<Eigen::Index>(i)] = v;
    }
    return y;
}

ClosedLoop::ClosedLoop(NmpcConfig cfg, std::function<std::unique_ptr<model::Model>()> factory,
                       std::filesystem::path out_dir)
    : cfg_(std::move(cfg)), factory_(std::move(factory)), out_(std::move(out_dir)) {
    cfg_.validate();
    std::filesystem::create_directories(out_);
    plant_ = std::make_unique<PlantSimulator>(cfg_, factory_());
    for (const auto& p : cfg_.est_params) est_names_.push_back(p.name.str());
    for (const auto& s : cfg_.est_states) est_names_.push_back(s.name.str());
    est_current_ = guess_vector();
    est_cov_.setZero(est_current_.size(), est_current_.size());
    for (std::size_t i = 0; i < cfg_.prior.names.size() && i < static_cast<std::size_t>(est_current_.size()); ++i)
        est_cov_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) =
            cfg_.prior.std[i] * cfg_.prior.std[i];
}

Eigen::VectorXd ClosedLoop::guess_vector() const {
    Eigen::VectorXd g(cfg_.est_params.size() + cfg_.est_states.size());
    int i = 0;
    for (const auto& p : cfg_.est_params) g[i++] = p.init;
    for (const auto& s : cfg_.est_states) g[i++] = s.init;
    return g;
}

std::unique_ptr<model::Model> ClosedLoop::nominal_model(const Eigen::VectorXd& est) const {
    auto m = factory_();
    for (const auto& [name, value] : cfg_.initial_guess) m->set_value(name, value);
    int i = 0;
    for (const auto& p : cfg_.est_params) m->set_value(p.name, est[i++]);
    for (const auto& s : cfg_.est_states) m->set_value(s.name, est[i++]);
    return m;
}

void ClosedLoop::write_measurement_file(int upto_j) const {
    std::vector<std::string> header{"time"};
    for (const auto& mo : cfg_.measured) {
        header.push_back(mo.name.str());
        header.push_back("std" + std::to_string(&mo - cfg_.measured.data() + 1));
    }
    csv::Writer out(out_ / ("measurement_" + std::to_string(upto_j) + ".csv"));
    out.row(header);
    for (int j = 1; j <= upto_j; ++j) {
        const Eigen::VectorXd& y = records_.at(j - 1).y_next;
        std::vector<std::string> row{csv::format(cfg_.sample_time(j))};
        for (std::size_t i = 0; i < cfg_.measured.size(); ++i) {
            row.push_back(csv::format(y[static_cast<Eigen::Index>(i)]));
            row.push_back(csv::format(cfg_.measured[i].assumed_std));
        }
        out.row(row);
    }
}

Eigen::VectorXd ClosedLoop::estimation_step(int k, Eigen::MatrixXd& cov) {
    // Measurements y(1..k) come back from the emitted file; going through the
    // file keeps paused/resumed runs identical to uninterrupted ones.
    auto exp = estim::load_measurement_csv(out_ / ("measurement_" + std::to_string(k) + ".csv"), "batch");

    // Applied (actual) controls as the experiment's time-variant operation.
    double horizon = cfg_.sample_time(k);
    sim::EventSchedule tvp;
    const auto& actual = plant_->applied_actual();
    for (int j = 0; j < k && j * cfg_.tau() < horizon; ++j) {
        tvp.times.push_back(j * cfg_.tau());
        double fe = cfg_.feed_end(j);
        bool has_off = fe < (j + 1) * cfg_.tau() - 1e-12;
        if (has_off && fe < horizon) tvp.times.push_back(fe);
    }
    {
        sim::EventSchedule::Series s;
        s.name = cfg_.control;
        for (std::size_t i = 0; i + 0 < tvp.times.size(); ++i) {
            double t = tvp.times[i];
            int j = std::min(static_cast<int>((t + 1e-12) / cfg_.tau()), cfg_.n_intervals - 1);
            s.values.push_back(t < cfg_.feed_end(j) - 1e-12 ? actual.at(j) : 0.0);
        }
        tvp.series.push_back(std::move(s));
    }
    exp.tvp = tvp;

    auto m = nominal_model(est_current_);
    std::vector<estim::ParamSpec> params = cfg_.est_params;
    for (std::size_t i = 0; i < params.size(); ++i) params[i].init = est_current_[static_cast<Eigen::Index>(i)];
    std::vector<model::AbsName> init_names;
    for (std::size_t i = 0; i < cfg_.est_states.size(); ++i) {
        const auto& s = cfg_.est_states[i];
        init_names.push_back(s.name);
        auto [var, comp] = m->resolve(s.name);
        var->val[comp] = est_current_[static_cast<Eigen::Index>(params.size() + i)];
        var->lb[comp] = s.lb;
        var->ub[comp] = s.ub;
    }

    estim::BuildOptions opts;
    opts.estimator = cfg_.estimator;
    opts.log_param = cfg_.log_param;
    opts.estimate_init_variables = !init_names.empty();
    opts.init_state_names = init_names;
    if (cfg_.estimator == estim::EstimatorKind::Map) opts.priors = cfg_.prior;
    opts.sim_opts = cfg_.sim_opts;

    auto problem = estim::build_problem(*m, {exp}, params, opts);

    // The posterior surface is multimodal; solve from the warm start and from
    // the prior mean, keeping the better optimum (the ladder is deterministic,
    // so fixed-seed runs and resume stay bitwise reproducible).
    auto result = estim::estimate(problem, cfg_.est_opts);
    Eigen::VectorXd prior_start = guess_vector();
    if ((prior_start - est_current_).lpNorm<Eigen::Infinity>() > 0.0) {
        auto alt = estim::estimate(problem, cfg_.est_opts, {}, false, prior_start);
        auto usable = [](const estim::EstimationResult& r) {
            return r.sol.status == nlp::SolveStatus::Optimal || r.sol.status == nlp::SolveStatus::MaxIter;
        };
        // both candidates minimize the same posterior: the lower objective wins
        if (usable(alt) && (!usable(result) || alt.objective < result.objective)) result = alt;
    }
    if (result.sol.status != nlp::SolveStatus::Optimal && result.sol.status != nlp::SolveStatus::MaxIter)
        throw NumericalError("interval " + std::to_string(k) +
                             " estimation failed: " + nlp::status_name(result.sol.status));
    cov = result.covariance;
    return result.estimates;
}

Eigen::VectorXd ClosedLoop::simulate_state_estimate(int k, const Eigen::VectorXd& est) const {
    auto m = nominal_model(est);
    auto ctx = sim::SimContext(m->setup());
    auto vals = m->collect_var_val();
    double t_k = k * cfg_.tau();
    std::vector<double> grid = cfg_.scenario_points(0.0, t_k);
    sim::EventSchedule sched;
    sched.times = grid;
    sim::EventSchedule::Series s;
    s.name = cfg_.control;
    const auto& actual = plant_->applied_actual();
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        double t = grid[i];
        int j = std::min(static_cast<int>((t + 1e-12) / cfg_.tau()), cfg_.n_intervals - 1);
        s.values.push_back(j < static_cast<int>(actual.size()) && t < cfg_.feed_end(j) - 1e-12 ? actual[j] : 0.0);
    }
    sched.series.push_back(std::move(s));
    auto traj = ctx.simulate_with_events(grid, sched, vals.x0, vals.z0, vals.p, vals.u, cfg_.sim_opts);
    return traj.x.row(static_cast<int>(grid.size()) - 1).transpose();
}

void ClosedLoop::optimize_step(int k, const Eigen::VectorXd& est, const Eigen::VectorXd& x_hat,
                               IntervalRecord& rec) {
    const int N = cfg_.n_intervals;
    auto m = nominal_model(est);
    // impose the state estimate as the horizon's initial condition
    {
        auto dae_names = plant_->dae().x_names; // same structure as the nominal model
        for (std::size_t i = 0; i < dae_names.size(); ++i) {
            auto [var, comp] = m->resolve(dae_names[i]);
            var->val[comp] = x_hat[static_cast<Eigen::Index>(i)];
        }
    }

    dynopt::ControlSchedule sched;
    for (int j = k; j <= N; ++j) sched.grid.push_back(j * cfg_.tau());
    dynopt::ControlSchedule::TvEntry tv;
    tv.name = cfg_.control;
    for (int j = k; j < N; ++j) {
        int idx = j - k;
        double init = idx < static_cast<int>(warm_tail_.size()) ? warm_tail_[idx] : cfg_.u_init[j];
        tv.init.push_back(std::min(std::max(init, cfg_.u_lb[j]), cfg_.u_ub[j]));
        tv.lb.push_back(cfg_.u_lb[j]);
        tv.ub.push_back(cfg_.u_ub[j]);
    }
    sched.tv_bounds.push_back(tv);

    dynopt::Transcriber tr(*m, sched);
    tr.add_tv_decision(cfg_.control);
    tr.add_objective_terminal(cfg_.objective_terminal);

    // All horizon simulations run on the canonical scenario grid so that, with
    // matched parameters, the prediction coincides with the plant's discrete
    // trajectory and re-optimization is idempotent.
    std::vector<double> sim_grid = cfg_.scenario_points(k * cfg_.tau(), cfg_.T);
    tr.set_sim_grid(sim_grid);
    if (cfg_.dt_feed < cfg_.tau() - 1e-12) {
        // pulse feed: the decision acts on [t_j, t_j + dt_feed), zero elsewhere
        std::vector<std::vector<int>> placement(N - k);
        for (int j = k; j < N; ++j) {
            for (std::size_t si = 0; si + 1 < sim_grid.size(); ++si)
                if (sim_grid[si] >= j * cfg_.tau() - 1e-12 && sim_grid[si] < cfg_.feed_end(j) - 1e-12)
                    placement[j - k].push_back(static_cast<int>(si));
        }
        tr.set_tv_placement(cfg_.control, placement, 0.0);
    }

    std::vector<double> times(sched.grid.begin() + 1, sched.grid.end());
    for (const auto& c : cfg_.path_cons)
        tr.add_path_constraint(c.name, c.var, times, c.lb, c.ub, c.relaxable, c.weight);

    auto problem = tr.transcribe(cfg_.sim_opts);

    nlp::SqpOptions opts = cfg_.ocp_opts;
    const int rows_per_group = N - k;
    if (warm_lambda_ && warm_mu_) {
        // shrink the stored multipliers by one leading entry per group/block
        int groups = static_cast<int>(cfg_.path_cons.size());
        if (warm_lambda_->size() == static_cast<Eigen::Index>(groups * (rows_per_group + 1)) &&
            warm_mu_->size() == rows_per_group + 1) {
            Eigen::VectorXd lam(groups * rows_per_group);
            for (int g = 0; g < groups; ++g)
                lam.segment(g * rows_per_group, rows_per_group) =
                    warm_lambda_->segment(g * (rows_per_group + 1) + 1, rows_per_group);
            opts.lambda0 = lam;
            opts.mu0 = warm_mu_->tail(rows_per_group);
        }
    }

    auto step = problem.solve_step(opts);
    if (step.sol.status != nlp::SolveStatus::Optimal) {
        // deterministic retry ladder: the landscape is rugged enough that the
        // scheduled start occasionally stalls while nearby starts converge
        Eigen::VectorXd w0 = problem.initial_w();
        for (double scale : {0.0, 0.5, -0.5}) {
            nlp::SqpOptions retry_opts = cfg_.ocp_opts; // fresh multipliers
            Eigen::VectorXd w_try = w0 * scale;
            for (int i = 0; i < w_try.size(); ++i)
                w_try[i] = std::min(std::max(w_try[i], problem.problem().w_lb[i]), problem.problem().w_ub[i]);
            auto retry = problem.solve_step(retry_opts, w_try);
            if (retry.sol.status == nlp::SolveStatus::Optimal) {
                step = retry;
                break;
            }
            if (retry.sol.f < step.sol.f) step = retry;
        }
    }
    rec.relaxed = false;
    if (step.sol.status != nlp::SolveStatus::Optimal) {
        // one relaxed attempt before giving up
        std::vector<std::string> relaxable;
        for (const auto& c : cfg_.path_cons)
            if (c.relaxable) relaxable.push_back(c.name);
        if (!relaxable.empty()) {
            auto relaxed = problem.relax(relaxable);
            nlp::SqpOptions ropts = cfg_.ocp_opts; // no warm multipliers for the widened problem
            auto rstep = relaxed.solve_step(ropts);
            if (rstep.sol.status != nlp::SolveStatus::Optimal) {
                // same deterministic ladder for the widened problem
                Eigen::VectorXd w0r = relaxed.initial_w();
                for (double scale : {0.0, 0.5, -0.5}) {
                    Eigen::VectorXd w_try = w0r * scale;
                    for (int i = 0; i < w_try.size(); ++i)
                        w_try[i] = std::min(std::max(w_try[i], relaxed.problem().w_lb[i]),
                                            relaxed.problem().w_ub[i]);
                    auto retry = relaxed.solve_step(ropts, w_try);
                    if (retry.sol.status == nlp::SolveStatus::Optimal) {
                        rstep = retry;
                        break;
                    }
                }
            }
            if (rstep.sol.status == nlp::SolveStatus::Optimal) {
                step = rstep;
                rec.relaxed = true;
                problem = relaxed;
            } else {
                throw NumericalError("interval " + std::to_string(k) + " optimization failed: " +
                                     nlp::status_name(step.sol.status) + " (also after relaxation: " +
                                     nlp::status_name(rstep.sol.status) + ")");
            }
        } else {
            throw NumericalError("interval " + std::to_string(k) +
                                 " optimization failed: " + nlp::status_name(step.sol.status));
        }
    }

    rec.u_tail = step.tv[0].value;
    rec.objective_predicted = step.sol.f;
    rec.solve_iterations = step.sol.iterations;
    rec.solve_status = nlp::status_name(step.sol.status);

    auto sol_path = out_ / ("solution_" + std::to_string(k) + ".csv");
    problem.export_solution_csv(sol_path, step);
    rec.files.push_back(sol_path.string());

    // warm data for the next (shorter) horizon
    if (!rec.relaxed) {
        warm_lambda_ = step.sol.lambda_g;
        warm_mu_ = step.sol.lambda_w;
    } else {
        warm_lambda_.reset();
        warm_mu_.reset();
    }
    warm_tail_.assign(rec.u_tail.begin() + 1, rec.u_tail.end());
    if (!rec.u_tail.empty()) warm_tail_.push_back(rec.u_tail.back());
}

IntervalRecord ClosedLoop::step_adaptive(int k) {
    IntervalRecord rec;
    rec.k = k;
    rec.est_names = est_names_;

    if (k >= 1 && !cfg_.analysis_delay) {
        Eigen::MatrixXd cov;
        est_current_ = estimation_step(k, cov);
        est_cov_ = cov;
    }
    rec.estimate = est_current_;
    rec.est_cov = est_cov_;

    if (k == 0) {
        auto m = nominal_model(est_current_);
        m->setup();
        auto vals = m->collect_var_val();
        rec.x_hat = Eigen::Map<Eigen::VectorXd>(vals.x0.data(), static_cast<Eigen::Index>(vals.x0.size()));
    } else {
        rec.x_hat = simulate_state_estimate(k, est_current_);
    }

    if (k < cfg_.n_intervals) {
        optimize_step(k, est_current_, rec.x_hat, rec);
        rec.u_commanded = rec.u_tail.front();
        rec.u_applied = plant_->apply_control(k, rec.u_commanded);
        rec.y_next = plant_->measure(k + 1);
    }
    return rec;
}

IntervalRecord ClosedLoop::step_state(int k) {
    IntervalRecord rec;
    rec.k = k;
    rec.est_names = est_names_;
    rec.estimate = est_current_; // parameters are never updated in state mode
    rec.est_cov = est_cov_;

    if (k == 0) {
        auto m = nominal_model(est_current_);
        m->setup();
        auto vals = m->collect_var_val();
        rec.x_hat = Eigen::Map<Eigen::VectorXd>(vals.x0.data(), static_cast<Eigen::Index>(vals.x0.size()));
    } else {
        // nominal prediction, then overwrite the measured components with the
        // (noisy) measured plant states
        rec.x_hat = simulate_state_estimate(k, est_current_);
        Eigen::VectorXd y = plant_->measure_state(k, k * cfg_.tau());
        const auto& d = plant_->dae();
        for (std::size_t i = 0; i < cfg_.measured.size(); ++i) {
            auto loc = d.find(cfg_.measured[i].name);
            rec.x_hat[loc.pos] = y[static_cast<Eigen::Index>(i)];
        }
    }

    if (k < cfg_.n_intervals) {
        optimize_step(k, est_current_, rec.x_hat, rec);
        rec.u_commanded = rec.u_tail.front();
        rec.u_applied = plant_->apply_control(k, rec.u_commanded);
        rec.y_next = plant_->measure(k + 1);
    }
    return rec;
}

IntervalRecord ClosedLoop::step_open_loop(int k) {
    IntervalRecord rec;
    rec.k = k;
    rec.est_names = est_names_;
    rec.estimate = est_current_;
    rec.est_cov = est_cov_;

    if (k == 0) {
        auto m = nominal_model(est_current_);
        m->setup();
        auto vals = m->collect_var_val();
        rec.x_hat = Eigen::Map<Eigen::VectorXd>(vals.x0.data(), static_cast<Eigen::Index>(vals.x0.size()));
        optimize_step(0, est_current_, rec.x_hat, rec);
        open_loop_plan_ = rec.u_tail;
    } else {
        rec.x_hat = simulate_state_estimate(k, est_current_);
        rec.u_tail.assign(open_loop_plan_.begin() + k, open_loop_plan_.end());
        rec.objective_predicted = records_.empty() ? 0.0 : records_.front().objective_predicted;
    }
    rec.u_commanded = rec.u_tail.front();
    rec.u_applied = plant_->apply_control(k, rec.u_commanded);
    rec.y_next = plant_->measure(k + 1);
    return rec;
}

IntervalRecord ClosedLoop::move_one_step(int k) {
    if (k != static_cast<int>(records_.size()))
        throw ConfigError("intervals must be stepped in order (got " + std::to_string(k) + ", expected " +
                          std::to_string(records_.size()) + ")");
    IntervalRecord rec;
    switch (cfg_.mode) {
    case Mode::OpenLoop: rec = step_open_loop(k); break;
    case Mode::State: rec = step_state(k); break;
    case Mode::Adaptive: rec = step_adaptive(k); break;
    }
    records_.push_back(rec);
    return rec;
}

IntervalRecord ClosedLoop::move_one_adaptive_step(int k) {
    if (k != static_cast<int>(records_.size()))
        throw ConfigError("intervals must be stepped in order");
    IntervalRecord rec = step_adaptive(k);
    records_.push_back(rec);
    return rec;
}

IntervalRecord ClosedLoop::move_one_state_step(int k) {
    if (k != static_cast<int>(records_.size()))
        throw ConfigError("intervals must be stepped in order");
    IntervalRecord rec = step_state(k);
    records_.push_back(rec);
    return rec;
}

IntervalRecord ClosedLoop::move_one_open_loop_step(int k) {
    if (k != static_cast<int>(records_.size()))
        throw ConfigError("intervals must be stepped in order");
    IntervalRecord rec = step_open_loop(k);
    records_.push_back(rec);
    return rec;
}

std::vector<IntervalRecord> ClosedLoop::run_until(int k_end) {
    while (static_cast<int>(records_.size()) < k_end) {
        move_one_step(static_cast<int>(records_.size()));
        emit_interval_files(records_.back());
    }
    return records_;
}

std::vector<IntervalRecord> ClosedLoop::run() {
    run_until(cfg_.n_intervals);
    write_summary_csv();
    return records_;
}

std::vector<IntervalRecord> ClosedLoop::resume(int k0) {
    if (k0 <= 0 || k0 > cfg_.n_intervals) throw ConfigError("resume interval out of range");
    load_snapshot(k0 - 1);
    run_until(cfg_.n_intervals);
    write_summary_csv();
    return records_;
}

void ClosedLoop::emit_interval_files(IntervalRecord& rec) {
    int k = rec.k;
    auto add = [&](const std::filesystem::path& p) { rec.files.push_back(p.string()); };

    if (cfg_.mode == Mode::Adaptive && k >= 1) {
        auto path = out_ / ("estimated_parameter_" + std::to_string(k) + ".csv");
        csv::Writer out(path);
        out.row({"name", "value", "std"});
        for (std::size_t i = 0; i < est_names_.size(); ++i)
            out.row({est_names_[i], csv::format(rec.estimate[static_cast<Eigen::Index>(i)]),
                     csv::format(std::sqrt(std::max(0.0, rec.est_cov(static_cast<Eigen::Index>(i),
                                                                     static_cast<Eigen::Index>(i)))))});
        add(path);
    }
    {
        auto path = out_ / ("model_setting_estimate_" + std::to_string(k) + ".csv");
        csv::Writer out(path);
        out.row({"name", "value"});
        for (std::size_t i = 0; i < cfg_.est_params.size(); ++i)
            out.row({cfg_.est_params[i].name.str(), csv::format(rec.estimate[static_cast<Eigen::Index>(i)])});
        const auto& xn = plant_->dae().x_names;
        for (std::size_t i = 0; i < xn.size(); ++i)
            out.row({xn[i].str(), csv::format(rec.x_hat[static_cast<Eigen::Index>(i)])});
        add(path);
    }
    {
        auto path = out_ / "does_invar.csv";
        csv::Writer out(path);
        out.row({"name", "value"}); // no time-invariant decisions in this loop
        add(path);
    }
    {
        auto path = out_ / ("does_past_" + std::to_string(k) + ".csv");
        csv::Writer out(path);
        out.row({"interval", "t_start", "t_end", "name", "value"});
        const auto& commanded = plant_->applied_commanded();
        for (int j = 0; j < k && j < static_cast<int>(commanded.size()); ++j)
            out.row({std::to_string(j), csv::format(j * cfg_.tau()), csv::format(cfg_.feed_end(j)),
                     cfg_.control.str(), csv::format(commanded[j])});
        add(path);
    }
    {
        auto path = out_ / ("does_full_" + std::to_string(k) + ".csv");
        csv::Writer out(path);
        out.row({"interval", "t_start", "t_end", "name", "value"});
        const auto& commanded = plant_->applied_commanded();
        for (int j = 0; j < cfg_.n_intervals; ++j) {
            double v;
            if (j < k && j < static_cast<int>(commanded.size()))
                v = commanded[j];
            else if (j - k < static_cast<int>(rec.u_tail.size()) && j >= k)
                v = rec.u_tail[j - k];
            else
                continue;
            out.row({std::to_string(j), csv::format(j * cfg_.tau()), csv::format(cfg_.feed_end(j)),
                     cfg_.control.str(), csv::format(v)});
        }
        add(path);
    }
    if (rec.y_next.size() > 0) {
        write_measurement_file(k + 1);
        add(out_ / ("measurement_" + std::to_string(k + 1) + ".csv"));
    }
    write_snapshot(rec);
    add(out_ / ("snapshot_" + std::to_string(k) + ".json"));
}

namespace {

nlohmann::ordered_json vec_json(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd vec_from_json(const nlohmann::ordered_json& j) {
    auto v = j.get<std::vector<double>>();
    return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

nlohmann::ordered_json mat_json(const Eigen::MatrixXd& m) {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(m.cols());
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd mat_from_json(const nlohmann::ordered_json& j) {
    auto rows = j.get<std::vector<std::vector<double>>>();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                      rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    return m;
}

} // namespace

void ClosedLoop::write_snapshot(const IntervalRecord& rec) {
    nlohmann::ordered_json j;
    j["k"] = rec.k;
    j["mode"] = mode_name(cfg_.mode);
    j["seed"] = cfg_.seed;
    j["applied_commanded"] = plant_->applied_commanded();
    j["applied_actual"] = plant_->applied_actual();
    j["estimate"] = vec_json(est_current_);
    j["est_cov"] = mat_json(est_cov_);
    j["warm_tail"] = warm_tail_;
    if (warm_lambda_) j["warm_lambda"] = vec_json(*warm_lambda_);
    if (warm_mu_) j["warm_mu"] = vec_json(*warm_mu_);
    j["open_loop_plan"] = open_loop_plan_;

    nlohmann::ordered_json recs = nlohmann::ordered_json::array();
    for (const auto& r : records_) {
        nlohmann::ordered_json jr;
        jr["k"] = r.k;
        jr["estimate"] = vec_json(r.estimate);
        jr["est_cov"] = mat_json(r.est_cov);
        jr["x_hat"] = vec_json(r.x_hat);
        jr["u_tail"] = r.u_tail;
        jr["u_commanded"] = r.u_commanded;
        jr["u_applied"] = r.u_applied;
        jr["y_next"] = vec_json(r.y_next);
        jr["objective_predicted"] = r.objective_predicted;
        jr["relaxed"] = r.relaxed;
        recs.push_back(std::move(jr));
    }
    j["records"] = recs;

    std::ofstream out(out_ / ("snapshot_" + std::to_string(rec.k) + ".json"));
    if (!out) throw ConfigError("cannot write snapshot file");
    out << j.dump(1) << "\n";
}

void ClosedLoop::load_snapshot(int k) {
    auto path = out_ / ("snapshot_" + std::to_string(k) + ".json");
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open snapshot file: " + path.string());
    nlohmann::ordered_json j;
    in >> j;
    if (j.at("k").get<int>() != k) throw ConfigError("snapshot interval mismatch");

    plant_->restore_applied(j.at("applied_commanded").get<std::vector<double>>(),
                            j.at("applied_actual").get<std::vector<double>>());
    est_current_ = vec_from_json(j.at("estimate"));
    est_cov_ = mat_from_json(j.at("est_cov"));
    warm_tail_ = j.at("warm_tail").get<std::vector<double>>();
    warm_lambda_.reset();
    warm_mu_.reset();
    if (j.contains("warm_lambda")) warm_lambda_ = vec_from_json(j["warm_lambda"]);
    if (j.contains("warm_mu")) warm_mu_ = vec_from_json(j["warm_mu"]);
    open_loop_plan_ = j.at("open_loop_plan").get<std::vector<double>>();

    records_.clear();
    for (const auto& jr : j.at("records")) {
        IntervalRecord rec;
        rec.k = jr.at("k").get<int>();
        rec.est_names = est_names_;
        rec.estimate = vec_from_json(jr.at("estimate"));
        rec.est_cov = mat_from_json(jr.at("est_cov"));
        rec.x_hat = vec_from_json(jr.at("x_hat"));
        rec.u_tail = jr.at("u_tail").get<std::vector<double>>();
        rec.u_commanded = jr.at("u_commanded").get<double>();
        rec.u_applied = jr.at("u_applied").get<double>();
        rec.y_next = vec_from_json(jr.at("y_next"));
        rec.objective_predicted = jr.at("objective_predicted").get<double>();
        rec.relaxed = jr.at("relaxed").get<bool>();
        records_.push_back(std::move(rec));
    }
}

double ClosedLoop::plant_objective() const {
    auto loc = plant_->dae().find(cfg_.objective_terminal);
    Eigen::VectorXd x = plant_->state_at(cfg_.T);
    if (loc.kind != model::VarKind::X) throw ConfigError("terminal objective must be a differential state");
    return x[loc.pos];
}

std::vector<double> ClosedLoop::plant_violations() const {
    auto traj = plant_->fine_trajectory();
    std::vector<double> out;
    const auto& d = plant_->dae();
    for (const auto& c : cfg_.path_cons) {
        auto loc = d.find(c.var);
        double worst = 0.0;
        for (std::size_t r = 0; r < traj.time.size(); ++r) {
            double v = loc.kind == model::VarKind::X ? traj.x(static_cast<int>(r), loc.pos)
                                                     : traj.z(static_cast<int>(r), loc.pos);
            if (std::isfinite(c.lb)) worst = std::max(worst, c.lb - v);
            if (std::isfinite(c.ub)) worst = std::max(worst, v - c.ub);
        }
        out.push_back(worst);
    }
    return out;
}

void ClosedLoop::write_summary_csv() {
    auto traj = plant_->fine_trajectory();
    const auto& d = plant_->dae();
    csv::Writer out(out_ / "summary.csv");
    std::vector<std::string> header{"interval", "t_start", "u_commanded", "u_applied", "objective_predicted"};
    for (const auto& c : cfg_.path_cons) header.push_back("violation_" + c.name);
    for (const auto& n : est_names_) header.push_back("est_" + n);
    out.row(header);
    for (const auto& rec : records_) {
        std::vector<std::string> row{std::to_string(rec.k), csv::format(rec.k * cfg_.tau()),
                                     csv::format(rec.u_commanded), csv::format(rec.u_applied),
                                     csv::format(rec.objective_predicted)};
        for (const auto& c : cfg_.path_cons) {
            auto loc = d.find(c.var);
            double worst = 0.0;
            for (std::size_t r = 0; r < traj.time.size(); ++r) {
                if (traj.time[r] < rec.k * cfg_.tau() - 1e-12 ||
                    traj.time[r] > (rec.k + 1) * cfg_.tau() + 1e-12)
                    continue;
                double v = loc.kind == model::VarKind::X ? traj.x(static_cast<int>(r), loc.pos)
                                                         : traj.z(static_cast<int>(r), loc.pos);
                if (std::isfinite(c.lb)) worst = std::max(worst, c.lb - v);
                if (std::isfinite(c.ub)) worst = std::max(worst, v - c.ub);
            }
            row.push_back(csv::format(worst));
        }
        for (Eigen::Index i = 0; i < rec.estimate.size(); ++i) row.push_back(csv::format(rec.estimate[i]));
        out.row(row);
    }
    // closing row: realized plant objective
    std::vector<std::string> final_row{"final", csv::format(cfg_.T), "", "",
                                       csv::format(traj.x(static_cast<int>(traj.time.size()) - 1,
                                                          d.find(cfg_.objective_terminal).pos))};
    out.row(final_row);
}

NmpcConfig load_config_dir(const std::filesystem::path& dir) {
    auto toml = config::Settings::load(dir / "nmpc.toml");
    NmpcConfig cfg;

    // Control and sampling grids from the control-setting table.
    auto cs = csv::read_table(dir / "control_setting.csv");
    double t0 = -1, t1 = -1, feed_end0 = -1, meas0 = -1;
    int max_interval = 0;
    for (std::size_t r = 0; r < cs.rows.size(); ++r) {
        const auto& row = cs.rows[r];
        std::string where = "at control_setting.csv line " + std::to_string(cs.row_lines[r]);
        int interval = static_cast<int>(csv::parse_number(row[0], where));
        max_interval = std::max(max_interval, interval);
        if (interval == 0) {
            t0 = csv::parse_number(row[1], where);
            feed_end0 = csv::parse_number(row[2], where);
            meas0 = csv::parse_number(row[3], where);
        }
        if (interval == 1) t1 = csv::parse_number(row[1], where);
    }
    if (t0 < 0 || t1 < 0) throw ConfigError("control_setting.csv must contain intervals 0 and 1");
    double tau = t1 - t0;
    cfg.n_intervals = max_interval;
    cfg.T = max_interval * tau;
    cfg.dt_feed = feed_end0 - t0;
    cfg.dt_prep = feed_end0 - meas0;

    cfg.mode = mode_from_string(toml.text_or("mode", "adaptive"));
    cfg.seed = static_cast<std::uint64_t>(toml.integer_or("seed", 1));
    cfg.control = model::AbsName::parse(toml.text("control"));
    cfg.objective_terminal = model::AbsName::parse(toml.text("objective"));
    cfg.estimator = toml.text_or("estimator", "map") == "ml"
                        ? estim::EstimatorKind::Ml
                        : (toml.text_or("estimator", "map") == "ols" ? estim::EstimatorKind::Ols
                                                                     : estim::EstimatorKind::Map);
    cfg.log_param = toml.boolean_or("log_param", false);
    cfg.actuator_std = toml.number_or("actuator_std", 0.0);
    cfg.analysis_delay = toml.boolean_or("analysis_delay", false);
    if (toml.has("h_max")) cfg.sim_opts.h_max = toml.number("h_max");
    if (toml.has("newton_tol")) cfg.sim_opts.newton_tol = toml.number("newton_tol");
    double tol = toml.number_or("tol", 1e-6);
    cfg.est_opts.tol = tol;
    cfg.ocp_opts.tol = tol;
    cfg.est_opts.max_iter = static_cast<int>(toml.integer_or("est_max_iter", 100));
    cfg.ocp_opts.max_iter = static_cast<int>(toml.integer_or("ocp_max_iter", 150));

    auto outputs = toml.list_or("outputs");
    auto assumed = toml.number_list_or("assumed_std");
    auto actual = toml.number_list_or("noise_std");
    if (outputs.empty()) throw ConfigError("nmpc.toml: no measured outputs");
    if (assumed.size() != outputs.size() || actual.size() != outputs.size())
        throw ConfigError("nmpc.toml: outputs, assumed_std and noise_std must have the same length");
    for (std::size_t i = 0; i < outputs.size(); ++i)
        cfg.measured.push_back({model::AbsName::parse(outputs[i]), assumed[i], actual[i]});

    // control bounds (Table S2 layout)
    auto sched = dynopt::ControlSchedule::load_csv(dir / "schedule.csv");
    const auto* tv = sched.find_tv(cfg.control);
    if (!tv) throw ConfigError("schedule.csv has no tv_bounds for the control");
    cfg.u_init = tv->init;
    cfg.u_lb = tv->lb;
    cfg.u_ub = tv->ub;

    auto read_pairs = [&](const char* file) {
        std::vector<std::pair<model::AbsName, double>> out;
        auto t = csv::read_table(dir / file);
        for (std::size_t r = 0; r < t.rows.size(); ++r)
            out.emplace_back(model::AbsName::parse(t.rows[r][0]),
                             csv::parse_number(t.rows[r][1], std::string("in ") + file));
        return out;
    };
    cfg.truth = read_pairs("plant_setting.csv");
    cfg.initial_guess = read_pairs("model_setting_estimate_0.csv");

    cfg.prior = estim::load_prior_csv(dir / "estimated_parameters_0.csv");

    // bounds for the estimated quantities; split into parameters and states when
    // the loop is built (the parse here is name-based only)
    auto lu = csv::read_table(dir / "estimated_parameters_lu.csv");
    for (std::size_t r = 0; r < lu.rows.size(); ++r) {
        std::string where = "at estimated_parameters_lu.csv line " + std::to_string(lu.row_lines[r]);
        estim::ParamSpec spec;
        spec.name = model::AbsName::parse(lu.rows[r][0]);
        spec.lb = csv::parse_number(lu.rows[r][1], where);
        spec.ub = csv::parse_number(lu.rows[r][2], where);
        const double* mean = nullptr;
        for (const auto& [n, v] : cfg.initial_guess)
            if (n == spec.name) mean = &v;
        if (!mean) throw ConfigError("estimated quantity '" + spec.name.str() + "' has no initial guess");
        spec.init = *mean;
        bool is_state = toml.has("state_decisions") &&
                        [&] {
                            for (const auto& s : toml.list_or("state_decisions"))
                                if (model::AbsName::parse(s) == spec.name) return true;
                            return false;
                        }();
        if (is_state)
            cfg.est_states.push_back(spec);
        else
            cfg.est_params.push_back(spec);
    }

    if (std::filesystem::exists(dir / "constraints.csv")) {
        auto t = csv::read_table(dir / "constraints.csv");
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            std::string where = "at constraints.csv line " + std::to_string(t.row_lines[r]);
            const auto& row = t.rows[r];
            if (row.size() < 4) throw ConfigError("malformed constraint row " + where);
            NmpcConfig::Cons c;
            c.name = row[0];
            c.var = model::AbsName::parse(row[1]);
            auto lb = csv::parse_cell(row[2]);
            auto ub = csv::parse_cell(row[3]);
            c.lb = lb ? *lb : -kInf;
            c.ub = ub ? *ub : kInf;
            if (row.size() > 4 && !row[4].empty()) c.relaxable = row[4] == "1" || row[4] == "true";
            if (row.size() > 5 && !row[5].empty()) c.weight = csv::parse_number(row[5], where);
            cfg.path_cons.push_back(c);
        }
    }
    return cfg;
}

} // namespace eoc::nmpc
