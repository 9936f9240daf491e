// Acceptance suite: every release criterion as one pass/fail line, run at the
// pinned tolerances. Exit code is the number of failed criteria.

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "eoc/demo.hpp"
#include "eoc/deriv.hpp"
#include "eoc/dynopt.hpp"
#include "eoc/estim.hpp"
#include "eoc/nmpc.hpp"
#include "eoc/parallel.hpp"
#include "eoc/sim.hpp"

using namespace eoc;
using model::AbsName;
namespace fs = std::filesystem;

namespace {

struct Harness {
    int failures = 0;
    void criterion(int n, bool pass, const std::string& what, const std::string& detail) {
        std::printf("%s criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", n, what.c_str(), detail.c_str());
        std::fflush(stdout);
        if (!pass) ++failures;
    }
};

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> t(n);
    for (int i = 0; i < n; ++i) t[i] = a + (b - a) * i / (n - 1);
    return t;
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

fs::path work_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / "eoc_acceptance" / tag;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---- shared demo pieces -----------------------------------------------------

std::shared_ptr<sim::SimContext> demo_context() {
    auto m = demo::make_simple_dae();
    return std::make_shared<sim::SimContext>(m->setup());
}

struct OcpSolved {
    std::vector<double> grid;
    std::vector<double> controls;
    double objective;
    nlp::NlpSolution sol;
};

OcpSolved solve_ocp_simple(double h_max) {
    auto m = demo::make_simple_dae();
    m->var_obj("ug").val = {0.5};
    m->var_obj("ug").lb = {-1.0};
    m->var_obj("ug").ub = {1.0};
    dynopt::ControlSchedule sched;
    sched.grid = linspace(0.0, 10.0, 21);
    dynopt::Transcriber tr(*m, sched);
    tr.add_tv_decision(AbsName("simple_dae.ug", 0));
    tr.add_objective_terminal(AbsName("simple_dae.obj", 0));
    std::vector<double> times(sched.grid.begin() + 1, sched.grid.end());
    tr.add_path_constraint("x2_floor", AbsName("simple_dae.xg", 1), times, -0.25,
                           std::numeric_limits<double>::infinity(), true);
    sim::IntegrateOptions opts;
    opts.h_max = h_max;
    auto problem = tr.transcribe(opts);
    nlp::SqpOptions solver;
    solver.max_iter = 200;
    auto step = problem.solve_step(solver);
    OcpSolved out;
    out.grid = sched.grid;
    out.controls = step.tv[0].value;
    out.objective = step.sol.f;
    out.sol = step.sol;
    return out;
}

nmpc::NmpcConfig closed_loop_config(bool mismatch, double noise_std, nmpc::Mode mode) {
    nmpc::NmpcConfig cfg;
    cfg.T = 20.0;
    cfg.n_intervals = 20;
    cfg.dt_feed = 1.0;
    cfg.dt_prep = 0.1;
    cfg.mode = mode;
    cfg.seed = 1;
    cfg.control = AbsName("simple_dae.ug", 0);
    cfg.u_init.assign(20, 0.5);
    cfg.u_lb.assign(20, -1.0);
    cfg.u_ub.assign(20, 1.0);
    cfg.measured = {{AbsName("simple_dae.xg", 0), 0.05, noise_std},
                    {AbsName("simple_dae.xg", 1), 0.05, noise_std}};
    double p_guess = mismatch ? 0.5 : 1.0;
    double x1_guess = mismatch ? 0.1 : 0.0;
    double x2_guess = mismatch ? 0.9 : 1.0;
    cfg.initial_guess = {{AbsName("simple_dae.pg", 0), p_guess},
                         {AbsName("simple_dae.xg", 0), x1_guess},
                         {AbsName("simple_dae.xg", 1), x2_guess}};
    cfg.est_params = {{AbsName("simple_dae.pg", 0), p_guess, 0.0, 10.0}};
    cfg.est_states = {{AbsName("simple_dae.xg", 0), x1_guess, 0.0, 10.0},
                      {AbsName("simple_dae.xg", 1), x2_guess, 0.0, 10.0}};
    cfg.prior.names = {AbsName("simple_dae.pg", 0), AbsName("simple_dae.xg", 0), AbsName("simple_dae.xg", 1)};
    cfg.prior.mean = {p_guess, x1_guess, x2_guess};
    cfg.prior.std = {0.25, 0.05, 0.05};
    cfg.path_cons.push_back({"x2_floor", AbsName("simple_dae.xg", 1), -0.25,
                             std::numeric_limits<double>::infinity(), true, 1e3});
    cfg.objective_terminal = AbsName("simple_dae.obj", 0);
    // long-horizon sensitivities amplify integrator noise; keep it well below
    // the optimizer's working precision
    cfg.sim_opts.newton_tol = 1e-13;
    cfg.ocp_opts.max_iter = 800;
    cfg.est_opts.max_iter = 200;
    return cfg;
}

auto demo_factory = [] { return demo::make_simple_dae(); };

// ---- criteria ---------------------------------------------------------------

void criterion_1(Harness& h) {
    try {
        auto ctx = demo_context();
        auto grid = linspace(0.0, 10.0, 100);
        double spacing = grid[1] - grid[0];
        sim::IntegrateOptions base, oracle;
        base.h_max = spacing / 128.0;
        oracle.h_max = base.h_max / 16.0;

        auto t0 = std::chrono::steady_clock::now();
        auto traj = ctx->integrate(grid, {0.0, 1.0, 0.0}, {0.0}, {1.0}, {0.0}, base);
        double runtime = seconds_since(t0);
        auto ref = ctx->integrate(grid, {0.0, 1.0, 0.0}, {0.0}, {1.0}, {0.0}, oracle);

        double worst = 0.0;
        for (int r = 0; r < traj.x.rows(); ++r) {
            for (int c = 0; c < traj.x.cols(); ++c)
                worst = std::max(worst,
                                 std::abs(traj.x(r, c) - ref.x(r, c)) / std::max(1.0, std::abs(ref.x(r, c))));
            worst = std::max(worst, std::abs(traj.z(r, 0) - ref.z(r, 0)) / std::max(1.0, std::abs(ref.z(r, 0))));
        }
        bool pass = worst <= 1e-5 && traj.z(0, 0) == 0.0 && runtime < 1.0;
        h.criterion(1, pass, "demo simulation matches the step-refined self-oracle",
                    fmt("max rel err %.3g <= 1e-5, z(0)=%g exactly, runtime %.3fs < 1s", worst, traj.z(0, 0),
                        runtime));
    } catch (const std::exception& e) {
        h.criterion(1, false, "demo simulation matches the step-refined self-oracle", e.what());
    }
}

void criterion_2(Harness& h) {
    try {
        auto t0 = std::chrono::steady_clock::now();
        auto ctx = demo_context();
        auto grid = linspace(0.0, 10.0, 100);

        sim::SymbolicSimulation::Config cfg;
        cfg.t_grid = grid;
        cfg.x0 = {0.0, 1.0, 0.0};
        cfg.z0 = {0.0};
        cfg.p = {1.0};
        cfg.u = {0.0};
        cfg.opts.newton_tol = 1e-12; // keep integration noise far below the FD step
        sim::SymbolicSimulation::Config::SymbolSeries ss;
        ss.name = AbsName("simple_dae.pg", 0);
        for (int k = 0; k < 99; ++k) {
            ss.symbols.push_back(expr::make_symbol("acc2.p" + std::to_string(k)));
            ss.fallback.push_back(1.0);
        }
        cfg.symbol_series.push_back(ss);
        auto sym = std::make_shared<sim::SymbolicSimulation>(ctx, cfg);

        std::vector<deriv::OutputSpec> outs;
        outs.push_back({AbsName("simple_dae.obj", 0), deriv::OutputSpec::kFinal});
        for (int t = 0; t < 100; ++t) outs.push_back({AbsName("simple_dae.xg", 0), t});

        deriv::EvaluatorOptions fo;
        fo.method = deriv::GradientMethod::Forward;
        deriv::DerivativeEvaluator forward(sym, outs, fo);
        deriv::EvaluatorOptions fd;
        fd.method = deriv::GradientMethod::FiniteDifference;
        deriv::DerivativeEvaluator central(sym, outs, fd);

        std::vector<double> q(99);
        for (int k = 0; k < 99; ++k) q[k] = 1.0 + 0.3 * parallel::keyed_normal(1, 21, k, 0);

        auto rf = forward.evaluate(q);
        auto rd = central.evaluate(q);
        double worst_abs = 0.0, worst_rel = 0.0;
        bool pass = true;
        for (int i = 0; i < rf.jacobian.rows(); ++i)
            for (int j = 0; j < rf.jacobian.cols(); ++j) {
                double a = rf.jacobian(i, j), b = rd.jacobian(i, j);
                double err = std::abs(a - b);
                if (err > std::max(1e-6, 1e-4 * std::abs(b))) pass = false;
                worst_abs = std::max(worst_abs, err);
                worst_rel = std::max(worst_rel, err / std::max(1e-12, std::abs(b)));
            }
        double runtime = seconds_since(t0);
        pass = pass && runtime < 30.0;
        h.criterion(2, pass, "forward sensitivities match central finite differences",
                    fmt("100x99 Jacobian, worst abs %.3g, worst rel %.3g, runtime %.2fs < 30s", worst_abs,
                        worst_rel, runtime));
    } catch (const std::exception& e) {
        h.criterion(2, false, "forward sensitivities match central finite differences", e.what());
    }
}

OcpSolved criterion_3(Harness& h) {
    OcpSolved base{};
    try {
        auto t0 = std::chrono::steady_clock::now();
        base = solve_ocp_simple(0.125);          // grid spacing 0.5, four substeps
        auto oracle = solve_ocp_simple(0.03125); // integrator step halved twice
        double runtime = seconds_since(t0);

        bool optimal = base.sol.status == nlp::SolveStatus::Optimal;
        double worst_cons = 0.0;
        for (int i = 0; i < base.sol.g.size(); ++i) worst_cons = std::max(worst_cons, -0.25 - base.sol.g[i]);
        double obj_gap = std::abs(base.objective - oracle.objective) / std::abs(oracle.objective);
        bool pass = optimal && worst_cons <= 1e-6 && base.sol.kkt_residual <= 1e-6 && obj_gap <= 0.01 &&
                    runtime < 60.0;
        h.criterion(3, pass, "the control demo solves to optimality",
                    fmt("status %s, max violation %.2g <= 1e-6, kkt %.2g <= 1e-6, objective %.6g within "
                        "%.3g%% of the refined oracle, runtime %.2fs < 60s",
                        nlp::status_name(base.sol.status).c_str(), worst_cons, base.sol.kkt_residual,
                        base.objective, 100.0 * obj_gap, runtime));
    } catch (const std::exception& e) {
        h.criterion(3, false, "the control demo solves to optimality", e.what());
    }
    return base;
}

void criterion_4(Harness& h, const OcpSolved& ocp) {
    try {
        auto t0 = std::chrono::steady_clock::now();
        auto e1 = estim::load_measurement_csv(fs::path(EOC_TEST_DATA_DIR) / "measurement_1.csv", "exp-1");
        auto e2 = estim::load_measurement_csv(fs::path(EOC_TEST_DATA_DIR) / "measurement_2.csv", "exp-2");

        // experiment 1 ran under the optimal control policy; experiment 2 uncontrolled
        e1.tvp.times = std::vector<double>(ocp.grid.begin(), ocp.grid.end() - 1);
        e1.tvp.series.push_back({AbsName("simple_dae.ug", 0), ocp.controls});

        auto m = demo::make_simple_dae();
        m->var_obj("xg").lb = {-5.0, -5.0};
        m->var_obj("xg").ub = {5.0, 5.0};

        estim::BuildOptions opts;
        opts.estimator = estim::EstimatorKind::Ml;
        opts.estimate_init_variables = true;
        opts.init_state_names = {AbsName("simple_dae.xg", 0), AbsName("simple_dae.xg", 1)};
        // the reference confidence intervals correspond to sensitivities
        // accumulated over the dense stored trajectory (100 preset points per
        // experiment), not only the measurement rows
        opts.ci_dense_grid_points = 100;
        opts.sim_opts.h_max = 0.02;

        auto problem =
            estim::build_problem(*m, {e1, e2}, {{AbsName("simple_dae.pg", 0), 1.0, 0.1, 10.0}}, opts);
        nlp::SqpOptions solver;
        solver.max_iter = 150;
        auto result = estim::estimate(problem, solver);
        double runtime = seconds_since(t0);

        const double ref_est[5] = {1.01, 0.00, 1.00, 0.01, 0.95};
        const double ref_ci[5] = {0.018, 0.002, 0.004, 0.009, 0.023};
        bool pass = result.sol.status == nlp::SolveStatus::Optimal;
        pass = pass && result.estimates[0] >= 0.96 && result.estimates[0] <= 1.06;
        for (int i = 1; i < 5; ++i) pass = pass && std::abs(result.estimates[i] - ref_est[i]) <= 0.05;
        for (int i = 0; i < 5; ++i)
            pass = pass && result.ci_half[i] >= ref_ci[i] / 2.0 && result.ci_half[i] <= ref_ci[i] * 2.0;
        pass = pass && runtime < 60.0;
        h.criterion(4, pass, "two-experiment estimation reproduces the reference values",
                    fmt("p=%.4f in [0.96,1.06]; x0 = (%.3f, %.3f, %.3f, %.3f) vs (0.00, 1.00, 0.01, 0.95) "
                        "+-0.05; ci = (%.4f, %.4f, %.4f, %.4f, %.4f) within 2x of (0.018, 0.002, 0.004, "
                        "0.009, 0.023); runtime %.2fs < 60s",
                        result.estimates[0], result.estimates[1], result.estimates[2], result.estimates[3],
                        result.estimates[4], result.ci_half[0], result.ci_half[1], result.ci_half[2],
                        result.ci_half[3], result.ci_half[4], runtime));
    } catch (const std::exception& e) {
        h.criterion(4, false, "two-experiment estimation reproduces the reference values", e.what());
    }
}

void criterion_5(Harness& h) {
    try {
        int n = 9;
        Eigen::MatrixXd X(n, 1);
        double sum_phi2 = 0.0;
        for (int i = 0; i < n; ++i) {
            X(i, 0) = 0.25 * (i + 1);
            sum_phi2 += X(i, 0) * X(i, 0);
        }
        double sigma = 0.37;
        Eigen::VectorXd sig = Eigen::VectorXd::Constant(n, sigma);
        auto cov_ml = estim::covariance_ml(X, sig);
        double analytic = sigma * sigma / sum_phi2;
        double err_ml = std::abs(cov_ml(0, 0) - analytic);

        Eigen::MatrixXd weak = Eigen::MatrixXd::Identity(1, 1) * 1e12; // prior std 1e6
        auto cov_map = estim::covariance_map(X, sig, weak);
        double err_map = (cov_map - cov_ml).cwiseAbs().maxCoeff();

        bool pass = err_ml <= 1e-10 && err_map <= 1e-8;
        h.criterion(5, pass, "covariance formulas reduce to the analytic references",
                    fmt("|Sigma_ml - sigma^2/sum(phi^2)| = %.3g <= 1e-10; |Sigma_map - Sigma_ml| = %.3g <= "
                        "1e-8 at prior std 1e6",
                        err_ml, err_map));
    } catch (const std::exception& e) {
        h.criterion(5, false, "covariance formulas reduce to the analytic references", e.what());
    }
}

void criterion_6(Harness& h) {
    try {
        auto t0 = std::chrono::steady_clock::now();

        auto run_mode = [&](nmpc::Mode mode, bool mismatch, double noise, const std::string& tag) {
            auto cfg = closed_loop_config(mismatch, noise, mode);
            auto loop = std::make_unique<nmpc::ClosedLoop>(cfg, demo_factory, work_dir(tag));
            loop->run();
            return loop;
        };

        auto open_loop = run_mode(nmpc::Mode::OpenLoop, true, 0.05, "c6_open");
        auto adaptive = run_mode(nmpc::Mode::Adaptive, true, 0.05, "c6_adaptive");
        auto state = run_mode(nmpc::Mode::State, true, 0.05, "c6_state");
        // ground-truth closed-loop reference: same loop and noise, true values
        auto truth = run_mode(nmpc::Mode::Adaptive, false, 0.05, "c6_truth");

        // (a) open loop violates the floor by more than 0.02
        double open_viol = open_loop->plant_violations()[0];
        bool pass_a = open_viol > 0.02;

        // (b) adaptive parameter estimate settles within 0.05 of the truth
        double worst_p = 0.0;
        for (const auto& rec : adaptive->records())
            if (rec.k >= 5) worst_p = std::max(worst_p, std::abs(rec.estimate[0] - 1.0));
        bool pass_b = worst_p <= 0.05;

        // (c) adaptive violation after interval 5 at most 3x the noise std
        auto traj = adaptive->plant().fine_trajectory();
        double viol_late = 0.0;
        for (std::size_t r = 0; r < traj.time.size(); ++r)
            if (traj.time[r] >= 5.0) viol_late = std::max(viol_late, -0.25 - traj.x(static_cast<int>(r), 1));
        bool pass_c = viol_late <= 3.0 * 0.05;

        // (d) closed-loop objectives within 5% of the ground-truth run
        double obj_truth = truth->plant_objective();
        double obj_adaptive = adaptive->plant_objective();
        double obj_state = state->plant_objective();
        double gap_adaptive = std::abs(obj_adaptive - obj_truth) / std::abs(obj_truth);
        double gap_state = std::abs(obj_state - obj_truth) / std::abs(obj_truth);
        bool pass_d = gap_adaptive <= 0.05 && gap_state <= 0.05;

        double runtime = seconds_since(t0);
        bool pass = pass_a && pass_b && pass_c && pass_d && runtime < 600.0;
        h.criterion(6, pass, "closed-loop properties under model-plant mismatch",
                    fmt("(a) open-loop violation %.4f > 0.02 %s; (b) max |p_hat-1| for k>=5 = %.4f <= 0.05 "
                        "%s; (c) late violation %.4f <= 0.15 %s; (d) objective gaps vs the ground-truth "
                        "closed loop (obj %.3f): adaptive %.1f%%, state %.1f%% <= 5%% %s; runtime %.1fs < "
                        "600s",
                        open_viol, pass_a ? "ok" : "FAIL", worst_p, pass_b ? "ok" : "FAIL", viol_late,
                        pass_c ? "ok" : "FAIL", obj_truth, 100 * gap_adaptive, 100 * gap_state,
                        pass_d ? "ok" : "FAIL", runtime));
    } catch (const std::exception& e) {
        h.criterion(6, false, "closed-loop properties under model-plant mismatch", e.what());
    }
}

void criterion_7(Harness& h) {
    try {
        std::vector<Eigen::MatrixXd> trajs;
        std::vector<std::vector<double>> controls;
        for (auto mode : {nmpc::Mode::OpenLoop, nmpc::Mode::State, nmpc::Mode::Adaptive}) {
            auto cfg = closed_loop_config(false, 0.0, mode);
            nmpc::ClosedLoop loop(cfg, demo_factory, work_dir("c7_" + nmpc::mode_name(mode)));
            auto records = loop.run();
            trajs.push_back(loop.plant().fine_trajectory().x);
            std::vector<double> u;
            for (const auto& r : records) u.push_back(r.u_applied);
            controls.push_back(u);
        }
        double worst = 0.0;
        for (int m = 1; m < 3; ++m) {
            worst = std::max(worst, (trajs[m] - trajs[0]).cwiseAbs().maxCoeff());
            for (std::size_t k = 0; k < controls[0].size(); ++k)
                worst = std::max(worst, std::abs(controls[m][k] - controls[0][k]));
        }
        bool pass = worst <= 1e-6;
        h.criterion(7, pass, "no-mismatch degeneracy: all modes coincide",
                    fmt("max deviation across open-loop/state/adaptive = %.3g <= 1e-6", worst));
    } catch (const std::exception& e) {
        h.criterion(7, false, "no-mismatch degeneracy: all modes coincide", e.what());
    }
}

void criterion_8(Harness& h) {
    try {
        using model::AddVar;
        using model::EqKind;
        using model::VarKind;

        // two-timescale toy: x' = -x + w, eps w' = -w + 2x
        const double eps = 1e-4;
        model::Model env("env");
        auto ex = env.add_var(VarKind::X, "x", AddVar{.val = {1.0}});
        auto ew = env.add_var(VarKind::P, "w", AddVar{.val = {2.0}});
        env.add_eq(EqKind::Ode, "x", -ex[0] + ew[0]);
        sim::SimContext env_ctx(env.setup());

        model::Model fast("fast");
        auto fw = fast.add_var(VarKind::X, "w", AddVar{.val = {2.0}});
        auto fxi = fast.add_var(VarKind::P, "xi", AddVar{.val = {1.0}});
        fast.add_eq(EqKind::Ode, "w", (-fw[0] + 2.0 * fxi[0]) / eps);
        sim::SimContext fast_ctx(fast.setup());

        sim::QssCoupling coupling;
        coupling.env_to_fast.push_back({AbsName("env.x", 0), AbsName("fast.xi", 0)});
        coupling.fast_to_env.push_back({AbsName("fast.w", 0), AbsName("env.w", 0)});

        auto grid = linspace(0.0, 5.0, 5001);
        sim::QssOptions opts;
        opts.max_sweeps = 80;
        opts.env.h_max = grid[1] - grid[0];
        sim::QssSystem env_sys{&env_ctx, {1.0}, {}, {2.0}, {}};
        sim::QssSystem fast_sys{&fast_ctx, {2.0}, {}, {1.0}, {}};
        auto qss = sim::simulate_qss(env_sys, fast_sys, coupling, grid, opts);

        model::Model mono("mono");
        auto mx = mono.add_var(VarKind::X, "x", AddVar{.val = {1.0}});
        auto mw = mono.add_var(VarKind::X, "w", AddVar{.val = {2.0}});
        mono.add_eq(EqKind::Ode, "x", -mx[0] + mw[0]);
        mono.add_eq(EqKind::Ode, "w", (-mw[0] + 2.0 * mx[0]) / eps);
        sim::SimContext mono_ctx(mono.setup());
        sim::IntegrateOptions tight;
        tight.h_max = (grid[1] - grid[0]) / 8.0;
        auto ref = mono_ctx.integrate(grid, {1.0, 2.0}, {}, {}, {}, tight);

        double worst = 0.0;
        for (int n = 0; n < 5001; ++n)
            worst = std::max(worst, std::abs(qss.traj.x(n, 0) - ref.x(n, 0)) / std::abs(ref.x(n, 0)));
        bool pass_slow = worst < 0.01;

        // eps = 0 limit: a purely algebraic fast model is substituted exactly
        model::Model alg("alg");
        auto aw = alg.add_var(VarKind::Z, "w");
        auto axi = alg.add_var(VarKind::P, "xi", AddVar{.val = {1.0}});
        alg.add_eq(EqKind::Alg, "w", aw[0] - 2.0 * axi[0]);
        sim::SimContext alg_ctx(alg.setup());
        sim::QssCoupling acoupling;
        acoupling.env_to_fast.push_back({AbsName("env.x", 0), AbsName("alg.xi", 0)});
        acoupling.fast_to_env.push_back({AbsName("alg.w", 0), AbsName("env.w", 0)});
        auto agrid = linspace(0.0, 1.0, 201);
        sim::QssOptions aopts;
        aopts.max_sweeps = 400;
        sim::QssSystem alg_sys{&alg_ctx, {}, {1.0}, {1.0}, {}};
        sim::QssSystem env_sys2{&env_ctx, {1.0}, {}, {2.0}, {}};
        auto aqss = sim::simulate_qss(env_sys2, alg_sys, acoupling, agrid, aopts);
        // exactness: the converged table equals the direct substitution w = 2x of
        // its own trajectory, and replaying it reproduces the trajectory
        double exactness = 0.0;
        for (int n = 0; n < 201; ++n)
            exactness = std::max(exactness, std::abs(aqss.fast_table(n, 0) - 2.0 * aqss.traj.x(n, 0)));
        sim::EventSchedule replay_sched;
        replay_sched.times = agrid;
        sim::EventSchedule::Series s;
        s.name = AbsName("env.w", 0);
        for (int n = 0; n + 1 < 201; ++n) s.values.push_back(aqss.fast_table(n, 0));
        replay_sched.series.push_back(s);
        auto replay = env_ctx.simulate_with_events(agrid, replay_sched, {1.0}, {}, {2.0}, {});
        exactness = std::max(exactness, (replay.x - aqss.traj.x).cwiseAbs().maxCoeff());
        bool pass_alg = exactness <= 1e-10;

        h.criterion(8, pass_slow && pass_alg, "quasi-steady-state two-timescale simulation",
                    fmt("slow-state rel err %.4g%% < 1%% vs the monolithic stiff solve (%d sweeps); "
                        "algebraic limit exact to %.3g <= 1e-10",
                        100.0 * worst, qss.sweeps, exactness));
    } catch (const std::exception& e) {
        h.criterion(8, false, "quasi-steady-state two-timescale simulation", e.what());
    }
}

void criterion_9(Harness& h) {
    try {
        auto cfg = closed_loop_config(true, 0.05, nmpc::Mode::Adaptive);
        cfg.n_intervals = 10; // same scenario family, shorter batch keeps the file set small
        cfg.T = 10.0;
        cfg.u_init.assign(10, 0.5);
        cfg.u_lb.assign(10, -1.0);
        cfg.u_ub.assign(10, 1.0);

        auto dir_a = work_dir("c9_a");
        auto dir_b = work_dir("c9_b");
        nmpc::ClosedLoop(cfg, demo_factory, dir_a).run();
        nmpc::ClosedLoop(cfg, demo_factory, dir_b).run();
        bool identical = true;
        for (const auto& entry : fs::directory_iterator(dir_a)) {
            auto name = entry.path().filename();
            if (slurp(entry.path()) != slurp(dir_b / name)) identical = false;
        }

        auto dir_c = work_dir("c9_c");
        {
            nmpc::ClosedLoop partial(cfg, demo_factory, dir_c);
            partial.run_until(6); // pause after interval 5
        }
        nmpc::ClosedLoop resumed(cfg, demo_factory, dir_c);
        resumed.resume(6);
        bool resume_identical = true;
        for (const auto& entry : fs::directory_iterator(dir_a)) {
            auto name = entry.path().filename();
            if (slurp(entry.path()) != slurp(dir_c / name)) resume_identical = false;
        }

        h.criterion(9, identical && resume_identical, "reproducibility and resume",
                    fmt("fixed-seed reruns bitwise identical: %s; pause-after-5/resume bitwise identical: %s",
                        identical ? "yes" : "NO", resume_identical ? "yes" : "NO"));
    } catch (const std::exception& e) {
        h.criterion(9, false, "reproducibility and resume", e.what());
    }
}

} // namespace

int main() {
    Harness h;
    criterion_1(h);
    criterion_2(h);
    auto ocp = criterion_3(h);
    criterion_4(h, ocp);
    criterion_5(h);
    criterion_6(h);
    criterion_7(h);
    criterion_8(h);
    criterion_9(h);
    if (h.failures == 0)
        std::printf("all acceptance criteria passed\n");
    else
        std::printf("%d acceptance criteria FAILED\n", h.failures);
    return h.failures;
}
