#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "eoc/demo.hpp"
#include "eoc/parallel.hpp"
#include "eoc/sim.hpp"

using namespace eoc;
using model::AbsName;
using model::AddVar;
using model::EqKind;
using model::VarKind;

namespace {

std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> t(n);
    for (int i = 0; i < n; ++i) t[i] = a + (b - a) * i / (n - 1);
    return t;
}

std::shared_ptr<sim::SimContext> demo_context() {
    auto m = demo::make_simple_dae();
    return std::make_shared<sim::SimContext>(m->setup());
}

// max |a-b| / max(1, |b|)
double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    double worst = 0.0;
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j)
            worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / std::max(1.0, std::abs(b(i, j))));
    return worst;
}

} // namespace

TEST_CASE("exponential decay matches the analytic solution") {
    model::Model m("decay");
    auto x = m.add_var(VarKind::X, "x", AddVar{.val = {1.0}});
    m.add_eq(EqKind::Ode, "x", -x[0]);
    sim::SimContext ctx(m.setup());
    sim::IntegrateOptions opts;
    opts.h_max = 0.001;
    auto traj = ctx.integrate(linspace(0, 1, 11), {1.0}, {}, {}, {}, opts);
    CHECK(traj.x(10, 0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-6));
}

TEST_CASE("demo consistent initialization gives z(0)=0 exactly") {
    auto ctx = demo_context();
    auto traj = ctx->integrate(linspace(0, 10, 100), {0.0, 1.0, 0.0}, {0.0}, {1.0}, {0.0});
    CHECK(traj.z(0, 0) == 0.0);
    CHECK(traj.x(0, 0) == 0.0);
    CHECK(traj.x(0, 1) == 1.0);
}

TEST_CASE("demo trajectory is self-convergent under step refinement") {
    auto ctx = demo_context();
    auto grid = linspace(0, 10, 100);
    std::vector<double> x0{0.0, 1.0, 0.0};
    double spacing = grid[1] - grid[0];

    sim::IntegrateOptions h1, h2, href;
    h1.h_max = spacing / 4.0;
    h2.h_max = spacing / 8.0;
    href.h_max = spacing / 64.0;
    auto t1 = ctx->integrate(grid, x0, {0.0}, {1.0}, {0.0}, h1);
    auto t2 = ctx->integrate(grid, x0, {0.0}, {1.0}, {0.0}, h2);
    auto tr = ctx->integrate(grid, x0, {0.0}, {1.0}, {0.0}, href);

    double e1 = rel_err(t1.x, tr.x);
    double e2 = rel_err(t2.x, tr.x);
    // order 2: halving the step cuts the error by ~4
    CHECK(e1 / e2 > 3.5);
    CHECK(e2 < e1);
}

TEST_CASE("algebraic residual stays within tolerance along the trajectory") {
    auto ctx = demo_context();
    auto traj = ctx->integrate(linspace(0, 10, 100), {0.0, 1.0, 0.0}, {0.0}, {1.0}, {0.0});
    for (int r = 0; r < traj.x.rows(); ++r) {
        double z = traj.z(r, 0), x2 = traj.x(r, 1);
        double residual = z - (1.0 - x2 * x2) * 1.0;
        CHECK(std::abs(residual) <= 1e-9); // 10x the Newton tolerance
    }
}

TEST_CASE("event schedule with constant values equals plain integrate") {
    auto ctx = demo_context();
    auto grid = linspace(0, 10, 100);
    sim::EventSchedule sched;
    sched.times = grid;
    sched.series.push_back({AbsName("simple_dae.pg", 0), std::vector<double>(99, 1.0)});
    auto with = ctx->simulate_with_events(grid, sched, {0.0, 1.0, 0.0}, {0.0}, {1.0}, {0.0});
    auto without = ctx->integrate(grid, {0.0, 1.0, 0.0}, {0.0}, {1.0}, {0.0});
    CHECK((with.x - without.x).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((with.z - without.z).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("random parameter events make z jump while x stays continuous") {
    auto ctx = demo_context();
    auto grid = linspace(0, 10, 100);
    sim::EventSchedule sched;
    sched.times = grid;
    std::vector<double> pvals(99);
    std::uint64_t rng = 42;
    for (auto& v : pvals) v = 1.0 + 0.8 * (2.0 * parallel::uniform01(rng) - 1.0);
    sched.series.push_back({AbsName("simple_dae.pg", 0), pvals});
    auto traj = ctx->simulate_with_events(grid, sched, {0.0, 1.0, 0.0}, {0.0}, {1.0}, {0.0});

    // z must satisfy the algebraic relation with the parameter active on each interval
    for (int r = 0; r < 99; ++r) {
        double x2 = traj.x(r, 1);
        CHECK(traj.z(r, 0) == doctest::Approx((1.0 - x2 * x2) * pvals[r]).epsilon(1e-8));
    }
    // and the z column jumps visibly between intervals
    double max_jump = 0.0;
    for (int r = 1; r < 100; ++r) max_jump = std::max(max_jump, std::abs(traj.z(r, 0) - traj.z(r - 1, 0)));
    CHECK(max_jump > 0.05);
}

TEST_CASE("event schedule shape errors") {
    auto ctx = demo_context();
    auto grid = linspace(0, 10, 100);
    sim::EventSchedule sched;
    sched.times = grid;
    sched.series.push_back({AbsName("simple_dae.pg", 0), std::vector<double>(98, 1.0)});
    CHECK_THROWS_AS(ctx->simulate_with_events(grid, sched, {0, 1, 0}, {0}, {1}, {0}), ConfigError);

    sim::EventSchedule off;
    off.times = {0.0, 0.123456, 10.0};
    off.series.push_back({AbsName("simple_dae.pg", 0), {1.0, 2.0}});
    CHECK_THROWS_AS(ctx->simulate_with_events(grid, off, {0, 1, 0}, {0}, {1}, {0}), ConfigError);

    sim::EventSchedule badname;
    badname.times = grid;
    badname.series.push_back({AbsName("simple_dae.xg", 0), std::vector<double>(99, 1.0)});
    CHECK_THROWS_AS(ctx->simulate_with_events(grid, badname, {0, 1, 0}, {0}, {1}, {0}), ConfigError);
}

TEST_CASE("steady state solves") {
    // x' = -x + p  ->  x* = p
    model::Model m("ss");
    auto x = m.add_var(VarKind::X, "x", AddVar{.val = {0.0}});
    auto p = m.add_var(VarKind::P, "p", AddVar{.val = {3.5}});
    m.add_eq(EqKind::Ode, "x", -x[0] + p[0]);
    sim::SimContext ctx(m.setup());
    auto [xs, zs] = ctx.solve_steady_state({3.5}, {}, {0.0}, {});
    CHECK(xs[0] == doctest::Approx(3.5).epsilon(1e-10));

    // x^2 - 4 = 0 from guess 1 -> 2 (solved as a z system)
    model::Model q("quad");
    auto zq = q.add_var(VarKind::Z, "z");
    q.add_eq(EqKind::Alg, "z", zq[0] * zq[0] - 4.0);
    sim::SimContext qctx(q.setup());
    auto [xs2, zs2] = qctx.solve_steady_state({}, {}, {}, {1.0});
    CHECK(zs2[0] == doctest::Approx(2.0).epsilon(1e-9));

    // singular Jacobian at the guess
    CHECK_THROWS_AS(qctx.solve_steady_state({}, {}, {}, {0.0}), NumericalError);
}

TEST_CASE("qss: purely algebraic fast model reduces to direct substitution") {
    // env: x' = -x + w  (w is an env parameter fed from the fast model)
    model::Model env("env");
    auto ex = env.add_var(VarKind::X, "x", AddVar{.val = {1.0}});
    auto ew = env.add_var(VarKind::P, "w", AddVar{.val = {2.0}});
    env.add_eq(EqKind::Ode, "x", -ex[0] + ew[0]);
    sim::SimContext env_ctx(env.setup());

    // fast: 0 = w - 2*xi  (xi is the fast parameter driven by env x)
    model::Model fast("fast");
    auto fw = fast.add_var(VarKind::Z, "w");
    auto fxi = fast.add_var(VarKind::P, "xi", AddVar{.val = {1.0}});
    fast.add_eq(EqKind::Alg, "w", fw[0] - 2.0 * fxi[0]);
    sim::SimContext fast_ctx(fast.setup());

    sim::QssCoupling coupling;
    coupling.env_to_fast.push_back({AbsName("env.x", 0), AbsName("fast.xi", 0)});
    coupling.fast_to_env.push_back({AbsName("fast.w", 0), AbsName("env.w", 0)});

    auto grid = linspace(0, 1, 101);
    sim::QssOptions opts;
    opts.max_sweeps = 200;
    sim::QssSystem env_sys{&env_ctx, {1.0}, {}, {2.0}, {}};
    sim::QssSystem fast_sys{&fast_ctx, {}, {1.0}, {1.0}, {}};
    auto result = sim::simulate_qss(env_sys, fast_sys, coupling, grid, opts);

    // fixed point: table row n must equal 2*x(t_n) of the returned trajectory
    for (int n = 0; n < 101; ++n)
        CHECK(result.fast_table(n, 0) == doctest::Approx(2.0 * result.traj.x(n, 0)).epsilon(1e-10));

    // and replaying the table through a plain event simulation reproduces it
    sim::EventSchedule sched;
    sched.times = grid;
    sim::EventSchedule::Series s;
    s.name = AbsName("env.w", 0);
    s.values.assign(100, 0.0);
    for (int k = 0; k < 100; ++k) s.values[k] = result.fast_table(k, 0);
    sched.series.push_back(s);
    auto replay = env_ctx.simulate_with_events(grid, sched, {1.0}, {}, {2.0}, {});
    CHECK((replay.x - result.traj.x).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("qss: two-timescale toy tracks the monolithic stiff solution") {
    // env: x' = -x + w ; fast: eps*w' = -w + 2x with eps = 1e-4
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

    auto grid = linspace(0, 2, 1001);
    sim::QssOptions opts;
    opts.max_sweeps = 100;
    sim::QssSystem env_sys{&env_ctx, {1.0}, {}, {2.0}, {}};
    sim::QssSystem fast_sys{&fast_ctx, {2.0}, {}, {1.0}, {}};
    auto result = sim::simulate_qss(env_sys, fast_sys, coupling, grid, opts);
    CHECK(result.final_delta <= opts.table_tol);

    // monolithic reference
    model::Model mono("mono");
    auto mx = mono.add_var(VarKind::X, "x", AddVar{.val = {1.0}});
    auto mw = mono.add_var(VarKind::X, "w", AddVar{.val = {2.0}});
    mono.add_eq(EqKind::Ode, "x", -mx[0] + mw[0]);
    mono.add_eq(EqKind::Ode, "w", (-mw[0] + 2.0 * mx[0]) / eps);
    sim::SimContext mono_ctx(mono.setup());
    sim::IntegrateOptions tight;
    tight.h_max = 2.0 / 1000 / 16;
    auto ref = mono_ctx.integrate(grid, {1.0, 2.0}, {}, {}, {}, tight);

    double worst = 0.0;
    for (int n = 0; n < 1001; ++n)
        worst = std::max(worst, std::abs(result.traj.x(n, 0) - ref.x(n, 0)) / std::abs(ref.x(n, 0)));
    CHECK(worst < 0.01);
}

TEST_CASE("qss: unknown coupling names are reported with the offending side") {
    auto ctx = demo_context();
    sim::QssCoupling coupling;
    coupling.env_to_fast.push_back({AbsName("simple_dae.nope", 0), AbsName("simple_dae.pg", 0)});
    coupling.fast_to_env.push_back({AbsName("simple_dae.xg", 0), AbsName("simple_dae.pg", 0)});
    sim::QssSystem sys{ctx.get(), {0, 1, 0}, {0}, {1}, {0}};
    CHECK_THROWS_WITH_AS(sim::simulate_qss(sys, sys, coupling, linspace(0, 1, 5), {}),
                         doctest::Contains("env->fast"), ConfigError);
}

TEST_CASE("symbolic simulation evaluates like the numerical path") {
    auto ctx = demo_context();
    auto grid = linspace(0, 10, 50);

    sim::SymbolicSimulation::Config cfg;
    cfg.t_grid = grid;
    cfg.x0 = {0.0, 1.0, 0.0};
    cfg.z0 = {0.0};
    cfg.p = {1.0};
    cfg.u = {0.0};
    sim::SymbolicSimulation::Config::SymbolSeries ss;
    ss.name = AbsName("simple_dae.pg", 0);
    std::uint64_t rng = 7;
    for (int k = 0; k < 49; ++k) {
        ss.symbols.push_back(expr::make_symbol("q" + std::to_string(k) + "@symtest"));
        ss.fallback.push_back(1.0);
    }
    cfg.symbol_series.push_back(ss);
    auto sym = sim::SymbolicSimulation(ctx, cfg);
    CHECK(sym.n_inputs() == 49);

    std::vector<double> q(49);
    for (auto& v : q) v = 1.0 + 0.5 * (2.0 * parallel::uniform01(rng) - 1.0);

    auto traj = sym.run(q);

    sim::EventSchedule sched;
    sched.times = grid;
    sched.series.push_back({AbsName("simple_dae.pg", 0), q});
    auto direct = ctx->simulate_with_events(grid, sched, {0.0, 1.0, 0.0}, {0.0}, {1.0}, {0.0});
    CHECK((traj.x - direct.x).cwiseAbs().maxCoeff() <= 1e-12);

    // handles address (variable, time) pairs
    auto h = sym.handle(AbsName("simple_dae.xg", 0), 10);
    auto info = sym.find_handle(h);
    REQUIRE(info != nullptr);
    CHECK(info->time_index == 10);
    auto vals = sym.handle_values(q, {*info});
    CHECK(vals[0] == doctest::Approx(direct.x(10, 0)).epsilon(1e-14));
}

TEST_CASE("trajectory csv export") {
    namespace fs = std::filesystem;
    auto ctx = demo_context();
    auto grid = linspace(0, 10, 100);
    auto traj = ctx->integrate(grid, {0.0, 1.0, 0.0}, {0.0}, {1.0}, {0.0});
    auto u_rows = sim::applied_u_rows(ctx->dae(), grid, {}, {0.0});
    auto path = fs::temp_directory_path() / "eoc_sim_test" / "trajectory.csv";
    sim::export_trajectory_csv(path, ctx->dae(), traj, &u_rows);

    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "time,simple_dae.xg[0],simple_dae.xg[1],simple_dae.obj[0],simple_dae.zg[0],simple_dae.ug[0]");
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 100);
}
