#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "eoc/demo.hpp"
#include "eoc/deriv.hpp"
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

// Symbolic simulation of the demo with per-interval parameter symbols.
std::shared_ptr<sim::SymbolicSimulation> demo_symbolic(int n_points, const std::string& tag) {
    auto m = demo::make_simple_dae();
    auto ctx = std::make_shared<sim::SimContext>(m->setup());
    sim::SymbolicSimulation::Config cfg;
    cfg.t_grid = linspace(0, 10, n_points);
    cfg.x0 = {0.0, 1.0, 0.0};
    cfg.z0 = {0.0};
    cfg.p = {1.0};
    cfg.u = {0.0};
    sim::SymbolicSimulation::Config::SymbolSeries ss;
    ss.name = AbsName("simple_dae.pg", 0);
    for (int k = 0; k + 1 < n_points; ++k) {
        ss.symbols.push_back(expr::make_symbol("pv" + std::to_string(k) + "@" + tag));
        ss.fallback.push_back(1.0);
    }
    cfg.symbol_series.push_back(ss);
    return std::make_shared<sim::SymbolicSimulation>(ctx, cfg);
}

} // namespace

TEST_CASE("analytic sensitivity of exponential decay: x' = -q x") {
    model::Model m("dq");
    auto x = m.add_var(VarKind::X, "x", AddVar{.val = {1.0}});
    auto q = m.add_var(VarKind::P, "q", AddVar{.val = {1.0}});
    m.add_eq(EqKind::Ode, "x", -q[0] * x[0]);
    auto dae = m.setup();

    // symbolic augmentation integrated with the plain integrator
    sim::SensInput si;
    si.kind = sim::SensInput::Kind::Param;
    si.comp = 0;
    auto aug = deriv::build_forward_sensitivity(dae, {si});
    CHECK(aug.dae.nx() == 2);
    sim::SimContext aug_ctx(aug.dae);
    sim::IntegrateOptions tight;
    tight.h_max = 0.002;
    auto traj = aug_ctx.integrate(linspace(0, 1, 11), aug.augmented_x0({1.0}), {}, aug.augmented_p({1.0}), {},
                                  tight);
    // s(t) = -t e^{-t} at q=1, x0=1
    CHECK(traj.x(10, 1) == doctest::Approx(-std::exp(-1.0)).epsilon(1e-5));

    // structured propagation gives the same derivative
    auto run = sim::SimContext(dae).simulate_with_sensitivity(linspace(0, 1, 11), {}, {1.0}, {}, {1.0}, {},
                                                              {si}, tight);
    CHECK(run.sens.back()(0, 0) == doctest::Approx(-std::exp(-1.0)).epsilon(1e-5));
}

TEST_CASE("augmented system size arithmetic for event-value inputs") {
    auto m = demo::make_simple_dae();
    auto dae = m->setup();
    auto grid = linspace(0, 10, 100);
    sim::EventSchedule sched;
    sched.times = grid;
    sched.series.push_back({AbsName("simple_dae.pg", 0), std::vector<double>(99, 1.0)});
    std::vector<sim::SensInput> inputs;
    for (int k = 0; k < 99; ++k) {
        sim::SensInput si;
        si.kind = sim::SensInput::Kind::EventValue;
        si.series = 0;
        si.interval = k;
        inputs.push_back(si);
    }
    auto aug = deriv::build_forward_sensitivity(dae, inputs, &sched);
    CHECK(aug.dae.nx() == 3 * 100);
    CHECK(aug.dae.nz() == 1 * 100);
    CHECK(aug.dae.np() == 1 + 99); // one activation gate per event input
    CHECK(aug.dae.ode.size() == aug.dae.x.size());
    CHECK(aug.dae.alg.size() == aug.dae.z.size());
}

TEST_CASE("build_forward_sensitivity rejects unknown inputs") {
    auto m = demo::make_simple_dae();
    auto dae = m->setup();
    sim::SensInput bad;
    bad.kind = sim::SensInput::Kind::Param;
    bad.comp = 7;
    CHECK_THROWS_AS(deriv::build_forward_sensitivity(dae, {bad}), ConfigError);
}

TEST_CASE("augmented integration agrees with structured propagation on the demo") {
    auto m = demo::make_simple_dae();
    auto dae = m->setup();
    auto grid = linspace(0, 10, 11);
    sim::EventSchedule sched;
    sched.times = grid;
    std::vector<double> vals(10, 1.0);
    vals[3] = 1.4;
    sched.series.push_back({AbsName("simple_dae.pg", 0), vals});

    std::vector<sim::SensInput> inputs;
    for (int k : {3, 7}) {
        sim::SensInput si;
        si.kind = sim::SensInput::Kind::EventValue;
        si.series = 0;
        si.interval = k;
        inputs.push_back(si);
    }

    sim::IntegrateOptions opts;
    opts.h_max = 0.05;

    auto structured =
        sim::SimContext(dae).simulate_with_sensitivity(grid, sched, {0, 1, 0}, {0}, {1}, {0}, inputs, opts);

    auto aug = deriv::build_forward_sensitivity(dae, inputs, &sched);
    sim::SimContext aug_ctx(aug.dae);
    auto aug_sched = aug.activation_schedule(sched);
    auto traj = aug_ctx.simulate_with_events(grid, aug_sched, aug.augmented_x0({0, 1, 0}),
                                             aug.augmented_z0({0}), aug.augmented_p({1}), {0}, opts);

    for (int t : {4, 8, 10}) {
        for (int i = 0; i < 2; ++i) {
            for (int j = 0; j < 3; ++j) {
                double a = traj.x(t, aug.sens_x_offset(i) + j);
                double b = structured.sens.at(t)(j, i);
                CHECK(a == doctest::Approx(b).epsilon(1e-7).scale(std::max(1.0, std::abs(b))));
            }
        }
    }
}

TEST_CASE("forward jacobian matches finite differences on event inputs") {
    auto sym = demo_symbolic(21, "fdcheck");
    std::vector<deriv::OutputSpec> outs;
    outs.push_back({AbsName("simple_dae.obj", 0), deriv::OutputSpec::kFinal});
    for (int t = 0; t < 21; ++t) outs.push_back({AbsName("simple_dae.xg", 0), t});

    deriv::EvaluatorOptions fopts;
    fopts.method = deriv::GradientMethod::Forward;
    deriv::DerivativeEvaluator forward(sym, outs, fopts);

    deriv::EvaluatorOptions fdopts;
    fdopts.method = deriv::GradientMethod::FiniteDifference;
    deriv::DerivativeEvaluator fd(sym, outs, fdopts);

    std::vector<double> q(20);
    std::uint64_t rng = 99;
    for (auto& v : q) v = 1.0 + 0.3 * (2.0 * parallel::uniform01(rng) - 1.0);

    auto rf = forward.evaluate(q);
    auto rd = fd.evaluate(q);
    CHECK(rf.diagnostics.used == deriv::GradientMethod::Forward);
    CHECK(rd.diagnostics.used == deriv::GradientMethod::FiniteDifference);
    CHECK((rf.values - rd.values).cwiseAbs().maxCoeff() <= 1e-12);

    for (int i = 0; i < rf.jacobian.rows(); ++i)
        for (int j = 0; j < rf.jacobian.cols(); ++j) {
            double a = rf.jacobian(i, j), b = rd.jacobian(i, j);
            CHECK(std::abs(a - b) <= std::max(1e-6, 1e-4 * std::abs(b)));
        }

    // x1 at t0 does not depend on any event value
    CHECK(rf.jacobian.row(1).cwiseAbs().maxCoeff() == 0.0);

    // an output before an event's interval has exactly zero sensitivity to it
    // (output row t=5 vs input interval 10)
    CHECK(rf.jacobian(1 + 5, 10) == 0.0);
    CHECK(rd.jacobian(1 + 5, 10) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("hybrid falls back to finite differences when the forward pass fails") {
    auto sym = demo_symbolic(11, "hybrid");
    std::vector<deriv::OutputSpec> outs{{AbsName("simple_dae.obj", 0), deriv::OutputSpec::kFinal}};

    deriv::EvaluatorOptions opts;
    opts.method = deriv::GradientMethod::Hybrid;
    sim::IntegrateOptions broken; // Newton cap of one iteration cannot converge
    broken.newton_max_iter = 1;
    opts.forward_opts = broken;
    deriv::DerivativeEvaluator ev(sym, outs, opts);

    std::vector<double> q(10, 1.0);
    q[2] = 1.3;
    auto r = ev.evaluate(q);
    CHECK(r.diagnostics.fd_fallback);
    CHECK(r.diagnostics.used == deriv::GradientMethod::FiniteDifference);
    CHECK_FALSE(r.diagnostics.failure.empty());
    CHECK(r.jacobian.allFinite());

    // forward-only mode propagates the failure instead
    deriv::EvaluatorOptions fwd_only = opts;
    fwd_only.method = deriv::GradientMethod::Forward;
    deriv::DerivativeEvaluator ev2(sym, outs, fwd_only);
    CHECK_THROWS_AS(ev2.evaluate(q), NumericalError);
}

TEST_CASE("zero inputs give values with an (n_out, 0) jacobian") {
    auto m = demo::make_simple_dae();
    auto ctx = std::make_shared<sim::SimContext>(m->setup());
    sim::SymbolicSimulation::Config cfg;
    cfg.t_grid = linspace(0, 10, 11);
    cfg.x0 = {0.0, 1.0, 0.0};
    cfg.z0 = {0.0};
    cfg.p = {1.0};
    cfg.u = {0.0};
    auto sym = std::make_shared<sim::SymbolicSimulation>(ctx, cfg);
    deriv::DerivativeEvaluator ev(sym, {{AbsName("simple_dae.obj", 0), deriv::OutputSpec::kFinal}});
    auto r = ev.evaluate(std::span<const double>{});
    CHECK(r.values.size() == 1);
    CHECK(r.jacobian.rows() == 1);
    CHECK(r.jacobian.cols() == 0);
}

TEST_CASE("adjoint mode is reserved and rejected") {
    auto sym = demo_symbolic(11, "adjoint");
    deriv::EvaluatorOptions opts;
    opts.method = deriv::GradientMethod::Adjoint;
    CHECK_THROWS_AS(
        deriv::DerivativeEvaluator(sym, {{AbsName("simple_dae.obj", 0), deriv::OutputSpec::kFinal}}, opts),
        ConfigError);
}

TEST_CASE("evaluate is deterministic") {
    auto sym = demo_symbolic(11, "determ");
    std::vector<deriv::OutputSpec> outs{{AbsName("simple_dae.obj", 0), deriv::OutputSpec::kFinal},
                                        {AbsName("simple_dae.xg", 1), 5}};
    deriv::DerivativeEvaluator ev(sym, outs);
    std::vector<double> q(10, 1.1);
    auto a = ev.evaluate(q);
    auto b = ev.evaluate(q);
    CHECK(a.values == b.values);
    CHECK(a.jacobian == b.jacobian);
}
