#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "eoc/demo.hpp"
#include "eoc/nmpc.hpp"

using namespace eoc;
using model::AbsName;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / "eoc_nmpc_test" / tag;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Small batch scenario on the demo model. T = N (tau = 1).
nmpc::NmpcConfig demo_config(int n_intervals, bool mismatch, double noise_std) {
    nmpc::NmpcConfig cfg;
    cfg.T = n_intervals;
    cfg.n_intervals = n_intervals;
    cfg.dt_feed = 1.0;
    cfg.dt_prep = 0.1;
    cfg.seed = 1;
    cfg.control = AbsName("simple_dae.ug", 0);
    cfg.u_init.assign(n_intervals, 0.5);
    cfg.u_lb.assign(n_intervals, -1.0);
    cfg.u_ub.assign(n_intervals, 1.0);
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
    cfg.ocp_opts.max_iter = 150;
    cfg.est_opts.max_iter = 100;
    return cfg;
}

auto factory = [] { return demo::make_simple_dae(); };

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("config validation") {
    auto cfg = demo_config(5, false, 0.0);
    cfg.n_intervals = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = demo_config(5, false, 0.0);
    cfg.dt_prep = 2.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(nmpc::mode_from_string("bogus"), ConfigError);
}

TEST_CASE("horizon shrinkage: interval k solves exactly N-k decisions") {
    auto cfg = demo_config(4, false, 0.0);
    nmpc::ClosedLoop loop(cfg, factory, fresh_dir("shrink"));
    for (int k = 0; k < 4; ++k) {
        auto rec = loop.move_one_adaptive_step(k);
        CHECK(static_cast<int>(rec.u_tail.size()) == 4 - k);
        loop.emit_interval_files(rec);
        CHECK_THROWS_AS(loop.move_one_adaptive_step(k), ConfigError); // out-of-order step
    }
    // k = N: estimation/simulation only, no optimization
    auto final_rec = loop.move_one_adaptive_step(4);
    CHECK(final_rec.u_tail.empty());
    CHECK(final_rec.x_hat.size() == 3);
}

TEST_CASE("k=0 adaptive skips estimation and keeps the initial guesses") {
    auto cfg = demo_config(3, true, 0.05);
    nmpc::ClosedLoop loop(cfg, factory, fresh_dir("k0"));
    auto rec = loop.move_one_adaptive_step(0);
    CHECK(rec.estimate[0] == 0.5);
    CHECK(rec.estimate[1] == 0.1);
    CHECK(rec.estimate[2] == 0.9);
}

TEST_CASE("no-mismatch degeneracy: all modes apply identical controls") {
    const int N = 5;
    std::vector<std::vector<double>> applied;
    std::vector<double> objectives;
    for (auto mode : {nmpc::Mode::OpenLoop, nmpc::Mode::State, nmpc::Mode::Adaptive}) {
        auto cfg = demo_config(N, false, 0.0); // true parameters, zero noise
        cfg.mode = mode;
        nmpc::ClosedLoop loop(cfg, factory, fresh_dir("nomismatch_" + nmpc::mode_name(mode)));
        auto records = loop.run();
        std::vector<double> u;
        for (const auto& r : records) u.push_back(r.u_applied);
        applied.push_back(u);
        objectives.push_back(loop.plant_objective());
    }
    for (int k = 0; k < N; ++k) {
        CHECK(std::abs(applied[0][k] - applied[1][k]) <= 1e-6);
        CHECK(std::abs(applied[0][k] - applied[2][k]) <= 1e-6);
    }
    CHECK(std::abs(objectives[0] - objectives[1]) <= 1e-6);
    CHECK(std::abs(objectives[0] - objectives[2]) <= 1e-6);
}

TEST_CASE("re-optimization is idempotent without mismatch") {
    auto cfg = demo_config(5, false, 0.0);
    cfg.mode = nmpc::Mode::Adaptive;
    nmpc::ClosedLoop loop(cfg, factory, fresh_dir("idem"));
    auto records = loop.run();
    // applied controls equal the k=0 plan
    const auto& plan = records[0].u_tail;
    for (int k = 0; k < 5; ++k) CHECK(std::abs(records[k].u_applied - plan[k]) <= 1e-6);
}

TEST_CASE("state mode with zero noise reproduces the plant state exactly") {
    auto cfg = demo_config(4, false, 0.0);
    cfg.mode = nmpc::Mode::State;
    nmpc::ClosedLoop loop(cfg, factory, fresh_dir("statemode"));
    auto r0 = loop.move_one_state_step(0);
    loop.emit_interval_files(r0);
    auto r1 = loop.move_one_state_step(1);
    Eigen::VectorXd truth = loop.plant().state_at(1.0);
    CHECK(r1.x_hat[0] == doctest::Approx(truth[0]).epsilon(1e-12));
    CHECK(r1.x_hat[1] == doctest::Approx(truth[1]).epsilon(1e-12));
}

TEST_CASE("prefix stability and interval files") {
    auto cfg = demo_config(4, true, 0.05);
    auto dir = fresh_dir("files");
    nmpc::ClosedLoop loop(cfg, factory, dir);
    auto records = loop.run();

    // applied-control history is never rewritten
    auto past3 = slurp(dir / "does_past_3.csv");
    int lines = static_cast<int>(std::count(past3.begin(), past3.end(), '\n'));
    CHECK(lines == 4); // header + intervals 0..2
    CHECK(fs::exists(dir / "does_full_3.csv"));
    CHECK(fs::exists(dir / "solution_2.csv"));
    CHECK(fs::exists(dir / "estimated_parameter_1.csv"));
    CHECK(!fs::exists(dir / "estimated_parameter_0.csv")); // only the initial prior exists at k=0
    CHECK(fs::exists(dir / "measurement_4.csv"));
    CHECK(fs::exists(dir / "summary.csv"));

    // full plan at k covers all intervals
    auto full1 = slurp(dir / "does_full_1.csv");
    CHECK(static_cast<int>(std::count(full1.begin(), full1.end(), '\n')) == 5); // header + 4 intervals
}

TEST_CASE("fixed seed runs are bitwise identical") {
    auto cfg = demo_config(4, true, 0.05);
    auto dir_a = fresh_dir("det_a");
    auto dir_b = fresh_dir("det_b");
    nmpc::ClosedLoop(cfg, factory, dir_a).run();
    nmpc::ClosedLoop(cfg, factory, dir_b).run();
    for (const auto& name : {"summary.csv", "does_full_3.csv", "measurement_4.csv", "snapshot_3.json"})
        CHECK(slurp(dir_a / name) == slurp(dir_b / name));
}

TEST_CASE("pause and resume reproduce the uninterrupted run bitwise") {
    auto cfg = demo_config(5, true, 0.05);
    auto dir_full = fresh_dir("resume_full");
    nmpc::ClosedLoop(cfg, factory, dir_full).run();

    auto dir_part = fresh_dir("resume_part");
    {
        // run only intervals 0..2, then drop all in-memory state
        nmpc::ClosedLoop partial(cfg, factory, dir_part);
        partial.run_until(3);
    }
    nmpc::ClosedLoop resumed(cfg, factory, dir_part);
    resumed.resume(3);
    for (const auto& name : {"summary.csv", "does_full_4.csv", "snapshot_4.json", "solution_4.csv"})
        CHECK(slurp(dir_full / name) == slurp(dir_part / name));
}

TEST_CASE("mismatch: adaptive estimation moves the parameter toward the truth") {
    auto cfg = demo_config(6, true, 0.05);
    cfg.mode = nmpc::Mode::Adaptive;
    nmpc::ClosedLoop loop(cfg, factory, fresh_dir("adapt"));
    auto records = loop.run();
    // initial guess is 0.5; with a few samples the estimate should approach 1
    double p_last = records.back().estimate[0];
    CHECK(p_last > 0.8);
    CHECK(p_last < 1.2);
}

TEST_CASE("config directory loader") {
    auto dir = fresh_dir("cfgdir");
    {
        std::ofstream out(dir / "nmpc.toml");
        out << "mode = \"adaptive\"\nseed = 7\ncontrol = \"simple_dae.ug[0]\"\n";
        out << "objective = \"simple_dae.obj[0]\"\n";
        out << "outputs = \"simple_dae.xg[0];simple_dae.xg[1]\"\n";
        out << "assumed_std = \"0.05;0.05\"\nnoise_std = \"0.05;0.05\"\n";
        out << "state_decisions = \"simple_dae.xg[0];simple_dae.xg[1]\"\n";
    }
    {
        std::ofstream out(dir / "control_setting.csv");
        out << "interval,control_start,control_end,measure_start,measure_end\n";
        for (int j = 0; j < 4; ++j)
            out << j << "," << j << "," << j + 1 << "," << j + 0.9 << "," << j + 0.9 << "\n";
        out << "4,4,,,\n";
    }
    {
        std::ofstream out(dir / "schedule.csv");
        out << "[grid]\ntime\n0\n1\n2\n3\n4\n[tv_bounds]\ntime,name,init,lb,ub\n";
        for (int j = 0; j < 4; ++j) out << j << ",simple_dae.ug[0],0.5,-1,1\n";
    }
    {
        std::ofstream out(dir / "plant_setting.csv");
        out << "name,value\nsimple_dae.pg[0],1\nsimple_dae.xg[0],0\nsimple_dae.xg[1],1\n";
    }
    {
        std::ofstream out(dir / "model_setting_estimate_0.csv");
        out << "name,value\nsimple_dae.pg[0],0.5\nsimple_dae.xg[0],0.1\nsimple_dae.xg[1],0.9\n";
    }
    {
        std::ofstream out(dir / "estimated_parameters_0.csv");
        out << "name,mean,std\nsimple_dae.pg[0],0.5,0.25\nsimple_dae.xg[0],0.1,0.05\nsimple_dae.xg[1],0.9,0.05\n";
    }
    {
        std::ofstream out(dir / "estimated_parameters_lu.csv");
        out << "name,lb,ub\nsimple_dae.pg[0],0,10\nsimple_dae.xg[0],0,10\nsimple_dae.xg[1],0,10\n";
    }
    {
        std::ofstream out(dir / "constraints.csv");
        out << "name,var,lb,ub,relaxable,weight\nx2_floor,simple_dae.xg[1],-0.25,,1,1000\n";
    }
    auto cfg = nmpc::load_config_dir(dir);
    CHECK(cfg.n_intervals == 4);
    CHECK(cfg.T == doctest::Approx(4.0));
    CHECK(cfg.dt_feed == doctest::Approx(1.0));
    CHECK(cfg.dt_prep == doctest::Approx(0.1));
    CHECK(cfg.seed == 7);
    CHECK(cfg.est_params.size() == 1);
    CHECK(cfg.est_states.size() == 2);
    CHECK(cfg.est_params[0].init == 0.5);
    CHECK(cfg.path_cons.size() == 1);
    CHECK(cfg.path_cons[0].lb == -0.25);
    CHECK(std::isinf(cfg.path_cons[0].ub));
    cfg.validate();
}
