#ifndef EOC_NMPC_HPP
#define EOC_NMPC_HPP

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "eoc/dynopt.hpp"
#include "eoc/estim.hpp"
#include "eoc/model.hpp"
#include "eoc/nlp.hpp"
#include "eoc/sim.hpp"

namespace eoc::nmpc {

enum class Mode { OpenLoop, State, Adaptive };

Mode mode_from_string(const std::string& s);
std::string mode_name(Mode m);

struct MeasuredOutput {
    model::AbsName name;
    double assumed_std = 0.05; // std used in estimation weights
    double actual_std = 0.05;  // std of the injected plant noise
};

// Shrinking-horizon batch control configuration: duration T split into N
// intervals of length tau; the feed window and preparation (lab-delay) time
// define the feed-end and sampling grids.
struct NmpcConfig {
    double T = 20.0;
    int n_intervals = 20;
    double dt_feed = 1.0;
    double dt_prep = 0.1;
    Mode mode = Mode::Adaptive;
    std::uint64_t seed = 1;

    model::AbsName control;
    std::vector<double> u_init, u_lb, u_ub; // per interval

    std::vector<MeasuredOutput> measured;

    std::vector<std::pair<model::AbsName, double>> truth;         // plant parameters / x0
    std::vector<std::pair<model::AbsName, double>> initial_guess; // model parameters / x0

    std::vector<estim::ParamSpec> est_params; // estimated parameters (init = guess)
    std::vector<estim::ParamSpec> est_states; // estimated initial states (init = guess)
    estim::Priors prior;                      // interval-0 prior, reused at every re-estimation
    estim::EstimatorKind estimator = estim::EstimatorKind::Map;
    bool log_param = false;
    bool analysis_delay = false; // measurements unavailable in time: skip Step 1

    struct Cons {
        std::string name;
        model::AbsName var;
        double lb = -std::numeric_limits<double>::infinity();
        double ub = std::numeric_limits<double>::infinity();
        bool relaxable = true;
        double weight = 1e3;
    };
    std::vector<Cons> path_cons;

    model::AbsName objective_terminal;

    double actuator_std = 0.0; // multiplicative actuator error

    sim::IntegrateOptions sim_opts;
    nlp::SqpOptions est_opts, ocp_opts;

    double tau() const { return T / n_intervals; }
    std::vector<double> control_grid() const;
    double sample_time(int j) const { return j * tau() - dt_prep; }
    double feed_end(int j) const { return j * tau() + dt_feed; }
    // Canonical simulation grid over [t_begin, t_end]: control starts, sampling
    // times and feed ends. Every simulation in the loop (plant, state estimate,
    // horizon optimization) runs on this family so their discrete trajectories
    // coincide when parameters and controls do.
    std::vector<double> scenario_points(double t_begin, double t_end, int refine = 1) const;
    void validate() const;
};

struct IntervalRecord {
    int k = -1;
    std::vector<std::string> est_names;
    Eigen::VectorXd estimate; // estimation decisions at this interval (params + x0)
    Eigen::MatrixXd est_cov;
    Eigen::VectorXd x_hat; // model state estimate at t_k
    std::vector<double> u_tail;
    double u_commanded = 0.0;
    double u_applied = 0.0;
    Eigen::VectorXd y_next; // measurement collected at the end of the interval
    double objective_predicted = 0.0;
    bool relaxed = false;
    int solve_iterations = 0;
    std::string solve_status;
    std::vector<std::string> files;
};

// The plant: ground-truth values, the record of actually applied controls, and
// seeded measurement noise. Noise draws are keyed by (seed, interval, output),
// so paused and resumed runs see identical sequences.
class PlantSimulator {
public:
    PlantSimulator(const NmpcConfig& cfg, std::unique_ptr<model::Model> truth_model);

    double apply_control(int k, double commanded); // returns the actual value
    void restore_applied(const std::vector<double>& commanded, const std::vector<double>& actual);
    const std::vector<double>& applied_actual() const { return actual_; }
    const std::vector<double>& applied_commanded() const { return commanded_; }

    // The plant is one discrete realization on the canonical scenario grid; all
    // queries read from it. simulate_to returns its prefix up to t_end.
    sim::Trajectory simulate_to(double t_end) const;
    Eigen::VectorXd state_at(double t) const;
    Eigen::VectorXd measure(int sample_j) const;          // y(j), with noise
    Eigen::VectorXd measure_state(int k, double t) const; // noisy state sample at t (state mode)
    // The same realization at substep resolution (dense output of the same
    // integration steps, not a re-integration).
    sim::Trajectory fine_trajectory() const;

    const model::DaeProblem& dae() const;

private:
    const NmpcConfig& cfg_;
    std::unique_ptr<model::Model> model_;
    std::shared_ptr<sim::SimContext> ctx_;
    std::vector<double> x0_, z0_, p_, u_;
    std::vector<double> commanded_, actual_;

    std::vector<double> scenario_grid(double t_end, int refine = 1) const;
    sim::EventSchedule control_schedule(const std::vector<double>& grid) const;
};

// Fig-14 closed loop over one batch, emitting the per-interval file set and
// supporting pause/resume from those files.
class ClosedLoop {
public:
    ClosedLoop(NmpcConfig cfg, std::function<std::unique_ptr<model::Model>()> factory,
               std::filesystem::path out_dir);

    std::vector<IntervalRecord> run();          // k = 0..N-1 plus summary
    std::vector<IntervalRecord> run_until(int k_end); // pauseable partial run
    std::vector<IntervalRecord> resume(int k0); // continue from emitted files

    // Single steps append to the record history; intervals must be stepped in
    // order.
    IntervalRecord move_one_step(int k);
    IntervalRecord move_one_adaptive_step(int k);
    IntervalRecord move_one_state_step(int k);
    IntervalRecord move_one_open_loop_step(int k);

    void emit_interval_files(IntervalRecord& rec);
    void write_summary_csv();

    const PlantSimulator& plant() const { return *plant_; }
    double plant_objective() const;
    // worst violation of each path constraint over the applied trajectory
    std::vector<double> plant_violations() const;
    const std::vector<IntervalRecord>& records() const { return records_; }

private:
    NmpcConfig cfg_;
    std::function<std::unique_ptr<model::Model>()> factory_;
    std::filesystem::path out_;
    std::unique_ptr<PlantSimulator> plant_;

    Eigen::VectorXd est_current_; // latest estimation decisions (original scale)
    Eigen::MatrixXd est_cov_;
    std::vector<std::string> est_names_;
    std::vector<double> warm_tail_;
    std::optional<Eigen::VectorXd> warm_lambda_, warm_mu_;
    std::vector<double> open_loop_plan_;
    std::vector<IntervalRecord> records_;

    IntervalRecord step_adaptive(int k);
    IntervalRecord step_state(int k);
    IntervalRecord step_open_loop(int k);
    std::unique_ptr<model::Model> nominal_model(const Eigen::VectorXd& est_or_guess) const;
    Eigen::VectorXd estimation_step(int k, Eigen::MatrixXd& cov);
    Eigen::VectorXd simulate_state_estimate(int k, const Eigen::VectorXd& est) const;
    void optimize_step(int k, const Eigen::VectorXd& est, const Eigen::VectorXd& x_hat, IntervalRecord& rec);
    void write_measurement_file(int upto_j) const;
    void write_snapshot(const IntervalRecord& rec);
    void load_snapshot(int k);
    Eigen::VectorXd guess_vector() const;
};

// Builds an NmpcConfig from a configuration directory (nmpc.toml,
// control_setting.csv, schedule.csv, model_setting_estimate_0.csv,
// plant_setting.csv, estimated_parameters_0.csv, estimated_parameters_lu.csv,
// constraints.csv).
NmpcConfig load_config_dir(const std::filesystem::path& dir);

} // namespace eoc::nmpc

#endif
