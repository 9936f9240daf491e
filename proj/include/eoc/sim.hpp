#ifndef EOC_SIM_HPP
#define EOC_SIM_HPP

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

#include "eoc/expr.hpp"
#include "eoc/model.hpp"

namespace eoc::sim {

struct IntegrateOptions {
    double h_max = 0.0;          // <= 0 selects grid spacing / 4
    double newton_tol = 1e-10;   // convergence on the residual infinity norm
    int newton_max_iter = 25;
    int newton_max_halvings = 30;
    // Emit a row at every internal substep instead of only at grid points. The
    // step sequence is unchanged, so the dense rows sample the same discrete
    // trajectory. Not available together with sensitivities.
    bool dense_output = false;
};

struct Trajectory {
    std::vector<double> time;
    Eigen::MatrixXd x; // T x nx
    Eigen::MatrixXd z; // T x nz
};

// Piecewise-constant time-variant parameter values: value k applies on
// [times[k], times[k+1]). Event times must lie on the integration grid.
struct EventSchedule {
    std::vector<double> times;
    struct Series {
        model::AbsName name;
        std::vector<double> values; // length times.size() - 1
    };
    std::vector<Series> series;

    bool empty() const { return series.empty(); }
};

// One selected derivative input of a simulation.
struct SensInput {
    enum class Kind { Param, Control, InitState, EventValue };
    Kind kind = Kind::Param;
    int comp = 0;     // index into p / u / x0
    int series = -1;  // EventValue: schedule series index
    int interval = -1; // EventValue: schedule interval index
};

// Compiled evaluation context for one DaeProblem. Immutable and shareable; all
// simulation entry points are const and safe to call concurrently.
class SimContext {
public:
    explicit SimContext(model::DaeProblem dae);

    const model::DaeProblem& dae() const { return dae_; }

    Trajectory integrate(const std::vector<double>& t_grid, std::vector<double> x0,
                         std::vector<double> z0_guess, std::vector<double> p, std::vector<double> u,
                         const IntegrateOptions& opts = {}) const;

    Trajectory simulate_with_events(const std::vector<double>& t_grid, const EventSchedule& schedule,
                                    std::vector<double> x0, std::vector<double> z0_guess,
                                    std::vector<double> p, std::vector<double> u,
                                    const IntegrateOptions& opts = {}) const;

    struct SensRun {
        Trajectory traj;
        // One (nx+nz) x n_in matrix per grid point: x-rows first, then z-rows.
        std::vector<Eigen::MatrixXd> sens;
    };
    // Discrete forward sensitivities: each step solves the trapezoidal
    // linearization of the sensitivity DAE with the factored step matrix, which
    // is exactly the derivative of the discrete solution map.
    SensRun simulate_with_sensitivity(const std::vector<double>& t_grid, const EventSchedule& schedule,
                                      std::vector<double> x0, std::vector<double> z0_guess,
                                      std::vector<double> p, std::vector<double> u,
                                      const std::vector<SensInput>& inputs,
                                      const IntegrateOptions& opts = {}) const;

    // Damped Newton on the square system ode=0, alg=0.
    std::pair<std::vector<double>, std::vector<double>> solve_steady_state(
        std::vector<double> p, std::vector<double> u, std::vector<double> x_guess,
        std::vector<double> z_guess, const IntegrateOptions& opts = {}) const;

private:
    friend struct Stepper;
    model::DaeProblem dae_;
    int nx_, nz_, np_, nu_;
    expr::CompiledFunction rhs_;    // (x,z,p,u) -> [ode; alg]
    expr::CompiledFunction jac_xz_; // -> d[ode;alg]/d[x,z], row-major
    expr::CompiledFunction jac_pu_; // -> d[ode;alg]/d[p,u], row-major
};

// QSS coupling: env components drive fast parameters; fast components feed back
// into env parameters as a time-variant schedule.
struct QssCoupling {
    struct Link {
        model::AbsName source;
        model::AbsName target;
    };
    std::vector<Link> env_to_fast;
    std::vector<Link> fast_to_env;
};

struct QssOptions {
    IntegrateOptions env;
    IntegrateOptions fast;
    // Phases repeat until the fast-output table is stable; a triangular coupling
    // converges after the first repeat detects no change.
    int max_sweeps = 20;
    double table_tol = 1e-10;
    bool parallel = true;
};

struct QssSystem {
    const SimContext* ctx = nullptr;
    std::vector<double> x0, z0, p, u;
};

struct QssResult {
    Trajectory traj;                 // final env trajectory
    Eigen::MatrixXd fast_table;      // T x fast_to_env.size(), steady-state outputs per grid time
    int sweeps = 0;
    double final_delta = 0.0;
};

QssResult simulate_qss(const QssSystem& env, const QssSystem& fast, const QssCoupling& coupling,
                       const std::vector<double>& t_grid, const QssOptions& opts = {});

// Trajectory CSV: header "time,<abs-name>..." with x, z and (optionally) applied
// u columns, full double precision.
void export_trajectory_csv(const std::filesystem::path& path, const model::DaeProblem& dae,
                           const Trajectory& traj, const Eigen::MatrixXd* u_rows = nullptr);

// Per-grid-row applied u values implied by base values plus an event schedule.
Eigen::MatrixXd applied_u_rows(const model::DaeProblem& dae, const std::vector<double>& t_grid,
                               const EventSchedule& schedule, const std::vector<double>& u);

// A simulation whose parameters, controls, initial states or event values may be
// symbols. Evaluating at concrete inputs runs the numerical path; Jacobians of
// stored outputs come from forward sensitivities.
class SymbolicSimulation {
public:
    struct Config {
        std::vector<double> t_grid;
        std::vector<double> x0, z0, p, u;
        struct SlotSymbol {
            model::AbsName name;
            expr::Expression symbol;
        };
        std::vector<SlotSymbol> p_symbols, u_symbols, x0_symbols, z0_symbols;
        EventSchedule base_events; // numeric series
        struct SymbolSeries {
            model::AbsName name;
            // one entry per interval: symbol or fixed value
            std::vector<std::optional<expr::Expression>> symbols;
            std::vector<double> fallback; // used where symbols[k] is empty
        };
        std::vector<SymbolSeries> symbol_series;
        IntegrateOptions opts;
    };

    SymbolicSimulation(std::shared_ptr<const SimContext> ctx, Config cfg);

    const expr::ExpressionVector& inputs() const { return inputs_; }
    int n_inputs() const { return static_cast<int>(inputs_.size()); }
    const std::vector<double>& grid() const { return cfg_.t_grid; }
    const SimContext& context() const { return *ctx_; }
    const IntegrateOptions& options() const { return cfg_.opts; }

    // Output handles: fresh interned symbols standing for a variable component at
    // a grid index (or the final time). Expressions over handles stay
    // differentiable through the chain rule.
    expr::Expression handle(const model::AbsName& name, int time_index) const;
    expr::Expression final_handle(const model::AbsName& name) const;
    int time_index(double t) const; // exact grid lookup (tolerant to 1e-9 rounding)

    struct HandleInfo {
        model::AbsName name;
        int time_index;
    };
    const HandleInfo* find_handle(const expr::Expression& sym) const;

    // Numerical run at concrete inputs (cached on the last input vector).
    Trajectory run(std::span<const double> inputs, const IntegrateOptions* opts_override = nullptr) const;
    // Values of the given handles at concrete inputs.
    Eigen::VectorXd handle_values(std::span<const double> inputs, const std::vector<HandleInfo>& handles) const;
    // Jacobian rows of the given handles w.r.t. the stacked inputs.
    Eigen::MatrixXd handle_jacobian(std::span<const double> inputs, const std::vector<HandleInfo>& handles,
                                    const IntegrateOptions* opts_override = nullptr) const;

    // initial guesses for the inputs, taken from the base values
    std::vector<double> input_guess() const;

private:
    struct Realized {
        std::vector<double> x0, z0, p, u;
        EventSchedule events;
    };
    Realized realize(std::span<const double> inputs) const;
    std::vector<SensInput> sens_inputs() const;

    std::shared_ptr<const SimContext> ctx_;
    Config cfg_;
    expr::ExpressionVector inputs_;
    std::map<std::uint32_t, int> input_pos_;
    // where each input lands when realizing the run
    struct Placement {
        SensInput::Kind kind;
        int comp;
        int series;
        int interval;
    };
    std::vector<std::vector<Placement>> placements_; // per input
    mutable std::mutex cache_mu_;
    mutable std::vector<double> cache_key_;
    mutable std::optional<Trajectory> cache_traj_;
    mutable std::map<std::string, HandleInfo> handle_infos_; // symbol name -> info
    std::string handle_prefix_;
};

} // namespace eoc::sim

#endif
