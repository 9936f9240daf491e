#ifndef EOC_DYNOPT_HPP
#define EOC_DYNOPT_HPP

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "eoc/deriv.hpp"
#include "eoc/model.hpp"
#include "eoc/nlp.hpp"
#include "eoc/sim.hpp"

namespace eoc::dynopt {

// Control grid plus per-decision bounds/inits and fixed time-variant parameter
// values. Interval k spans [grid[k], grid[k+1]).
struct ControlSchedule {
    std::vector<double> grid;
    struct TvEntry {
        model::AbsName name;
        std::vector<double> init, lb, ub; // one entry per interval
    };
    struct TiEntry {
        model::AbsName name;
        double init = 0.0, lb = 0.0, ub = 0.0;
    };
    struct TvFixed {
        model::AbsName name;
        std::vector<double> values; // one per interval
    };
    std::vector<TvEntry> tv_bounds;
    std::vector<TiEntry> ti_bounds;
    std::vector<TvFixed> tv_fixed;

    int n_intervals() const { return static_cast<int>(grid.size()) - 1; }
    const TvEntry* find_tv(const model::AbsName& name) const;
    const TiEntry* find_ti(const model::AbsName& name) const;

    // Sectioned CSV: [grid] time rows, [tv_bounds] time,name,init,lb,ub,
    // [ti_bounds] name,init,lb,ub, [tv_fixed] time,name,value.
    static ControlSchedule load_csv(const std::filesystem::path& path);
    void save_csv(const std::filesystem::path& path) const;
};

struct DecisionLayout {
    struct Tv {
        model::AbsName name;
        int offset = 0; // first w index
        int n = 0;      // intervals
        std::vector<double> t_start;
    };
    struct Ti {
        model::AbsName name;
        int offset = 0;
    };
    std::vector<Tv> tv;
    std::vector<Ti> ti;
    int n_base = 0;
    int n_slack = 0;
    int n_w() const { return n_base + n_slack; }
};

struct SolveStep {
    struct TvResult {
        model::AbsName name;
        std::vector<double> t_start;
        std::vector<double> value;
    };
    struct TiResult {
        model::AbsName name;
        double value = 0.0;
    };
    std::vector<TvResult> tv;
    std::vector<TiResult> ti;
    std::vector<double> slacks;
    nlp::NlpSolution sol;
};

class TranscribedProblem {
public:
    const nlp::NlpProblem& problem() const { return nlp_; }
    const DecisionLayout& layout() const { return layout_; }
    const sim::SymbolicSimulation& simulation() const;
    Eigen::VectorXd initial_w() const;

    // Appends a nonnegative slack per relaxed row; the widened rows keep their
    // violation within the slack and the objective gains weight * sum(s).
    TranscribedProblem relax(const std::vector<std::string>& constraint_names) const;

    SolveStep solve_step(const nlp::SqpOptions& opts = {}) const;
    SolveStep solve_step(const nlp::SqpOptions& opts, const Eigen::VectorXd& w0) const;

    // Solution export: per-interval controls plus the predicted x/z trajectories.
    void export_solution_csv(const std::filesystem::path& path, const SolveStep& step) const;

    // Registered constraint-group names (for relax bookkeeping and reports).
    std::vector<std::string> constraint_names() const;

private:
    friend class Transcriber;
    struct State;
    std::shared_ptr<const State> state_;
    DecisionLayout layout_;
    nlp::NlpProblem nlp_;
    std::vector<int> relaxed_rows_; // base row -> slack index or -1

    void rebuild_callbacks();
};

// Builds the CVP (single shooting) transcription: piecewise-constant decisions
// on the control grid, quadrature states for stage costs, path constraints at
// grid points, all evaluated through one differentiable simulation.
class Transcriber {
public:
    Transcriber(model::Model& model, ControlSchedule schedule);

    void add_tv_decision(const model::AbsName& name);
    void add_ti_decision(const model::AbsName& name);

    // Maps decision intervals onto simulation-grid intervals (for pulse-feed
    // windows); off intervals hold off_value. Default is the identity map onto
    // the control grid.
    void set_sim_grid(std::vector<double> grid);
    void set_tv_placement(const model::AbsName& name, std::vector<std::vector<int>> placement, double off_value);

    void add_stage_cost(const expr::Expression& instantaneous);
    void add_objective_terminal(const model::AbsName& name);
    // General objective terms: the builder receives the symbolic simulation and
    // returns an expression over its output handles.
    void add_objective(std::function<expr::Expression(const sim::SymbolicSimulation&)> builder);

    void add_path_constraint(const std::string& cname, const model::AbsName& var, std::vector<double> times,
                             double lb, double ub, bool relaxable = false, double weight = 1e3);

    TranscribedProblem transcribe(const sim::IntegrateOptions& sim_opts = {},
                                  const deriv::EvaluatorOptions& deriv_opts = {});

private:
    model::Model& model_;
    ControlSchedule schedule_;
    std::vector<double> sim_grid_;
    struct TvDecision {
        model::AbsName name;
        std::vector<std::vector<int>> placement;
        double off_value = 0.0;
        bool has_placement = false;
    };
    struct PathCons {
        std::string name;
        model::AbsName var;
        std::vector<double> times;
        double lb, ub;
        bool relaxable;
        double weight;
    };
    std::vector<TvDecision> tv_;
    std::vector<model::AbsName> ti_;
    std::vector<expr::Expression> stage_costs_;
    std::vector<model::AbsName> terminal_objectives_;
    std::vector<std::function<expr::Expression(const sim::SymbolicSimulation&)>> objective_builders_;
    std::vector<PathCons> cons_;
};

} // namespace eoc::dynopt

#endif
