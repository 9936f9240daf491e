#ifndef EOC_ESTIM_HPP
#define EOC_ESTIM_HPP

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "eoc/deriv.hpp"
#include "eoc/model.hpp"
#include "eoc/nlp.hpp"
#include "eoc/sim.hpp"

namespace eoc::estim {

// One experiment: time-invariant operating parameters, a time-variant operating
// schedule, and a measurement table with optional missing entries (NaN).
struct ExperimentData {
    std::string id;
    std::vector<std::pair<model::AbsName, double>> tip;
    sim::EventSchedule tvp;
    std::vector<model::AbsName> outputs;
    std::vector<double> times;
    Eigen::MatrixXd values; // times x outputs, NaN where missing
    Eigen::MatrixXd stds;   // paired with values

    int present_count() const;
    double horizon_end() const { return times.empty() ? 0.0 : times.back(); }
};

// Measurement CSV: header "time,<abs-name-1>,std1,<abs-name-2>,std2,...";
// blank cells or "nan" mark missing entries. A present value with a missing or
// non-positive std is an error.
ExperimentData load_measurement_csv(const std::filesystem::path& path, std::string id = "");

// Operating schedule CSV with [ti] name,value rows and [tv_fixed]
// time,name,value rows (applied piecewise-constant between listed times).
void load_doe_csv(const std::filesystem::path& path, ExperimentData& experiment);

enum class EstimatorKind { Ols, Ml, Map };

struct ParamSpec {
    model::AbsName name;
    double init = 0.0;
    double lb = -std::numeric_limits<double>::infinity();
    double ub = std::numeric_limits<double>::infinity();
};

struct Priors {
    std::vector<model::AbsName> names;
    std::vector<double> mean;
    std::vector<double> std;
    const double* find(const model::AbsName& name, const double** std_out) const;
};

std::vector<ParamSpec> load_param_files(const std::filesystem::path& init_csv,
                                        const std::filesystem::path& bounds_csv);
Priors load_prior_csv(const std::filesystem::path& path);

struct BuildOptions {
    EstimatorKind estimator = EstimatorKind::Ml;
    bool log_param = false;
    bool estimate_init_variables = false;
    // Initial-state decisions per experiment; empty selects the measured
    // differential states.
    std::vector<model::AbsName> init_state_names;
    std::optional<Priors> priors; // required for Map
    sim::IntegrateOptions sim_opts;
    deriv::EvaluatorOptions deriv_opts;
    // extra simulation grid points per experiment beyond measurement/event times
    int min_grid_points = 0;
    // Confidence intervals: 0 evaluates the sensitivity matrix at the
    // measurement times (the residual rows). A positive value evaluates it on
    // that many uniformly spaced stored time points per experiment instead,
    // which is how the reference pipeline's dense trajectory store behaves.
    int ci_dense_grid_points = 0;
};

struct OutputConstraint {
    model::AbsName name;
    double lb = -std::numeric_limits<double>::infinity();
    double ub = std::numeric_limits<double>::infinity();
};

// Stacked-residual estimation problem over shared model parameters and
// per-experiment initial states.
class EstimationProblem {
public:
    int n_decisions() const { return static_cast<int>(names_.size()); }
    int n_residuals() const;
    const std::vector<std::string>& decision_names() const { return names_; }
    const std::vector<ExperimentData>& experiments() const { return experiments_; }
    EstimatorKind estimator() const { return opts_.estimator; }

    // Decision-scale starting point, bounds (log scale where log_param applies).
    Eigen::VectorXd initial() const { return theta0_; }
    Eigen::VectorXd lower() const { return lb_; }
    Eigen::VectorXd upper() const { return ub_; }

    // Residual stack r = y - yhat and its Jacobian d yhat / d theta at theta.
    bool residuals(const Eigen::VectorXd& theta, Eigen::VectorXd& r) const;
    bool residuals_full(const Eigen::VectorXd& theta, Eigen::VectorXd& r, Eigen::MatrixXd& X) const;

    // Objective per the configured estimator (OLS/ML/MAP) with gradient.
    double objective(const Eigen::VectorXd& theta, const Eigen::VectorXd& r) const;
    Eigen::VectorXd objective_gradient(const Eigen::VectorXd& theta, const Eigen::VectorXd& r,
                                       const Eigen::MatrixXd& X) const;

    // NLP assembly (decisions, bounds, optional output constraints at the
    // measurement times of every experiment).
    nlp::NlpProblem make_nlp(const std::vector<OutputConstraint>& constraints) const;

    // Decision scale -> original parameter scale.
    Eigen::VectorXd to_original(const Eigen::VectorXd& theta) const;
    Eigen::VectorXd scale_jacobian(const Eigen::VectorXd& theta) const; // d original / d theta (diagonal)

    Eigen::VectorXd sigmas() const { return sigma_; }
    double residual_weight(int i) const;
    int ci_dense_grid_points() const { return opts_.ci_dense_grid_points; }
    // Sensitivity of both measured outputs at n_points uniform times per
    // experiment, stacked like residual rows (used by the dense CI variant).
    void dense_sensitivity(const Eigen::VectorXd& theta, int n_points, Eigen::MatrixXd& X,
                           Eigen::VectorXd& sigma) const;
    const std::optional<Priors>& priors() const { return opts_.priors; }
    Eigen::VectorXd prior_mean_scaled() const { return prior_mean_; }
    Eigen::VectorXd prior_std_scaled() const { return prior_std_; }
    bool has_prior() const { return opts_.estimator == EstimatorKind::Map; }

    struct ResidualSlot {
        int experiment;
        int time_row;
        int output;
    };
    const std::vector<ResidualSlot>& slots() const { return slots_; }

private:
    friend EstimationProblem build_problem(model::Model&, std::vector<ExperimentData>, std::vector<ParamSpec>,
                                           const BuildOptions&);
    BuildOptions opts_;
    std::vector<ExperimentData> experiments_;
    std::vector<std::string> names_;
    std::vector<bool> log_flags_;
    Eigen::VectorXd theta0_, lb_, ub_;
    Eigen::VectorXd sigma_;
    Eigen::VectorXd prior_mean_, prior_std_; // decision scale; empty unless Map
    std::vector<ResidualSlot> slots_;

    struct PerExperiment {
        std::shared_ptr<sim::SimContext> ctx;
        sim::SymbolicSimulation::Config cfg;
        std::shared_ptr<sim::SymbolicSimulation> sym;
        std::unique_ptr<deriv::DerivativeEvaluator> ev;
        std::vector<int> theta_of_input;           // simulation input -> decision index
        std::vector<int> residual_output;          // residual slot -> evaluator output row
        std::vector<model::AbsName> constraint_outputs; // appended per make_nlp
        int n_outputs = 0;
    };
    std::vector<std::shared_ptr<PerExperiment>> per_exp_;
    std::vector<OutputConstraint> pending_constraints_;

    bool eval_outputs(int e, const Eigen::VectorXd& theta, Eigen::VectorXd& vals) const;
    bool eval_outputs_full(int e, const Eigen::VectorXd& theta, Eigen::VectorXd& vals, Eigen::MatrixXd& jac) const;
};

EstimationProblem build_problem(model::Model& m, std::vector<ExperimentData> experiments,
                                std::vector<ParamSpec> params, const BuildOptions& opts);

struct EstimationResult {
    std::vector<std::string> names;
    Eigen::VectorXd estimates; // original scale
    double objective = 0.0;
    Eigen::MatrixXd covariance; // original scale
    Eigen::VectorXd ci_half;    // 1.96 sqrt(diag)
    bool rank_deficient = false;
    nlp::NlpSolution sol;
    struct Prediction {
        std::string experiment;
        double time;
        model::AbsName output;
        double measured = 0.0;
        double predicted = 0.0;
    };
    std::vector<Prediction> predictions;
    std::vector<double> per_experiment_rms;
    int worst_experiment = -1;
};

// The quick-estimate pipeline: transcribe, solve via SQP, back-transform and
// post-process (covariance, confidence intervals, prediction table). theta0
// overrides the problem's initial point (decision scale) when given.
EstimationResult estimate(const EstimationProblem& problem, const nlp::SqpOptions& solver_opts = {},
                          const std::vector<OutputConstraint>& constraints = {}, bool diagnose = false,
                          const std::optional<Eigen::VectorXd>& theta0 = {});

// Covariance and confidence intervals at a given solution (exposed separately;
// estimate() calls this internally).
void post_process(const EstimationProblem& problem, EstimationResult& result);

// Covariance formulas. X is the residual sensitivity d yhat / d p.
Eigen::MatrixXd covariance_ols(const Eigen::MatrixXd& X, bool* rank_deficient = nullptr,
                               bool sigma2_correction = false, double ssr = 0.0);
Eigen::MatrixXd covariance_ml(const Eigen::MatrixXd& X, const Eigen::VectorXd& sigma,
                              bool* rank_deficient = nullptr);
Eigen::MatrixXd covariance_map(const Eigen::MatrixXd& X, const Eigen::VectorXd& sigma,
                               const Eigen::MatrixXd& prior_cov, bool* rank_deficient = nullptr);

void write_estimates_csv(const std::filesystem::path& path, const EstimationResult& r);
void write_covariance_csv(const std::filesystem::path& path, const EstimationResult& r);
void write_predictions_csv(const std::filesystem::path& path, const EstimationResult& r);

} // namespace eoc::estim

#endif
