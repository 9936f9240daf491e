#ifndef EOC_NLP_HPP
#define EOC_NLP_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace eoc::nlp {

// Dense NLP
//   min f(w)  s.t.  g_lb <= g(w) <= g_ub,  w_lb <= w <= w_ub
// Constraint k is an equality iff g_lb[k] == g_ub[k]. Callbacks return false
// when the point is not evaluable (failed simulation); the solver treats such
// trial points as rejected line-search steps.
struct NlpProblem {
    int n_w = 0;
    int n_g = 0;
    std::function<bool(const Eigen::VectorXd& w, double& f, Eigen::VectorXd& grad)> objective;
    std::function<bool(const Eigen::VectorXd& w, Eigen::VectorXd& g, Eigen::MatrixXd& jac)> constraints;
    // Optional value-only fast paths for line-search trials; when absent the
    // full callbacks are used.
    std::function<bool(const Eigen::VectorXd& w, double& f)> objective_value;
    std::function<bool(const Eigen::VectorXd& w, Eigen::VectorXd& g)> constraints_value;
    Eigen::VectorXd w_lb, w_ub, g_lb, g_ub;
};

enum class SolveStatus { Optimal, MaxIter, InfeasibleQp, LinesearchFail, EvalFail };

std::string status_name(SolveStatus s);

struct SqpOptions {
    double tol = 1e-6;
    int max_iter = 100;
    int linesearch_max = 30;
    int watchdog_patience = 5;
    double qp_tol = 1e-9;
    int qp_max_iter = 0; // 0 -> automatic cap
    // When a QP linearization is infeasible, up to this many relaxed QPs (rows
    // widened by penalized slacks) may be solved before giving up with
    // InfeasibleQp. Zero disables relaxation.
    int relaxed_qp_max = 20;
    double elastic_weight = 1e3;
    std::string log_path; // iteration log CSV when nonempty
    // Warm-start multipliers enable the pre-iteration KKT test to accept an
    // already-optimal starting point unchanged.
    std::optional<Eigen::VectorXd> lambda0;
    std::optional<Eigen::VectorXd> mu0;
    int n_random_sample = 0; // extra seeded uniform starts in [w_lb, w_ub]
    std::uint64_t seed = 1;
};

struct IterationLogEntry {
    int iter;
    double f;
    double kkt;
    double step;
    int watchdog; // 1 = relaxed acceptance, 2 = fallback restore
};

struct NlpSolution {
    Eigen::VectorXd w;
    double f = 0.0;
    Eigen::VectorXd g;
    Eigen::VectorXd lambda_g; // >=0 at active upper bounds, <=0 at lower
    Eigen::VectorXd lambda_w;
    SolveStatus status = SolveStatus::MaxIter;
    int iterations = 0;
    double kkt_residual = 0.0;
    std::vector<IterationLogEntry> log;
};

NlpSolution sqp_solve(const NlpProblem& problem, Eigen::VectorXd w0, const SqpOptions& opts = {});

// Convex QP subproblem, exposed for testing:
//   min 1/2 d'Hd + c'd  s.t.  rl <= A d <= ru,  dl <= d <= du
// H must be positive definite. Solved with the dual active-set method of
// Goldfarb and Idnani; d0 is accepted for interface parity but not used (the
// dual method starts from the unconstrained minimizer).
struct QpResult {
    bool feasible = false;
    Eigen::VectorXd d;
    Eigen::VectorXd lambda_rows;   // one per A row, sign convention as above
    Eigen::VectorXd lambda_bounds; // one per variable
    int iterations = 0;
};

QpResult qp_solve(const Eigen::MatrixXd& H, const Eigen::VectorXd& c, const Eigen::MatrixXd& A,
                  const Eigen::VectorXd& rl, const Eigen::VectorXd& ru, const Eigen::VectorXd& dl,
                  const Eigen::VectorXd& du, const Eigen::VectorXd& d0 = {}, double tol = 1e-9,
                  int max_iter = 0);

} // namespace eoc::nlp

#endif
