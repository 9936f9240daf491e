#ifndef EOC_DERIV_HPP
#define EOC_DERIV_HPP

#include <Eigen/Dense>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eoc/model.hpp"
#include "eoc/sim.hpp"

namespace eoc::deriv {

enum class GradientMethod { Forward, FiniteDifference, Hybrid, Adjoint };

std::string method_name(GradientMethod m);

// One output of a simulation: a variable component sampled at a grid index, or
// at the final time (kFinal).
struct OutputSpec {
    static constexpr int kFinal = -1;
    model::AbsName name;
    int time_index = kFinal;
};

struct Diagnostics {
    GradientMethod requested = GradientMethod::Hybrid;
    GradientMethod used = GradientMethod::Forward;
    bool fd_fallback = false;
    std::string failure; // why the forward pass was abandoned, if it was
};

struct EvalResult {
    Eigen::VectorXd values;
    Eigen::MatrixXd jacobian; // n_out x n_in
    Diagnostics diagnostics;
};

struct EvaluatorOptions {
    GradientMethod method = GradientMethod::Hybrid;
    double fd_rel_step = 1e-6; // h = fd_rel_step * max(1, |q|)
    // Options for the forward-sensitivity integration only; value runs (and the
    // finite-difference fallback) use the simulation's own options.
    std::optional<sim::IntegrateOptions> forward_opts;
    bool parallel_fd = true;
};

// Values and Jacobians of selected simulation outputs with respect to the
// simulation's stacked input symbols. Forward mode propagates the sensitivity
// equations alongside the states; hybrid mode falls back to central finite
// differences when that integration fails.
class DerivativeEvaluator {
public:
    DerivativeEvaluator(std::shared_ptr<const sim::SymbolicSimulation> simulation,
                        std::vector<OutputSpec> outputs, EvaluatorOptions opts = {});

    int n_in() const;
    int n_out() const { return static_cast<int>(handles_.size()); }

    Eigen::VectorXd values(std::span<const double> inputs) const;
    EvalResult evaluate(std::span<const double> inputs) const;

    const sim::SymbolicSimulation& simulation() const { return *sim_; }

private:
    Eigen::MatrixXd fd_jacobian(std::span<const double> inputs) const;
    Eigen::VectorXd values_uncached(std::span<const double> inputs) const;

    std::shared_ptr<const sim::SymbolicSimulation> sim_;
    std::vector<sim::SymbolicSimulation::HandleInfo> handles_;
    EvaluatorOptions opts_;
};

// Symbolic forward-sensitivity augmentation: for x' = f, 0 = g, appends per
// selected input q the system
//   s_x' = (df/dx) s_x + (df/dz) s_z + df/dq
//   0    = (dg/dx) s_x + (dg/dz) s_z + dg/dq
// Event-value inputs gate their direct term with an activation parameter that
// is 1 on the input's interval and 0 elsewhere (activation_schedule()).
struct AugmentedDae {
    model::DaeProblem dae;
    int base_nx = 0, base_nz = 0;
    int n_inputs = 0;
    std::vector<sim::SensInput> inputs;
    std::vector<int> activation_p_pos; // per input; -1 when no gate is needed

    int sens_x_offset(int input) const { return base_nx * (1 + input); }
    int sens_z_offset(int input) const { return base_nz * (1 + input); }

    // Initial condition for the augmented differential states: the base x0
    // followed by ds/dq blocks (identity entries for initial-state inputs).
    std::vector<double> augmented_x0(const std::vector<double>& x0) const;
    std::vector<double> augmented_z0(const std::vector<double>& z0) const;
    // Parameters for the augmented problem: base p plus activation defaults
    // (interval-0 gating).
    std::vector<double> augmented_p(const std::vector<double>& p) const;
    // Activation indicator series aligned with the original schedule times.
    sim::EventSchedule activation_schedule(const sim::EventSchedule& original) const;
};

AugmentedDae build_forward_sensitivity(const model::DaeProblem& dae, const std::vector<sim::SensInput>& inputs,
                                       const sim::EventSchedule* schedule = nullptr);

} // namespace eoc::deriv

#endif
