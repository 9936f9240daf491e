#include "eoc/deriv.hpp"

#include <atomic>
#include <cmath>

#include "eoc/errors.hpp"
#include "eoc/parallel.hpp"

namespace eoc::deriv {

std::string method_name(GradientMethod m) {
    switch (m) {
    case GradientMethod::Forward: return "forward";
    case GradientMethod::FiniteDifference: return "finite_difference";
    case GradientMethod::Hybrid: return "hybrid";
    case GradientMethod::Adjoint: return "adjoint";
    }
    return "?";
}

DerivativeEvaluator::DerivativeEvaluator(std::shared_ptr<const sim::SymbolicSimulation> simulation,
                                         std::vector<OutputSpec> outputs, EvaluatorOptions opts)
    : sim_(std::move(simulation)), opts_(opts) {
    if (opts_.method == GradientMethod::Adjoint)
        throw ConfigError("the adjoint sensitivity method is reserved but not available; use forward or hybrid");
    handles_.reserve(outputs.size());
    for (const auto& o : outputs) {
        // handle() validates the name and normalizes kFinal.
        auto sym = sim_->handle(o.name, o.time_index);
        handles_.push_back(*sim_->find_handle(sym));
    }
}

int DerivativeEvaluator::n_in() const { return sim_->n_inputs(); }

Eigen::VectorXd DerivativeEvaluator::values(std::span<const double> inputs) const {
    return sim_->handle_values(inputs, handles_);
}

Eigen::VectorXd DerivativeEvaluator::values_uncached(std::span<const double> inputs) const {
    const auto& opts = sim_->options();
    sim::Trajectory traj = sim_->run(inputs, &opts); // bypasses the shared cache
    const auto& dae = sim_->context().dae();
    Eigen::VectorXd out(static_cast<Eigen::Index>(handles_.size()));
    for (std::size_t i = 0; i < handles_.size(); ++i) {
        auto loc = dae.find(handles_[i].name);
        out[static_cast<Eigen::Index>(i)] = loc.kind == model::VarKind::X
                                                ? traj.x(handles_[i].time_index, loc.pos)
                                                : traj.z(handles_[i].time_index, loc.pos);
    }
    return out;
}

Eigen::MatrixXd DerivativeEvaluator::fd_jacobian(std::span<const double> inputs) const {
    const int n = n_in();
    Eigen::MatrixXd J(n_out(), n);
    std::vector<double> base(inputs.begin(), inputs.end());
    auto column = [&](int i) {
        double h = opts_.fd_rel_step * std::max(1.0, std::abs(base[i]));
        std::vector<double> qp = base, qm = base;
        qp[i] += h;
        qm[i] -= h;
        Eigen::VectorXd fp = values_uncached(qp);
        Eigen::VectorXd fm = values_uncached(qm);
        J.col(i) = (fp - fm) / (2.0 * h);
    };
    if (opts_.parallel_fd)
        parallel::parallel_for(n, column);
    else
        for (int i = 0; i < n; ++i) column(i);
    return J;
}

EvalResult DerivativeEvaluator::evaluate(std::span<const double> inputs) const {
    if (static_cast<int>(inputs.size()) != n_in())
        throw ConfigError("derivative evaluator: expected " + std::to_string(n_in()) + " inputs, got " +
                          std::to_string(inputs.size()));
    EvalResult result;
    result.diagnostics.requested = opts_.method;
    result.values = values(inputs);

    if (n_in() == 0) {
        result.jacobian.resize(n_out(), 0);
        result.diagnostics.used = opts_.method == GradientMethod::FiniteDifference
                                      ? GradientMethod::FiniteDifference
                                      : GradientMethod::Forward;
        return result;
    }

    auto run_forward = [&]() {
        const sim::IntegrateOptions* opts = opts_.forward_opts ? &*opts_.forward_opts : nullptr;
        Eigen::MatrixXd J = sim_->handle_jacobian(inputs, handles_, opts);
        if (!J.allFinite()) throw NumericalError("forward sensitivities are not finite");
        return J;
    };

    switch (opts_.method) {
    case GradientMethod::Forward:
        result.jacobian = run_forward();
        result.diagnostics.used = GradientMethod::Forward;
        break;
    case GradientMethod::FiniteDifference:
        result.jacobian = fd_jacobian(inputs);
        result.diagnostics.used = GradientMethod::FiniteDifference;
        break;
    case GradientMethod::Hybrid:
        try {
            result.jacobian = run_forward();
            result.diagnostics.used = GradientMethod::Forward;
        } catch (const NumericalError& e) {
            result.diagnostics.failure = e.what();
            result.diagnostics.fd_fallback = true;
            result.diagnostics.used = GradientMethod::FiniteDifference;
            result.jacobian = fd_jacobian(inputs);
        }
        break;
    case GradientMethod::Adjoint:
        throw ConfigError("the adjoint sensitivity method is reserved but not available");
    }
    return result;
}

namespace {
std::atomic<std::uint64_t> g_aug_uid{0};
}

std::vector<double> AugmentedDae::augmented_x0(const std::vector<double>& x0) const {
    if (static_cast<int>(x0.size()) != base_nx) throw ConfigError("augmented_x0: base x0 size mismatch");
    std::vector<double> out(static_cast<std::size_t>(base_nx) * (1 + n_inputs), 0.0);
    std::copy(x0.begin(), x0.end(), out.begin());
    for (int i = 0; i < n_inputs; ++i)
        if (inputs[i].kind == sim::SensInput::Kind::InitState && inputs[i].comp >= 0)
            out[sens_x_offset(i) + inputs[i].comp] = 1.0;
    return out;
}

std::vector<double> AugmentedDae::augmented_z0(const std::vector<double>& z0) const {
    if (static_cast<int>(z0.size()) != base_nz) throw ConfigError("augmented_z0: base z0 size mismatch");
    std::vector<double> out(static_cast<std::size_t>(base_nz) * (1 + n_inputs), 0.0);
    std::copy(z0.begin(), z0.end(), out.begin());
    return out;
}

std::vector<double> AugmentedDae::augmented_p(const std::vector<double>& p) const {
    std::vector<double> out = p;
    for (int i = 0; i < n_inputs; ++i) {
        if (activation_p_pos[i] < 0) continue;
        out.resize(std::max(out.size(), static_cast<std::size_t>(activation_p_pos[i]) + 1), 0.0);
        out[activation_p_pos[i]] = inputs[i].interval == 0 ? 1.0 : 0.0;
    }
    return out;
}

sim::EventSchedule AugmentedDae::activation_schedule(const sim::EventSchedule& original) const {
    sim::EventSchedule out = original;
    for (int i = 0; i < n_inputs; ++i) {
        if (activation_p_pos[i] < 0) continue;
        sim::EventSchedule::Series s;
        s.name = dae.p_names[activation_p_pos[i]];
        s.values.assign(original.times.size() - 1, 0.0);
        s.values[inputs[i].interval] = 1.0;
        out.series.push_back(std::move(s));
    }
    return out;
}

AugmentedDae build_forward_sensitivity(const model::DaeProblem& dae, const std::vector<sim::SensInput>& inputs,
                                       const sim::EventSchedule* schedule) {
    AugmentedDae aug;
    aug.base_nx = dae.nx();
    aug.base_nz = dae.nz();
    aug.n_inputs = static_cast<int>(inputs.size());
    aug.inputs = inputs;
    aug.dae = dae;

    const int nx = dae.nx(), nz = dae.nz();
    expr::ExpressionVector xz(dae.x);
    xz.insert(xz.end(), dae.z.begin(), dae.z.end());

    expr::ExpressionVector eqs = dae.ode;
    eqs.insert(eqs.end(), dae.alg.begin(), dae.alg.end());
    auto J_xz = expr::differentiate(eqs, xz);

    const std::string prefix = "@sens" + std::to_string(g_aug_uid.fetch_add(1));
    int input_index = 0;
    for (const auto& si : inputs) {
        // Direct-derivative column d[f;g]/dq, gated for event values.
        expr::ExpressionVector direct(nx + nz, expr::Expression(0.0));
        int act_pos = -1;
        switch (si.kind) {
        case sim::SensInput::Kind::Param: {
            if (si.comp < 0 || si.comp >= dae.np())
                throw ConfigError("build_forward_sensitivity: parameter index out of range");
            auto col = expr::differentiate(eqs, {dae.p[si.comp]});
            for (int r = 0; r < nx + nz; ++r) direct[r] = col[r][0];
            break;
        }
        case sim::SensInput::Kind::Control: {
            if (si.comp < 0 || si.comp >= dae.nu())
                throw ConfigError("build_forward_sensitivity: control index out of range");
            auto col = expr::differentiate(eqs, {dae.u[si.comp]});
            for (int r = 0; r < nx + nz; ++r) direct[r] = col[r][0];
            break;
        }
        case sim::SensInput::Kind::InitState:
            if (si.comp < 0 || si.comp >= nx)
                throw ConfigError("build_forward_sensitivity: input '" + std::to_string(si.comp) + "' not found");
            break;
        case sim::SensInput::Kind::EventValue: {
            if (!schedule) throw ConfigError("build_forward_sensitivity: event-value inputs need the schedule");
            if (si.series < 0 || si.series >= static_cast<int>(schedule->series.size()))
                throw ConfigError("build_forward_sensitivity: event series index out of range");
            auto loc = dae.find(schedule->series[si.series].name);
            const expr::Expression& q = loc.kind == model::VarKind::P ? dae.p[loc.pos] : dae.u[loc.pos];
            auto col = expr::differentiate(eqs, {q});
            model::AbsName act_name(prefix + ".act" + std::to_string(input_index), 0);
            expr::Expression act = expr::make_symbol(act_name.str());
            act_pos = aug.dae.np();
            aug.dae.p.push_back(act);
            aug.dae.p_names.push_back(act_name);
            aug.dae.p_index[act_name.str()] = act_pos;
            for (int r = 0; r < nx + nz; ++r) direct[r] = act * col[r][0];
            break;
        }
        }
        aug.activation_p_pos.push_back(act_pos);

        // Fresh sensitivity states for this input.
        expr::ExpressionVector sx(nx), sz(nz);
        for (int j = 0; j < nx; ++j) {
            model::AbsName n(prefix + ".in" + std::to_string(input_index) + ".sx", j);
            sx[j] = expr::make_symbol(n.str());
            aug.dae.x_index[n.str()] = static_cast<int>(aug.dae.x.size());
            aug.dae.x.push_back(sx[j]);
            aug.dae.x_names.push_back(n);
        }
        for (int j = 0; j < nz; ++j) {
            model::AbsName n(prefix + ".in" + std::to_string(input_index) + ".sz", j);
            sz[j] = expr::make_symbol(n.str());
            aug.dae.z_index[n.str()] = static_cast<int>(aug.dae.z.size());
            aug.dae.z.push_back(sz[j]);
            aug.dae.z_names.push_back(n);
        }

        auto lincomb = [&](int row) {
            expr::Expression acc = direct[row];
            for (int k = 0; k < nx; ++k) acc = acc + J_xz[row][k] * sx[k];
            for (int k = 0; k < nz; ++k) acc = acc + J_xz[row][nx + k] * sz[k];
            return acc;
        };
        for (int r = 0; r < nx; ++r) aug.dae.ode.push_back(lincomb(r));
        for (int r = 0; r < nz; ++r) aug.dae.alg.push_back(lincomb(nx + r));
        ++input_index;
    }
    return aug;
}

} // namespace eoc::deriv
