#include "eoc/sim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "eoc/csv.hpp"
#include "eoc/errors.hpp"
#include "eoc/parallel.hpp"

namespace eoc::sim {

namespace {

constexpr double kGridTol = 1e-9;

bool near(double a, double b) {
    return std::abs(a - b) <= kGridTol * std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

void check_grid(const std::vector<double>& t) {
    if (t.size() < 2) throw ConfigError("time grid needs at least two points");
    for (std::size_t i = 1; i < t.size(); ++i)
        if (!(t[i] > t[i - 1])) throw ConfigError("time grid must be strictly increasing");
}

// Damped Newton with residual-decrease acceptance. eval_r returns false when the
// trial point is outside the domain; that counts as no decrease.
template <class EvalR, class EvalJ>
void damped_newton(Eigen::VectorXd& y, EvalR&& eval_r, EvalJ&& eval_j, const IntegrateOptions& o,
                   const std::string& what) {
    Eigen::VectorXd r(y.size()), r_try(y.size()), dy(y.size()), y_try(y.size());
    if (!eval_r(y, r)) throw NumericalError(what + ": residual not evaluable at the starting point");
    double nr = r.lpNorm<Eigen::Infinity>();
    Eigen::MatrixXd J(y.size(), y.size());
    for (int iter = 0; iter < o.newton_max_iter; ++iter) {
        if (nr <= o.newton_tol) {
            if (!y.allFinite()) throw NumericalError(what + ": non-finite state");
            return;
        }
        eval_j(y, J);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
        dy = lu.solve(-r);
        if (!dy.allFinite()) throw NumericalError(what + ": singular or ill-conditioned Jacobian");
        double alpha = 1.0;
        bool accepted = false;
        for (int h = 0; h <= o.newton_max_halvings; ++h) {
            y_try = y + alpha * dy;
            if (eval_r(y_try, r_try)) {
                double nt = r_try.lpNorm<Eigen::Infinity>();
                if (std::isfinite(nt) && (nt < nr || nt <= o.newton_tol)) {
                    y = y_try;
                    r = r_try;
                    nr = nt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if (!accepted) throw NumericalError(what + ": Newton failed to reduce the residual");
    }
    throw NumericalError(what + ": Newton iteration limit reached");
}

struct ResolvedSeries {
    bool is_u = false;
    int comp = 0;
};

struct EventState {
    std::vector<int> grid_of_event; // event time -> grid index
    std::vector<ResolvedSeries> series;
};

EventState resolve_schedule(const model::DaeProblem& dae, const std::vector<double>& grid,
                            const EventSchedule& schedule) {
    EventState es;
    if (schedule.series.empty()) return es;
    if (schedule.times.size() < 2) throw ConfigError("event schedule needs at least two time points");
    std::size_t gi = 0;
    for (double t : schedule.times) {
        while (gi < grid.size() && grid[gi] < t && !near(grid[gi], t)) ++gi;
        if (gi >= grid.size() || !near(grid[gi], t))
            throw ConfigError("event time " + csv::format(t) + " is not on the integration grid");
        es.grid_of_event.push_back(static_cast<int>(gi));
    }
    for (const auto& s : schedule.series) {
        if (s.values.size() != schedule.times.size() - 1)
            throw ConfigError("event series '" + s.name.str() + "' has " + std::to_string(s.values.size()) +
                              " values for " + std::to_string(schedule.times.size()) + " event times (expected " +
                              std::to_string(schedule.times.size() - 1) + ")");
        auto loc = dae.find(s.name);
        if (loc.kind == model::VarKind::P)
            es.series.push_back({false, loc.pos});
        else if (loc.kind == model::VarKind::U)
            es.series.push_back({true, loc.pos});
        else
            throw ConfigError("event series '" + s.name.str() + "' must name a parameter or control component");
    }
    return es;
}

// Work buffers for one simulation run; never shared across threads.
struct Work {
    const expr::CompiledFunction* rhs;
    const expr::CompiledFunction* jac_xz;
    const expr::CompiledFunction* jac_pu;
    int nx, nz, np, nu;
    std::vector<double> in, rbuf, jbuf, jpubuf;
    std::vector<double> s1, s2, s3;

    int ny() const { return nx + nz; }

    void pack(const Eigen::VectorXd& x, const Eigen::VectorXd& z, const std::vector<double>& p,
              const std::vector<double>& u) {
        in.resize(nx + nz + np + nu);
        for (int i = 0; i < nx; ++i) in[i] = x[i];
        for (int i = 0; i < nz; ++i) in[nx + i] = z[i];
        for (int i = 0; i < np; ++i) in[nx + nz + i] = p[i];
        for (int i = 0; i < nu; ++i) in[nx + nz + np + i] = u[i];
    }

    bool eval_rhs(Eigen::VectorXd& out) {
        rbuf.resize(ny());
        try {
            rhs->eval(in, rbuf, s1);
        } catch (const std::exception&) {
            return false;
        }
        for (int i = 0; i < ny(); ++i) {
            if (!std::isfinite(rbuf[i])) return false;
            out[i] = rbuf[i];
        }
        return true;
    }

    void eval_jac_xz(Eigen::MatrixXd& J) {
        jbuf.resize(static_cast<std::size_t>(ny()) * ny());
        jac_xz->eval(in, jbuf, s2);
        for (int i = 0; i < ny(); ++i)
            for (int j = 0; j < ny(); ++j) J(i, j) = jbuf[static_cast<std::size_t>(i) * ny() + j];
    }

    void eval_jac_pu(Eigen::MatrixXd& J) {
        int m = np + nu;
        jpubuf.resize(static_cast<std::size_t>(ny()) * m);
        jac_pu->eval(in, jpubuf, s3);
        for (int i = 0; i < ny(); ++i)
            for (int j = 0; j < m; ++j) J(i, j) = jpubuf[static_cast<std::size_t>(i) * m + j];
    }
};

} // namespace

SimContext::SimContext(model::DaeProblem dae) : dae_(std::move(dae)) {
    nx_ = dae_.nx();
    nz_ = dae_.nz();
    np_ = dae_.np();
    nu_ = dae_.nu();

    expr::ExpressionVector args = dae_.x;
    args.insert(args.end(), dae_.z.begin(), dae_.z.end());
    args.insert(args.end(), dae_.p.begin(), dae_.p.end());
    args.insert(args.end(), dae_.u.begin(), dae_.u.end());

    expr::ExpressionVector eqs = dae_.ode;
    eqs.insert(eqs.end(), dae_.alg.begin(), dae_.alg.end());
    rhs_ = expr::CompiledFunction(eqs, args);

    expr::ExpressionVector xz(dae_.x);
    xz.insert(xz.end(), dae_.z.begin(), dae_.z.end());
    expr::ExpressionVector pu(dae_.p);
    pu.insert(pu.end(), dae_.u.begin(), dae_.u.end());

    auto flatten = [](const std::vector<expr::ExpressionVector>& rows) {
        expr::ExpressionVector flat;
        for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
        return flat;
    };
    jac_xz_ = expr::CompiledFunction(flatten(expr::differentiate(eqs, xz)), args);
    if (!pu.empty()) jac_pu_ = expr::CompiledFunction(flatten(expr::differentiate(eqs, pu)), args);
}

std::pair<std::vector<double>, std::vector<double>> SimContext::solve_steady_state(
    std::vector<double> p, std::vector<double> u, std::vector<double> x_guess, std::vector<double> z_guess,
    const IntegrateOptions& opts_in) const {
    if (static_cast<int>(p.size()) != np_ || static_cast<int>(u.size()) != nu_)
        throw ConfigError("solve_steady_state: parameter/control size mismatch");
    if (static_cast<int>(x_guess.size()) != nx_ || static_cast<int>(z_guess.size()) != nz_)
        throw ConfigError("solve_steady_state: guess size mismatch");
    IntegrateOptions opts = opts_in;
    opts.newton_max_iter = std::max(opts.newton_max_iter, 50);

    Work w{&rhs_, &jac_xz_, &jac_pu_, nx_, nz_, np_, nu_, {}, {}, {}, {}, {}, {}, {}};
    int ny = nx_ + nz_;
    Eigen::VectorXd y(ny);
    for (int i = 0; i < nx_; ++i) y[i] = x_guess[i];
    for (int i = 0; i < nz_; ++i) y[nx_ + i] = z_guess[i];

    auto eval_r = [&](const Eigen::VectorXd& yy, Eigen::VectorXd& r) {
        w.pack(yy.head(nx_), yy.tail(nz_), p, u);
        return w.eval_rhs(r);
    };
    auto eval_j = [&](const Eigen::VectorXd& yy, Eigen::MatrixXd& J) {
        w.pack(yy.head(nx_), yy.tail(nz_), p, u);
        w.eval_jac_xz(J);
    };
    damped_newton(y, eval_r, eval_j, opts, "steady state");

    std::vector<double> xs(nx_), zs(nz_);
    for (int i = 0; i < nx_; ++i) xs[i] = y[i];
    for (int i = 0; i < nz_; ++i) zs[i] = y[nx_ + i];
    return {xs, zs};
}

SimContext::SensRun SimContext::simulate_with_sensitivity(const std::vector<double>& t_grid,
                                                          const EventSchedule& schedule, std::vector<double> x0,
                                                          std::vector<double> z0_guess, std::vector<double> p,
                                                          std::vector<double> u,
                                                          const std::vector<SensInput>& inputs,
                                                          const IntegrateOptions& opts) const {
    check_grid(t_grid);
    if (static_cast<int>(x0.size()) != nx_) throw ConfigError("integrate: x0 size mismatch");
    if (static_cast<int>(z0_guess.size()) != nz_) throw ConfigError("integrate: z0 size mismatch");
    if (static_cast<int>(p.size()) != np_) throw ConfigError("integrate: p size mismatch");
    if (static_cast<int>(u.size()) != nu_) throw ConfigError("integrate: u size mismatch");
    for (double v : x0)
        if (!std::isfinite(v)) throw NumericalError("integrate: non-finite initial state");

    EventState es = resolve_schedule(dae_, t_grid, schedule);
    const bool with_sens = !inputs.empty();
    if (opts.dense_output && with_sens)
        throw ConfigError("dense output is not available together with sensitivities");
    const int n_in = static_cast<int>(inputs.size());
    const int ny = nx_ + nz_;
    const int T = static_cast<int>(t_grid.size());
    std::vector<double> dense_t;
    std::vector<Eigen::VectorXd> dense_x, dense_z;

    for (const auto& si : inputs) {
        switch (si.kind) {
        case SensInput::Kind::Param:
            if (si.comp < 0 || si.comp >= np_) throw ConfigError("sensitivity input: parameter index out of range");
            break;
        case SensInput::Kind::Control:
            if (si.comp < 0 || si.comp >= nu_) throw ConfigError("sensitivity input: control index out of range");
            break;
        case SensInput::Kind::InitState:
            if (si.comp >= nx_) throw ConfigError("sensitivity input: state index out of range");
            break;
        case SensInput::Kind::EventValue:
            if (si.series < 0 || si.series >= static_cast<int>(schedule.series.size()))
                throw ConfigError("sensitivity input: event series index out of range");
            if (si.interval < 0 || si.interval + 1 >= static_cast<int>(schedule.times.size()))
                throw ConfigError("sensitivity input: event interval index out of range");
            break;
        }
    }

    Work w{&rhs_, &jac_xz_, &jac_pu_, nx_, nz_, np_, nu_, {}, {}, {}, {}, {}, {}, {}};

    Trajectory traj;
    traj.time = t_grid;
    traj.x.resize(T, nx_);
    traj.z.resize(T, nz_);
    SensRun run;

    Eigen::VectorXd x = Eigen::Map<Eigen::VectorXd>(x0.data(), nx_);
    Eigen::VectorXd z = Eigen::Map<Eigen::VectorXd>(z0_guess.data(), nz_);

    auto event_interval_at = [&](int gi) -> int {
        if (es.grid_of_event.empty()) return -1;
        int k = -1;
        for (std::size_t e = 0; e + 1 < es.grid_of_event.size(); ++e)
            if (es.grid_of_event[e] <= gi) k = static_cast<int>(e);
        return k;
    };

    auto apply_event_values = [&](int k) {
        if (k < 0) return;
        for (std::size_t s = 0; s < es.series.size(); ++s) {
            double v = schedule.series[s].values[k];
            if (es.series[s].is_u)
                u[es.series[s].comp] = v;
            else
                p[es.series[s].comp] = v;
        }
    };

    // Direct-derivative column of [ode; alg] w.r.t. input i under the active
    // event interval, from the p/u Jacobian at the evaluation point.
    auto direct_col = [&](const Eigen::MatrixXd& Jpu, const SensInput& si, int active_k) -> Eigen::VectorXd {
        switch (si.kind) {
        case SensInput::Kind::Param:
            return Jpu.col(si.comp);
        case SensInput::Kind::Control:
            return Jpu.col(np_ + si.comp);
        case SensInput::Kind::InitState:
            break;
        case SensInput::Kind::EventValue:
            if (si.interval == active_k) {
                const auto& rs = es.series[si.series];
                return Jpu.col(rs.is_u ? np_ + rs.comp : rs.comp);
            }
            break;
        }
        return Eigen::VectorXd::Zero(ny);
    };

    auto consistent_z = [&](const std::string& what) {
        if (nz_ == 0) return;
        Eigen::VectorXd zz = z;
        Eigen::VectorXd full(ny);
        auto eval_r = [&](const Eigen::VectorXd& zt, Eigen::VectorXd& r) {
            w.pack(x, zt, p, u);
            if (!w.eval_rhs(full)) return false;
            r = full.tail(nz_);
            return true;
        };
        Eigen::MatrixXd Jfull(ny, ny);
        auto eval_j = [&](const Eigen::VectorXd& zt, Eigen::MatrixXd& J) {
            w.pack(x, zt, p, u);
            w.eval_jac_xz(Jfull);
            J = Jfull.bottomRightCorner(nz_, nz_);
        };
        damped_newton(zz, eval_r, eval_j, opts, what);
        z = zz;
    };

    Eigen::MatrixXd S;
    Eigen::MatrixXd Jxz(ny, ny), Jpu(ny, np_ + nu_);
    if (with_sens) {
        S = Eigen::MatrixXd::Zero(ny, n_in);
        for (int i = 0; i < n_in; ++i)
            if (inputs[i].kind == SensInput::Kind::InitState && inputs[i].comp >= 0) S(inputs[i].comp, i) = 1.0;
    }

    auto consistent_sens_z = [&](int active_k) {
        if (!with_sens || nz_ == 0) return;
        w.pack(x, z, p, u);
        w.eval_jac_xz(Jxz);
        w.eval_jac_pu(Jpu);
        Eigen::MatrixXd Gz = Jxz.bottomRightCorner(nz_, nz_);
        Eigen::MatrixXd Gx = Jxz.bottomLeftCorner(nz_, nx_);
        Eigen::MatrixXd rhs(nz_, n_in);
        for (int i = 0; i < n_in; ++i)
            rhs.col(i) = -(Gx * S.col(i).head(nx_) + direct_col(Jpu, inputs[i], active_k).tail(nz_));
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(Gz);
        Eigen::MatrixXd Sz = lu.solve(rhs);
        if (!Sz.allFinite()) throw NumericalError("sensitivity initialization: singular algebraic Jacobian");
        S.bottomRows(nz_) = Sz;
    };

    int active_k = event_interval_at(0);
    apply_event_values(active_k);
    consistent_z("consistent initialization");
    consistent_sens_z(active_k);

    traj.x.row(0) = x.transpose();
    traj.z.row(0) = z.transpose();
    if (with_sens) run.sens.push_back(S);
    if (opts.dense_output) {
        dense_t.push_back(t_grid[0]);
        dense_x.push_back(x);
        dense_z.push_back(z);
    }

    Eigen::VectorXd f0(ny), f1(ny);
    Eigen::MatrixXd J0xz(ny, ny), J0pu(ny, np_ + nu_);
    Eigen::MatrixXd M(ny, ny);

    for (int gi = 0; gi + 1 < T; ++gi) {
        int k_here = event_interval_at(gi);
        if (k_here != active_k) {
            active_k = k_here;
            apply_event_values(active_k);
            consistent_z("event re-initialization");
            consistent_sens_z(active_k);
            // Event rows store the post-jump point.
            traj.x.row(gi) = x.transpose();
            traj.z.row(gi) = z.transpose();
            if (with_sens) run.sens[gi] = S;
            if (opts.dense_output) {
                dense_x.back() = x;
                dense_z.back() = z;
            }
        }

        double ta = t_grid[gi], tb = t_grid[gi + 1];
        double span = tb - ta;
        double h_max = opts.h_max > 0 ? opts.h_max : span / 4.0;
        int nsub = std::max(1, static_cast<int>(std::ceil(span / h_max - kGridTol)));
        double h = span / nsub;

        for (int sub = 0; sub < nsub; ++sub) {
            w.pack(x, z, p, u);
            if (!w.eval_rhs(f0))
                throw NumericalError("integrate: right-hand side not evaluable at t=" + csv::format(ta + sub * h));
            if (with_sens) {
                w.eval_jac_xz(J0xz);
                w.eval_jac_pu(J0pu);
            }

            Eigen::VectorXd y1(ny);
            y1.head(nx_) = x + h * f0.head(nx_); // explicit predictor
            y1.tail(nz_) = z;

            auto eval_r = [&](const Eigen::VectorXd& yy, Eigen::VectorXd& r) {
                w.pack(yy.head(nx_), yy.tail(nz_), p, u);
                if (!w.eval_rhs(f1)) return false;
                r.head(nx_) = yy.head(nx_) - x - 0.5 * h * (f0.head(nx_) + f1.head(nx_));
                r.tail(nz_) = f1.tail(nz_);
                return true;
            };
            auto eval_j = [&](const Eigen::VectorXd& yy, Eigen::MatrixXd& J) {
                w.pack(yy.head(nx_), yy.tail(nz_), p, u);
                w.eval_jac_xz(Jxz);
                J.topLeftCorner(nx_, nx_) =
                    Eigen::MatrixXd::Identity(nx_, nx_) - 0.5 * h * Jxz.topLeftCorner(nx_, nx_);
                J.topRightCorner(nx_, nz_) = -0.5 * h * Jxz.topRightCorner(nx_, nz_);
                J.bottomRows(nz_) = Jxz.bottomRows(nz_);
            };
            damped_newton(y1, eval_r, eval_j, opts, "integrate step t=" + csv::format(ta + sub * h));

            if (with_sens) {
                w.pack(y1.head(nx_), y1.tail(nz_), p, u);
                w.eval_jac_xz(Jxz);
                w.eval_jac_pu(Jpu);
                M.topLeftCorner(nx_, nx_) =
                    Eigen::MatrixXd::Identity(nx_, nx_) - 0.5 * h * Jxz.topLeftCorner(nx_, nx_);
                M.topRightCorner(nx_, nz_) = -0.5 * h * Jxz.topRightCorner(nx_, nz_);
                M.bottomRows(nz_) = Jxz.bottomRows(nz_);
                Eigen::PartialPivLU<Eigen::MatrixXd> lu(M);

                Eigen::MatrixXd rhs(ny, n_in);
                for (int i = 0; i < n_in; ++i) {
                    Eigen::VectorXd sx = S.col(i).head(nx_);
                    Eigen::VectorXd sz = S.col(i).tail(nz_);
                    Eigen::VectorXd b0 = direct_col(J0pu, inputs[i], active_k);
                    Eigen::VectorXd b1 = direct_col(Jpu, inputs[i], active_k);
                    rhs.col(i).head(nx_) =
                        sx + 0.5 * h *
                                 (J0xz.topLeftCorner(nx_, nx_) * sx + J0xz.topRightCorner(nx_, nz_) * sz +
                                  b0.head(nx_) + b1.head(nx_));
                    rhs.col(i).tail(nz_) = -b1.tail(nz_);
                }
                S = lu.solve(rhs);
                if (!S.allFinite()) throw NumericalError("sensitivity propagation: non-finite sensitivities");
            }

            x = y1.head(nx_);
            z = y1.tail(nz_);
            if (opts.dense_output) {
                dense_t.push_back(sub + 1 == nsub ? tb : ta + (sub + 1) * h);
                dense_x.push_back(x);
                dense_z.push_back(z);
            }
        }
        traj.x.row(gi + 1) = x.transpose();
        traj.z.row(gi + 1) = z.transpose();
        if (with_sens) run.sens.push_back(S);
    }

    if (opts.dense_output) {
        Trajectory dense;
        dense.time = dense_t;
        dense.x.resize(static_cast<Eigen::Index>(dense_t.size()), nx_);
        dense.z.resize(static_cast<Eigen::Index>(dense_t.size()), nz_);
        for (std::size_t r = 0; r < dense_t.size(); ++r) {
            dense.x.row(static_cast<Eigen::Index>(r)) = dense_x[r].transpose();
            dense.z.row(static_cast<Eigen::Index>(r)) = dense_z[r].transpose();
        }
        run.traj = std::move(dense);
        return run;
    }

    run.traj = std::move(traj);
    return run;
}

Trajectory SimContext::simulate_with_events(const std::vector<double>& t_grid, const EventSchedule& schedule,
                                            std::vector<double> x0, std::vector<double> z0_guess,
                                            std::vector<double> p, std::vector<double> u,
                                            const IntegrateOptions& opts) const {
    return simulate_with_sensitivity(t_grid, schedule, std::move(x0), std::move(z0_guess), std::move(p),
                                     std::move(u), {}, opts)
        .traj;
}

Trajectory SimContext::integrate(const std::vector<double>& t_grid, std::vector<double> x0,
                                 std::vector<double> z0_guess, std::vector<double> p, std::vector<double> u,
                                 const IntegrateOptions& opts) const {
    return simulate_with_events(t_grid, EventSchedule{}, std::move(x0), std::move(z0_guess), std::move(p),
                                std::move(u), opts);
}

QssResult simulate_qss(const QssSystem& env, const QssSystem& fast, const QssCoupling& coupling,
                       const std::vector<double>& t_grid, const QssOptions& opts) {
    check_grid(t_grid);
    if (!env.ctx || !fast.ctx) throw ConfigError("simulate_qss: missing simulation contexts");
    const auto& env_dae = env.ctx->dae();
    const auto& fast_dae = fast.ctx->dae();
    const int T = static_cast<int>(t_grid.size());

    struct ResolvedLink {
        model::VarKind src_kind;
        int src_pos;
        bool tgt_is_u;
        int tgt_pos;
    };
    auto resolve_links = [](const model::DaeProblem& src_dae, const model::DaeProblem& tgt_dae,
                            const std::vector<QssCoupling::Link>& links, const char* side) {
        std::vector<ResolvedLink> out;
        for (const auto& l : links) {
            auto src = src_dae.try_find(l.source);
            if (!src)
                throw ConfigError(std::string("qss coupling (") + side + "): source '" + l.source.str() +
                                  "' not found");
            if (src->kind != model::VarKind::X && src->kind != model::VarKind::Z)
                throw ConfigError(std::string("qss coupling (") + side + "): source '" + l.source.str() +
                                  "' must be a differential or algebraic state");
            auto tgt = tgt_dae.try_find(l.target);
            if (!tgt)
                throw ConfigError(std::string("qss coupling (") + side + "): target '" + l.target.str() +
                                  "' not found");
            if (tgt->kind != model::VarKind::P && tgt->kind != model::VarKind::U)
                throw ConfigError(std::string("qss coupling (") + side + "): target '" + l.target.str() +
                                  "' must be a parameter or control component");
            out.push_back({src->kind, src->pos, tgt->kind == model::VarKind::U, tgt->pos});
        }
        return out;
    };
    auto drive = resolve_links(env_dae, fast_dae, coupling.env_to_fast, "env->fast");
    auto feedback = resolve_links(fast_dae, env_dae, coupling.fast_to_env, "fast->env");
    if (feedback.empty()) throw ConfigError("simulate_qss: no fast->env coupling given");
    const int n_fb = static_cast<int>(feedback.size());

    Eigen::MatrixXd table;
    bool have_table = false;
    int sweeps = 0;
    double delta = std::numeric_limits<double>::infinity();

    auto env_schedule = [&]() {
        EventSchedule s;
        if (!have_table) return s;
        s.times = t_grid;
        for (int c = 0; c < n_fb; ++c) {
            EventSchedule::Series series;
            series.name = feedback[c].tgt_is_u ? env_dae.u_names[feedback[c].tgt_pos]
                                               : env_dae.p_names[feedback[c].tgt_pos];
            series.values.resize(T - 1);
            for (int k = 0; k < T - 1; ++k) series.values[k] = table(k, c);
            s.series.push_back(std::move(series));
        }
        return s;
    };

    auto run_env = [&](const char* phase) {
        try {
            return env.ctx->simulate_with_events(t_grid, env_schedule(), env.x0, env.z0, env.p, env.u, opts.env);
        } catch (const std::exception& e) {
            throw NumericalError(std::string("qss phase (") + phase + ") failed: " + e.what());
        }
    };

    // Per-grid-point steady-state solutions, kept across sweeps for warm starts.
    std::vector<std::vector<double>> sol_x(T, fast.x0), sol_z(T, fast.z0);
    bool have_solutions = false;

    while (sweeps < opts.max_sweeps) {
        ++sweeps;
        Trajectory env_traj = run_env("i");

        Eigen::MatrixXd new_table(T, n_fb);
        std::vector<std::string> failures(T);
        std::vector<char> failed(T, 0);
        auto solve_point = [&](int n, const std::vector<double>& xg, const std::vector<double>& zg) {
            std::vector<double> fp = fast.p, fu = fast.u;
            for (const auto& l : drive) {
                double v = l.src_kind == model::VarKind::X ? env_traj.x(n, l.src_pos) : env_traj.z(n, l.src_pos);
                if (l.tgt_is_u)
                    fu[l.tgt_pos] = v;
                else
                    fp[l.tgt_pos] = v;
            }
            auto [xs, zs] = fast.ctx->solve_steady_state(fp, fu, xg, zg, opts.fast);
            sol_x[n] = xs;
            sol_z[n] = zs;
            for (int c = 0; c < n_fb; ++c)
                new_table(n, c) =
                    feedback[c].src_kind == model::VarKind::X ? xs[feedback[c].src_pos] : zs[feedback[c].src_pos];
        };

        auto attempt = [&](int n) {
            try {
                solve_point(n, have_solutions ? sol_x[n] : fast.x0, have_solutions ? sol_z[n] : fast.z0);
            } catch (const std::exception& e) {
                failed[n] = 1;
                failures[n] = e.what();
            }
        };
        if (opts.parallel)
            parallel::parallel_for(T, attempt);
        else
            for (int n = 0; n < T; ++n) attempt(n);

        for (int n = 0; n < T; ++n) {
            if (!failed[n]) continue;
            int prev = n - 1;
            while (prev >= 0 && failed[prev]) --prev;
            try {
                solve_point(n, prev >= 0 ? sol_x[prev] : fast.x0, prev >= 0 ? sol_z[prev] : fast.z0);
                failed[n] = 0;
            } catch (const std::exception&) {
                throw NumericalError("qss phase (ii) failed at time index " + std::to_string(n) + ": " +
                                     failures[n]);
            }
        }
        have_solutions = true;

        delta = have_table ? (new_table - table).cwiseAbs().maxCoeff() : std::numeric_limits<double>::infinity();
        table = std::move(new_table);
        have_table = true;
        if (delta <= opts.table_tol) break;
    }

    QssResult result;
    result.traj = run_env("iii");
    result.fast_table = table;
    result.sweeps = sweeps;
    result.final_delta = delta;
    return result;
}

Eigen::MatrixXd applied_u_rows(const model::DaeProblem& dae, const std::vector<double>& t_grid,
                               const EventSchedule& schedule, const std::vector<double>& u) {
    const int T = static_cast<int>(t_grid.size());
    Eigen::MatrixXd rows(T, dae.nu());
    for (int i = 0; i < dae.nu(); ++i) rows.col(i).setConstant(u[i]);
    for (const auto& series : schedule.series) {
        auto loc = dae.find(series.name);
        if (loc.kind != model::VarKind::U) continue;
        for (int r = 0; r < T; ++r) {
            int k = -1;
            for (std::size_t e = 0; e + 1 < schedule.times.size(); ++e)
                if (schedule.times[e] <= t_grid[r] + kGridTol) k = static_cast<int>(e);
            if (k >= 0) rows(r, loc.pos) = series.values[k];
        }
    }
    return rows;
}

void export_trajectory_csv(const std::filesystem::path& path, const model::DaeProblem& dae, const Trajectory& traj,
                           const Eigen::MatrixXd* u_rows) {
    csv::Writer out(path);
    std::vector<std::string> header{"time"};
    for (const auto& n : dae.x_names) header.push_back(n.str());
    for (const auto& n : dae.z_names) header.push_back(n.str());
    if (u_rows)
        for (const auto& n : dae.u_names) header.push_back(n.str());
    out.row(header);
    for (std::size_t r = 0; r < traj.time.size(); ++r) {
        std::vector<std::string> row{csv::format(traj.time[r])};
        for (int c = 0; c < traj.x.cols(); ++c) row.push_back(csv::format(traj.x(static_cast<int>(r), c)));
        for (int c = 0; c < traj.z.cols(); ++c) row.push_back(csv::format(traj.z(static_cast<int>(r), c)));
        if (u_rows)
            for (int c = 0; c < u_rows->cols(); ++c) row.push_back(csv::format((*u_rows)(static_cast<int>(r), c)));
        out.row(row);
    }
}

namespace {
std::atomic<std::uint64_t> g_handle_uid{0};
}

SymbolicSimulation::SymbolicSimulation(std::shared_ptr<const SimContext> ctx, Config cfg)
    : ctx_(std::move(ctx)), cfg_(std::move(cfg)) {
    check_grid(cfg_.t_grid);
    handle_prefix_ = "@h" + std::to_string(g_handle_uid.fetch_add(1)) + ":";

    const auto& dae = ctx_->dae();
    if (static_cast<int>(cfg_.x0.size()) != dae.nx() || static_cast<int>(cfg_.z0.size()) != dae.nz() ||
        static_cast<int>(cfg_.p.size()) != dae.np() || static_cast<int>(cfg_.u.size()) != dae.nu())
        throw ConfigError("symbolic simulation: base value dimensions do not match the problem");

    auto register_input = [&](const expr::Expression& sym, Placement pl) {
        if (!sym.is_symbol()) throw ConfigError("symbolic simulation inputs must be symbols");
        auto it = input_pos_.find(sym.symbol_id());
        int pos;
        if (it == input_pos_.end()) {
            pos = static_cast<int>(inputs_.size());
            inputs_.push_back(sym);
            input_pos_[sym.symbol_id()] = pos;
            placements_.emplace_back();
        } else {
            pos = it->second;
        }
        placements_[pos].push_back(pl);
    };

    auto slot = [&](const Config::SlotSymbol& s, model::VarKind want, SensInput::Kind kind) {
        auto loc = dae.find(s.name);
        if (loc.kind != want)
            throw ConfigError("symbolic simulation: '" + s.name.str() + "' is not a " + model::kind_name(want) +
                              " component");
        register_input(s.symbol, Placement{kind, loc.pos, -1, -1});
    };
    for (const auto& s : cfg_.p_symbols) slot(s, model::VarKind::P, SensInput::Kind::Param);
    for (const auto& s : cfg_.u_symbols) slot(s, model::VarKind::U, SensInput::Kind::Control);
    for (const auto& s : cfg_.x0_symbols) slot(s, model::VarKind::X, SensInput::Kind::InitState);
    for (const auto& s : cfg_.z0_symbols) {
        auto loc = dae.find(s.name);
        if (loc.kind != model::VarKind::Z)
            throw ConfigError("symbolic simulation: '" + s.name.str() + "' is not a z component");
        // Algebraic initial values are consistency-solve guesses: realized into
        // the run but carrying no sensitivity (encoded as negative comp).
        register_input(s.symbol, Placement{SensInput::Kind::InitState, -1 - loc.pos, -1, -1});
    }

    if (!cfg_.symbol_series.empty() && cfg_.base_events.times.empty()) cfg_.base_events.times = cfg_.t_grid;
    int n_intervals = cfg_.base_events.times.empty() ? 0 : static_cast<int>(cfg_.base_events.times.size()) - 1;
    int series_offset = static_cast<int>(cfg_.base_events.series.size());
    for (std::size_t s = 0; s < cfg_.symbol_series.size(); ++s) {
        const auto& ss = cfg_.symbol_series[s];
        if (static_cast<int>(ss.symbols.size()) != n_intervals)
            throw ConfigError("symbol series '" + ss.name.str() + "' must have one entry per event interval");
        if (ss.fallback.size() != ss.symbols.size())
            throw ConfigError("symbol series '" + ss.name.str() + "' fallback length mismatch");
        for (int k = 0; k < n_intervals; ++k)
            if (ss.symbols[k])
                register_input(*ss.symbols[k],
                               Placement{SensInput::Kind::EventValue, -1, series_offset + static_cast<int>(s), k});
    }
}

SymbolicSimulation::Realized SymbolicSimulation::realize(std::span<const double> inputs) const {
    if (static_cast<int>(inputs.size()) != n_inputs())
        throw ConfigError("symbolic simulation: expected " + std::to_string(n_inputs()) + " inputs, got " +
                          std::to_string(inputs.size()));
    Realized r{cfg_.x0, cfg_.z0, cfg_.p, cfg_.u, cfg_.base_events};
    int n_intervals = cfg_.base_events.times.empty() ? 0 : static_cast<int>(cfg_.base_events.times.size()) - 1;
    for (const auto& ss : cfg_.symbol_series) {
        EventSchedule::Series series;
        series.name = ss.name;
        series.values = ss.fallback;
        series.values.resize(n_intervals);
        r.events.series.push_back(std::move(series));
    }
    for (std::size_t i = 0; i < placements_.size(); ++i) {
        for (const auto& pl : placements_[i]) {
            double v = inputs[i];
            switch (pl.kind) {
            case SensInput::Kind::Param:
                r.p[pl.comp] = v;
                break;
            case SensInput::Kind::Control:
                r.u[pl.comp] = v;
                break;
            case SensInput::Kind::InitState:
                if (pl.comp >= 0)
                    r.x0[pl.comp] = v;
                else
                    r.z0[-1 - pl.comp] = v;
                break;
            case SensInput::Kind::EventValue:
                r.events.series[pl.series].values[pl.interval] = v;
                break;
            }
        }
    }
    return r;
}

std::vector<SensInput> SymbolicSimulation::sens_inputs() const {
    std::vector<SensInput> out;
    for (const auto& pls : placements_)
        for (const auto& pl : pls) {
            SensInput si;
            si.kind = pl.kind;
            si.comp = pl.comp;
            si.series = pl.series;
            si.interval = pl.interval;
            out.push_back(si);
        }
    return out;
}

expr::Expression SymbolicSimulation::handle(const model::AbsName& name, int idx) const {
    const auto& dae = ctx_->dae();
    auto loc = dae.find(name);
    if (loc.kind != model::VarKind::X && loc.kind != model::VarKind::Z)
        throw ConfigError("output handle '" + name.str() + "' must be a differential or algebraic state");
    int T = static_cast<int>(cfg_.t_grid.size());
    if (idx == -1) idx = T - 1;
    if (idx < 0 || idx >= T) throw ConfigError("output handle time index out of range for '" + name.str() + "'");
    std::string sym_name = handle_prefix_ + name.str() + "@" + std::to_string(idx);
    auto sym = expr::make_symbol(sym_name);
    std::scoped_lock lock(cache_mu_);
    handle_infos_.emplace(sym_name, HandleInfo{name, idx});
    return sym;
}

expr::Expression SymbolicSimulation::final_handle(const model::AbsName& name) const { return handle(name, -1); }

int SymbolicSimulation::time_index(double t) const {
    for (std::size_t i = 0; i < cfg_.t_grid.size(); ++i)
        if (near(cfg_.t_grid[i], t)) return static_cast<int>(i);
    throw ConfigError("time " + csv::format(t) + " is not on the simulation grid");
}

const SymbolicSimulation::HandleInfo* SymbolicSimulation::find_handle(const expr::Expression& sym) const {
    if (!sym.is_symbol()) return nullptr;
    std::scoped_lock lock(cache_mu_);
    auto it = handle_infos_.find(sym.symbol_name());
    return it == handle_infos_.end() ? nullptr : &it->second;
}

Trajectory SymbolicSimulation::run(std::span<const double> inputs, const IntegrateOptions* opts_override) const {
    {
        std::scoped_lock lock(cache_mu_);
        if (!opts_override && cache_traj_ && cache_key_.size() == inputs.size() &&
            std::equal(cache_key_.begin(), cache_key_.end(), inputs.begin()))
            return *cache_traj_;
    }
    Realized r = realize(inputs);
    Trajectory traj = ctx_->simulate_with_events(cfg_.t_grid, r.events, r.x0, r.z0, r.p, r.u,
                                                 opts_override ? *opts_override : cfg_.opts);
    if (!opts_override) {
        std::scoped_lock lock(cache_mu_);
        cache_key_.assign(inputs.begin(), inputs.end());
        cache_traj_ = traj;
    }
    return traj;
}

Eigen::VectorXd SymbolicSimulation::handle_values(std::span<const double> inputs,
                                                  const std::vector<HandleInfo>& handles) const {
    Trajectory traj = run(inputs);
    const auto& dae = ctx_->dae();
    Eigen::VectorXd out(static_cast<Eigen::Index>(handles.size()));
    for (std::size_t i = 0; i < handles.size(); ++i) {
        auto loc = dae.find(handles[i].name);
        out[static_cast<Eigen::Index>(i)] = loc.kind == model::VarKind::X
                                                ? traj.x(handles[i].time_index, loc.pos)
                                                : traj.z(handles[i].time_index, loc.pos);
    }
    return out;
}

Eigen::MatrixXd SymbolicSimulation::handle_jacobian(std::span<const double> inputs,
                                                    const std::vector<HandleInfo>& handles,
                                                    const IntegrateOptions* opts_override) const {
    Realized r = realize(inputs);
    auto per_placement = sens_inputs();
    auto run = ctx_->simulate_with_sensitivity(cfg_.t_grid, r.events, r.x0, r.z0, r.p, r.u, per_placement,
                                               opts_override ? *opts_override : cfg_.opts);
    const auto& dae = ctx_->dae();
    const int nx = dae.nx();
    Eigen::MatrixXd J(static_cast<Eigen::Index>(handles.size()), n_inputs());
    J.setZero();
    for (std::size_t hi = 0; hi < handles.size(); ++hi) {
        auto loc = dae.find(handles[hi].name);
        int row = loc.kind == model::VarKind::X ? loc.pos : nx + loc.pos;
        const Eigen::MatrixXd& S = run.sens.at(handles[hi].time_index);
        int col = 0;
        for (std::size_t i = 0; i < placements_.size(); ++i) {
            double sum = 0.0;
            for (std::size_t pp = 0; pp < placements_[i].size(); ++pp) sum += S(row, col + static_cast<int>(pp));
            J(static_cast<Eigen::Index>(hi), static_cast<int>(i)) = sum;
            col += static_cast<int>(placements_[i].size());
        }
    }
    return J;
}

std::vector<double> SymbolicSimulation::input_guess() const {
    std::vector<double> guess(n_inputs(), 0.0);
    for (std::size_t i = 0; i < placements_.size(); ++i) {
        const auto& pl = placements_[i].front();
        switch (pl.kind) {
        case SensInput::Kind::Param:
            guess[i] = cfg_.p[pl.comp];
            break;
        case SensInput::Kind::Control:
            guess[i] = cfg_.u[pl.comp];
            break;
        case SensInput::Kind::InitState:
            guess[i] = pl.comp >= 0 ? cfg_.x0[pl.comp] : cfg_.z0[-1 - pl.comp];
            break;
        case SensInput::Kind::EventValue:
            guess[i] =
                cfg_.symbol_series[pl.series - static_cast<int>(cfg_.base_events.series.size())].fallback[pl.interval];
            break;
        }
    }
    return guess;
}

} // namespace eoc::sim
