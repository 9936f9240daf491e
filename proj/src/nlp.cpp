#include "eoc/nlp.hpp"

#include <cmath>
#include <limits>

#include "eoc/csv.hpp"
#include "eoc/errors.hpp"
#include "eoc/parallel.hpp"

namespace eoc::nlp {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

std::string status_name(SolveStatus s) {
    switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::MaxIter: return "max_iter";
    case SolveStatus::InfeasibleQp: return "infeasible_qp";
    case SolveStatus::LinesearchFail: return "linesearch_fail";
    case SolveStatus::EvalFail: return "eval_fail";
    }
    return "?";
}

namespace {

// Dual active-set method for strictly convex QP (Goldfarb & Idnani 1983),
// on the normalized form
//   min 1/2 x'Gx + g0'x  s.t.  CE'x + ce0 = 0,  CI'x + ci0 >= 0.
struct GiSolver {
    int n;
    Eigen::MatrixXd J, R;
    Eigen::VectorXd d, z, r, u, x, np;
    std::vector<int> A; // active one-sided constraint ids; equalities are -i-1
    int iq = 0;
    double R_norm = 1.0;
    double f_value = 0.0;

    void compute_d(const Eigen::VectorXd& normal) { d = J.transpose() * normal; }

    void update_z() {
        z.setZero(n);
        for (int j = iq; j < n; ++j) z += J.col(j) * d[j];
    }

    void update_r() {
        r.head(iq).setZero();
        for (int i = iq - 1; i >= 0; --i) {
            double sum = d[i];
            for (int k = i + 1; k < iq; ++k) sum -= R(i, k) * r[k];
            r[i] = sum / R(i, i);
        }
    }

    static double distance(double a, double b) {
        double a1 = std::abs(a), b1 = std::abs(b);
        if (a1 > b1) {
            double t = b1 / a1;
            return a1 * std::sqrt(1.0 + t * t);
        }
        if (b1 > a1) {
            double t = a1 / b1;
            return b1 * std::sqrt(1.0 + t * t);
        }
        return a1 * std::sqrt(2.0);
    }

    bool add_constraint() {
        // Givens rotations zero d[iq+1..n-1] into d[iq]; J is updated alongside.
        for (int j = n - 1; j >= iq + 1; --j) {
            double cc = d[j - 1], ss = d[j];
            double h = distance(cc, ss);
            if (h == 0.0) continue;
            d[j] = 0.0;
            ss /= h;
            cc /= h;
            if (cc < 0.0) {
                cc = -cc;
                ss = -ss;
                d[j - 1] = -h;
            } else {
                d[j - 1] = h;
            }
            double xny = ss / (1.0 + cc);
            for (int k = 0; k < n; ++k) {
                double t1 = J(k, j - 1), t2 = J(k, j);
                J(k, j - 1) = t1 * cc + t2 * ss;
                J(k, j) = xny * (t1 + J(k, j - 1)) - t2;
            }
        }
        ++iq;
        for (int i = 0; i < iq; ++i) R(i, iq - 1) = d[i];
        if (std::abs(d[iq - 1]) <= std::numeric_limits<double>::epsilon() * R_norm) return false;
        R_norm = std::max(R_norm, std::abs(d[iq - 1]));
        return true;
    }

    void delete_constraint(int l, int n_eq) {
        int qq = -1;
        for (int i = n_eq; i < iq; ++i)
            if (A[i] == l) {
                qq = i;
                break;
            }
        for (int i = qq; i < iq - 1; ++i) {
            A[i] = A[i + 1];
            u[i] = u[i + 1];
            for (int j = 0; j < n; ++j) R(j, i) = R(j, i + 1);
        }
        A[iq - 1] = A[iq];
        u[iq - 1] = u[iq];
        A[iq] = 0;
        u[iq] = 0.0;
        for (int j = 0; j < iq; ++j) R(j, iq - 1) = 0.0;
        --iq;
        if (iq == 0) return;
        for (int j = qq; j < iq; ++j) {
            double cc = R(j, j), ss = R(j + 1, j);
            double h = distance(cc, ss);
            if (h == 0.0) continue;
            cc /= h;
            ss /= h;
            R(j + 1, j) = 0.0;
            if (cc < 0.0) {
                R(j, j) = -h;
                cc = -cc;
                ss = -ss;
            } else {
                R(j, j) = h;
            }
            double xny = ss / (1.0 + cc);
            for (int k = j + 1; k < iq; ++k) {
                double t1 = R(j, k), t2 = R(j + 1, k);
                R(j, k) = t1 * cc + t2 * ss;
                R(j + 1, k) = xny * (t1 + R(j, k)) - t2;
            }
            for (int k = 0; k < n; ++k) {
                double t1 = J(k, j), t2 = J(k, j + 1);
                J(k, j) = t1 * cc + t2 * ss;
                J(k, j + 1) = xny * (J(k, j) + t1) - t2;
            }
        }
    }
};

// One-sided constraint: normal'x + c0 >= 0 (or == 0 for equalities).
struct OneSided {
    Eigen::VectorXd normal;
    double c0;
    bool is_eq;
    int row;   // source row index, or -1 for a variable bound
    int var;   // source variable index for bounds, else -1
    int side;  // +1 upper, -1 lower, 0 equality
};

} // namespace

QpResult qp_solve(const Eigen::MatrixXd& H, const Eigen::VectorXd& c, const Eigen::MatrixXd& A,
                  const Eigen::VectorXd& rl, const Eigen::VectorXd& ru, const Eigen::VectorXd& dl,
                  const Eigen::VectorXd& du, const Eigen::VectorXd& /*d0*/, double /*tol*/, int max_iter) {
    const int n = static_cast<int>(H.rows());
    const int n_rows = static_cast<int>(A.rows());
    if (H.cols() != n || c.size() != n) throw ConfigError("qp_solve: H/c dimensions disagree");
    if (n_rows > 0 && A.cols() != n) throw ConfigError("qp_solve: A column count mismatch");

    std::vector<OneSided> cons;
    for (int i = 0; i < n_rows; ++i) {
        if (rl[i] == ru[i]) {
            cons.push_back({A.row(i).transpose(), -rl[i], true, i, -1, 0});
        } else {
            if (rl[i] > ru[i]) throw ConfigError("qp_solve: row lower bound exceeds upper bound");
            if (std::isfinite(rl[i])) cons.push_back({A.row(i).transpose(), -rl[i], false, i, -1, -1});
            if (std::isfinite(ru[i])) cons.push_back({-A.row(i).transpose(), ru[i], false, i, -1, +1});
        }
    }
    for (int j = 0; j < n; ++j) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
        if (dl.size() == n && du.size() == n && dl[j] == du[j]) {
            e[j] = 1.0;
            cons.push_back({e, -dl[j], true, -1, j, 0});
            continue;
        }
        if (dl.size() == n && std::isfinite(dl[j])) {
            e[j] = 1.0;
            cons.push_back({e, -dl[j], false, -1, j, -1});
        }
        if (du.size() == n && std::isfinite(du[j])) {
            Eigen::VectorXd eu = Eigen::VectorXd::Zero(n);
            eu[j] = -1.0;
            cons.push_back({eu, du[j], false, -1, j, +1});
        }
    }
    // equalities first
    std::stable_sort(cons.begin(), cons.end(), [](const OneSided& a, const OneSided& b) {
        return a.is_eq && !b.is_eq;
    });
    int n_eq = 0;
    for (const auto& cc : cons)
        if (cc.is_eq) ++n_eq;
    const int m_total = static_cast<int>(cons.size());
    if (max_iter <= 0) max_iter = 10 * (n + m_total) + 100;

    QpResult result;
    result.lambda_rows = Eigen::VectorXd::Zero(n_rows);
    result.lambda_bounds = Eigen::VectorXd::Zero(n);

    GiSolver S;
    S.n = n;
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success) throw ConfigError("qp_solve: H is not positive definite");
    S.J = llt.matrixL().transpose().solve(Eigen::MatrixXd::Identity(n, n)); // L^{-T}
    S.R = Eigen::MatrixXd::Zero(n, n);
    S.d.setZero(n);
    S.z.setZero(n);
    S.r.setZero(m_total + 1);
    S.u.setZero(m_total + 1);
    S.A.assign(m_total + 1, 0);
    S.x = -llt.solve(c);
    S.f_value = 0.5 * c.dot(S.x);

    int iterations = 0;

    // Equality phase.
    for (int i = 0; i < n_eq; ++i) {
        S.np = cons[i].normal;
        S.compute_d(S.np);
        S.update_z();
        S.update_r();
        double t2 = 0.0;
        if (S.z.squaredNorm() > 1e-30) t2 = (-S.np.dot(S.x) - cons[i].c0) / S.z.dot(S.np);
        S.x += t2 * S.z;
        S.u[S.iq] = t2;
        for (int k = 0; k < S.iq; ++k) S.u[k] -= t2 * S.r[k];
        S.f_value += 0.5 * t2 * t2 * S.z.dot(S.np);
        S.A[S.iq] = -i - 1;
        if (!S.add_constraint()) {
            // dependent equality: acceptable only when already satisfied
            if (std::abs(S.np.dot(S.x) + cons[i].c0) > 1e-9) {
                result.feasible = false;
                return result;
            }
        }
    }

    std::vector<double> s(m_total, 0.0);
    std::vector<char> excluded(m_total, 0);

    for (;;) {
        if (++iterations > max_iter) throw NumericalError("qp_solve: iteration limit exceeded");

        // most violated inactive inequality
        int ip = -1;
        double ss = 0.0;
        for (int i = n_eq; i < m_total; ++i) {
            bool active = false;
            for (int k = n_eq; k < S.iq; ++k)
                if (S.A[k] == i) {
                    active = true;
                    break;
                }
            s[i] = active ? 0.0 : cons[i].normal.dot(S.x) + cons[i].c0;
            if (!active && !excluded[i] && s[i] < ss - 1e-13) {
                ss = s[i];
                ip = i;
            }
        }
        if (ip < 0 || ss >= -1e-11 * std::max(1.0, S.x.lpNorm<Eigen::Infinity>())) break; // feasible: done

        S.u[S.iq] = 0.0;
        S.A[S.iq] = ip;
        S.np = cons[ip].normal;

        for (;;) {
            if (++iterations > max_iter) throw NumericalError("qp_solve: iteration limit exceeded");
            S.compute_d(S.np);
            S.update_z();
            S.update_r();

            double t1 = kInf;
            int l = -1;
            for (int k = n_eq; k < S.iq; ++k) {
                if (S.r[k] > 0.0 && S.A[k] >= 0) {
                    double ratio = S.u[k] / S.r[k];
                    if (ratio < t1) {
                        t1 = ratio;
                        l = S.A[k];
                    }
                }
            }
            double ztnp = S.z.dot(S.np);
            double t2 = (S.z.squaredNorm() > 1e-30 && ztnp > 0.0) ? -s[ip] / ztnp : kInf;
            double t = std::min(t1, t2);

            if (!std::isfinite(t)) {
                result.feasible = false; // dual unbounded: primal infeasible
                result.iterations = iterations;
                return result;
            }

            if (!std::isfinite(t2)) { // dual step only
                for (int k = 0; k < S.iq; ++k) S.u[k] -= t * S.r[k];
                S.u[S.iq] += t;
                S.delete_constraint(l, n_eq);
                s[ip] = cons[ip].normal.dot(S.x) + cons[ip].c0;
                continue;
            }

            S.x += t * S.z;
            S.f_value += t * ztnp * (0.5 * t + S.u[S.iq]);
            for (int k = 0; k < S.iq; ++k) S.u[k] -= t * S.r[k];
            S.u[S.iq] += t;

            if (std::abs(t - t2) < 1e-14 * std::max(1.0, std::abs(t))) { // full step: activate ip
                if (!S.add_constraint()) {
                    // numerically dependent; drop it from consideration
                    excluded[ip] = 1;
                    S.delete_constraint(ip, n_eq);
                }
                break;
            }
            // partial step: deactivate the blocking constraint and retry
            S.delete_constraint(l, n_eq);
            s[ip] = cons[ip].normal.dot(S.x) + cons[ip].c0;
        }
    }

    result.feasible = true;
    result.d = S.x;
    result.iterations = iterations;
    for (int k = 0; k < S.iq; ++k) {
        int id = S.A[k];
        const OneSided& cc = id < 0 ? cons[-id - 1] : cons[id];
        double mult = S.u[k];
        double lambda = cc.is_eq ? -mult : (cc.side > 0 ? mult : -mult);
        if (cc.row >= 0)
            result.lambda_rows[cc.row] += lambda;
        else
            result.lambda_bounds[cc.var] += lambda;
    }
    return result;
}

namespace {

double violation(const Eigen::VectorXd& g, const Eigen::VectorXd& gl, const Eigen::VectorXd& gu,
                 const Eigen::VectorXd& w, const Eigen::VectorXd& wl, const Eigen::VectorXd& wu) {
    double v = 0.0;
    for (int i = 0; i < g.size(); ++i) {
        if (std::isfinite(gl[i])) v += std::max(0.0, gl[i] - g[i]);
        if (std::isfinite(gu[i])) v += std::max(0.0, g[i] - gu[i]);
    }
    for (int i = 0; i < w.size(); ++i) {
        if (std::isfinite(wl[i])) v += std::max(0.0, wl[i] - w[i]);
        if (std::isfinite(wu[i])) v += std::max(0.0, w[i] - wu[i]);
    }
    return v;
}

double max_violation(const Eigen::VectorXd& g, const Eigen::VectorXd& gl, const Eigen::VectorXd& gu,
                     const Eigen::VectorXd& w, const Eigen::VectorXd& wl, const Eigen::VectorXd& wu) {
    double v = 0.0;
    for (int i = 0; i < g.size(); ++i) {
        if (std::isfinite(gl[i])) v = std::max(v, gl[i] - g[i]);
        if (std::isfinite(gu[i])) v = std::max(v, g[i] - gu[i]);
    }
    for (int i = 0; i < w.size(); ++i) {
        if (std::isfinite(wl[i])) v = std::max(v, wl[i] - w[i]);
        if (std::isfinite(wu[i])) v = std::max(v, w[i] - wu[i]);
    }
    return v;
}

// KKT residual: stationarity, feasibility and complementarity, each measured in
// the infinity norm.
double kkt_residual(const Eigen::VectorXd& grad, const Eigen::MatrixXd& J, const Eigen::VectorXd& lambda,
                    const Eigen::VectorXd& mu, const Eigen::VectorXd& g, const Eigen::VectorXd& gl,
                    const Eigen::VectorXd& gu, const Eigen::VectorXd& w, const Eigen::VectorXd& wl,
                    const Eigen::VectorXd& wu) {
    Eigen::VectorXd stat = grad + mu;
    if (g.size() > 0) stat += J.transpose() * lambda;
    double res = stat.lpNorm<Eigen::Infinity>();
    res = std::max(res, max_violation(g, gl, gu, w, wl, wu));
    auto comp = [&](double lam, double lo, double hi, double val) {
        if (lam > 0.0) return std::isfinite(hi) ? lam * std::abs(hi - val) : lam;
        if (lam < 0.0) return std::isfinite(lo) ? -lam * std::abs(val - lo) : -lam;
        return 0.0;
    };
    for (int i = 0; i < g.size(); ++i) res = std::max(res, comp(lambda[i], gl[i], gu[i], g[i]));
    for (int i = 0; i < w.size(); ++i) res = std::max(res, comp(mu[i], wl[i], wu[i], w[i]));
    return res;
}

struct EvalPoint {
    Eigen::VectorXd w;
    double f = 0.0;
    Eigen::VectorXd grad;
    Eigen::VectorXd g;
    Eigen::MatrixXd J;
    double viol = 0.0;
};

// Restoration QP: the rows are widened by penalized nonnegative slacks, so the
// subproblem is always feasible. Returns the d-part step and the row/bound
// multipliers of the original variables.
QpResult solve_relaxed_qp(const Eigen::MatrixXd& H, const Eigen::VectorXd& grad, const Eigen::MatrixXd& J,
                          const Eigen::VectorXd& rl, const Eigen::VectorXd& ru, const Eigen::VectorXd& dl,
                          const Eigen::VectorXd& du, double sigma, double tol, int max_iter) {
    const int n = static_cast<int>(H.rows());
    const int m = static_cast<int>(rl.size());
    const int ne = n + m;
    Eigen::MatrixXd He = Eigen::MatrixXd::Zero(ne, ne);
    He.topLeftCorner(n, n) = H;
    He.bottomRightCorner(m, m) = 1e-8 * Eigen::MatrixXd::Identity(m, m);
    Eigen::VectorXd ce(ne);
    ce.head(n) = grad;
    ce.tail(m).setConstant(sigma);

    Eigen::MatrixXd Ae(2 * m, ne);
    Eigen::VectorXd rle(2 * m), rue(2 * m);
    Ae.setZero();
    for (int i = 0; i < m; ++i) {
        Ae.block(i, 0, 1, n) = J.row(i);
        Ae(i, n + i) = 1.0; // J d + v >= rl
        rle[i] = rl[i];
        rue[i] = kInf;
        Ae.block(m + i, 0, 1, n) = J.row(i);
        Ae(m + i, n + i) = -1.0; // J d - v <= ru
        rle[m + i] = -kInf;
        rue[m + i] = ru[i];
    }
    Eigen::VectorXd dle(ne), due(ne);
    dle.head(n) = dl;
    due.head(n) = du;
    dle.tail(m).setZero();
    due.tail(m).setConstant(kInf);

    QpResult inner = qp_solve(He, ce, Ae, rle, rue, dle, due, {}, tol, max_iter);
    QpResult out;
    out.feasible = inner.feasible;
    out.iterations = inner.iterations;
    if (!inner.feasible) return out;
    out.d = inner.d.head(n);
    out.lambda_rows.resize(m);
    for (int i = 0; i < m; ++i) out.lambda_rows[i] = inner.lambda_rows[i] + inner.lambda_rows[m + i];
    out.lambda_bounds = inner.lambda_bounds.head(n);
    return out;
}

NlpSolution sqp_solve_single(const NlpProblem& P, Eigen::VectorXd w0, const SqpOptions& opts) {
    const int n = P.n_w, m = P.n_g;
    NlpSolution sol;
    sol.w = w0;
    sol.lambda_g = Eigen::VectorXd::Zero(m);
    sol.lambda_w = Eigen::VectorXd::Zero(n);

    auto clip = [&](Eigen::VectorXd w) {
        for (int i = 0; i < n; ++i) w[i] = std::min(std::max(w[i], P.w_lb[i]), P.w_ub[i]);
        return w;
    };

    auto eval_full = [&](const Eigen::VectorXd& w, EvalPoint& pt) {
        pt.w = w;
        pt.grad.resize(n);
        if (!P.objective(w, pt.f, pt.grad)) return false;
        pt.g.resize(m);
        pt.J.resize(m, n);
        if (m > 0) {
            if (!P.constraints(w, pt.g, pt.J)) return false;
        } else {
            pt.g.resize(0);
            pt.J.resize(0, n);
        }
        pt.viol = violation(pt.g, P.g_lb, P.g_ub, w, P.w_lb, P.w_ub);
        return std::isfinite(pt.f) && pt.grad.allFinite() && (m == 0 || (pt.g.allFinite() && pt.J.allFinite()));
    };

    auto eval_value = [&](const Eigen::VectorXd& w, double& f, Eigen::VectorXd& g) {
        if (P.objective_value) {
            if (!P.objective_value(w, f)) return false;
        } else {
            Eigen::VectorXd grad(n);
            if (!P.objective(w, f, grad)) return false;
        }
        if (m > 0) {
            g.resize(m);
            if (P.constraints_value) {
                if (!P.constraints_value(w, g)) return false;
            } else {
                Eigen::MatrixXd J(m, n);
                if (!P.constraints(w, g, J)) return false;
            }
        } else {
            g.resize(0);
        }
        return std::isfinite(f) && g.allFinite();
    };

    EvalPoint cur;
    if (!eval_full(clip(std::move(w0)), cur)) {
        sol.status = SolveStatus::EvalFail;
        return sol;
    }

    Eigen::VectorXd lambda = opts.lambda0 && opts.lambda0->size() == m ? *opts.lambda0 : Eigen::VectorXd::Zero(m);
    Eigen::VectorXd mu = opts.mu0 && opts.mu0->size() == n ? *opts.mu0 : Eigen::VectorXd::Zero(n);

    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
    bool h_is_fresh = true; // self-scale on the first curvature pair after a reset
    double rho = 1.0;
    int skip_count = 0;
    int relaxed_qp_used = 0;

    EvalPoint best = cur;
    int relaxed_steps = 0;
    int restores = 0;

    auto merit = [&](double f, double viol) { return f + rho * viol; };

    for (int iter = 1; iter <= opts.max_iter; ++iter) {
        sol.iterations = iter;
        double kkt = kkt_residual(cur.grad, cur.J, lambda, mu, cur.g, P.g_lb, P.g_ub, cur.w, P.w_lb, P.w_ub);
        sol.kkt_residual = kkt;
        if (kkt <= opts.tol) {
            sol.status = SolveStatus::Optimal;
            break;
        }

        // QP subproblem on the linearized constraints and bound displacements.
        Eigen::VectorXd rl(m), ru(m);
        for (int i = 0; i < m; ++i) {
            rl[i] = P.g_lb[i] - cur.g[i];
            ru[i] = P.g_ub[i] - cur.g[i];
        }
        Eigen::VectorXd dl = P.w_lb - cur.w, du = P.w_ub - cur.w;
        for (int i = 0; i < n; ++i) {
            if (!std::isfinite(P.w_lb[i])) dl[i] = -kInf;
            if (!std::isfinite(P.w_ub[i])) du[i] = kInf;
            if (dl[i] > 0.0) dl[i] = 0.0; // keep the origin feasible under roundoff
            if (du[i] < 0.0) du[i] = 0.0;
        }
        QpResult qp;
        try {
            qp = qp_solve(H, cur.grad, cur.J, rl, ru, dl, du, {}, opts.qp_tol, opts.qp_max_iter);
        } catch (const std::exception&) {
            qp.feasible = false; // includes numerical breakdown of the factorization
        }
        if (qp.feasible && !qp.d.allFinite()) qp.feasible = false;
        int watchdog_flag = 0;
        if (!qp.feasible && m > 0 && relaxed_qp_used < opts.relaxed_qp_max) {
            // Infeasible linearization: take a restoration step from the relaxed QP.
            double sigma = std::max(opts.elastic_weight, 10.0 * rho);
            try {
                qp = solve_relaxed_qp(H, cur.grad, cur.J, rl, ru, dl, du, sigma, opts.qp_tol, opts.qp_max_iter);
            } catch (const std::exception&) {
                qp.feasible = false;
            }
            if (qp.feasible && !qp.d.allFinite()) qp.feasible = false;
            if (qp.feasible) {
                ++relaxed_qp_used;
                watchdog_flag = 3;
            }
        }
        if (!qp.feasible) {
            sol.status = SolveStatus::InfeasibleQp;
            break;
        }
        Eigen::VectorXd d = qp.d;
        Eigen::VectorXd lambda_new = qp.lambda_rows;
        Eigen::VectorXd mu_new = qp.lambda_bounds;

        double mult_inf = std::max(lambda_new.size() ? lambda_new.lpNorm<Eigen::Infinity>() : 0.0,
                                   mu_new.size() ? mu_new.lpNorm<Eigen::Infinity>() : 0.0);
        rho = std::max(rho, 2.0 * mult_inf);

        double phi0 = merit(cur.f, cur.viol);
        double dphi = cur.grad.dot(d) - rho * cur.viol;

        // Backtracking on the l1 merit; non-evaluable trials are rejected.
        double alpha = 1.0;
        bool accepted = false;
        Eigen::VectorXd w_try, g_try;
        double f_try = 0.0;
        Eigen::VectorXd w_first_ok;
        bool have_first_ok = false;
        double f_first_ok = 0.0;
        for (int ls = 0; ls <= opts.linesearch_max; ++ls) {
            w_try = clip(cur.w + alpha * d);
            double f_t;
            Eigen::VectorXd g_t;
            if (eval_value(w_try, f_t, g_t)) {
                double viol_t = violation(g_t, P.g_lb, P.g_ub, w_try, P.w_lb, P.w_ub);
                if (!have_first_ok) {
                    w_first_ok = w_try;
                    f_first_ok = f_t;
                    have_first_ok = true;
                }
                if (merit(f_t, viol_t) <= phi0 + 1e-4 * alpha * dphi) {
                    accepted = true;
                    f_try = f_t;
                    g_try = g_t;
                    break;
                }
            }
            alpha *= 0.5;
        }

        if (!accepted) {
            if (have_first_ok && relaxed_steps < opts.watchdog_patience) {
                // Watchdog: accept the non-improving step and keep the fallback.
                w_try = w_first_ok;
                f_try = f_first_ok;
                ++relaxed_steps;
                watchdog_flag = 1;
                accepted = true;
            } else if ((best.w - cur.w).lpNorm<Eigen::Infinity>() > 0.0 && restores < 3) {
                // Restore the best-merit point and restart the Hessian.
                cur = best;
                lambda = lambda_new;
                mu = mu_new;
                H = Eigen::MatrixXd::Identity(n, n);
                h_is_fresh = true;
                relaxed_steps = 0;
                ++restores;
                sol.log.push_back({iter, cur.f, kkt, 0.0, 2});
                continue;
            } else {
                sol.status = SolveStatus::LinesearchFail;
                break;
            }
        }

        EvalPoint next;
        if (!eval_full(w_try, next)) {
            sol.status = SolveStatus::EvalFail;
            break;
        }

        // Damped BFGS on the Lagrangian gradient difference at the new multipliers.
        Eigen::VectorXd s = next.w - cur.w;
        Eigen::VectorXd gL_new = next.grad + mu_new;
        Eigen::VectorXd gL_old = cur.grad + mu_new;
        if (m > 0) {
            gL_new += next.J.transpose() * lambda_new;
            gL_old += cur.J.transpose() * lambda_new;
        }
        Eigen::VectorXd y = gL_new - gL_old;
        // Scale a fresh Hessian to the observed curvature before its first
        // update; long-horizon problems are otherwise orders of magnitude off.
        if (h_is_fresh && s.dot(y) > 1e-12 * s.norm() * y.norm()) {
            double gamma = y.squaredNorm() / s.dot(y);
            if (std::isfinite(gamma) && gamma > 1e-8) H = gamma * Eigen::MatrixXd::Identity(n, n);
            h_is_fresh = false;
        }
        double sBs = s.dot(H * s);
        double sy = s.dot(y);
        if (sBs > 0.0 && s.lpNorm<Eigen::Infinity>() > 0.0) {
            if (sy < 0.2 * sBs) {
                double theta = 0.8 * sBs / (sBs - sy);
                y = theta * y + (1.0 - theta) * (H * s);
                sy = s.dot(y);
            }
            if (sy > 1e-12 * s.norm() * std::max(1.0, y.norm())) {
                Eigen::VectorXd Bs = H * s;
                Eigen::MatrixXd H_new = H + y * y.transpose() / sy - Bs * Bs.transpose() / sBs;
                // roundoff can defeat the damping guarantee; keep H usable by the QP
                Eigen::LLT<Eigen::MatrixXd> llt(H_new);
                if (H_new.allFinite() && llt.info() == Eigen::Success) {
                    H = std::move(H_new);
                    skip_count = 0;
                } else if (++skip_count >= 3) {
                    H = Eigen::MatrixXd::Identity(n, n);
                    h_is_fresh = true;
                    skip_count = 0;
                }
            } else if (++skip_count >= 3) {
                H = Eigen::MatrixXd::Identity(n, n);
                h_is_fresh = true;
                skip_count = 0;
            }
        }

        cur = next;
        lambda = lambda_new;
        mu = mu_new;

        if (merit(cur.f, cur.viol) < merit(best.f, best.viol) - 1e-16) {
            best = cur;
            relaxed_steps = 0;
            restores = 0;
        }

        sol.log.push_back({iter, cur.f, kkt, alpha, watchdog_flag});
        if (iter == opts.max_iter) sol.status = SolveStatus::MaxIter;
    }

    sol.w = cur.w;
    sol.f = cur.f;
    sol.g = cur.g;
    sol.lambda_g = lambda;
    sol.lambda_w = mu;
    return sol;
}

} // namespace

NlpSolution sqp_solve(const NlpProblem& P, Eigen::VectorXd w0, const SqpOptions& opts) {
    if (P.n_w <= 0) throw ConfigError("sqp_solve: empty decision vector");
    if (!P.objective) throw ConfigError("sqp_solve: missing objective callback");
    if (P.n_g > 0 && !P.constraints) throw ConfigError("sqp_solve: missing constraint callback");
    if (P.w_lb.size() != P.n_w || P.w_ub.size() != P.n_w)
        throw ConfigError("sqp_solve: bound vectors must have n_w entries");
    for (int i = 0; i < P.n_w; ++i)
        if (P.w_lb[i] > P.w_ub[i]) throw ConfigError("sqp_solve: w_lb exceeds w_ub");
    if (w0.size() != P.n_w) throw ConfigError("sqp_solve: w0 size mismatch");
    if (!w0.allFinite()) throw ConfigError("sqp_solve: w0 must be finite");

    NlpSolution best = sqp_solve_single(P, w0, opts);
    if (opts.n_random_sample > 0) {
        std::uint64_t state = opts.seed;
        auto rank = [](const NlpSolution& s) { return s.status == SolveStatus::Optimal ? 0 : 1; };
        for (int k = 0; k < opts.n_random_sample; ++k) {
            Eigen::VectorXd ws(P.n_w);
            for (int i = 0; i < P.n_w; ++i) {
                double lo = std::isfinite(P.w_lb[i]) ? P.w_lb[i] : w0[i] - 1.0;
                double hi = std::isfinite(P.w_ub[i]) ? P.w_ub[i] : w0[i] + 1.0;
                ws[i] = lo + (hi - lo) * parallel::uniform01(state);
            }
            NlpSolution cand = sqp_solve_single(P, ws, opts);
            if (rank(cand) < rank(best) || (rank(cand) == rank(best) && cand.f < best.f)) best = cand;
        }
    }

    if (!opts.log_path.empty()) {
        csv::Writer out(opts.log_path);
        out.row({"iter", "f", "kkt", "step", "watchdog_flag"});
        for (const auto& e : best.log)
            out.row({std::to_string(e.iter), csv::format(e.f), csv::format(e.kkt), csv::format(e.step),
                     std::to_string(e.watchdog)});
    }
    return best;
}

} // namespace eoc::nlp
