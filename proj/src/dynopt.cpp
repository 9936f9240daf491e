#include "eoc/dynopt.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>

#include "eoc/csv.hpp"
#include "eoc/errors.hpp"

namespace eoc::dynopt {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
std::atomic<std::uint64_t> g_w_uid{0};
} // namespace

const ControlSchedule::TvEntry* ControlSchedule::find_tv(const model::AbsName& name) const {
    for (const auto& e : tv_bounds)
        if (e.name == name) return &e;
    return nullptr;
}

const ControlSchedule::TiEntry* ControlSchedule::find_ti(const model::AbsName& name) const {
    for (const auto& e : ti_bounds)
        if (e.name == name) return &e;
    return nullptr;
}

ControlSchedule ControlSchedule::load_csv(const std::filesystem::path& path) {
    auto sections = csv::read_sections(path);
    ControlSchedule s;
    const csv::Table* grid = sections.find("grid");
    if (!grid) throw ConfigError(path.string() + ": missing [grid] section");
    for (std::size_t r = 0; r < grid->rows.size(); ++r)
        s.grid.push_back(csv::parse_number(grid->rows[r][0],
                                           "at " + path.string() + " line " + std::to_string(grid->row_lines[r])));
    if (s.grid.size() < 2) throw ConfigError(path.string() + ": control grid needs at least two times");
    int N = s.n_intervals();

    if (const csv::Table* tv = sections.find("tv_bounds")) {
        for (std::size_t r = 0; r < tv->rows.size(); ++r) {
            const auto& row = tv->rows[r];
            std::string where = "at " + path.string() + " line " + std::to_string(tv->row_lines[r]);
            if (row.size() != 5) throw ConfigError("malformed tv_bounds row " + where);
            double t = csv::parse_number(row[0], where);
            model::AbsName name = model::AbsName::parse(row[1]);
            TvEntry* e = nullptr;
            for (auto& cand : s.tv_bounds)
                if (cand.name == name) e = &cand;
            if (!e) {
                s.tv_bounds.push_back({name, {}, {}, {}});
                e = &s.tv_bounds.back();
            }
            std::size_t k = e->init.size();
            if (k >= static_cast<std::size_t>(N) || std::abs(s.grid[k] - t) > 1e-9 * std::max(1.0, std::abs(t)))
                throw ConfigError("tv_bounds row out of order or off the grid " + where);
            e->init.push_back(csv::parse_number(row[2], where));
            e->lb.push_back(csv::parse_number(row[3], where));
            e->ub.push_back(csv::parse_number(row[4], where));
        }
        for (const auto& e : s.tv_bounds)
            if (static_cast<int>(e.init.size()) != N)
                throw ConfigError(path.string() + ": tv_bounds for '" + e.name.str() + "' has " +
                                  std::to_string(e.init.size()) + " rows, expected " + std::to_string(N));
    }
    if (const csv::Table* ti = sections.find("ti_bounds")) {
        for (std::size_t r = 0; r < ti->rows.size(); ++r) {
            const auto& row = ti->rows[r];
            std::string where = "at " + path.string() + " line " + std::to_string(ti->row_lines[r]);
            if (row.size() != 4) throw ConfigError("malformed ti_bounds row " + where);
            s.ti_bounds.push_back({model::AbsName::parse(row[0]), csv::parse_number(row[1], where),
                                   csv::parse_number(row[2], where), csv::parse_number(row[3], where)});
        }
    }
    if (const csv::Table* tf = sections.find("tv_fixed")) {
        for (std::size_t r = 0; r < tf->rows.size(); ++r) {
            const auto& row = tf->rows[r];
            std::string where = "at " + path.string() + " line " + std::to_string(tf->row_lines[r]);
            if (row.size() != 3) throw ConfigError("malformed tv_fixed row " + where);
            model::AbsName name = model::AbsName::parse(row[1]);
            TvFixed* e = nullptr;
            for (auto& cand : s.tv_fixed)
                if (cand.name == name) e = &cand;
            if (!e) {
                s.tv_fixed.push_back({name, {}});
                e = &s.tv_fixed.back();
            }
            e->values.push_back(csv::parse_number(row[2], where));
        }
        for (const auto& e : s.tv_fixed)
            if (static_cast<int>(e.values.size()) != N)
                throw ConfigError(path.string() + ": tv_fixed for '" + e.name.str() + "' has " +
                                  std::to_string(e.values.size()) + " rows, expected " + std::to_string(N));
    }
    return s;
}

void ControlSchedule::save_csv(const std::filesystem::path& path) const {
    csv::Writer out(path);
    out.section("grid");
    out.row({"time"});
    for (double t : grid) out.row({csv::format(t)});
    out.section("tv_bounds");
    out.row({"time", "name", "init", "lb", "ub"});
    for (const auto& e : tv_bounds)
        for (std::size_t k = 0; k < e.init.size(); ++k)
            out.row({csv::format(grid[k]), e.name.str(), csv::format(e.init[k]), csv::format(e.lb[k]),
                     csv::format(e.ub[k])});
    out.section("ti_bounds");
    out.row({"name", "init", "lb", "ub"});
    for (const auto& e : ti_bounds)
        out.row({e.name.str(), csv::format(e.init), csv::format(e.lb), csv::format(e.ub)});
    out.section("tv_fixed");
    out.row({"time", "name", "value"});
    for (const auto& e : tv_fixed)
        for (std::size_t k = 0; k < e.values.size(); ++k)
            out.row({csv::format(grid[k]), e.name.str(), csv::format(e.values[k])});
}

// Shared evaluation state behind the NLP callbacks.
struct TranscribedProblem::State {
    std::shared_ptr<const sim::SymbolicSimulation> sym;
    std::unique_ptr<deriv::DerivativeEvaluator> ev;
    expr::ExpressionVector handle_syms;
    expr::CompiledFunction obj_fn;      // handle values -> objective
    expr::CompiledFunction obj_grad_fn; // handle values -> d obj / d handles
    expr::CompiledFunction rows_fn;     // handle values -> base constraint rows
    expr::CompiledFunction rows_jac_fn; // handle values -> row-major d rows / d handles
    int n_handles = 0;

    struct Row {
        std::string name;
        double time;
        double lb, ub;
        bool relaxable;
        double weight;
    };
    std::vector<Row> rows;

    Eigen::VectorXd base_init, base_lb, base_ub;
    std::vector<int> input_of_w; // base w index -> simulation input index

    mutable std::mutex mu;
    mutable Eigen::VectorXd cache_w;
    mutable Eigen::VectorXd cache_hv;
    mutable Eigen::MatrixXd cache_hj;
    mutable bool cache_valid = false;
    mutable bool cache_has_jac = false;

    std::vector<double> to_inputs(const Eigen::VectorXd& w_base) const {
        std::vector<double> in(input_of_w.size());
        for (std::size_t i = 0; i < input_of_w.size(); ++i) in[input_of_w[i]] = w_base[static_cast<int>(i)];
        return in;
    }

    bool handle_values_at(const Eigen::VectorXd& w_base, Eigen::VectorXd& hv) const {
        {
            std::scoped_lock lock(mu);
            if (cache_valid && cache_w.size() == w_base.size() && cache_w == w_base) {
                hv = cache_hv;
                return true;
            }
        }
        try {
            Eigen::VectorXd vals = ev->values(to_inputs(w_base));
            std::scoped_lock lock(mu);
            cache_w = w_base;
            cache_hv = vals;
            cache_valid = true;
            cache_has_jac = false;
            hv = vals;
            return true;
        } catch (const std::exception&) {
            return false;
        }
    }

    bool handle_full_at(const Eigen::VectorXd& w_base, Eigen::VectorXd& hv, Eigen::MatrixXd& hj) const {
        {
            std::scoped_lock lock(mu);
            if (cache_valid && cache_has_jac && cache_w.size() == w_base.size() && cache_w == w_base) {
                hv = cache_hv;
                hj = cache_hj;
                return true;
            }
        }
        try {
            auto res = ev->evaluate(to_inputs(w_base));
            std::scoped_lock lock(mu);
            cache_w = w_base;
            cache_hv = res.values;
            cache_hj = res.jacobian;
            cache_valid = true;
            cache_has_jac = true;
            hv = res.values;
            hj = res.jacobian;
            return true;
        } catch (const std::exception&) {
            return false;
        }
    }
};

const sim::SymbolicSimulation& TranscribedProblem::simulation() const { return *state_->sym; }

Eigen::VectorXd TranscribedProblem::initial_w() const {
    Eigen::VectorXd w0(layout_.n_w());
    w0.head(layout_.n_base) = state_->base_init;
    w0.tail(layout_.n_slack).setZero();
    return w0;
}

std::vector<std::string> TranscribedProblem::constraint_names() const {
    std::vector<std::string> names;
    for (const auto& r : state_->rows)
        if (std::find(names.begin(), names.end(), r.name) == names.end()) names.push_back(r.name);
    return names;
}

void TranscribedProblem::rebuild_callbacks() {
    auto state = state_;
    const int n_base = layout_.n_base;
    const int n_slack = layout_.n_slack;
    const int n_w = layout_.n_w();
    const int n_rows = static_cast<int>(state->rows.size());
    auto relaxed = relaxed_rows_;

    // Expanded NLP rows: a relaxed two-sided row splits into two one-sided rows
    // sharing its slack.
    struct Expanded {
        int base_row;
        int slack; // -1 when not relaxed
        int sign;  // slack coefficient
        double lb, ub;
    };
    auto expanded = std::make_shared<std::vector<Expanded>>();
    for (int i = 0; i < n_rows; ++i) {
        const auto& r = state->rows[i];
        int slack = relaxed.empty() ? -1 : relaxed[i];
        if (slack < 0) {
            expanded->push_back({i, -1, 0, r.lb, r.ub});
            continue;
        }
        if (std::isfinite(r.lb)) expanded->push_back({i, slack, +1, r.lb, kInf});
        if (std::isfinite(r.ub)) expanded->push_back({i, slack, -1, -kInf, r.ub});
    }

    std::vector<double> slack_weight(n_slack, 0.0);
    if (!relaxed.empty())
        for (int i = 0; i < n_rows; ++i)
            if (relaxed[i] >= 0) slack_weight[relaxed[i]] = state->rows[i].weight;

    nlp_.n_w = n_w;
    nlp_.n_g = static_cast<int>(expanded->size());
    nlp_.w_lb.resize(n_w);
    nlp_.w_ub.resize(n_w);
    nlp_.w_lb.head(n_base) = state->base_lb;
    nlp_.w_ub.head(n_base) = state->base_ub;
    nlp_.w_lb.tail(n_slack).setZero();
    nlp_.w_ub.tail(n_slack).setConstant(kInf);
    nlp_.g_lb.resize(nlp_.n_g);
    nlp_.g_ub.resize(nlp_.n_g);
    for (int j = 0; j < nlp_.n_g; ++j) {
        nlp_.g_lb[j] = (*expanded)[j].lb;
        nlp_.g_ub[j] = (*expanded)[j].ub;
    }

    auto weights = std::make_shared<std::vector<double>>(slack_weight);

    nlp_.objective = [state, n_base, n_slack, weights](const Eigen::VectorXd& w, double& f,
                                                       Eigen::VectorXd& grad) {
        Eigen::VectorXd hv;
        Eigen::MatrixXd hj;
        if (!state->handle_full_at(w.head(n_base), hv, hj)) return false;
        std::vector<double> hvv(hv.data(), hv.data() + hv.size());
        double base_f = 0.0;
        state->obj_fn.eval(hvv, std::span<double>(&base_f, 1));
        Eigen::VectorXd dfdh(state->n_handles);
        state->obj_grad_fn.eval(hvv, std::span<double>(dfdh.data(), dfdh.size()));
        grad.resize(w.size());
        Eigen::VectorXd g_inputs = hj.transpose() * dfdh; // gradient per simulation input
        for (int i = 0; i < n_base; ++i) grad[i] = g_inputs[state->input_of_w[i]];
        f = base_f;
        for (int s = 0; s < n_slack; ++s) {
            f += (*weights)[s] * w[n_base + s];
            grad[n_base + s] = (*weights)[s];
        }
        return std::isfinite(f) && grad.allFinite();
    };
    nlp_.objective_value = [state, n_base, n_slack, weights](const Eigen::VectorXd& w, double& f) {
        Eigen::VectorXd hv;
        if (!state->handle_values_at(w.head(n_base), hv)) return false;
        std::vector<double> hvv(hv.data(), hv.data() + hv.size());
        double base_f = 0.0;
        state->obj_fn.eval(hvv, std::span<double>(&base_f, 1));
        f = base_f;
        for (int s = 0; s < n_slack; ++s) f += (*weights)[s] * w[n_base + s];
        return std::isfinite(f);
    };

    if (nlp_.n_g > 0) {
        nlp_.constraints = [state, expanded, n_base, n_rows](const Eigen::VectorXd& w, Eigen::VectorXd& g,
                                                             Eigen::MatrixXd& J) {
            Eigen::VectorXd hv;
            Eigen::MatrixXd hj;
            if (!state->handle_full_at(w.head(n_base), hv, hj)) return false;
            std::vector<double> hvv(hv.data(), hv.data() + hv.size());
            Eigen::VectorXd base_rows(n_rows);
            state->rows_fn.eval(hvv, std::span<double>(base_rows.data(), n_rows));
            std::vector<double> jac_flat(static_cast<std::size_t>(n_rows) * state->n_handles);
            state->rows_jac_fn.eval(hvv, jac_flat);
            Eigen::MatrixXd drdh(n_rows, state->n_handles);
            for (int i = 0; i < n_rows; ++i)
                for (int k = 0; k < state->n_handles; ++k)
                    drdh(i, k) = jac_flat[static_cast<std::size_t>(i) * state->n_handles + k];
            Eigen::MatrixXd dr_inputs = drdh * hj;
            g.resize(static_cast<Eigen::Index>(expanded->size()));
            J.setZero(static_cast<Eigen::Index>(expanded->size()), w.size());
            for (std::size_t j = 0; j < expanded->size(); ++j) {
                const auto& e = (*expanded)[j];
                double s = e.slack >= 0 ? w[n_base + e.slack] : 0.0;
                g[static_cast<int>(j)] = base_rows[e.base_row] + e.sign * s;
                for (int i = 0; i < n_base; ++i)
                    J(static_cast<int>(j), i) = dr_inputs(e.base_row, state->input_of_w[i]);
                if (e.slack >= 0) J(static_cast<int>(j), n_base + e.slack) = e.sign;
            }
            return g.allFinite() && J.allFinite();
        };
        nlp_.constraints_value = [state, expanded, n_base, n_rows](const Eigen::VectorXd& w, Eigen::VectorXd& g) {
            Eigen::VectorXd hv;
            if (!state->handle_values_at(w.head(n_base), hv)) return false;
            std::vector<double> hvv(hv.data(), hv.data() + hv.size());
            Eigen::VectorXd base_rows(n_rows);
            state->rows_fn.eval(hvv, std::span<double>(base_rows.data(), n_rows));
            g.resize(static_cast<Eigen::Index>(expanded->size()));
            for (std::size_t j = 0; j < expanded->size(); ++j) {
                const auto& e = (*expanded)[j];
                double s = e.slack >= 0 ? w[n_base + e.slack] : 0.0;
                g[static_cast<int>(j)] = base_rows[e.base_row] + e.sign * s;
            }
            return g.allFinite();
        };
    } else {
        nlp_.constraints = nullptr;
        nlp_.constraints_value = nullptr;
    }
}

TranscribedProblem TranscribedProblem::relax(const std::vector<std::string>& names) const {
    for (const auto& n : names) {
        bool found = false;
        for (const auto& r : state_->rows)
            if (r.name == n) {
                found = true;
                if (!r.relaxable) throw ConfigError("constraint group '" + n + "' is not marked relaxable");
            }
        if (!found) throw ConfigError("no registered constraint group named '" + n + "'");
    }
    TranscribedProblem out = *this;
    out.relaxed_rows_.assign(state_->rows.size(), -1);
    int n_slack = 0;
    for (std::size_t i = 0; i < state_->rows.size(); ++i)
        if (std::find(names.begin(), names.end(), state_->rows[i].name) != names.end())
            out.relaxed_rows_[i] = n_slack++;
    out.layout_.n_slack = n_slack;
    out.rebuild_callbacks();
    return out;
}

SolveStep TranscribedProblem::solve_step(const nlp::SqpOptions& opts) const {
    return solve_step(opts, initial_w());
}

SolveStep TranscribedProblem::solve_step(const nlp::SqpOptions& opts, const Eigen::VectorXd& w0) const {
    SolveStep step;
    step.sol = nlp::sqp_solve(nlp_, w0, opts);
    const Eigen::VectorXd& w = step.sol.w;
    for (const auto& tv : layout_.tv) {
        SolveStep::TvResult r;
        r.name = tv.name;
        r.t_start = tv.t_start;
        for (int k = 0; k < tv.n; ++k) r.value.push_back(w[tv.offset + k]);
        step.tv.push_back(std::move(r));
    }
    for (const auto& ti : layout_.ti) step.ti.push_back({ti.name, w[ti.offset]});
    for (int s = 0; s < layout_.n_slack; ++s) step.slacks.push_back(w[layout_.n_base + s]);
    return step;
}

void TranscribedProblem::export_solution_csv(const std::filesystem::path& path, const SolveStep& step) const {
    csv::Writer out(path);
    out.section("controls");
    out.row({"t_start", "name", "value"});
    for (const auto& tv : step.tv)
        for (std::size_t k = 0; k < tv.value.size(); ++k)
            out.row({csv::format(tv.t_start[k]), tv.name.str(), csv::format(tv.value[k])});
    for (const auto& ti : step.ti) out.row({"", ti.name.str(), csv::format(ti.value)});

    out.section("trajectory");
    const auto& dae = state_->sym->context().dae();
    std::vector<std::string> header{"time"};
    for (const auto& n : dae.x_names) header.push_back(n.str());
    for (const auto& n : dae.z_names) header.push_back(n.str());
    out.row(header);
    auto traj = state_->sym->run(state_->to_inputs(step.sol.w.head(layout_.n_base)));
    for (std::size_t r = 0; r < traj.time.size(); ++r) {
        std::vector<std::string> row{csv::format(traj.time[r])};
        for (int c = 0; c < traj.x.cols(); ++c) row.push_back(csv::format(traj.x(static_cast<int>(r), c)));
        for (int c = 0; c < traj.z.cols(); ++c) row.push_back(csv::format(traj.z(static_cast<int>(r), c)));
        out.row(row);
    }
}

Transcriber::Transcriber(model::Model& model, ControlSchedule schedule)
    : model_(model), schedule_(std::move(schedule)) {
    if (schedule_.grid.size() < 2) throw ConfigError("control schedule needs at least two grid times");
    for (std::size_t i = 1; i < schedule_.grid.size(); ++i)
        if (!(schedule_.grid[i] > schedule_.grid[i - 1]))
            throw ConfigError("control grid must be strictly increasing");
    sim_grid_ = schedule_.grid;
}

void Transcriber::set_sim_grid(std::vector<double> grid) { sim_grid_ = std::move(grid); }

void Transcriber::add_tv_decision(const model::AbsName& name) {
    for (const auto& d : tv_)
        if (d.name == name) throw ConfigError("time-variant decision '" + name.str() + "' already registered");
    model_.resolve(name); // existence check with a precise error
    tv_.push_back({name, {}, 0.0, false});
}

void Transcriber::set_tv_placement(const model::AbsName& name, std::vector<std::vector<int>> placement,
                                   double off_value) {
    for (auto& d : tv_) {
        if (d.name == name) {
            if (static_cast<int>(placement.size()) != schedule_.n_intervals())
                throw ConfigError("placement must map every control interval");
            d.placement = std::move(placement);
            d.off_value = off_value;
            d.has_placement = true;
            return;
        }
    }
    throw ConfigError("no time-variant decision named '" + name.str() + "'");
}

void Transcriber::add_ti_decision(const model::AbsName& name) {
    for (const auto& d : ti_)
        if (d == name) throw ConfigError("time-invariant decision '" + name.str() + "' already registered");
    model_.resolve(name);
    ti_.push_back(name);
}

void Transcriber::add_stage_cost(const expr::Expression& e) { stage_costs_.push_back(e); }

void Transcriber::add_objective_terminal(const model::AbsName& name) { terminal_objectives_.push_back(name); }

void Transcriber::add_objective(std::function<expr::Expression(const sim::SymbolicSimulation&)> builder) {
    objective_builders_.push_back(std::move(builder));
}

void Transcriber::add_path_constraint(const std::string& cname, const model::AbsName& var,
                                      std::vector<double> times, double lb, double ub, bool relaxable,
                                      double weight) {
    if (times.empty()) throw ConfigError("path constraint '" + cname + "' has no times");
    cons_.push_back({cname, var, std::move(times), lb, ub, relaxable, weight});
}

TranscribedProblem Transcriber::transcribe(const sim::IntegrateOptions& sim_opts,
                                           const deriv::EvaluatorOptions& deriv_opts) {
    if (tv_.empty() && ti_.empty()) throw ConfigError("transcribe: no decision variables registered");
    if (stage_costs_.empty() && terminal_objectives_.empty() && objective_builders_.empty())
        throw ConfigError("transcribe: no objective registered");

    auto dae = model_.setup();
    auto vals = model_.collect_var_val();
    const int N = schedule_.n_intervals();

    // Stage costs become quadrature states q' = L, q(0) = 0, added to the
    // objective at the final time.
    std::vector<model::AbsName> quad_names;
    for (std::size_t i = 0; i < stage_costs_.size(); ++i) {
        expr::Expression rebased = expr::substitute(stage_costs_[i], dae.local_to_absolute);
        for (const auto& s : expr::free_symbols({rebased})) {
            std::string n = s.symbol_name();
            if (!dae.x_index.count(n) && !dae.z_index.count(n) && !dae.p_index.count(n) && !dae.u_index.count(n))
                throw ConfigError("stage cost must be instantaneous (model symbols only); found '" + n + "'");
        }
        model::AbsName qn(model_.name() + ".@stage" + std::to_string(i), 0);
        expr::Expression qs = expr::make_symbol(qn.str());
        dae.x_index[qn.str()] = static_cast<int>(dae.x.size());
        dae.x.push_back(qs);
        dae.x_names.push_back(qn);
        dae.ode.push_back(rebased);
        vals.x0.push_back(0.0);
        quad_names.push_back(qn);
    }

    auto ctx = std::make_shared<sim::SimContext>(dae);

    // Simulation-grid interval -> control interval.
    auto control_interval_of = [&](int si) {
        double t = sim_grid_[si];
        int k = 0;
        for (int i = 0; i < N; ++i)
            if (schedule_.grid[i] <= t + 1e-12) k = i;
        return k;
    };
    const int n_sim_intervals = static_cast<int>(sim_grid_.size()) - 1;

    sim::SymbolicSimulation::Config cfg;
    cfg.t_grid = sim_grid_;
    cfg.x0 = vals.x0;
    cfg.z0 = vals.z0;
    cfg.p = vals.p;
    cfg.u = vals.u;
    cfg.opts = sim_opts;

    // Fixed time-variant parameters ride along as numeric event series.
    cfg.base_events.times = sim_grid_;
    for (const auto& f : schedule_.tv_fixed) {
        sim::EventSchedule::Series series;
        series.name = f.name;
        for (int si = 0; si < n_sim_intervals; ++si) series.values.push_back(f.values[control_interval_of(si)]);
        cfg.base_events.series.push_back(std::move(series));
    }

    const std::uint64_t uid = g_w_uid.fetch_add(1);
    std::vector<std::vector<expr::Expression>> tv_symbols(tv_.size());
    for (std::size_t d = 0; d < tv_.size(); ++d) {
        auto loc = dae.find(tv_[d].name);
        if (loc.kind != model::VarKind::U && loc.kind != model::VarKind::P)
            throw ConfigError("time-variant decision '" + tv_[d].name.str() +
                              "' must be a control or parameter component");
        sim::SymbolicSimulation::Config::SymbolSeries ss;
        ss.name = tv_[d].name;
        ss.symbols.assign(n_sim_intervals, std::nullopt);
        ss.fallback.assign(n_sim_intervals, tv_[d].off_value);
        for (int k = 0; k < N; ++k) {
            expr::Expression sym = expr::make_symbol("@w" + std::to_string(uid) + ":" + tv_[d].name.str() + "#" +
                                                     std::to_string(k));
            tv_symbols[d].push_back(sym);
            if (tv_[d].has_placement) {
                for (int si : tv_[d].placement[k]) {
                    if (si < 0 || si >= n_sim_intervals) throw ConfigError("placement interval out of range");
                    ss.symbols[si] = sym;
                }
            } else {
                for (int si = 0; si < n_sim_intervals; ++si)
                    if (control_interval_of(si) == k) ss.symbols[si] = sym;
            }
        }
        cfg.symbol_series.push_back(std::move(ss));
    }

    std::vector<expr::Expression> ti_symbols;
    for (std::size_t d = 0; d < ti_.size(); ++d) {
        auto loc = dae.find(ti_[d]);
        expr::Expression sym = expr::make_symbol("@w" + std::to_string(uid) + ":" + ti_[d].str() + "#ti");
        switch (loc.kind) {
        case model::VarKind::P:
            cfg.p_symbols.push_back({ti_[d], sym});
            break;
        case model::VarKind::X:
            cfg.x0_symbols.push_back({ti_[d], sym});
            break;
        case model::VarKind::Z:
            cfg.z0_symbols.push_back({ti_[d], sym});
            break;
        case model::VarKind::U:
            throw ConfigError("time-invariant decision '" + ti_[d].str() +
                              "' is a control; register it as time-variant instead");
        }
        ti_symbols.push_back(sym);
    }

    auto sym_sim = std::make_shared<sim::SymbolicSimulation>(ctx, cfg);

    // Objective expression over output handles.
    expr::Expression objective(0.0);
    for (const auto& qn : quad_names) objective = objective + sym_sim->final_handle(qn);
    for (const auto& tn : terminal_objectives_) objective = objective + sym_sim->final_handle(tn);
    for (const auto& builder : objective_builders_) objective = objective + builder(*sym_sim);

    // Constraint rows: one per (registered constraint, time).
    auto state = std::make_shared<TranscribedProblem::State>();
    expr::ExpressionVector row_exprs;
    for (const auto& c : cons_) {
        for (double t : c.times) {
            int idx = sym_sim->time_index(t);
            row_exprs.push_back(sym_sim->handle(c.var, idx));
            state->rows.push_back({c.name, t, c.lb, c.ub, c.relaxable, c.weight});
        }
    }

    // Distinct handles used anywhere.
    expr::ExpressionVector all_exprs = row_exprs;
    all_exprs.push_back(objective);
    expr::ExpressionVector handles = expr::free_symbols(all_exprs);
    std::vector<deriv::OutputSpec> outputs;
    for (const auto& h : handles) {
        const auto* info = sym_sim->find_handle(h);
        if (!info)
            throw ConfigError("objective/constraint expression contains a non-handle symbol: " + h.symbol_name());
        outputs.push_back({info->name, info->time_index});
    }
    if (handles.empty()) throw ConfigError("transcribe: objective uses no simulation outputs");

    state->sym = sym_sim;
    state->ev = std::make_unique<deriv::DerivativeEvaluator>(sym_sim, outputs, deriv_opts);
    state->handle_syms = handles;
    state->n_handles = static_cast<int>(handles.size());
    state->obj_fn = expr::CompiledFunction({objective}, handles);
    expr::ExpressionVector obj_grad;
    for (const auto& h : handles) obj_grad.push_back(expr::differentiate(objective, h));
    state->obj_grad_fn = expr::CompiledFunction(obj_grad, handles);
    state->rows_fn = expr::CompiledFunction(row_exprs, handles);
    expr::ExpressionVector rows_jac;
    for (const auto& r : row_exprs)
        for (const auto& h : handles) rows_jac.push_back(expr::differentiate(r, h));
    state->rows_jac_fn = expr::CompiledFunction(rows_jac, handles);

    // Decision layout and bounds: w is packed interval-major per time-variant
    // decision, then the time-invariant decisions.
    DecisionLayout layout;
    int offset = 0;
    state->base_init.resize(N * static_cast<int>(tv_.size()) + static_cast<int>(ti_.size()));
    state->base_lb.resize(state->base_init.size());
    state->base_ub.resize(state->base_init.size());
    std::vector<expr::Expression> w_syms;
    for (std::size_t d = 0; d < tv_.size(); ++d) {
        DecisionLayout::Tv tv;
        tv.name = tv_[d].name;
        tv.offset = offset;
        tv.n = N;
        for (int k = 0; k < N; ++k) tv.t_start.push_back(schedule_.grid[k]);
        const auto* entry = schedule_.find_tv(tv_[d].name);
        auto [var, comp] = model_.resolve(tv_[d].name);
        for (int k = 0; k < N; ++k) {
            state->base_init[offset + k] = entry ? entry->init[k] : var->val[comp];
            state->base_lb[offset + k] = entry ? entry->lb[k] : var->lb[comp];
            state->base_ub[offset + k] = entry ? entry->ub[k] : var->ub[comp];
            w_syms.push_back(tv_symbols[d][k]);
        }
        offset += N;
        layout.tv.push_back(std::move(tv));
    }
    for (std::size_t d = 0; d < ti_.size(); ++d) {
        DecisionLayout::Ti ti;
        ti.name = ti_[d];
        ti.offset = offset;
        const auto* entry = schedule_.find_ti(ti_[d]);
        auto [var, comp] = model_.resolve(ti_[d]);
        state->base_init[offset] = entry ? entry->init : var->val[comp];
        state->base_lb[offset] = entry ? entry->lb : var->lb[comp];
        state->base_ub[offset] = entry ? entry->ub : var->ub[comp];
        w_syms.push_back(ti_symbols[d]);
        ++offset;
        layout.ti.push_back(std::move(ti));
    }
    layout.n_base = offset;
    layout.n_slack = 0;

    // Map w components onto simulation input positions.
    state->input_of_w.resize(offset);
    const auto& inputs = sym_sim->inputs();
    for (int i = 0; i < offset; ++i) {
        int pos = -1;
        for (std::size_t j = 0; j < inputs.size(); ++j)
            if (inputs[j].same_node(w_syms[i])) pos = static_cast<int>(j);
        if (pos < 0) throw ConfigError("internal: decision symbol not registered as a simulation input");
        state->input_of_w[i] = pos;
    }

    TranscribedProblem out;
    out.state_ = state;
    out.layout_ = layout;
    out.rebuild_callbacks();
    return out;
}

} // namespace eoc::dynopt
