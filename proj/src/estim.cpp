#include "eoc/estim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <set>

#include "eoc/csv.hpp"
#include "eoc/errors.hpp"

namespace eoc::estim {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
std::atomic<std::uint64_t> g_est_uid{0};

bool is_missing(double v) { return std::isnan(v); }
} // namespace

int ExperimentData::present_count() const {
    int n = 0;
    for (Eigen::Index r = 0; r < values.rows(); ++r)
        for (Eigen::Index c = 0; c < values.cols(); ++c)
            if (!is_missing(values(r, c))) ++n;
    return n;
}

ExperimentData load_measurement_csv(const std::filesystem::path& path, std::string id) {
    auto table = csv::read_table(path);
    ExperimentData e;
    e.id = id.empty() ? path.stem().string() : std::move(id);
    if (table.header.size() < 3 || table.header.size() % 2 == 0)
        throw ConfigError(path.string() + ": header must be time,<name>,std1,<name>,std2,...");
    int n_out = static_cast<int>((table.header.size() - 1) / 2);
    for (int j = 0; j < n_out; ++j) e.outputs.push_back(model::AbsName::parse(table.header[1 + 2 * j]));

    e.values.resize(static_cast<Eigen::Index>(table.rows.size()), n_out);
    e.stds.resize(static_cast<Eigen::Index>(table.rows.size()), n_out);
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        std::string where = "at " + path.string() + " line " + std::to_string(table.row_lines[r]);
        if (row.size() != table.header.size() && row.size() != 1)
            throw ConfigError("malformed measurement row " + where);
        e.times.push_back(csv::parse_number(row[0], where));
        for (int j = 0; j < n_out; ++j) {
            auto val = csv::parse_cell(row.size() > static_cast<std::size_t>(1 + 2 * j) ? row[1 + 2 * j] : "");
            auto std_cell = csv::parse_cell(row.size() > static_cast<std::size_t>(2 + 2 * j) ? row[2 + 2 * j] : "");
            if (val) {
                if (!std_cell) throw ConfigError("value present but std missing " + where);
                if (*std_cell <= 0.0) throw ConfigError("non-positive std " + where);
                e.values(static_cast<Eigen::Index>(r), j) = *val;
                e.stds(static_cast<Eigen::Index>(r), j) = *std_cell;
            } else {
                e.values(static_cast<Eigen::Index>(r), j) = std::numeric_limits<double>::quiet_NaN();
                e.stds(static_cast<Eigen::Index>(r), j) = std::numeric_limits<double>::quiet_NaN();
            }
        }
    }
    for (std::size_t i = 1; i < e.times.size(); ++i)
        if (!(e.times[i] > e.times[i - 1]))
            throw ConfigError(path.string() + ": measurement times must be strictly increasing");
    return e;
}

void load_doe_csv(const std::filesystem::path& path, ExperimentData& e) {
    auto sections = csv::read_sections(path);
    if (const csv::Table* ti = sections.find("ti")) {
        for (std::size_t r = 0; r < ti->rows.size(); ++r) {
            std::string where = "at " + path.string() + " line " + std::to_string(ti->row_lines[r]);
            if (ti->rows[r].size() != 2) throw ConfigError("malformed ti row " + where);
            e.tip.emplace_back(model::AbsName::parse(ti->rows[r][0]), csv::parse_number(ti->rows[r][1], where));
        }
    }
    if (const csv::Table* tv = sections.find("tv_fixed")) {
        std::vector<double> times;
        std::map<std::string, std::map<double, double>> by_name;
        std::vector<std::string> order;
        for (std::size_t r = 0; r < tv->rows.size(); ++r) {
            std::string where = "at " + path.string() + " line " + std::to_string(tv->row_lines[r]);
            if (tv->rows[r].size() != 3) throw ConfigError("malformed tv_fixed row " + where);
            double t = csv::parse_number(tv->rows[r][0], where);
            std::string name = tv->rows[r][1];
            double v = csv::parse_number(tv->rows[r][2], where);
            if (!by_name.count(name)) order.push_back(name);
            by_name[name][t] = v;
            if (std::find(times.begin(), times.end(), t) == times.end()) times.push_back(t);
        }
        std::sort(times.begin(), times.end());
        e.tvp.times = times; // interval starts; the horizon end is appended downstream
        for (const auto& name : order) {
            sim::EventSchedule::Series s;
            s.name = model::AbsName::parse(name);
            double last = 0.0;
            bool have = false;
            for (double t : times) {
                auto it = by_name[name].find(t);
                if (it != by_name[name].end()) {
                    last = it->second;
                    have = true;
                }
                if (!have) throw ConfigError(path.string() + ": series '" + name + "' has no value at its first time");
                s.values.push_back(last);
            }
            e.tvp.series.push_back(std::move(s));
        }
    }
}

const double* Priors::find(const model::AbsName& name, const double** std_out) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) {
            if (std_out) *std_out = &std[i];
            return &mean[i];
        }
    }
    return nullptr;
}

std::vector<ParamSpec> load_param_files(const std::filesystem::path& init_csv,
                                        const std::filesystem::path& bounds_csv) {
    auto init = csv::read_table(init_csv);
    std::vector<ParamSpec> out;
    for (std::size_t r = 0; r < init.rows.size(); ++r) {
        std::string where = "at " + init_csv.string() + " line " + std::to_string(init.row_lines[r]);
        if (init.rows[r].size() != 2) throw ConfigError("malformed params_init row " + where);
        ParamSpec p;
        p.name = model::AbsName::parse(init.rows[r][0]);
        p.init = csv::parse_number(init.rows[r][1], where);
        out.push_back(p);
    }
    auto bounds = csv::read_table(bounds_csv);
    for (std::size_t r = 0; r < bounds.rows.size(); ++r) {
        std::string where = "at " + bounds_csv.string() + " line " + std::to_string(bounds.row_lines[r]);
        if (bounds.rows[r].size() != 3) throw ConfigError("malformed params_bounds row " + where);
        model::AbsName name = model::AbsName::parse(bounds.rows[r][0]);
        bool found = false;
        for (auto& p : out) {
            if (p.name == name) {
                p.lb = csv::parse_number(bounds.rows[r][1], where);
                p.ub = csv::parse_number(bounds.rows[r][2], where);
                found = true;
            }
        }
        if (!found) throw ConfigError("bounds for unknown parameter '" + name.str() + "' " + where);
    }
    return out;
}

Priors load_prior_csv(const std::filesystem::path& path) {
    auto table = csv::read_table(path);
    Priors p;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        std::string where = "at " + path.string() + " line " + std::to_string(table.row_lines[r]);
        if (table.rows[r].size() != 3) throw ConfigError("malformed prior row " + where);
        p.names.push_back(model::AbsName::parse(table.rows[r][0]));
        p.mean.push_back(csv::parse_number(table.rows[r][1], where));
        p.std.push_back(csv::parse_number(table.rows[r][2], where));
        if (p.std.back() <= 0.0) throw ConfigError("prior std must be positive " + where);
    }
    return p;
}

int EstimationProblem::n_residuals() const { return static_cast<int>(slots_.size()); }

EstimationProblem build_problem(model::Model& m, std::vector<ExperimentData> experiments,
                                std::vector<ParamSpec> params, const BuildOptions& opts) {
    if (experiments.empty()) throw ConfigError("build_problem: no experiments");
    if (opts.estimator == EstimatorKind::Map && !opts.priors)
        throw ConfigError("the map estimator requires priors");

    EstimationProblem P;
    P.opts_ = opts;

    auto dae = m.setup();
    auto base_vals = m.collect_var_val();

    for (std::size_t e = 0; e < experiments.size(); ++e)
        if (experiments[e].id.empty()) experiments[e].id = "exp-" + std::to_string(e + 1);

    // Decide which initial states are estimated.
    std::vector<model::AbsName> init_names = opts.init_state_names;
    if (opts.estimate_init_variables && init_names.empty()) {
        // default: the measured differential states
        std::set<std::string> seen;
        for (const auto& exp : experiments)
            for (const auto& out : exp.outputs) {
                auto loc = dae.try_find(out);
                if (loc && loc->kind == model::VarKind::X && !seen.count(out.str())) {
                    seen.insert(out.str());
                    init_names.push_back(out);
                }
            }
    }
    if (!opts.estimate_init_variables) init_names.clear();

    const std::uint64_t uid = g_est_uid.fetch_add(1);
    const int n_params = static_cast<int>(params.size());
    const int n_init = static_cast<int>(init_names.size());
    const int n_dec = n_params + n_init * static_cast<int>(experiments.size());

    P.theta0_.resize(n_dec);
    P.lb_.resize(n_dec);
    P.ub_.resize(n_dec);
    P.log_flags_.assign(n_dec, false);

    std::vector<expr::Expression> param_syms;
    for (int j = 0; j < n_params; ++j) {
        auto loc = dae.find(params[j].name);
        if (loc.kind != model::VarKind::P)
            throw ConfigError("estimated parameter '" + params[j].name.str() + "' must be a parameter component");
        P.names_.push_back(params[j].name.str());
        bool logf = opts.log_param;
        if (logf && params[j].lb <= 0.0)
            throw ConfigError("log_param requires a strictly positive lower bound for '" + params[j].name.str() +
                              "'");
        P.log_flags_[j] = logf;
        P.theta0_[j] = logf ? std::log(params[j].init) : params[j].init;
        P.lb_[j] = logf ? std::log(params[j].lb) : params[j].lb;
        P.ub_[j] = logf ? std::log(params[j].ub) : params[j].ub;
        param_syms.push_back(expr::make_symbol("@est" + std::to_string(uid) + ":" + params[j].name.str()));
    }

    // Per-experiment initial-state decisions: bounds from the model variable,
    // initial guesses from the model defaults.
    std::vector<std::vector<expr::Expression>> init_syms(experiments.size());
    int dec = n_params;
    for (std::size_t e = 0; e < experiments.size(); ++e) {
        for (int j = 0; j < n_init; ++j) {
            auto loc = dae.find(init_names[j]);
            if (loc.kind != model::VarKind::X)
                throw ConfigError("initial-state decision '" + init_names[j].str() +
                                  "' must be a differential state");
            auto [var, comp] = m.resolve(init_names[j]);
            P.names_.push_back(init_names[j].str() + "@" + experiments[e].id);
            P.theta0_[dec] = var->val[comp];
            P.lb_[dec] = var->lb[comp];
            P.ub_[dec] = var->ub[comp];
            init_syms[e].push_back(
                expr::make_symbol("@est" + std::to_string(uid) + ":" + init_names[j].str() + "@e" +
                                  std::to_string(e)));
            ++dec;
        }
    }

    // Priors on the decision scale (log scale via the delta method).
    if (opts.estimator == EstimatorKind::Map) {
        P.prior_mean_.resize(n_dec);
        P.prior_std_.resize(n_dec);
        auto lookup = [&](const model::AbsName& name, int k) {
            const double* stdv = nullptr;
            const double* mean = opts.priors->find(name, &stdv);
            if (!mean) throw ConfigError("map estimator: no prior given for '" + name.str() + "'");
            if (P.log_flags_[k]) {
                P.prior_mean_[k] = std::log(*mean);
                P.prior_std_[k] = *stdv / *mean;
            } else {
                P.prior_mean_[k] = *mean;
                P.prior_std_[k] = *stdv;
            }
        };
        for (int j = 0; j < n_params; ++j) lookup(params[j].name, j);
        int k = n_params;
        for (std::size_t e = 0; e < experiments.size(); ++e)
            for (int j = 0; j < n_init; ++j) lookup(init_names[j], k++);
    }

    // Residual slots in stacking order and per-experiment simulations.
    std::vector<double> sigmas;
    for (std::size_t e = 0; e < experiments.size(); ++e) {
        auto& exp = experiments[e];
        for (const auto& out : exp.outputs) {
            auto loc = dae.try_find(out);
            if (!loc || (loc->kind != model::VarKind::X && loc->kind != model::VarKind::Z))
                throw ConfigError("unknown output name '" + out.str() + "' in experiment " + exp.id);
        }
        for (std::size_t r = 0; r < exp.times.size(); ++r)
            for (int j = 0; j < static_cast<int>(exp.outputs.size()); ++j)
                if (!is_missing(exp.values(static_cast<Eigen::Index>(r), j))) {
                    P.slots_.push_back({static_cast<int>(e), static_cast<int>(r), j});
                    sigmas.push_back(exp.stds(static_cast<Eigen::Index>(r), j));
                }
    }
    P.sigma_ = Eigen::Map<Eigen::VectorXd>(sigmas.data(), static_cast<Eigen::Index>(sigmas.size()));

    for (std::size_t e = 0; e < experiments.size(); ++e) {
        auto& exp = experiments[e];
        auto pe = std::make_shared<EstimationProblem::PerExperiment>();

        // Simulation grid: batch start, event times and measurement times.
        std::set<double> grid_set{0.0};
        double t_end = exp.horizon_end();
        for (double t : exp.times) grid_set.insert(t);
        for (double t : exp.tvp.times)
            if (t < t_end) grid_set.insert(t);
        std::vector<double> grid(grid_set.begin(), grid_set.end());
        if (grid.size() < 2) throw ConfigError("experiment " + exp.id + " has no usable time span");
        while (static_cast<int>(grid.size()) < opts.min_grid_points) {
            std::size_t widest = 0;
            for (std::size_t i = 1; i + 1 < grid.size(); ++i)
                if (grid[i + 1] - grid[i] > grid[widest + 1] - grid[widest]) widest = i;
            grid.insert(grid.begin() + widest + 1, 0.5 * (grid[widest] + grid[widest + 1]));
        }

        sim::SymbolicSimulation::Config cfg;
        cfg.t_grid = grid;
        cfg.x0 = base_vals.x0;
        cfg.z0 = base_vals.z0;
        cfg.p = base_vals.p;
        cfg.u = base_vals.u;
        cfg.opts = opts.sim_opts;

        // Time-invariant operating parameters.
        for (const auto& [name, value] : exp.tip) {
            auto loc = dae.find(name);
            if (loc.kind == model::VarKind::P)
                cfg.p[loc.pos] = value;
            else if (loc.kind == model::VarKind::U)
                cfg.u[loc.pos] = value;
            else
                throw ConfigError("operating parameter '" + name.str() + "' must be a parameter or control");
        }

        // Time-variant operating schedule, closed with the horizon end.
        if (!exp.tvp.series.empty()) {
            sim::EventSchedule sched = exp.tvp;
            if (sched.times.empty() || sched.times.back() < t_end) sched.times.push_back(t_end);
            for (auto& s : sched.series)
                if (s.values.size() + 1 != sched.times.size())
                    throw ConfigError("operating schedule series '" + s.name.str() +
                                      "' does not cover the horizon of experiment " + exp.id);
            cfg.base_events = sched;
        }

        for (int j = 0; j < n_params; ++j) cfg.p_symbols.push_back({params[j].name, param_syms[j]});
        for (int j = 0; j < n_init; ++j) cfg.x0_symbols.push_back({init_names[j], init_syms[e][j]});

        auto ctx = std::make_shared<sim::SimContext>(dae);
        pe->cfg = cfg;
        pe->ctx = ctx;
        pe->sym = std::make_shared<sim::SymbolicSimulation>(ctx, cfg);

        // decision index for each simulation input
        pe->theta_of_input.assign(pe->sym->n_inputs(), -1);
        const auto& inputs = pe->sym->inputs();
        for (int i = 0; i < static_cast<int>(inputs.size()); ++i) {
            for (int j = 0; j < n_params; ++j)
                if (inputs[i].same_node(param_syms[j])) pe->theta_of_input[i] = j;
            for (int j = 0; j < n_init; ++j)
                if (inputs[i].same_node(init_syms[e][j]))
                    pe->theta_of_input[i] = n_params + static_cast<int>(e) * n_init + j;
        }

        // Residual outputs for this experiment, in slot order.
        std::vector<deriv::OutputSpec> outputs;
        for (std::size_t s = 0; s < P.slots_.size(); ++s) {
            if (P.slots_[s].experiment != static_cast<int>(e)) continue;
            const auto& slot = P.slots_[s];
            int idx = pe->sym->time_index(exp.times[slot.time_row]);
            outputs.push_back({exp.outputs[slot.output], idx});
            pe->residual_output.push_back(static_cast<int>(s));
        }
        pe->n_outputs = static_cast<int>(outputs.size());
        pe->ev = std::make_unique<deriv::DerivativeEvaluator>(pe->sym, outputs, opts.deriv_opts);
        P.per_exp_.push_back(std::move(pe));
    }

    P.experiments_ = std::move(experiments);
    return P;
}

Eigen::VectorXd EstimationProblem::to_original(const Eigen::VectorXd& theta) const {
    Eigen::VectorXd out = theta;
    for (int i = 0; i < out.size(); ++i)
        if (log_flags_[i]) out[i] = std::exp(theta[i]);
    return out;
}

Eigen::VectorXd EstimationProblem::scale_jacobian(const Eigen::VectorXd& theta) const {
    Eigen::VectorXd d = Eigen::VectorXd::Ones(theta.size());
    for (int i = 0; i < theta.size(); ++i)
        if (log_flags_[i]) d[i] = std::exp(theta[i]);
    return d;
}

bool EstimationProblem::eval_outputs(int e, const Eigen::VectorXd& theta, Eigen::VectorXd& vals) const {
    const auto& pe = per_exp_[e];
    Eigen::VectorXd orig = to_original(theta);
    std::vector<double> in(pe->theta_of_input.size());
    for (std::size_t i = 0; i < in.size(); ++i) in[i] = orig[pe->theta_of_input[i]];
    try {
        vals = pe->ev->values(in);
        return vals.allFinite();
    } catch (const std::exception&) {
        return false;
    }
}

bool EstimationProblem::eval_outputs_full(int e, const Eigen::VectorXd& theta, Eigen::VectorXd& vals,
                                          Eigen::MatrixXd& jac) const {
    const auto& pe = per_exp_[e];
    Eigen::VectorXd orig = to_original(theta);
    Eigen::VectorXd scale = scale_jacobian(theta);
    std::vector<double> in(pe->theta_of_input.size());
    for (std::size_t i = 0; i < in.size(); ++i) in[i] = orig[pe->theta_of_input[i]];
    try {
        auto res = pe->ev->evaluate(in);
        vals = res.values;
        jac.setZero(res.values.size(), theta.size());
        for (int i = 0; i < static_cast<int>(in.size()); ++i) {
            int k = pe->theta_of_input[i];
            jac.col(k) += res.jacobian.col(i) * scale[k];
        }
        return vals.allFinite() && jac.allFinite();
    } catch (const std::exception&) {
        return false;
    }
}

void EstimationProblem::dense_sensitivity(const Eigen::VectorXd& theta, int n_points, Eigen::MatrixXd& X,
                                          Eigen::VectorXd& sigma) const {
    std::vector<Eigen::MatrixXd> blocks;
    std::vector<double> sigmas;
    Eigen::VectorXd orig = to_original(theta);
    Eigen::VectorXd scale = scale_jacobian(theta);
    int total_rows = 0;
    for (std::size_t e = 0; e < per_exp_.size(); ++e) {
        const auto& pe = per_exp_[e];
        const auto& exp = experiments_[e];
        double t_end = exp.horizon_end();
        sim::SymbolicSimulation::Config cfg = pe->cfg;
        std::set<double> pts(cfg.t_grid.begin(), cfg.t_grid.end());
        std::vector<double> dense;
        for (int i = 0; i < n_points; ++i) {
            double t = t_end * i / (n_points - 1);
            dense.push_back(t);
            pts.insert(t);
        }
        cfg.t_grid.assign(pts.begin(), pts.end());
        auto sym = std::make_shared<sim::SymbolicSimulation>(pe->ctx, cfg);
        std::vector<deriv::OutputSpec> outs;
        for (double t : dense)
            for (const auto& name : exp.outputs) outs.push_back({name, sym->time_index(t)});
        deriv::DerivativeEvaluator ev(sym, outs, opts_.deriv_opts);
        std::vector<double> in(pe->theta_of_input.size());
        for (std::size_t i = 0; i < in.size(); ++i) in[i] = orig[pe->theta_of_input[i]];
        auto res = ev.evaluate(in);
        Eigen::MatrixXd block = Eigen::MatrixXd::Zero(res.jacobian.rows(), theta.size());
        for (int i = 0; i < static_cast<int>(in.size()); ++i) {
            int k = pe->theta_of_input[i];
            block.col(k) += res.jacobian.col(i) * scale[k];
        }
        // one representative std per output column (first present entry)
        std::vector<double> out_std(exp.outputs.size(), 1.0);
        for (std::size_t j = 0; j < exp.outputs.size(); ++j)
            for (Eigen::Index r = 0; r < exp.stds.rows(); ++r)
                if (!std::isnan(exp.stds(r, static_cast<Eigen::Index>(j)))) {
                    out_std[j] = exp.stds(r, static_cast<Eigen::Index>(j));
                    break;
                }
        for (int r = 0; r < block.rows(); ++r) sigmas.push_back(out_std[r % exp.outputs.size()]);
        total_rows += static_cast<int>(block.rows());
        blocks.push_back(std::move(block));
    }
    X.resize(total_rows, n_decisions());
    int row = 0;
    for (const auto& b : blocks) {
        X.middleRows(row, b.rows()) = b;
        row += static_cast<int>(b.rows());
    }
    sigma = Eigen::Map<Eigen::VectorXd>(sigmas.data(), static_cast<Eigen::Index>(sigmas.size()));
}

bool EstimationProblem::residuals(const Eigen::VectorXd& theta, Eigen::VectorXd& r) const {
    r.resize(n_residuals());
    for (std::size_t e = 0; e < per_exp_.size(); ++e) {
        Eigen::VectorXd vals;
        if (!eval_outputs(static_cast<int>(e), theta, vals)) return false;
        const auto& pe = per_exp_[e];
        for (int k = 0; k < pe->n_outputs; ++k) {
            const auto& slot = slots_[pe->residual_output[k]];
            double y = experiments_[e].values(slot.time_row, slot.output);
            r[pe->residual_output[k]] = y - vals[k];
        }
    }
    return true;
}

bool EstimationProblem::residuals_full(const Eigen::VectorXd& theta, Eigen::VectorXd& r, Eigen::MatrixXd& X) const {
    r.resize(n_residuals());
    X.setZero(n_residuals(), n_decisions());
    for (std::size_t e = 0; e < per_exp_.size(); ++e) {
        Eigen::VectorXd vals;
        Eigen::MatrixXd jac;
        if (!eval_outputs_full(static_cast<int>(e), theta, vals, jac)) return false;
        const auto& pe = per_exp_[e];
        for (int k = 0; k < pe->n_outputs; ++k) {
            const auto& slot = slots_[pe->residual_output[k]];
            double y = experiments_[e].values(slot.time_row, slot.output);
            r[pe->residual_output[k]] = y - vals[k];
            X.row(pe->residual_output[k]) = jac.row(k);
        }
    }
    return true;
}

double EstimationProblem::objective(const Eigen::VectorXd& theta, const Eigen::VectorXd& r) const {
    double f = 0.0;
    for (int i = 0; i < r.size(); ++i) {
        double w = residual_weight(i);
        f += 0.5 * w * r[i] * r[i];
    }
    if (has_prior())
        for (int k = 0; k < theta.size(); ++k) {
            double d = (theta[k] - prior_mean_[k]) / prior_std_[k];
            f += 0.5 * d * d;
        }
    return f;
}

double EstimationProblem::residual_weight(int i) const {
    if (opts_.estimator == EstimatorKind::Ols) return 1.0;
    return 1.0 / (sigma_[i] * sigma_[i]);
}

Eigen::VectorXd EstimationProblem::objective_gradient(const Eigen::VectorXd& theta, const Eigen::VectorXd& r,
                                                      const Eigen::MatrixXd& X) const {
    Eigen::VectorXd wr = r;
    for (int i = 0; i < r.size(); ++i) wr[i] *= residual_weight(i);
    Eigen::VectorXd grad = -X.transpose() * wr; // d r / d theta = -X
    if (has_prior())
        for (int k = 0; k < theta.size(); ++k)
            grad[k] += (theta[k] - prior_mean_[k]) / (prior_std_[k] * prior_std_[k]);
    return grad;
}

nlp::NlpProblem EstimationProblem::make_nlp(const std::vector<OutputConstraint>& constraints) const {
    nlp::NlpProblem p;
    p.n_w = n_decisions();
    p.w_lb = lb_;
    p.w_ub = ub_;

    // Output constraints apply at every measurement time of every experiment.
    struct ConsRow {
        int experiment;
        int time_row;
        model::AbsName name;
    };
    auto cons_rows = std::make_shared<std::vector<ConsRow>>();
    auto cons_evs = std::make_shared<std::vector<std::shared_ptr<deriv::DerivativeEvaluator>>>();
    Eigen::VectorXd g_lb(0), g_ub(0);
    if (!constraints.empty()) {
        std::vector<double> lbs, ubs;
        for (std::size_t e = 0; e < per_exp_.size(); ++e) {
            std::vector<deriv::OutputSpec> outs;
            for (const auto& c : constraints) {
                for (std::size_t r = 0; r < experiments_[e].times.size(); ++r) {
                    int idx = per_exp_[e]->sym->time_index(experiments_[e].times[r]);
                    outs.push_back({c.name, idx});
                    cons_rows->push_back({static_cast<int>(e), static_cast<int>(r), c.name});
                    lbs.push_back(c.lb);
                    ubs.push_back(c.ub);
                }
            }
            cons_evs->push_back(
                std::make_shared<deriv::DerivativeEvaluator>(per_exp_[e]->sym, outs, opts_.deriv_opts));
        }
        g_lb = Eigen::Map<Eigen::VectorXd>(lbs.data(), static_cast<Eigen::Index>(lbs.size()));
        g_ub = Eigen::Map<Eigen::VectorXd>(ubs.data(), static_cast<Eigen::Index>(ubs.size()));
    }
    p.n_g = static_cast<int>(g_lb.size());
    p.g_lb = g_lb;
    p.g_ub = g_ub;

    const EstimationProblem* self = this;
    p.objective = [self](const Eigen::VectorXd& w, double& f, Eigen::VectorXd& grad) {
        Eigen::VectorXd r;
        Eigen::MatrixXd X;
        if (!self->residuals_full(w, r, X)) return false;
        f = self->objective(w, r);
        grad = self->objective_gradient(w, r, X);
        return std::isfinite(f) && grad.allFinite();
    };
    p.objective_value = [self](const Eigen::VectorXd& w, double& f) {
        Eigen::VectorXd r;
        if (!self->residuals(w, r)) return false;
        f = self->objective(w, r);
        return std::isfinite(f);
    };
    if (p.n_g > 0) {
        const int n_per_exp = p.n_g / static_cast<int>(per_exp_.size());
        p.constraints = [self, cons_evs, n_per_exp](const Eigen::VectorXd& w, Eigen::VectorXd& g,
                                                    Eigen::MatrixXd& J) {
            g.resize(n_per_exp * static_cast<int>(self->per_exp_.size()));
            J.setZero(g.size(), w.size());
            Eigen::VectorXd orig = self->to_original(w);
            Eigen::VectorXd scale = self->scale_jacobian(w);
            for (std::size_t e = 0; e < self->per_exp_.size(); ++e) {
                const auto& pe = self->per_exp_[e];
                std::vector<double> in(pe->theta_of_input.size());
                for (std::size_t i = 0; i < in.size(); ++i) in[i] = orig[pe->theta_of_input[i]];
                try {
                    auto res = (*cons_evs)[e]->evaluate(in);
                    g.segment(static_cast<int>(e) * n_per_exp, n_per_exp) = res.values;
                    for (int i = 0; i < static_cast<int>(in.size()); ++i) {
                        int k = pe->theta_of_input[i];
                        J.block(static_cast<int>(e) * n_per_exp, k, n_per_exp, 1) +=
                            res.jacobian.col(i) * scale[k];
                    }
                } catch (const std::exception&) {
                    return false;
                }
            }
            return g.allFinite() && J.allFinite();
        };
        p.constraints_value = [self, cons_evs, n_per_exp](const Eigen::VectorXd& w, Eigen::VectorXd& g) {
            g.resize(n_per_exp * static_cast<int>(self->per_exp_.size()));
            Eigen::VectorXd orig = self->to_original(w);
            for (std::size_t e = 0; e < self->per_exp_.size(); ++e) {
                const auto& pe = self->per_exp_[e];
                std::vector<double> in(pe->theta_of_input.size());
                for (std::size_t i = 0; i < in.size(); ++i) in[i] = orig[pe->theta_of_input[i]];
                try {
                    g.segment(static_cast<int>(e) * n_per_exp, n_per_exp) = (*cons_evs)[e]->values(in);
                } catch (const std::exception&) {
                    return false;
                }
            }
            return g.allFinite();
        };
    }
    return p;
}

namespace {

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& info, bool* rank_deficient) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(info);
    const auto& ev = es.eigenvalues();
    double emax = ev.cwiseAbs().maxCoeff();
    bool deficient = false;
    Eigen::VectorXd inv_ev(ev.size());
    for (int i = 0; i < ev.size(); ++i) {
        if (ev[i] <= 1e-12 * std::max(emax, 1e-300)) {
            deficient = true;
            inv_ev[i] = 0.0; // pseudo-inverse on the deficient subspace
        } else {
            inv_ev[i] = 1.0 / ev[i];
        }
    }
    if (rank_deficient) *rank_deficient = deficient;
    return es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace

Eigen::MatrixXd covariance_ols(const Eigen::MatrixXd& X, bool* rank_deficient, bool sigma2_correction,
                               double ssr) {
    Eigen::MatrixXd cov = spd_inverse(X.transpose() * X, rank_deficient);
    if (sigma2_correction) {
        double dof = static_cast<double>(X.rows() - X.cols());
        if (dof > 0) cov *= ssr / dof;
    }
    return cov;
}

Eigen::MatrixXd covariance_ml(const Eigen::MatrixXd& X, const Eigen::VectorXd& sigma, bool* rank_deficient) {
    Eigen::MatrixXd Xs = sigma.cwiseInverse().asDiagonal() * X;
    return spd_inverse(Xs.transpose() * Xs, rank_deficient);
}

Eigen::MatrixXd covariance_map(const Eigen::MatrixXd& X, const Eigen::VectorXd& sigma,
                               const Eigen::MatrixXd& prior_cov, bool* rank_deficient) {
    Eigen::MatrixXd Xs = sigma.cwiseInverse().asDiagonal() * X;
    bool prior_deficient = false;
    Eigen::MatrixXd prior_prec = spd_inverse(prior_cov, &prior_deficient);
    return spd_inverse(Xs.transpose() * Xs + prior_prec, rank_deficient);
}

void post_process(const EstimationProblem& problem, EstimationResult& result) {
    const Eigen::VectorXd theta = result.sol.w;
    Eigen::VectorXd r;
    Eigen::MatrixXd X;
    if (!problem.residuals_full(theta, r, X))
        throw NumericalError("post_process: residual evaluation failed at the solution");

    // The dense variant evaluates the information over uniformly spaced stored
    // time points rather than only the measurement rows.
    Eigen::VectorXd sig_eff = problem.sigmas();
    if (problem.ci_dense_grid_points() > 0)
        problem.dense_sensitivity(theta, problem.ci_dense_grid_points(), X, sig_eff);

    bool deficient = false;
    Eigen::MatrixXd cov_theta;
    switch (problem.estimator()) {
    case EstimatorKind::Ols:
        cov_theta = covariance_ols(X, &deficient);
        break;
    case EstimatorKind::Ml:
        cov_theta = covariance_ml(X, sig_eff, &deficient);
        break;
    case EstimatorKind::Map: {
        Eigen::VectorXd pstd = problem.prior_std_scaled();
        Eigen::MatrixXd prior_cov = pstd.cwiseProduct(pstd).asDiagonal();
        cov_theta = covariance_map(X, sig_eff, prior_cov, &deficient);
        break;
    }
    }
    // Rescale to the original parameter scale (delta method for log decisions).
    Eigen::VectorXd d = problem.scale_jacobian(theta);
    result.covariance = d.asDiagonal() * cov_theta * d.asDiagonal();
    result.rank_deficient = deficient;
    result.ci_half.resize(cov_theta.rows());
    for (int i = 0; i < cov_theta.rows(); ++i)
        result.ci_half[i] = 1.96 * std::sqrt(std::max(0.0, result.covariance(i, i)));

    // Prediction table and per-experiment diagnostics.
    result.predictions.clear();
    result.per_experiment_rms.assign(problem.experiments().size(), 0.0);
    std::vector<int> counts(problem.experiments().size(), 0);
    for (int s = 0; s < problem.n_residuals(); ++s) {
        const auto& slot = problem.slots()[s];
        const auto& exp = problem.experiments()[slot.experiment];
        double y = exp.values(slot.time_row, slot.output);
        result.predictions.push_back(
            {exp.id, exp.times[slot.time_row], exp.outputs[slot.output], y, y - r[s]});
        result.per_experiment_rms[slot.experiment] += r[s] * r[s];
        counts[slot.experiment]++;
    }
    for (std::size_t e = 0; e < counts.size(); ++e)
        if (counts[e] > 0) result.per_experiment_rms[e] = std::sqrt(result.per_experiment_rms[e] / counts[e]);
    result.worst_experiment = 0;
    for (std::size_t e = 1; e < result.per_experiment_rms.size(); ++e)
        if (result.per_experiment_rms[e] > result.per_experiment_rms[result.worst_experiment])
            result.worst_experiment = static_cast<int>(e);
}

EstimationResult estimate(const EstimationProblem& problem, const nlp::SqpOptions& solver_opts,
                          const std::vector<OutputConstraint>& constraints, bool diagnose,
                          const std::optional<Eigen::VectorXd>& theta0) {
    auto p = problem.make_nlp(constraints);
    EstimationResult result;
    result.names = problem.decision_names();
    result.sol = nlp::sqp_solve(p, theta0 ? *theta0 : problem.initial(), solver_opts);
    result.estimates = problem.to_original(result.sol.w);
    result.objective = result.sol.f;
    post_process(problem, result);
    if (diagnose) {
        fprintf(stderr, "estimation diagnostics: status=%s, objective=%.6g\n",
                nlp::status_name(result.sol.status).c_str(), result.objective);
        for (std::size_t e = 0; e < result.per_experiment_rms.size(); ++e)
            fprintf(stderr, "  experiment %s: residual rms %.6g%s\n", problem.experiments()[e].id.c_str(),
                    result.per_experiment_rms[e],
                    static_cast<int>(e) == result.worst_experiment ? "  (worst fit)" : "");
    }
    return result;
}

void write_estimates_csv(const std::filesystem::path& path, const EstimationResult& r) {
    csv::Writer out(path);
    out.row({"name", "estimate", "ci_half"});
    for (std::size_t i = 0; i < r.names.size(); ++i)
        out.row({r.names[i], csv::format(r.estimates[static_cast<Eigen::Index>(i)]),
                 csv::format(r.ci_half[static_cast<Eigen::Index>(i)])});
}

void write_covariance_csv(const std::filesystem::path& path, const EstimationResult& r) {
    csv::Writer out(path);
    std::vector<std::string> header{"name"};
    header.insert(header.end(), r.names.begin(), r.names.end());
    out.row(header);
    for (std::size_t i = 0; i < r.names.size(); ++i) {
        std::vector<std::string> row{r.names[i]};
        for (std::size_t j = 0; j < r.names.size(); ++j)
            row.push_back(csv::format(r.covariance(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
        out.row(row);
    }
}

void write_predictions_csv(const std::filesystem::path& path, const EstimationResult& r) {
    csv::Writer out(path);
    out.row({"experiment", "time", "output", "measured", "predicted"});
    for (const auto& p : r.predictions)
        out.row({p.experiment, csv::format(p.time), p.output.str(), csv::format(p.measured),
                 csv::format(p.predicted)});
}

} // namespace eoc::estim
