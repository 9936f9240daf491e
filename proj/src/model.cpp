#include "eoc/model.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "eoc/errors.hpp"

namespace eoc::model {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
std::atomic<std::uint64_t> g_var_uid{0};
} // namespace

std::string kind_name(VarKind k) {
    switch (k) {
    case VarKind::X: return "x";
    case VarKind::Z: return "z";
    case VarKind::P: return "p";
    case VarKind::U: return "u";
    }
    return "?";
}

std::string AbsName::str() const {
    std::string s = path + "[";
    if (label) s += *label + ":";
    s += std::to_string(index) + "]";
    return s;
}

AbsName AbsName::parse(const std::string& text) {
    AbsName a;
    auto lb = text.find('[');
    if (lb == std::string::npos) {
        a.path = text;
        a.index = 0;
        return a;
    }
    if (text.back() != ']') throw ConfigError("malformed absolute name: " + text);
    a.path = text.substr(0, lb);
    std::string inner = text.substr(lb + 1, text.size() - lb - 2);
    auto colon = inner.rfind(':');
    std::string idx = inner;
    if (colon != std::string::npos) {
        a.label = inner.substr(0, colon);
        idx = inner.substr(colon + 1);
    }
    try {
        a.index = std::stoi(idx);
    } catch (...) {
        throw ConfigError("malformed absolute name index: " + text);
    }
    return a;
}

int Variable::component(const std::optional<std::string>& label, int i) const {
    if (label) {
        if (labels.empty())
            throw ConfigError("variable '" + name + "' is not labeled but was addressed with label '" + *label + "'");
        auto it = std::find(labels.begin(), labels.end(), *label);
        if (it == labels.end())
            throw ConfigError("variable '" + name + "' has no label '" + *label + "'");
        int li = static_cast<int>(it - labels.begin());
        if (i < 0 || i >= per_label_size)
            throw ConfigError("index " + std::to_string(i) + " out of range for variable '" + name + "'");
        return li * per_label_size + i;
    }
    if (!labels.empty())
        throw ConfigError("variable '" + name + "' is labeled; address it as (label, index)");
    if (i < 0 || i >= size())
        throw ConfigError("index " + std::to_string(i) + " out of range for variable '" + name + "'");
    return i;
}

DaeProblem::Loc DaeProblem::find(const AbsName& name) const {
    auto loc = try_find(name);
    if (!loc) throw ConfigError("unknown variable component: " + name.str());
    return *loc;
}

std::optional<DaeProblem::Loc> DaeProblem::try_find(const AbsName& name) const {
    std::string key = name.str();
    if (auto it = x_index.find(key); it != x_index.end()) return Loc{VarKind::X, it->second};
    if (auto it = z_index.find(key); it != z_index.end()) return Loc{VarKind::Z, it->second};
    if (auto it = p_index.find(key); it != p_index.end()) return Loc{VarKind::P, it->second};
    if (auto it = u_index.find(key); it != u_index.end()) return Loc{VarKind::U, it->second};
    return std::nullopt;
}

Model::Model(std::string name) : name_(std::move(name)) {
    if (name_.empty()) throw ConfigError("model name must be nonempty");
    if (name_.find('.') != std::string::npos)
        throw ConfigError("model name must not contain '.': " + name_);
}

void Model::check_name_free(const std::string& name) const {
    if (var_by_name_.count(name))
        throw ConfigError("name '" + name + "' already used by a variable in model '" + name_ + "'");
    for (const auto& s : submodels_)
        if (s->name() == name)
            throw ConfigError("name '" + name + "' already used by a submodel in model '" + name_ + "'");
}

Model& Model::add_submodel(std::unique_ptr<Model> sub) {
    check_name_free(sub->name());
    submodels_.push_back(std::move(sub));
    setup_done_ = false;
    return *submodels_.back();
}

Model& Model::submodel(const std::string& name) {
    for (auto& s : submodels_)
        if (s->name() == name) return *s;
    throw ConfigError("no submodel '" + name + "' in model '" + name_ + "'");
}

const Model& Model::submodel(const std::string& name) const {
    return const_cast<Model*>(this)->submodel(name);
}

expr::ExpressionVector Model::add_var(VarKind kind, const std::string& name, AddVar opts) {
    if (name.empty()) throw ConfigError("variable name must be nonempty");
    if (name.find('.') != std::string::npos || name.find('[') != std::string::npos)
        throw ConfigError("variable name must not contain '.' or '[': " + name);
    check_name_free(name);
    if (opts.m < 1) throw ConfigError("variable '" + name + "': m must be >= 1");

    auto v = std::make_unique<Variable>();
    v->kind = kind;
    v->name = name;
    v->per_label_size = opts.m;
    v->labels = opts.labels;
    int n = v->size();

    auto fill = [&](std::vector<double> given, double fallback, const char* what) {
        if (given.empty()) return std::vector<double>(n, fallback);
        if (given.size() == 1) return std::vector<double>(n, given[0]);
        if (static_cast<int>(given.size()) != n)
            throw ConfigError("variable '" + name + "': " + what + " length " + std::to_string(given.size()) +
                              " does not match size " + std::to_string(n));
        return given;
    };
    v->val = fill(opts.val, 0.0, "val");
    v->lb = fill(opts.lb, -kInf, "lb");
    v->ub = fill(opts.ub, kInf, "ub");
    for (int i = 0; i < n; ++i)
        if (v->lb[i] > v->val[i] || v->val[i] > v->ub[i])
            throw ConfigError("variable '" + name + "': val outside [lb, ub] at component " + std::to_string(i));

    std::uint64_t uid = g_var_uid.fetch_add(1);
    v->symbols.reserve(n);
    for (int i = 0; i < n; ++i)
        v->symbols.push_back(expr::make_symbol("@" + std::to_string(uid) + "." + name + "[" + std::to_string(i) + "]"));

    Variable* raw = v.get();
    variables_.push_back(std::move(v));
    var_by_name_[name] = raw;
    setup_done_ = false;
    return raw->symbols;
}

void Model::add_eq(EqKind kind, const std::string& target, expr::ExpressionVector rhs) {
    if (kind == EqKind::Ode) {
        auto it = var_by_name_.find(target);
        if (it == var_by_name_.end())
            throw ConfigError("ode equation targets unknown variable '" + target + "'");
        if (it->second->kind != VarKind::X)
            throw ConfigError("ode equation must target an x variable, but '" + target + "' has kind " +
                              kind_name(it->second->kind));
        if (static_cast<int>(rhs.size()) != it->second->size())
            throw ConfigError("ode for '" + target + "': got " + std::to_string(rhs.size()) +
                              " rows, variable has size " + std::to_string(it->second->size()));
        for (const auto& e : equations_)
            if (e.kind == EqKind::Ode && e.target == target)
                throw ConfigError("variable '" + target + "' already has an ode equation");
    } else {
        if (rhs.empty()) throw ConfigError("alg equation '" + target + "' has no residuals");
    }
    equations_.push_back({kind, target, std::move(rhs)});
    setup_done_ = false;
}

void Model::add_eq(EqKind kind, const std::string& target, const expr::Expression& rhs) {
    add_eq(kind, target, expr::ExpressionVector{rhs});
}

Variable& Model::var_obj(const std::string& name) {
    auto it = var_by_name_.find(name);
    if (it == var_by_name_.end())
        throw ConfigError("no variable '" + name + "' in model '" + name_ + "'");
    return *it->second;
}

const Variable& Model::var_obj(const std::string& name) const {
    return const_cast<Model*>(this)->var_obj(name);
}

void Model::visit_impl(const std::string& prefix, const std::function<void(const std::string&, Variable&)>& fn) {
    std::string path = prefix.empty() ? name_ : prefix + "." + name_;
    for (auto& v : variables_) fn(path + "." + v->name, *v);
    for (auto& s : submodels_) s->visit_impl(path, fn);
}

void Model::visit(const std::function<void(const std::string&, Variable&)>& fn) {
    visit_impl("", fn);
}

void Model::visit(const std::function<void(const std::string&, const Variable&)>& fn) const {
    const_cast<Model*>(this)->visit_impl("", [&](const std::string& p, Variable& v) { fn(p, v); });
}

DaeProblem Model::setup() {
    DaeProblem dae;

    // Depth-first flattening: parent variables before children, declaration order.
    struct Entry {
        std::string path;
        Model* model;
    };
    std::vector<Entry> order;
    std::function<void(Model&, const std::string&)> walk = [&](Model& m, const std::string& prefix) {
        std::string path = prefix.empty() ? m.name_ : prefix + "." + m.name_;
        order.push_back({path, &m});
        for (auto& s : m.submodels_) walk(*s, path);
    };
    walk(*this, "");

    expr::SubstitutionMap rename;
    auto add_components = [&](const std::string& path, Variable& v, expr::ExpressionVector& vec,
                              std::vector<AbsName>& names, std::map<std::string, int>& index) {
        for (int i = 0; i < v.size(); ++i) {
            AbsName abs;
            abs.path = path + "." + v.name;
            if (!v.labels.empty()) {
                abs.label = v.labels[i / v.per_label_size];
                abs.index = i % v.per_label_size;
            } else {
                abs.index = i;
            }
            expr::Expression sym = expr::make_symbol(abs.str());
            rename.set(v.symbols[i], sym);
            index[abs.str()] = static_cast<int>(vec.size());
            vec.push_back(sym);
            names.push_back(abs);
        }
    };

    for (auto& [path, m] : order) {
        for (auto& v : m->variables_) {
            switch (v->kind) {
            case VarKind::X: add_components(path, *v, dae.x, dae.x_names, dae.x_index); break;
            case VarKind::Z: add_components(path, *v, dae.z, dae.z_names, dae.z_index); break;
            case VarKind::P: add_components(path, *v, dae.p, dae.p_names, dae.p_index); break;
            case VarKind::U: add_components(path, *v, dae.u, dae.u_names, dae.u_index); break;
            }
        }
    }

    // Ode rows aligned with x components; alg rows appended in declaration order.
    dae.ode.resize(dae.x.size());
    std::vector<bool> has_ode(dae.x.size(), false);
    for (auto& [path, m] : order) {
        for (const auto& eq : m->equations_) {
            if (eq.kind == EqKind::Ode) {
                Variable& v = m->var_obj(eq.target);
                AbsName first;
                first.path = path + "." + v.name;
                if (!v.labels.empty()) first.label = v.labels[0];
                first.index = 0;
                int pos = dae.x_index.at(first.str());
                for (int i = 0; i < v.size(); ++i) {
                    dae.ode[pos + i] = expr::substitute(eq.rhs[i], rename);
                    has_ode[pos + i] = true;
                }
            } else {
                bool mentions_z = false;
                for (const auto& r : eq.rhs) {
                    auto syms = expr::free_symbols({expr::substitute(r, rename)});
                    for (const auto& s : syms)
                        if (dae.z_index.count(s.symbol_name())) mentions_z = true;
                }
                if (!mentions_z)
                    throw ConfigError("alg equation '" + eq.target + "' in model '" + m->name_ +
                                      "' references no algebraic (z) variable");
                for (const auto& r : eq.rhs) dae.alg.push_back(expr::substitute(r, rename));
            }
        }
    }

    for (std::size_t i = 0; i < has_ode.size(); ++i)
        if (!has_ode[i])
            throw ConfigError("x component " + dae.x_names[i].str() + " has no ode equation");
    if (dae.alg.size() != dae.z.size())
        throw ConfigError("algebraic equation count " + std::to_string(dae.alg.size()) +
                          " does not match z component count " + std::to_string(dae.z.size()));

    // Every symbol appearing in the equations must be housed in x/z/p/u.
    expr::ExpressionVector all_rhs = dae.ode;
    all_rhs.insert(all_rhs.end(), dae.alg.begin(), dae.alg.end());
    for (const auto& s : expr::free_symbols(all_rhs)) {
        std::string n = s.symbol_name();
        if (!dae.x_index.count(n) && !dae.z_index.count(n) && !dae.p_index.count(n) && !dae.u_index.count(n))
            throw ConfigError("symbol used but never declared in this model tree: " + n);
    }

    dae.local_to_absolute = rename;
    setup_done_ = true;
    return dae;
}

CollectedValues Model::collect_var_val() const {
    CollectedValues out;
    visit([&](const std::string&, const Variable& v) {
        std::vector<double>* dst = nullptr;
        switch (v.kind) {
        case VarKind::X: dst = &out.x0; break;
        case VarKind::Z: dst = &out.z0; break;
        case VarKind::P: dst = &out.p; break;
        case VarKind::U: dst = &out.u; break;
        }
        dst->insert(dst->end(), v.val.begin(), v.val.end());
    });
    return out;
}

std::pair<Variable*, int> Model::resolve(const AbsName& name) {
    std::vector<std::string> segments;
    std::string cur;
    for (char c : name.path) {
        if (c == '.') {
            segments.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    segments.push_back(cur);
    if (segments.size() < 2 || segments.front() != name_)
        throw ConfigError("unknown path segment in '" + name.path + "' (expected root '" + name_ + "')");
    Model* m = this;
    for (std::size_t i = 1; i + 1 < segments.size(); ++i) {
        bool found = false;
        for (auto& s : m->submodels_) {
            if (s->name() == segments[i]) {
                m = s.get();
                found = true;
                break;
            }
        }
        if (!found) throw ConfigError("unknown path segment '" + segments[i] + "' in '" + name.path + "'");
    }
    auto it = m->var_by_name_.find(segments.back());
    if (it == m->var_by_name_.end())
        throw ConfigError("unknown variable '" + segments.back() + "' in '" + name.path + "'");
    Variable* v = it->second;
    return {v, v->component(name.label, name.index)};
}

std::pair<const Variable*, int> Model::resolve(const AbsName& name) const {
    auto r = const_cast<Model*>(this)->resolve(name);
    return {r.first, r.second};
}

double Model::value(const AbsName& name) const {
    auto [v, i] = resolve(name);
    return v->val[i];
}

void Model::set_value(const AbsName& name, double value) {
    auto [v, i] = resolve(name);
    v->val[i] = value;
}

void Model::load_values_and_trajectory_xz(const Eigen::MatrixXd& xf, const Eigen::MatrixXd& zf,
                                          const std::vector<double>& time_points) {
    int nt = static_cast<int>(time_points.size());
    int nx = 0, nz = 0;
    visit([&](const std::string&, const Variable& v) {
        if (v.kind == VarKind::X) nx += v.size();
        if (v.kind == VarKind::Z) nz += v.size();
    });
    if (xf.rows() != nt || xf.cols() != nx)
        throw ConfigError("x trajectory shape mismatch: got " + std::to_string(xf.rows()) + "x" +
                          std::to_string(xf.cols()) + ", expected " + std::to_string(nt) + "x" + std::to_string(nx));
    if (zf.rows() != nt || zf.cols() != nz)
        throw ConfigError("z trajectory shape mismatch: got " + std::to_string(zf.rows()) + "x" +
                          std::to_string(zf.cols()) + ", expected " + std::to_string(nt) + "x" + std::to_string(nz));

    int ox = 0, oz = 0;
    visit([&](const std::string&, Variable& v) {
        if (v.kind != VarKind::X && v.kind != VarKind::Z) return;
        const Eigen::MatrixXd& src = v.kind == VarKind::X ? xf : zf;
        int& off = v.kind == VarKind::X ? ox : oz;
        VarTrajectory t;
        t.time = time_points;
        t.values = src.middleCols(off, v.size());
        for (int i = 0; i < v.size(); ++i) v.val[i] = t.values(nt - 1, i);
        v.trajectory = std::move(t);
        off += v.size();
    });
}

void Model::take_snapshot(const std::string& label) {
    std::vector<Snapshot> snaps;
    visit([&](const std::string&, const Variable& v) {
        snaps.push_back({v.val, v.lb, v.ub, v.trajectory});
    });
    snapshots_[label] = std::move(snaps);
}

void Model::rewind_to_snapshot(const std::string& label) {
    auto it = snapshots_.find(label);
    if (it == snapshots_.end()) throw ConfigError("no snapshot with label '" + label + "'");
    std::size_t i = 0;
    const auto& snaps = it->second;
    visit([&](const std::string&, Variable& v) {
        const Snapshot& s = snaps.at(i++);
        v.val = s.val;
        v.lb = s.lb;
        v.ub = s.ub;
        v.trajectory = s.trajectory;
    });
}

namespace {

// JSON has no literal for infinities, so bound arrays encode non-finite entries
// as strings.
nlohmann::ordered_json encode_reals(const std::vector<double>& vals) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (double v : vals) {
        if (std::isfinite(v))
            arr.push_back(v);
        else if (std::isnan(v))
            arr.push_back("nan");
        else
            arr.push_back(v > 0 ? "inf" : "-inf");
    }
    return arr;
}

std::vector<double> decode_reals(const nlohmann::ordered_json& arr) {
    std::vector<double> out;
    out.reserve(arr.size());
    for (const auto& e : arr) {
        if (e.is_string()) {
            std::string s = e.get<std::string>();
            if (s == "inf")
                out.push_back(std::numeric_limits<double>::infinity());
            else if (s == "-inf")
                out.push_back(-std::numeric_limits<double>::infinity());
            else
                out.push_back(std::numeric_limits<double>::quiet_NaN());
        } else {
            out.push_back(e.get<double>());
        }
    }
    return out;
}

nlohmann::ordered_json variable_to_json(const Variable& v) {
    nlohmann::ordered_json j;
    j["val"] = encode_reals(v.val);
    j["lb"] = encode_reals(v.lb);
    j["ub"] = encode_reals(v.ub);
    if (v.trajectory) {
        nlohmann::ordered_json t;
        t["time"] = v.trajectory->time;
        std::vector<std::vector<double>> rows;
        for (Eigen::Index r = 0; r < v.trajectory->values.rows(); ++r) {
            std::vector<double> row(v.trajectory->values.cols());
            for (Eigen::Index c = 0; c < v.trajectory->values.cols(); ++c) row[c] = v.trajectory->values(r, c);
            rows.push_back(std::move(row));
        }
        t["values"] = rows;
        j["trajectory"] = t;
    }
    return j;
}

void variable_from_json(const nlohmann::ordered_json& j, Variable& v) {
    auto get_vec = [&](const char* key) {
        std::vector<double> out = decode_reals(j.at(key));
        if (static_cast<int>(out.size()) != v.size())
            throw ConfigError("loaded '" + std::string(key) + "' for variable '" + v.name + "' has wrong length");
        return out;
    };
    v.val = get_vec("val");
    v.lb = get_vec("lb");
    v.ub = get_vec("ub");
    if (j.contains("trajectory")) {
        VarTrajectory t;
        t.time = j["trajectory"].at("time").get<std::vector<double>>();
        auto rows = j["trajectory"].at("values").get<std::vector<std::vector<double>>>();
        t.values.resize(static_cast<Eigen::Index>(rows.size()), v.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (static_cast<int>(rows[r].size()) != v.size())
                throw ConfigError("loaded trajectory row has wrong width for variable '" + v.name + "'");
            for (int c = 0; c < v.size(); ++c) t.values(static_cast<Eigen::Index>(r), c) = rows[r][c];
        }
        v.trajectory = std::move(t);
    } else {
        v.trajectory.reset();
    }
}

} // namespace

void Model::dump(const std::filesystem::path& path) const {
    std::function<nlohmann::ordered_json(const Model&)> encode = [&](const Model& m) {
        nlohmann::ordered_json j;
        j["name"] = m.name_;
        nlohmann::ordered_json vars = nlohmann::ordered_json::object();
        for (const auto& v : m.variables_) vars[v->name] = variable_to_json(*v);
        j["variables"] = vars;
        nlohmann::ordered_json subs = nlohmann::ordered_json::array();
        for (const auto& s : m.submodels_) subs.push_back(encode(*s));
        j["submodels"] = subs;
        return j;
    };
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write file: " + path.string());
    out << encode(*this).dump(2) << "\n";
}

void Model::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open file: " + path.string());
    nlohmann::ordered_json j;
    in >> j;
    std::function<void(const nlohmann::ordered_json&, Model&)> decode = [&](const nlohmann::ordered_json& node,
                                                                            Model& m) {
        if (node.at("name").get<std::string>() != m.name_)
            throw ConfigError("model name mismatch on load: file has '" + node.at("name").get<std::string>() +
                              "', model is '" + m.name_ + "'");
        for (auto& v : m.variables_) {
            if (!node.at("variables").contains(v->name))
                throw ConfigError("loaded file is missing variable '" + v->name + "'");
            variable_from_json(node.at("variables").at(v->name), *v);
        }
        const auto& subs = node.at("submodels");
        if (subs.size() != m.submodels_.size())
            throw ConfigError("loaded file has a different submodel count for '" + m.name_ + "'");
        for (std::size_t i = 0; i < m.submodels_.size(); ++i) decode(subs.at(i), *m.submodels_[i]);
    };
    decode(j, *this);
}

} // namespace eoc::model
