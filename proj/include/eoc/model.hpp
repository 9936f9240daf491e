#ifndef EOC_MODEL_HPP
#define EOC_MODEL_HPP

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "eoc/expr.hpp"

namespace eoc::model {

enum class VarKind { X, Z, P, U };
enum class EqKind { Ode, Alg };

std::string kind_name(VarKind k);

// Absolute variable-component address: dotted model path ending in the local
// variable name, an optional label for labeled variables, and a component index.
// Canonical text form: "path[i]" or "path[label:i]".
struct AbsName {
    std::string path;
    std::optional<std::string> label;
    int index = 0;

    AbsName() = default;
    AbsName(std::string p, int i) : path(std::move(p)), index(i) {}
    AbsName(std::string p, std::string lab, int i) : path(std::move(p)), label(std::move(lab)), index(i) {}

    std::string str() const;
    static AbsName parse(const std::string& text);

    bool operator==(const AbsName& o) const { return path == o.path && label == o.label && index == o.index; }
    bool operator<(const AbsName& o) const {
        if (path != o.path) return path < o.path;
        if (label != o.label) return label < o.label;
        return index < o.index;
    }
};

struct VarTrajectory {
    std::vector<double> time;
    Eigen::MatrixXd values; // time.size() x var.size()
};

class Variable {
public:
    VarKind kind = VarKind::P;
    std::string name;
    int per_label_size = 1;          // m
    std::vector<std::string> labels; // empty for unlabeled variables
    std::vector<double> val, lb, ub; // one entry per component
    std::optional<VarTrajectory> trajectory;
    expr::ExpressionVector symbols;  // instance-unique local symbols

    int size() const {
        return labels.empty() ? per_label_size : per_label_size * static_cast<int>(labels.size());
    }
    // Flat component index; validates label presence and range.
    int component(const std::optional<std::string>& label, int i) const;
};

struct Equation {
    EqKind kind = EqKind::Alg;
    std::string target; // ode: local x-variable name; alg: residual group tag
    expr::ExpressionVector rhs;
};

// Flattened DAE: absolute-named symbols, equations rewritten onto them, and
// index maps from absolute component names to vector positions.
struct DaeProblem {
    expr::ExpressionVector x, z, p, u;
    expr::ExpressionVector ode, alg;
    std::vector<AbsName> x_names, z_names, p_names, u_names;
    std::map<std::string, int> x_index, z_index, p_index, u_index;

    int nx() const { return static_cast<int>(x.size()); }
    int nz() const { return static_cast<int>(z.size()); }
    int np() const { return static_cast<int>(p.size()); }
    int nu() const { return static_cast<int>(u.size()); }

    struct Loc {
        VarKind kind;
        int pos;
    };
    Loc find(const AbsName& name) const;
    std::optional<Loc> try_find(const AbsName& name) const;

    // Substitution from the source model's local symbols to the absolute ones;
    // lets user expressions written with add_var symbols be rebased onto the
    // flattened problem.
    expr::SubstitutionMap local_to_absolute;
};

struct CollectedValues {
    std::vector<double> x0, z0, p, u;
};

struct AddVar {
    int m = 1;
    std::vector<std::string> labels;
    std::vector<double> val; // empty -> zeros; size 1 broadcasts
    std::vector<double> lb;  // empty -> -inf
    std::vector<double> ub;  // empty -> +inf
};

class Model {
public:
    explicit Model(std::string name);

    const std::string& name() const { return name_; }

    Model& add_submodel(std::unique_ptr<Model> sub);
    Model& submodel(const std::string& name);
    const Model& submodel(const std::string& name) const;

    expr::ExpressionVector add_var(VarKind kind, const std::string& name, AddVar opts = {});
    void add_eq(EqKind kind, const std::string& target, expr::ExpressionVector rhs);
    void add_eq(EqKind kind, const std::string& target, const expr::Expression& rhs);

    // Variable object access (the *_obj surface of the API).
    Variable& var_obj(const std::string& name);
    const Variable& var_obj(const std::string& name) const;

    DaeProblem setup();
    bool is_setup() const { return setup_done_; }

    CollectedValues collect_var_val() const;

    std::pair<const Variable*, int> resolve(const AbsName& name) const;
    std::pair<Variable*, int> resolve(const AbsName& name);
    double value(const AbsName& name) const;
    void set_value(const AbsName& name, double v);

    void load_values_and_trajectory_xz(const Eigen::MatrixXd& xf, const Eigen::MatrixXd& zf,
                                       const std::vector<double>& time_points);

    void take_snapshot(const std::string& label);
    void rewind_to_snapshot(const std::string& label);

    void dump(const std::filesystem::path& path) const;
    void load(const std::filesystem::path& path);

    // Flattened-order visitation (parent variables first, then submodels in
    // declaration order). Used by setup/collect/snapshots so all orderings agree.
    void visit(const std::function<void(const std::string& path, const Variable&)>& fn) const;
    void visit(const std::function<void(const std::string& path, Variable&)>& fn);

private:
    struct Snapshot {
        std::vector<double> val, lb, ub;
        std::optional<VarTrajectory> trajectory;
    };

    std::string name_;
    std::vector<std::unique_ptr<Model>> submodels_;
    std::vector<std::unique_ptr<Variable>> variables_; // declaration order
    std::map<std::string, Variable*> var_by_name_;
    std::vector<Equation> equations_;
    std::map<std::string, std::vector<Snapshot>> snapshots_;
    bool setup_done_ = false;

    void check_name_free(const std::string& name) const;
    void visit_impl(const std::string& prefix,
                    const std::function<void(const std::string&, Variable&)>& fn);
};

} // namespace eoc::model

#endif
