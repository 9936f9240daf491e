#include "eoc/expr.hpp"

#include <cmath>
#include <mutex>
#include <sstream>
#include <unordered_map>

namespace eoc::expr {

bool is_unary(OpCode op) {
    switch (op) {
    case OpCode::Neg:
    case OpCode::Sin:
    case OpCode::Cos:
    case OpCode::Exp:
    case OpCode::Ln:
    case OpCode::Sqrt:
        return true;
    default:
        return false;
    }
}

bool is_binary(OpCode op) {
    switch (op) {
    case OpCode::Add:
    case OpCode::Sub:
    case OpCode::Mul:
    case OpCode::Div:
    case OpCode::Pow:
        return true;
    default:
        return false;
    }
}

namespace {

// Global intern table. Symbol nodes are unique per name, so identity comparison
// of nodes doubles as name equality. Guarded for concurrent model construction.
struct SymbolTable {
    std::mutex mu;
    std::unordered_map<std::string, std::shared_ptr<const Node>> by_name;
    std::vector<std::string> names; // id -> name

    static SymbolTable& instance() {
        static SymbolTable table;
        return table;
    }
};

std::shared_ptr<const Node> make_const_node(double v) {
    auto n = std::make_shared<Node>();
    n->op = OpCode::Const;
    n->value = v;
    return n;
}

std::shared_ptr<const Node> make_unary_node(OpCode op, std::shared_ptr<const Node> a) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->a = std::move(a);
    return n;
}

std::shared_ptr<const Node> make_binary_node(OpCode op, std::shared_ptr<const Node> a,
                                             std::shared_ptr<const Node> b) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->a = std::move(a);
    n->b = std::move(b);
    return n;
}

bool is_const(const Expression& e, double v) { return e.is_constant() && e.constant_value() == v; }

double apply_unary(OpCode op, double x) {
    switch (op) {
    case OpCode::Neg: return -x;
    case OpCode::Sin: return std::sin(x);
    case OpCode::Cos: return std::cos(x);
    case OpCode::Exp: return std::exp(x);
    case OpCode::Ln: return std::log(x);
    case OpCode::Sqrt: return std::sqrt(x);
    default: throw std::logic_error("apply_unary: bad op");
    }
}

double apply_binary(OpCode op, double x, double y) {
    switch (op) {
    case OpCode::Add: return x + y;
    case OpCode::Sub: return x - y;
    case OpCode::Mul: return x * y;
    case OpCode::Div: return x / y;
    case OpCode::Pow: return std::pow(x, y);
    default: throw std::logic_error("apply_binary: bad op");
    }
}

} // namespace

Expression::Expression() : node_(make_const_node(0.0)) {}
Expression::Expression(double v) : node_(make_const_node(v)) {}

double Expression::constant_value() const {
    if (!is_constant()) throw std::logic_error("expression is not a constant");
    return node_->value;
}

std::uint32_t Expression::symbol_id() const {
    if (!is_symbol()) throw std::logic_error("expression is not a symbol");
    return node_->sym;
}

std::string Expression::symbol_name() const { return expr::symbol_name(symbol_id()); }

Expression make_symbol(std::string_view name) {
    if (name.empty()) throw ConfigError("symbol name must be nonempty");
    auto& table = SymbolTable::instance();
    std::scoped_lock lock(table.mu);
    std::string key(name);
    auto it = table.by_name.find(key);
    if (it != table.by_name.end()) return Expression(it->second);
    auto n = std::make_shared<Node>();
    n->op = OpCode::Sym;
    n->sym = static_cast<std::uint32_t>(table.names.size());
    table.names.push_back(key);
    table.by_name.emplace(std::move(key), n);
    return Expression(n);
}

std::string symbol_name(std::uint32_t id) {
    auto& table = SymbolTable::instance();
    std::scoped_lock lock(table.mu);
    return table.names.at(id);
}

Expression operator-(const Expression& a) {
    if (a.is_constant()) return Expression(-a.constant_value());
    if (a.node()->op == OpCode::Neg) return Expression(a.node()->a);
    return Expression(make_unary_node(OpCode::Neg, a.node_ptr()));
}

Expression operator+(const Expression& a, const Expression& b) {
    if (a.is_constant() && b.is_constant()) return Expression(a.constant_value() + b.constant_value());
    if (is_const(a, 0.0)) return b;
    if (is_const(b, 0.0)) return a;
    return Expression(make_binary_node(OpCode::Add, a.node_ptr(), b.node_ptr()));
}

Expression operator-(const Expression& a, const Expression& b) {
    if (a.is_constant() && b.is_constant()) return Expression(a.constant_value() - b.constant_value());
    if (is_const(b, 0.0)) return a;
    if (is_const(a, 0.0)) return -b;
    return Expression(make_binary_node(OpCode::Sub, a.node_ptr(), b.node_ptr()));
}

Expression operator*(const Expression& a, const Expression& b) {
    if (a.is_constant() && b.is_constant()) return Expression(a.constant_value() * b.constant_value());
    if (is_const(a, 0.0) || is_const(b, 0.0)) return Expression(0.0);
    if (is_const(a, 1.0)) return b;
    if (is_const(b, 1.0)) return a;
    return Expression(make_binary_node(OpCode::Mul, a.node_ptr(), b.node_ptr()));
}

Expression operator/(const Expression& a, const Expression& b) {
    if (a.is_constant() && b.is_constant() && b.constant_value() != 0.0)
        return Expression(a.constant_value() / b.constant_value());
    if (is_const(b, 1.0)) return a;
    if (is_const(a, 0.0) && !is_const(b, 0.0)) return Expression(0.0);
    return Expression(make_binary_node(OpCode::Div, a.node_ptr(), b.node_ptr()));
}

namespace {
Expression fold_unary(OpCode op, const Expression& a) {
    if (a.is_constant()) {
        double v = apply_unary(op, a.constant_value());
        if (std::isfinite(v)) return Expression(v);
    }
    return Expression(make_unary_node(op, a.node_ptr()));
}
} // namespace

Expression sin(const Expression& a) { return fold_unary(OpCode::Sin, a); }
Expression cos(const Expression& a) { return fold_unary(OpCode::Cos, a); }
Expression exp(const Expression& a) { return fold_unary(OpCode::Exp, a); }
Expression ln(const Expression& a) { return fold_unary(OpCode::Ln, a); }
Expression sqrt(const Expression& a) { return fold_unary(OpCode::Sqrt, a); }

Expression pow(const Expression& a, const Expression& b) {
    if (a.is_constant() && b.is_constant()) {
        double v = std::pow(a.constant_value(), b.constant_value());
        if (std::isfinite(v)) return Expression(v);
    }
    if (is_const(b, 1.0)) return a;
    if (is_const(b, 0.0)) return Expression(1.0);
    if (is_const(a, 1.0)) return Expression(1.0);
    return Expression(make_binary_node(OpCode::Pow, a.node_ptr(), b.node_ptr()));
}

void Bindings::set(const Expression& symbol, double value) { values_[symbol.symbol_id()] = value; }

const double* Bindings::find(std::uint32_t id) const {
    auto it = values_.find(id);
    return it == values_.end() ? nullptr : &it->second;
}

namespace {

double eval_node(const Node* n, const Bindings& b, std::unordered_map<const Node*, double>& memo) {
    auto it = memo.find(n);
    if (it != memo.end()) return it->second;
    double v = 0.0;
    switch (n->op) {
    case OpCode::Const:
        v = n->value;
        break;
    case OpCode::Sym: {
        const double* p = b.find(n->sym);
        if (!p) throw ConfigError("unbound symbol: " + symbol_name(n->sym));
        v = *p;
        break;
    }
    default: {
        double x = eval_node(n->a.get(), b, memo);
        if (is_unary(n->op)) {
            if (n->op == OpCode::Ln && x <= 0.0) throw DomainError("ln of non-positive value");
            if (n->op == OpCode::Sqrt && x < 0.0) throw DomainError("sqrt of negative value");
            v = apply_unary(n->op, x);
        } else {
            double y = eval_node(n->b.get(), b, memo);
            if (n->op == OpCode::Div && y == 0.0) throw DomainError("division by zero");
            v = apply_binary(n->op, x, y);
        }
        if (!std::isfinite(v)) throw DomainError("non-finite value in evaluation");
        break;
    }
    }
    memo.emplace(n, v);
    return v;
}

} // namespace

double evaluate(const Expression& e, const Bindings& b) {
    std::unordered_map<const Node*, double> memo;
    return eval_node(e.node(), b, memo);
}

std::vector<double> evaluate(const ExpressionVector& exprs, const Bindings& b) {
    std::unordered_map<const Node*, double> memo;
    std::vector<double> out;
    out.reserve(exprs.size());
    for (const auto& e : exprs) out.push_back(eval_node(e.node(), b, memo));
    return out;
}

namespace {

Expression diff_node(const std::shared_ptr<const Node>& n, std::uint32_t wrt,
                     std::unordered_map<const Node*, Expression>& memo) {
    auto it = memo.find(n.get());
    if (it != memo.end()) return it->second;
    Expression e(n);
    Expression d;
    switch (n->op) {
    case OpCode::Const:
        d = Expression(0.0);
        break;
    case OpCode::Sym:
        d = Expression(n->sym == wrt ? 1.0 : 0.0);
        break;
    case OpCode::Neg:
        d = -diff_node(n->a, wrt, memo);
        break;
    case OpCode::Sin:
        d = cos(Expression(n->a)) * diff_node(n->a, wrt, memo);
        break;
    case OpCode::Cos:
        d = -sin(Expression(n->a)) * diff_node(n->a, wrt, memo);
        break;
    case OpCode::Exp:
        d = exp(Expression(n->a)) * diff_node(n->a, wrt, memo);
        break;
    case OpCode::Ln:
        d = diff_node(n->a, wrt, memo) / Expression(n->a);
        break;
    case OpCode::Sqrt:
        d = diff_node(n->a, wrt, memo) / (Expression(2.0) * sqrt(Expression(n->a)));
        break;
    case OpCode::Add:
        d = diff_node(n->a, wrt, memo) + diff_node(n->b, wrt, memo);
        break;
    case OpCode::Sub:
        d = diff_node(n->a, wrt, memo) - diff_node(n->b, wrt, memo);
        break;
    case OpCode::Mul:
        d = diff_node(n->a, wrt, memo) * Expression(n->b) + Expression(n->a) * diff_node(n->b, wrt, memo);
        break;
    case OpCode::Div: {
        Expression da = diff_node(n->a, wrt, memo);
        Expression db = diff_node(n->b, wrt, memo);
        Expression bb(n->b);
        d = da / bb - Expression(n->a) * db / (bb * bb);
        break;
    }
    case OpCode::Pow: {
        Expression base(n->a), expo(n->b);
        Expression da = diff_node(n->a, wrt, memo);
        if (expo.is_constant()) {
            double c = expo.constant_value();
            d = Expression(c) * pow(base, Expression(c - 1.0)) * da;
        } else {
            Expression db = diff_node(n->b, wrt, memo);
            d = pow(base, expo) * (db * ln(base) + expo * da / base);
        }
        break;
    }
    }
    memo.emplace(n.get(), d);
    return d;
}

} // namespace

Expression differentiate(const Expression& e, const Expression& wrt) {
    std::unordered_map<const Node*, Expression> memo;
    return diff_node(e.node_ptr(), wrt.symbol_id(), memo);
}

std::vector<ExpressionVector> differentiate(const ExpressionVector& exprs, const ExpressionVector& wrt) {
    std::vector<ExpressionVector> jac(exprs.size());
    for (std::size_t j = 0; j < wrt.size(); ++j) {
        std::uint32_t id = wrt[j].symbol_id();
        std::unordered_map<const Node*, Expression> memo; // shared across rows per column
        for (std::size_t i = 0; i < exprs.size(); ++i) {
            if (j == 0) jac[i].reserve(wrt.size());
            jac[i].push_back(diff_node(exprs[i].node_ptr(), id, memo));
        }
    }
    return jac;
}

void SubstitutionMap::set(const Expression& symbol, const Expression& replacement) {
    map_[symbol.symbol_id()] = replacement;
}

const Expression* SubstitutionMap::find(std::uint32_t id) const {
    auto it = map_.find(id);
    return it == map_.end() ? nullptr : &it->second;
}

namespace {

Expression subst_node(const std::shared_ptr<const Node>& n, const SubstitutionMap& map,
                      std::unordered_map<const Node*, Expression>& memo) {
    auto it = memo.find(n.get());
    if (it != memo.end()) return it->second;
    Expression out(n);
    switch (n->op) {
    case OpCode::Const:
        break;
    case OpCode::Sym: {
        const Expression* rep = map.find(n->sym);
        if (rep) out = *rep;
        break;
    }
    default: {
        Expression a = subst_node(n->a, map, memo);
        bool changed = !a.same_node(Expression(n->a));
        if (is_unary(n->op)) {
            if (changed) {
                switch (n->op) {
                case OpCode::Neg: out = -a; break;
                case OpCode::Sin: out = sin(a); break;
                case OpCode::Cos: out = cos(a); break;
                case OpCode::Exp: out = exp(a); break;
                case OpCode::Ln: out = ln(a); break;
                case OpCode::Sqrt: out = sqrt(a); break;
                default: break;
                }
            }
        } else {
            Expression b = subst_node(n->b, map, memo);
            changed = changed || !b.same_node(Expression(n->b));
            if (changed) {
                switch (n->op) {
                case OpCode::Add: out = a + b; break;
                case OpCode::Sub: out = a - b; break;
                case OpCode::Mul: out = a * b; break;
                case OpCode::Div: out = a / b; break;
                case OpCode::Pow: out = pow(a, b); break;
                default: break;
                }
            }
        }
        break;
    }
    }
    memo.emplace(n.get(), out);
    return out;
}

} // namespace

Expression substitute(const Expression& e, const SubstitutionMap& map) {
    if (map.empty()) return e;
    std::unordered_map<const Node*, Expression> memo;
    return subst_node(e.node_ptr(), map, memo);
}

ExpressionVector substitute(const ExpressionVector& exprs, const SubstitutionMap& map) {
    if (map.empty()) return exprs;
    std::unordered_map<const Node*, Expression> memo;
    ExpressionVector out;
    out.reserve(exprs.size());
    for (const auto& e : exprs) out.push_back(subst_node(e.node_ptr(), map, memo));
    return out;
}

namespace {
void collect_symbols(const Node* n, std::unordered_map<const Node*, bool>& seen, ExpressionVector& out,
                     std::unordered_map<std::uint32_t, bool>& ids) {
    if (seen.count(n)) return;
    seen.emplace(n, true);
    if (n->op == OpCode::Sym) {
        if (!ids.count(n->sym)) {
            ids.emplace(n->sym, true);
            out.push_back(make_symbol(symbol_name(n->sym)));
        }
        return;
    }
    if (n->a) collect_symbols(n->a.get(), seen, out, ids);
    if (n->b) collect_symbols(n->b.get(), seen, out, ids);
}
} // namespace

ExpressionVector free_symbols(const ExpressionVector& exprs) {
    std::unordered_map<const Node*, bool> seen;
    std::unordered_map<std::uint32_t, bool> ids;
    ExpressionVector out;
    for (const auto& e : exprs) collect_symbols(e.node(), seen, out, ids);
    return out;
}

std::string Expression::to_string() const {
    std::ostringstream os;
    const Node* n = node_.get();
    switch (n->op) {
    case OpCode::Const: os << n->value; break;
    case OpCode::Sym: os << expr::symbol_name(n->sym); break;
    case OpCode::Neg: os << "(-" << Expression(n->a).to_string() << ")"; break;
    case OpCode::Sin: os << "sin(" << Expression(n->a).to_string() << ")"; break;
    case OpCode::Cos: os << "cos(" << Expression(n->a).to_string() << ")"; break;
    case OpCode::Exp: os << "exp(" << Expression(n->a).to_string() << ")"; break;
    case OpCode::Ln: os << "ln(" << Expression(n->a).to_string() << ")"; break;
    case OpCode::Sqrt: os << "sqrt(" << Expression(n->a).to_string() << ")"; break;
    case OpCode::Add: os << "(" << Expression(n->a).to_string() << "+" << Expression(n->b).to_string() << ")"; break;
    case OpCode::Sub: os << "(" << Expression(n->a).to_string() << "-" << Expression(n->b).to_string() << ")"; break;
    case OpCode::Mul: os << "(" << Expression(n->a).to_string() << "*" << Expression(n->b).to_string() << ")"; break;
    case OpCode::Div: os << "(" << Expression(n->a).to_string() << "/" << Expression(n->b).to_string() << ")"; break;
    case OpCode::Pow: os << "(" << Expression(n->a).to_string() << "^" << Expression(n->b).to_string() << ")"; break;
    }
    return os.str();
}

CompiledFunction::CompiledFunction(const ExpressionVector& outputs, const ExpressionVector& inputs) {
    n_in_ = inputs.size();
    std::unordered_map<std::uint32_t, std::int32_t> input_slot;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        input_slot[inputs[i].symbol_id()] = static_cast<std::int32_t>(i);

    std::unordered_map<const Node*, std::int32_t> slot_of;
    // Iterative post-order to avoid deep recursion on large graphs.
    struct Frame {
        const Node* n;
        bool expanded;
    };
    std::vector<Frame> stack;
    auto compile = [&](const Node* root) -> std::int32_t {
        stack.push_back({root, false});
        while (!stack.empty()) {
            Frame f = stack.back();
            stack.pop_back();
            if (slot_of.count(f.n)) continue;
            if (!f.expanded) {
                stack.push_back({f.n, true});
                if (f.n->a && !slot_of.count(f.n->a.get())) stack.push_back({f.n->a.get(), false});
                if (f.n->b && !slot_of.count(f.n->b.get())) stack.push_back({f.n->b.get(), false});
                continue;
            }
            Instr ins;
            ins.op = f.n->op;
            if (f.n->op == OpCode::Const) {
                ins.c = f.n->value;
            } else if (f.n->op == OpCode::Sym) {
                auto it = input_slot.find(f.n->sym);
                if (it == input_slot.end())
                    throw ConfigError("compiled function references unbound symbol: " + symbol_name(f.n->sym));
                ins.a = it->second;
            } else {
                ins.a = slot_of.at(f.n->a.get());
                if (f.n->b) ins.b = slot_of.at(f.n->b.get());
            }
            std::int32_t slot = static_cast<std::int32_t>(tape_.size());
            tape_.push_back(ins);
            slot_of.emplace(f.n, slot);
        }
        return slot_of.at(root);
    };
    out_slots_.reserve(outputs.size());
    for (const auto& e : outputs) out_slots_.push_back(compile(e.node()));
    n_slots_ = tape_.size();
}

void CompiledFunction::eval(std::span<const double> in, std::span<double> out) const {
    std::vector<double> scratch;
    eval(in, out, scratch);
}

void CompiledFunction::eval(std::span<const double> in, std::span<double> out,
                            std::vector<double>& scratch) const {
    if (in.size() != n_in_) throw std::logic_error("CompiledFunction: input size mismatch");
    if (out.size() != out_slots_.size()) throw std::logic_error("CompiledFunction: output size mismatch");
    scratch.resize(n_slots_);
    double* s = scratch.data();
    for (std::size_t i = 0; i < tape_.size(); ++i) {
        const Instr& ins = tape_[i];
        switch (ins.op) {
        case OpCode::Const: s[i] = ins.c; break;
        case OpCode::Sym: s[i] = in[static_cast<std::size_t>(ins.a)]; break;
        case OpCode::Neg: s[i] = -s[ins.a]; break;
        case OpCode::Sin: s[i] = std::sin(s[ins.a]); break;
        case OpCode::Cos: s[i] = std::cos(s[ins.a]); break;
        case OpCode::Exp: s[i] = std::exp(s[ins.a]); break;
        case OpCode::Ln: s[i] = std::log(s[ins.a]); break;
        case OpCode::Sqrt: s[i] = std::sqrt(s[ins.a]); break;
        case OpCode::Add: s[i] = s[ins.a] + s[ins.b]; break;
        case OpCode::Sub: s[i] = s[ins.a] - s[ins.b]; break;
        case OpCode::Mul: s[i] = s[ins.a] * s[ins.b]; break;
        case OpCode::Div: s[i] = s[ins.a] / s[ins.b]; break;
        case OpCode::Pow: s[i] = std::pow(s[ins.a], s[ins.b]); break;
        }
    }
    for (std::size_t k = 0; k < out_slots_.size(); ++k) out[k] = s[out_slots_[k]];
}

} // namespace eoc::expr
