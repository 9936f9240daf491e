#ifndef EOC_EXPR_HPP
#define EOC_EXPR_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eoc/errors.hpp"

namespace eoc::expr {

enum class OpCode : std::uint8_t {
    Const,
    Sym,
    Neg,
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
};

bool is_unary(OpCode op);
bool is_binary(OpCode op);

struct Node {
    OpCode op = OpCode::Const;
    double value = 0.0;   // Const only
    std::uint32_t sym = 0; // Sym only (interned id)
    std::shared_ptr<const Node> a, b;
};

// Immutable scalar expression. Copies share the underlying graph; nodes are never
// mutated after construction. Symbols are interned globally: two symbols with the
// same name are the same node.
class Expression {
public:
    Expression();                 // constant 0
    Expression(double v);         // NOLINT: implicit by design, mirrors numeric literals
    explicit Expression(std::shared_ptr<const Node> n) : node_(std::move(n)) {}

    bool is_constant() const { return node_->op == OpCode::Const; }
    bool is_symbol() const { return node_->op == OpCode::Sym; }
    double constant_value() const;
    std::uint32_t symbol_id() const;
    std::string symbol_name() const;

    bool same_node(const Expression& other) const { return node_.get() == other.node_.get(); }

    const Node* node() const { return node_.get(); }
    const std::shared_ptr<const Node>& node_ptr() const { return node_; }

    std::string to_string() const;

private:
    std::shared_ptr<const Node> node_;
};

using ExpressionVector = std::vector<Expression>;

// Interned symbol factory. Empty names are rejected.
Expression make_symbol(std::string_view name);
std::string symbol_name(std::uint32_t id);

// Arithmetic with constant folding (c1 op c2 folds immediately, and the usual
// neutral-element simplifications are applied so derivative graphs stay small).
Expression operator-(const Expression& a);
Expression operator+(const Expression& a, const Expression& b);
Expression operator-(const Expression& a, const Expression& b);
Expression operator*(const Expression& a, const Expression& b);
Expression operator/(const Expression& a, const Expression& b);
Expression sin(const Expression& a);
Expression cos(const Expression& a);
Expression exp(const Expression& a);
Expression ln(const Expression& a);
Expression sqrt(const Expression& a);
Expression pow(const Expression& a, const Expression& b);

// Bindings for evaluation: symbol id -> value.
class Bindings {
public:
    void set(const Expression& symbol, double value);
    void set(std::uint32_t id, double value) { values_[id] = value; }
    const double* find(std::uint32_t id) const;

private:
    std::map<std::uint32_t, double> values_;
};

// Evaluate with domain checks. Throws ConfigError on unbound symbols and
// DomainError on ln(x<=0), sqrt(x<0), division by zero or non-finite results.
double evaluate(const Expression& e, const Bindings& b);
std::vector<double> evaluate(const ExpressionVector& exprs, const Bindings& b);

// Exact symbolic derivative. Non-dependence yields the constant 0.
Expression differentiate(const Expression& e, const Expression& wrt);
// Jacobian: row i is the gradient of exprs[i] over wrt.
std::vector<ExpressionVector> differentiate(const ExpressionVector& exprs, const ExpressionVector& wrt);

// Simultaneous substitution: all mapped symbols are replaced in one pass, so
// {x->y, y->x} swaps rather than chains.
class SubstitutionMap {
public:
    void set(const Expression& symbol, const Expression& replacement);
    const Expression* find(std::uint32_t id) const;
    bool empty() const { return map_.empty(); }

private:
    std::map<std::uint32_t, Expression> map_;
};

Expression substitute(const Expression& e, const SubstitutionMap& map);
ExpressionVector substitute(const ExpressionVector& exprs, const SubstitutionMap& map);

// Distinct symbols appearing in the expressions, in first-encounter (DFS) order.
ExpressionVector free_symbols(const ExpressionVector& exprs);

// Flattened tape evaluator for hot loops. Shared subgraphs are evaluated once.
// eval() is thread-safe; the scratch overload avoids per-call allocation.
class CompiledFunction {
public:
    CompiledFunction() = default;
    // Throws ConfigError if an output references a symbol not listed in inputs.
    CompiledFunction(const ExpressionVector& outputs, const ExpressionVector& inputs);

    std::size_t n_in() const { return n_in_; }
    std::size_t n_out() const { return out_slots_.size(); }

    void eval(std::span<const double> in, std::span<double> out) const;
    void eval(std::span<const double> in, std::span<double> out, std::vector<double>& scratch) const;

private:
    struct Instr {
        OpCode op;
        std::int32_t a = -1;
        std::int32_t b = -1;
        double c = 0.0; // Const payload or input slot (in .a for Sym)
    };
    std::vector<Instr> tape_;
    std::vector<std::int32_t> out_slots_;
    std::size_t n_in_ = 0;
    std::size_t n_slots_ = 0;
};

} // namespace eoc::expr

#endif
