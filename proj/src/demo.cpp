#include "eoc/demo.hpp"

namespace eoc::demo {

std::unique_ptr<model::Model> make_simple_dae(const std::string& name) {
    using model::AddVar;
    using model::EqKind;
    using model::VarKind;

    auto m = std::make_unique<model::Model>(name);
    auto xg = m->add_var(VarKind::X, "xg", AddVar{.m = 2, .val = {0.0, 1.0}});
    auto obj = m->add_var(VarKind::X, "obj", AddVar{.val = {0.0}});
    auto zg = m->add_var(VarKind::Z, "zg");
    auto pg = m->add_var(VarKind::P, "pg", AddVar{.val = {1.0}});
    auto ug = m->add_var(VarKind::U, "ug", AddVar{.val = {0.0}});

    m->add_eq(EqKind::Ode, "xg", {zg[0] * xg[0] - xg[1] + ug[0], xg[0]});
    m->add_eq(EqKind::Ode, "obj", xg[0] * xg[0] + xg[1] * xg[1] + ug[0] * ug[0]);
    m->add_eq(EqKind::Alg, "zg", zg[0] - (expr::Expression(1.0) - xg[1] * xg[1]) * pg[0]);
    (void)obj;
    return m;
}

} // namespace eoc::demo
