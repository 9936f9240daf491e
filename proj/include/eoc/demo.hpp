#ifndef EOC_DEMO_HPP
#define EOC_DEMO_HPP

#include <memory>

#include "eoc/model.hpp"

namespace eoc::demo {

// Bundled demonstration system: a controlled van der Pol-type DAE with an
// accumulated quadratic cost state,
//   x1' = z*x1 - x2 + u
//   x2' = x1
//   obj' = x1^2 + x2^2 + u^2
//   0   = z - (1 - x2^2)*p
// with defaults x=(0,1), obj(0)=0, p=1, u=0.
std::unique_ptr<model::Model> make_simple_dae(const std::string& name = "simple_dae");

} // namespace eoc::demo

#endif
