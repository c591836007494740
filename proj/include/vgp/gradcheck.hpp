#ifndef VGP_GRADCHECK_HPP
#define VGP_GRADCHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "vgp/tensor.hpp"

namespace vgp {

struct GradCheckEntry {
    std::string tensor_name;
    double max_rel_error = 0.0;
    std::size_t worst_component = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    bool passed = false;
    double eps = 0.0;
    double tol = 0.0;
    std::vector<GradCheckEntry> entries;  // one per checked tensor

    std::string summary() const;
};

/// Compares the analytic gradient of a deterministic scalar-valued
/// computation against central finite differences, parameter component by
/// component. `f` must rebuild its tape from the current parameter values on
/// every call. Components sitting on a nondifferentiable point (a max tie)
/// show up as large relative errors in the report rather than as a crash.
GradCheckReport gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> params,
                          double eps, double tol);

}  // namespace vgp

#endif
