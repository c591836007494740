#include "vgp/gradcheck.hpp"

#include <cmath>
#include <sstream>

namespace vgp {

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (passed ? "PASS" : "FAIL") << " (eps=" << eps << ", tol=" << tol << ")\n";
    for (const auto& e : entries) {
        os << "  " << e.tensor_name << ": max rel err " << e.max_rel_error << " at component "
           << e.worst_component << " (analytic " << e.analytic << ", numeric " << e.numeric
           << ")\n";
    }
    return os.str();
}

GradCheckReport gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> params,
                          double eps, double tol) {
    GradCheckReport report;
    report.eps = eps;
    report.tol = tol;

    const bool prev_checks = finite_checks();
    set_finite_checks(true);

    for (auto& p : params) p.zero_grad();
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NonFiniteError(loss.impl()->op);
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0));
    }

    report.passed = true;
    for (std::size_t t = 0; t < params.size(); ++t) {
        Tensor& p = params[t];
        GradCheckEntry entry;
        entry.tensor_name = p.name().empty() ? ("param" + std::to_string(t)) : p.name();
        for (std::size_t c = 0; c < p.size(); ++c) {
            const double saved = p.data()[c];
            double fp, fm;
            {
                NoGradGuard ng;
                p.mutable_data()[c] = saved + eps;
                fp = f().item();
                p.mutable_data()[c] = saved - eps;
                fm = f().item();
                p.mutable_data()[c] = saved;
            }
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[t][c];
            const double denom = std::max(std::abs(a), std::abs(numeric));
            const double rel = denom < 1e-12 ? 0.0 : std::abs(a - numeric) / denom;
            if (rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_component = c;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        if (entry.max_rel_error > tol) report.passed = false;
        report.entries.push_back(std::move(entry));
    }

    set_finite_checks(prev_checks);
    return report;
}

}  // namespace vgp
