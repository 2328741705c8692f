#include "partcat/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace partcat {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Array<double>>& inputs) {
    Tape<double> tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const auto& a : inputs) leaves.push_back(tape.constant(a));
    const double v = tape.value(f(tape, leaves)).item();
    if (!std::isfinite(v)) throw NonFiniteError("grad_check: function value is not finite");
    return v;
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Array<double>>& inputs,
                           double eps) {
    Tape<double> tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const auto& a : inputs) leaves.push_back(tape.leaf(a));
    const Var out = f(tape, leaves);
    check_finite(tape.value(out), "grad_check output");
    tape.backward(out);

    GradCheckReport report;
    std::vector<Array<double>> probe = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Array<double> analytic = tape.grad_or_zero(leaves[i]);
        check_finite(analytic, "grad_check analytic gradient");
        for (std::size_t e = 0; e < inputs[i].size(); ++e) {
            const double x0 = inputs[i][e];
            probe[i][e] = x0 + eps;
            const double up = evaluate(f, probe);
            probe[i][e] = x0 - eps;
            const double down = evaluate(f, probe);
            probe[i][e] = x0;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[e];
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_element = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace partcat
