#pragma once

#include <functional>
#include <span>
#include <vector>

#include "partcat/tape.hpp"

namespace partcat {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_element = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Scalar function of tape leaves; `inputs[i]` is the leaf for the i-th array.
using ScalarFn = std::function<Var(Tape<double>&, std::span<const Var> inputs)>;

/// Compares taped gradients with central differences, element by element.
/// Relative error is |a - n| / max(1, |a|, |n|). Throws NonFiniteError when the
/// function or either gradient produces NaN/Inf.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Array<double>>& inputs,
                           double eps = 1e-5);

}  // namespace partcat
