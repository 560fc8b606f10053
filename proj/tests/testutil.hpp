#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "bdet/tensor.hpp"

namespace testutil {

// Central finite difference of a scalar-valued callable with respect to one
// element of a tensor the callable reads. The independent oracle used by the
// gradient tests; must stay free of the reverse-mode code paths it checks.
template <typename F>
double central_diff(bdet::Tensor& x, std::size_t i, double h, F f) {
    double orig = x[i];
    x[i] = orig + h;
    double fp = f();
    x[i] = orig - h;
    double fm = f();
    x[i] = orig;
    return (fp - fm) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1.0) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace testutil
