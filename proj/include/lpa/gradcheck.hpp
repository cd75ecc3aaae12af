#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "lpa/tensor.hpp"

namespace lpa {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coordinates = 0;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// two_point: (f(x+h) − f(x−h)) / 2h.
/// four_point: (8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h, fourth-order
/// accurate, which allows a larger h and so less rounding noise.
/// adaptive: four_point at steps h, 4h, ..., 4096h per coordinate; keeps the
/// estimate whose neighbour on the ladder agrees with it most closely. Small
/// gradients get a large step (rounding noise shrinks), curved ones a small one.
enum class Stencil { two_point, four_point, adaptive };

/// Compares autodiff grads of `loss` against central finite differences for
/// every coordinate of every tensor in `inputs`. Relative error per coordinate
/// is |a - n| / max(|a|, |n|, 1e-8); the maximum is reported.
GradCheckResult grad_check(const std::function<Tensor()>& loss,
                           const std::vector<NamedTensor>& inputs, double step = 1e-6,
                           Stencil stencil = Stencil::two_point);

/// Single-input form: f maps x to a scalar.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double step = 1e-6);

}  // namespace lpa
