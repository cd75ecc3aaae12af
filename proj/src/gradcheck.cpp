#include "lpa/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace lpa {

GradCheckResult grad_check(const std::function<Tensor()>& loss,
                           const std::vector<NamedTensor>& inputs, double step,
                           Stencil stencil) {
    for (const auto& in : inputs) {
        in.tensor.impl().requires_grad = true;
        const_cast<Tensor&>(in.tensor).zero_grad();
    }
    loss().backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (const auto& in : inputs) {
        analytic.push_back(in.tensor.grad_vector());
    }

    GradCheckResult result;
    NoGradGuard no_grad;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        Tensor x = inputs[t].tensor;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double original = x.at(i);
            auto at = [&](double offset) {
                x.set(i, original + offset);
                return loss().item();
            };
            auto four_point = [&](double h) {
                // Differences first, so equal values cancel exactly.
                const double near = at(h) - at(-h);
                const double far = at(2 * h) - at(-2 * h);
                return (8.0 * near - far) / (12.0 * h);
            };
            double numeric = 0.0;
            if (stencil == Stencil::two_point) {
                numeric = (at(step) - at(-step)) / (2.0 * step);
            } else if (stencil == Stencil::four_point) {
                numeric = four_point(step);
            } else {
                std::array<double, 7> ladder{};
                for (std::size_t k = 0; k < ladder.size(); ++k) {
                    ladder[k] = four_point(step * std::pow(4.0, static_cast<double>(k)));
                }
                double best_gap = std::numeric_limits<double>::infinity();
                for (std::size_t k = 0; k + 1 < ladder.size(); ++k) {
                    const double gap = std::abs(ladder[k] - ladder[k + 1]);
                    if (gap < best_gap) {
                        best_gap = gap;
                        numeric = ladder[k];
                    }
                }
            }
            x.set(i, original);

            const double a = analytic[t][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double err = std::abs(a - numeric) / denom;
            ++result.coordinates;
            if (err > result.max_relative_error || result.coordinates == 1) {
                result.max_relative_error = err;
                result.worst_tensor = inputs[t].name;
                result.worst_index = i;
                result.analytic = a;
                result.numeric = numeric;
            }
        }
    }
    return result;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
    return grad_check([&] { return f(x); }, {{"x", x}}, step).max_relative_error;
}

}  // namespace lpa
