#include "delta/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "delta/errors.hpp"

namespace delta {

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps) {
    if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
    for (auto& p : params) {
        if (!p.is_leaf() || !p.requires_grad()) throw ContractError("grad_check: parameters must be grad leaves");
        p.zero_grad();
    }
    f().backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                           : std::vector<double>(p.numel(), 0.0));
        p.zero_grad();
    }

    GradCheckResult result;
    NoGradGuard no_grad;
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto values = params[t].data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            values[i] = original + eps;
            const double up = f().item();
            values[i] = original - eps;
            const double down = f().item();
            values[i] = original;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[t][i];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            result.max_relative_error = std::max(result.max_relative_error, err);
            ++result.checked;
        }
    }
    return result;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double eps) {
    Tensor x = point.clone();
    x.set_requires_grad(true);
    return grad_check([&] { return f(x); }, {x}, eps).max_relative_error;
}

}  // namespace delta
