#include "akd/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "akd/errors.hpp"

namespace akd {

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<const Tensor> params,
                           double epsilon, std::size_t max_coords_per_param, std::uint64_t seed) {
    for (const auto& p : params) {
        Tensor handle = p;
        handle.zero_grad();
    }
    Tensor loss = loss_fn();
    const double base = loss.item();
    if (const double again = loss_fn().item(); again != base) {
        throw ContractError("grad_check: loss is not deterministic (" + std::to_string(base) +
                            " vs " + std::to_string(again) + "); disable dropout");
    }
    backward(loss);

    GradCheckResult result;
    std::mt19937_64 rng(seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        const std::vector<double> analytic =
            p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                         : std::vector<double>(p.size(), 0.0);
        std::vector<std::size_t> coords(p.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (max_coords_per_param != 0 && coords.size() > max_coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(max_coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        auto values = p.values();
        for (std::size_t idx : coords) {
            const double saved = values[idx];
            values[idx] = saved + epsilon;
            const double plus = loss_fn().item();
            values[idx] = saved - epsilon;
            const double minus = loss_fn().item();
            values[idx] = saved;
            const double numeric = (plus - minus) / (2.0 * epsilon);
            const double a = analytic[idx];
            ++result.coordinates_checked;
            if (!std::isfinite(a) || !std::isfinite(numeric)) {
                result.finite = false;
                result.max_relative_error = std::numeric_limits<double>::infinity();
                result.worst_param = pi;
                result.worst_index = idx;
                result.message = "non-finite gradient at param " + std::to_string(pi) + " index " +
                                 std::to_string(idx);
                return result;
            }
            const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > result.max_relative_error) {
                result.max_relative_error = rel;
                result.worst_param = pi;
                result.worst_index = idx;
            }
        }
    }
    for (const auto& p : params) {
        Tensor handle = p;
        handle.zero_grad();
    }
    return result;
}

}  // namespace akd
