#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "akd/tensor.hpp"

namespace akd {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    std::size_t coordinates_checked = 0;
    bool finite = true;
    std::string message;

    bool passed(double tolerance) const { return finite && max_relative_error < tolerance; }
};

inline constexpr double kGradCheckFloor = 1e-6;

// Compares reverse-mode gradients of `loss_fn` against central differences.
//
// Relative error per coordinate is |analytic - numeric| / max(|analytic|,
// |numeric|, kGradCheckFloor). The floor keeps coordinates whose true
// gradient is zero (attention key biases) from reporting pure rounding
// noise as error. When `max_coords_per_param` is nonzero, that many
// coordinates are sampled per parameter (seeded), otherwise all are checked.
// Throws ContractError if two evaluations at the same point disagree, which
// is how an accidentally enabled dropout shows up.
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<const Tensor> params,
                           double epsilon, std::size_t max_coords_per_param = 0,
                           std::uint64_t seed = 0);

}  // namespace akd
