#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "akd/tensor.hpp"

namespace akd {

// Matrix product of a [m x k] and b [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x [..., n] + bias [n], broadcast over leading dimensions.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Sum over the last axis: [..., n] -> [...].
Tensor sum_last(const Tensor& x);
// Picks x[..., index[i]] for every leading position i: [..., n] -> [...].
Tensor gather_last(const Tensor& x, std::span<const std::int32_t> index);
// Σ_i x_i w_i with constant weights.
Tensor dot_const(const Tensor& x, std::span<const double> weights);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);

// Row-wise layer normalization of x [..., n] with gain and bias [n].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Rows of `table` selected by ids: [V x h] -> [len(ids) x h].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

// Inverted dropout. Identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

struct AttentionShape {
    std::size_t batch = 0;
    std::size_t query_len = 0;
    std::size_t key_len = 0;
    std::size_t heads = 1;
    bool causal = false;
};

// Multi-head scaled dot-product attention over already-projected inputs.
// q is [batch*query_len x h], k and v are [batch*key_len x h]. key_valid is
// [batch x key_len] (nonzero = attendable); empty means all keys valid.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                 std::span<const std::uint8_t> key_valid);

}  // namespace akd
