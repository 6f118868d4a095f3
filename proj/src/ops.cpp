#include "akd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "akd/errors.hpp"

namespace akd {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
    if (a.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
    }
}

std::size_t last_dim(const Tensor& x, const char* op) {
    if (x.rank() == 0) throw ShapeError(std::string(op) + ": scalar input");
    return x.shape().back();
}

Shape leading_shape(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

// Resolves a possibly negative axis into (outer, n, inner) strides.
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis, const char* op) {
    const int rank = static_cast<int>(shape.size());
    const int ax = axis < 0 ? axis + rank : axis;
    if (ax < 0 || ax >= rank) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(shape));
    }
    AxisSplit s;
    for (int i = 0; i < ax; ++i) s.outer *= shape[i];
    s.n = shape[ax];
    for (int i = ax + 1; i < rank; ++i) s.inner *= shape[i];
    return s;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
    const Eigen::Index M = m, K = k, N = n;
    MutMap(c, M, N).noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
    const Eigen::Index M = m, K = k, N = n;
    MutMap(c, M, K).noalias() += ConstMap(a, M, N) * ConstMap(b, K, N).transpose();
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
    const Eigen::Index M = m, K = k, N = n;
    MutMap(c, K, N).noalias() += ConstMap(a, M, K).transpose() * ConstMap(b, M, N);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    return Tensor::from_op({m, n}, std::move(out), {a, b}, "matmul",
                           [a, b, m, k, n](std::span<const double> g) mutable {
                               if (a.requires_grad())
                                   gemm_nt(g.data(), b.values().data(), a.mutable_grad().data(), m,
                                           n, k);
                               if (b.requires_grad())
                                   gemm_tn(a.values().data(), g.data(), b.mutable_grad().data(), m,
                                           k, n);
                           });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    const auto av = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    return Tensor::from_op({n, m}, std::move(out), {a}, "transpose",
                           [a, m, n](std::span<const double> g) mutable {
                               auto ga = a.mutable_grad();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                           });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, "add",
                           [a, b](std::span<const double> g) mutable {
                               for (const Tensor* t : {&a, &b}) {
                                   if (!t->requires_grad()) continue;
                                   auto gt = t->mutable_grad();
                                   for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
                               }
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    const auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, "sub",
                           [a, b](std::span<const double> g) mutable {
                               if (a.requires_grad()) {
                                   auto ga = a.mutable_grad();
                                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (b.requires_grad()) {
                                   auto gb = b.mutable_grad();
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                               }
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, "mul",
                           [a, b](std::span<const double> g) mutable {
                               if (a.requires_grad()) {
                                   auto ga = a.mutable_grad();
                                   const auto bv = b.values();
                                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                               }
                               if (b.requires_grad()) {
                                   auto gb = b.mutable_grad();
                                   const auto av = a.values();
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                               }
                           });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (auto& v : out) v *= factor;
    return Tensor::from_op(a.shape(), std::move(out), {a}, "scale",
                           [a, factor](std::span<const double> g) mutable {
                               auto ga = a.mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                           });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t n = last_dim(x, "add_bias");
    if (bias.rank() != 1 || bias.dim(0) != n) {
        throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(x.shape()));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    const auto bv = bias.values();
    for (std::size_t r = 0; r < out.size(); r += n)
        for (std::size_t j = 0; j < n; ++j) out[r + j] += bv[j];
    return Tensor::from_op(x.shape(), std::move(out), {x, bias}, "add_bias",
                           [x, bias, n](std::span<const double> g) mutable {
                               if (x.requires_grad()) {
                                   auto gx = x.mutable_grad();
                                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                               }
                               if (bias.requires_grad()) {
                                   auto gb = bias.mutable_grad();
                                   for (std::size_t r = 0; r < g.size(); r += n)
                                       for (std::size_t j = 0; j < n; ++j) gb[j] += g[r + j];
                               }
                           });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.values().begin(), x.values().end());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    return Tensor::from_op(x.shape(), std::move(out), {x}, "relu",
                           [x](std::span<const double> g) mutable {
                               auto gx = x.mutable_grad();
                               const auto xv = x.values();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   if (xv[i] > 0.0) gx[i] += g[i];
                           });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return Tensor::from_op(std::move(shape), std::move(out), {x}, "reshape",
                           [x](std::span<const double> g) mutable {
                               auto gx = x.mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    return Tensor::from_op({}, {acc}, {x}, "sum", [x](std::span<const double> g) mutable {
        auto gx = x.mutable_grad();
        for (auto& v : gx) v += g[0];
    });
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum_last(const Tensor& x) {
    const std::size_t n = last_dim(x, "sum_last");
    const std::size_t rows = x.size() / n;
    std::vector<double> out(rows, 0.0);
    const auto xv = x.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r] += xv[r * n + j];
    return Tensor::from_op(leading_shape(x.shape()), std::move(out), {x}, "sum_last",
                           [x, n, rows](std::span<const double> g) mutable {
                               auto gx = x.mutable_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r];
                           });
}

Tensor gather_last(const Tensor& x, std::span<const std::int32_t> index) {
    const std::size_t n = last_dim(x, "gather_last");
    const std::size_t rows = x.size() / n;
    if (index.size() != rows) {
        throw ShapeError("gather_last: " + std::to_string(index.size()) + " indices for " +
                         shape_string(x.shape()));
    }
    std::vector<double> out(rows);
    std::vector<std::int32_t> idx(index.begin(), index.end());
    const auto xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n) {
            throw ShapeError("gather_last: index " + std::to_string(idx[r]) + " out of range " +
                             std::to_string(n));
        }
        out[r] = xv[r * n + idx[r]];
    }
    return Tensor::from_op(leading_shape(x.shape()), std::move(out), {x}, "gather_last",
                           [x, n, idx = std::move(idx)](std::span<const double> g) mutable {
                               auto gx = x.mutable_grad();
                               for (std::size_t r = 0; r < idx.size(); ++r) gx[r * n + idx[r]] += g[r];
                           });
}

Tensor dot_const(const Tensor& x, std::span<const double> weights) {
    if (weights.size() != x.size()) {
        throw ShapeError("dot_const: " + std::to_string(weights.size()) + " weights for " +
                         shape_string(x.shape()));
    }
    std::vector<double> w(weights.begin(), weights.end());
    double acc = 0.0;
    const auto xv = x.values();
    for (std::size_t i = 0; i < w.size(); ++i) acc += xv[i] * w[i];
    return Tensor::from_op({}, {acc}, {x}, "dot_const",
                           [x, w = std::move(w)](std::span<const double> g) mutable {
                               auto gx = x.mutable_grad();
                               for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g[0] * w[i];
                           });
}

Tensor softmax(const Tensor& x, int axis) {
    const auto s = split_axis(x.shape(), axis, "softmax");
    std::vector<double> out(x.size());
    const auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) {
                const double e = std::exp(xv[base + j * s.inner] - mx);
                out[base + j * s.inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= z;
        }
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return Tensor::from_op(x.shape(), std::move(out), {x}, "softmax",
                           [x, s, y](std::span<const double> g) mutable {
                               auto gx = x.mutable_grad();
                               const auto& yv = *y;
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                   for (std::size_t in = 0; in < s.inner; ++in) {
                                       const std::size_t base = o * s.n * s.inner + in;
                                       double dotp = 0.0;
                                       for (std::size_t j = 0; j < s.n; ++j)
                                           dotp += g[base + j * s.inner] * yv[base + j * s.inner];
                                       for (std::size_t j = 0; j < s.n; ++j) {
                                           const std::size_t at = base + j * s.inner;
                                           gx[at] += yv[at] * (g[at] - dotp);
                                       }
                                   }
                               }
                           });
}

Tensor log_softmax(const Tensor& x, int axis) {
    const auto s = split_axis(x.shape(), axis, "log_softmax");
    std::vector<double> out(x.size());
    const auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) z += std::exp(xv[base + j * s.inner] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] = xv[base + j * s.inner] - lse;
        }
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return Tensor::from_op(x.shape(), std::move(out), {x}, "log_softmax",
                           [x, s, y](std::span<const double> g) mutable {
                               auto gx = x.mutable_grad();
                               const auto& yv = *y;
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                   for (std::size_t in = 0; in < s.inner; ++in) {
                                       const std::size_t base = o * s.n * s.inner + in;
                                       double gsum = 0.0;
                                       for (std::size_t j = 0; j < s.n; ++j) gsum += g[base + j * s.inner];
                                       for (std::size_t j = 0; j < s.n; ++j) {
                                           const std::size_t at = base + j * s.inner;
                                           gx[at] += g[at] - std::exp(yv[at]) * gsum;
                                       }
                                   }
                               }
                           });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t n = last_dim(x, "layer_norm");
    if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
        throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(n) + "]");
    }
    const std::size_t rows = x.size() / n;
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    const auto xv = x.values();
    const auto gv = gain.values(), bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (row[j] - mu) * inv;
            (*xhat)[r * n + j] = h;
            out[r * n + j] = gv[j] * h + bv[j];
        }
    }
    return Tensor::from_op(
        x.shape(), std::move(out), {x, gain, bias}, "layer_norm",
        [x, gain, bias, n, rows, xhat, inv_std](std::span<const double> g) mutable {
            const auto& h = *xhat;
            if (gain.requires_grad()) {
                auto gg = gain.mutable_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * h[i];
            }
            if (bias.requires_grad()) {
                auto gb = bias.mutable_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
            }
            if (!x.requires_grad()) return;
            auto gx = x.mutable_grad();
            const auto gv = gain.values();
            std::vector<double> dh(n);
            for (std::size_t r = 0; r < rows; ++r) {
                double mean_dh = 0.0, mean_dh_h = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dh[j] = g[r * n + j] * gv[j];
                    mean_dh += dh[j];
                    mean_dh_h += dh[j] * h[r * n + j];
                }
                mean_dh /= static_cast<double>(n);
                mean_dh_h /= static_cast<double>(n);
                const double inv = (*inv_std)[r];
                for (std::size_t j = 0; j < n; ++j)
                    gx[r * n + j] += inv * (dh[j] - mean_dh - h[r * n + j] * mean_dh_h);
            }
        });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
    require_rank(table, 2, "embedding");
    const std::size_t vocab = table.dim(0), h = table.dim(1);
    std::vector<std::int32_t> idx(ids.begin(), ids.end());
    std::vector<double> out(idx.size() * h);
    const auto tv = table.values();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= vocab) {
            throw ShapeError("embedding: id " + std::to_string(idx[r]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        std::copy_n(tv.data() + idx[r] * h, h, out.data() + r * h);
    }
    const std::size_t rows = idx.size();
    return Tensor::from_op({rows, h}, std::move(out), {table}, "embedding",
                           [table, h, idx = std::move(idx)](std::span<const double> g) mutable {
                               auto gt = table.mutable_grad();
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                   double* dst = gt.data() + idx[r] * h;
                                   for (std::size_t j = 0; j < h; ++j) dst[j] += g[r * h + j];
                               }
                           });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
    const double keep_scale = 1.0 / (1.0 - rate);
    std::bernoulli_distribution keep(1.0 - rate);
    std::vector<double> mask(x.size());
    for (auto& m : mask) m = keep(rng) ? keep_scale : 0.0;
    std::vector<double> out(x.size());
    const auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    return Tensor::from_op(x.shape(), std::move(out), {x}, "dropout",
                           [x, mask = std::move(mask)](std::span<const double> g) mutable {
                               auto gx = x.mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                           });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& as,
                 std::span<const std::uint8_t> key_valid) {
    require_rank(q, 2, "attention");
    require_rank(k, 2, "attention");
    const std::size_t B = as.batch, Tq = as.query_len, Tk = as.key_len, H = as.heads;
    const std::size_t width = q.dim(1);
    if (H == 0 || width % H != 0) throw ShapeError("attention: width not divisible by heads");
    if (q.dim(0) != B * Tq || k.dim(0) != B * Tk || v.shape() != k.shape() || k.dim(1) != width) {
        throw ShapeError("attention: inconsistent shapes q" + shape_string(q.shape()) + " k" +
                         shape_string(k.shape()) + " v" + shape_string(v.shape()));
    }
    if (!key_valid.empty() && key_valid.size() != B * Tk) {
        throw ShapeError("attention: key mask has " + std::to_string(key_valid.size()) +
                         " entries, expected " + std::to_string(B * Tk));
    }
    if (as.causal && Tq != Tk) throw ShapeError("attention: causal mask needs square scores");

    const std::size_t dh = width / H;
    const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<std::uint8_t> valid(key_valid.begin(), key_valid.end());
    auto probs = std::make_shared<std::vector<double>>(B * H * Tq * Tk, 0.0);
    std::vector<double> out(B * Tq * width, 0.0);
    const auto qv = q.values(), kv = k.values(), vv = v.values();

    auto attendable = [&](std::size_t b, std::size_t i, std::size_t j) {
        if (as.causal && j > i) return false;
        return valid.empty() || valid[b * Tk + j] != 0;
    };

    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < Tq; ++i) {
                double* p = probs->data() + ((b * H + h) * Tq + i) * Tk;
                const double* qi = qv.data() + (b * Tq + i) * width + h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < Tk; ++j) {
                    if (!attendable(b, i, j)) continue;
                    const double* kj = kv.data() + (b * Tk + j) * width + h * dh;
                    double s = 0.0;
                    for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                    p[j] = s * scale_f;
                    mx = std::max(mx, p[j]);
                }
                if (mx == -std::numeric_limits<double>::infinity()) continue;  // nothing to attend
                double z = 0.0;
                for (std::size_t j = 0; j < Tk; ++j) {
                    if (!attendable(b, i, j)) continue;
                    p[j] = std::exp(p[j] - mx);
                    z += p[j];
                }
                double* oi = out.data() + (b * Tq + i) * width + h * dh;
                for (std::size_t j = 0; j < Tk; ++j) {
                    if (!attendable(b, i, j)) continue;
                    p[j] /= z;
                    const double* vj = vv.data() + (b * Tk + j) * width + h * dh;
                    for (std::size_t d = 0; d < dh; ++d) oi[d] += p[j] * vj[d];
                }
            }
        }
    }

    return Tensor::from_op(
        {B * Tq, width}, std::move(out), {q, k, v}, "attention",
        [q, k, v, B, Tq, Tk, H, dh, width, scale_f, probs](std::span<const double> g) mutable {
            const auto qv = q.values(), kv = k.values(), vv = v.values();
            std::vector<double>* gq = q.requires_grad() ? &q.impl()->grad_buffer() : nullptr;
            std::vector<double>* gk = k.requires_grad() ? &k.impl()->grad_buffer() : nullptr;
            std::vector<double>* gv = v.requires_grad() ? &v.impl()->grad_buffer() : nullptr;
            std::vector<double> dp(Tk);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t h = 0; h < H; ++h) {
                    for (std::size_t i = 0; i < Tq; ++i) {
                        const double* p = probs->data() + ((b * H + h) * Tq + i) * Tk;
                        const double* go = g.data() + (b * Tq + i) * width + h * dh;
                        double row_dot = 0.0;
                        for (std::size_t j = 0; j < Tk; ++j) {
                            if (p[j] == 0.0) {
                                dp[j] = 0.0;
                                continue;
                            }
                            const double* vj = vv.data() + (b * Tk + j) * width + h * dh;
                            double s = 0.0;
                            for (std::size_t d = 0; d < dh; ++d) s += go[d] * vj[d];
                            dp[j] = s;
                            row_dot += s * p[j];
                            if (gv) {
                                double* gvj = gv->data() + (b * Tk + j) * width + h * dh;
                                for (std::size_t d = 0; d < dh; ++d) gvj[d] += p[j] * go[d];
                            }
                        }
                        const double* qi = qv.data() + (b * Tq + i) * width + h * dh;
                        for (std::size_t j = 0; j < Tk; ++j) {
                            if (p[j] == 0.0) continue;
                            const double ds = p[j] * (dp[j] - row_dot) * scale_f;
                            const double* kj = kv.data() + (b * Tk + j) * width + h * dh;
                            if (gq) {
                                double* gqi = gq->data() + (b * Tq + i) * width + h * dh;
                                for (std::size_t d = 0; d < dh; ++d) gqi[d] += ds * kj[d];
                            }
                            if (gk) {
                                double* gkj = gk->data() + (b * Tk + j) * width + h * dh;
                                for (std::size_t d = 0; d < dh; ++d) gkj[d] += ds * qi[d];
                            }
                        }
                    }
                }
            }
        });
}

}  // namespace akd
