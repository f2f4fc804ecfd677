#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "exotst/errors.hpp"
#include "exotst/tensor.hpp"

namespace exotst {

namespace detail {

/// C(n,m) += A(n,k) * B(k,m). For each output element the k terms are added
/// in ascending order starting from the existing value, so on a zeroed C the
/// result is bit-identical to the textbook triple loop.
inline void matmul_accum(const double* a, const double* b, double* c,
                         std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = a[i * k + kk];
            const double* brow = b + kk * m;
            double* crow = c + i * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
    g_multiply_count += static_cast<std::uint64_t>(n) * k * m;
}

/// C(n,m) += A(n,k) * B(m,k)^T.
inline void matmul_accum_nt(const double* a, const double* b, double* c,
                            std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            const double* arow = a + i * k;
            const double* brow = b + j * k;
            for (std::size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            c[i * m + j] += s;
        }
    }
    g_multiply_count += static_cast<std::uint64_t>(n) * k * m;
}

/// C(n,m) += A(k,n)^T * B(k,m).
inline void matmul_accum_tn(const double* a, const double* b, double* c,
                            std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double* arow = a + kk * n;
        const double* brow = b + kk * m;
        for (std::size_t i = 0; i < n; ++i) {
            const double av = arow[i];
            double* crow = c + i * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
    g_multiply_count += static_cast<std::uint64_t>(n) * k * m;
}

inline bool taping(const Tensor& a) {
    return Tape::instance().enabled() && a.requires_grad();
}
inline bool taping(const Tensor& a, const Tensor& b) {
    return Tape::instance().enabled() && (a.requires_grad() || b.requires_grad());
}
inline bool taping(const Tensor& a, const Tensor& b, const Tensor& c) {
    return Tape::instance().enabled() &&
           (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected rank-2 tensor, got shape " +
                         shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

/// Throws NumericError naming `what` if any element is not finite.
inline void assert_all_finite(const Tensor& t, const std::string& what) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t.value()[i])) {
            throw NumericError("non-finite value in " + what + " at flat index " +
                               std::to_string(i));
        }
    }
}

/// Matrix product. Accepts (n,k)x(k,m) -> (n,m), batched (B,n,k)x(k,m) ->
/// (B,n,m), and (B,n,k)x(B,k,m) -> (B,n,m).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const bool a3 = a.rank() == 3, b3 = b.rank() == 3;
    if ((a.rank() != 2 && !a3) || (b.rank() != 2 && !b3) || (!a3 && b3)) {
        throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::size_t B = a3 ? a.dim(0) : 1;
    const std::size_t n = a3 ? a.dim(1) : a.dim(0);
    const std::size_t k = a3 ? a.dim(2) : a.dim(1);
    const std::size_t kb = b3 ? b.dim(1) : b.dim(0);
    const std::size_t m = b3 ? b.dim(2) : b.dim(1);
    if (k != kb || (b3 && b.dim(0) != B)) {
        throw ShapeError("matmul: inner dimensions do not match: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const bool rg = detail::taping(a, b);
    Tensor out = Tensor::zeros(a3 ? Shape{B, n, m} : Shape{n, m}, rg);
    for (std::size_t bi = 0; bi < B; ++bi) {
        const double* ap = a.value().data() + bi * n * k;
        const double* bp = b.value().data() + (b3 ? bi * k * m : 0);
        detail::matmul_accum(ap, bp, out.value().data() + bi * n * m, n, k, m);
    }
    if (rg) {
        Tape::instance().record([a, b, out, B, n, k, m, b3]() {
            for (std::size_t bi = 0; bi < B; ++bi) {
                const double* go = out.grad().data() + bi * n * m;
                const double* ap = a.value().data() + bi * n * k;
                const double* bp = b.value().data() + (b3 ? bi * k * m : 0);
                if (a.requires_grad()) {
                    detail::matmul_accum_nt(go, bp, a.grad().data() + bi * n * k, n, m, k);
                }
                if (b.requires_grad()) {
                    detail::matmul_accum_tn(ap, go, b.grad().data() + (b3 ? bi * k * m : 0),
                                            k, n, m);
                }
            }
        });
    }
    return out;
}

/// Transpose of a rank-2 tensor.
inline Tensor transpose2(const Tensor& a) {
    detail::require_rank2(a, "transpose2");
    const std::size_t n = a.dim(0), m = a.dim(1);
    const bool rg = detail::taping(a);
    Tensor out = Tensor::zeros({m, n}, rg);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out(j, i) = a(i, j);
    if (rg) {
        Tape::instance().record([a, out, n, m]() {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    a.grad()[i * m + j] += out.grad()[j * n + i];
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    const bool rg = detail::taping(a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < a.numel(); ++i)
        out.value()[i] = a.value()[i] + b.value()[i];
    if (rg) {
        Tape::instance().record([a, b, out]() {
            if (a.requires_grad())
                for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < out.numel(); ++i) b.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    const bool rg = detail::taping(a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < a.numel(); ++i)
        out.value()[i] = a.value()[i] - b.value()[i];
    if (rg) {
        Tape::instance().record([a, b, out]() {
            if (a.requires_grad())
                for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < out.numel(); ++i) b.grad()[i] -= out.grad()[i];
        });
    }
    return out;
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    const bool rg = detail::taping(a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < a.numel(); ++i)
        out.value()[i] = a.value()[i] * b.value()[i];
    if (rg) {
        Tape::instance().record([a, b, out]() {
            if (a.requires_grad())
                for (std::size_t i = 0; i < out.numel(); ++i)
                    a.grad()[i] += out.grad()[i] * b.value()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < out.numel(); ++i)
                    b.grad()[i] += out.grad()[i] * a.value()[i];
        });
    }
    return out;
}

inline Tensor scalar_mul(const Tensor& a, double c) {
    const bool rg = detail::taping(a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] * c;
    if (rg) {
        Tape::instance().record([a, out, c]() {
            for (std::size_t i = 0; i < out.numel(); ++i)
                a.grad()[i] += out.grad()[i] * c;
        });
    }
    return out;
}

inline Tensor scalar_add(const Tensor& a, double c) {
    const bool rg = detail::taping(a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] + c;
    if (rg) {
        Tape::instance().record([a, out]() {
            for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    const bool rg = detail::taping(a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < a.numel(); ++i)
        out.value()[i] = a.value()[i] > 0.0 ? a.value()[i] : 0.0;
    if (rg) {
        Tape::instance().record([a, out]() {
            for (std::size_t i = 0; i < out.numel(); ++i)
                if (a.value()[i] > 0.0) a.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

inline Tensor square(const Tensor& a) {
    const bool rg = detail::taping(a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < a.numel(); ++i)
        out.value()[i] = a.value()[i] * a.value()[i];
    if (rg) {
        Tape::instance().record([a, out]() {
            for (std::size_t i = 0; i < out.numel(); ++i)
                a.grad()[i] += 2.0 * a.value()[i] * out.grad()[i];
        });
    }
    return out;
}

/// Adds row vector b (length D) to every row of x (N,D).
inline Tensor add_row(const Tensor& x, const Tensor& b) {
    detail::require_rank2(x, "add_row");
    if (b.rank() != 1 || b.dim(0) != x.dim(1)) {
        throw ShapeError("add_row: bias shape " + shape_str(b.shape()) +
                         " does not match row width of " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), d = x.dim(1);
    const bool rg = detail::taping(x, b);
    Tensor out = Tensor::zeros({n, d}, rg);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out(i, j) = x(i, j) + b(j);
    if (rg) {
        Tape::instance().record([x, b, out, n, d]() {
            if (x.requires_grad())
                for (std::size_t i = 0; i < n * d; ++i) x.grad()[i] += out.grad()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        b.grad()[j] += out.grad()[i * d + j];
        });
    }
    return out;
}

/// Rows [r0, r1) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    detail::require_rank2(x, "slice_rows");
    if (r0 >= r1 || r1 > x.dim(0)) {
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") invalid for shape " +
                         shape_str(x.shape()));
    }
    const std::size_t d = x.dim(1), n = r1 - r0;
    const bool rg = detail::taping(x);
    Tensor out = Tensor::zeros({n, d}, rg);
    std::copy(x.value().begin() + r0 * d, x.value().begin() + r1 * d,
              out.value().begin());
    if (rg) {
        Tape::instance().record([x, out, r0, n, d]() {
            for (std::size_t i = 0; i < n * d; ++i)
                x.grad()[r0 * d + i] += out.grad()[i];
        });
    }
    return out;
}

/// Columns [c0, c1) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    detail::require_rank2(x, "slice_cols");
    if (c0 >= c1 || c1 > x.dim(1)) {
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") invalid for shape " +
                         shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), d = x.dim(1), w = c1 - c0;
    const bool rg = detail::taping(x);
    Tensor out = Tensor::zeros({n, w}, rg);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) out(i, j) = x(i, c0 + j);
    if (rg) {
        Tape::instance().record([x, out, c0, n, d, w]() {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    x.grad()[i * d + c0 + j] += out.grad()[i * w + j];
        });
    }
    return out;
}

/// Stacks rank-2 tensors with equal column counts along the row axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t d = parts[0].dim(1);
    std::size_t total = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        detail::require_rank2(p, "concat_rows");
        if (p.dim(1) != d) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()) +
                             " vs " + shape_str(parts[0].shape()));
        }
        total += p.dim(0);
        any_grad = any_grad || p.requires_grad();
    }
    const bool rg = Tape::instance().enabled() && any_grad;
    Tensor out = Tensor::zeros({total, d}, rg);
    std::size_t row = 0;
    for (const Tensor& p : parts) {
        std::copy(p.value().begin(), p.value().end(),
                  out.value().begin() + row * d);
        row += p.dim(0);
    }
    if (rg) {
        Tape::instance().record([parts, out, d]() {
            std::size_t row = 0;
            for (const Tensor& p : parts) {
                if (p.requires_grad()) {
                    for (std::size_t i = 0; i < p.numel(); ++i)
                        p.grad()[i] += out.grad()[row * d + i];
                }
                row += p.dim(0);
            }
        });
    }
    return out;
}

/// Stacks rank-2 tensors with equal row counts along the column axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t n = parts[0].dim(0);
    std::size_t total = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.dim(0) != n) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()) +
                             " vs " + shape_str(parts[0].shape()));
        }
        total += p.dim(1);
        any_grad = any_grad || p.requires_grad();
    }
    const bool rg = Tape::instance().enabled() && any_grad;
    Tensor out = Tensor::zeros({n, total}, rg);
    std::size_t col = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) out(i, col + j) = p(i, j);
        col += w;
    }
    if (rg) {
        Tape::instance().record([parts, out, n, total]() {
            std::size_t col = 0;
            for (const Tensor& p : parts) {
                const std::size_t w = p.dim(1);
                if (p.requires_grad()) {
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            p.grad()[i * w + j] += out.grad()[i * total + col + j];
                }
                col += w;
            }
        });
    }
    return out;
}

/// View-like reshape (copies storage; gradients flow one-to-one).
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot reshape " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
    }
    const bool rg = detail::taping(x);
    Tensor out = Tensor::zeros(std::move(shape), rg);
    out.value() = x.value();
    if (rg) {
        Tape::instance().record([x, out]() {
            for (std::size_t i = 0; i < out.numel(); ++i)
                x.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    const bool rg = detail::taping(x);
    Tensor out = Tensor::zeros({1}, rg);
    double s = 0.0;
    for (double v : x.value()) s += v;
    out.value()[0] = s;
    if (rg) {
        Tape::instance().record([x, out]() {
            const double g = out.grad()[0];
            for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    const bool rg = detail::taping(x);
    Tensor out = Tensor::zeros({1}, rg);
    double s = 0.0;
    for (double v : x.value()) s += v;
    const double inv_n = 1.0 / static_cast<double>(x.numel());
    out.value()[0] = s * inv_n;
    if (rg) {
        Tape::instance().record([x, out, inv_n]() {
            const double g = out.grad()[0] * inv_n;
            for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] += g;
        });
    }
    return out;
}

/// Mean of the scalar values of several scalar tensors (batch loss).
inline Tensor mean_of_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("mean_of_scalars: no inputs");
    bool any_grad = false;
    double s = 0.0;
    for (const Tensor& x : xs) {
        s += x.item();
        any_grad = any_grad || x.requires_grad();
    }
    const bool rg = Tape::instance().enabled() && any_grad;
    Tensor out = Tensor::zeros({1}, rg);
    const double inv_n = 1.0 / static_cast<double>(xs.size());
    out.value()[0] = s * inv_n;
    if (rg) {
        Tape::instance().record([xs, out, inv_n]() {
            const double g = out.grad()[0] * inv_n;
            for (const Tensor& x : xs)
                if (x.requires_grad()) x.grad()[0] += g;
        });
    }
    return out;
}

/// Row-wise softmax of a rank-2 tensor. Each row is shifted by its maximum
/// before exponentiation; rows sum to 1 up to rounding.
inline Tensor softmax_rows(const Tensor& x) {
    detail::require_rank2(x, "softmax_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    const bool rg = detail::taping(x);
    Tensor out = Tensor::zeros({n, d}, rg);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = x(i, 0);
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double e = std::exp(x(i, j) - mx);
            out(i, j) = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < d; ++j) out(i, j) *= inv;
    }
    if (rg) {
        Tape::instance().record([x, out, n, d]() {
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j)
                    dot += out.grad()[i * d + j] * out.value()[i * d + j];
                for (std::size_t j = 0; j < d; ++j)
                    x.grad()[i * d + j] += out.value()[i * d + j] *
                                           (out.grad()[i * d + j] - dot);
            }
        });
    }
    return out;
}

/// Layer normalization across each row of x (N,D) with per-feature scale and
/// shift (length D). Population variance, epsilon inside the square root.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma,
                              const Tensor& beta, double eps = 1e-5) {
    detail::require_rank2(x, "layer_norm_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
        throw ShapeError("layer_norm_rows: scale/shift must have shape (" +
                         std::to_string(d) + "), got " + shape_str(gamma.shape()) +
                         " and " + shape_str(beta.shape()));
    }
    const bool rg = detail::taping(x, gamma, beta);
    Tensor out = Tensor::zeros({n, d}, rg);
    std::vector<double> xhat(n * d), inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (x(i, j) - mean) * inv_std[i];
            out(i, j) = gamma(j) * xhat[i * d + j] + beta(j);
        }
    }
    if (rg) {
        Tape::instance().record(
            [x, gamma, beta, out, xhat, inv_std, n, d]() {
                for (std::size_t i = 0; i < n; ++i) {
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double g = out.grad()[i * d + j];
                        const double dxh = g * gamma.value()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[i * d + j];
                        if (gamma.requires_grad()) gamma.grad()[j] += g * xhat[i * d + j];
                        if (beta.requires_grad()) beta.grad()[j] += g;
                    }
                    if (x.requires_grad()) {
                        const double inv_d = 1.0 / static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                            const double dxh =
                                out.grad()[i * d + j] * gamma.value()[j];
                            x.grad()[i * d + j] +=
                                inv_std[i] * (dxh - inv_d * sum_dxh -
                                              xhat[i * d + j] * inv_d * sum_dxh_xh);
                        }
                    }
                }
            });
    }
    return out;
}

/// Batch normalization of x (R,D) across the row axis with batch statistics
/// (training branch). Population variance, epsilon inside the square root.
/// The per-feature batch mean and variance are written to batch_mean and
/// batch_var (length D) for running-statistic updates.
inline Tensor batch_norm_cols(const Tensor& x, const Tensor& gamma,
                              const Tensor& beta, double eps,
                              std::vector<double>* batch_mean,
                              std::vector<double>* batch_var) {
    detail::require_rank2(x, "batch_norm_cols");
    const std::size_t r = x.dim(0), d = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
        throw ShapeError("batch_norm_cols: scale/shift must have shape (" +
                         std::to_string(d) + "), got " + shape_str(gamma.shape()) +
                         " and " + shape_str(beta.shape()));
    }
    const bool rg = detail::taping(x, gamma, beta);
    Tensor out = Tensor::zeros({r, d}, rg);
    std::vector<double> xhat(r * d), inv_std(d), mean(d), var(d);
    for (std::size_t j = 0; j < d; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < r; ++i) m += x(i, j);
        m /= static_cast<double>(r);
        double v = 0.0;
        for (std::size_t i = 0; i < r; ++i) {
            const double c = x(i, j) - m;
            v += c * c;
        }
        v /= static_cast<double>(r);
        mean[j] = m;
        var[j] = v;
        inv_std[j] = 1.0 / std::sqrt(v + eps);
        for (std::size_t i = 0; i < r; ++i) {
            xhat[i * d + j] = (x(i, j) - m) * inv_std[j];
            out(i, j) = gamma(j) * xhat[i * d + j] + beta(j);
        }
    }
    if (batch_mean) *batch_mean = mean;
    if (batch_var) *batch_var = var;
    if (rg) {
        Tape::instance().record([x, gamma, beta, out, xhat, inv_std, r, d]() {
            for (std::size_t j = 0; j < d; ++j) {
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (std::size_t i = 0; i < r; ++i) {
                    const double g = out.grad()[i * d + j];
                    const double dxh = g * gamma.value()[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[i * d + j];
                    if (gamma.requires_grad()) gamma.grad()[j] += g * xhat[i * d + j];
                    if (beta.requires_grad()) beta.grad()[j] += g;
                }
                if (x.requires_grad()) {
                    const double inv_r = 1.0 / static_cast<double>(r);
                    for (std::size_t i = 0; i < r; ++i) {
                        const double dxh = out.grad()[i * d + j] * gamma.value()[j];
                        x.grad()[i * d + j] +=
                            inv_std[j] * (dxh - inv_r * sum_dxh -
                                          xhat[i * d + j] * inv_r * sum_dxh_xh);
                    }
                }
            }
        });
    }
    return out;
}

/// Batch normalization evaluated with fixed (running) statistics. The
/// statistics are constants for differentiation.
inline Tensor batch_norm_cols_stats(const Tensor& x, const Tensor& gamma,
                                    const Tensor& beta,
                                    const std::vector<double>& mean,
                                    const std::vector<double>& var, double eps) {
    detail::require_rank2(x, "batch_norm_cols_stats");
    const std::size_t r = x.dim(0), d = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d ||
        mean.size() != d || var.size() != d) {
        throw ShapeError("batch_norm_cols_stats: parameter sizes do not match width " +
                         std::to_string(d) + " of " + shape_str(x.shape()));
    }
    const bool rg = detail::taping(x, gamma, beta);
    Tensor out = Tensor::zeros({r, d}, rg);
    std::vector<double> inv_std(d);
    for (std::size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
    std::vector<double> xhat(r * d);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (x(i, j) - mean[j]) * inv_std[j];
            out(i, j) = gamma(j) * xhat[i * d + j] + beta(j);
        }
    }
    if (rg) {
        Tape::instance().record([x, gamma, beta, out, xhat, inv_std, r, d]() {
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double g = out.grad()[i * d + j];
                    if (x.requires_grad())
                        x.grad()[i * d + j] += g * gamma.value()[j] * inv_std[j];
                    if (gamma.requires_grad()) gamma.grad()[j] += g * xhat[i * d + j];
                    if (beta.requires_grad()) beta.grad()[j] += g;
                }
            }
        });
    }
    return out;
}

/// Stacks C rank-2 tensors of equal shape (n,d) into a (C,n,d) tensor.
inline Tensor stack_channels(const std::vector<Tensor>& channels) {
    if (channels.empty()) throw ContractError("stack_channels: no inputs");
    const Shape inner = channels[0].shape();
    bool any_grad = false;
    for (const Tensor& c : channels) {
        detail::require_rank2(c, "stack_channels");
        if (c.shape() != inner) {
            throw ShapeError("stack_channels: shape mismatch " + shape_str(c.shape()) +
                             " vs " + shape_str(inner));
        }
        any_grad = any_grad || c.requires_grad();
    }
    const bool rg = Tape::instance().enabled() && any_grad;
    const std::size_t sz = shape_numel(inner);
    Tensor out = Tensor::zeros({channels.size(), inner[0], inner[1]}, rg);
    for (std::size_t c = 0; c < channels.size(); ++c)
        std::copy(channels[c].value().begin(), channels[c].value().end(),
                  out.value().begin() + c * sz);
    if (rg) {
        Tape::instance().record([channels, out, sz]() {
            for (std::size_t c = 0; c < channels.size(); ++c) {
                if (!channels[c].requires_grad()) continue;
                for (std::size_t i = 0; i < sz; ++i)
                    channels[c].grad()[i] += out.grad()[c * sz + i];
            }
        });
    }
    return out;
}

/// Extracts channel c of a (C,n,d) tensor as a rank-2 (n,d) tensor.
inline Tensor channel_of(const Tensor& x, std::size_t c) {
    if (x.rank() != 3) {
        throw ShapeError("channel_of: expected rank-3 tensor, got shape " +
                         shape_str(x.shape()));
    }
    if (c >= x.dim(0)) {
        throw ShapeError("channel_of: channel " + std::to_string(c) +
                         " out of range for shape " + shape_str(x.shape()));
    }
    const std::size_t sz = x.dim(1) * x.dim(2);
    const bool rg = detail::taping(x);
    Tensor out = Tensor::zeros({x.dim(1), x.dim(2)}, rg);
    std::copy(x.value().begin() + c * sz, x.value().begin() + (c + 1) * sz,
              out.value().begin());
    if (rg) {
        Tape::instance().record([x, out, c, sz]() {
            for (std::size_t i = 0; i < sz; ++i)
                x.grad()[c * sz + i] += out.grad()[i];
        });
    }
    return out;
}

/// Mean squared error between a prediction tensor and a constant target of
/// the same element count.
inline Tensor mse_loss(const Tensor& pred, const std::vector<double>& target) {
    if (pred.numel() != target.size()) {
        throw ShapeError("mse_loss: prediction has " + std::to_string(pred.numel()) +
                         " elements, target has " + std::to_string(target.size()));
    }
    Tensor t = Tensor::from_vector(pred.shape(), target, false);
    return mean_all(square(sub(pred, t)));
}

}  // namespace exotst
