#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpm/rng.hpp"
#include "mpm/tensor.hpp"

#if defined(MPM_USE_CBLAS)
#include <cblas.h>
#endif

namespace mpm {

namespace detail {

// C = alpha * op(A) * op(B) + beta * C, row-major.
#if defined(MPM_USE_CBLAS)
inline void gemm(bool ta, bool tb, size_t m, size_t n, size_t k, float alpha, const float* a, size_t lda,
                 const float* b, size_t ldb, float beta, float* c, size_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
                static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}
inline void gemm(bool ta, bool tb, size_t m, size_t n, size_t k, double alpha, const double* a, size_t lda,
                 const double* b, size_t ldb, double beta, double* c, size_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
                static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}
#else
template <typename T>
inline void gemm(bool ta, bool tb, size_t m, size_t n, size_t k, T alpha, const T* a, size_t lda, const T* b,
                 size_t ldb, T beta, T* c, size_t ldc) {
    for (size_t i = 0; i < m; ++i) {
        T* crow = c + i * ldc;
        if (beta == T(0))
            std::fill(crow, crow + n, T(0));
        else if (beta != T(1))
            for (size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (size_t i = 0; i < m; ++i) {
        T* crow = c + i * ldc;
        for (size_t p = 0; p < k; ++p) {
            const T av = alpha * (ta ? a[p * lda + i] : a[i * lda + p]);
            if (av == T(0)) continue;
            const T* brow = tb ? nullptr : b + p * ldb;
            if (tb) {
                for (size_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
            } else {
                for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}
#endif

template <typename T>
inline bool grad_needed(const Tape<T>& tape, std::initializer_list<const Tensor<T>*> ins) {
    if (!tape.recording()) return false;
    for (const auto* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

// Largest representable value strictly below 1, so sigmoid output stays in the
// open interval (0,1) even at saturation.
template <typename T>
inline T one_minus_ulp() {
    return std::nextafter(T(1), T(0));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// out[m,n] = a[m,k] * b[k,n]
template <typename T>
Tensor<T> matmul(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    detail::gemm(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), out.data().data(), n);
    if (detail::grad_needed(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            if (a.requires_grad()) {
                a.ensure_grad();
                detail::gemm(false, true, m, k, n, T(1), g, n, b.data().data(), n, T(1), a.grad().data(), k);
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                detail::gemm(true, false, k, n, m, T(1), a.data().data(), k, g, n, T(1), b.grad().data(), n);
            }
        });
    }
    return out;
}

// out[b,j] = sum_i x[b,i] * w[i,j] + bias[j]
template <typename T>
Tensor<T> affine(Tape<T>& tape, Tensor<T> x, Tensor<T> w, Tensor<T> bias) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
        throw std::invalid_argument("affine: input " + shape_str(x.shape()) + " incompatible with weight " +
                                    shape_str(w.shape()));
    if (bias.rank() != 1 || bias.dim(0) != w.dim(1))
        throw std::invalid_argument("affine: bias " + shape_str(bias.shape()) + " incompatible with weight " +
                                    shape_str(w.shape()));
    const size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
    Tensor<T> out({m, n});
    detail::gemm(false, false, m, n, k, T(1), x.data().data(), k, w.data().data(), n, T(0), out.data().data(), n);
    for (size_t i = 0; i < m; ++i) {
        T* row = out.data().data() + i * n;
        for (size_t j = 0; j < n; ++j) row[j] += bias.data()[j];
    }
    if (detail::grad_needed(tape, {&x, &w, &bias})) {
        out.set_requires_grad(true);
        tape.record([x, w, bias, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            if (x.requires_grad()) {
                x.ensure_grad();
                detail::gemm(false, true, m, k, n, T(1), g, n, w.data().data(), n, T(1), x.grad().data(), k);
            }
            if (w.requires_grad()) {
                w.ensure_grad();
                detail::gemm(true, false, k, n, m, T(1), x.data().data(), k, g, n, T(1), w.grad().data(), n);
            }
            if (bias.requires_grad()) {
                bias.ensure_grad();
                T* db = bias.grad().data();
                for (size_t i = 0; i < m; ++i) {
                    const T* grow = g + i * n;
                    for (size_t j = 0; j < n; ++j) db[j] += grow[j];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dilated causal convolution (the TCN primitive)
// ---------------------------------------------------------------------------

// input [B, C, L], filters [O, C, k] -> out [B, O, L]
// out[b,o,s] = sum_{c,i} filters[o,c,i] * input[b,c,s - dilation*i], with
// out-of-range positions reading zero (left padding of (k-1)*dilation), so the
// output keeps the input length and position s never sees the future.
template <typename T>
Tensor<T> dilated_causal_conv1d(Tape<T>& tape, Tensor<T> input, Tensor<T> filters, int dilation) {
    if (dilation < 1)
        throw std::invalid_argument("dilated_causal_conv1d: dilation must be >= 1, got " + std::to_string(dilation));
    if (input.rank() != 3 || filters.rank() != 3)
        throw std::invalid_argument("dilated_causal_conv1d: expected input [B,C,L] and filters [O,C,k], got " +
                                    shape_str(input.shape()) + " and " + shape_str(filters.shape()));
    if (filters.dim(2) < 1)
        throw std::invalid_argument("dilated_causal_conv1d: kernel size must be >= 1");
    if (input.dim(1) != filters.dim(1))
        throw std::invalid_argument("dilated_causal_conv1d: channel mismatch between input " +
                                    shape_str(input.shape()) + " and filters " + shape_str(filters.shape()));
    const size_t B = input.dim(0), C = input.dim(1), L = input.dim(2);
    const size_t O = filters.dim(0), K = filters.dim(2);
    const size_t d = static_cast<size_t>(dilation);

    // im2col: rows indexed by (b,s), columns by (c,i).
    auto xcol = std::make_shared<std::vector<T>>(B * L * C * K, T(0));
    const T* xp = input.data().data();
    for (size_t b = 0; b < B; ++b) {
        for (size_t s = 0; s < L; ++s) {
            T* row = xcol->data() + (b * L + s) * C * K;
            for (size_t c = 0; c < C; ++c) {
                const T* xc = xp + (b * C + c) * L;
                for (size_t i = 0; i < K; ++i) {
                    const size_t back = d * i;
                    if (back <= s) row[c * K + i] = xc[s - back];
                }
            }
        }
    }

    // tmp[(b,s), o] = xcol * filters^T, then permute to [B, O, L].
    std::vector<T> tmp(B * L * O);
    detail::gemm(false, true, B * L, O, C * K, T(1), xcol->data(), C * K, filters.data().data(), C * K, T(0),
                 tmp.data(), O);
    Tensor<T> out({B, O, L});
    T* op = out.data().data();
    for (size_t b = 0; b < B; ++b)
        for (size_t s = 0; s < L; ++s) {
            const T* trow = tmp.data() + (b * L + s) * O;
            for (size_t o = 0; o < O; ++o) op[(b * O + o) * L + s] = trow[o];
        }

    if (detail::grad_needed(tape, {&input, &filters})) {
        out.set_requires_grad(true);
        tape.record([input, filters, out, xcol, B, C, L, O, K, d]() mutable {
            if (!out.has_grad()) return;
            // Gather output grads back into (b,s)-major layout.
            std::vector<T> gt(B * L * O);
            const T* gp = out.grad().data();
            for (size_t b = 0; b < B; ++b)
                for (size_t s = 0; s < L; ++s) {
                    T* grow = gt.data() + (b * L + s) * O;
                    for (size_t o = 0; o < O; ++o) grow[o] = gp[(b * O + o) * L + s];
                }
            if (filters.requires_grad()) {
                filters.ensure_grad();
                detail::gemm(true, false, O, C * K, B * L, T(1), gt.data(), O, xcol->data(), C * K, T(1),
                             filters.grad().data(), C * K);
            }
            if (input.requires_grad()) {
                input.ensure_grad();
                std::vector<T> dxcol(B * L * C * K);
                detail::gemm(false, false, B * L, C * K, O, T(1), gt.data(), O, filters.data().data(), C * K, T(0),
                             dxcol.data(), C * K);
                T* dx = input.grad().data();
                for (size_t b = 0; b < B; ++b)
                    for (size_t s = 0; s < L; ++s) {
                        const T* drow = dxcol.data() + (b * L + s) * C * K;
                        for (size_t c = 0; c < C; ++c) {
                            T* dxc = dx + (b * C + c) * L;
                            for (size_t i = 0; i < K; ++i) {
                                const size_t back = d * i;
                                if (back <= s) dxc[s - back] += drow[c * K + i];
                            }
                        }
                    }
            }
        });
    }
    return out;
}

// x [B, C, L] + bias[C], broadcast over batch and time.
template <typename T>
Tensor<T> add_channel_bias(Tape<T>& tape, Tensor<T> x, Tensor<T> bias) {
    if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
        throw std::invalid_argument("add_channel_bias: shapes " + shape_str(x.shape()) + " and " +
                                    shape_str(bias.shape()) + " do not conform");
    const size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
    Tensor<T> out(x.shape());
    const T* xp = x.data().data();
    T* op = out.data().data();
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < C; ++c) {
            const T bv = bias.data()[c];
            const size_t base = (b * C + c) * L;
            for (size_t s = 0; s < L; ++s) op[base + s] = xp[base + s] + bv;
        }
    if (detail::grad_needed(tape, {&x, &bias})) {
        out.set_requires_grad(true);
        tape.record([x, bias, out, B, C, L]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            if (x.requires_grad()) {
                x.ensure_grad();
                T* dx = x.grad().data();
                for (size_t i = 0; i < x.numel(); ++i) dx[i] += g[i];
            }
            if (bias.requires_grad()) {
                bias.ensure_grad();
                T* db = bias.grad().data();
                for (size_t b = 0; b < B; ++b)
                    for (size_t c = 0; c < C; ++c) {
                        const size_t base = (b * C + c) * L;
                        T acc = T(0);
                        for (size_t s = 0; s < L; ++s) acc += g[base + s];
                        db[c] += acc;
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(Tape<T>& tape, Tensor<T> x) {
    Tensor<T> out(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
    if (detail::grad_needed(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            x.ensure_grad();
            const T* g = out.grad().data();
            T* dx = x.grad().data();
            // gradient at exactly 0 is 0
            for (size_t i = 0; i < x.numel(); ++i)
                if (x.data()[i] > T(0)) dx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, Tensor<T> x) {
    Tensor<T> out(x.shape());
    const T lo = std::numeric_limits<T>::min();
    const T hi = detail::one_minus_ulp<T>();
    for (size_t i = 0; i < x.numel(); ++i) {
        const T v = x.data()[i];
        T s;
        if (v >= T(0)) {
            s = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            s = e / (T(1) + e);
        }
        out.data()[i] = std::min(hi, std::max(lo, s));
    }
    if (detail::grad_needed(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            x.ensure_grad();
            const T* g = out.grad().data();
            T* dx = x.grad().data();
            for (size_t i = 0; i < x.numel(); ++i) {
                const T s = out.data()[i];
                dx[i] += g[i] * s * (T(1) - s);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> tanh_op(Tape<T>& tape, Tensor<T> x) {
    Tensor<T> out(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) out.data()[i] = std::tanh(x.data()[i]);
    if (detail::grad_needed(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            x.ensure_grad();
            const T* g = out.grad().data();
            T* dx = x.grad().data();
            for (size_t i = 0; i < x.numel(); ++i) {
                const T t = out.data()[i];
                dx[i] += g[i] * (T(1) - t * t);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::grad_needed(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            if (a.requires_grad()) {
                a.ensure_grad();
                for (size_t i = 0; i < a.numel(); ++i) a.grad()[i] += g[i];
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                for (size_t i = 0; i < b.numel(); ++i) b.grad()[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, Tensor<T> a, Tensor<T> b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::grad_needed(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            if (a.requires_grad()) {
                a.ensure_grad();
                for (size_t i = 0; i < a.numel(); ++i) a.grad()[i] += g[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                for (size_t i = 0; i < b.numel(); ++i) b.grad()[i] += g[i] * a.data()[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, Tensor<T> x, T c) {
    Tensor<T> out(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) out.data()[i] = c * x.data()[i];
    if (detail::grad_needed(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, c]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            x.ensure_grad();
            for (size_t i = 0; i < x.numel(); ++i) x.grad()[i] += c * out.grad()[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tape<T>& tape, Tensor<T> x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor<T> out(std::move(shape));
    out.data() = x.data();
    if (detail::grad_needed(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            x.ensure_grad();
            for (size_t i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

// [..., A, B] -> [..., B, A]
template <typename T>
Tensor<T> swap_last2(Tape<T>& tape, Tensor<T> x) {
    if (x.rank() < 2) throw std::invalid_argument("swap_last2: rank must be >= 2, got " + shape_str(x.shape()));
    Shape shp = x.shape();
    const size_t A = shp[shp.size() - 2], Bd = shp[shp.size() - 1];
    std::swap(shp[shp.size() - 2], shp[shp.size() - 1]);
    const size_t outer = x.numel() / (A * Bd);
    Tensor<T> out(shp);
    const T* xp = x.data().data();
    T* op = out.data().data();
    for (size_t o = 0; o < outer; ++o) {
        const T* xi = xp + o * A * Bd;
        T* oi = op + o * A * Bd;
        for (size_t i = 0; i < A; ++i)
            for (size_t j = 0; j < Bd; ++j) oi[j * A + i] = xi[i * Bd + j];
    }
    if (detail::grad_needed(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, outer, A, Bd]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            x.ensure_grad();
            const T* g = out.grad().data();
            T* dx = x.grad().data();
            for (size_t o = 0; o < outer; ++o) {
                const T* gi = g + o * A * Bd;
                T* di = dx + o * A * Bd;
                for (size_t i = 0; i < A; ++i)
                    for (size_t j = 0; j < Bd; ++j) di[i * Bd + j] += gi[j * A + i];
            }
        });
    }
    return out;
}

// Last-dim concatenation; all leading dims must agree.
template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: needs at least one part");
    if (parts.size() == 1) return parts[0];
    const Shape& lead = parts[0].shape();
    size_t total_last = 0;
    for (const auto& p : parts) {
        if (p.rank() != lead.size())
            throw std::invalid_argument("concat: rank mismatch " + shape_str(lead) + " vs " + shape_str(p.shape()));
        for (size_t i = 0; i + 1 < lead.size(); ++i)
            if (p.shape()[i] != lead[i])
                throw std::invalid_argument("concat: leading dims differ, " + shape_str(lead) + " vs " +
                                            shape_str(p.shape()));
        total_last += p.shape().back();
    }
    Shape oshape = lead;
    oshape.back() = total_last;
    const size_t rows = shape_numel(oshape) / total_last;
    Tensor<T> out(oshape);
    size_t off = 0;
    for (const auto& p : parts) {
        const size_t w = p.shape().back();
        for (size_t r = 0; r < rows; ++r)
            std::copy_n(p.data().data() + r * w, w, out.data().data() + r * total_last + off);
        off += w;
    }
    bool need = false;
    for (const auto& p : parts) need = need || p.requires_grad();
    if (tape.recording() && need) {
        out.set_requires_grad(true);
        auto caps = parts;  // shared handles
        tape.record([caps, out, rows, total_last]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            size_t off2 = 0;
            for (auto& p : caps) {
                const size_t w = p.shape().back();
                if (p.requires_grad()) {
                    p.ensure_grad();
                    T* dp = p.grad().data();
                    for (size_t r = 0; r < rows; ++r) {
                        const T* gr = g + r * total_last + off2;
                        T* pr = dp + r * w;
                        for (size_t j = 0; j < w; ++j) pr[j] += gr[j];
                    }
                }
                off2 += w;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding_gather(Tape<T>& tape, Tensor<T> table, const std::vector<int32_t>& ids) {
    if (table.rank() != 2)
        throw std::invalid_argument("embedding_gather: table must be rank 2, got " + shape_str(table.shape()));
    const size_t vocab = table.dim(0), dim = table.dim(1);
    for (int32_t id : ids)
        if (id < 0 || static_cast<size_t>(id) >= vocab)
            throw std::out_of_range("embedding_gather: id " + std::to_string(id) + " out of range [0," +
                                    std::to_string(vocab) + ")");
    Tensor<T> out({ids.size(), dim});
    for (size_t r = 0; r < ids.size(); ++r)
        std::copy_n(table.data().data() + static_cast<size_t>(ids[r]) * dim, dim, out.data().data() + r * dim);
    if (detail::grad_needed(tape, {&table})) {
        out.set_requires_grad(true);
        auto ids_cap = std::make_shared<std::vector<int32_t>>(ids);
        tape.record([table, out, ids_cap, dim]() mutable {
            if (!out.has_grad() || !table.requires_grad()) return;
            table.ensure_grad();
            const T* g = out.grad().data();
            T* dt = table.grad().data();
            for (size_t r = 0; r < ids_cap->size(); ++r) {
                T* row = dt + static_cast<size_t>((*ids_cap)[r]) * dim;
                const T* gr = g + r * dim;
                for (size_t j = 0; j < dim; ++j) row[j] += gr[j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_lastdim(Tape<T>& tape, Tensor<T> x) {
    if (x.rank() < 1) throw std::invalid_argument("sum_lastdim: needs rank >= 1");
    const size_t w = x.shape().back();
    const size_t rows = x.numel() / std::max<size_t>(w, 1);
    Shape oshape = x.shape();
    oshape.back() = 1;
    Tensor<T> out(oshape);
    for (size_t r = 0; r < rows; ++r) {
        T acc = T(0);
        const T* xr = x.data().data() + r * w;
        for (size_t j = 0; j < w; ++j) acc += xr[j];
        out.data()[r] = acc;
    }
    if (detail::grad_needed(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, rows, w]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            x.ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const T g = out.grad()[r];
                T* dx = x.grad().data() + r * w;
                for (size_t j = 0; j < w; ++j) dx[j] += g;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>& tape, Tensor<T> x) {
    Tensor<T> out({1});
    T acc = T(0);
    for (size_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
    out.data()[0] = acc;
    if (detail::grad_needed(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            x.ensure_grad();
            const T g = out.grad()[0];
            for (size_t i = 0; i < x.numel(); ++i) x.grad()[i] += g;
        });
    }
    return out;
}

// x + s, where s is a single-element tensor broadcast over x.
template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, Tensor<T> x, Tensor<T> s) {
    if (s.numel() != 1)
        throw std::invalid_argument("add_scalar: scalar operand has shape " + shape_str(s.shape()));
    Tensor<T> out(x.shape());
    const T sv = s.data()[0];
    for (size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] + sv;
    if (detail::grad_needed(tape, {&x, &s})) {
        out.set_requires_grad(true);
        tape.record([x, s, out]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            if (x.requires_grad()) {
                x.ensure_grad();
                for (size_t i = 0; i < x.numel(); ++i) x.grad()[i] += g[i];
            }
            if (s.requires_grad()) {
                s.ensure_grad();
                T acc = T(0);
                for (size_t i = 0; i < out.numel(); ++i) acc += g[i];
                s.grad()[0] += acc;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> softmax_lastdim(Tape<T>& tape, Tensor<T> x) {
    if (x.rank() < 1 || x.shape().back() == 0)
        throw std::invalid_argument("softmax_lastdim: bad shape " + shape_str(x.shape()));
    const size_t w = x.shape().back();
    const size_t rows = x.numel() / w;
    Tensor<T> out(x.shape());
    for (size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * w;
        T* orow = out.data().data() + r * w;
        T mx = xr[0];
        for (size_t j = 1; j < w; ++j) mx = std::max(mx, xr[j]);
        T z = T(0);
        for (size_t j = 0; j < w; ++j) {
            orow[j] = std::exp(xr[j] - mx);
            z += orow[j];
        }
        for (size_t j = 0; j < w; ++j) orow[j] /= z;
    }
    if (detail::grad_needed(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, rows, w]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            x.ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const T* s = out.data().data() + r * w;
                const T* g = out.grad().data() + r * w;
                T* dx = x.grad().data() + r * w;
                T dot = T(0);
                for (size_t j = 0; j < w; ++j) dot += g[j] * s[j];
                for (size_t j = 0; j < w; ++j) dx[j] += s[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

// out[b,d] = sum_j weights[b,j] * seq[b,j,d] (attention pooling over time)
template <typename T>
Tensor<T> attn_pool(Tape<T>& tape, Tensor<T> weights, Tensor<T> seq) {
    if (weights.rank() != 2 || seq.rank() != 3 || weights.dim(0) != seq.dim(0) || weights.dim(1) != seq.dim(1))
        throw std::invalid_argument("attn_pool: weights " + shape_str(weights.shape()) + " incompatible with seq " +
                                    shape_str(seq.shape()));
    const size_t B = seq.dim(0), K = seq.dim(1), D = seq.dim(2);
    Tensor<T> out({B, D});
    for (size_t b = 0; b < B; ++b) {
        T* orow = out.data().data() + b * D;
        for (size_t j = 0; j < K; ++j) {
            const T wv = weights.data()[b * K + j];
            const T* srow = seq.data().data() + (b * K + j) * D;
            for (size_t d = 0; d < D; ++d) orow[d] += wv * srow[d];
        }
    }
    if (detail::grad_needed(tape, {&weights, &seq})) {
        out.set_requires_grad(true);
        tape.record([weights, seq, out, B, K, D]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad().data();
            if (weights.requires_grad()) {
                weights.ensure_grad();
                for (size_t b = 0; b < B; ++b)
                    for (size_t j = 0; j < K; ++j) {
                        const T* srow = seq.data().data() + (b * K + j) * D;
                        const T* grow = g + b * D;
                        T acc = T(0);
                        for (size_t d = 0; d < D; ++d) acc += grow[d] * srow[d];
                        weights.grad()[b * K + j] += acc;
                    }
            }
            if (seq.requires_grad()) {
                seq.ensure_grad();
                for (size_t b = 0; b < B; ++b)
                    for (size_t j = 0; j < K; ++j) {
                        const T wv = weights.data()[b * K + j];
                        const T* grow = g + b * D;
                        T* drow = seq.grad().data() + (b * K + j) * D;
                        for (size_t d = 0; d < D; ++d) drow[d] += wv * grow[d];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dropout (spatial: whole channels across the time axis)
// ---------------------------------------------------------------------------

// x [B, C, L]; in training mode zeroes each (batch, channel) slice with
// probability rate and scales survivors by 1/(1-rate). Identity in eval mode
// and at rate 0.
template <typename T>
Tensor<T> spatial_dropout(Tape<T>& tape, Tensor<T> x, double rate, bool training, SplitRng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw std::invalid_argument("spatial_dropout: rate must be in [0,1), got " + std::to_string(rate));
    if (x.rank() != 3)
        throw std::invalid_argument("spatial_dropout: expected [B,C,L], got " + shape_str(x.shape()));
    if (!training || rate == 0.0) return x;
    const size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
    auto mask = std::make_shared<std::vector<T>>(B * C);
    const T keep_scale = T(1.0 / (1.0 - rate));
    for (size_t i = 0; i < B * C; ++i) (*mask)[i] = rng.uniform01() < rate ? T(0) : keep_scale;
    Tensor<T> out(x.shape());
    for (size_t i = 0; i < B * C; ++i) {
        const T m = (*mask)[i];
        const T* xi = x.data().data() + i * L;
        T* oi = out.data().data() + i * L;
        for (size_t s = 0; s < L; ++s) oi[s] = m * xi[s];
    }
    if (detail::grad_needed(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, mask, B, C, L]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            x.ensure_grad();
            const T* g = out.grad().data();
            T* dx = x.grad().data();
            for (size_t i = 0; i < B * C; ++i) {
                const T m = (*mask)[i];
                for (size_t s = 0; s < L; ++s) dx[i * L + s] += m * g[i * L + s];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

inline constexpr double kBceEps = 1e-7;

// Mean binary cross-entropy; predictions are clamped to [eps, 1-eps] before
// the logarithm, and the gradient is zero in the clamped region (the clamp is
// part of the differentiated function).
template <typename T>
Tensor<T> bce_loss(Tape<T>& tape, Tensor<T> pred, Tensor<T> label) {
    if (pred.numel() != label.numel())
        throw std::invalid_argument("bce_loss: prediction " + shape_str(pred.shape()) + " vs label " +
                                    shape_str(label.shape()));
    if (pred.numel() == 0) throw std::invalid_argument("bce_loss: empty batch");
    for (size_t i = 0; i < label.numel(); ++i)
        if (label.data()[i] != T(0) && label.data()[i] != T(1))
            throw std::invalid_argument("bce_loss: label must be 0 or 1, got " +
                                        std::to_string(static_cast<double>(label.data()[i])));
    const size_t n = pred.numel();
    const T eps = T(kBceEps);
    Tensor<T> out({1});
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) {
        const T p = std::min(T(1) - eps, std::max(eps, pred.data()[i]));
        const T y = label.data()[i];
        acc += -(y * std::log(p) + (T(1) - y) * std::log(T(1) - p));
    }
    out.data()[0] = acc / static_cast<T>(n);
    if (detail::grad_needed(tape, {&pred})) {
        out.set_requires_grad(true);
        tape.record([pred, label, out, n, eps]() mutable {
            if (!out.has_grad() || !pred.requires_grad()) return;
            pred.ensure_grad();
            const T g = out.grad()[0] / static_cast<T>(n);
            for (size_t i = 0; i < n; ++i) {
                const T raw = pred.data()[i];
                if (raw <= eps || raw >= T(1) - eps) continue;
                const T y = label.data()[i];
                pred.grad()[i] += g * (-(y / raw) + (T(1) - y) / (T(1) - raw));
            }
        });
    }
    return out;
}

}  // namespace mpm
