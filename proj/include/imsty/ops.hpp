#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "imsty/parallel.hpp"
#include "imsty/tensor.hpp"

// Differentiable operations. Every op computes its forward value eagerly and,
// when a tape is active and some input requires a gradient, records a closure
// that accumulates input gradients from the output gradient. Gradients are
// only ever accumulated into tensors whose requires_grad flag is set.

namespace imsty {
namespace detail {

inline bool track(std::initializer_list<const Tensor*> inputs) {
    if (!recording()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline void finish(Tensor& out, bool tracked, std::function<void()> backward_fn) {
    if (tracked) {
        out.set_requires_grad(true);
        active_tape()->record(std::move(backward_fn));
    }
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch between " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
}

inline long long div_floor(long long a, long long b) {
    long long q = a / b;
    long long r = a % b;
    return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

inline long long div_ceil(long long a, long long b) { return -div_floor(-a, b); }

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("add", a, b);
    Tensor y(a.shape());
    const std::size_t n = a.numel();
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* py = y.ptr();
    for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
    const bool tracked = detail::track({&a, &b});
    detail::finish(y, tracked, [a, b, y]() mutable {
        if (!y.has_grad()) return;
        const double* g = y.grad_ptr();
        const std::size_t m = y.numel();
        if (a.requires_grad()) {
            a.ensure_grad();
            double* ga = a.grad_ptr();
            for (std::size_t i = 0; i < m; ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            b.ensure_grad();
            double* gb = b.grad_ptr();
            for (std::size_t i = 0; i < m; ++i) gb[i] += g[i];
        }
    });
    return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    Tensor y(a.shape());
    const std::size_t n = a.numel();
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* py = y.ptr();
    for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
    const bool tracked = detail::track({&a, &b});
    detail::finish(y, tracked, [a, b, y]() mutable {
        if (!y.has_grad()) return;
        const double* g = y.grad_ptr();
        const std::size_t m = y.numel();
        if (a.requires_grad()) {
            a.ensure_grad();
            double* ga = a.grad_ptr();
            for (std::size_t i = 0; i < m; ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            b.ensure_grad();
            double* gb = b.grad_ptr();
            for (std::size_t i = 0; i < m; ++i) gb[i] -= g[i];
        }
    });
    return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    Tensor y(a.shape());
    const std::size_t n = a.numel();
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* py = y.ptr();
    for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
    const bool tracked = detail::track({&a, &b});
    detail::finish(y, tracked, [a, b, y]() mutable {
        if (!y.has_grad()) return;
        const double* g = y.grad_ptr();
        const std::size_t m = y.numel();
        if (a.requires_grad()) {
            a.ensure_grad();
            double* ga = a.grad_ptr();
            const double* pbb = b.ptr();
            for (std::size_t i = 0; i < m; ++i) ga[i] += g[i] * pbb[i];
        }
        if (b.requires_grad()) {
            b.ensure_grad();
            double* gb = b.grad_ptr();
            const double* paa = a.ptr();
            for (std::size_t i = 0; i < m; ++i) gb[i] += g[i] * paa[i];
        }
    });
    return y;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor y(a.shape());
    const std::size_t n = a.numel();
    const double* pa = a.ptr();
    double* py = y.ptr();
    for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] + s;
    const bool tracked = detail::track({&a});
    detail::finish(y, tracked, [a, y]() mutable {
        if (!y.has_grad() || !a.requires_grad()) return;
        a.ensure_grad();
        const double* g = y.grad_ptr();
        double* ga = a.grad_ptr();
        const std::size_t m = y.numel();
        for (std::size_t i = 0; i < m; ++i) ga[i] += g[i];
    });
    return y;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    Tensor y(a.shape());
    const std::size_t n = a.numel();
    const double* pa = a.ptr();
    double* py = y.ptr();
    for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] * s;
    const bool tracked = detail::track({&a});
    detail::finish(y, tracked, [a, y, s]() mutable {
        if (!y.has_grad() || !a.requires_grad()) return;
        a.ensure_grad();
        const double* g = y.grad_ptr();
        double* ga = a.grad_ptr();
        const std::size_t m = y.numel();
        for (std::size_t i = 0; i < m; ++i) ga[i] += g[i] * s;
    });
    return y;
}

inline Tensor sqrt_elem(const Tensor& a) {
    Tensor y(a.shape());
    const std::size_t n = a.numel();
    const double* pa = a.ptr();
    double* py = y.ptr();
    for (std::size_t i = 0; i < n; ++i) {
        if (pa[i] < 0.0) {
            throw std::domain_error("sqrt_elem: negative input " + std::to_string(pa[i]) +
                                    " at index " + std::to_string(i));
        }
        py[i] = std::sqrt(pa[i]);
    }
    const bool tracked = detail::track({&a});
    detail::finish(y, tracked, [a, y]() mutable {
        if (!y.has_grad() || !a.requires_grad()) return;
        a.ensure_grad();
        const double* g = y.grad_ptr();
        const double* py2 = y.ptr();
        double* ga = a.grad_ptr();
        const std::size_t m = y.numel();
        for (std::size_t i = 0; i < m; ++i) ga[i] += g[i] * 0.5 / py2[i];
    });
    return y;
}

inline Tensor relu(const Tensor& a) {
    Tensor y(a.shape());
    const std::size_t n = a.numel();
    const double* pa = a.ptr();
    double* py = y.ptr();
    for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] > 0.0 ? pa[i] : 0.0;
    const bool tracked = detail::track({&a});
    detail::finish(y, tracked, [a, y]() mutable {
        if (!y.has_grad() || !a.requires_grad()) return;
        a.ensure_grad();
        const double* g = y.grad_ptr();
        const double* pa2 = a.ptr();
        double* ga = a.grad_ptr();
        const std::size_t m = y.numel();
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < m; ++i) ga[i] += pa2[i] > 0.0 ? g[i] : 0.0;
    });
    return y;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor y(a.shape());
    const std::size_t n = a.numel();
    const double* pa = a.ptr();
    double* py = y.ptr();
    for (std::size_t i = 0; i < n; ++i) py[i] = detail::stable_sigmoid(pa[i]);
    const bool tracked = detail::track({&a});
    detail::finish(y, tracked, [a, y]() mutable {
        if (!y.has_grad() || !a.requires_grad()) return;
        a.ensure_grad();
        const double* g = y.grad_ptr();
        const double* py2 = y.ptr();
        double* ga = a.grad_ptr();
        const std::size_t m = y.numel();
        for (std::size_t i = 0; i < m; ++i) ga[i] += g[i] * py2[i] * (1.0 - py2[i]);
    });
    return y;
}

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
    if (a.rank() == 0 || a.dim(a.rank() - 1) == 0) {
        throw std::invalid_argument("softmax: empty axis in shape " + detail::shape_str(a.shape()));
    }
    const std::size_t cols = a.dim(a.rank() - 1);
    const std::size_t rows = a.numel() / cols;
    Tensor y(a.shape());
    const double* pa = a.ptr();
    double* py = y.ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = pa + r * cols;
        double* yr = py + r * cols;
        double mx = xr[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= sum;
    }
    const bool tracked = detail::track({&a});
    detail::finish(y, tracked, [a, y, rows, cols]() mutable {
        if (!y.has_grad() || !a.requires_grad()) return;
        a.ensure_grad();
        const double* g = y.grad_ptr();
        const double* py2 = y.ptr();
        double* ga = a.grad_ptr();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * cols;
            const double* yr = py2 + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
            double* gar = ga + r * cols;
            for (std::size_t c = 0; c < cols; ++c) gar[c] += (gr[c] - dot) * yr[c];
        }
    });
    return y;
}

/// Copying reshape (row-major order preserved).
inline Tensor reshape(const Tensor& a, std::vector<std::size_t> new_shape) {
    Tensor y = Tensor::from_data(std::move(new_shape), a.raw());
    if (y.numel() != a.numel()) {
        throw std::invalid_argument("reshape: cannot view " + detail::shape_str(a.shape()) + " as " +
                                    detail::shape_str(y.shape()));
    }
    const bool tracked = detail::track({&a});
    detail::finish(y, tracked, [a, y]() mutable {
        if (!y.has_grad() || !a.requires_grad()) return;
        a.ensure_grad();
        const double* g = y.grad_ptr();
        double* ga = a.grad_ptr();
        const std::size_t m = y.numel();
        for (std::size_t i = 0; i < m; ++i) ga[i] += g[i];
    });
    return y;
}

/// Flattens [N, ...] to [N, rest].
inline Tensor flatten(const Tensor& a) {
    if (a.rank() < 2) throw std::invalid_argument("flatten: needs rank >= 2, got " + detail::shape_str(a.shape()));
    return reshape(a, {a.dim(0), a.numel() / a.dim(0)});
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    const double* pa = a.ptr();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) s += pa[i];
    Tensor y = Tensor::scalar(s);
    const bool tracked = detail::track({&a});
    detail::finish(y, tracked, [a, y]() mutable {
        if (!y.has_grad() || !a.requires_grad()) return;
        a.ensure_grad();
        const double g = y.grad_ptr()[0];
        double* ga = a.grad_ptr();
        const std::size_t m = a.numel();
        for (std::size_t i = 0; i < m; ++i) ga[i] += g;
    });
    return y;
}

inline Tensor mean_all(const Tensor& a) {
    const std::size_t n = a.numel();
    double s = 0.0;
    const double* pa = a.ptr();
    for (std::size_t i = 0; i < n; ++i) s += pa[i];
    Tensor y = Tensor::scalar(s / static_cast<double>(n));
    const bool tracked = detail::track({&a});
    detail::finish(y, tracked, [a, y, n]() mutable {
        if (!y.has_grad() || !a.requires_grad()) return;
        a.ensure_grad();
        const double g = y.grad_ptr()[0] / static_cast<double>(n);
        double* ga = a.grad_ptr();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
    return y;
}

/// Per-channel mean of an NCHW tensor over (N, H, W); result has shape [C].
inline Tensor channel_mean(const Tensor& x) {
    if (x.rank() != 4) {
        throw std::invalid_argument("channel_mean: expected NCHW tensor, got " +
                                    detail::shape_str(x.shape()));
    }
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor y({C});
    const double* px = x.ptr();
    double* py = y.ptr();
    const double inv = 1.0 / static_cast<double>(N * HW);
    for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            const double* row = px + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) s += row[i];
        }
        py[c] = s * inv;
    }
    const bool tracked = detail::track({&x});
    detail::finish(y, tracked, [x, y, N, C, HW, inv]() mutable {
        if (!y.has_grad() || !x.requires_grad()) return;
        x.ensure_grad();
        const double* g = y.grad_ptr();
        double* gx = x.grad_ptr();
        for (std::size_t c = 0; c < C; ++c) {
            const double gc = g[c] * inv;
            for (std::size_t n = 0; n < N; ++n) {
                double* row = gx + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) row[i] += gc;
            }
        }
    });
    return y;
}

/// Per-sample per-channel mean over (H, W); result has shape [N, C].
inline Tensor instance_mean(const Tensor& x) {
    if (x.rank() != 4) {
        throw std::invalid_argument("instance_mean: expected NCHW tensor, got " +
                                    detail::shape_str(x.shape()));
    }
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor y({N, C});
    const double* px = x.ptr();
    double* py = y.ptr();
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const double* row = px + (n * C + c) * HW;
            double s = 0.0;
            for (std::size_t i = 0; i < HW; ++i) s += row[i];
            py[n * C + c] = s * inv;
        }
    }
    const bool tracked = detail::track({&x});
    detail::finish(y, tracked, [x, y, N, C, HW, inv]() mutable {
        if (!y.has_grad() || !x.requires_grad()) return;
        x.ensure_grad();
        const double* g = y.grad_ptr();
        double* gx = x.grad_ptr();
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
                const double gc = g[n * C + c] * inv;
                double* row = gx + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) row[i] += gc;
            }
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// Broadcast arithmetic against per-channel ([C]) or leading-prefix statistics
// ---------------------------------------------------------------------------

namespace detail {

enum class BcastArith { add, sub, mul, div };

// Channel mode: x has rank >= 2, s has shape [x.dim(1)]; s broadcasts along
// axis 1. Used by batch norm and minibatch-scope stylization.
inline Tensor channel_bcast(const char* name, BcastArith kind, const Tensor& x, const Tensor& s) {
    if (x.rank() < 2) {
        throw std::invalid_argument(std::string(name) + ": tensor rank must be >= 2, got " +
                                    shape_str(x.shape()));
    }
    if (s.rank() != 1 || s.dim(0) != x.dim(1)) {
        throw std::invalid_argument(std::string(name) + ": channel vector " + shape_str(s.shape()) +
                                    " does not match channels of " + shape_str(x.shape()));
    }
    const std::size_t N = x.dim(0), C = x.dim(1), inner = x.numel() / (x.dim(0) * x.dim(1));
    Tensor y(x.shape());
    const double* px = x.ptr();
    const double* ps = s.ptr();
    double* py = y.ptr();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const double sv = ps[c];
            const double* xr = px + (n * C + c) * inner;
            double* yr = py + (n * C + c) * inner;
            switch (kind) {
                case BcastArith::add:
                    for (std::size_t i = 0; i < inner; ++i) yr[i] = xr[i] + sv;
                    break;
                case BcastArith::sub:
                    for (std::size_t i = 0; i < inner; ++i) yr[i] = xr[i] - sv;
                    break;
                case BcastArith::mul:
                    for (std::size_t i = 0; i < inner; ++i) yr[i] = xr[i] * sv;
                    break;
                case BcastArith::div:
                    for (std::size_t i = 0; i < inner; ++i) yr[i] = xr[i] / sv;
                    break;
            }
        }
    }
    const bool tracked = track({&x, &s});
    finish(y, tracked, [kind, x, s, y, N, C, inner]() mutable {
        if (!y.has_grad()) return;
        const double* g = y.grad_ptr();
        const double* ps2 = s.ptr();
        if (x.requires_grad()) {
            x.ensure_grad();
            double* gx = x.grad_ptr();
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t off = (n * C + c) * inner;
                    const double sv = ps2[c];
                    switch (kind) {
                        case BcastArith::add:
                        case BcastArith::sub:
                            for (std::size_t i = 0; i < inner; ++i) gx[off + i] += g[off + i];
                            break;
                        case BcastArith::mul:
                            for (std::size_t i = 0; i < inner; ++i) gx[off + i] += g[off + i] * sv;
                            break;
                        case BcastArith::div:
                            for (std::size_t i = 0; i < inner; ++i) gx[off + i] += g[off + i] / sv;
                            break;
                    }
                }
            }
        }
        if (s.requires_grad()) {
            s.ensure_grad();
            double* gs = s.grad_ptr();
            const double* px2 = x.ptr();
            for (std::size_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * inner;
                    switch (kind) {
                        case BcastArith::add:
                            for (std::size_t i = 0; i < inner; ++i) acc += g[off + i];
                            break;
                        case BcastArith::sub:
                            for (std::size_t i = 0; i < inner; ++i) acc -= g[off + i];
                            break;
                        case BcastArith::mul:
                            for (std::size_t i = 0; i < inner; ++i) acc += g[off + i] * px2[off + i];
                            break;
                        case BcastArith::div: {
                            const double sv = ps2[c];
                            for (std::size_t i = 0; i < inner; ++i)
                                acc -= g[off + i] * px2[off + i] / (sv * sv);
                            break;
                        }
                    }
                }
                gs[c] += acc;
            }
        }
    });
    return y;
}

// Prefix mode: s's shape equals the leading dims of x's shape; s broadcasts
// over the remaining (suffix) axes. Used by per-instance statistics ([N, C]
// against NCHW) and by loss masks ([N] or [N, J]).
inline Tensor prefix_bcast(const char* name, BcastArith kind, const Tensor& x, const Tensor& s) {
    if (s.rank() > x.rank()) {
        throw std::invalid_argument(std::string(name) + ": prefix " + shape_str(s.shape()) +
                                    " has higher rank than " + shape_str(x.shape()));
    }
    for (std::size_t i = 0; i < s.rank(); ++i) {
        if (s.dim(i) != x.dim(i)) {
            throw std::invalid_argument(std::string(name) + ": prefix " + shape_str(s.shape()) +
                                        " does not match leading dims of " + shape_str(x.shape()));
        }
    }
    const std::size_t groups = s.numel();
    const std::size_t inner = x.numel() / groups;
    Tensor y(x.shape());
    const double* px = x.ptr();
    const double* ps = s.ptr();
    double* py = y.ptr();
    for (std::size_t gdx = 0; gdx < groups; ++gdx) {
        const double sv = ps[gdx];
        const double* xr = px + gdx * inner;
        double* yr = py + gdx * inner;
        switch (kind) {
            case BcastArith::add:
                for (std::size_t i = 0; i < inner; ++i) yr[i] = xr[i] + sv;
                break;
            case BcastArith::sub:
                for (std::size_t i = 0; i < inner; ++i) yr[i] = xr[i] - sv;
                break;
            case BcastArith::mul:
                for (std::size_t i = 0; i < inner; ++i) yr[i] = xr[i] * sv;
                break;
            case BcastArith::div:
                for (std::size_t i = 0; i < inner; ++i) yr[i] = xr[i] / sv;
                break;
        }
    }
    const bool tracked = track({&x, &s});
    finish(y, tracked, [kind, x, s, y, groups, inner]() mutable {
        if (!y.has_grad()) return;
        const double* g = y.grad_ptr();
        const double* ps2 = s.ptr();
        if (x.requires_grad()) {
            x.ensure_grad();
            double* gx = x.grad_ptr();
            for (std::size_t gdx = 0; gdx < groups; ++gdx) {
                const std::size_t off = gdx * inner;
                const double sv = ps2[gdx];
                switch (kind) {
                    case BcastArith::add:
                    case BcastArith::sub:
                        for (std::size_t i = 0; i < inner; ++i) gx[off + i] += g[off + i];
                        break;
                    case BcastArith::mul:
                        for (std::size_t i = 0; i < inner; ++i) gx[off + i] += g[off + i] * sv;
                        break;
                    case BcastArith::div:
                        for (std::size_t i = 0; i < inner; ++i) gx[off + i] += g[off + i] / sv;
                        break;
                }
            }
        }
        if (s.requires_grad()) {
            s.ensure_grad();
            double* gs = s.grad_ptr();
            const double* px2 = x.ptr();
            for (std::size_t gdx = 0; gdx < groups; ++gdx) {
                const std::size_t off = gdx * inner;
                double acc = 0.0;
                switch (kind) {
                    case BcastArith::add:
                        for (std::size_t i = 0; i < inner; ++i) acc += g[off + i];
                        break;
                    case BcastArith::sub:
                        for (std::size_t i = 0; i < inner; ++i) acc -= g[off + i];
                        break;
                    case BcastArith::mul:
                        for (std::size_t i = 0; i < inner; ++i) acc += g[off + i] * px2[off + i];
                        break;
                    case BcastArith::div: {
                        const double sv = ps2[gdx];
                        for (std::size_t i = 0; i < inner; ++i)
                            acc -= g[off + i] * px2[off + i] / (sv * sv);
                        break;
                    }
                }
                gs[gdx] += acc;
            }
        }
    });
    return y;
}

}  // namespace detail

inline Tensor add_channel(const Tensor& x, const Tensor& s) {
    return detail::channel_bcast("add_channel", detail::BcastArith::add, x, s);
}
inline Tensor sub_channel(const Tensor& x, const Tensor& s) {
    return detail::channel_bcast("sub_channel", detail::BcastArith::sub, x, s);
}
inline Tensor mul_channel(const Tensor& x, const Tensor& s) {
    return detail::channel_bcast("mul_channel", detail::BcastArith::mul, x, s);
}
inline Tensor div_channel(const Tensor& x, const Tensor& s) {
    return detail::channel_bcast("div_channel", detail::BcastArith::div, x, s);
}

inline Tensor add_prefix(const Tensor& x, const Tensor& s) {
    return detail::prefix_bcast("add_prefix", detail::BcastArith::add, x, s);
}
inline Tensor sub_prefix(const Tensor& x, const Tensor& s) {
    return detail::prefix_bcast("sub_prefix", detail::BcastArith::sub, x, s);
}
inline Tensor mul_prefix(const Tensor& x, const Tensor& s) {
    return detail::prefix_bcast("mul_prefix", detail::BcastArith::mul, x, s);
}
inline Tensor div_prefix(const Tensor& x, const Tensor& s) {
    return detail::prefix_bcast("div_prefix", detail::BcastArith::div, x, s);
}

// ---------------------------------------------------------------------------
// Dense / convolutional layers
// ---------------------------------------------------------------------------

/// y[n, o] = b[o] + sum_f x[n, f] * w[o, f]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
        throw std::invalid_argument("linear: expected x [N,F], w [O,F], b [O]; got " +
                                    detail::shape_str(x.shape()) + ", " + detail::shape_str(w.shape()) +
                                    ", " + detail::shape_str(b.shape()));
    }
    const std::size_t N = x.dim(0), F = x.dim(1), O = w.dim(0);
    if (w.dim(1) != F || b.dim(0) != O) {
        throw std::invalid_argument("linear: shape mismatch between x " + detail::shape_str(x.shape()) +
                                    ", w " + detail::shape_str(w.shape()) + ", b " +
                                    detail::shape_str(b.shape()));
    }
    Tensor y({N, O});
    const double* px = x.ptr();
    const double* pw = w.ptr();
    const double* pb = b.ptr();
    double* py = y.ptr();
    for (std::size_t n = 0; n < N; ++n) {
        const double* xr = px + n * F;
        double* yr = py + n * O;
        for (std::size_t o = 0; o < O; ++o) {
            const double* wr = pw + o * F;
            double s = pb[o];
            for (std::size_t f = 0; f < F; ++f) s += xr[f] * wr[f];
            yr[o] = s;
        }
    }
    const bool tracked = detail::track({&x, &w, &b});
    detail::finish(y, tracked, [x, w, b, y, N, F, O]() mutable {
        if (!y.has_grad()) return;
        const double* g = y.grad_ptr();
        if (x.requires_grad()) {
            x.ensure_grad();
            double* gx = x.grad_ptr();
            const double* pw2 = w.ptr();
            for (std::size_t n = 0; n < N; ++n) {
                const double* gr = g + n * O;
                double* gxr = gx + n * F;
                for (std::size_t o = 0; o < O; ++o) {
                    const double go = gr[o];
                    const double* wr = pw2 + o * F;
                    for (std::size_t f = 0; f < F; ++f) gxr[f] += go * wr[f];
                }
            }
        }
        if (w.requires_grad()) {
            w.ensure_grad();
            double* gw = w.grad_ptr();
            const double* px2 = x.ptr();
            for (std::size_t n = 0; n < N; ++n) {
                const double* gr = g + n * O;
                const double* xr = px2 + n * F;
                for (std::size_t o = 0; o < O; ++o) {
                    const double go = gr[o];
                    double* gwr = gw + o * F;
                    for (std::size_t f = 0; f < F; ++f) gwr[f] += go * xr[f];
                }
            }
        }
        if (b.requires_grad()) {
            b.ensure_grad();
            double* gb = b.grad_ptr();
            for (std::size_t n = 0; n < N; ++n) {
                const double* gr = g + n * O;
                for (std::size_t o = 0; o < O; ++o) gb[o] += gr[o];
            }
        }
    });
    return y;
}

namespace detail {

struct ConvDims {
    std::size_t N, Ci, H, W, Co, Kh, Kw, Ho, Wo;
    int stride, padding;
};

inline ConvDims conv_dims(const char* op, const Tensor& input, const Tensor& kernel, int stride,
                          int padding, bool transposed) {
    if (input.rank() != 4 || kernel.rank() != 4) {
        throw std::invalid_argument(std::string(op) + ": expected 4-d input and kernel, got " +
                                    shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
    }
    if (stride < 1) throw std::invalid_argument(std::string(op) + ": stride must be >= 1");
    if (padding < 0) throw std::invalid_argument(std::string(op) + ": padding must be >= 0");
    ConvDims d{};
    d.N = input.dim(0);
    d.H = input.dim(2);
    d.W = input.dim(3);
    d.stride = stride;
    d.padding = padding;
    d.Kh = kernel.dim(2);
    d.Kw = kernel.dim(3);
    if (!transposed) {
        // input [N, Ci, H, W], kernel [Co, Ci, Kh, Kw]
        d.Ci = input.dim(1);
        d.Co = kernel.dim(0);
        if (kernel.dim(1) != d.Ci) {
            throw std::invalid_argument(std::string(op) + ": input channels of " +
                                        shape_str(input.shape()) + " do not match kernel " +
                                        shape_str(kernel.shape()));
        }
        const long long ho = (static_cast<long long>(d.H) + 2 * padding - static_cast<long long>(d.Kh)) / stride + 1;
        const long long wo = (static_cast<long long>(d.W) + 2 * padding - static_cast<long long>(d.Kw)) / stride + 1;
        if (ho < 1 || wo < 1) {
            throw std::invalid_argument(std::string(op) + ": kernel " + shape_str(kernel.shape()) +
                                        " larger than padded input " + shape_str(input.shape()));
        }
        d.Ho = static_cast<std::size_t>(ho);
        d.Wo = static_cast<std::size_t>(wo);
    } else {
        // input [N, Ci, H, W], kernel [Ci, Co, Kh, Kw]; adjoint of conv2d
        d.Ci = input.dim(1);
        d.Co = kernel.dim(1);
        if (kernel.dim(0) != d.Ci) {
            throw std::invalid_argument(std::string(op) + ": input channels of " +
                                        shape_str(input.shape()) + " do not match kernel " +
                                        shape_str(kernel.shape()));
        }
        const long long ho = (static_cast<long long>(d.H) - 1) * stride - 2 * padding + static_cast<long long>(d.Kh);
        const long long wo = (static_cast<long long>(d.W) - 1) * stride - 2 * padding + static_cast<long long>(d.Kw);
        if (ho < 1 || wo < 1) {
            throw std::invalid_argument(std::string(op) + ": output would be empty for input " +
                                        shape_str(input.shape()) + " and kernel " +
                                        shape_str(kernel.shape()));
        }
        d.Ho = static_cast<std::size_t>(ho);
        d.Wo = static_cast<std::size_t>(wo);
    }
    return d;
}

}  // namespace detail

/// 2-d cross-correlation, NCHW input, OIKK kernel, zero padding.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    const auto d = detail::conv_dims("conv2d", input, kernel, stride, padding, false);
    Tensor out({d.N, d.Co, d.Ho, d.Wo});
    const double* px = input.ptr();
    const double* pk = kernel.ptr();
    double* po = out.ptr();
    const long long s = d.stride, p = d.padding;
    const long long H = d.H, W = d.W, Ho = d.Ho, Wo = d.Wo;

    parallel_for(0, d.N, [&](std::size_t n) {
        for (std::size_t co = 0; co < d.Co; ++co) {
            for (std::size_t ci = 0; ci < d.Ci; ++ci) {
                for (std::size_t kh = 0; kh < d.Kh; ++kh) {
                    const long long ho_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kh), s));
                    const long long ho_hi = std::min<long long>(Ho - 1, detail::div_floor(H - 1 + p - static_cast<long long>(kh), s));
                    for (std::size_t kw = 0; kw < d.Kw; ++kw) {
                        const double wv = pk[((co * d.Ci + ci) * d.Kh + kh) * d.Kw + kw];
                        const long long wo_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kw), s));
                        const long long wo_hi = std::min<long long>(Wo - 1, detail::div_floor(W - 1 + p - static_cast<long long>(kw), s));
                        for (long long ho = ho_lo; ho <= ho_hi; ++ho) {
                            const long long ih = ho * s + static_cast<long long>(kh) - p;
                            const double* xrow = px + ((n * d.Ci + ci) * d.H + ih) * d.W;
                            double* orow = po + ((n * d.Co + co) * d.Ho + ho) * d.Wo;
                            for (long long wo = wo_lo; wo <= wo_hi; ++wo) {
                                orow[wo] += wv * xrow[wo * s + static_cast<long long>(kw) - p];
                            }
                        }
                    }
                }
            }
        }
    });

    const bool tracked = detail::track({&input, &kernel});
    detail::finish(out, tracked, [input, kernel, out, d]() mutable {
        if (!out.has_grad()) return;
        const double* g = out.grad_ptr();
        const double* pk2 = kernel.ptr();
        const double* px2 = input.ptr();
        const long long s = d.stride, p = d.padding;
        const long long H = d.H, W = d.W, Ho = d.Ho, Wo = d.Wo;
        if (input.requires_grad()) {
            input.ensure_grad();
            double* gx = input.grad_ptr();
            parallel_for(0, d.Ci, [&](std::size_t ci) {
                for (std::size_t n = 0; n < d.N; ++n) {
                    for (std::size_t co = 0; co < d.Co; ++co) {
                        for (std::size_t kh = 0; kh < d.Kh; ++kh) {
                            const long long ho_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kh), s));
                            const long long ho_hi = std::min<long long>(Ho - 1, detail::div_floor(H - 1 + p - static_cast<long long>(kh), s));
                            for (std::size_t kw = 0; kw < d.Kw; ++kw) {
                                const double wv = pk2[((co * d.Ci + ci) * d.Kh + kh) * d.Kw + kw];
                                const long long wo_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kw), s));
                                const long long wo_hi = std::min<long long>(Wo - 1, detail::div_floor(W - 1 + p - static_cast<long long>(kw), s));
                                for (long long ho = ho_lo; ho <= ho_hi; ++ho) {
                                    const long long ih = ho * s + static_cast<long long>(kh) - p;
                                    double* gxrow = gx + ((n * d.Ci + ci) * d.H + ih) * d.W;
                                    const double* grow = g + ((n * d.Co + co) * d.Ho + ho) * d.Wo;
                                    for (long long wo = wo_lo; wo <= wo_hi; ++wo) {
                                        gxrow[wo * s + static_cast<long long>(kw) - p] += wv * grow[wo];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        if (kernel.requires_grad()) {
            kernel.ensure_grad();
            double* gk = kernel.grad_ptr();
            parallel_for(0, d.Co, [&](std::size_t co) {
                for (std::size_t ci = 0; ci < d.Ci; ++ci) {
                    for (std::size_t kh = 0; kh < d.Kh; ++kh) {
                        const long long ho_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kh), s));
                        const long long ho_hi = std::min<long long>(Ho - 1, detail::div_floor(H - 1 + p - static_cast<long long>(kh), s));
                        for (std::size_t kw = 0; kw < d.Kw; ++kw) {
                            const long long wo_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kw), s));
                            const long long wo_hi = std::min<long long>(Wo - 1, detail::div_floor(W - 1 + p - static_cast<long long>(kw), s));
                            double acc = 0.0;
                            for (std::size_t n = 0; n < d.N; ++n) {
                                for (long long ho = ho_lo; ho <= ho_hi; ++ho) {
                                    const long long ih = ho * s + static_cast<long long>(kh) - p;
                                    const double* xrow = px2 + ((n * d.Ci + ci) * d.H + ih) * d.W;
                                    const double* grow = g + ((n * d.Co + co) * d.Ho + ho) * d.Wo;
                                    for (long long wo = wo_lo; wo <= wo_hi; ++wo) {
                                        acc += grow[wo] * xrow[wo * s + static_cast<long long>(kw) - p];
                                    }
                                }
                            }
                            gk[((co * d.Ci + ci) * d.Kh + kh) * d.Kw + kw] += acc;
                        }
                    }
                }
            });
        }
    });
    return out;
}

/// Adjoint of conv2d: input [N, Co, H, W], kernel [Co, Ci, Kh, Kw] gives
/// [N, Ci, (H-1)*stride - 2*padding + Kh, ...].
inline Tensor transpose_conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    const auto d = detail::conv_dims("transpose_conv2d", input, kernel, stride, padding, true);
    // Here d.Ci is the input's channel count and d.Co the output's.
    Tensor out({d.N, d.Co, d.Ho, d.Wo});
    const double* px = input.ptr();
    const double* pk = kernel.ptr();
    double* po = out.ptr();
    const long long s = d.stride, p = d.padding;
    const long long Ho = d.Ho, Wo = d.Wo;

    parallel_for(0, d.N, [&](std::size_t n) {
        for (std::size_t ci = 0; ci < d.Ci; ++ci) {
            for (std::size_t co = 0; co < d.Co; ++co) {
                for (std::size_t kh = 0; kh < d.Kh; ++kh) {
                    const long long h_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kh), s));
                    const long long h_hi = std::min<long long>(d.H - 1, detail::div_floor(Ho - 1 + p - static_cast<long long>(kh), s));
                    for (std::size_t kw = 0; kw < d.Kw; ++kw) {
                        const double wv = pk[((ci * d.Co + co) * d.Kh + kh) * d.Kw + kw];
                        const long long w_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kw), s));
                        const long long w_hi = std::min<long long>(d.W - 1, detail::div_floor(Wo - 1 + p - static_cast<long long>(kw), s));
                        for (long long h = h_lo; h <= h_hi; ++h) {
                            const long long oh = h * s + static_cast<long long>(kh) - p;
                            const double* xrow = px + ((n * d.Ci + ci) * d.H + h) * d.W;
                            double* orow = po + ((n * d.Co + co) * d.Ho + oh) * d.Wo;
                            for (long long w = w_lo; w <= w_hi; ++w) {
                                orow[w * s + static_cast<long long>(kw) - p] += wv * xrow[w];
                            }
                        }
                    }
                }
            }
        }
    });

    const bool tracked = detail::track({&input, &kernel});
    detail::finish(out, tracked, [input, kernel, out, d]() mutable {
        if (!out.has_grad()) return;
        const double* g = out.grad_ptr();
        const double* pk2 = kernel.ptr();
        const double* px2 = input.ptr();
        const long long s = d.stride, p = d.padding;
        const long long Ho = d.Ho, Wo = d.Wo;
        if (input.requires_grad()) {
            input.ensure_grad();
            double* gx = input.grad_ptr();
            parallel_for(0, d.Ci, [&](std::size_t ci) {
                for (std::size_t n = 0; n < d.N; ++n) {
                    for (std::size_t co = 0; co < d.Co; ++co) {
                        for (std::size_t kh = 0; kh < d.Kh; ++kh) {
                            const long long h_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kh), s));
                            const long long h_hi = std::min<long long>(d.H - 1, detail::div_floor(Ho - 1 + p - static_cast<long long>(kh), s));
                            for (std::size_t kw = 0; kw < d.Kw; ++kw) {
                                const double wv = pk2[((ci * d.Co + co) * d.Kh + kh) * d.Kw + kw];
                                const long long w_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kw), s));
                                const long long w_hi = std::min<long long>(d.W - 1, detail::div_floor(Wo - 1 + p - static_cast<long long>(kw), s));
                                for (long long h = h_lo; h <= h_hi; ++h) {
                                    const long long oh = h * s + static_cast<long long>(kh) - p;
                                    double* gxrow = gx + ((n * d.Ci + ci) * d.H + h) * d.W;
                                    const double* grow = g + ((n * d.Co + co) * d.Ho + oh) * d.Wo;
                                    for (long long w = w_lo; w <= w_hi; ++w) {
                                        gxrow[w] += wv * grow[w * s + static_cast<long long>(kw) - p];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        if (kernel.requires_grad()) {
            kernel.ensure_grad();
            double* gk = kernel.grad_ptr();
            parallel_for(0, d.Ci, [&](std::size_t ci) {
                for (std::size_t co = 0; co < d.Co; ++co) {
                    for (std::size_t kh = 0; kh < d.Kh; ++kh) {
                        const long long h_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kh), s));
                        const long long h_hi = std::min<long long>(d.H - 1, detail::div_floor(Ho - 1 + p - static_cast<long long>(kh), s));
                        for (std::size_t kw = 0; kw < d.Kw; ++kw) {
                            const long long w_lo = std::max<long long>(0, detail::div_ceil(p - static_cast<long long>(kw), s));
                            const long long w_hi = std::min<long long>(d.W - 1, detail::div_floor(Wo - 1 + p - static_cast<long long>(kw), s));
                            double acc = 0.0;
                            for (std::size_t n = 0; n < d.N; ++n) {
                                for (long long h = h_lo; h <= h_hi; ++h) {
                                    const long long oh = h * s + static_cast<long long>(kh) - p;
                                    const double* xrow = px2 + ((n * d.Ci + ci) * d.H + h) * d.W;
                                    const double* grow = g + ((n * d.Co + co) * d.Ho + oh) * d.Wo;
                                    for (long long w = w_lo; w <= w_hi; ++w) {
                                        acc += xrow[w] * grow[w * s + static_cast<long long>(kw) - p];
                                    }
                                }
                            }
                            gk[((ci * d.Co + co) * d.Kh + kh) * d.Kw + kw] += acc;
                        }
                    }
                }
            });
        }
    });
    return out;
}

/// Max pooling with window k and stride k; trailing rows/cols that do not
/// fill a window are dropped. Ties resolve to the lowest flat index.
inline Tensor max_pool2d(const Tensor& input, int k) {
    if (input.rank() != 4) {
        throw std::invalid_argument("max_pool2d: expected NCHW tensor, got " +
                                    detail::shape_str(input.shape()));
    }
    if (k < 1) throw std::invalid_argument("max_pool2d: window must be >= 1");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t Ho = H / static_cast<std::size_t>(k), Wo = W / static_cast<std::size_t>(k);
    if (Ho == 0 || Wo == 0) {
        throw std::invalid_argument("max_pool2d: window " + std::to_string(k) +
                                    " larger than input " + detail::shape_str(input.shape()));
    }
    Tensor out({N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
    const double* px = input.ptr();
    double* po = out.ptr();
    const std::size_t kk = static_cast<std::size_t>(k);
    parallel_for(0, N, [&](std::size_t n) {
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * H * W;
            for (std::size_t ho = 0; ho < Ho; ++ho) {
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    std::size_t best_idx = base + (ho * kk) * W + wo * kk;
                    double best = px[best_idx];
                    for (std::size_t dy = 0; dy < kk; ++dy) {
                        for (std::size_t dx = 0; dx < kk; ++dx) {
                            const std::size_t idx = base + (ho * kk + dy) * W + (wo * kk + dx);
                            if (px[idx] > best) {
                                best = px[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    const std::size_t oidx = ((n * C + c) * Ho + ho) * Wo + wo;
                    po[oidx] = best;
                    (*argmax)[oidx] = best_idx;
                }
            }
        }
    });
    const bool tracked = detail::track({&input});
    detail::finish(out, tracked, [input, out, argmax]() mutable {
        if (!out.has_grad() || !input.requires_grad()) return;
        input.ensure_grad();
        const double* g = out.grad_ptr();
        double* gx = input.grad_ptr();
        const std::size_t m = out.numel();
        for (std::size_t i = 0; i < m; ++i) gx[(*argmax)[i]] += g[i];
    });
    return out;
}

/// Batch normalization over (N, H, W) per channel. Composed from recorded
/// primitives, so the backward pass flows through the batch statistics.
/// Running stats use population variance and are updated outside the tape.
inline Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           Tensor& running_mean, Tensor& running_var, bool train,
                           double momentum = 0.1, double eps = 1e-5, bool update_running = true) {
    if (x.rank() != 4) {
        throw std::invalid_argument("batch_norm2d: expected NCHW tensor, got " +
                                    detail::shape_str(x.shape()));
    }
    const std::size_t C = x.dim(1);
    if (gamma.shape() != std::vector<std::size_t>{C} || beta.shape() != std::vector<std::size_t>{C}) {
        throw std::invalid_argument("batch_norm2d: gamma " + detail::shape_str(gamma.shape()) +
                                    " / beta " + detail::shape_str(beta.shape()) +
                                    " do not match channels of " + detail::shape_str(x.shape()));
    }
    if (eps <= 0.0) throw std::invalid_argument("batch_norm2d: eps must be positive");
    Tensor xn;
    if (train) {
        const std::size_t count = x.dim(0) * x.dim(2) * x.dim(3);
        if (count < 2) {
            throw std::invalid_argument(
                "batch_norm2d: train mode needs more than one value per channel "
                "(N*H*W >= 2); got degenerate batch " +
                detail::shape_str(x.shape()));
        }
        Tensor mu = channel_mean(x);
        Tensor xc = sub_channel(x, mu);
        Tensor var = channel_mean(mul(xc, xc));
        if (update_running) {
            double* rm = running_mean.ptr();
            double* rv = running_var.ptr();
            const double* pm = mu.ptr();
            const double* pv = var.ptr();
            for (std::size_t c = 0; c < C; ++c) {
                rm[c] = (1.0 - momentum) * rm[c] + momentum * pm[c];
                rv[c] = (1.0 - momentum) * rv[c] + momentum * pv[c];
            }
        }
        xn = div_channel(xc, sqrt_elem(add_scalar(var, eps)));
    } else {
        Tensor denom({C});
        const double* rv = running_var.ptr();
        double* pd = denom.ptr();
        for (std::size_t c = 0; c < C; ++c) pd[c] = std::sqrt(rv[c] + eps);
        xn = div_channel(sub_channel(x, running_mean), denom);
    }
    return add_channel(mul_channel(xn, gamma), beta);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared error over all elements.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    detail::check_same_shape("mse_loss", pred, target);
    Tensor d = sub(pred, target);
    return mean_all(mul(d, d));
}

/// Elementwise binary cross entropy on logits, numerically stable form.
/// Targets must lie in [0, 1].
inline Tensor bce_with_logits_elem(const Tensor& logits, const Tensor& targets) {
    detail::check_same_shape("bce_with_logits", logits, targets);
    const std::size_t n = logits.numel();
    const double* pt = targets.ptr();
    for (std::size_t i = 0; i < n; ++i) {
        if (pt[i] < 0.0 || pt[i] > 1.0) {
            throw std::invalid_argument("bce_with_logits: target " + std::to_string(pt[i]) +
                                        " at index " + std::to_string(i) + " outside [0, 1]");
        }
    }
    Tensor y(logits.shape());
    const double* px = logits.ptr();
    double* py = y.ptr();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = px[i];
        py[i] = std::max(x, 0.0) - x * pt[i] + std::log1p(std::exp(-std::abs(x)));
    }
    const bool tracked = detail::track({&logits, &targets});
    detail::finish(y, tracked, [logits, targets, y]() mutable {
        if (!y.has_grad()) return;
        const double* g = y.grad_ptr();
        const std::size_t m = y.numel();
        if (logits.requires_grad()) {
            logits.ensure_grad();
            double* gx = logits.grad_ptr();
            const double* px2 = logits.ptr();
            const double* pt2 = targets.ptr();
            for (std::size_t i = 0; i < m; ++i) {
                gx[i] += g[i] * (detail::stable_sigmoid(px2[i]) - pt2[i]);
            }
        }
        if (targets.requires_grad()) {
            targets.ensure_grad();
            double* gt = targets.grad_ptr();
            const double* px2 = logits.ptr();
            for (std::size_t i = 0; i < m; ++i) gt[i] += g[i] * (-px2[i]);
        }
    });
    return y;
}

/// Mean-reduced binary cross entropy on logits.
inline Tensor bce_with_logits_loss(const Tensor& logits, const Tensor& targets) {
    return mean_all(bce_with_logits_elem(logits, targets));
}

}  // namespace imsty
