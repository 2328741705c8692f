#include "partcat/ops.hpp"

#include <cmath>
#include <memory>
#include <numbers>

#include "partcat/kernels.hpp"

namespace partcat::ops {

namespace {

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
    }
}

// y must equal the trailing dims of x; returns how many times y repeats.
std::size_t broadcast_repeats(const Shape& x, const Shape& y, const char* op) {
    if (y.size() > x.size() || !std::equal(y.rbegin(), y.rend(), x.rbegin())) {
        throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(y) + " onto " +
                         shape_string(x));
    }
    return shape_size(x) / shape_size(y);
}

template <typename T>
void accumulate(Array<T>& dst, const Array<T>& src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
    const auto& va = t.value(a);
    const auto& vb = t.value(b);
    require_same_shape(va.shape(), vb.shape(), "add");
    Array<T> out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, const Array<T>& g) {
        if (tp.requires_grad(a)) accumulate(tp.grad(a), g);
        if (tp.requires_grad(b)) accumulate(tp.grad(b), g);
    });
}

template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
    const auto& va = t.value(a);
    const auto& vb = t.value(b);
    require_same_shape(va.shape(), vb.shape(), "sub");
    Array<T> out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
    return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, const Array<T>& g) {
        if (tp.requires_grad(a)) accumulate(tp.grad(a), g);
        if (tp.requires_grad(b)) {
            auto& gb = tp.grad(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
    const auto& va = t.value(a);
    const auto& vb = t.value(b);
    require_same_shape(va.shape(), vb.shape(), "mul");
    Array<T> out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, const Array<T>& g) {
        const auto& xa = tp.value(a);
        const auto& xb = tp.value(b);
        if (tp.requires_grad(a)) {
            auto& ga = tp.grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
        }
        if (tp.requires_grad(b)) {
            auto& gb = tp.grad(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
        }
    });
}

template <typename T>
Var add_broadcast(Tape<T>& t, Var x, Var y) {
    const auto& vx = t.value(x);
    const auto& vy = t.value(y);
    const std::size_t reps = broadcast_repeats(vx.shape(), vy.shape(), "add_broadcast");
    const std::size_t n = vy.size();
    Array<T> out(vx.shape());
    for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = vx[r * n + j] + vy[j];
    }
    return t.record(std::move(out), {x, y}, [x, y, reps, n](Tape<T>& tp, const Array<T>& g) {
        if (tp.requires_grad(x)) accumulate(tp.grad(x), g);
        if (tp.requires_grad(y)) {
            auto& gy = tp.grad(y);
            for (std::size_t r = 0; r < reps; ++r) {
                for (std::size_t j = 0; j < n; ++j) gy[j] += g[r * n + j];
            }
        }
    });
}

template <typename T>
Var mul_broadcast(Tape<T>& t, Var x, Var y) {
    const auto& vx = t.value(x);
    const auto& vy = t.value(y);
    const std::size_t reps = broadcast_repeats(vx.shape(), vy.shape(), "mul_broadcast");
    const std::size_t n = vy.size();
    Array<T> out(vx.shape());
    for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = vx[r * n + j] * vy[j];
    }
    return t.record(std::move(out), {x, y}, [x, y, reps, n](Tape<T>& tp, const Array<T>& g) {
        const auto& ax = tp.value(x);
        const auto& ay = tp.value(y);
        if (tp.requires_grad(x)) {
            auto& gx = tp.grad(x);
            for (std::size_t r = 0; r < reps; ++r) {
                for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] * ay[j];
            }
        }
        if (tp.requires_grad(y)) {
            auto& gy = tp.grad(y);
            for (std::size_t r = 0; r < reps; ++r) {
                for (std::size_t j = 0; j < n; ++j) gy[j] += g[r * n + j] * ax[r * n + j];
            }
        }
    });
}

template <typename T>
Var scale(Tape<T>& t, Var x, T s) {
    const auto& vx = t.value(x);
    Array<T> out(vx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] * s;
    return t.record(std::move(out), {x}, [x, s](Tape<T>& tp, const Array<T>& g) {
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
    });
}

template <typename T>
Var add_scalar(Tape<T>& t, Var x, T s) {
    const auto& vx = t.value(x);
    Array<T> out(vx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] + s;
    return t.record(std::move(out), {x}, [x](Tape<T>& tp, const Array<T>& g) {
        accumulate(tp.grad(x), g);
    });
}

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
    const auto& va = t.value(a);
    const auto& vb = t.value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_string(va.shape()) + " and " +
                         shape_string(vb.shape()));
    }
    const std::size_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    Array<T> out(Shape{m, n});
    kernels::matmul_nn<T>(va.span(), vb.span(), out.span(), m, k, n);
    return t.record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& tp, const Array<T>& g) {
        if (tp.requires_grad(a)) {
            kernels::matmul_nt<T>(g.span(), tp.value(b).span(), tp.grad(a).span(), m, n, k, true);
        }
        if (tp.requires_grad(b)) {
            kernels::matmul_tn<T>(tp.value(a).span(), g.span(), tp.grad(b).span(), k, m, n, true);
        }
    });
}

template <typename T>
Var matmul_bt(Tape<T>& t, Var a, Var b) {
    const auto& va = t.value(a);
    const auto& vb = t.value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(1)) {
        throw ShapeError("matmul_bt: incompatible shapes " + shape_string(va.shape()) + " and " +
                         shape_string(vb.shape()));
    }
    const std::size_t m = va.dim(0), k = va.dim(1), n = vb.dim(0);
    Array<T> out(Shape{m, n});
    kernels::matmul_nt<T>(va.span(), vb.span(), out.span(), m, k, n);
    return t.record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& tp, const Array<T>& g) {
        if (tp.requires_grad(a)) {
            kernels::matmul_nn<T>(g.span(), tp.value(b).span(), tp.grad(a).span(), m, n, k, true);
        }
        if (tp.requires_grad(b)) {
            kernels::matmul_tn<T>(g.span(), tp.value(a).span(), tp.grad(b).span(), n, m, k, true);
        }
    });
}

template <typename T>
Var linear(Tape<T>& t, Var x, Var w, std::optional<Var> b) {
    const auto& vx = t.value(x);
    const auto& vw = t.value(w);
    if (vw.rank() != 2 || vx.shape().back() != vw.dim(0)) {
        throw ShapeError("linear: input " + shape_string(vx.shape()) + " vs weight " +
                         shape_string(vw.shape()));
    }
    const std::size_t din = vw.dim(0), dout = vw.dim(1);
    const std::size_t rows = vx.size() / din;
    if (b && t.value(*b).shape() != Shape{dout}) {
        throw ShapeError("linear: bias shape " + shape_string(t.value(*b).shape()));
    }
    Shape out_shape = vx.shape();
    out_shape.back() = dout;
    Array<T> out(out_shape);
    kernels::matmul_nn<T>(vx.span(), vw.span(), out.span(), rows, din, dout);
    if (b) {
        const auto& vb = t.value(*b);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < dout; ++j) out[r * dout + j] += vb[j];
        }
    }
    auto fn = [x, w, b, rows, din, dout](Tape<T>& tp, const Array<T>& g) {
        if (tp.requires_grad(x)) {
            kernels::matmul_nt<T>(g.span(), tp.value(w).span(), tp.grad(x).span(), rows, dout,
                                  din, true);
        }
        if (tp.requires_grad(w)) {
            kernels::matmul_tn<T>(tp.value(x).span(), g.span(), tp.grad(w).span(), din, rows,
                                  dout, true);
        }
        if (b && tp.requires_grad(*b)) {
            auto& gb = tp.grad(*b);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
            }
        }
    };
    if (b) return t.record(std::move(out), {x, w, *b}, fn);
    return t.record(std::move(out), {x, w}, fn);
}

template <typename T>
Var softmax(Tape<T>& t, Var x, std::size_t axis) {
    const auto& vx = t.value(x);
    if (axis >= vx.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_string(vx.shape()));
    }
    const std::size_t n = vx.dim(axis);
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < vx.rank(); ++a) inner *= vx.dim(a);
    const std::size_t outer = vx.size() / (n * inner);
    Array<T> out(vx.shape());
    if (inner == 1) {
        kernels::softmax_rows<T>(vx.span(), out.span(), outer, n);
    } else {
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                T mx = vx[base];
                for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, vx[base + j * inner]);
                T s{0};
                for (std::size_t j = 0; j < n; ++j) {
                    out[base + j * inner] = std::exp(vx[base + j * inner] - mx);
                    s += out[base + j * inner];
                }
                for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= s;
            }
        }
    }
    const Var y{static_cast<std::uint32_t>(t.size())};
    return t.record(std::move(out), {x}, [x, y, n, inner, outer](Tape<T>& tp, const Array<T>& g) {
        const auto& vy = tp.value(y);
        auto& gx = tp.grad(x);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                T dot{0};
                for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * vy[base + j * inner];
                for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t e = base + j * inner;
                    gx[e] += vy[e] * (g[e] - dot);
                }
            }
        }
    });
}

template <typename T>
Var sigmoid(Tape<T>& t, Var x) {
    const auto& vx = t.value(x);
    Array<T> out(vx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-vx[i]));
    const Var y{static_cast<std::uint32_t>(t.size())};
    return t.record(std::move(out), {x}, [x, y](Tape<T>& tp, const Array<T>& g) {
        const auto& vy = tp.value(y);
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * vy[i] * (T{1} - vy[i]);
    });
}

template <typename T>
Var gelu(Tape<T>& t, Var x) {
    const auto& vx = t.value(x);
    Array<T> out(vx.shape());
    const T inv_sqrt2 = T{1} / std::sqrt(T{2});
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = T{0.5} * vx[i] * (T{1} + std::erf(vx[i] * inv_sqrt2));
    }
    return t.record(std::move(out), {x}, [x, inv_sqrt2](Tape<T>& tp, const Array<T>& g) {
        const auto& ax = tp.value(x);
        auto& gx = tp.grad(x);
        const T inv_sqrt_2pi = T{1} / std::sqrt(T{2} * std::numbers::pi_v<T>);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T cdf = T{0.5} * (T{1} + std::erf(ax[i] * inv_sqrt2));
            const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * ax[i] * ax[i]);
            gx[i] += g[i] * (cdf + ax[i] * pdf);
        }
    });
}

template <typename T>
Var log_clamped(Tape<T>& t, Var x, T floor) {
    const auto& vx = t.value(x);
    Array<T> out(vx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(vx[i], floor));
    return t.record(std::move(out), {x}, [x, floor](Tape<T>& tp, const Array<T>& g) {
        const auto& ax = tp.value(x);
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (ax[i] > floor) gx[i] += g[i] / ax[i];
        }
    });
}

template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, T eps) {
    const auto& vx = t.value(x);
    const std::size_t n = vx.shape().back();
    if (t.value(gain).shape() != Shape{n} || t.value(bias).shape() != Shape{n}) {
        throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(n) + "]");
    }
    const std::size_t rows = vx.size() / n;
    Array<T> out(vx.shape());
    auto normed = std::make_shared<std::vector<T>>(vx.size());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    const auto& vg = t.value(gain);
    const auto& vb = t.value(bias);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = vx.data() + r * n;
        T mu{0};
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<T>(n);
        T var{0};
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(n);
        const T is = T{1} / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const T xh = (row[j] - mu) * is;
            (*normed)[r * n + j] = xh;
            out[r * n + j] = xh * vg[j] + vb[j];
        }
    }
    return t.record(std::move(out), {x, gain, bias},
                    [x, gain, bias, n, rows, normed, inv_std](Tape<T>& tp, const Array<T>& g) {
        const auto& vg2 = tp.value(gain);
        if (tp.requires_grad(gain)) {
            auto& gg = tp.grad(gain);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * (*normed)[r * n + j];
            }
        }
        if (tp.requires_grad(bias)) {
            auto& gb = tp.grad(bias);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
            }
        }
        if (tp.requires_grad(x)) {
            auto& gx = tp.grad(x);
            const T inv_n = T{1} / static_cast<T>(n);
            for (std::size_t r = 0; r < rows; ++r) {
                T mean_g{0}, mean_gx{0};
                for (std::size_t j = 0; j < n; ++j) {
                    const T gh = g[r * n + j] * vg2[j];
                    mean_g += gh;
                    mean_gx += gh * (*normed)[r * n + j];
                }
                mean_g *= inv_n;
                mean_gx *= inv_n;
                for (std::size_t j = 0; j < n; ++j) {
                    const T gh = g[r * n + j] * vg2[j];
                    gx[r * n + j] += (*inv_std)[r] * (gh - mean_g - (*normed)[r * n + j] * mean_gx);
                }
            }
        }
    });
}

template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, std::size_t heads, std::optional<Var> bias) {
    const auto& vq = t.value(q);
    const auto& vk = t.value(k);
    const auto& vv = t.value(v);
    if (vq.rank() != vk.rank() || vq.rank() != vv.rank() || (vq.rank() != 2 && vq.rank() != 3)) {
        throw ShapeError("attention: q, k, v must all be rank 2 or all rank 3");
    }
    const bool batched = vq.rank() == 3;
    const std::size_t o = batched ? 1 : 0;
    kernels::AttentionDims d{};
    d.batch = batched ? vq.dim(0) : 1;
    d.len_q = vq.dim(o);
    d.len_k = vk.dim(o);
    d.d_k = vq.dim(o + 1);
    d.d_v = vv.dim(o + 1);
    d.heads = heads;
    if (batched && (vk.dim(0) != d.batch || vv.dim(0) != d.batch)) {
        throw ShapeError("attention: batch sizes differ");
    }
    if (vk.dim(o + 1) != d.d_k || vv.dim(o) != d.len_k) {
        throw ShapeError("attention: key/value shapes " + shape_string(vk.shape()) + ", " +
                         shape_string(vv.shape()) + " do not match query " +
                         shape_string(vq.shape()));
    }
    if (heads == 0 || d.d_k % heads != 0 || d.d_v % heads != 0) {
        throw ShapeError("attention: widths " + std::to_string(d.d_k) + "/" +
                         std::to_string(d.d_v) + " not divisible by " + std::to_string(heads) +
                         " heads");
    }
    std::span<const T> bias_span;
    if (bias) {
        if (t.value(*bias).shape() != Shape{heads, d.len_q, d.len_k}) {
            throw ShapeError("attention: bias must be [heads x Lq x Lk], got " +
                             shape_string(t.value(*bias).shape()));
        }
        bias_span = t.value(*bias).span();
    }
    auto probs = std::make_shared<std::vector<T>>(d.batch * heads * d.len_q * d.len_k);
    Shape out_shape = vq.shape();
    out_shape.back() = d.d_v;
    Array<T> out(out_shape);
    kernels::attention_forward<T>(vq.span(), vk.span(), vv.span(), bias_span, *probs, out.span(), d);
    auto fn = [q, k, v, bias, d, probs](Tape<T>& tp, const Array<T>& g) {
        std::span<T> dq, dk, dv, db;
        if (tp.requires_grad(q)) dq = tp.grad(q).span();
        if (tp.requires_grad(k)) dk = tp.grad(k).span();
        if (tp.requires_grad(v)) dv = tp.grad(v).span();
        if (bias && tp.requires_grad(*bias)) db = tp.grad(*bias).span();
        kernels::attention_backward<T>(tp.value(q).span(), tp.value(k).span(), tp.value(v).span(),
                                       *probs, g.span(), dq, dk, dv, db, d);
    };
    if (bias) return t.record(std::move(out), {q, k, v, *bias}, fn);
    return t.record(std::move(out), {q, k, v}, fn);
}

template <typename T>
Var conv2d(Tape<T>& t, Var x, Var kernel, std::optional<Var> bias) {
    const auto& vx = t.value(x);
    const auto& vk = t.value(kernel);
    if (vx.rank() != 3 && vx.rank() != 4) {
        throw ShapeError("conv2d: input must be [H x W x C] or [B x H x W x C], got " +
                         shape_string(vx.shape()));
    }
    if (vk.rank() != 4 || vk.dim(0) != vk.dim(1)) {
        throw ShapeError("conv2d: kernel must be [k x k x c_in x c_out], got " +
                         shape_string(vk.shape()));
    }
    if (vk.dim(0) % 2 == 0) {
        throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(vk.dim(0)));
    }
    const std::size_t o = vx.rank() == 4 ? 1 : 0;
    kernels::ConvDims d{};
    d.batch = o ? vx.dim(0) : 1;
    d.height = vx.dim(o);
    d.width = vx.dim(o + 1);
    d.c_in = vx.dim(o + 2);
    d.c_out = vk.dim(3);
    d.ksize = vk.dim(0);
    if (vk.dim(2) != d.c_in) {
        throw ShapeError("conv2d: kernel expects " + std::to_string(vk.dim(2)) +
                         " input channels, input has " + std::to_string(d.c_in));
    }
    std::span<const T> bias_span;
    if (bias) {
        if (t.value(*bias).shape() != Shape{d.c_out}) throw ShapeError("conv2d: bias shape");
        bias_span = t.value(*bias).span();
    }
    Shape out_shape = vx.shape();
    out_shape.back() = d.c_out;
    Array<T> out(out_shape);
    kernels::conv2d_forward<T>(vx.span(), vk.span(), bias_span, out.span(), d);
    auto fn = [x, kernel, bias, d](Tape<T>& tp, const Array<T>& g) {
        std::span<T> dx, dk, db;
        if (tp.requires_grad(x)) dx = tp.grad(x).span();
        if (tp.requires_grad(kernel)) dk = tp.grad(kernel).span();
        if (bias && tp.requires_grad(*bias)) db = tp.grad(*bias).span();
        kernels::conv2d_backward<T>(tp.value(x).span(), tp.value(kernel).span(), g.span(), dx, dk,
                                    db, d);
    };
    if (bias) return t.record(std::move(out), {x, kernel, *bias}, fn);
    return t.record(std::move(out), {x, kernel}, fn);
}

template <typename T>
Var transpose01(Tape<T>& t, Var x) {
    const auto& vx = t.value(x);
    if (vx.rank() != 3) throw ShapeError("transpose01: expected rank 3, got " + shape_string(vx.shape()));
    const std::size_t a = vx.dim(0), b = vx.dim(1), c = vx.dim(2);
    Array<T> out(Shape{b, a, c});
    for (std::size_t i = 0; i < a; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            std::copy_n(vx.data() + (i * b + j) * c, c, out.data() + (j * a + i) * c);
        }
    }
    return t.record(std::move(out), {x}, [x, a, b, c](Tape<T>& tp, const Array<T>& g) {
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < a; ++i) {
            for (std::size_t j = 0; j < b; ++j) {
                const T* src = g.data() + (j * a + i) * c;
                T* dst = gx.data() + (i * b + j) * c;
                for (std::size_t e = 0; e < c; ++e) dst[e] += src[e];
            }
        }
    });
}

template <typename T>
Var reshape(Tape<T>& t, Var x, Shape shape) {
    const auto& vx = t.value(x);
    if (shape_size(shape) != vx.size()) {
        throw ShapeError("reshape: " + shape_string(vx.shape()) + " to " + shape_string(shape));
    }
    return t.record(vx.reshaped(std::move(shape)), {x}, [x](Tape<T>& tp, const Array<T>& g) {
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

template <typename T>
Var concat_last(Tape<T>& t, Var a, Var b) {
    const auto& va = t.value(a);
    const auto& vb = t.value(b);
    Shape sa = va.shape(), sb = vb.shape();
    const std::size_t na = sa.back(), nb = sb.back();
    sa.pop_back();
    sb.pop_back();
    if (sa != sb) {
        throw ShapeError("concat_last: leading dims differ " + shape_string(va.shape()) + " vs " +
                         shape_string(vb.shape()));
    }
    const std::size_t rows = va.size() / na;
    Shape out_shape = va.shape();
    out_shape.back() = na + nb;
    Array<T> out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(va.data() + r * na, na, out.data() + r * (na + nb));
        std::copy_n(vb.data() + r * nb, nb, out.data() + r * (na + nb) + na);
    }
    return t.record(std::move(out), {a, b}, [a, b, rows, na, nb](Tape<T>& tp, const Array<T>& g) {
        if (tp.requires_grad(a)) {
            auto& ga = tp.grad(a);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < na; ++j) ga[r * na + j] += g[r * (na + nb) + j];
            }
        }
        if (tp.requires_grad(b)) {
            auto& gb = tp.grad(b);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < nb; ++j) gb[r * nb + j] += g[r * (na + nb) + na + j];
            }
        }
    });
}

template <typename T>
Var gather_axis1(Tape<T>& t, Var x, std::vector<std::size_t> index) {
    const auto& vx = t.value(x);
    if (vx.rank() != 3) throw ShapeError("gather_axis1: expected rank 3, got " + shape_string(vx.shape()));
    const std::size_t a = vx.dim(0), b = vx.dim(1), c = vx.dim(2);
    for (std::size_t i : index) {
        if (i >= b) throw ShapeError("gather_axis1: index " + std::to_string(i) + " out of range");
    }
    if (index.empty()) throw ShapeError("gather_axis1: empty index");
    const std::size_t m = index.size();
    Array<T> out(Shape{a, m, c});
    for (std::size_t i = 0; i < a; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            std::copy_n(vx.data() + (i * b + index[j]) * c, c, out.data() + (i * m + j) * c);
        }
    }
    return t.record(std::move(out), {x},
                    [x, a, b, c, m, idx = std::move(index)](Tape<T>& tp, const Array<T>& g) {
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < a; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                const T* src = g.data() + (i * m + j) * c;
                T* dst = gx.data() + (i * b + idx[j]) * c;
                for (std::size_t e = 0; e < c; ++e) dst[e] += src[e];
            }
        }
    });
}

template <typename T>
Var gather_flat(Tape<T>& t, Var table, std::vector<std::size_t> index, Shape shape) {
    const auto& vt = t.value(table);
    if (shape_size(shape) != index.size()) throw ShapeError("gather_flat: index/shape size mismatch");
    Array<T> out(std::move(shape));
    for (std::size_t j = 0; j < index.size(); ++j) {
        if (index[j] >= vt.size()) throw ShapeError("gather_flat: index out of range");
        out[j] = vt[index[j]];
    }
    return t.record(std::move(out), {table},
                    [table, idx = std::move(index)](Tape<T>& tp, const Array<T>& g) {
        auto& gt = tp.grad(table);
        for (std::size_t j = 0; j < idx.size(); ++j) gt[idx[j]] += g[j];
    });
}

template <typename T>
Var l2_normalize_last(Tape<T>& t, Var x) {
    const auto& vx = t.value(x);
    const std::size_t n = vx.shape().back();
    const std::size_t rows = vx.size() / n;
    Array<T> out(vx.shape());
    auto inv_norm = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T s{0};
        for (std::size_t j = 0; j < n; ++j) s += vx[r * n + j] * vx[r * n + j];
        if (!(s > T{0})) {
            throw ShapeError("l2_normalize_last: zero-norm vector at row " + std::to_string(r));
        }
        const T inv = T{1} / std::sqrt(s);
        (*inv_norm)[r] = inv;
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = vx[r * n + j] * inv;
    }
    const Var y{static_cast<std::uint32_t>(t.size())};
    return t.record(std::move(out), {x}, [x, y, n, rows, inv_norm](Tape<T>& tp, const Array<T>& g) {
        const auto& vy = tp.value(y);
        auto& gx = tp.grad(x);
        for (std::size_t r = 0; r < rows; ++r) {
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * vy[r * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                gx[r * n + j] += (*inv_norm)[r] * (g[r * n + j] - vy[r * n + j] * dot);
            }
        }
    });
}

template <typename T>
Var l1_normalize_last(Tape<T>& t, Var x) {
    const auto& vx = t.value(x);
    const std::size_t n = vx.shape().back();
    const std::size_t rows = vx.size() / n;
    Array<T> out(vx.shape());
    auto sums = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T s{0};
        for (std::size_t j = 0; j < n; ++j) s += vx[r * n + j];
        if (s == T{0}) {
            throw ShapeError("l1_normalize_last: zero-sum vector at row " + std::to_string(r));
        }
        (*sums)[r] = s;
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = vx[r * n + j] / s;
    }
    const Var y{static_cast<std::uint32_t>(t.size())};
    return t.record(std::move(out), {x}, [x, y, n, rows, sums](Tape<T>& tp, const Array<T>& g) {
        const auto& vy = tp.value(y);
        auto& gx = tp.grad(x);
        for (std::size_t r = 0; r < rows; ++r) {
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * vy[r * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += (g[r * n + j] - dot) / (*sums)[r];
        }
    });
}

template <typename T>
Var sum_last(Tape<T>& t, Var x) {
    const auto& vx = t.value(x);
    const std::size_t n = vx.shape().back();
    const std::size_t rows = vx.size() / n;
    Shape out_shape = vx.shape();
    out_shape.pop_back();
    if (out_shape.empty()) out_shape = {1};
    Array<T> out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        T s{0};
        for (std::size_t j = 0; j < n; ++j) s += vx[r * n + j];
        out[r] = s;
    }
    return t.record(std::move(out), {x}, [x, n, rows](Tape<T>& tp, const Array<T>& g) {
        auto& gx = tp.grad(x);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r];
        }
    });
}

template <typename T>
Var sum(Tape<T>& t, Var x) {
    const auto& vx = t.value(x);
    T s{0};
    for (std::size_t i = 0; i < vx.size(); ++i) s += vx[i];
    return t.record(Array<T>::scalar(s), {x}, [x](Tape<T>& tp, const Array<T>& g) {
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
    });
}

template <typename T>
Var mean(Tape<T>& t, Var x) {
    return scale(t, sum(t, x), T{1} / static_cast<T>(t.value(x).size()));
}

template <typename T>
Var upsample_nearest(Tape<T>& t, Var x, std::size_t factor) {
    const auto& vx = t.value(x);
    if (vx.rank() != 4) throw ShapeError("upsample_nearest: expected [B x H x W x C]");
    if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
    if (factor == 1) return x;
    const std::size_t b = vx.dim(0), h = vx.dim(1), w = vx.dim(2), c = vx.dim(3);
    const std::size_t oh = h * factor, ow = w * factor;
    Array<T> out(Shape{b, oh, ow, c});
    for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xx = 0; xx < ow; ++xx) {
                std::copy_n(vx.data() + ((n * h + y / factor) * w + xx / factor) * c, c,
                            out.data() + ((n * oh + y) * ow + xx) * c);
            }
        }
    }
    return t.record(std::move(out), {x}, [x, b, h, w, c, factor](Tape<T>& tp, const Array<T>& g) {
        auto& gx = tp.grad(x);
        const std::size_t oh2 = h * factor, ow2 = w * factor;
        for (std::size_t n = 0; n < b; ++n) {
            for (std::size_t y = 0; y < oh2; ++y) {
                for (std::size_t xx = 0; xx < ow2; ++xx) {
                    const T* src = g.data() + ((n * oh2 + y) * ow2 + xx) * c;
                    T* dst = gx.data() + ((n * h + y / factor) * w + xx / factor) * c;
                    for (std::size_t e = 0; e < c; ++e) dst[e] += src[e];
                }
            }
        }
    });
}

#define PARTCAT_INSTANTIATE_OPS(T)                                                       \
    template Var add<T>(Tape<T>&, Var, Var);                                             \
    template Var sub<T>(Tape<T>&, Var, Var);                                             \
    template Var mul<T>(Tape<T>&, Var, Var);                                             \
    template Var add_broadcast<T>(Tape<T>&, Var, Var);                                   \
    template Var mul_broadcast<T>(Tape<T>&, Var, Var);                                   \
    template Var scale<T>(Tape<T>&, Var, T);                                             \
    template Var add_scalar<T>(Tape<T>&, Var, T);                                        \
    template Var matmul<T>(Tape<T>&, Var, Var);                                          \
    template Var matmul_bt<T>(Tape<T>&, Var, Var);                                       \
    template Var linear<T>(Tape<T>&, Var, Var, std::optional<Var>);                      \
    template Var softmax<T>(Tape<T>&, Var, std::size_t);                                 \
    template Var sigmoid<T>(Tape<T>&, Var);                                              \
    template Var gelu<T>(Tape<T>&, Var);                                                 \
    template Var log_clamped<T>(Tape<T>&, Var, T);                                       \
    template Var layer_norm<T>(Tape<T>&, Var, Var, Var, T);                              \
    template Var attention<T>(Tape<T>&, Var, Var, Var, std::size_t, std::optional<Var>); \
    template Var conv2d<T>(Tape<T>&, Var, Var, std::optional<Var>);                      \
    template Var transpose01<T>(Tape<T>&, Var);                                          \
    template Var reshape<T>(Tape<T>&, Var, Shape);                                       \
    template Var concat_last<T>(Tape<T>&, Var, Var);                                     \
    template Var gather_axis1<T>(Tape<T>&, Var, std::vector<std::size_t>);               \
    template Var gather_flat<T>(Tape<T>&, Var, std::vector<std::size_t>, Shape);         \
    template Var l2_normalize_last<T>(Tape<T>&, Var);                                    \
    template Var l1_normalize_last<T>(Tape<T>&, Var);                                    \
    template Var sum_last<T>(Tape<T>&, Var);                                             \
    template Var sum<T>(Tape<T>&, Var);                                                  \
    template Var mean<T>(Tape<T>&, Var);                                                 \
    template Var upsample_nearest<T>(Tape<T>&, Var, std::size_t);

PARTCAT_INSTANTIATE_OPS(float)
PARTCAT_INSTANTIATE_OPS(double)

#undef PARTCAT_INSTANTIATE_OPS

}  // namespace partcat::ops
