#include "partcat/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace partcat::kernels {

namespace {

// Below this many multiply-adds a kernel runs on the calling thread.
constexpr std::size_t kParallelWork = 1 << 14;

}  // namespace

template <typename T>
void matmul_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
    for (long i = 0; i < rows; ++i) {
        T* crow = pc + i * n;
        if (!accumulate) std::fill(crow, crow + n, T{0});
        const T* arow = pa + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
    for (long i = 0; i < rows; ++i) {
        const T* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = pb + j * k;
            T s{0};
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            pc[i * n + j] = accumulate ? pc[i * n + j] + s : s;
        }
    }
}

template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
    for (long i = 0; i < rows; ++i) {
        T* crow = pc + i * n;
        if (!accumulate) std::fill(crow, crow + n, T{0});
        for (std::size_t p = 0; p < k; ++p) {
            const T av = pa[p * m + i];
            const T* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void conv2d_forward(std::span<const T> x, std::span<const T> kernel, std::span<const T> bias,
                    std::span<T> out, const ConvDims& d) {
    const long r = static_cast<long>(d.ksize / 2);
    const long h = static_cast<long>(d.height);
    const long w = static_cast<long>(d.width);
    const long rows = static_cast<long>(d.batch) * h;
    const std::size_t work = d.batch * d.height * d.width * d.ksize * d.ksize * d.c_in * d.c_out;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (long by = 0; by < rows; ++by) {
        const long b = by / h;
        const long y = by % h;
        for (long xx = 0; xx < w; ++xx) {
            T* o = out.data() + ((b * h + y) * w + xx) * d.c_out;
            std::fill(o, o + d.c_out, T{0});
            for (long dy = 0; dy < static_cast<long>(d.ksize); ++dy) {
                const long sy = y + dy - r;
                for (long dx = 0; dx < static_cast<long>(d.ksize); ++dx) {
                    const long sx = xx + dx - r;
                    if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                    const T* xin = x.data() + ((b * h + sy) * w + sx) * d.c_in;
                    const T* kk = kernel.data() + (dy * d.ksize + dx) * d.c_in * d.c_out;
                    for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                        const T xv = xin[ci];
                        const T* krow = kk + ci * d.c_out;
                        for (std::size_t co = 0; co < d.c_out; ++co) o[co] += xv * krow[co];
                    }
                }
            }
            if (!bias.empty()) {
                for (std::size_t co = 0; co < d.c_out; ++co) o[co] += bias[co];
            }
        }
    }
}

template <typename T>
void conv2d_backward(std::span<const T> x, std::span<const T> kernel, std::span<const T> dout,
                     std::span<T> dx, std::span<T> dkernel, std::span<T> dbias, const ConvDims& d) {
    const long r = static_cast<long>(d.ksize / 2);
    const long h = static_cast<long>(d.height);
    const long w = static_cast<long>(d.width);
    const long kk = static_cast<long>(d.ksize);
    const std::size_t work = d.batch * d.height * d.width * d.ksize * d.ksize * d.c_in * d.c_out;

    if (!dx.empty()) {
        // Gather form: each input pixel collects from the outputs whose window covers it.
        const long rows = static_cast<long>(d.batch) * h;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
        for (long by = 0; by < rows; ++by) {
            const long b = by / h;
            const long sy = by % h;
            for (long sx = 0; sx < w; ++sx) {
                T* g = dx.data() + ((b * h + sy) * w + sx) * d.c_in;
                for (long dy = 0; dy < kk; ++dy) {
                    const long y = sy - dy + r;
                    for (long ddx = 0; ddx < kk; ++ddx) {
                        const long xx = sx - ddx + r;
                        if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
                        const T* go = dout.data() + ((b * h + y) * w + xx) * d.c_out;
                        const T* kw = kernel.data() + (dy * kk + ddx) * d.c_in * d.c_out;
                        for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                            const T* krow = kw + ci * d.c_out;
                            T s{0};
                            for (std::size_t co = 0; co < d.c_out; ++co) s += go[co] * krow[co];
                            g[ci] += s;
                        }
                    }
                }
            }
        }
    }

    if (!dkernel.empty()) {
        const long taps = kk * kk * static_cast<long>(d.c_in);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
        for (long t = 0; t < taps; ++t) {
            const long dy = t / (kk * static_cast<long>(d.c_in));
            const long ddx = (t / static_cast<long>(d.c_in)) % kk;
            const long ci = t % static_cast<long>(d.c_in);
            T* gk = dkernel.data() + t * d.c_out;
            for (long b = 0; b < static_cast<long>(d.batch); ++b) {
                for (long y = 0; y < h; ++y) {
                    const long sy = y + dy - r;
                    if (sy < 0 || sy >= h) continue;
                    for (long xx = 0; xx < w; ++xx) {
                        const long sx = xx + ddx - r;
                        if (sx < 0 || sx >= w) continue;
                        const T xv = x[((b * h + sy) * w + sx) * d.c_in + ci];
                        const T* go = dout.data() + ((b * h + y) * w + xx) * d.c_out;
                        for (std::size_t co = 0; co < d.c_out; ++co) gk[co] += xv * go[co];
                    }
                }
            }
        }
    }

    if (!dbias.empty()) {
        const std::size_t pixels = d.batch * d.height * d.width;
        for (std::size_t p = 0; p < pixels; ++p) {
            const T* go = dout.data() + p * d.c_out;
            for (std::size_t co = 0; co < d.c_out; ++co) dbias[co] += go[co];
        }
    }
}

template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> out, std::size_t rows, std::size_t n) {
    const long nr = static_cast<long>(rows);
#pragma omp parallel for schedule(static) if (rows * n > kParallelWork)
    for (long i = 0; i < nr; ++i) {
        const T* in = x.data() + i * n;
        T* o = out.data() + i * n;
        T mx = in[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
        T s{0};
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(in[j] - mx);
            s += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= s;
    }
}

template <typename T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                       std::span<const T> bias, std::span<T> probs, std::span<T> out,
                       const AttentionDims& d) {
    const std::size_t dh = d.d_k / d.heads;
    const std::size_t dvh = d.d_v / d.heads;
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));
    const long jobs = static_cast<long>(d.batch * d.heads);
    const std::size_t work = d.batch * d.len_q * d.len_k * (d.d_k + d.d_v);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (long job = 0; job < jobs; ++job) {
        const std::size_t b = static_cast<std::size_t>(job) / d.heads;
        const std::size_t hd = static_cast<std::size_t>(job) % d.heads;
        const T* qb = q.data() + b * d.len_q * d.d_k + hd * dh;
        const T* kb = k.data() + b * d.len_k * d.d_k + hd * dh;
        const T* vb = v.data() + b * d.len_k * d.d_v + hd * dvh;
        T* pb = probs.data() + (b * d.heads + hd) * d.len_q * d.len_k;
        T* ob = out.data() + b * d.len_q * d.d_v + hd * dvh;
        const T* biasb = bias.empty() ? nullptr : bias.data() + hd * d.len_q * d.len_k;
        for (std::size_t i = 0; i < d.len_q; ++i) {
            T* prow = pb + i * d.len_k;
            const T* qi = qb + i * d.d_k;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < d.len_k; ++j) {
                const T* kj = kb + j * d.d_k;
                T s{0};
                for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                s *= scale;
                if (biasb) s += biasb[i * d.len_k + j];
                prow[j] = s;
                mx = std::max(mx, s);
            }
            T sum{0};
            for (std::size_t j = 0; j < d.len_k; ++j) {
                prow[j] = std::exp(prow[j] - mx);
                sum += prow[j];
            }
            for (std::size_t j = 0; j < d.len_k; ++j) prow[j] /= sum;
            T* oi = ob + i * d.d_v;
            std::fill(oi, oi + dvh, T{0});
            for (std::size_t j = 0; j < d.len_k; ++j) {
                const T pj = prow[j];
                const T* vj = vb + j * d.d_v;
                for (std::size_t c = 0; c < dvh; ++c) oi[c] += pj * vj[c];
            }
        }
    }
}

template <typename T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dq,
                        std::span<T> dk, std::span<T> dv, std::span<T> dbias,
                        const AttentionDims& d) {
    const std::size_t dh = d.d_k / d.heads;
    const std::size_t dvh = d.d_v / d.heads;
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));
    const std::size_t lqk = d.len_q * d.len_k;
    const long jobs = static_cast<long>(d.batch * d.heads);
    const std::size_t work = d.batch * lqk * (d.d_k + d.d_v);
    // Logit gradients are kept per job so the bias reduction runs in a fixed order.
    std::vector<T> dlogits_all(dbias.empty() ? 0 : d.batch * d.heads * lqk);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (long job = 0; job < jobs; ++job) {
        const std::size_t b = static_cast<std::size_t>(job) / d.heads;
        const std::size_t hd = static_cast<std::size_t>(job) % d.heads;
        const T* qb = q.data() + b * d.len_q * d.d_k + hd * dh;
        const T* kb = k.data() + b * d.len_k * d.d_k + hd * dh;
        const T* vb = v.data() + b * d.len_k * d.d_v + hd * dvh;
        const T* pb = probs.data() + (b * d.heads + hd) * lqk;
        const T* gob = dout.data() + b * d.len_q * d.d_v + hd * dvh;
        std::vector<T> local(dbias.empty() ? lqk : 0);
        T* ds = dbias.empty() ? local.data() : dlogits_all.data() + (b * d.heads + hd) * lqk;
        for (std::size_t i = 0; i < d.len_q; ++i) {
            const T* prow = pb + i * d.len_k;
            const T* goi = gob + i * d.d_v;
            T* dsrow = ds + i * d.len_k;
            T dot{0};
            for (std::size_t j = 0; j < d.len_k; ++j) {
                const T* vj = vb + j * d.d_v;
                T g{0};
                for (std::size_t c = 0; c < dvh; ++c) g += goi[c] * vj[c];
                dsrow[j] = g;
                dot += g * prow[j];
            }
            for (std::size_t j = 0; j < d.len_k; ++j) dsrow[j] = prow[j] * (dsrow[j] - dot);
        }
        if (!dv.empty()) {
            T* dvb = dv.data() + b * d.len_k * d.d_v + hd * dvh;
            for (std::size_t j = 0; j < d.len_k; ++j) {
                T* gv = dvb + j * d.d_v;
                for (std::size_t i = 0; i < d.len_q; ++i) {
                    const T pij = pb[i * d.len_k + j];
                    const T* goi = gob + i * d.d_v;
                    for (std::size_t c = 0; c < dvh; ++c) gv[c] += pij * goi[c];
                }
            }
        }
        if (!dq.empty()) {
            T* dqb = dq.data() + b * d.len_q * d.d_k + hd * dh;
            for (std::size_t i = 0; i < d.len_q; ++i) {
                T* gq = dqb + i * d.d_k;
                for (std::size_t j = 0; j < d.len_k; ++j) {
                    const T s = ds[i * d.len_k + j] * scale;
                    const T* kj = kb + j * d.d_k;
                    for (std::size_t c = 0; c < dh; ++c) gq[c] += s * kj[c];
                }
            }
        }
        if (!dk.empty()) {
            T* dkb = dk.data() + b * d.len_k * d.d_k + hd * dh;
            for (std::size_t j = 0; j < d.len_k; ++j) {
                T* gk = dkb + j * d.d_k;
                for (std::size_t i = 0; i < d.len_q; ++i) {
                    const T s = ds[i * d.len_k + j] * scale;
                    const T* qi = qb + i * d.d_k;
                    for (std::size_t c = 0; c < dh; ++c) gk[c] += s * qi[c];
                }
            }
        }
    }
    if (!dbias.empty()) {
        for (std::size_t b = 0; b < d.batch; ++b) {
            for (std::size_t hd = 0; hd < d.heads; ++hd) {
                const T* src = dlogits_all.data() + (b * d.heads + hd) * lqk;
                T* dst = dbias.data() + hd * lqk;
                for (std::size_t e = 0; e < lqk; ++e) dst[e] += src[e];
            }
        }
    }
}

#define PARTCAT_INSTANTIATE_KERNELS(T)                                                        \
    template void matmul_nn<T>(std::span<const T>, std::span<const T>, std::span<T>,          \
                               std::size_t, std::size_t, std::size_t, bool);                  \
    template void matmul_nt<T>(std::span<const T>, std::span<const T>, std::span<T>,          \
                               std::size_t, std::size_t, std::size_t, bool);                  \
    template void matmul_tn<T>(std::span<const T>, std::span<const T>, std::span<T>,          \
                               std::size_t, std::size_t, std::size_t, bool);                  \
    template void conv2d_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>, \
                                    std::span<T>, const ConvDims&);                           \
    template void conv2d_backward<T>(std::span<const T>, std::span<const T>,                  \
                                     std::span<const T>, std::span<T>, std::span<T>,          \
                                     std::span<T>, const ConvDims&);                          \
    template void softmax_rows<T>(std::span<const T>, std::span<T>, std::size_t, std::size_t); \
    template void attention_forward<T>(std::span<const T>, std::span<const T>,                \
                                       std::span<const T>, std::span<const T>, std::span<T>,  \
                                       std::span<T>, const AttentionDims&);                   \
    template void attention_backward<T>(std::span<const T>, std::span<const T>,               \
                                        std::span<const T>, std::span<const T>,               \
                                        std::span<const T>, std::span<T>, std::span<T>,       \
                                        std::span<T>, std::span<T>, const AttentionDims&);

PARTCAT_INSTANTIATE_KERNELS(float)
PARTCAT_INSTANTIATE_KERNELS(double)

#undef PARTCAT_INSTANTIATE_KERNELS

}  // namespace partcat::kernels
