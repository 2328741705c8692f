#include "partcat/reference.hpp"

#include <cmath>
#include <vector>

namespace partcat::reference {

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
            std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T s{0};
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
    }
}

template <typename T>
void conv2d(std::span<const T> x, std::span<const T> kernel, std::span<const T> bias,
            std::span<T> out, const kernels::ConvDims& d) {
    const long r = static_cast<long>(d.ksize / 2);
    const long h = static_cast<long>(d.height);
    const long w = static_cast<long>(d.width);
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (long y = 0; y < h; ++y) {
            for (long xx = 0; xx < w; ++xx) {
                for (std::size_t co = 0; co < d.c_out; ++co) {
                    T s{0};
                    for (long dy = 0; dy < static_cast<long>(d.ksize); ++dy) {
                        for (long dx = 0; dx < static_cast<long>(d.ksize); ++dx) {
                            const long sy = y + dy - r;
                            const long sx = xx + dx - r;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                            for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                                s += x[((b * h + sy) * w + sx) * d.c_in + ci] *
                                     kernel[((dy * d.ksize + dx) * d.c_in + ci) * d.c_out + co];
                            }
                        }
                    }
                    if (!bias.empty()) s += bias[co];
                    out[((b * h + y) * w + xx) * d.c_out + co] = s;
                }
            }
        }
    }
}

template <typename T>
void attention(std::span<const T> q, std::span<const T> k, std::span<const T> v,
               std::span<const T> bias, std::span<T> out, const kernels::AttentionDims& d) {
    const std::size_t dh = d.d_k / d.heads;
    const std::size_t dvh = d.d_v / d.heads;
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));
    std::vector<T> logits(d.len_k);
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t hd = 0; hd < d.heads; ++hd) {
            for (std::size_t i = 0; i < d.len_q; ++i) {
                T mx = 0;
                for (std::size_t j = 0; j < d.len_k; ++j) {
                    T s{0};
                    for (std::size_t c = 0; c < dh; ++c) {
                        s += q[(b * d.len_q + i) * d.d_k + hd * dh + c] *
                             k[(b * d.len_k + j) * d.d_k + hd * dh + c];
                    }
                    s *= scale;
                    if (!bias.empty()) s += bias[(hd * d.len_q + i) * d.len_k + j];
                    logits[j] = s;
                    mx = j == 0 ? s : std::max(mx, s);
                }
                T sum{0};
                for (std::size_t j = 0; j < d.len_k; ++j) {
                    logits[j] = std::exp(logits[j] - mx);
                    sum += logits[j];
                }
                for (std::size_t j = 0; j < d.len_k; ++j) logits[j] /= sum;
                for (std::size_t c = 0; c < dvh; ++c) {
                    T s{0};
                    for (std::size_t j = 0; j < d.len_k; ++j) {
                        s += logits[j] * v[(b * d.len_k + j) * d.d_v + hd * dvh + c];
                    }
                    out[(b * d.len_q + i) * d.d_v + hd * dvh + c] = s;
                }
            }
        }
    }
}

template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> out, std::size_t rows, std::size_t n) {
    for (std::size_t i = 0; i < rows; ++i) {
        T mx = x[i * n];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
        T s{0};
        for (std::size_t j = 0; j < n; ++j) s += std::exp(x[i * n + j] - mx);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = std::exp(x[i * n + j] - mx) / s;
    }
}

template void matmul<float>(std::span<const float>, std::span<const float>, std::span<float>,
                            std::size_t, std::size_t, std::size_t);
template void matmul<double>(std::span<const double>, std::span<const double>, std::span<double>,
                             std::size_t, std::size_t, std::size_t);
template void conv2d<float>(std::span<const float>, std::span<const float>,
                            std::span<const float>, std::span<float>, const kernels::ConvDims&);
template void conv2d<double>(std::span<const double>, std::span<const double>,
                             std::span<const double>, std::span<double>,
                             const kernels::ConvDims&);
template void attention<float>(std::span<const float>, std::span<const float>,
                               std::span<const float>, std::span<const float>, std::span<float>,
                               const kernels::AttentionDims&);
template void attention<double>(std::span<const double>, std::span<const double>,
                                std::span<const double>, std::span<const double>,
                                std::span<double>, const kernels::AttentionDims&);
template void softmax_rows<float>(std::span<const float>, std::span<float>, std::size_t,
                                  std::size_t);
template void softmax_rows<double>(std::span<const double>, std::span<double>, std::size_t,
                                   std::size_t);

}  // namespace partcat::reference
