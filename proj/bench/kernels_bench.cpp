#include <benchmark/benchmark.h>

#include <vector>

#include "partcat/kernels.hpp"
#include "partcat/reference.hpp"
#include "partcat/rng.hpp"

using namespace partcat;

namespace {

std::vector<float> filled(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return v;
}

// square m = k = n
void BM_matmul_parallel(benchmark::State& st) {
    const std::size_t n = st.range(0);
    const auto a = filled(n * n, 1), b = filled(n * n, 2);
    std::vector<float> c(n * n);
    for (auto _ : st) {
        kernels::matmul_nn<float>(a, b, c, n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(st.iterations() * n * n * n);
}

void BM_matmul_serial(benchmark::State& st) {
    const std::size_t n = st.range(0);
    const auto a = filled(n * n, 1), b = filled(n * n, 2);
    std::vector<float> c(n * n);
    for (auto _ : st) {
        reference::matmul<float>(a, b, c, n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(st.iterations() * n * n * n);
}

// one embedding conv over Q class slices of a side x side grid
kernels::ConvDims conv_dims(std::size_t side) { return {24, side, side, 1, 32, 3}; }

void BM_conv2d_parallel(benchmark::State& st) {
    const auto d = conv_dims(st.range(0));
    const auto x = filled(d.batch * d.height * d.width * d.c_in, 3);
    const auto k = filled(d.ksize * d.ksize * d.c_in * d.c_out, 4);
    const auto bias = filled(d.c_out, 5);
    std::vector<float> out(d.batch * d.height * d.width * d.c_out);
    for (auto _ : st) {
        kernels::conv2d_forward<float>(x, k, bias, out, d);
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_conv2d_serial(benchmark::State& st) {
    const auto d = conv_dims(st.range(0));
    const auto x = filled(d.batch * d.height * d.width * d.c_in, 3);
    const auto k = filled(d.ksize * d.ksize * d.c_in * d.c_out, 4);
    const auto bias = filled(d.c_out, 5);
    std::vector<float> out(d.batch * d.height * d.width * d.c_out);
    for (auto _ : st) {
        reference::conv2d<float>(x, k, bias, out, d);
        benchmark::DoNotOptimize(out.data());
    }
}

// spatial attention: one batch entry per class slice, tokens = pixels
kernels::AttentionDims attn_dims(std::size_t side) { return {24, side * side, side * side, 32, 32, 4}; }

void BM_attention_parallel(benchmark::State& st) {
    const auto d = attn_dims(st.range(0));
    const auto q = filled(d.batch * d.len_q * d.d_k, 6), k = filled(d.batch * d.len_k * d.d_k, 7);
    const auto v = filled(d.batch * d.len_k * d.d_v, 8);
    std::vector<float> probs(d.batch * d.heads * d.len_q * d.len_k), out(d.batch * d.len_q * d.d_v);
    for (auto _ : st) {
        kernels::attention_forward<float>(q, k, v, {}, probs, out, d);
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_attention_serial(benchmark::State& st) {
    const auto d = attn_dims(st.range(0));
    const auto q = filled(d.batch * d.len_q * d.d_k, 6), k = filled(d.batch * d.len_k * d.d_k, 7);
    const auto v = filled(d.batch * d.len_k * d.d_v, 8);
    std::vector<float> out(d.batch * d.len_q * d.d_v);
    for (auto _ : st) {
        reference::attention<float>(q, k, v, {}, out, d);
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_softmax_parallel(benchmark::State& st) {
    const std::size_t rows = st.range(0), n = 256;
    const auto x = filled(rows * n, 9);
    std::vector<float> out(rows * n);
    for (auto _ : st) {
        kernels::softmax_rows<float>(x, out, rows, n);
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_softmax_serial(benchmark::State& st) {
    const std::size_t rows = st.range(0), n = 256;
    const auto x = filled(rows * n, 9);
    std::vector<float> out(rows * n);
    for (auto _ : st) {
        reference::softmax_rows<float>(x, out, rows, n);
        benchmark::DoNotOptimize(out.data());
    }
}

}  // namespace

BENCHMARK(BM_matmul_parallel)->Arg(64)->Arg(256);
BENCHMARK(BM_matmul_serial)->Arg(64)->Arg(256);
BENCHMARK(BM_conv2d_parallel)->Arg(8)->Arg(16);
BENCHMARK(BM_conv2d_serial)->Arg(8)->Arg(16);
BENCHMARK(BM_attention_parallel)->Arg(8)->Arg(16);
BENCHMARK(BM_attention_serial)->Arg(8)->Arg(16);
BENCHMARK(BM_softmax_parallel)->Arg(256)->Arg(4096);
BENCHMARK(BM_softmax_serial)->Arg(256)->Arg(4096);

BENCHMARK_MAIN();
