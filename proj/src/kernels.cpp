#include "eelo/kernels.hpp"

#include <atomic>
#include <cmath>
#include <vector>

#include "eelo/errors.hpp"

namespace eelo::kernels {

namespace scalar {

void vecmat(const float* x, const float* w, size_t in_dim, size_t out_dim, float* y) {
    // Row accumulation: one double accumulator per output column, walked in
    // the same column order as the AVX2 variant so the two match bit-for-bit
    // (float*float is exact in double; one rounding per add).
    thread_local std::vector<double> acc;
    acc.assign(out_dim, 0.0);
    for (size_t i = 0; i < in_dim; ++i) {
        const double xi = static_cast<double>(x[i]);
        const float* row = w + i * out_dim;
        for (size_t j = 0; j < out_dim; ++j) {
            acc[j] += xi * static_cast<double>(row[j]);
        }
    }
    for (size_t j = 0; j < out_dim; ++j) {
        y[j] = static_cast<float>(acc[j]);
    }
}

float dot(const float* a, const float* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return static_cast<float>(acc);
}

void weighted_accum(float w, const float* v, double* acc, size_t n) {
    const double wd = static_cast<double>(w);
    for (size_t i = 0; i < n; ++i) {
        acc[i] += wd * static_cast<double>(v[i]);
    }
}

void elem_mul(float* dst, const float* a, const float* b, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] = a[i] * b[i];
    }
}

void add_inplace(float* dst, const float* a, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        dst[i] += a[i];
    }
}

void rmsnorm(float* out, const float* x, const float* weight, size_t n, float eps) {
    double ss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ss += static_cast<double>(x[i]) * static_cast<double>(x[i]);
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(n) + static_cast<double>(eps)));
    for (size_t i = 0; i < n; ++i) {
        out[i] = x[i] * weight[i] * inv;
    }
}

void silu(float* v, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(v[i]);
        v[i] = static_cast<float>(d / (1.0 + std::exp(-d)));
    }
}

void relu(float* v, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        v[i] = v[i] > 0.0f ? v[i] : 0.0f;
    }
}

} // namespace scalar

// -------------------- runtime dispatch --------------------

bool avx2_available() {
#if defined(EELO_HAVE_AVX2)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend detect_backend() {
    return avx2_available() ? Backend::avx2 : Backend::scalar;
}

namespace {
std::atomic<Backend>& backend_state() {
    static std::atomic<Backend> state{detect_backend()};
    return state;
}
} // namespace

Backend active_backend() { return backend_state().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
    if (b == Backend::avx2 && !avx2_available()) {
        throw InputError("avx2 backend requested but not available on this host");
    }
    backend_state().store(b, std::memory_order_relaxed);
}

Backend backend_from_name(const std::string& name) {
    if (name == "scalar") return Backend::scalar;
    if (name == "avx2") return Backend::avx2;
    if (name == "auto") return detect_backend();
    throw InputError("unknown backend '" + name + "' (expected scalar, avx2, or auto)");
}

std::string backend_name(Backend b) {
    return b == Backend::avx2 ? "avx2" : "scalar";
}

#ifdef EELO_HAVE_AVX2
#define EELO_DISPATCH(fn, ...)                      \
    if (active_backend() == Backend::avx2) {        \
        return avx2::fn(__VA_ARGS__);               \
    }                                               \
    return scalar::fn(__VA_ARGS__)
#else
#define EELO_DISPATCH(fn, ...) return scalar::fn(__VA_ARGS__)
#endif

void vecmat(const float* x, const float* w, size_t in_dim, size_t out_dim, float* y) {
    EELO_DISPATCH(vecmat, x, w, in_dim, out_dim, y);
}

float dot(const float* a, const float* b, size_t n) {
    EELO_DISPATCH(dot, a, b, n);
}

void weighted_accum(float w, const float* v, double* acc, size_t n) {
    EELO_DISPATCH(weighted_accum, w, v, acc, n);
}

void elem_mul(float* dst, const float* a, const float* b, size_t n) {
    EELO_DISPATCH(elem_mul, dst, a, b, n);
}

void add_inplace(float* dst, const float* a, size_t n) {
    EELO_DISPATCH(add_inplace, dst, a, n);
}

void rmsnorm(float* out, const float* x, const float* weight, size_t n, float eps) {
    EELO_DISPATCH(rmsnorm, out, x, weight, n, eps);
}

void silu(float* v, size_t n) {
    EELO_DISPATCH(silu, v, n);
}

void relu(float* v, size_t n) {
    EELO_DISPATCH(relu, v, n);
}

#undef EELO_DISPATCH

} // namespace eelo::kernels
