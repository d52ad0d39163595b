#pragma once

#include <cstddef>
#include <string>

// Data-parallel inner loops of the decoder: dot products, vector-matrix
// products, weighted accumulation, elementwise activation math.
//
// Every kernel exists as a scalar reference implementation and, on x86-64,
// an AVX2/FMA variant. The active variant is selected at runtime; the two
// are equivalence-tested against each other. Reductions accumulate in
// 64-bit regardless of backend.

namespace eelo::kernels {

enum class Backend {
    scalar,
    avx2,
};

// True when this build carries AVX2 kernels and the CPU reports AVX2+FMA.
bool avx2_available();

// Best backend the host supports.
Backend detect_backend();

Backend active_backend();

// Throws InputError if the backend is not available on this host.
void set_backend(Backend b);

Backend backend_from_name(const std::string& name); // "scalar" | "avx2" | "auto"
std::string backend_name(Backend b);

// y[j] = sum_i x[i] * w[i * out_dim + j]; w is row-major (in_dim x out_dim).
void vecmat(const float* x, const float* w, size_t in_dim, size_t out_dim, float* y);

// sum_i a[i] * b[i], accumulated in double.
float dot(const float* a, const float* b, size_t n);

// acc[i] += w * v[i] into a 64-bit accumulator (attention value mixing).
void weighted_accum(float w, const float* v, double* acc, size_t n);

// dst[i] = a[i] * b[i]
void elem_mul(float* dst, const float* a, const float* b, size_t n);

// dst[i] += a[i]
void add_inplace(float* dst, const float* a, size_t n);

// out[i] = x[i] * weight[i] / sqrt(mean(x^2) + eps)
void rmsnorm(float* out, const float* x, const float* weight, size_t n, float eps);

// v[i] = v[i] / (1 + exp(-v[i]))
void silu(float* v, size_t n);

// v[i] = max(v[i], 0)
void relu(float* v, size_t n);

namespace scalar {
void vecmat(const float* x, const float* w, size_t in_dim, size_t out_dim, float* y);
float dot(const float* a, const float* b, size_t n);
void weighted_accum(float w, const float* v, double* acc, size_t n);
void elem_mul(float* dst, const float* a, const float* b, size_t n);
void add_inplace(float* dst, const float* a, size_t n);
void rmsnorm(float* out, const float* x, const float* weight, size_t n, float eps);
void silu(float* v, size_t n);
void relu(float* v, size_t n);
} // namespace scalar

#ifdef EELO_HAVE_AVX2
namespace avx2 {
void vecmat(const float* x, const float* w, size_t in_dim, size_t out_dim, float* y);
float dot(const float* a, const float* b, size_t n);
void weighted_accum(float w, const float* v, double* acc, size_t n);
void elem_mul(float* dst, const float* a, const float* b, size_t n);
void add_inplace(float* dst, const float* a, size_t n);
void rmsnorm(float* out, const float* x, const float* weight, size_t n, float eps);
void silu(float* v, size_t n);
void relu(float* v, size_t n);
} // namespace avx2
#endif

} // namespace eelo::kernels
