#ifdef EELO_HAVE_AVX2

#include <immintrin.h>

#include <cmath>
#include <vector>

#include "eelo/kernels.hpp"

namespace eelo::kernels::avx2 {

namespace {

// Polynomial expf (cephes-style), valid after clamping to [-88.37, 88.37].
// Accuracy ~2 ulp, enough for the 1e-5 equivalence tolerance against the
// scalar path.
inline __m256 exp256_ps(__m256 x) {
    const __m256 exp_hi = _mm256_set1_ps(88.3762626647949f);
    const __m256 exp_lo = _mm256_set1_ps(-88.3762626647949f);
    const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
    const __m256 c1 = _mm256_set1_ps(0.693359375f);
    const __m256 c2 = _mm256_set1_ps(-2.12194440e-4f);
    const __m256 p0 = _mm256_set1_ps(1.9875691500e-4f);
    const __m256 p1 = _mm256_set1_ps(1.3981999507e-3f);
    const __m256 p2 = _mm256_set1_ps(8.3334519073e-3f);
    const __m256 p3 = _mm256_set1_ps(4.1665795894e-2f);
    const __m256 p4 = _mm256_set1_ps(1.6666665459e-1f);
    const __m256 p5 = _mm256_set1_ps(5.0000001201e-1f);
    const __m256 one = _mm256_set1_ps(1.0f);

    x = _mm256_min_ps(x, exp_hi);
    x = _mm256_max_ps(x, exp_lo);

    __m256 fx = _mm256_fmadd_ps(x, log2e, _mm256_set1_ps(0.5f));
    fx = _mm256_floor_ps(fx);

    x = _mm256_fnmadd_ps(fx, c1, x);
    x = _mm256_fnmadd_ps(fx, c2, x);

    __m256 z = _mm256_mul_ps(x, x);
    __m256 y = p0;
    y = _mm256_fmadd_ps(y, x, p1);
    y = _mm256_fmadd_ps(y, x, p2);
    y = _mm256_fmadd_ps(y, x, p3);
    y = _mm256_fmadd_ps(y, x, p4);
    y = _mm256_fmadd_ps(y, x, p5);
    y = _mm256_fmadd_ps(y, z, x);
    y = _mm256_add_ps(y, one);

    __m256i imm = _mm256_cvttps_epi32(fx);
    imm = _mm256_add_epi32(imm, _mm256_set1_epi32(0x7f));
    imm = _mm256_slli_epi32(imm, 23);
    return _mm256_mul_ps(y, _mm256_castsi256_ps(imm));
}

} // namespace

void vecmat(const float* x, const float* w, size_t in_dim, size_t out_dim, float* y) {
    thread_local std::vector<double> acc;
    acc.assign(out_dim, 0.0);
    double* a = acc.data();
    for (size_t i = 0; i < in_dim; ++i) {
        const double xi = static_cast<double>(x[i]);
        const __m256d xv = _mm256_set1_pd(xi);
        const float* row = w + i * out_dim;
        size_t j = 0;
        for (; j + 4 <= out_dim; j += 4) {
            __m256d wv = _mm256_cvtps_pd(_mm_loadu_ps(row + j));
            __m256d av = _mm256_loadu_pd(a + j);
            _mm256_storeu_pd(a + j, _mm256_fmadd_pd(xv, wv, av));
        }
        for (; j < out_dim; ++j) {
            a[j] += xi * static_cast<double>(row[j]);
        }
    }
    for (size_t j = 0; j < out_dim; ++j) {
        y[j] = static_cast<float>(a[j]);
    }
}

float dot(const float* a, const float* b, size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 av = _mm256_loadu_ps(a + i);
        __m256 bv = _mm256_loadu_ps(b + i);
        __m256d alo = _mm256_cvtps_pd(_mm256_castps256_ps128(av));
        __m256d ahi = _mm256_cvtps_pd(_mm256_extractf128_ps(av, 1));
        __m256d blo = _mm256_cvtps_pd(_mm256_castps256_ps128(bv));
        __m256d bhi = _mm256_cvtps_pd(_mm256_extractf128_ps(bv, 1));
        acc0 = _mm256_fmadd_pd(alo, blo, acc0);
        acc1 = _mm256_fmadd_pd(ahi, bhi, acc1);
    }
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
    double total = lanes[0] + lanes[1] + lanes[2] + lanes[3];
    for (; i < n; ++i) {
        total += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return static_cast<float>(total);
}

void weighted_accum(float w, const float* v, double* acc, size_t n) {
    const double wd = static_cast<double>(w);
    const __m256d wv = _mm256_set1_pd(wd);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vv = _mm256_cvtps_pd(_mm_loadu_ps(v + i));
        __m256d av = _mm256_loadu_pd(acc + i);
        _mm256_storeu_pd(acc + i, _mm256_fmadd_pd(wv, vv, av));
    }
    for (; i < n; ++i) {
        acc[i] += wd * static_cast<double>(v[i]);
    }
}

void elem_mul(float* dst, const float* a, const float* b, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(dst + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    }
    for (; i < n; ++i) {
        dst[i] = a[i] * b[i];
    }
}

void add_inplace(float* dst, const float* a, size_t n) {
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(dst + i, _mm256_add_ps(_mm256_loadu_ps(dst + i), _mm256_loadu_ps(a + i)));
    }
    for (; i < n; ++i) {
        dst[i] += a[i];
    }
}

void rmsnorm(float* out, const float* x, const float* weight, size_t n, float eps) {
    const float ss = dot(x, x, n);
    const float inv = static_cast<float>(
        1.0 / std::sqrt(static_cast<double>(ss) / static_cast<double>(n) + static_cast<double>(eps)));
    const __m256 iv = _mm256_set1_ps(inv);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 xv = _mm256_loadu_ps(x + i);
        __m256 wv = _mm256_loadu_ps(weight + i);
        _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_mul_ps(xv, wv), iv));
    }
    for (; i < n; ++i) {
        out[i] = x[i] * weight[i] * inv;
    }
}

void silu(float* v, size_t n) {
    const __m256 one = _mm256_set1_ps(1.0f);
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 x = _mm256_loadu_ps(v + i);
        __m256 e = exp256_ps(_mm256_sub_ps(_mm256_setzero_ps(), x));
        _mm256_storeu_ps(v + i, _mm256_div_ps(x, _mm256_add_ps(one, e)));
    }
    if (i < n) {
        scalar::silu(v + i, n - i);
    }
}

void relu(float* v, size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(v + i, _mm256_max_ps(_mm256_loadu_ps(v + i), zero));
    }
    for (; i < n; ++i) {
        v[i] = v[i] > 0.0f ? v[i] : 0.0f;
    }
}

} // namespace eelo::kernels::avx2

#endif // EELO_HAVE_AVX2
