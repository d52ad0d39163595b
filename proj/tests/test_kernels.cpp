#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "eelo/errors.hpp"
#include "eelo/kernels.hpp"
#include "eelo/rng.hpp"

using namespace eelo;
using namespace eelo::kernels;

namespace {

std::vector<float> random_vec(std::mt19937_64& gen, size_t n, float lo = -4.0f, float hi = 4.0f) {
    std::vector<float> v(n);
    for (auto& x : v) {
        x = lo + static_cast<float>(uniform01(gen)) * (hi - lo);
    }
    return v;
}

// Independent third oracle for the reductions: serial long-double sum.
long double naive_dot(const std::vector<float>& a, const std::vector<float>& b) {
    long double s = 0.0L;
    for (size_t i = 0; i < a.size(); ++i) {
        s += static_cast<long double>(a[i]) * static_cast<long double>(b[i]);
    }
    return s;
}

const std::vector<size_t> kSizes = {1, 2, 3, 4, 5, 7, 8, 9, 11, 16, 31, 32, 37, 64, 129, 256, 300};

bool close_rel(float a, float b, double tol) {
    double da = a, db = b;
    return std::abs(da - db) <= tol * std::max({1.0, std::abs(da), std::abs(db)});
}

} // namespace

TEST_CASE("backend plumbing") {
    CHECK(backend_from_name("scalar") == Backend::scalar);
    CHECK(backend_from_name("auto") == detect_backend());
    CHECK_THROWS_AS(backend_from_name("sse9"), InputError);
    if (avx2_available()) {
        CHECK(backend_from_name("avx2") == Backend::avx2);
        set_backend(Backend::avx2);
        CHECK(active_backend() == Backend::avx2);
        CHECK(backend_name(active_backend()) == "avx2");
    } else {
        CHECK_THROWS_AS(set_backend(Backend::avx2), InputError);
    }
    set_backend(Backend::scalar);
    CHECK(active_backend() == Backend::scalar);
    CHECK(backend_name(Backend::scalar) == "scalar");
}

TEST_CASE("scalar dot matches long-double oracle") {
    std::mt19937_64 gen(11);
    for (size_t n : kSizes) {
        auto a = random_vec(gen, n);
        auto b = random_vec(gen, n);
        long double ref = naive_dot(a, b);
        float got = scalar::dot(a.data(), b.data(), n);
        CHECK(std::abs(static_cast<long double>(got) - ref) <=
              1e-5L * (1.0L + std::abs(ref)));
    }
    std::vector<float> z{0.0f};
    CHECK(scalar::dot(z.data(), z.data(), 0) == 0.0f);
}

TEST_CASE("scalar vecmat: identity matrix is a no-op") {
    std::mt19937_64 gen(12);
    const size_t n = 17;
    auto x = random_vec(gen, n);
    std::vector<float> w(n * n, 0.0f);
    for (size_t i = 0; i < n; ++i) {
        w[i * n + i] = 1.0f;
    }
    std::vector<float> y(n);
    scalar::vecmat(x.data(), w.data(), n, n, y.data());
    CHECK(std::memcmp(x.data(), y.data(), n * sizeof(float)) == 0);
}

TEST_CASE("scalar vecmat matches per-column long-double oracle") {
    std::mt19937_64 gen(13);
    const size_t in_dim = 37, out_dim = 29;
    auto x = random_vec(gen, in_dim);
    auto w = random_vec(gen, in_dim * out_dim);
    std::vector<float> y(out_dim);
    scalar::vecmat(x.data(), w.data(), in_dim, out_dim, y.data());
    for (size_t j = 0; j < out_dim; ++j) {
        long double s = 0.0L;
        for (size_t i = 0; i < in_dim; ++i) {
            s += static_cast<long double>(x[i]) * static_cast<long double>(w[i * out_dim + j]);
        }
        CHECK(std::abs(static_cast<long double>(y[j]) - s) <= 1e-5L * (1.0L + std::abs(s)));
    }
}

TEST_CASE("scalar rmsnorm: all-ones weight yields unit mean square") {
    std::mt19937_64 gen(14);
    for (size_t n : {8u, 75u, 256u}) {
        auto x = random_vec(gen, n, 0.5f, 3.0f);
        std::vector<float> w(n, 1.0f), out(n);
        scalar::rmsnorm(out.data(), x.data(), w.data(), n, 1e-5f);
        double ms = 0.0;
        for (float v : out) {
            ms += static_cast<double>(v) * v;
        }
        ms /= static_cast<double>(n);
        CHECK(ms == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("scalar silu and relu pointwise behaviour") {
    std::vector<float> v{-100.0f, -2.0f, 0.0f, 0.5f, 3.0f, 100.0f};
    auto s = v;
    scalar::silu(s.data(), s.size());
    CHECK(s[2] == 0.0f);
    CHECK(s[3] == doctest::Approx(0.5 / (1.0 + std::exp(-0.5))).epsilon(1e-6));
    CHECK(s[5] == doctest::Approx(100.0).epsilon(1e-6));
    CHECK(std::abs(s[0]) < 1e-30f);

    auto r = v;
    scalar::relu(r.data(), r.size());
    for (size_t i = 0; i < v.size(); ++i) {
        CHECK(r[i] == (v[i] > 0.0f ? v[i] : 0.0f));
    }
}

#ifdef EELO_HAVE_AVX2

TEST_CASE("avx2 kernels match scalar" * doctest::skip(!avx2_available())) {
    std::mt19937_64 gen(15);

    SUBCASE("vecmat is bit-identical") {
        for (size_t in_dim : {3u, 8u, 20u}) {
            for (size_t out_dim : kSizes) {
                auto x = random_vec(gen, in_dim);
                auto w = random_vec(gen, in_dim * out_dim);
                std::vector<float> ys(out_dim), yv(out_dim);
                scalar::vecmat(x.data(), w.data(), in_dim, out_dim, ys.data());
                avx2::vecmat(x.data(), w.data(), in_dim, out_dim, yv.data());
                CHECK(std::memcmp(ys.data(), yv.data(), out_dim * sizeof(float)) == 0);
            }
        }
    }

    SUBCASE("weighted_accum is bit-identical") {
        for (size_t n : kSizes) {
            auto v = random_vec(gen, n);
            std::vector<double> as(n), av(n);
            for (size_t i = 0; i < n; ++i) {
                as[i] = av[i] = uniform01(gen) - 0.5;
            }
            float w = static_cast<float>(uniform01(gen)) * 2.0f - 1.0f;
            scalar::weighted_accum(w, v.data(), as.data(), n);
            avx2::weighted_accum(w, v.data(), av.data(), n);
            CHECK(std::memcmp(as.data(), av.data(), n * sizeof(double)) == 0);
        }
    }

    SUBCASE("elem_mul, add_inplace, relu are bit-identical") {
        for (size_t n : kSizes) {
            auto a = random_vec(gen, n);
            auto b = random_vec(gen, n);
            std::vector<float> ms(n), mv(n);
            scalar::elem_mul(ms.data(), a.data(), b.data(), n);
            avx2::elem_mul(mv.data(), a.data(), b.data(), n);
            CHECK(std::memcmp(ms.data(), mv.data(), n * sizeof(float)) == 0);

            auto ds = a, dv = a;
            scalar::add_inplace(ds.data(), b.data(), n);
            avx2::add_inplace(dv.data(), b.data(), n);
            CHECK(std::memcmp(ds.data(), dv.data(), n * sizeof(float)) == 0);

            auto rs = a, rv = a;
            scalar::relu(rs.data(), rs.size());
            avx2::relu(rv.data(), rv.size());
            CHECK(std::memcmp(rs.data(), rv.data(), n * sizeof(float)) == 0);
        }
    }

    SUBCASE("dot agrees to reduction-order tolerance") {
        for (size_t n : kSizes) {
            auto a = random_vec(gen, n);
            auto b = random_vec(gen, n);
            float s = scalar::dot(a.data(), b.data(), n);
            float v = avx2::dot(a.data(), b.data(), n);
            CHECK(close_rel(s, v, 1e-6));
            long double ref = naive_dot(a, b);
            CHECK(std::abs(static_cast<long double>(v) - ref) <= 1e-5L * (1.0L + std::abs(ref)));
        }
    }

    SUBCASE("rmsnorm agrees elementwise") {
        for (size_t n : kSizes) {
            auto x = random_vec(gen, n);
            auto w = random_vec(gen, n, 0.5f, 1.5f);
            std::vector<float> os(n), ov(n);
            scalar::rmsnorm(os.data(), x.data(), w.data(), n, 1e-5f);
            avx2::rmsnorm(ov.data(), x.data(), w.data(), n, 1e-5f);
            for (size_t i = 0; i < n; ++i) {
                CHECK(close_rel(os[i], ov[i], 1e-5));
            }
        }
    }

    SUBCASE("silu agrees within polynomial-exp tolerance") {
        for (size_t n : kSizes) {
            auto base = random_vec(gen, n, -12.0f, 12.0f);
            if (n > 2) {
                base[0] = -100.0f; // exercise the clamp path
                base[1] = 100.0f;
            }
            auto s = base, v = base;
            scalar::silu(s.data(), n);
            avx2::silu(v.data(), n);
            for (size_t i = 0; i < n; ++i) {
                CHECK(close_rel(s[i], v[i], 1e-5));
            }
        }
    }
}

TEST_CASE("dispatch routes to the active backend" * doctest::skip(!avx2_available())) {
    std::mt19937_64 gen(16);
    auto a = random_vec(gen, 40);
    auto b = random_vec(gen, 40);

    set_backend(Backend::scalar);
    float ds = dot(a.data(), b.data(), a.size());
    set_backend(Backend::avx2);
    float dv = dot(a.data(), b.data(), a.size());
    set_backend(Backend::scalar);

    CHECK(ds == scalar::dot(a.data(), b.data(), a.size()));
    CHECK(dv == avx2::dot(a.data(), b.data(), a.size()));
}

#endif // EELO_HAVE_AVX2
