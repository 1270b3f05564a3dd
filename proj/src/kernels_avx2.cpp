// AVX2 kernel backend. This TU is compiled with -mavx2 and nothing else; the
// non-reducing kernels use separate mul/add intrinsics so results match the
// scalar backend bit for bit (no FMA contraction is possible without -mfma).

#if defined(AHMF_HAVE_AVX2)

#include <immintrin.h>

#include <cstddef>

namespace ahmf::kernels::avx2 {

void add(float* dst, const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub(float* dst, const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul(float* dst, const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale(float* dst, const float* a, float s, std::size_t n) {
    const __m256 vs = _mm256_set1_ps(s);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), vs));
    for (; i < n; ++i) dst[i] = a[i] * s;
}

void axpy(float* y, float a, const float* x, std::size_t n) {
    const __m256 va = _mm256_set1_ps(a);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 p = _mm256_mul_ps(va, _mm256_loadu_ps(x + i));
        _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), p));
    }
    for (; i < n; ++i) {
        float p = a * x[i];
        y[i] = y[i] + p;
    }
}

void relu6(float* dst, const float* a, std::size_t n) {
    const __m256 lo = _mm256_setzero_ps();
    const __m256 hi = _mm256_set1_ps(6.0f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 v = _mm256_loadu_ps(a + i);
        v = _mm256_min_ps(_mm256_max_ps(v, lo), hi);
        _mm256_storeu_ps(dst + i, v);
    }
    for (; i < n; ++i) {
        float v = a[i];
        if (v < 0.0f) v = 0.0f;
        if (v > 6.0f) v = 6.0f;
        dst[i] = v;
    }
}

static float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    __m128 s = _mm_add_ps(lo, hi);
    s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
    return _mm_cvtss_f32(s);
}

float dot(const float* a, const float* b, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        acc = _mm256_add_ps(acc, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    float r = hsum(acc);
    for (; i < n; ++i) r += a[i] * b[i];
    return r;
}

float vsum(const float* a, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(a + i));
    float r = hsum(acc);
    for (; i < n; ++i) r += a[i];
    return r;
}

float vmax(const float* a, std::size_t n) {
    std::size_t i = 0;
    float m = a[0];
    if (n >= 8) {
        __m256 acc = _mm256_loadu_ps(a);
        for (i = 8; i + 8 <= n; i += 8) acc = _mm256_max_ps(acc, _mm256_loadu_ps(a + i));
        __m128 lo = _mm256_castps256_ps128(acc);
        __m128 hi = _mm256_extractf128_ps(acc, 1);
        __m128 s = _mm_max_ps(lo, hi);
        s = _mm_max_ps(s, _mm_movehl_ps(s, s));
        s = _mm_max_ss(s, _mm_shuffle_ps(s, s, 1));
        m = _mm_cvtss_f32(s);
    }
    for (; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}

}  // namespace ahmf::kernels::avx2

#endif  // AHMF_HAVE_AVX2
