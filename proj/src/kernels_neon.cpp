// NEON kernel backend (aarch64, where NEON is baseline). Mirrors the AVX2
// backend: separate mul/add (vmlaq would fuse on ARMv8), min/max clamps, and
// 4-lane accumulators for the reductions.

#if defined(AHMF_HAVE_NEON)

#include <arm_neon.h>

#include <cstddef>

namespace ahmf::kernels::neon {

void add(float* dst, const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(dst + i, vaddq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub(float* dst, const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(dst + i, vsubq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul(float* dst, const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(dst + i, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale(float* dst, const float* a, float s, std::size_t n) {
    const float32x4_t vs = vdupq_n_f32(s);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(dst + i, vmulq_f32(vld1q_f32(a + i), vs));
    for (; i < n; ++i) dst[i] = a[i] * s;
}

void axpy(float* y, float a, const float* x, std::size_t n) {
    const float32x4_t va = vdupq_n_f32(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        float32x4_t p = vmulq_f32(va, vld1q_f32(x + i));
        vst1q_f32(y + i, vaddq_f32(vld1q_f32(y + i), p));
    }
    for (; i < n; ++i) {
        float p = a * x[i];
        y[i] = y[i] + p;
    }
}

void relu6(float* dst, const float* a, std::size_t n) {
    const float32x4_t lo = vdupq_n_f32(0.0f);
    const float32x4_t hi = vdupq_n_f32(6.0f);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        vst1q_f32(dst + i, vminq_f32(vmaxq_f32(vld1q_f32(a + i), lo), hi));
    for (; i < n; ++i) {
        float v = a[i];
        if (v < 0.0f) v = 0.0f;
        if (v > 6.0f) v = 6.0f;
        dst[i] = v;
    }
}

float dot(const float* a, const float* b, std::size_t n) {
    float32x4_t acc = vdupq_n_f32(0.0f);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        acc = vaddq_f32(acc, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
    float r = vaddvq_f32(acc);
    for (; i < n; ++i) r += a[i] * b[i];
    return r;
}

float vsum(const float* a, std::size_t n) {
    float32x4_t acc = vdupq_n_f32(0.0f);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = vaddq_f32(acc, vld1q_f32(a + i));
    float r = vaddvq_f32(acc);
    for (; i < n; ++i) r += a[i];
    return r;
}

float vmax(const float* a, std::size_t n) {
    std::size_t i = 0;
    float m = a[0];
    if (n >= 4) {
        float32x4_t acc = vld1q_f32(a);
        for (i = 4; i + 4 <= n; i += 4) acc = vmaxq_f32(acc, vld1q_f32(a + i));
        m = vmaxvq_f32(acc);
    }
    for (; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}

}  // namespace ahmf::kernels::neon

#endif  // AHMF_HAVE_NEON
