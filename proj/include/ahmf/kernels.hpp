#pragma once

#include <cstddef>
#include <string>

// Inner-loop arithmetic kernels. Float entry points dispatch at runtime to the
// best backend detected on this CPU (AVX2 on x86-64, NEON on aarch64, scalar
// otherwise); the templated versions are the scalar reference used for other
// scalar types (the double-precision gradcheck instantiation).
//
// Backend equivalence contract, enforced by tests/test_kernels.cpp:
//   - add/sub/mul/scale/axpy/relu6/vmax are bit-exact across backends
//     (elementwise IEEE mul/add, no FMA contraction anywhere),
//   - dot/vsum may differ by reassociation and are compared with a tolerance.

namespace ahmf::kernels {

enum class Backend { Scalar, Avx2, Neon };

const char* backend_name(Backend b);
bool backend_supported(Backend b);
Backend active_backend();
// Forces a backend (tests, debugging). Throws ConfigError if unsupported here.
void force_backend(Backend b);
// Returns to auto-detection (honors the AHMF_KERNELS env override).
void reset_backend();

// Dispatched float kernels.
void add(float* dst, const float* a, const float* b, std::size_t n);
void sub(float* dst, const float* a, const float* b, std::size_t n);
void mul(float* dst, const float* a, const float* b, std::size_t n);
void scale(float* dst, const float* a, float s, std::size_t n);
void axpy(float* y, float a, const float* x, std::size_t n);
void relu6(float* dst, const float* a, std::size_t n);
float dot(const float* a, const float* b, std::size_t n);
float vsum(const float* a, std::size_t n);
float vmax(const float* a, std::size_t n);  // requires n >= 1

// Scalar reference, any arithmetic type. Exact-match float overloads above win
// for float arguments.
template <typename S>
inline void add(S* dst, const S* a, const S* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}
template <typename S>
inline void sub(S* dst, const S* a, const S* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] - b[i];
}
template <typename S>
inline void mul(S* dst, const S* a, const S* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}
template <typename S>
inline void scale(S* dst, const S* a, S s, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] * s;
}
template <typename S>
inline void axpy(S* y, S a, const S* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}
template <typename S>
inline void relu6(S* dst, const S* a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        S v = a[i];
        if (v < S(0)) v = S(0);
        if (v > S(6)) v = S(6);
        dst[i] = v;
    }
}
template <typename S>
inline S dot(const S* a, const S* b, std::size_t n) {
    S acc = S(0);
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}
template <typename S>
inline S vsum(const S* a, std::size_t n) {
    S acc = S(0);
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}
template <typename S>
inline S vmax(const S* a, std::size_t n) {
    S m = a[0];
    for (std::size_t i = 1; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}

}  // namespace ahmf::kernels
