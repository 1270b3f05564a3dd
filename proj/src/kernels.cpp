#include "ahmf/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <optional>

#include "ahmf/errors.hpp"

namespace ahmf::kernels {

namespace scalar {

// Scalar float reference. Plain mul-then-add on purpose: the baseline x86-64
// target has no FMA instruction and the AVX2 backend uses separate mul/add, so
// every non-reducing kernel is bit-identical across backends.
static void add(float* dst, const float* a, const float* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}
static void sub(float* dst, const float* a, const float* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] - b[i];
}
static void mul(float* dst, const float* a, const float* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}
static void scale(float* dst, const float* a, float s, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] * s;
}
static void axpy(float* y, float a, const float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        float p = a * x[i];
        y[i] = y[i] + p;
    }
}
static void relu6(float* dst, const float* a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        float v = a[i];
        if (v < 0.0f) v = 0.0f;
        if (v > 6.0f) v = 6.0f;
        dst[i] = v;
    }
}
static float dot(const float* a, const float* b, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}
static float vsum(const float* a, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}
static float vmax(const float* a, std::size_t n) {
    float m = a[0];
    for (std::size_t i = 1; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}

}  // namespace scalar

#if defined(AHMF_HAVE_AVX2)
namespace avx2 {
void add(float* dst, const float* a, const float* b, std::size_t n);
void sub(float* dst, const float* a, const float* b, std::size_t n);
void mul(float* dst, const float* a, const float* b, std::size_t n);
void scale(float* dst, const float* a, float s, std::size_t n);
void axpy(float* y, float a, const float* x, std::size_t n);
void relu6(float* dst, const float* a, std::size_t n);
float dot(const float* a, const float* b, std::size_t n);
float vsum(const float* a, std::size_t n);
float vmax(const float* a, std::size_t n);
}  // namespace avx2
#endif

#if defined(AHMF_HAVE_NEON)
namespace neon {
void add(float* dst, const float* a, const float* b, std::size_t n);
void sub(float* dst, const float* a, const float* b, std::size_t n);
void mul(float* dst, const float* a, const float* b, std::size_t n);
void scale(float* dst, const float* a, float s, std::size_t n);
void axpy(float* y, float a, const float* x, std::size_t n);
void relu6(float* dst, const float* a, std::size_t n);
float dot(const float* a, const float* b, std::size_t n);
float vsum(const float* a, std::size_t n);
float vmax(const float* a, std::size_t n);
}  // namespace neon
#endif

namespace {

struct Table {
    void (*add)(float*, const float*, const float*, std::size_t);
    void (*sub)(float*, const float*, const float*, std::size_t);
    void (*mul)(float*, const float*, const float*, std::size_t);
    void (*scale)(float*, const float*, float, std::size_t);
    void (*axpy)(float*, float, const float*, std::size_t);
    void (*relu6)(float*, const float*, std::size_t);
    float (*dot)(const float*, const float*, std::size_t);
    float (*vsum)(const float*, std::size_t);
    float (*vmax)(const float*, std::size_t);
};

constexpr Table kScalarTable = {scalar::add, scalar::sub,   scalar::mul,
                                scalar::scale, scalar::axpy, scalar::relu6,
                                scalar::dot, scalar::vsum,  scalar::vmax};

#if defined(AHMF_HAVE_AVX2)
constexpr Table kAvx2Table = {avx2::add, avx2::sub,   avx2::mul,
                              avx2::scale, avx2::axpy, avx2::relu6,
                              avx2::dot, avx2::vsum,  avx2::vmax};
#endif
#if defined(AHMF_HAVE_NEON)
constexpr Table kNeonTable = {neon::add, neon::sub,   neon::mul,
                              neon::scale, neon::axpy, neon::relu6,
                              neon::dot, neon::vsum,  neon::vmax};
#endif

bool cpu_has(Backend b) {
    switch (b) {
        case Backend::Scalar:
            return true;
        case Backend::Avx2:
#if defined(AHMF_HAVE_AVX2)
            return __builtin_cpu_supports("avx2") != 0;
#else
            return false;
#endif
        case Backend::Neon:
#if defined(AHMF_HAVE_NEON)
            return true;  // baseline on aarch64
#else
            return false;
#endif
    }
    return false;
}

std::optional<Backend> backend_from_env() {
    const char* v = std::getenv("AHMF_KERNELS");
    if (!v) return std::nullopt;
    if (std::strcmp(v, "scalar") == 0) return Backend::Scalar;
    if (std::strcmp(v, "avx2") == 0) return Backend::Avx2;
    if (std::strcmp(v, "neon") == 0) return Backend::Neon;
    throw ConfigError(std::string("AHMF_KERNELS: unknown backend '") + v +
                      "' (expected scalar, avx2, or neon)");
}

Backend detect() {
    if (auto forced = backend_from_env()) {
        if (!cpu_has(*forced))
            throw ConfigError(std::string("AHMF_KERNELS=") + backend_name(*forced) +
                              " is not supported on this machine");
        return *forced;
    }
    if (cpu_has(Backend::Avx2)) return Backend::Avx2;
    if (cpu_has(Backend::Neon)) return Backend::Neon;
    return Backend::Scalar;
}

const Table& table_for(Backend b) {
    switch (b) {
#if defined(AHMF_HAVE_AVX2)
        case Backend::Avx2:
            return kAvx2Table;
#endif
#if defined(AHMF_HAVE_NEON)
        case Backend::Neon:
            return kNeonTable;
#endif
        default:
            return kScalarTable;
    }
}

// Static-init must not throw; a bad AHMF_KERNELS value is reported later, when
// the CLI (or a test) calls reset_backend() from inside a try block.
Backend detect_quiet() noexcept {
    try {
        return detect();
    } catch (const std::exception&) {
        if (cpu_has(Backend::Avx2)) return Backend::Avx2;
        if (cpu_has(Backend::Neon)) return Backend::Neon;
        return Backend::Scalar;
    }
}

Backend g_backend = detect_quiet();
const Table* g_table = &table_for(g_backend);

}  // namespace

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::Scalar: return "scalar";
        case Backend::Avx2: return "avx2";
        case Backend::Neon: return "neon";
    }
    return "?";
}

bool backend_supported(Backend b) { return cpu_has(b); }

Backend active_backend() { return g_backend; }

void force_backend(Backend b) {
    if (!cpu_has(b))
        throw ConfigError(std::string("kernel backend '") + backend_name(b) +
                          "' is not supported on this machine");
    g_backend = b;
    g_table = &table_for(b);
}

void reset_backend() {
    g_backend = detect();
    g_table = &table_for(g_backend);
}

void add(float* dst, const float* a, const float* b, std::size_t n) { g_table->add(dst, a, b, n); }
void sub(float* dst, const float* a, const float* b, std::size_t n) { g_table->sub(dst, a, b, n); }
void mul(float* dst, const float* a, const float* b, std::size_t n) { g_table->mul(dst, a, b, n); }
void scale(float* dst, const float* a, float s, std::size_t n) { g_table->scale(dst, a, s, n); }
void axpy(float* y, float a, const float* x, std::size_t n) { g_table->axpy(y, a, x, n); }
void relu6(float* dst, const float* a, std::size_t n) { g_table->relu6(dst, a, n); }
float dot(const float* a, const float* b, std::size_t n) { return g_table->dot(a, b, n); }
float vsum(const float* a, std::size_t n) { return g_table->vsum(a, n); }
float vmax(const float* a, std::size_t n) { return g_table->vmax(a, n); }

}  // namespace ahmf::kernels
