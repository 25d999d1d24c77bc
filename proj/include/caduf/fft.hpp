#pragma once

#include <fftw3.h>

#include <complex>
#include <cstring>
#include <mutex>

#include "caduf/common.hpp"

namespace caduf {

namespace detail {
inline std::mutex& fftw_plan_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace detail

// Complex 2-D FFT of row-major data, out-of-place. FFTW planning is
// serialized (plan creation is not thread-safe); execution is. The
// transform runs on fftw-aligned scratch buffers so the planner picks the
// same codelets every call — heap-dependent alignment would otherwise make
// repeated runs differ in the last bits.
inline void fft2(const std::vector<std::complex<double>>& in,
                 std::vector<std::complex<double>>& out, i64 H, i64 W, bool inverse) {
    check(static_cast<i64>(in.size()) == H * W, "fft2: size mismatch");
    out.resize(in.size());
    fftw_complex* buf_in = fftw_alloc_complex(static_cast<size_t>(H * W));
    fftw_complex* buf_out = fftw_alloc_complex(static_cast<size_t>(H * W));
    if (!buf_in || !buf_out) {
        fftw_free(buf_in);
        fftw_free(buf_out);
        throw numeric_error("fft2: allocation failed");
    }
    std::memcpy(buf_in, in.data(), sizeof(fftw_complex) * static_cast<size_t>(H * W));
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
        plan = fftw_plan_dft_2d(static_cast<int>(H), static_cast<int>(W), buf_in, buf_out,
                                inverse ? FFTW_BACKWARD : FFTW_FORWARD, FFTW_ESTIMATE);
    }
    if (!plan) {
        fftw_free(buf_in);
        fftw_free(buf_out);
        throw numeric_error("fft2: planning failed");
    }
    fftw_execute(plan);
    {
        std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
        fftw_destroy_plan(plan);
    }
    std::memcpy(out.data(), buf_out, sizeof(fftw_complex) * static_cast<size_t>(H * W));
    fftw_free(buf_in);
    fftw_free(buf_out);
    if (inverse) {
        double scale = 1.0 / double(H * W);
        for (auto& v : out) v *= scale;
    }
}

}  // namespace caduf
