#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "ckan/tensor.hpp"

namespace ckan {

inline constexpr double kPi = 3.14159265358979323846264338327950288;

namespace detail {

inline constexpr double kTwoPi = 2.0 * kPi;

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// In-place unnormalized complex DFT of one contiguous line.
// sign = -1 forward, +1 inverse.
inline void dft_line_radix2(double* re, double* im, std::size_t n, double sign) {
    // Bit-reversal permutation.
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * kTwoPi / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (std::size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::size_t a = i + j, b = i + j + len / 2;
                const double tr = re[b] * cr - im[b] * ci;
                const double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

inline void dft_line_naive(double* re, double* im, std::size_t n, double sign) {
    std::vector<double> or_(n, 0.0), oi(n, 0.0);
    for (std::size_t f = 0; f < n; ++f) {
        double ar = 0.0, ai = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
            const double ang = sign * kTwoPi * static_cast<double>((f * t) % n) /
                               static_cast<double>(n);
            const double c = std::cos(ang), s = std::sin(ang);
            ar += re[t] * c - im[t] * s;
            ai += re[t] * s + im[t] * c;
        }
        or_[f] = ar;
        oi[f] = ai;
    }
    for (std::size_t i = 0; i < n; ++i) {
        re[i] = or_[i];
        im[i] = oi[i];
    }
}

inline void dft_line(double* re, double* im, std::size_t n, bool inverse) {
    if (n == 1) return;
    const double sign = inverse ? 1.0 : -1.0;
    if (is_pow2(n))
        dft_line_radix2(re, im, n, sign);
    else
        dft_line_naive(re, im, n, sign);
}

}  // namespace detail

// Unitary DFT along one axis (1/sqrt(n) in both directions, so norms are
// preserved and forward/inverse are exact adjoints).
inline ComplexTensor dft_k(const ComplexTensor& x, std::size_t axis, bool inverse) {
    if (axis >= x.rank())
        throw DimensionError("dft_k: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(x.shape()));
    const std::size_t n = x.dim(axis);
    ComplexTensor out = x;
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);

    std::vector<double> lre(n), lim(n);
    const double norm = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            for (std::size_t k = 0; k < n; ++k) {
                lre[k] = out.re()[base + k * inner];
                lim[k] = out.im()[base + k * inner];
            }
            detail::dft_line(lre.data(), lim.data(), n, inverse);
            for (std::size_t k = 0; k < n; ++k) {
                out.re()[base + k * inner] = lre[k] * norm;
                out.im()[base + k * inner] = lim[k] * norm;
            }
        }
    }
    return out;
}

// Real-input DFT of each column of a T x C matrix, keeping the
// floor(T/2)+1 non-negative-frequency bins. Forward bins are plain DFT
// sums; irfft_t carries the 1/T.
inline ComplexTensor rfft_t(const Tensor& z) {
    if (z.rank() != 2) throw DimensionError("rfft_t: expected T x C input, got " + shape_str(z.shape()));
    const std::size_t t_len = z.dim(0), cols = z.dim(1);
    if (t_len < 1) throw DimensionError("rfft_t: empty time axis");
    const std::size_t bins = t_len / 2 + 1;
    ComplexTensor out(Shape{bins, cols});
    std::vector<double> lre(t_len), lim(t_len);
    for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t t = 0; t < t_len; ++t) {
            lre[t] = z.at2(t, c);
            lim[t] = 0.0;
        }
        detail::dft_line(lre.data(), lim.data(), t_len, false);
        for (std::size_t f = 0; f < bins; ++f) {
            out.re().at2(f, c) = lre[f];
            out.im().at2(f, c) = lim[f];
        }
    }
    return out;
}

// Inverse of rfft_t. Bin 0 (and the Nyquist bin when T is even) are taken
// as real-valued; their imaginary parts are ignored.
inline Tensor irfft_t(const ComplexTensor& s, std::size_t t_len) {
    if (s.rank() != 2)
        throw DimensionError("irfft_t: expected bins x C input, got " + shape_str(s.shape()));
    const std::size_t bins = t_len / 2 + 1, cols = s.dim(1);
    if (s.dim(0) != bins)
        throw DimensionError("irfft_t: " + std::to_string(s.dim(0)) + " bins inconsistent with T=" +
                             std::to_string(t_len));
    Tensor out(Shape{t_len, cols});
    const bool even = (t_len % 2 == 0);
    const std::size_t half = even ? t_len / 2 : bins;  // exclusive upper bin for doubled terms
    const double inv_t = 1.0 / static_cast<double>(t_len);
    for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t t = 0; t < t_len; ++t) {
            double acc = s.re().at2(0, c);
            for (std::size_t f = 1; f < half; ++f) {
                const double ang = detail::kTwoPi * static_cast<double>((f * t) % t_len) * inv_t;
                acc += 2.0 * (s.re().at2(f, c) * std::cos(ang) - s.im().at2(f, c) * std::sin(ang));
            }
            if (even) {
                const double nyq = (t % 2 == 0) ? 1.0 : -1.0;
                acc += s.re().at2(bins - 1, c) * nyq;
            }
            out.at2(t, c) = acc * inv_t;
        }
    }
    return out;
}

}  // namespace ckan
