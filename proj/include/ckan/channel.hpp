#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ckan/errors.hpp"
#include "ckan/fft.hpp"
#include "ckan/rng.hpp"
#include "ckan/tensor.hpp"

namespace ckan {

inline constexpr double kSpeedOfLight = 299792458.0;  // m/s

// MIMO-OFDM link geometry. The base station carries an n_h x n_v uniform
// planar array (n_t = n_h * n_v elements); the terminal has n_r antennas.
struct SystemConfig {
    std::size_t n_h = 4;
    std::size_t n_v = 2;
    std::size_t n_r = 2;
    std::size_t k_sub = 48;       // subcarrier count
    double f_c = 2.4e9;           // carrier frequency, Hz
    double delta_f = 180e3;       // subcarrier spacing, Hz
    double dt = 0.5e-3;           // frame interval, s

    std::size_t n_t() const { return n_h * n_v; }
    std::size_t pairs() const { return n_t() * n_r; }

    void validate() const {
        if (n_h < 1 || n_v < 1 || n_r < 1 || k_sub < 1)
            throw ConfigError("SystemConfig: antenna/subcarrier counts must be >= 1");
        if (f_c <= 0.0 || delta_f <= 0.0 || dt <= 0.0)
            throw ConfigError("SystemConfig: f_c, delta_f, dt must be positive");
    }

    // Subcarrier grid centered on the carrier: f_k = f_c + (k - (K-1)/2) * delta_f.
    double subcarrier_freq(std::size_t k) const {
        return f_c + (static_cast<double>(k) - (static_cast<double>(k_sub) - 1.0) / 2.0) * delta_f;
    }
};

// One propagation ray: gain magnitude, Doppler shift, delay, initial phase,
// and departure direction (elevation theta, azimuth varphi).
struct PathParams {
    double beta = 0.0;
    double nu = 0.0;
    double tau = 0.0;
    double phi0 = 0.0;
    double theta = 0.0;
    double varphi = 0.0;
};

// Scattering geometry of one link: clusters of rays.
struct ClusterSet {
    std::vector<std::vector<PathParams>> clusters;

    std::size_t ray_count() const {
        std::size_t n = 0;
        for (const auto& c : clusters) n += c.size();
        return n;
    }
};

// UPA steering vector with half-wavelength element spacing:
// a = a_h (x) a_v, a_h[p] = e^{j pi p sin(varphi) cos(theta)},
// a_v[q] = e^{j pi q sin(theta)}. Element (p, q) maps to index p*n_v + q.
inline std::vector<std::complex<double>> steering_vector(double theta, double varphi,
                                                         const SystemConfig& cfg) {
    const double ph = kPi * std::sin(varphi) * std::cos(theta);
    const double pv = kPi * std::sin(theta);
    std::vector<std::complex<double>> a(cfg.n_t());
    for (std::size_t p = 0; p < cfg.n_h; ++p) {
        const std::complex<double> h = std::polar(1.0, ph * static_cast<double>(p));
        for (std::size_t q = 0; q < cfg.n_v; ++q)
            a[p * cfg.n_v + q] = h * std::polar(1.0, pv * static_cast<double>(q));
    }
    return a;
}

// Multipath superposition at time t and subcarrier frequency f_k:
// h(t, f_k) = sum_n sum_m beta e^{j 2 pi (nu t - f_k tau)} e^{j phi0} a(theta, varphi).
inline std::vector<std::complex<double>> channel_vector(double t, double f_k,
                                                        const ClusterSet& clusters,
                                                        const SystemConfig& cfg) {
    std::vector<std::complex<double>> h(cfg.n_t(), {0.0, 0.0});
    for (const auto& cluster : clusters.clusters) {
        for (const PathParams& p : cluster) {
            const double phase = 2.0 * kPi * (p.nu * t - f_k * p.tau) + p.phi0;
            const std::complex<double> gain = p.beta * std::polar(1.0, phase);
            const auto a = steering_vector(p.theta, p.varphi, cfg);
            for (std::size_t i = 0; i < h.size(); ++i) h[i] += gain * a[i];
        }
    }
    return h;
}

// Complex CSI frames over time: shape T_total x K x (n_r * n_t), with
// antenna-pair index a = rx * n_t + tx so each receive antenna owns a
// contiguous block of transmit entries.
struct CsiSequence {
    SystemConfig cfg;
    ComplexTensor frames;

    std::size_t t_total() const { return frames.dim(0); }
    double dt() const { return cfg.dt; }
};

// Deterministic core: one ClusterSet per receive antenna.
inline CsiSequence generate_sequence(const std::vector<ClusterSet>& rx_clusters,
                                     const SystemConfig& cfg, std::size_t t_total) {
    cfg.validate();
    if (t_total < 1) throw ConfigError("generate_sequence: t_total must be >= 1");
    if (rx_clusters.size() != cfg.n_r)
        throw DimensionError("generate_sequence: need one ClusterSet per receive antenna, got " +
                             std::to_string(rx_clusters.size()) + " for n_r=" +
                             std::to_string(cfg.n_r));
    const std::size_t nt = cfg.n_t(), pairs = cfg.pairs();
    ComplexTensor frames(Shape{t_total, cfg.k_sub, pairs});
    for (std::size_t t = 0; t < t_total; ++t) {
        const double ts = static_cast<double>(t) * cfg.dt;
        for (std::size_t k = 0; k < cfg.k_sub; ++k) {
            const double fk = cfg.subcarrier_freq(k);
            for (std::size_t r = 0; r < cfg.n_r; ++r) {
                const auto h = channel_vector(ts, fk, rx_clusters[r], cfg);
                const std::size_t base = (t * cfg.k_sub + k) * pairs + r * nt;
                for (std::size_t p = 0; p < nt; ++p) {
                    frames.re()[base + p] = h[p].real();
                    frames.im()[base + p] = h[p].imag();
                }
            }
        }
    }
    return CsiSequence{cfg, std::move(frames)};
}

// Single shared geometry across receive antennas (degenerate but handy for
// n_r = 1 and oracle tests).
inline CsiSequence generate_sequence(const ClusterSet& clusters, const SystemConfig& cfg,
                                     std::size_t t_total) {
    return generate_sequence(std::vector<ClusterSet>(cfg.n_r, clusters), cfg, t_total);
}

// Statistical stand-in for a full geometry simulator: N_c clusters of M_n
// rays with uniform delays, Doppler nu = nu_max cos(alpha), and gains
// normalized so sum(beta^2) = 1, i.e. E[|h|^2] = n_t over the phase
// ensemble.
inline constexpr std::size_t kDefaultClusterCount = 3;
inline constexpr std::size_t kDefaultRaysPerCluster = 8;

inline ClusterSet sample_clusters(double velocity_mps, const SystemConfig& cfg, Rng& rng) {
    if (velocity_mps < 0.0) throw ConfigError("sample_clusters: velocity must be >= 0");
    const double nu_max = velocity_mps * cfg.f_c / kSpeedOfLight;
    const double tau_max = 0.3 / cfg.delta_f;  // keeps delay energy in the low bins
    ClusterSet set;
    set.clusters.resize(kDefaultClusterCount);
    double power_sum = 0.0;
    for (std::size_t n = 0; n < kDefaultClusterCount; ++n) {
        auto& rays = set.clusters[n];
        rays.resize(kDefaultRaysPerCluster);
        const double cluster_power = std::exp(-static_cast<double>(n));  // exponential decay
        const double cluster_tau = rng.uniform(0.0, tau_max);
        const double cluster_theta = rng.uniform(-kPi / 2.0, kPi / 2.0);
        const double cluster_varphi = rng.uniform(-kPi, kPi);
        for (PathParams& p : rays) {
            p.beta = std::sqrt(cluster_power / static_cast<double>(kDefaultRaysPerCluster));
            power_sum += p.beta * p.beta;
            const double alpha = rng.uniform(0.0, 2.0 * kPi);
            p.nu = nu_max * std::cos(alpha);
            p.tau = cluster_tau + rng.uniform(0.0, tau_max / 20.0);
            p.phi0 = rng.uniform(-kPi, kPi);
            p.theta = cluster_theta + rng.uniform(-0.0873, 0.0873);  // +/- 5 degrees
            double vp = cluster_varphi + rng.uniform(-0.0873, 0.0873);
            if (vp > kPi) vp -= 2.0 * kPi;
            if (vp < -kPi) vp += 2.0 * kPi;
            p.varphi = vp;
        }
    }
    const double norm = 1.0 / std::sqrt(power_sum);
    for (auto& cluster : set.clusters)
        for (PathParams& p : cluster) p.beta *= norm;
    return set;
}

// Seeded convenience wrapper: independent geometry per receive antenna.
inline CsiSequence generate_sequence(double velocity_mps, const SystemConfig& cfg,
                                     std::size_t t_total, std::uint64_t seed) {
    std::vector<ClusterSet> rx_clusters;
    rx_clusters.reserve(cfg.n_r);
    for (std::size_t r = 0; r < cfg.n_r; ++r) {
        Rng rng = Rng::derive(seed, "clusters", r);
        rx_clusters.push_back(sample_clusters(velocity_mps, cfg, rng));
    }
    return generate_sequence(rx_clusters, cfg, t_total);
}

// Additive circularly-symmetric complex Gaussian noise at the requested
// per-sequence SNR. snr_db = +infinity means clean (returns a copy).
inline CsiSequence add_noise(const CsiSequence& seq, double snr_db, Rng& rng) {
    if (std::isnan(snr_db)) throw ConfigError("add_noise: snr_db must not be NaN");
    CsiSequence out = seq;
    if (std::isinf(snr_db) && snr_db > 0.0) return out;
    const std::size_t n = seq.frames.numel();
    if (n == 0) return out;
    const double signal_power = seq.frames.energy() / static_cast<double>(n);
    const double noise_power = signal_power / std::pow(10.0, snr_db / 10.0);
    const double s = std::sqrt(noise_power / 2.0);
    for (std::size_t i = 0; i < n; ++i) {
        out.frames.re()[i] += s * rng.normal();
        out.frames.im()[i] += s * rng.normal();
    }
    return out;
}

// One training sample: T history frames and the following L future frames.
struct WindowedSample {
    ComplexTensor history;  // T x K x pairs
    ComplexTensor future;   // L x K x pairs
};

// Sliding windows over one sequence. Count = floor((T_total - T - L)/stride) + 1.
inline std::vector<WindowedSample> window(const CsiSequence& seq, std::size_t t_hist,
                                          std::size_t l_fut, std::size_t stride) {
    if (t_hist < 1 || l_fut < 1 || stride < 1)
        throw ConfigError("window: T, L, stride must be >= 1");
    const std::size_t total = seq.t_total();
    if (t_hist + l_fut > total)
        throw DataError("window: T+L = " + std::to_string(t_hist + l_fut) +
                        " exceeds sequence length " + std::to_string(total));
    const std::size_t frame = seq.frames.dim(1) * seq.frames.dim(2);
    const std::size_t count = (total - t_hist - l_fut) / stride + 1;
    std::vector<WindowedSample> out;
    out.reserve(count);
    for (std::size_t w = 0; w < count; ++w) {
        const std::size_t start = w * stride;
        ComplexTensor hist(Shape{t_hist, seq.frames.dim(1), seq.frames.dim(2)});
        ComplexTensor fut(Shape{l_fut, seq.frames.dim(1), seq.frames.dim(2)});
        for (std::size_t i = 0; i < t_hist * frame; ++i) {
            hist.re()[i] = seq.frames.re()[start * frame + i];
            hist.im()[i] = seq.frames.im()[start * frame + i];
        }
        for (std::size_t i = 0; i < l_fut * frame; ++i) {
            fut.re()[i] = seq.frames.re()[(start + t_hist) * frame + i];
            fut.im()[i] = seq.frames.im()[(start + t_hist) * frame + i];
        }
        out.push_back(WindowedSample{std::move(hist), std::move(fut)});
    }
    return out;
}

}  // namespace ckan
