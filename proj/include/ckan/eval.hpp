#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ckan/channel.hpp"
#include "ckan/dataset.hpp"
#include "ckan/errors.hpp"
#include "ckan/model.hpp"
#include "ckan/rng.hpp"
#include "ckan/tensor.hpp"
#include "ckan/train.hpp"

namespace ckan {

// Gaussian tail probability Q(x) = P(N(0,1) > x).
inline double q_func(double x) { return 0.5 * std::erfc(x * 0.7071067811865475244); }

inline double median(std::vector<double> v) {
    if (v.empty()) throw DataError("median: empty vector");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One experiment-grid cell's outcome.
struct MetricReport {
    double velocity_kmh = 0.0;
    double snr_db = 0.0;
    std::string variant;  // full | no-multiscale | no-cnnkan | no-dualdomain | no-kan | hold | ar4
    std::uint64_t seed = 0;
    double nmse = 0.0;
    double se_bps_hz = 0.0;
    double ber = 0.0;
    double train_seconds = 0.0;
};

using PredictFn = std::function<ComplexTensor(const ComplexTensor& history)>;

// Mean per-sample NMSE of a predictor; zero-norm truths are excluded and
// counted instead of crashing the sweep.
inline double eval_nmse(const PredictFn& predict, const std::vector<WindowedSample>& samples,
                        std::size_t* skipped = nullptr) {
    if (samples.empty()) throw DataError("eval_nmse: empty test set");
    double acc = 0.0;
    std::size_t used = 0, zero_truths = 0;
    for (const WindowedSample& s : samples) {
        if (s.future.energy() == 0.0) {
            zero_truths += 1;
            continue;
        }
        acc += nmse(predict(s.history), s.future);
        used += 1;
    }
    if (skipped) *skipped = zero_truths;
    if (used == 0) throw NumericError("eval_nmse: every truth sample has zero norm");
    return acc / static_cast<double>(used);
}

// ---- link-level metrics ----

// Mean over (step, subcarrier, receive antenna) of log2(1 + rho |h^H w|^2)
// where w is the MRT beam built from the PREDICTED channel and h is the
// TRUE channel. A zero predicted vector falls back to a uniform beam.
inline double spectral_efficiency(const ComplexTensor& pred, const ComplexTensor& truth,
                                  double snr_db, std::size_t n_t,
                                  std::size_t* zero_beams = nullptr) {
    if (!pred.re().same_shape(truth.re()))
        throw DimensionError("spectral_efficiency: shape mismatch");
    if (pred.rank() != 3 || pred.dim(2) % n_t != 0)
        throw DimensionError("spectral_efficiency: antenna-pair axis not divisible by n_t");
    const std::size_t steps = pred.dim(0), k_sub = pred.dim(1), n_r = pred.dim(2) / n_t;
    const double rho = std::pow(10.0, snr_db / 10.0);
    double acc = 0.0;
    std::size_t fallbacks = 0;
    for (std::size_t l = 0; l < steps; ++l)
        for (std::size_t k = 0; k < k_sub; ++k)
            for (std::size_t r = 0; r < n_r; ++r) {
                const std::size_t base = (l * k_sub + k) * pred.dim(2) + r * n_t;
                double pnorm2 = 0.0;
                for (std::size_t p = 0; p < n_t; ++p)
                    pnorm2 += pred.re()[base + p] * pred.re()[base + p] +
                              pred.im()[base + p] * pred.im()[base + p];
                std::complex<double> g{0.0, 0.0};
                if (pnorm2 > 0.0) {
                    const double inv = 1.0 / std::sqrt(pnorm2);
                    for (std::size_t p = 0; p < n_t; ++p) {
                        const std::complex<double> h{truth.re()[base + p], truth.im()[base + p]};
                        const std::complex<double> w{pred.re()[base + p] * inv,
                                                     pred.im()[base + p] * inv};
                        g += std::conj(h) * w;
                    }
                } else {
                    fallbacks += 1;
                    const double inv = 1.0 / std::sqrt(static_cast<double>(n_t));
                    for (std::size_t p = 0; p < n_t; ++p)
                        g += std::conj(std::complex<double>{truth.re()[base + p],
                                                            truth.im()[base + p]}) *
                             inv;
                }
                acc += std::log2(1.0 + rho * std::norm(g));
            }
    if (zero_beams) *zero_beams = fallbacks;
    return acc / static_cast<double>(steps * k_sub * n_r);
}

// Closed-form QPSK bit error rate of the beamformed link, averaged over
// cells: with effective gain g = h^H w = a + jb and per-dimension noise
// std sqrt(1/(2 rho)), BER_cell = (Q((a-b) sqrt(rho)) + Q((a+b) sqrt(rho)))/2.
// For pred == truth this reduces to Q(sqrt(rho |h|^2)).
inline double qpsk_ber_oracle(const ComplexTensor& pred, const ComplexTensor& truth, double snr_db,
                              std::size_t n_t) {
    if (!pred.re().same_shape(truth.re()))
        throw DimensionError("qpsk_ber_oracle: shape mismatch");
    const std::size_t steps = pred.dim(0), k_sub = pred.dim(1), n_r = pred.dim(2) / n_t;
    const double sqrt_rho = std::sqrt(std::pow(10.0, snr_db / 10.0));
    double acc = 0.0;
    for (std::size_t l = 0; l < steps; ++l)
        for (std::size_t k = 0; k < k_sub; ++k)
            for (std::size_t r = 0; r < n_r; ++r) {
                const std::size_t base = (l * k_sub + k) * pred.dim(2) + r * n_t;
                double pnorm2 = 0.0;
                for (std::size_t p = 0; p < n_t; ++p)
                    pnorm2 += pred.re()[base + p] * pred.re()[base + p] +
                              pred.im()[base + p] * pred.im()[base + p];
                const double inv = pnorm2 > 0.0 ? 1.0 / std::sqrt(pnorm2)
                                                : 1.0 / std::sqrt(static_cast<double>(n_t));
                std::complex<double> g{0.0, 0.0};
                for (std::size_t p = 0; p < n_t; ++p) {
                    const std::complex<double> h{truth.re()[base + p], truth.im()[base + p]};
                    const std::complex<double> w =
                        pnorm2 > 0.0
                            ? std::complex<double>{pred.re()[base + p] * inv,
                                                   pred.im()[base + p] * inv}
                            : std::complex<double>{inv, 0.0};
                    g += std::conj(h) * w;
                }
                acc += 0.5 * (q_func((g.real() - g.imag()) * sqrt_rho) +
                              q_func((g.real() + g.imag()) * sqrt_rho));
            }
    return acc / static_cast<double>(steps * k_sub * n_r);
}

// Monte-Carlo QPSK over the beamformed link: beam from the predicted CSI,
// propagation through the true CSI, additive complex Gaussian noise at
// snr_db. Cells are visited round-robin; decisions are quadrant decisions
// (the predicted effective gain is real and positive, so no rotation is
// applied at the receiver).
inline double bit_error_rate(const ComplexTensor& pred, const ComplexTensor& truth, double snr_db,
                             std::size_t n_bits, Rng& rng, std::size_t n_t) {
    if (n_bits < 1000) throw ConfigError("bit_error_rate: need at least 1000 bits");
    if (!pred.re().same_shape(truth.re()))
        throw DimensionError("bit_error_rate: shape mismatch");
    const std::size_t steps = pred.dim(0), k_sub = pred.dim(1), n_r = pred.dim(2) / n_t;
    const std::size_t cells = steps * k_sub * n_r;
    const double rho = std::pow(10.0, snr_db / 10.0);
    const double noise_std = std::sqrt(0.5 / rho);
    const double amp = 1.0 / std::sqrt(2.0);

    // Effective complex gains per cell, computed once.
    std::vector<std::complex<double>> gains(cells);
    std::size_t cell = 0;
    for (std::size_t l = 0; l < steps; ++l)
        for (std::size_t k = 0; k < k_sub; ++k)
            for (std::size_t r = 0; r < n_r; ++r, ++cell) {
                const std::size_t base = (l * k_sub + k) * pred.dim(2) + r * n_t;
                double pnorm2 = 0.0;
                for (std::size_t p = 0; p < n_t; ++p)
                    pnorm2 += pred.re()[base + p] * pred.re()[base + p] +
                              pred.im()[base + p] * pred.im()[base + p];
                const double inv = pnorm2 > 0.0 ? 1.0 / std::sqrt(pnorm2)
                                                : 1.0 / std::sqrt(static_cast<double>(n_t));
                std::complex<double> g{0.0, 0.0};
                for (std::size_t p = 0; p < n_t; ++p) {
                    const std::complex<double> h{truth.re()[base + p], truth.im()[base + p]};
                    const std::complex<double> w =
                        pnorm2 > 0.0
                            ? std::complex<double>{pred.re()[base + p] * inv,
                                                   pred.im()[base + p] * inv}
                            : std::complex<double>{inv, 0.0};
                    g += std::conj(h) * w;
                }
                gains[cell] = g;
            }

    const std::size_t symbols = n_bits / 2;
    std::size_t errors = 0;
    for (std::size_t s = 0; s < symbols; ++s) {
        const std::complex<double>& g = gains[s % cells];
        const double i_bit = rng.below(2) ? -1.0 : 1.0;
        const double q_bit = rng.below(2) ? -1.0 : 1.0;
        const std::complex<double> sym{amp * i_bit, amp * q_bit};
        const std::complex<double> y =
            g * sym + std::complex<double>{noise_std * rng.normal(), noise_std * rng.normal()};
        if ((y.real() < 0.0) != (i_bit < 0.0)) errors += 1;
        if ((y.imag() < 0.0) != (q_bit < 0.0)) errors += 1;
    }
    return static_cast<double>(errors) / static_cast<double>(2 * symbols);
}

// ---- baselines ----

// Classical predictors standing in for learned baselines: zero-order hold
// and a per-feature complex autoregressive model.
struct BaselinePredictor {
    enum class Kind { kHold, kLinearAr };
    Kind kind = Kind::kHold;
    std::size_t order = 0;
    std::size_t l_fut = 1;
    std::size_t fallback_count = 0;  // features where the LS system was rank-deficient
    std::vector<std::vector<std::complex<double>>> coeffs;  // per feature, length `order`

    ComplexTensor predict(const ComplexTensor& history) const {
        const std::size_t t = history.dim(0), features = history.dim(1) * history.dim(2);
        ComplexTensor out(Shape{l_fut, history.dim(1), history.dim(2)});
        if (kind == Kind::kHold) {
            for (std::size_t l = 0; l < l_fut; ++l)
                for (std::size_t f = 0; f < features; ++f) {
                    out.re()[l * features + f] = history.re()[(t - 1) * features + f];
                    out.im()[l * features + f] = history.im()[(t - 1) * features + f];
                }
            return out;
        }
        if (coeffs.size() != features)
            throw DimensionError("BaselinePredictor: fitted feature count " +
                                 std::to_string(coeffs.size()) + " vs input " +
                                 std::to_string(features));
        for (std::size_t f = 0; f < features; ++f) {
            std::vector<std::complex<double>> recent(order);
            for (std::size_t i = 0; i < order; ++i)
                recent[i] = {history.re()[(t - 1 - i) * features + f],
                             history.im()[(t - 1 - i) * features + f]};
            for (std::size_t l = 0; l < l_fut; ++l) {
                std::complex<double> next{0.0, 0.0};
                for (std::size_t i = 0; i < order; ++i) next += coeffs[f][i] * recent[i];
                out.re()[l * features + f] = next.real();
                out.im()[l * features + f] = next.imag();
                for (std::size_t i = order; i-- > 1;) recent[i] = recent[i - 1];
                recent[0] = next;
            }
        }
        return out;
    }

    PredictFn fn() const {
        return [*this](const ComplexTensor& h) { return predict(h); };
    }
};

inline BaselinePredictor make_hold(std::size_t l_fut) {
    BaselinePredictor p;
    p.kind = BaselinePredictor::Kind::kHold;
    p.l_fut = l_fut;
    return p;
}

namespace detail {

// Gaussian elimination with partial pivoting on a small complex system.
// Returns false when a pivot collapses (rank deficiency).
inline bool solve_complex(std::vector<std::vector<std::complex<double>>> a,
                          std::vector<std::complex<double>> b,
                          std::vector<std::complex<double>>& x) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        if (std::abs(a[pivot][col]) < 1e-150) return false;
        std::swap(a[col], a[pivot]);
        std::swap(b[col], b[pivot]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const std::complex<double> factor = a[r][col] / a[col][col];
            for (std::size_t c = col; c < n; ++c) a[r][c] -= factor * a[col][c];
            b[r] -= factor * b[col];
        }
    }
    x.assign(n, {0.0, 0.0});
    for (std::size_t row = n; row-- > 0;) {
        std::complex<double> acc = b[row];
        for (std::size_t c = row + 1; c < n; ++c) acc -= a[row][c] * x[c];
        x[row] = acc / a[row][row];
    }
    return true;
}

}  // namespace detail

// Per-feature complex AR(p) by ridge-regularized least squares over the
// history windows of the training set; prediction rolls forward L steps.
// Rank-deficient features fall back to hold coefficients and are counted.
inline BaselinePredictor fit_linear_ar(const std::vector<WindowedSample>& train_set,
                                       std::size_t order, std::size_t l_fut,
                                       double ridge = 1e-6) {
    if (order < 1) throw ConfigError("fit_linear_ar: order must be >= 1");
    if (train_set.empty()) throw DataError("fit_linear_ar: empty training set");
    const std::size_t t = train_set[0].history.dim(0);
    if (order >= t)
        throw ConfigError("fit_linear_ar: order " + std::to_string(order) +
                          " must be below history length " + std::to_string(t));
    const std::size_t features = train_set[0].history.dim(1) * train_set[0].history.dim(2);

    BaselinePredictor p;
    p.kind = BaselinePredictor::Kind::kLinearAr;
    p.order = order;
    p.l_fut = l_fut;
    p.coeffs.resize(features);

    for (std::size_t f = 0; f < features; ++f) {
        // Normal equations (A^H A + ridge I) c = A^H y over all usable rows.
        std::vector<std::vector<std::complex<double>>> g(
            order, std::vector<std::complex<double>>(order, {0.0, 0.0}));
        std::vector<std::complex<double>> rhs(order, {0.0, 0.0});
        for (const WindowedSample& s : train_set) {
            for (std::size_t row = order; row < t; ++row) {
                std::vector<std::complex<double>> x(order);
                for (std::size_t i = 0; i < order; ++i)
                    x[i] = {s.history.re()[(row - 1 - i) * features + f],
                            s.history.im()[(row - 1 - i) * features + f]};
                const std::complex<double> y{s.history.re()[row * features + f],
                                             s.history.im()[row * features + f]};
                for (std::size_t i = 0; i < order; ++i) {
                    for (std::size_t j = 0; j < order; ++j) g[i][j] += std::conj(x[i]) * x[j];
                    rhs[i] += std::conj(x[i]) * y;
                }
            }
        }
        for (std::size_t i = 0; i < order; ++i) g[i][i] += ridge;
        std::vector<std::complex<double>> c;
        if (detail::solve_complex(std::move(g), std::move(rhs), c)) {
            p.coeffs[f] = std::move(c);
        } else {
            p.coeffs[f].assign(order, {0.0, 0.0});
            p.coeffs[f][0] = {1.0, 0.0};  // degrade to hold
            p.fallback_count += 1;
        }
    }
    return p;
}

// ---- experiment grid ----

struct GridSpec {
    SystemConfig sys;
    ModelConfig model;  // k_sub/pairs must match sys
    TrainConfig train;
    std::vector<double> velocities_kmh = {10.0, 60.0, 100.0};
    std::vector<double> snrs_db = {10.0};
    std::vector<std::string> variants = {"full", "hold", "ar4"};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::size_t train_windows = 800;
    std::size_t val_windows = 100;
    std::size_t test_windows = 100;
    std::size_t ber_bits = 100000;
    std::size_t jobs = 1;  // worker threads over (velocity, snr, seed) conditions
    std::string out_dir;   // empty: no persistence / no resume
};

struct SplitDataset {
    std::vector<WindowedSample> train;
    std::vector<WindowedSample> val;
    std::vector<WindowedSample> test;
};

inline ModelConfig apply_variant(ModelConfig cfg, const std::string& variant) {
    if (variant == "full") return cfg;
    if (variant == "no-multiscale") {
        cfg.use_multiscale = false;
        return cfg;
    }
    if (variant == "no-cnnkan") {
        cfg.use_cnn_kan = false;
        return cfg;
    }
    if (variant == "no-dualdomain") {
        cfg.use_dual_domain = false;
        return cfg;
    }
    if (variant == "no-kan") {
        cfg.use_kan = false;
        return cfg;
    }
    throw ConfigError("unknown model variant: " + variant);
}

inline bool is_model_variant(const std::string& variant) {
    return variant == "full" || variant == "no-multiscale" || variant == "no-cnnkan" ||
           variant == "no-dualdomain" || variant == "no-kan";
}

// One long sequence per (velocity, seed); train/val/test are disjoint time
// segments of it. Histories come from the noisy copy, futures stay clean.
inline SplitDataset make_split(const GridSpec& spec, double velocity_kmh, double snr_db,
                               std::uint64_t seed) {
    const std::size_t t = spec.model.t_hist, l = spec.model.l_fut;
    const std::size_t span = t + l - 1;
    const std::size_t frames_train = spec.train_windows + span;
    const std::size_t frames_val = spec.val_windows + span;
    const std::size_t frames_test = spec.test_windows + span;
    const std::size_t total = frames_train + frames_val + frames_test;

    const double velocity_mps = velocity_kmh / 3.6;
    const CsiSequence clean = generate_sequence(velocity_mps, spec.sys, total, seed);
    Rng noise_rng = Rng::derive(seed, "noise", 0);
    const CsiSequence noisy = add_noise(clean, snr_db, noise_rng);

    const std::vector<WindowedSample> wins_clean = window(clean, t, l, 1);
    const std::vector<WindowedSample> wins_noisy = window(noisy, t, l, 1);

    auto take = [&](std::size_t first, std::size_t count) {
        std::vector<WindowedSample> out;
        out.reserve(count);
        for (std::size_t w = first; w < first + count; ++w)
            out.push_back(WindowedSample{wins_noisy[w].history, wins_clean[w].future});
        return out;
    };
    SplitDataset split;
    split.train = take(0, spec.train_windows);
    split.val = take(frames_train, spec.val_windows);
    split.test = take(frames_train + frames_val, spec.test_windows);
    return split;
}

// Metrics of a predictor over a test set: mean NMSE (zero truths skipped),
// mean SE, and Monte-Carlo BER aggregated round-robin over up to 20 samples.
inline MetricReport evaluate_predictor(const PredictFn& predict,
                                       const std::vector<WindowedSample>& test, double snr_db,
                                       std::size_t n_t, std::size_t ber_bits, Rng& ber_rng) {
    MetricReport r;
    r.snr_db = snr_db;
    r.nmse = eval_nmse(predict, test, nullptr);
    double se = 0.0;
    for (const WindowedSample& s : test)
        se += spectral_efficiency(predict(s.history), s.future, snr_db, n_t);
    r.se_bps_hz = se / static_cast<double>(test.size());
    const std::size_t ber_samples = std::min<std::size_t>(test.size(), 20);
    const std::size_t bits_per = std::max<std::size_t>(ber_bits / ber_samples, 1000);
    double errors = 0.0, bits = 0.0;
    for (std::size_t i = 0; i < ber_samples; ++i) {
        const WindowedSample& s = test[i];
        errors += bit_error_rate(predict(s.history), s.future, snr_db, bits_per, ber_rng, n_t) *
                  static_cast<double>(bits_per);
        bits += static_cast<double>(bits_per);
    }
    r.ber = errors / bits;
    return r;
}

// Train (when the variant is a model) and evaluate one grid cell.
inline MetricReport run_cell(const GridSpec& spec, double velocity_kmh, double snr_db,
                             const std::string& variant, std::uint64_t seed,
                             const SplitDataset& split) {
    Rng ber_rng = Rng::derive(seed, "ber", 0);
    MetricReport r;
    if (variant == "hold") {
        const BaselinePredictor hold = make_hold(spec.model.l_fut);
        r = evaluate_predictor(hold.fn(), split.test, snr_db, spec.sys.n_t(), spec.ber_bits,
                               ber_rng);
    } else if (variant == "ar4") {
        const BaselinePredictor ar = fit_linear_ar(split.train, 4, spec.model.l_fut);
        r = evaluate_predictor(ar.fn(), split.test, snr_db, spec.sys.n_t(), spec.ber_bits,
                               ber_rng);
    } else if (is_model_variant(variant)) {
        const ModelConfig cfg = apply_variant(spec.model, variant);
        ModelParams params = init_params(cfg, Rng::derive(seed, "params", 0).next_u64());
        TrainConfig tc = spec.train;
        tc.seed = Rng::derive(seed, "train", 0).next_u64();
        const TrainReport rep = train(params, cfg, split.train, split.val, tc);
        const ModelParams& best = rep.best_params;
        r = evaluate_predictor(
            [&best, &cfg](const ComplexTensor& h) { return forward(best, cfg, h); }, split.test,
            snr_db, spec.sys.n_t(), spec.ber_bits, ber_rng);
        for (double s : rep.seconds) r.train_seconds += s;
    } else {
        throw ConfigError("unknown grid variant: " + variant);
    }
    r.velocity_kmh = velocity_kmh;
    r.snr_db = snr_db;
    r.variant = variant;
    r.seed = seed;
    return r;
}

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string cell_stem(double velocity_kmh, double snr_db, const std::string& variant,
                             std::uint64_t seed) {
    return "cell_v" + fmt_double(velocity_kmh) + "_snr" + fmt_double(snr_db) + "_" + variant +
           "_s" + std::to_string(seed);
}

}  // namespace detail

inline nlohmann::json report_to_json(const MetricReport& r) {
    return nlohmann::json{{"velocity_kmh", r.velocity_kmh}, {"snr_db", r.snr_db},
                          {"variant", r.variant},           {"seed", r.seed},
                          {"nmse", r.nmse},                 {"se_bps_hz", r.se_bps_hz},
                          {"ber", r.ber},                   {"train_seconds", r.train_seconds}};
}

inline MetricReport report_from_json(const nlohmann::json& j) {
    MetricReport r;
    r.velocity_kmh = j.at("velocity_kmh").get<double>();
    r.snr_db = j.at("snr_db").get<double>();
    r.variant = j.at("variant").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.nmse = j.at("nmse").get<double>();
    r.se_bps_hz = j.at("se_bps_hz").get<double>();
    r.ber = j.at("ber").get<double>();
    r.train_seconds = j.at("train_seconds").get<double>();
    return r;
}

struct GridOutcome {
    std::vector<MetricReport> reports;
    std::vector<std::string> failures;  // "cell: error message"
    std::size_t resumed_cells = 0;
};

// Sweep velocities x snrs x variants x seeds. Datasets are shared across
// variants of a cell condition. With an out_dir, each finished cell is
// persisted as JSON and skipped on rerun (resume); per-cell failures are
// collected without aborting the sweep. Conditions are independent, so
// `jobs` worker threads may process them concurrently; results land in
// preallocated slots, keeping the report order identical to a serial run.
inline GridOutcome run_experiment_grid(const GridSpec& spec) {
    if (spec.model.k_sub != spec.sys.k_sub || spec.model.pairs != spec.sys.pairs())
        throw ConfigError("run_experiment_grid: model dims (K=" + std::to_string(spec.model.k_sub) +
                          ", A=" + std::to_string(spec.model.pairs) +
                          ") disagree with system config (K=" + std::to_string(spec.sys.k_sub) +
                          ", A=" + std::to_string(spec.sys.pairs()) + ")");
    const bool persist = !spec.out_dir.empty();
    std::filesystem::path cell_dir;
    if (persist) {
        cell_dir = std::filesystem::path(spec.out_dir) / "cells";
        std::filesystem::create_directories(cell_dir);
    }

    struct Condition {
        double v, snr;
        std::uint64_t seed;
    };
    std::vector<Condition> conditions;
    for (double v : spec.velocities_kmh)
        for (double snr : spec.snrs_db)
            for (std::uint64_t seed : spec.seeds) conditions.push_back({v, snr, seed});

    struct CellSlot {
        MetricReport report;
        std::string failure;
        bool resumed = false;
    };
    std::vector<std::vector<CellSlot>> slots(conditions.size());

    auto run_condition = [&](std::size_t ci) {
        const Condition& c = conditions[ci];
        std::vector<CellSlot>& row = slots[ci];
        row.resize(spec.variants.size());
        bool have_split = false;
        SplitDataset split;
        for (std::size_t vi = 0; vi < spec.variants.size(); ++vi) {
            CellSlot& slot = row[vi];
            const std::string stem = detail::cell_stem(c.v, c.snr, spec.variants[vi], c.seed);
            const std::filesystem::path cell_path = cell_dir / (stem + ".json");
            try {
                if (persist && std::filesystem::exists(cell_path)) {
                    std::ifstream in(cell_path);
                    nlohmann::json j;
                    in >> j;
                    slot.report = report_from_json(j);
                    slot.resumed = true;
                    continue;
                }
                if (!have_split) {
                    split = make_split(spec, c.v, c.snr, c.seed);
                    have_split = true;
                }
                slot.report = run_cell(spec, c.v, c.snr, spec.variants[vi], c.seed, split);
                if (persist) {
                    std::ofstream o(cell_path);
                    o << report_to_json(slot.report).dump(2) << "\n";
                }
            } catch (const std::exception& e) {
                slot.failure = stem + ": " + e.what();
            }
        }
    };

    const std::size_t jobs =
        std::max<std::size_t>(1, std::min(spec.jobs, std::max<std::size_t>(conditions.size(), 1)));
    if (jobs == 1) {
        for (std::size_t ci = 0; ci < conditions.size(); ++ci) run_condition(ci);
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t ci; (ci = next.fetch_add(1)) < conditions.size();) run_condition(ci);
        };
        std::vector<std::thread> pool;
        pool.reserve(jobs);
        for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }

    GridOutcome out;
    for (const std::vector<CellSlot>& row : slots)
        for (const CellSlot& slot : row) {
            if (!slot.failure.empty()) {
                out.failures.push_back(slot.failure);
            } else {
                out.reports.push_back(slot.report);
                if (slot.resumed) out.resumed_cells += 1;
            }
        }
    return out;
}

// One row per cell; doubles at full precision so reruns compare bytewise.
inline void write_reports_csv(const std::vector<MetricReport>& reports, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out << "velocity_kmh,snr_db,variant,seed,nmse,se_bps_hz,ber,train_seconds\n";
    for (const MetricReport& r : reports)
        out << detail::fmt_double(r.velocity_kmh) << "," << detail::fmt_double(r.snr_db) << ","
            << r.variant << "," << r.seed << "," << detail::fmt_double(r.nmse) << ","
            << detail::fmt_double(r.se_bps_hz) << "," << detail::fmt_double(r.ber) << ","
            << detail::fmt_double(r.train_seconds) << "\n";
}

// One row per model variant present, medians taken across all of its cells.
// The canonical row order puts the full model first, then the ablations.
inline void write_ablation_csv(const std::vector<MetricReport>& reports, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out << "variant,cells,median_nmse,median_se_bps_hz,median_ber\n";
    for (const char* variant :
         {"full", "no-multiscale", "no-cnnkan", "no-dualdomain", "no-kan"}) {
        std::vector<double> nmse, se, ber;
        for (const MetricReport& r : reports)
            if (r.variant == variant) {
                nmse.push_back(r.nmse);
                se.push_back(r.se_bps_hz);
                ber.push_back(r.ber);
            }
        if (nmse.empty()) continue;
        out << variant << "," << nmse.size() << "," << detail::fmt_double(median(nmse)) << ","
            << detail::fmt_double(median(se)) << "," << detail::fmt_double(median(ber)) << "\n";
    }
}

// Long-format curve data: the seed-median NMSE per condition and variant,
// keyed by the swept axis.
inline void write_curve_csv(const std::vector<MetricReport>& reports, const std::string& axis,
                            const std::string& path) {
    std::map<std::tuple<double, double, std::string>, std::vector<double>> groups;
    for (const MetricReport& r : reports)
        groups[{r.velocity_kmh, r.snr_db, r.variant}].push_back(r.nmse);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out << axis << ",velocity_kmh,snr_db,variant,median_nmse\n";
    for (const auto& [key, values] : groups) {
        const auto& [v, snr, variant] = key;
        const double axis_value = axis == "snr_db" ? snr : v;
        out << detail::fmt_double(axis_value) << "," << detail::fmt_double(v) << ","
            << detail::fmt_double(snr) << "," << variant << ","
            << detail::fmt_double(median(values)) << "\n";
    }
}

}  // namespace ckan
