#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ckan/autodiff.hpp"
#include "ckan/channel.hpp"
#include "ckan/errors.hpp"
#include "ckan/fft.hpp"
#include "ckan/rng.hpp"
#include "ckan/tensor.hpp"

namespace ckan {

// Architecture hyperparameters. Feature width per domain is C = 2*K*A with
// A = n_t*n_r antenna pairs (real and imaginary parts interleaved).
struct ModelConfig {
    std::size_t t_hist = 16;                            // history length T
    std::size_t l_fut = 4;                              // prediction length P
    std::size_t k_sub = 48;                             // subcarriers K
    std::size_t pairs = 8;                              // antenna pairs A
    std::size_t scales = 3;                             // scale count k
    std::vector<std::size_t> keep = {2, 4, 8};          // kept bins r_q per scale
    std::vector<std::size_t> conv_widths = {2, 16, 16, 2};  // channels incl. in/out
    std::size_t conv_ksize = 3;
    std::size_t cheb_order = 4;                         // Chebyshev max order M
    double kan_prescale = 0.5;                          // fixed factor before tanh
    bool use_multiscale = true;
    bool use_dual_domain = true;
    bool use_cnn_kan = true;
    bool use_kan = true;

    std::size_t width() const { return 2 * k_sub * pairs; }       // C
    std::size_t bins() const { return t_hist / 2 + 1; }           // rFFT bins
    std::size_t fusion_in() const { return t_hist * width() * (use_dual_domain ? 2 : 1); }
    std::size_t fusion_out() const { return l_fut * width(); }

    void validate() const {
        if (t_hist < 1 || l_fut < 1 || k_sub < 1 || pairs < 1)
            throw ConfigError("ModelConfig: T, L, K, pairs must be >= 1");
        if (scales < 1 || keep.size() != scales)
            throw ConfigError("ModelConfig: need one kept-bin count per scale");
        for (std::size_t r : keep)
            if (r < 1 || r > bins())
                throw ConfigError("ModelConfig: kept bins " + std::to_string(r) +
                                  " outside [1, " + std::to_string(bins()) + "]");
        if (conv_widths.size() < 2 || conv_widths.front() != 2 || conv_widths.back() != 2)
            throw ConfigError("ModelConfig: conv widths must start and end at 2 channels");
        if (conv_ksize % 2 == 0) throw ConfigError("ModelConfig: conv kernel size must be odd");
        if (cheb_order < 1) throw ConfigError("ModelConfig: Chebyshev order must be >= 1");
    }
};

// Flat named parameter store in canonical (creation) order; the order is
// the checkpoint and optimizer-state order.
struct ModelParams {
    std::vector<std::string> names;
    std::vector<Tensor> tensors;

    std::size_t count() const { return names.size(); }

    std::size_t index(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw ConfigError("ModelParams: no parameter named " + name);
    }

    Tensor& at(const std::string& name) { return tensors[index(name)]; }
    const Tensor& at(const std::string& name) const { return tensors[index(name)]; }

    void push(std::string name, Tensor t) {
        names.push_back(std::move(name));
        tensors.push_back(std::move(t));
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const Tensor& t : tensors) n += t.numel();
        return n;
    }
};

namespace detail {

inline std::vector<std::string> active_branches(const ModelConfig& cfg) {
    std::vector<std::string> b = {"f"};
    if (cfg.use_dual_domain) b.push_back("d");
    return b;
}

inline Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace detail

// Fresh parameters for a config. Conv kernels and dense weights draw from a
// centered uniform scaled by fan-in; scale weights start at 1/k; Chebyshev
// coefficients start at zero except the order-1 matrix (small random, so the
// map begins near a contractive linear one).
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng = Rng::derive(seed, "init", 0);
    ModelParams p;
    const std::size_t c = cfg.width();
    for (const std::string& b : detail::active_branches(cfg)) {
        if (cfg.use_multiscale) {
            for (std::size_t q = 0; q < cfg.scales; ++q)
                p.push("msfe." + b + ".u" + std::to_string(q),
                       Tensor::full(Shape{cfg.t_hist, c}, 1.0 / static_cast<double>(cfg.scales)));
        }
        if (cfg.use_cnn_kan) {
            for (std::size_t l = 0; l + 1 < cfg.conv_widths.size(); ++l) {
                const std::size_t in = cfg.conv_widths[l], out = cfg.conv_widths[l + 1];
                const double bound =
                    1.0 / std::sqrt(static_cast<double>(in) * static_cast<double>(cfg.conv_ksize));
                p.push("cnn." + b + ".k" + std::to_string(l),
                       detail::uniform_tensor(Shape{out, in, cfg.conv_ksize}, -bound, bound, rng));
                p.push("cnn." + b + ".b" + std::to_string(l), Tensor(Shape{out}));
            }
            if (cfg.use_kan) {
                for (std::size_t m = 0; m <= cfg.cheb_order; ++m) {
                    Tensor w(Shape{cfg.t_hist, c});
                    if (m == 1)
                        w = detail::uniform_tensor(Shape{cfg.t_hist, c}, -0.1, 0.1, rng);
                    p.push("kan." + b + ".w" + std::to_string(m), std::move(w));
                }
            }
        } else {
            const double bound = 1.0 / std::sqrt(static_cast<double>(c));
            p.push("alt." + b + ".w", detail::uniform_tensor(Shape{c, c, 1}, -bound, bound, rng));
            p.push("alt." + b + ".b", Tensor(Shape{c}));
        }
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.fusion_in()));
    p.push("fuse.w",
           detail::uniform_tensor(Shape{cfg.fusion_in(), cfg.fusion_out()}, -bound, bound, rng));
    p.push("fuse.b", Tensor(Shape{cfg.fusion_out()}));
    return p;
}

// ---- realification ----

// Complex T x K x A -> real T x C with C = 2*K*A; column 2*(k*A + a) holds
// the real part and the next column the imaginary part.
inline Tensor realify(const ComplexTensor& h) {
    if (h.rank() != 3) throw DimensionError("realify: expected T x K x A, got " + shape_str(h.shape()));
    const std::size_t t = h.dim(0), features = h.dim(1) * h.dim(2);
    Tensor out(Shape{t, 2 * features});
    for (std::size_t i = 0; i < t * features; ++i) {
        out[2 * i] = h.re()[i];
        out[2 * i + 1] = h.im()[i];
    }
    return out;
}

inline ComplexTensor inverse_realify(const Tensor& x, std::size_t k_sub, std::size_t pairs) {
    if (x.rank() != 2 || x.dim(1) != 2 * k_sub * pairs)
        throw DimensionError("inverse_realify: " + shape_str(x.shape()) + " does not match 2*" +
                             std::to_string(k_sub) + "*" + std::to_string(pairs) + " columns");
    const std::size_t t = x.dim(0), features = k_sub * pairs;
    ComplexTensor h(Shape{t, k_sub, pairs});
    for (std::size_t i = 0; i < t * features; ++i) {
        h.re()[i] = x[2 * i];
        h.im()[i] = x[2 * i + 1];
    }
    return h;
}

// ---- stage 1: dual-domain expansion ----

struct DomainFeatures {
    Tensor freq;   // CFR branch, T x C
    Tensor delay;  // CIR branch, T x C
};

// CFR branch realifies the input; CIR branch realifies its unitary IDFT
// over the subcarrier axis.
inline DomainFeatures dual_domain_expand(const ComplexTensor& history, const ModelConfig& cfg) {
    if (history.rank() != 3 || history.dim(0) != cfg.t_hist || history.dim(1) != cfg.k_sub ||
        history.dim(2) != cfg.pairs)
        throw DimensionError("dual_domain_expand: history " + shape_str(history.shape()) +
                             " vs config T=" + std::to_string(cfg.t_hist) + " K=" +
                             std::to_string(cfg.k_sub) + " A=" + std::to_string(cfg.pairs));
    DomainFeatures f;
    f.freq = realify(history);
    f.delay = realify(dft_k(history, 1, true));
    return f;
}

// ---- stage 2: multi-scale frequency enhancement ----

// Per-column top-r mask over rFFT magnitudes; ties break toward the lower
// frequency index.
inline SpectralMask topk_mask(const ComplexTensor& spectrum, std::size_t r) {
    if (spectrum.rank() != 2) throw DimensionError("topk_mask: expected bins x C spectrum");
    const std::size_t bins = spectrum.dim(0), cols = spectrum.dim(1);
    if (r < 1 || r > bins)
        throw ConfigError("topk_mask: r = " + std::to_string(r) + " outside [1, " +
                          std::to_string(bins) + "]");
    SpectralMask mask{bins, cols, std::vector<std::uint8_t>(bins * cols, 0)};
    std::vector<std::size_t> order(bins);
    std::vector<double> mag(bins);
    for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t f = 0; f < bins; ++f) {
            const double re = spectrum.re()[f * cols + c], im = spectrum.im()[f * cols + c];
            mag[f] = re * re + im * im;
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&mag](std::size_t a, std::size_t b) { return mag[a] > mag[b]; });
        for (std::size_t i = 0; i < r; ++i) mask.keep[order[i] * cols + c] = 1;
    }
    return mask;
}

inline std::vector<std::shared_ptr<const SpectralMask>> scale_masks(const Tensor& z0,
                                                                    const ModelConfig& cfg) {
    const ComplexTensor spectrum = rfft_t(z0);
    std::vector<std::shared_ptr<const SpectralMask>> masks;
    masks.reserve(cfg.scales);
    for (std::size_t q = 0; q < cfg.scales; ++q)
        masks.push_back(std::make_shared<const SpectralMask>(topk_mask(spectrum, cfg.keep[q])));
    return masks;
}

// Tape version: z0 is a graph node, the masks are data (they come from the
// parameter-free branch input, so they are constants of the graph).
inline GradTape::Var multiscale_enhance_t(GradTape& tape, GradTape::Var z0,
                                          const std::vector<std::shared_ptr<const SpectralMask>>& masks,
                                          const std::vector<GradTape::Var>& u) {
    if (masks.size() != u.size()) throw DimensionError("multiscale_enhance: scale count mismatch");
    GradTape::Var acc;
    for (std::size_t q = 0; q < masks.size(); ++q) {
        GradTape::Var z = tape.mul(u[q], tape.spectral_filter(z0, masks[q]));
        acc = q == 0 ? z : tape.add(acc, z);
    }
    return acc;
}

inline Tensor multiscale_enhance(const Tensor& z0, const std::vector<Tensor>& u,
                                 const ModelConfig& cfg) {
    if (u.size() != cfg.scales) throw DimensionError("multiscale_enhance: scale count mismatch");
    GradTape tape;
    std::vector<GradTape::Var> uv;
    uv.reserve(u.size());
    for (const Tensor& w : u) uv.push_back(tape.constant(w));
    GradTape::Var out = multiscale_enhance_t(tape, tape.constant(z0), scale_masks(z0, cfg), uv);
    return tape.value(out);
}

// ---- stage 3: convolutional feature extraction ----

// Cascaded 1-D convolutions along the feature axis per time step. The T x C
// input is read as C/2 positions x 2 channels (the realification pair),
// matching the channel-fastest layout of conv1d; GELU between layers, the
// final layer returns 2 channels.
inline GradTape::Var cnn_extract_t(GradTape& tape, GradTape::Var z,
                                   const std::vector<GradTape::Var>& kernels,
                                   const std::vector<GradTape::Var>& biases,
                                   const ModelConfig& cfg) {
    if (cfg.width() % 2 != 0) throw ConfigError("cnn_extract: feature width must be even");
    if (kernels.size() + 1 != cfg.conv_widths.size() || biases.size() != kernels.size())
        throw DimensionError("cnn_extract: layer count mismatch");
    GradTape::Var h = z;
    for (std::size_t l = 0; l < kernels.size(); ++l) {
        h = tape.conv1d(h, kernels[l], biases[l], cfg.conv_widths[l], cfg.conv_widths[l + 1],
                        cfg.conv_ksize);
        if (l + 1 < kernels.size()) h = tape.gelu(h);
    }
    return h;
}

inline Tensor cnn_extract(const Tensor& z, const std::vector<Tensor>& kernels,
                          const std::vector<Tensor>& biases, const ModelConfig& cfg) {
    GradTape tape;
    std::vector<GradTape::Var> kv, bv;
    for (const Tensor& k : kernels) kv.push_back(tape.constant(k));
    for (const Tensor& b : biases) bv.push_back(tape.constant(b));
    return tape.value(cnn_extract_t(tape, tape.constant(z), kv, bv, cfg));
}

// ---- stage 4: Chebyshev KAN ----

// First-kind Chebyshev values T_0..T_M at x by the recurrence
// T_{m+1} = 2x T_m - T_{m-1}.
inline std::vector<double> chebyshev_basis(double x, std::size_t order) {
    std::vector<double> t(order + 1);
    t[0] = 1.0;
    if (order >= 1) t[1] = x;
    for (std::size_t m = 2; m <= order; ++m) t[m] = 2.0 * x * t[m - 1] - t[m - 2];
    return t;
}

// phi = sum_m W_m (*) T_m(tanh(prescale * q)), element-wise.
inline GradTape::Var kan_map_t(GradTape& tape, GradTape::Var q,
                               const std::vector<GradTape::Var>& w, double prescale) {
    if (w.empty()) throw DimensionError("kan_map: need at least W_0");
    GradTape::Var qhat = tape.tanh(prescale == 1.0 ? q : tape.scale(q, prescale));
    GradTape::Var prev = tape.constant(Tensor::full(tape.value(q).shape(), 1.0));
    GradTape::Var acc = tape.mul(w[0], prev);
    GradTape::Var cur = qhat;
    for (std::size_t m = 1; m < w.size(); ++m) {
        acc = tape.add(acc, tape.mul(w[m], cur));
        if (m + 1 < w.size()) {
            GradTape::Var next = tape.sub(tape.scale(tape.mul(qhat, cur), 2.0), prev);
            prev = cur;
            cur = next;
        }
    }
    return acc;
}

inline Tensor kan_map(const Tensor& q, const std::vector<Tensor>& w, double prescale) {
    GradTape tape;
    std::vector<GradTape::Var> wv;
    for (const Tensor& m : w) wv.push_back(tape.constant(m));
    return tape.value(kan_map_t(tape, tape.constant(q), wv, prescale));
}

// ---- stage 5: fusion ----

// Concatenate branch features, flatten, one dense map to P*C, reshape.
// The dense output stays linear: its targets are realified CSI values on
// both sides of zero, which a saturating activation cannot reach.
inline GradTape::Var fuse_and_predict_t(GradTape& tape, GradTape::Var f_freq,
                                        const GradTape::Var* f_delay, GradTape::Var w_f,
                                        GradTape::Var b_f, const ModelConfig& cfg) {
    GradTape::Var cat = f_delay ? tape.concat_cols(f_freq, *f_delay) : f_freq;
    GradTape::Var flat = tape.reshape(cat, Shape{cfg.fusion_in()});
    GradTape::Var y = tape.dense(flat, w_f, b_f);
    return tape.reshape(y, Shape{cfg.l_fut, cfg.width()});
}

// ---- bound parameters and full forward ----

// Tape handles for every parameter, in ModelParams order.
struct BoundParams {
    const ModelParams* params = nullptr;
    std::vector<GradTape::Var> vars;

    GradTape::Var at(const std::string& name) const { return vars[params->index(name)]; }
};

inline BoundParams bind_params(GradTape& tape, const ModelParams& p) {
    BoundParams b;
    b.params = &p;
    b.vars.reserve(p.count());
    for (const Tensor& t : p.tensors) b.vars.push_back(tape.param(&t));
    return b;
}

inline BoundParams bind_constants(GradTape& tape, const ModelParams& p) {
    BoundParams b;
    b.params = &p;
    b.vars.reserve(p.count());
    for (const Tensor& t : p.tensors) b.vars.push_back(tape.constant(t));
    return b;
}

// Full pipeline on the tape; returns the realified prediction, shape P x C.
// Disabled stages degrade to identity (multi-scale, KAN), to a single
// per-time-step dense layer (CNN-KAN), or to the CFR branch alone
// (dual-domain).
inline GradTape::Var forward_t(GradTape& tape, const BoundParams& bp, const ModelConfig& cfg,
                               const ComplexTensor& history) {
    const DomainFeatures feats = dual_domain_expand(history, cfg);
    std::vector<GradTape::Var> branch_out;
    for (const std::string& b : detail::active_branches(cfg)) {
        const Tensor& feat = b == "f" ? feats.freq : feats.delay;
        GradTape::Var z = tape.constant(feat);
        if (cfg.use_multiscale) {
            std::vector<GradTape::Var> u;
            u.reserve(cfg.scales);
            for (std::size_t q = 0; q < cfg.scales; ++q)
                u.push_back(bp.at("msfe." + b + ".u" + std::to_string(q)));
            z = multiscale_enhance_t(tape, z, scale_masks(feat, cfg), u);
        }
        if (cfg.use_cnn_kan) {
            std::vector<GradTape::Var> kernels, biases;
            for (std::size_t l = 0; l + 1 < cfg.conv_widths.size(); ++l) {
                kernels.push_back(bp.at("cnn." + b + ".k" + std::to_string(l)));
                biases.push_back(bp.at("cnn." + b + ".b" + std::to_string(l)));
            }
            z = cnn_extract_t(tape, z, kernels, biases, cfg);
            if (cfg.use_kan) {
                std::vector<GradTape::Var> w;
                for (std::size_t m = 0; m <= cfg.cheb_order; ++m)
                    w.push_back(bp.at("kan." + b + ".w" + std::to_string(m)));
                z = kan_map_t(tape, z, w, cfg.kan_prescale);
            }
        } else {
            z = tape.conv1d(z, bp.at("alt." + b + ".w"), bp.at("alt." + b + ".b"), cfg.width(),
                            cfg.width(), 1);
        }
        branch_out.push_back(z);
    }
    return fuse_and_predict_t(tape, branch_out[0],
                              branch_out.size() > 1 ? &branch_out[1] : nullptr, bp.at("fuse.w"),
                              bp.at("fuse.b"), cfg);
}

// Inference convenience: complex in, complex out.
inline ComplexTensor forward(const ModelParams& params, const ModelConfig& cfg,
                             const ComplexTensor& history) {
    GradTape tape;
    BoundParams bp = bind_constants(tape, params);
    GradTape::Var out = forward_t(tape, bp, cfg, history);
    return inverse_realify(tape.value(out), cfg.k_sub, cfg.pairs);
}

inline ComplexTensor fuse_and_predict(const Tensor& f_freq, const Tensor* f_delay,
                                      const Tensor& w_f, const Tensor& b_f,
                                      const ModelConfig& cfg) {
    GradTape tape;
    GradTape::Var ff = tape.constant(f_freq);
    GradTape::Var fd;
    if (f_delay) fd = tape.constant(*f_delay);
    GradTape::Var out = fuse_and_predict_t(tape, ff, f_delay ? &fd : nullptr,
                                           tape.constant(w_f), tape.constant(b_f), cfg);
    return inverse_realify(tape.value(out), cfg.k_sub, cfg.pairs);
}

}  // namespace ckan
