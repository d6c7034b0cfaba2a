#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ckan/dataset.hpp"
#include "ckan/errors.hpp"
#include "ckan/model.hpp"
#include "ckan/tensor.hpp"

namespace ckan {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

// Optimizer state carried across a resumed run: global step count and the
// Adam first/second moments in ModelParams order.
struct TrainerState {
    std::size_t next_epoch = 0;
    std::size_t adam_step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

struct Checkpoint {
    ModelConfig cfg;
    ModelParams params;
    std::optional<TrainerState> trainer;
};

namespace detail {

inline void put_model_config(std::vector<std::uint8_t>& out, const ModelConfig& cfg) {
    wire::put_u32(out, static_cast<std::uint32_t>(cfg.t_hist));
    wire::put_u32(out, static_cast<std::uint32_t>(cfg.l_fut));
    wire::put_u32(out, static_cast<std::uint32_t>(cfg.k_sub));
    wire::put_u32(out, static_cast<std::uint32_t>(cfg.pairs));
    wire::put_u32(out, static_cast<std::uint32_t>(cfg.scales));
    for (std::size_t r : cfg.keep) wire::put_u32(out, static_cast<std::uint32_t>(r));
    wire::put_u32(out, static_cast<std::uint32_t>(cfg.conv_widths.size()));
    for (std::size_t w : cfg.conv_widths) wire::put_u32(out, static_cast<std::uint32_t>(w));
    wire::put_u32(out, static_cast<std::uint32_t>(cfg.conv_ksize));
    wire::put_u32(out, static_cast<std::uint32_t>(cfg.cheb_order));
    wire::put_f64(out, cfg.kan_prescale);
    out.push_back(cfg.use_multiscale ? 1 : 0);
    out.push_back(cfg.use_dual_domain ? 1 : 0);
    out.push_back(cfg.use_cnn_kan ? 1 : 0);
    out.push_back(cfg.use_kan ? 1 : 0);
}

inline ModelConfig get_model_config(wire::Reader& r) {
    ModelConfig cfg;
    cfg.t_hist = r.u32();
    cfg.l_fut = r.u32();
    cfg.k_sub = r.u32();
    cfg.pairs = r.u32();
    cfg.scales = r.u32();
    cfg.keep.resize(cfg.scales);
    for (std::size_t q = 0; q < cfg.scales; ++q) cfg.keep[q] = r.u32();
    cfg.conv_widths.resize(r.u32());
    for (std::size_t& w : cfg.conv_widths) w = r.u32();
    cfg.conv_ksize = r.u32();
    cfg.cheb_order = r.u32();
    cfg.kan_prescale = r.f64();
    std::uint8_t flags[4];
    r.raw(flags, 4);
    cfg.use_multiscale = flags[0] != 0;
    cfg.use_dual_domain = flags[1] != 0;
    cfg.use_cnn_kan = flags[2] != 0;
    cfg.use_kan = flags[3] != 0;
    return cfg;
}

inline void put_tensor_payload(std::vector<std::uint8_t>& out, const Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) wire::put_f64(out, t[i]);
}

}  // namespace detail

inline bool same_model_config(const ModelConfig& a, const ModelConfig& b) {
    return a.t_hist == b.t_hist && a.l_fut == b.l_fut && a.k_sub == b.k_sub && a.pairs == b.pairs &&
           a.scales == b.scales && a.keep == b.keep && a.conv_widths == b.conv_widths &&
           a.conv_ksize == b.conv_ksize && a.cheb_order == b.cheb_order &&
           a.kan_prescale == b.kan_prescale && a.use_multiscale == b.use_multiscale &&
           a.use_dual_domain == b.use_dual_domain && a.use_cnn_kan == b.use_cnn_kan &&
           a.use_kan == b.use_kan;
}

// Binary layout, little-endian: magic "CKPT", format version u32, model
// config, then parameters in canonical order (name, shape, f64 payload),
// then an optional trainer-state block (epoch, Adam step, moments).
inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::vector<std::uint8_t> out;
    out.push_back('C');
    out.push_back('K');
    out.push_back('P');
    out.push_back('T');
    wire::put_u32(out, kCheckpointFormatVersion);
    detail::put_model_config(out, ck.cfg);
    wire::put_u64(out, ck.params.count());
    for (std::size_t i = 0; i < ck.params.count(); ++i) {
        const std::string& name = ck.params.names[i];
        const Tensor& t = ck.params.tensors[i];
        wire::put_u32(out, static_cast<std::uint32_t>(name.size()));
        for (char c : name) out.push_back(static_cast<std::uint8_t>(c));
        wire::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d) wire::put_u64(out, t.dim(d));
        detail::put_tensor_payload(out, t);
    }
    if (ck.trainer) {
        if (ck.trainer->m.size() != ck.params.count() || ck.trainer->v.size() != ck.params.count())
            throw DimensionError("save_checkpoint: trainer moments do not match parameter count");
        out.push_back(1);
        wire::put_u64(out, ck.trainer->next_epoch);
        wire::put_u64(out, ck.trainer->adam_step);
        for (const Tensor& t : ck.trainer->m) detail::put_tensor_payload(out, t);
        for (const Tensor& t : ck.trainer->v) detail::put_tensor_payload(out, t);
    } else {
        out.push_back(0);
    }
    wire::dump(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    wire::Reader r(wire::slurp(path), path);
    std::uint8_t magic[4];
    r.raw(magic, 4);
    if (magic[0] != 'C' || magic[1] != 'K' || magic[2] != 'P' || magic[3] != 'T')
        throw MalformedHeaderError(path + ": bad magic bytes, not a checkpoint file");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointFormatVersion)
        throw VersionMismatchError(path + ": format version " + std::to_string(version) +
                                   ", expected " + std::to_string(kCheckpointFormatVersion));
    Checkpoint ck;
    ck.cfg = detail::get_model_config(r);
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        std::string name(name_len, '\0');
        r.raw(reinterpret_cast<std::uint8_t*>(name.data()), name_len);
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = r.u64();
        Tensor t(shape);
        for (std::size_t j = 0; j < t.numel(); ++j) t[j] = r.f64();
        ck.params.push(std::move(name), std::move(t));
    }
    std::uint8_t has_trainer = 0;
    r.raw(&has_trainer, 1);
    if (has_trainer) {
        TrainerState st;
        st.next_epoch = r.u64();
        st.adam_step = r.u64();
        auto read_moments = [&](std::vector<Tensor>& dst) {
            dst.reserve(count);
            for (std::uint64_t i = 0; i < count; ++i) {
                Tensor t(ck.params.tensors[i].shape());
                for (std::size_t j = 0; j < t.numel(); ++j) t[j] = r.f64();
                dst.push_back(std::move(t));
            }
        };
        read_moments(st.m);
        read_moments(st.v);
        ck.trainer = std::move(st);
    }
    if (!r.exhausted())
        throw MalformedHeaderError(path + ": " + std::to_string(r.remaining()) +
                                   " unexpected trailing bytes");
    return ck;
}

// Guard for resuming/evaluating: the stored config must agree with the one
// the caller is about to run with.
inline void require_matching_config(const ModelConfig& stored, const ModelConfig& runtime,
                                    const std::string& path) {
    if (!same_model_config(stored, runtime))
        throw ConfigError(path + ": checkpoint config disagrees with runtime config (stored T=" +
                          std::to_string(stored.t_hist) + " L=" + std::to_string(stored.l_fut) +
                          " K=" + std::to_string(stored.k_sub) + " A=" +
                          std::to_string(stored.pairs) + ", runtime T=" +
                          std::to_string(runtime.t_hist) + " L=" + std::to_string(runtime.l_fut) +
                          " K=" + std::to_string(runtime.k_sub) + " A=" +
                          std::to_string(runtime.pairs) + ")");
}

}  // namespace ckan
