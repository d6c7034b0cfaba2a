#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ckan/channel.hpp"
#include "ckan/errors.hpp"
#include "ckan/tensor.hpp"

namespace ckan {

// Little-endian primitives shared by the dataset and checkpoint formats.
namespace wire {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

// Cursor over a fully-slurped file; every read checks the remaining length.
class Reader {
  public:
    Reader(std::vector<std::uint8_t> bytes, std::string name)
        : bytes_(std::move(bytes)), name_(std::move(name)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    void raw(std::uint8_t* dst, std::size_t n) {
        need(n);
        for (std::size_t i = 0; i < n; ++i) dst[i] = bytes_[pos_ + i];
        pos_ += n;
    }

    bool exhausted() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

  private:
    void need(std::size_t n) {
        if (bytes_.size() - pos_ < n)
            throw TruncatedPayloadError(name_ + ": truncated at byte " + std::to_string(pos_) +
                                        ", need " + std::to_string(n) + " more");
    }

    std::vector<std::uint8_t> bytes_;
    std::string name_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

inline void dump(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path);
}

}  // namespace wire

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

// A windowed dataset together with the geometry that produced it.
struct Dataset {
    SystemConfig cfg;
    std::size_t t_hist = 0;
    std::size_t l_fut = 0;
    std::vector<WindowedSample> samples;
};

// Binary layout, little-endian: magic "CKAN", format version u32, then
// n_h/n_v/n_r/K u32, f_c/delta_f/dt f64, T u32, L u32, sample count u64,
// then per sample (history before future) interleaved (re, im) f64 in
// row-major (time, subcarrier, antenna-pair) order.
inline void save_dataset(const Dataset& ds, const std::string& path) {
    const std::size_t pairs = ds.cfg.pairs();
    for (const WindowedSample& s : ds.samples) {
        if (s.history.rank() != 3 || s.history.dim(0) != ds.t_hist ||
            s.history.dim(1) != ds.cfg.k_sub || s.history.dim(2) != pairs ||
            s.future.rank() != 3 || s.future.dim(0) != ds.l_fut ||
            s.future.dim(1) != ds.cfg.k_sub || s.future.dim(2) != pairs)
            throw DimensionError("save_dataset: sample shape disagrees with header (history " +
                                 shape_str(s.history.shape()) + ", future " +
                                 shape_str(s.future.shape()) + ")");
    }
    std::vector<std::uint8_t> out;
    out.reserve(64 + ds.samples.size() * (ds.t_hist + ds.l_fut) * ds.cfg.k_sub * pairs * 16);
    out.push_back('C');
    out.push_back('K');
    out.push_back('A');
    out.push_back('N');
    wire::put_u32(out, kDatasetFormatVersion);
    wire::put_u32(out, static_cast<std::uint32_t>(ds.cfg.n_h));
    wire::put_u32(out, static_cast<std::uint32_t>(ds.cfg.n_v));
    wire::put_u32(out, static_cast<std::uint32_t>(ds.cfg.n_r));
    wire::put_u32(out, static_cast<std::uint32_t>(ds.cfg.k_sub));
    wire::put_f64(out, ds.cfg.f_c);
    wire::put_f64(out, ds.cfg.delta_f);
    wire::put_f64(out, ds.cfg.dt);
    wire::put_u32(out, static_cast<std::uint32_t>(ds.t_hist));
    wire::put_u32(out, static_cast<std::uint32_t>(ds.l_fut));
    wire::put_u64(out, ds.samples.size());
    auto put_complex = [&out](const ComplexTensor& t) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            wire::put_f64(out, t.re()[i]);
            wire::put_f64(out, t.im()[i]);
        }
    };
    for (const WindowedSample& s : ds.samples) {
        put_complex(s.history);
        put_complex(s.future);
    }
    wire::dump(path, out);
}

inline Dataset load_dataset(const std::string& path) {
    wire::Reader r(wire::slurp(path), path);
    std::uint8_t magic[4];
    r.raw(magic, 4);
    if (magic[0] != 'C' || magic[1] != 'K' || magic[2] != 'A' || magic[3] != 'N')
        throw MalformedHeaderError(path + ": bad magic bytes, not a dataset file");
    const std::uint32_t version = r.u32();
    if (version != kDatasetFormatVersion)
        throw VersionMismatchError(path + ": format version " + std::to_string(version) +
                                   ", expected " + std::to_string(kDatasetFormatVersion));
    Dataset ds;
    ds.cfg.n_h = r.u32();
    ds.cfg.n_v = r.u32();
    ds.cfg.n_r = r.u32();
    ds.cfg.k_sub = r.u32();
    ds.cfg.f_c = r.f64();
    ds.cfg.delta_f = r.f64();
    ds.cfg.dt = r.f64();
    ds.t_hist = r.u32();
    ds.l_fut = r.u32();
    const std::uint64_t count = r.u64();
    const std::size_t pairs = ds.cfg.pairs();
    auto get_complex = [&r](ComplexTensor& t) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            t.re()[i] = r.f64();
            t.im()[i] = r.f64();
        }
    };
    ds.samples.reserve(count);
    for (std::uint64_t s = 0; s < count; ++s) {
        WindowedSample ws{ComplexTensor(Shape{ds.t_hist, ds.cfg.k_sub, pairs}),
                          ComplexTensor(Shape{ds.l_fut, ds.cfg.k_sub, pairs})};
        get_complex(ws.history);
        get_complex(ws.future);
        ds.samples.push_back(std::move(ws));
    }
    if (!r.exhausted())
        throw MalformedHeaderError(path + ": " + std::to_string(r.remaining()) +
                                   " unexpected trailing bytes");
    return ds;
}

// Human-readable sidecar next to a dataset or report: "key = value" lines.
inline void write_sidecar(const std::string& path,
                          const std::vector<std::pair<std::string, std::string>>& entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& [k, v] : entries) out << k << " = " << v << "\n";
}

// Inverse of write_sidecar; lines without " = " are skipped.
inline std::vector<std::pair<std::string, std::string>> read_sidecar(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read " + path);
    std::vector<std::pair<std::string, std::string>> entries;
    std::string line;
    while (std::getline(in, line)) {
        const std::size_t sep = line.find(" = ");
        if (sep == std::string::npos) continue;
        entries.emplace_back(line.substr(0, sep), line.substr(sep + 3));
    }
    return entries;
}

}  // namespace ckan
