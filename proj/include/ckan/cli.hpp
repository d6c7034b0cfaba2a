#pragma once

// Command implementations behind the channelkan tool. argv parsing lives in
// the tool binary; everything here works on a Flags snapshot and a fully
// resolved JSON options object, so commands stay testable in-process and
// replayable from their manifests. Precedence: flags > config file >
// built-in defaults; the resolved options are echoed verbatim into
// manifest.json before any long computation starts.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ckan/channel.hpp"
#include "ckan/checkpoint.hpp"
#include "ckan/dataset.hpp"
#include "ckan/errors.hpp"
#include "ckan/eval.hpp"
#include "ckan/model.hpp"
#include "ckan/rng.hpp"
#include "ckan/train.hpp"
#include "ckan/version.hpp"

namespace ckan::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
    if (dynamic_cast<const ConfigError*>(&e)) return kExitUsage;
    if (dynamic_cast<const Error*>(&e)) return kExitData;  // data, dimension, file format
    return kExitData;  // filesystem and other runtime failures
}

// Everything the argv parser may have collected; unset fields fall through
// to the config file and then to built-in defaults.
struct Flags {
    std::optional<std::string> config;
    std::optional<std::string> out;
    std::optional<std::string> data;
    std::optional<std::string> checkpoint;
    std::optional<std::string> resume;
    std::optional<std::string> baseline;
    std::optional<std::string> ablate;
    std::optional<std::uint64_t> seed;
    std::optional<double> velocity;
    std::vector<double> snr;  // empty = unset
    std::optional<std::int64_t> epochs;
    std::optional<std::size_t> jobs;
    bool oracle = false;
    std::vector<std::string> inputs;  // inspect positionals
};

// The default data root; generate writes here and train/eval read from it
// unless --data/--out say otherwise.
inline std::string default_data_root() {
    const char* env = std::getenv("CHANNELKAN_DATA_DIR");
    return env && *env ? std::string(env) : std::string("data");
}

// The tool's built-in radio profile is desk-sized (2x1 transmit panel,
// single receive antenna, 8 subcarriers) so that full train/eval runs
// finish in minutes on one core; every field is config-overridable.
inline SystemConfig default_tool_system() {
    SystemConfig sys;
    sys.n_h = 2;
    sys.n_v = 1;
    sys.n_r = 1;
    sys.k_sub = 8;
    return sys;
}

namespace detail {

inline std::string iso_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm utc{};
    gmtime_r(&now, &utc);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &utc);
    return buf;
}

inline const nlohmann::json* section(const nlohmann::json& root, const char* name) {
    const auto it = root.find(name);
    if (it == root.end() || it->is_null()) return nullptr;
    if (!it->is_object())
        throw ConfigError(std::string("config section '") + name + "' must be a JSON object");
    return &*it;
}

// Overwrite `into` when the key is present and non-null; missing keys keep
// the caller's default.
template <typename T>
void maybe_get(const nlohmann::json* sec, const char* key, T& into) {
    if (!sec) return;
    const auto it = sec->find(key);
    if (it == sec->end() || it->is_null()) return;
    try {
        into = it->get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

inline std::size_t as_count(const nlohmann::json& v, const char* key) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        throw ConfigError(std::string("'") + key + "' must be a non-negative integer");
    return static_cast<std::size_t>(v.get<std::int64_t>());
}

inline std::size_t get_count(const nlohmann::json& o, const char* key) {
    return as_count(o.at(key), key);
}

inline std::vector<std::size_t> get_counts(const nlohmann::json& o, const char* key) {
    const nlohmann::json& arr = o.at(key);
    if (!arr.is_array()) throw ConfigError(std::string("'") + key + "' must be an array");
    std::vector<std::size_t> out;
    out.reserve(arr.size());
    for (const nlohmann::json& v : arr) out.push_back(as_count(v, key));
    return out;
}

}  // namespace detail

inline nlohmann::json load_config_file(const std::optional<std::string>& path) {
    if (!path) return nlohmann::json::object();
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot read config file " + *path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + *path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config file " + *path + " must hold a JSON object");
    return j;
}

// ---- config (de)materialization ----

inline nlohmann::json system_to_json(const SystemConfig& sys) {
    return nlohmann::json{{"n_h", sys.n_h},         {"n_v", sys.n_v}, {"n_r", sys.n_r},
                          {"k_sub", sys.k_sub},     {"f_c", sys.f_c}, {"delta_f", sys.delta_f},
                          {"dt", sys.dt}};
}

inline SystemConfig system_from_json(const nlohmann::json& j, SystemConfig base) {
    detail::maybe_get(&j, "n_h", base.n_h);
    detail::maybe_get(&j, "n_v", base.n_v);
    detail::maybe_get(&j, "n_r", base.n_r);
    detail::maybe_get(&j, "k_sub", base.k_sub);
    detail::maybe_get(&j, "f_c", base.f_c);
    detail::maybe_get(&j, "delta_f", base.delta_f);
    detail::maybe_get(&j, "dt", base.dt);
    return base;
}

// Model hyperparameters as the config file may shape them. `keep` stays
// null until the history length (and with it the bin count) is known;
// dimension keys are optional pins checked against the dataset.
inline nlohmann::json resolve_model_section(const nlohmann::json* sec) {
    nlohmann::json m{{"scales", 3},
                     {"keep", nullptr},
                     {"conv_widths", std::vector<std::size_t>{2, 16, 16, 2}},
                     {"conv_ksize", 3},
                     {"cheb_order", 4},
                     {"kan_prescale", 0.5},
                     {"t_hist", nullptr},
                     {"l_fut", nullptr},
                     {"k_sub", nullptr},
                     {"pairs", nullptr}};
    if (sec)
        for (const char* key : {"scales", "keep", "conv_widths", "conv_ksize", "cheb_order",
                                "kan_prescale", "t_hist", "l_fut", "k_sub", "pairs"})
            if (const auto it = sec->find(key); it != sec->end() && !it->is_null()) m[key] = *it;
    return m;
}

// Doubling ladder clamped to the spectrum size: 2, 4, 8, ... (the default
// {2,4,8} for three scales on a 16-step history).
inline std::vector<std::size_t> default_keep(std::size_t scales, std::size_t bins) {
    std::vector<std::size_t> keep(scales);
    std::size_t r = 2;
    for (std::size_t q = 0; q < scales; ++q, r *= 2) keep[q] = std::min(r, bins);
    return keep;
}

inline ModelConfig model_from_options(const nlohmann::json& m, std::size_t t_hist,
                                      std::size_t l_fut, std::size_t k_sub, std::size_t pairs) {
    ModelConfig cfg;
    cfg.t_hist = t_hist;
    cfg.l_fut = l_fut;
    cfg.k_sub = k_sub;
    cfg.pairs = pairs;
    cfg.scales = detail::get_count(m, "scales");
    cfg.keep = m.at("keep").is_null() ? default_keep(cfg.scales, cfg.bins())
                                      : detail::get_counts(m, "keep");
    cfg.conv_widths = detail::get_counts(m, "conv_widths");
    cfg.conv_ksize = detail::get_count(m, "conv_ksize");
    cfg.cheb_order = detail::get_count(m, "cheb_order");
    cfg.kan_prescale = m.at("kan_prescale").get<double>();
    return cfg;
}

inline nlohmann::json resolve_train_section(const nlohmann::json* sec) {
    nlohmann::json t{{"epochs", 100}, {"batch_size", 8},  {"lr0", 1e-3},
                     {"decay", 0.98}, {"patience", 20}};
    if (sec)
        for (const char* key : {"epochs", "batch_size", "lr0", "decay", "patience"})
            if (const auto it = sec->find(key); it != sec->end() && !it->is_null()) t[key] = *it;
    return t;
}

inline TrainConfig train_config_from(const nlohmann::json& t, std::uint64_t seed) {
    TrainConfig tc;
    tc.epochs = detail::get_count(t, "epochs");
    tc.batch_size = detail::get_count(t, "batch_size");
    tc.lr0 = t.at("lr0").get<double>();
    tc.decay = t.at("decay").get<double>();
    tc.patience = detail::get_count(t, "patience");
    tc.seed = seed;
    tc.validate();
    return tc;
}

// ---- manifest ----

// Written into the run directory before the command starts computing; the
// options block is the fully resolved configuration, so a run can be
// repeated bit-for-bit with --from-manifest.
inline void write_manifest(const std::string& command, const nlohmann::json& options,
                           const std::vector<std::string>& artifacts,
                           const std::filesystem::path& out_dir) {
    const nlohmann::json j{{"tool", "channelkan"},
                           {"version", kVersion},
                           {"command", command},
                           {"timestamp_utc", detail::iso_timestamp()},
                           {"options", options},
                           {"artifacts", artifacts}};
    const std::filesystem::path path = out_dir / "manifest.json";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

// ---- option resolution (flags > config file > defaults) ----

inline nlohmann::json resolve_generate(const nlohmann::json& file, const Flags& flags) {
    const nlohmann::json* sec = detail::section(file, "generate");
    SystemConfig sys = default_tool_system();
    if (const nlohmann::json* s = detail::section(file, "system"))
        sys = system_from_json(*s, sys);

    double velocity = 30.0;
    detail::maybe_get(sec, "velocity_kmh", velocity);
    if (flags.velocity) velocity = *flags.velocity;

    nlohmann::json snr = nullptr;
    if (sec)
        if (const auto it = sec->find("snr_db"); it != sec->end() && !it->is_null()) snr = *it;
    if (!flags.snr.empty()) snr = flags.snr.front();

    std::uint64_t seed = 1;
    detail::maybe_get(sec, "seed", seed);
    if (flags.seed) seed = *flags.seed;

    std::size_t t_hist = 16, l_fut = 4, train_w = 800, val_w = 100, test_w = 100;
    detail::maybe_get(sec, "t_hist", t_hist);
    detail::maybe_get(sec, "l_fut", l_fut);
    detail::maybe_get(sec, "train_windows", train_w);
    detail::maybe_get(sec, "val_windows", val_w);
    detail::maybe_get(sec, "test_windows", test_w);

    std::string out_dir = default_data_root();
    detail::maybe_get(sec, "out_dir", out_dir);
    if (flags.out) out_dir = *flags.out;

    return nlohmann::json{{"out_dir", out_dir},
                          {"seed", seed},
                          {"velocity_kmh", velocity},
                          {"snr_db", snr},
                          {"t_hist", t_hist},
                          {"l_fut", l_fut},
                          {"train_windows", train_w},
                          {"val_windows", val_w},
                          {"test_windows", test_w},
                          {"system", system_to_json(sys)}};
}

inline nlohmann::json resolve_train(const nlohmann::json& file, const Flags& flags) {
    const nlohmann::json* sec = detail::section(file, "train");
    nlohmann::json t = resolve_train_section(sec);
    if (flags.epochs) {
        if (*flags.epochs < 0) throw ConfigError("--epochs must be >= 0");
        t["epochs"] = *flags.epochs;
    }

    std::uint64_t seed = 1;
    detail::maybe_get(sec, "seed", seed);
    if (flags.seed) seed = *flags.seed;

    std::string ablate = "full";
    detail::maybe_get(sec, "ablate", ablate);
    if (flags.ablate) ablate = *flags.ablate;
    if (!is_model_variant(ablate))
        throw ConfigError("unknown --ablate variant '" + ablate +
                          "' (no-multiscale|no-cnnkan|no-dualdomain|no-kan)");

    nlohmann::json resume = nullptr;
    if (sec)
        if (const auto it = sec->find("resume"); it != sec->end() && !it->is_null()) resume = *it;
    if (flags.resume) resume = *flags.resume;

    std::string data_dir = default_data_root();
    detail::maybe_get(sec, "data_dir", data_dir);
    if (flags.data) data_dir = *flags.data;
    std::string out_dir = "run-train";
    detail::maybe_get(sec, "out_dir", out_dir);
    if (flags.out) out_dir = *flags.out;

    return nlohmann::json{{"out_dir", out_dir},
                          {"data_dir", data_dir},
                          {"seed", seed},
                          {"ablate", ablate},
                          {"resume", resume},
                          {"train", t},
                          {"model", resolve_model_section(detail::section(file, "model"))}};
}

inline nlohmann::json resolve_eval(const nlohmann::json& file, const Flags& flags) {
    const nlohmann::json* sec = detail::section(file, "eval");

    std::uint64_t seed = 1;
    detail::maybe_get(sec, "seed", seed);
    if (flags.seed) seed = *flags.seed;

    std::vector<double> snrs = {10.0};
    detail::maybe_get(sec, "snr_db", snrs);
    if (!flags.snr.empty()) snrs = flags.snr;

    std::size_t ber_bits = 100000, ar_order = 4;
    detail::maybe_get(sec, "ber_bits", ber_bits);
    detail::maybe_get(sec, "ar_order", ar_order);

    nlohmann::json checkpoint = nullptr;
    if (sec)
        if (const auto it = sec->find("checkpoint"); it != sec->end() && !it->is_null())
            checkpoint = *it;
    if (flags.checkpoint) checkpoint = *flags.checkpoint;

    nlohmann::json baseline = nullptr;
    if (flags.baseline) {
        if (*flags.baseline != "hold" && *flags.baseline != "ar")
            throw ConfigError("unknown --baseline '" + *flags.baseline + "' (hold|ar)");
        baseline = *flags.baseline;
    }

    std::string data_dir = default_data_root();
    detail::maybe_get(sec, "data_dir", data_dir);
    if (flags.data) data_dir = *flags.data;
    std::string out_dir = "run-eval";
    detail::maybe_get(sec, "out_dir", out_dir);
    if (flags.out) out_dir = *flags.out;

    return nlohmann::json{{"out_dir", out_dir},   {"data_dir", data_dir},
                          {"seed", seed},         {"checkpoint", checkpoint},
                          {"baseline", baseline}, {"ar_order", ar_order},
                          {"oracle", flags.oracle}, {"snr_db", snrs},
                          {"ber_bits", ber_bits}};
}

inline nlohmann::json resolve_grid(const nlohmann::json& file, const Flags& flags) {
    const nlohmann::json* sec = detail::section(file, "grid");
    SystemConfig sys = default_tool_system();
    if (const nlohmann::json* s = detail::section(file, "system"))
        sys = system_from_json(*s, sys);

    std::vector<double> velocities = {10.0, 60.0, 100.0};
    std::vector<double> snrs = {10.0};
    std::vector<std::string> variants = {"full", "hold", "ar4"};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    detail::maybe_get(sec, "velocities_kmh", velocities);
    detail::maybe_get(sec, "snrs_db", snrs);
    detail::maybe_get(sec, "variants", variants);
    detail::maybe_get(sec, "seeds", seeds);
    if (flags.velocity) velocities = {*flags.velocity};
    if (!flags.snr.empty()) snrs = flags.snr;
    if (flags.seed) seeds = {*flags.seed};
    if (flags.ablate) variants = {*flags.ablate};
    for (const std::string& v : variants)
        if (!is_model_variant(v) && v != "hold" && v != "ar4")
            throw ConfigError("unknown grid variant '" + v + "'");

    std::size_t train_w = 800, val_w = 100, test_w = 100, ber_bits = 100000, jobs = 1;
    std::size_t t_hist = 16, l_fut = 4;
    detail::maybe_get(sec, "train_windows", train_w);
    detail::maybe_get(sec, "val_windows", val_w);
    detail::maybe_get(sec, "test_windows", test_w);
    detail::maybe_get(sec, "ber_bits", ber_bits);
    detail::maybe_get(sec, "jobs", jobs);
    detail::maybe_get(sec, "t_hist", t_hist);
    detail::maybe_get(sec, "l_fut", l_fut);
    if (flags.jobs) jobs = *flags.jobs;
    if (jobs < 1) throw ConfigError("--jobs must be >= 1");

    nlohmann::json t = resolve_train_section(detail::section(file, "train"));
    if (flags.epochs) {
        if (*flags.epochs < 0) throw ConfigError("--epochs must be >= 0");
        t["epochs"] = *flags.epochs;
    }

    // The bin count is fixed by t_hist, so the keep ladder materializes now.
    nlohmann::json m = resolve_model_section(detail::section(file, "model"));
    if (m.at("keep").is_null())
        m["keep"] = default_keep(detail::get_count(m, "scales"), t_hist / 2 + 1);

    std::string out_dir = "run-grid";
    detail::maybe_get(sec, "out_dir", out_dir);
    if (flags.out) out_dir = *flags.out;

    return nlohmann::json{{"out_dir", out_dir},
                          {"jobs", jobs},
                          {"velocities_kmh", velocities},
                          {"snrs_db", snrs},
                          {"variants", variants},
                          {"seeds", seeds},
                          {"train_windows", train_w},
                          {"val_windows", val_w},
                          {"test_windows", test_w},
                          {"ber_bits", ber_bits},
                          {"t_hist", t_hist},
                          {"l_fut", l_fut},
                          {"system", system_to_json(sys)},
                          {"model", m},
                          {"train", t}};
}

// ---- commands (resolved options -> exit code) ----

inline int cmd_generate(const nlohmann::json& o) {
    SystemConfig sys = system_from_json(o.at("system"), default_tool_system());
    sys.validate();
    const std::filesystem::path out_dir = o.at("out_dir").get<std::string>();
    std::filesystem::create_directories(out_dir);

    const double velocity = o.at("velocity_kmh").get<double>();
    const double snr = o.at("snr_db").is_null() ? std::numeric_limits<double>::infinity()
                                                : o.at("snr_db").get<double>();
    const std::uint64_t seed = o.at("seed").get<std::uint64_t>();

    GridSpec gs;
    gs.sys = sys;
    gs.model.t_hist = detail::get_count(o, "t_hist");
    gs.model.l_fut = detail::get_count(o, "l_fut");
    gs.model.k_sub = sys.k_sub;
    gs.model.pairs = sys.pairs();
    gs.train_windows = detail::get_count(o, "train_windows");
    gs.val_windows = detail::get_count(o, "val_windows");
    gs.test_windows = detail::get_count(o, "test_windows");

    write_manifest("generate", o,
                   {"train.ckan", "train.meta", "val.ckan", "val.meta", "test.ckan", "test.meta"},
                   out_dir);

    const SplitDataset split = make_split(gs, velocity, snr, seed);
    struct Part {
        const char* name;
        const std::vector<WindowedSample>* samples;
    };
    for (const Part p : {Part{"train", &split.train}, Part{"val", &split.val},
                         Part{"test", &split.test}}) {
        Dataset ds;
        ds.cfg = sys;
        ds.t_hist = gs.model.t_hist;
        ds.l_fut = gs.model.l_fut;
        ds.samples = *p.samples;
        save_dataset(ds, (out_dir / (std::string(p.name) + ".ckan")).string());
        write_sidecar((out_dir / (std::string(p.name) + ".meta")).string(),
                      {{"part", p.name},
                       {"windows", std::to_string(p.samples->size())},
                       {"velocity_kmh", ckan::detail::fmt_double(velocity)},
                       {"snr_db", o.at("snr_db").is_null() ? "clean" : ckan::detail::fmt_double(snr)},
                       {"seed", std::to_string(seed)},
                       {"t_hist", std::to_string(ds.t_hist)},
                       {"l_fut", std::to_string(ds.l_fut)}});
        std::cout << "generate: " << (out_dir / (std::string(p.name) + ".ckan")).string() << " ("
                  << p.samples->size() << " windows)\n";
    }
    return kExitOk;
}

namespace detail {

inline Dataset load_dataset_checked(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw DataError("no dataset at " + path.string() +
                        " (run `channelkan generate` first, or point --data/CHANNELKAN_DATA_DIR "
                        "at an existing one)");
    return load_dataset(path.string());
}

inline void check_dataset_dims(const Dataset& a, const char* a_name, const Dataset& b,
                               const char* b_name) {
    if (a.t_hist != b.t_hist || a.l_fut != b.l_fut || a.cfg.k_sub != b.cfg.k_sub ||
        a.cfg.pairs() != b.cfg.pairs())
        throw DataError(std::string("dataset dimension mismatch: ") + a_name + " has T=" +
                        std::to_string(a.t_hist) + " L=" + std::to_string(a.l_fut) + " K=" +
                        std::to_string(a.cfg.k_sub) + " pairs=" + std::to_string(a.cfg.pairs()) +
                        ", " + b_name + " has T=" + std::to_string(b.t_hist) + " L=" +
                        std::to_string(b.l_fut) + " K=" + std::to_string(b.cfg.k_sub) +
                        " pairs=" + std::to_string(b.cfg.pairs()));
}

// Reject a config-file dimension pin that disagrees with what the dataset
// actually holds.
inline void check_dim_pin(const nlohmann::json& model, const char* key, std::size_t found) {
    const nlohmann::json& pin = model.at(key);
    if (!pin.is_null() && as_count(pin, key) != found)
        throw DataError(std::string("configured model ") + key + "=" +
                        std::to_string(as_count(pin, key)) + " disagrees with the dataset (" +
                        key + "=" + std::to_string(found) + "); drop the pin or regenerate");
}

inline double sidecar_velocity(const std::filesystem::path& meta_path) {
    if (!std::filesystem::exists(meta_path)) return 0.0;
    for (const auto& [k, v] : read_sidecar(meta_path.string()))
        if (k == "velocity_kmh") return std::strtod(v.c_str(), nullptr);
    return 0.0;
}

}  // namespace detail

inline int cmd_train(nlohmann::json o) {
    const std::filesystem::path data_dir = o.at("data_dir").get<std::string>();
    const std::filesystem::path out_dir = o.at("out_dir").get<std::string>();
    const std::uint64_t seed = o.at("seed").get<std::uint64_t>();

    const Dataset train_ds = detail::load_dataset_checked(data_dir / "train.ckan");
    std::vector<WindowedSample> val_samples;
    if (std::filesystem::exists(data_dir / "val.ckan")) {
        const Dataset val_ds = load_dataset((data_dir / "val.ckan").string());
        detail::check_dataset_dims(train_ds, "train.ckan", val_ds, "val.ckan");
        val_samples = val_ds.samples;
    }

    const std::size_t t = train_ds.t_hist, l = train_ds.l_fut;
    const std::size_t k = train_ds.cfg.k_sub, pairs = train_ds.cfg.pairs();
    for (const char* key : {"t_hist", "l_fut", "k_sub", "pairs"})
        detail::check_dim_pin(o.at("model"), key,
                              std::string(key) == "t_hist"   ? t
                              : std::string(key) == "l_fut"  ? l
                              : std::string(key) == "k_sub"  ? k
                                                             : pairs);

    // Materialize the resolved dimensions (and the keep ladder) into the
    // options so the manifest replays them exactly.
    o["model"]["t_hist"] = t;
    o["model"]["l_fut"] = l;
    o["model"]["k_sub"] = k;
    o["model"]["pairs"] = pairs;
    ModelConfig cfg = model_from_options(o.at("model"), t, l, k, pairs);
    cfg = apply_variant(cfg, o.at("ablate").get<std::string>());
    cfg.validate();
    o["model"]["keep"] = cfg.keep;

    ModelParams params;
    TrainerState state;
    if (!o.at("resume").is_null()) {
        const std::string resume_path = o.at("resume").get<std::string>();
        Checkpoint ck = load_checkpoint(resume_path);
        require_matching_config(ck.cfg, cfg, resume_path);
        if (!ck.trainer)
            throw DataError("checkpoint " + resume_path +
                            " carries no optimizer state; train from scratch or resume from a "
                            "last.ckpt");
        params = std::move(ck.params);
        state = std::move(*ck.trainer);
    } else {
        params = init_params(cfg, seed);
    }

    std::filesystem::create_directories(out_dir);
    write_manifest("train", o, {"best.ckpt", "last.ckpt", "train_trace.csv"}, out_dir);

    const TrainConfig tc = train_config_from(o.at("train"), seed);
    const TrainReport report = train(params, cfg, train_ds.samples, val_samples, tc, &state);

    save_checkpoint(Checkpoint{cfg, report.best_params, std::nullopt},
                    (out_dir / "best.ckpt").string());
    save_checkpoint(Checkpoint{cfg, params, state}, (out_dir / "last.ckpt").string());

    {
        const std::filesystem::path trace_path = out_dir / "train_trace.csv";
        std::ofstream trace(trace_path, std::ios::trunc);
        if (!trace) throw DataError("cannot write " + trace_path.string());
        trace << "epoch,train_loss,val_nmse,lr,seconds\n";
        for (std::size_t i = 0; i < report.epochs_run(); ++i)
            trace << report.start_epoch + i << "," << ckan::detail::fmt_double(report.train_loss[i])
                  << "," << ckan::detail::fmt_double(report.val_nmse[i]) << ","
                  << ckan::detail::fmt_double(report.lr[i]) << ","
                  << ckan::detail::fmt_double(report.seconds[i]) << "\n";
    }

    if (report.epochs_run() == 0)
        std::cout << "train: 0 epochs requested; checkpointed the initial parameters\n";
    else
        std::cout << "train: " << report.epochs_run() << " epoch(s), best val NMSE "
                  << report.best_val << " at epoch " << report.best_epoch << "\n";
    std::cout << "train: wrote " << (out_dir / "best.ckpt").string() << "\n";
    return kExitOk;
}

namespace detail {

// Metrics with the true future used as the prediction: the NMSE floor and
// the matched-beam SE/BER reference.
inline MetricReport oracle_report(const std::vector<WindowedSample>& test, double snr_db,
                                  std::size_t n_t, std::size_t ber_bits, Rng& ber_rng) {
    if (test.empty()) throw DataError("oracle evaluation needs a non-empty test set");
    MetricReport r;
    r.snr_db = snr_db;
    r.nmse = 0.0;
    double se = 0.0;
    for (const WindowedSample& s : test)
        se += spectral_efficiency(s.future, s.future, snr_db, n_t);
    r.se_bps_hz = se / static_cast<double>(test.size());
    const std::size_t ber_samples = std::min<std::size_t>(test.size(), 20);
    const std::size_t bits_per = std::max<std::size_t>(ber_bits / ber_samples, 1000);
    double errors = 0.0, bits = 0.0;
    for (std::size_t i = 0; i < ber_samples; ++i) {
        errors += bit_error_rate(test[i].future, test[i].future, snr_db, bits_per, ber_rng, n_t) *
                  static_cast<double>(bits_per);
        bits += static_cast<double>(bits_per);
    }
    r.ber = errors / bits;
    return r;
}

}  // namespace detail

// Which ablation a checkpoint's switches encode, for the report label.
inline std::string variant_name(const ModelConfig& cfg) {
    if (!cfg.use_multiscale) return "no-multiscale";
    if (!cfg.use_cnn_kan) return "no-cnnkan";
    if (!cfg.use_dual_domain) return "no-dualdomain";
    if (!cfg.use_kan) return "no-kan";
    return "full";
}

inline int cmd_eval(const nlohmann::json& o) {
    const std::filesystem::path data_dir = o.at("data_dir").get<std::string>();
    const std::filesystem::path out_dir = o.at("out_dir").get<std::string>();
    const std::uint64_t seed = o.at("seed").get<std::uint64_t>();
    const std::size_t ber_bits = detail::get_count(o, "ber_bits");
    const std::vector<double> snrs = o.at("snr_db").get<std::vector<double>>();
    if (snrs.empty()) throw ConfigError("eval needs at least one --snr value");

    const Dataset test_ds = detail::load_dataset_checked(data_dir / "test.ckan");
    if (test_ds.samples.empty()) throw DataError("test dataset holds no windows");
    const double velocity = detail::sidecar_velocity(data_dir / "test.meta");

    const bool oracle = o.at("oracle").get<bool>();
    std::string variant;
    PredictFn fn;
    Checkpoint ck;           // owns model params for the lambda below
    BaselinePredictor base;  // owns baseline state likewise
    if (oracle) {
        variant = "oracle";
    } else if (!o.at("baseline").is_null()) {
        const std::string b = o.at("baseline").get<std::string>();
        if (b == "hold") {
            base = make_hold(test_ds.l_fut);
            variant = "hold";
        } else {
            const std::size_t order = detail::get_count(o, "ar_order");
            const Dataset fit_ds = detail::load_dataset_checked(data_dir / "train.ckan");
            detail::check_dataset_dims(fit_ds, "train.ckan", test_ds, "test.ckan");
            base = fit_linear_ar(fit_ds.samples, order, test_ds.l_fut);
            variant = "ar" + std::to_string(order);
        }
        fn = base.fn();
    } else if (!o.at("checkpoint").is_null()) {
        const std::string path = o.at("checkpoint").get<std::string>();
        if (!std::filesystem::exists(path)) throw DataError("no checkpoint at " + path);
        ck = load_checkpoint(path);
        if (ck.cfg.t_hist != test_ds.t_hist || ck.cfg.l_fut != test_ds.l_fut ||
            ck.cfg.k_sub != test_ds.cfg.k_sub || ck.cfg.pairs != test_ds.cfg.pairs())
            throw DataError("checkpoint dimensions (T=" + std::to_string(ck.cfg.t_hist) + " L=" +
                            std::to_string(ck.cfg.l_fut) + " K=" + std::to_string(ck.cfg.k_sub) +
                            " pairs=" + std::to_string(ck.cfg.pairs) +
                            ") do not match the test dataset (T=" + std::to_string(test_ds.t_hist) +
                            " L=" + std::to_string(test_ds.l_fut) + " K=" +
                            std::to_string(test_ds.cfg.k_sub) + " pairs=" +
                            std::to_string(test_ds.cfg.pairs()) + ")");
        fn = [&ck](const ComplexTensor& h) { return forward(ck.params, ck.cfg, h); };
        variant = variant_name(ck.cfg);
    } else {
        throw ConfigError("eval needs one of --checkpoint, --baseline, or --oracle");
    }

    std::filesystem::create_directories(out_dir);
    write_manifest("eval", o, {"metrics.csv"}, out_dir);

    std::vector<MetricReport> rows;
    rows.reserve(snrs.size());
    for (std::size_t i = 0; i < snrs.size(); ++i) {
        Rng ber_rng = Rng::derive(seed, "ber", i);
        MetricReport r =
            oracle ? detail::oracle_report(test_ds.samples, snrs[i], test_ds.cfg.n_t(), ber_bits,
                                           ber_rng)
                   : evaluate_predictor(fn, test_ds.samples, snrs[i], test_ds.cfg.n_t(), ber_bits,
                                        ber_rng);
        r.velocity_kmh = velocity;
        r.variant = variant;
        r.seed = seed;
        r.train_seconds = 0.0;
        rows.push_back(r);
        std::cout << "eval: " << variant << " @ " << snrs[i] << " dB: nmse " << r.nmse << ", se "
                  << r.se_bps_hz << " bps/Hz, ber " << r.ber << "\n";
    }
    write_reports_csv(rows, (out_dir / "metrics.csv").string());
    return kExitOk;
}

inline int cmd_grid(const nlohmann::json& o) {
    GridSpec spec;
    spec.sys = system_from_json(o.at("system"), default_tool_system());
    spec.sys.validate();
    const std::size_t t = detail::get_count(o, "t_hist"), l = detail::get_count(o, "l_fut");
    spec.model = model_from_options(o.at("model"), t, l, spec.sys.k_sub, spec.sys.pairs());
    spec.model.validate();
    spec.train = train_config_from(o.at("train"), 0);  // per-cell seeds overwrite this
    spec.velocities_kmh = o.at("velocities_kmh").get<std::vector<double>>();
    spec.snrs_db = o.at("snrs_db").get<std::vector<double>>();
    spec.variants = o.at("variants").get<std::vector<std::string>>();
    spec.seeds = o.at("seeds").get<std::vector<std::uint64_t>>();
    spec.train_windows = detail::get_count(o, "train_windows");
    spec.val_windows = detail::get_count(o, "val_windows");
    spec.test_windows = detail::get_count(o, "test_windows");
    spec.ber_bits = detail::get_count(o, "ber_bits");
    spec.jobs = detail::get_count(o, "jobs");
    const std::filesystem::path out_dir = o.at("out_dir").get<std::string>();
    spec.out_dir = out_dir.string();

    std::filesystem::create_directories(out_dir);
    write_manifest("grid", o,
                   {"reports.csv", "nmse_vs_velocity.csv", "nmse_vs_snr.csv",
                    "ablation_table.csv", "cells/"},
                   out_dir);

    const GridOutcome outcome = run_experiment_grid(spec);
    write_reports_csv(outcome.reports, (out_dir / "reports.csv").string());
    write_curve_csv(outcome.reports, "velocity_kmh", (out_dir / "nmse_vs_velocity.csv").string());
    write_curve_csv(outcome.reports, "snr_db", (out_dir / "nmse_vs_snr.csv").string());
    write_ablation_csv(outcome.reports, (out_dir / "ablation_table.csv").string());

    std::cout << "grid: " << outcome.reports.size() << " cell(s) reported ("
              << outcome.resumed_cells << " resumed), " << outcome.failures.size()
              << " failed\n";
    for (const std::string& f : outcome.failures) std::cerr << "grid: FAILED " << f << "\n";
    return outcome.failures.empty() ? kExitOk : kExitData;
}

inline int cmd_inspect(const std::vector<std::string>& paths) {
    if (paths.empty())
        throw ConfigError("inspect: give at least one dataset or checkpoint path");
    for (const std::string& path : paths) {
        if (!std::filesystem::exists(path)) throw DataError("no file at " + path);
        const std::vector<std::uint8_t> bytes = wire::slurp(path);
        const bool is_dataset =
            bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, "CKAN");
        const bool is_checkpoint =
            bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, "CKPT");
        std::cout << path << "\n";
        if (is_dataset) {
            const Dataset ds = load_dataset(path);
            std::cout << "  type: dataset (format v" << kDatasetFormatVersion << ")\n"
                      << "  panel: " << ds.cfg.n_h << "x" << ds.cfg.n_v << " transmit, "
                      << ds.cfg.n_r << " receive (" << ds.cfg.pairs() << " pairs)\n"
                      << "  subcarriers: " << ds.cfg.k_sub << " @ f_c " << ds.cfg.f_c
                      << " Hz, delta_f " << ds.cfg.delta_f << " Hz, dt " << ds.cfg.dt << " s\n"
                      << "  window: " << ds.t_hist << " history -> " << ds.l_fut << " future\n"
                      << "  samples: " << ds.samples.size() << "\n";
        } else if (is_checkpoint) {
            const Checkpoint ck = load_checkpoint(path);
            std::cout << "  type: checkpoint (format v" << kCheckpointFormatVersion << ")\n"
                      << "  model: T=" << ck.cfg.t_hist << " L=" << ck.cfg.l_fut
                      << " K=" << ck.cfg.k_sub << " pairs=" << ck.cfg.pairs
                      << " variant=" << variant_name(ck.cfg) << "\n"
                      << "  params: " << ck.params.count() << " tensors, "
                      << ck.params.scalar_count() << " scalars\n";
            for (std::size_t i = 0; i < ck.params.count(); ++i) {
                std::cout << "    " << ck.params.names[i] << " [";
                const Tensor& t = ck.params.tensors[i];
                for (std::size_t d = 0; d < t.rank(); ++d)
                    std::cout << (d ? "x" : "") << t.dim(d);
                std::cout << "]\n";
            }
            if (ck.trainer)
                std::cout << "  trainer state: next epoch " << ck.trainer->next_epoch << ", step "
                          << ck.trainer->adam_step << "\n";
            else
                std::cout << "  trainer state: none\n";
        } else {
            throw MalformedHeaderError(path + ": unknown magic (expected a dataset or checkpoint)");
        }
    }
    return kExitOk;
}

// ---- dispatch and manifest replay ----

inline int dispatch_resolved(const std::string& command, const nlohmann::json& options) {
    if (command == "generate") return cmd_generate(options);
    if (command == "train") return cmd_train(options);
    if (command == "eval") return cmd_eval(options);
    if (command == "grid") return cmd_grid(options);
    throw ConfigError("manifest names unknown command '" + command + "'");
}

// Re-execute a past run from its manifest; --out may redirect the outputs.
inline int run_from_manifest(const std::string& path,
                             const std::optional<std::string>& out_override) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read manifest " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("command") || !j.contains("options"))
        throw MalformedHeaderError("manifest " + path + " lacks command/options fields");
    nlohmann::json options = j.at("options");
    if (out_override) options["out_dir"] = *out_override;
    return dispatch_resolved(j.at("command").get<std::string>(), options);
}

}  // namespace ckan::cli
