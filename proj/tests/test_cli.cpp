#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ckan/dataset.hpp"
#include "ckan/train.hpp"

// End-to-end drive of the installed binary; every test shells out and then
// inspects the artifacts with the library it was built from.

using namespace ckan;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string output;  // stdout and stderr combined
};

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("ckan_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

bool files_equal(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

// Run the tool through the shell so env-var prefixes and redirects work.
RunResult run_tool(const std::string& args, const fs::path& dir, const std::string& env = "") {
    const fs::path out_file = dir / "_last_run.txt";
    const std::string cmd = "cd " + dir.string() + " && " + (env.empty() ? "" : env + " ") +
                            std::string(CHANNELKAN_BIN) + " " + args + " > " +
                            out_file.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.output = slurp(out_file);
    return r;
}

// A configuration small enough that train/grid invocations finish in well
// under a second.
fs::path write_tiny_config(const fs::path& dir) {
    const fs::path path = dir / "tiny.json";
    std::ofstream out(path);
    out << R"({
  "system": {"n_h": 2, "n_v": 1, "n_r": 1, "k_sub": 4},
  "generate": {"t_hist": 8, "l_fut": 2, "train_windows": 24, "val_windows": 8, "test_windows": 8},
  "model": {"scales": 2, "conv_widths": [2, 4, 2], "cheb_order": 3},
  "train": {"epochs": 2, "batch_size": 8},
  "eval": {"ber_bits": 8000},
  "grid": {"velocities_kmh": [30.0], "variants": ["hold", "full"], "seeds": [1],
           "t_hist": 8, "l_fut": 2, "train_windows": 24, "val_windows": 8, "test_windows": 8,
           "ber_bits": 8000}
})";
    return path;
}

std::vector<std::string> csv_lines(const fs::path& path) {
    std::ifstream in(path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return lines;
}

}  // namespace

TEST_CASE("generate writes three datasets, sidecars, and a manifest") {
    const fs::path dir = scratch_dir("generate_default");
    const fs::path cfg = write_tiny_config(dir);
    const RunResult r = run_tool("generate --config tiny.json --out d", dir);
    INFO(r.output);
    REQUIRE(r.code == 0);
    for (const char* stem : {"train", "val", "test"}) {
        REQUIRE(fs::exists(dir / "d" / (std::string(stem) + ".ckan")));
        REQUIRE(fs::exists(dir / "d" / (std::string(stem) + ".meta")));
    }
    REQUIRE(fs::exists(dir / "d" / "manifest.json"));

    const Dataset train = load_dataset((dir / "d" / "train.ckan").string());
    REQUIRE(train.samples.size() == 24);
    REQUIRE(train.t_hist == 8);
    REQUIRE(train.cfg.k_sub == 4);
    fs::remove_all(dir);
}

TEST_CASE("a fixed seed regenerates bit-identical datasets") {
    const fs::path dir = scratch_dir("generate_seeded");
    write_tiny_config(dir);
    REQUIRE(run_tool("generate --config tiny.json --seed 9 --out a", dir).code == 0);
    REQUIRE(run_tool("generate --config tiny.json --seed 9 --out b", dir).code == 0);
    REQUIRE(run_tool("generate --config tiny.json --seed 10 --out c", dir).code == 0);
    for (const char* stem : {"train.ckan", "val.ckan", "test.ckan"})
        REQUIRE(files_equal(dir / "a" / stem, dir / "b" / stem));
    REQUIRE(!files_equal(dir / "a" / "train.ckan", dir / "c" / "train.ckan"));
    fs::remove_all(dir);
}

TEST_CASE("zero velocity freezes the channel so the future repeats the last frame") {
    const fs::path dir = scratch_dir("generate_frozen");
    write_tiny_config(dir);
    REQUIRE(run_tool("generate --config tiny.json --velocity 0 --out d", dir).code == 0);
    const Dataset ds = load_dataset((dir / "d" / "test.ckan").string());
    const std::size_t feat = ds.cfg.k_sub * ds.cfg.pairs();
    for (const WindowedSample& s : ds.samples)
        for (std::size_t l = 0; l < ds.l_fut; ++l)
            for (std::size_t f = 0; f < feat; ++f) {
                REQUIRE(s.future.re()[l * feat + f] == s.history.re()[(ds.t_hist - 1) * feat + f]);
                REQUIRE(s.future.im()[l * feat + f] == s.history.im()[(ds.t_hist - 1) * feat + f]);
            }
    fs::remove_all(dir);
}

TEST_CASE("train with zero epochs checkpoints the initial parameters") {
    const fs::path dir = scratch_dir("train_zero");
    write_tiny_config(dir);
    REQUIRE(run_tool("generate --config tiny.json --out d", dir).code == 0);
    const RunResult r = run_tool("train --config tiny.json --data d --epochs 0 --out t", dir);
    INFO(r.output);
    REQUIRE(r.code == 0);
    REQUIRE(fs::exists(dir / "t" / "best.ckpt"));
    REQUIRE(fs::exists(dir / "t" / "last.ckpt"));
    // The trace has its header and nothing else.
    REQUIRE(csv_lines(dir / "t" / "train_trace.csv") ==
            std::vector<std::string>{"epoch,train_loss,val_nmse,lr,seconds"});
    fs::remove_all(dir);
}

TEST_CASE("resumed training continues the epoch numbering and the trajectory") {
    const fs::path dir = scratch_dir("train_resume");
    write_tiny_config(dir);
    REQUIRE(run_tool("generate --config tiny.json --out d", dir).code == 0);

    // One uninterrupted 3-epoch run, then the same thing as 2 + 1.
    REQUIRE(run_tool("train --config tiny.json --data d --epochs 3 --out whole", dir).code == 0);
    REQUIRE(run_tool("train --config tiny.json --data d --epochs 2 --out part1", dir).code == 0);
    const RunResult r = run_tool(
        "train --config tiny.json --data d --epochs 1 --resume part1/last.ckpt --out part2", dir);
    INFO(r.output);
    REQUIRE(r.code == 0);

    const std::vector<std::string> trace = csv_lines(dir / "part2" / "train_trace.csv");
    REQUIRE(trace.size() == 2);
    REQUIRE(trace[1].substr(0, 2) == "2,");  // continued numbering

    // The stitched run lands on exactly the uninterrupted parameters and
    // optimizer state, so the final checkpoints are byte-identical.
    REQUIRE(files_equal(dir / "whole" / "last.ckpt", dir / "part2" / "last.ckpt"));

    // The continued epoch row reproduces the uninterrupted run's third row.
    const std::vector<std::string> whole_trace = csv_lines(dir / "whole" / "train_trace.csv");
    const std::string whole_row = whole_trace[3].substr(0, whole_trace[3].rfind(','));
    const std::string part_row = trace[1].substr(0, trace[1].rfind(','));
    REQUIRE(whole_row == part_row);  // identical except wall-clock seconds
    fs::remove_all(dir);
}

TEST_CASE("an ablated variant is trained and recorded in the checkpoint") {
    const fs::path dir = scratch_dir("train_ablate");
    write_tiny_config(dir);
    REQUIRE(run_tool("generate --config tiny.json --out d", dir).code == 0);
    const RunResult r =
        run_tool("train --config tiny.json --data d --ablate no-kan --out t", dir);
    REQUIRE(r.code == 0);
    const RunResult ins = run_tool("inspect t/best.ckpt", dir);
    INFO(ins.output);
    REQUIRE(ins.code == 0);
    REQUIRE(ins.output.find("variant=no-kan") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("eval runs baselines without a checkpoint and oracles at zero NMSE") {
    const fs::path dir = scratch_dir("eval_modes");
    write_tiny_config(dir);
    REQUIRE(run_tool("generate --config tiny.json --out d", dir).code == 0);

    const RunResult hold =
        run_tool("eval --config tiny.json --data d --baseline hold --out eh", dir);
    INFO(hold.output);
    REQUIRE(hold.code == 0);
    std::vector<std::string> lines = csv_lines(dir / "eh" / "metrics.csv");
    REQUIRE(lines.size() == 2);
    REQUIRE(lines[1].find("hold") != std::string::npos);

    const RunResult ar = run_tool("eval --config tiny.json --data d --baseline ar --out ea", dir);
    REQUIRE(ar.code == 0);
    REQUIRE(csv_lines(dir / "ea" / "metrics.csv")[1].find("ar4") != std::string::npos);

    const RunResult oracle = run_tool("eval --config tiny.json --data d --oracle --out eo", dir);
    REQUIRE(oracle.code == 0);
    lines = csv_lines(dir / "eo" / "metrics.csv");
    REQUIRE(lines.size() == 2);
    // velocity,snr,variant,seed,nmse,... -> the nmse column is exactly 0.
    std::istringstream row(lines[1]);
    std::string field;
    for (int i = 0; i < 5; ++i) std::getline(row, field, ',');
    REQUIRE(field == "0");
    fs::remove_all(dir);
}

TEST_CASE("evaluating the same checkpoint twice yields identical metric files") {
    const fs::path dir = scratch_dir("eval_repeat");
    write_tiny_config(dir);
    REQUIRE(run_tool("generate --config tiny.json --out d", dir).code == 0);
    REQUIRE(run_tool("train --config tiny.json --data d --out t", dir).code == 0);
    REQUIRE(run_tool("eval --config tiny.json --data d --checkpoint t/best.ckpt --seed 4 "
                     "--snr 5,15 --out e1", dir).code == 0);
    REQUIRE(run_tool("eval --config tiny.json --data d --checkpoint t/best.ckpt --seed 4 "
                     "--snr 5,15 --out e2", dir).code == 0);
    REQUIRE(files_equal(dir / "e1" / "metrics.csv", dir / "e2" / "metrics.csv"));
    REQUIRE(csv_lines(dir / "e1" / "metrics.csv").size() == 3);  // header + one row per SNR
    fs::remove_all(dir);
}

TEST_CASE("dimension mismatches between checkpoint and dataset are refused") {
    const fs::path dir = scratch_dir("eval_mismatch");
    write_tiny_config(dir);
    REQUIRE(run_tool("generate --config tiny.json --out d", dir).code == 0);
    REQUIRE(run_tool("train --config tiny.json --data d --out t", dir).code == 0);

    // A second dataset with eight subcarriers instead of four.
    std::ofstream(dir / "wide.json") << R"({
  "system": {"n_h": 2, "n_v": 1, "n_r": 1, "k_sub": 8},
  "generate": {"t_hist": 8, "l_fut": 2, "train_windows": 12, "val_windows": 4, "test_windows": 4}
})";
    REQUIRE(run_tool("generate --config wide.json --out w", dir).code == 0);

    const RunResult r =
        run_tool("eval --config tiny.json --data w --checkpoint t/best.ckpt --out e", dir);
    INFO(r.output);
    REQUIRE(r.code == 2);
    REQUIRE(r.output.find("K=4") != std::string::npos);
    REQUIRE(r.output.find("K=8") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("exit codes distinguish usage, data, and numeric failures") {
    const fs::path dir = scratch_dir("exit_codes");
    write_tiny_config(dir);

    REQUIRE(run_tool("--definitely-not-a-flag", dir).code == 1);
    REQUIRE(run_tool("", dir).code == 1);  // no subcommand: usage
    REQUIRE(run_tool("eval --config tiny.json --data missing --baseline hold", dir).code == 2);
    REQUIRE(run_tool("train --config tiny.json --data missing", dir).code == 2);
    REQUIRE(run_tool("generate --config nope.json", dir).code == 1);
    REQUIRE(run_tool("train --config tiny.json --data d --ablate no-everything", dir).code == 1);

    // A divergent learning rate must surface as the numeric exit code.
    REQUIRE(run_tool("generate --config tiny.json --out d", dir).code == 0);
    std::ofstream(dir / "hot.json") << R"({
  "system": {"n_h": 2, "n_v": 1, "n_r": 1, "k_sub": 4},
  "model": {"scales": 2, "conv_widths": [2, 4, 2], "cheb_order": 3},
  "train": {"epochs": 5, "batch_size": 8, "lr0": 1e150}
})";
    const RunResult hot = run_tool("train --config hot.json --data d --out t", dir);
    INFO(hot.output);
    REQUIRE(hot.code == 3);
    REQUIRE(hot.output.find("diverged") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("the data root environment variable supplies the default dataset path") {
    const fs::path dir = scratch_dir("env_root");
    write_tiny_config(dir);
    // generate with no --out lands in $CHANNELKAN_DATA_DIR; train with no
    // --data reads it back.
    REQUIRE(run_tool("generate --config tiny.json", dir, "CHANNELKAN_DATA_DIR=envd").code == 0);
    REQUIRE(fs::exists(dir / "envd" / "train.ckan"));
    const RunResult r = run_tool("train --config tiny.json --epochs 1 --out t", dir,
                                 "CHANNELKAN_DATA_DIR=envd");
    INFO(r.output);
    REQUIRE(r.code == 0);
    fs::remove_all(dir);
}

TEST_CASE("a manifest replays its run bit-for-bit") {
    const fs::path dir = scratch_dir("manifest_replay");
    write_tiny_config(dir);
    REQUIRE(run_tool("generate --config tiny.json --seed 6 --out d1", dir).code == 0);
    const RunResult r = run_tool("--from-manifest d1/manifest.json --out d2", dir);
    INFO(r.output);
    REQUIRE(r.code == 0);
    for (const char* stem : {"train.ckan", "val.ckan", "test.ckan"})
        REQUIRE(files_equal(dir / "d1" / stem, dir / "d2" / stem));

    // Training replays reproduce the checkpoints exactly as well.
    REQUIRE(run_tool("train --config tiny.json --data d1 --out t1", dir).code == 0);
    REQUIRE(run_tool("--from-manifest t1/manifest.json --out t2", dir).code == 0);
    REQUIRE(files_equal(dir / "t1" / "best.ckpt", dir / "t2" / "best.ckpt"));
    REQUIRE(files_equal(dir / "t1" / "last.ckpt", dir / "t2" / "last.ckpt"));
    fs::remove_all(dir);
}

TEST_CASE("grid writes reports plus curve and ablation tables and resumes") {
    const fs::path dir = scratch_dir("grid_run");
    write_tiny_config(dir);
    const RunResult first = run_tool("grid --config tiny.json --out g", dir);
    INFO(first.output);
    REQUIRE(first.code == 0);
    REQUIRE(first.output.find("(0 resumed)") != std::string::npos);
    for (const char* f :
         {"reports.csv", "nmse_vs_velocity.csv", "nmse_vs_snr.csv", "ablation_table.csv",
          "manifest.json"})
        REQUIRE(fs::exists(dir / "g" / f));
    REQUIRE(csv_lines(dir / "g" / "reports.csv").size() == 3);  // header + hold + full

    const std::string before = slurp(dir / "g" / "reports.csv");
    const RunResult second = run_tool("grid --config tiny.json --out g", dir);
    REQUIRE(second.code == 0);
    REQUIRE(second.output.find("(2 resumed)") != std::string::npos);
    REQUIRE(slurp(dir / "g" / "reports.csv") == before);
    fs::remove_all(dir);
}

TEST_CASE("inspect dumps dataset and checkpoint headers and rejects junk") {
    const fs::path dir = scratch_dir("inspect");
    write_tiny_config(dir);
    REQUIRE(run_tool("generate --config tiny.json --out d", dir).code == 0);
    REQUIRE(run_tool("train --config tiny.json --data d --epochs 1 --out t", dir).code == 0);

    const RunResult ds = run_tool("inspect d/train.ckan", dir);
    INFO(ds.output);
    REQUIRE(ds.code == 0);
    REQUIRE(ds.output.find("dataset") != std::string::npos);
    REQUIRE(ds.output.find("24") != std::string::npos);  // sample count

    const RunResult ck = run_tool("inspect t/best.ckpt", dir);
    REQUIRE(ck.code == 0);
    REQUIRE(ck.output.find("checkpoint") != std::string::npos);

    std::ofstream(dir / "junk.bin") << "this is not a recognized artifact";
    REQUIRE(run_tool("inspect junk.bin", dir).code == 2);
    REQUIRE(run_tool("inspect never-written.ckan", dir).code == 2);
    REQUIRE(run_tool("inspect", dir).code == 1);  // nothing to inspect: usage
    fs::remove_all(dir);
}
