// channelkan: synthetic CSI prediction lab.
//
// argv handling only; option resolution and the command bodies live in
// ckan/cli.hpp so they are exercisable from unit tests without a process
// boundary.

#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ckan/cli.hpp"
#include "ckan/version.hpp"

namespace {

int run(int argc, char** argv) {
    CLI::App app{"channelkan: synthetic CSI prediction lab"};
    app.require_subcommand(0, 1);
    app.set_version_flag("--version", ckan::kVersion);

    std::optional<std::string> from_manifest;
    app.add_option("--from-manifest", from_manifest,
                   "Re-execute a past run from its manifest.json");
    std::optional<std::string> manifest_out;
    app.add_option("--out", manifest_out, "Output directory override for --from-manifest");

    ckan::cli::Flags f;
    auto add_common = [&f](CLI::App* cmd) {
        cmd->add_option("--config", f.config, "JSON config file (flags take precedence)");
        cmd->add_option("--seed", f.seed, "Master seed");
        cmd->add_option("--out", f.out, "Output directory");
    };

    CLI::App* generate = app.add_subcommand("generate", "Synthesize train/val/test CSI datasets");
    add_common(generate);
    generate->add_option("--velocity", f.velocity, "UE velocity in km/h");
    generate->add_option("--snr", f.snr, "History noise level in dB (omit for clean histories)")
        ->delimiter(',');

    CLI::App* train = app.add_subcommand("train", "Train a predictor on a generated dataset");
    add_common(train);
    train->add_option("--data", f.data, "Dataset directory (default: CHANNELKAN_DATA_DIR)");
    train->add_option("--epochs", f.epochs, "Epochs to run");
    train->add_option("--ablate", f.ablate,
                      "Disable one stage (no-multiscale|no-cnnkan|no-dualdomain|no-kan)");
    train->add_option("--resume", f.resume, "Continue training from a last.ckpt");

    CLI::App* eval = app.add_subcommand("eval", "Compute NMSE/SE/BER over the test split");
    add_common(eval);
    eval->add_option("--data", f.data, "Dataset directory (default: CHANNELKAN_DATA_DIR)");
    eval->add_option("--checkpoint", f.checkpoint, "Trained model checkpoint (best.ckpt)");
    eval->add_option("--baseline", f.baseline, "Evaluate a classical predictor instead (hold|ar)");
    eval->add_flag("--oracle", f.oracle, "Evaluate the true future as the prediction");
    eval->add_option("--snr", f.snr, "Evaluation SNR(s) in dB")->delimiter(',');

    CLI::App* grid = app.add_subcommand("grid", "Sweep velocity x SNR x variant x seed");
    add_common(grid);
    grid->add_option("--velocity", f.velocity, "Restrict the sweep to one velocity (km/h)");
    grid->add_option("--snr", f.snr, "Restrict the SNR list (dB)")->delimiter(',');
    grid->add_option("--ablate", f.ablate, "Restrict the sweep to one variant");
    grid->add_option("--epochs", f.epochs, "Override training epochs");
    grid->add_option("--jobs", f.jobs, "Concurrent grid conditions");

    CLI::App* inspect = app.add_subcommand("inspect", "Print dataset/checkpoint headers");
    inspect->add_option("paths", f.inputs, "Dataset or checkpoint files");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints the message or requested help/version
        return code == 0 ? ckan::cli::kExitOk : ckan::cli::kExitUsage;
    }

    try {
        if (from_manifest) return ckan::cli::run_from_manifest(*from_manifest, manifest_out);
        const nlohmann::json file_cfg = ckan::cli::load_config_file(f.config);
        if (generate->parsed())
            return ckan::cli::cmd_generate(ckan::cli::resolve_generate(file_cfg, f));
        if (train->parsed()) return ckan::cli::cmd_train(ckan::cli::resolve_train(file_cfg, f));
        if (eval->parsed()) return ckan::cli::cmd_eval(ckan::cli::resolve_eval(file_cfg, f));
        if (grid->parsed()) return ckan::cli::cmd_grid(ckan::cli::resolve_grid(file_cfg, f));
        if (inspect->parsed()) return ckan::cli::cmd_inspect(f.inputs);
        std::cerr << app.help();
        return ckan::cli::kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "channelkan: " << e.what() << "\n";
        return ckan::cli::exit_code_for(e);
    }
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
