#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include <canopy/pipeline.hpp>
#include <canopy/version.hpp>

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "pipeline configuration file")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", args.out_dir, "output directory (overrides [paths] out)");
    cmd->add_option("--seed", args.seed, "master seed (overrides [seeds] master)");
}

}

int main(int argc, char** argv) {
    CLI::App app{"Area-based forest attribute estimation from airborne laser scanning"};
    app.set_version_flag("--version", std::string(canopy::version));
    app.require_subcommand(1);

    CommonArgs args;
    std::string family_name;
    auto* simulate = app.add_subcommand("simulate", "generate a synthetic study area");
    auto* metrics = app.add_subcommand("metrics", "compute plot and grid-cell metrics");
    auto* fit = app.add_subcommand("fit", "fit volume models");
    auto* estimate = app.add_subcommand("estimate", "synthetic stand estimates");
    auto* validate = app.add_subcommand("validate", "accuracy and comparison reports");
    for (auto* cmd : {simulate, metrics, fit, estimate, validate}) add_common(cmd, args);
    fit->add_option("--family", family_name,
                    "model family: fmi_loglog, nfi_mixed, nfi_fmi, nfi_adjusted or all");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const auto pc = canopy::load_pipeline_config(args.config_path, args.out_dir, args.seed);
        if (simulate->parsed()) canopy::cmd_simulate(pc);
        if (metrics->parsed()) canopy::cmd_metrics(pc);
        if (fit->parsed()) canopy::cmd_fit(pc, canopy::parse_fit_family(family_name));
        if (estimate->parsed()) canopy::cmd_estimate(pc);
        if (validate->parsed()) canopy::cmd_validate(pc);
    } catch (const canopy::validation_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
