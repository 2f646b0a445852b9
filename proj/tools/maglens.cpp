#include "maglens/cli.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <utility>

int main(int argc, char** argv) {
    using namespace maglens::cli;
    CLI::App app{"magnetic lens rigidity toolkit"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    std::string config;
    RunOptions ro;
    app.add_option("--config", config, "JSON run config")->required(false);
    app.add_option("--out", ro.out_dir, "output directory");
    app.add_option("--threads", ro.threads, "worker cap (0 = all cores)")->check(CLI::NonNegativeNumber);
    app.add_flag("--debug-force-A-identity", ro.force_A_identity, "replace weight A by the identity (negative control)");

    const std::pair<const char*, const char*> commands[] = {
        {"gen-lens", "scatter a boundary fan and write lens data"},
        {"check-identity", "integral identity residual and convergence order"},
        {"forward-xray", "weighted transform vs exit-velocity mismatch"},
        {"ellipticity", "symbol eigenvalue sweep"},
        {"invert", "local Newton reconstruction from lens data"},
        {"layer-strip", "global shell-by-shell reconstruction"},
    };
    for (auto [name, help] : commands) app.add_subcommand(name, help)->fallthrough();
    app.add_subcommand("defaults", "print the default config")->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kConfigError;
    }
    CLI::App* sub = app.get_subcommands().front();
    if (sub->get_name() == "defaults") {
        std::cout << default_config().dump(2) << '\n';
        return kOk;
    }
    if (config.empty()) {
        std::cerr << "--config is required\n";
        return kConfigError;
    }
    return run(sub->get_name(), config, ro);
}
