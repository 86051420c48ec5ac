#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mest/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"mest: asymptotics of M-estimators under elliptical data"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "run an experiment config");
    std::string config;
    std::vector<std::string> sets;
    bool plot = false, strict = false, deterministic = false;
    int workers = 0;
    std::string out;
    run->add_option("config", config, "INI experiment file")->required()->check(CLI::ExistingFile);
    run->add_option("--set", sets, "override, section.key=value")->take_all();
    run->add_flag("--plot", plot, "write SVG plots next to the CSV");
    run->add_flag("--strict", strict, "exit 3 when any point fails to converge");
    run->add_flag("--deterministic", deterministic, "omit the timestamp comment");
    run->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
    run->add_option("--out", out, "output CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (workers > 0) sets.push_back("run.workers=" + std::to_string(workers));
        if (!out.empty()) sets.push_back("run.out=" + out);
        auto cfg = mest::load_config(config, sets);
        cfg.plot = plot;
        cfg.strict = strict;
        cfg.deterministic = deterministic;
        const auto res = mest::run(cfg, std::cerr);
        for (const auto& f : res.files) std::cerr << "wrote " << f << '\n';
        if (res.exit_code == 3) std::cerr << "error: non-converged points under --strict\n";
        return res.exit_code;
    } catch (const mest::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
