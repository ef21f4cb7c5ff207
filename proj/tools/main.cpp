#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmofl/config.hpp"
#include "mmofl/driver.hpp"
#include "mmofl/serialize.hpp"

namespace {

std::vector<uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<uint64_t> out;
    size_t start = 0;
    while (start <= csv.size()) {
        const size_t comma = csv.find(',', start);
        const std::string tok =
            csv.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!tok.empty()) out.push_back(std::stoull(tok));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::vector<std::string> parse_value_list(const std::string& csv) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= csv.size()) {
        const size_t comma = csv.find(',', start);
        const std::string tok =
            csv.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!tok.empty()) out.push_back(tok);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mmofl: multimodal online federated learning simulator"};
    app.require_subcommand(1);

    std::string config_path, out_dir, seeds_csv, axis_name, values_csv, spec_path, template_path;
    int workers = 1;
    bool emit_plots = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config file (JSON, comments ok)")
            ->required();
        cmd->add_option("--out", out_dir, "output directory (beats MMOFL_OUT_ROOT and config)");
        cmd->add_option("--seeds", seeds_csv, "comma-separated seed list override");
        cmd->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
        cmd->add_flag("--emit-plots", emit_plots, "also write gnuplot-compatible .dat files");
    };

    CLI::App* run = app.add_subcommand("run", "execute one experiment per seed");
    add_common(run);

    CLI::App* sweep = app.add_subcommand("sweep", "run an ablation over one axis");
    add_common(sweep);
    sweep->add_option("--axis", axis_name, "lambda|alpha|bits|delay|strategy")->required();
    sweep->add_option("--values", values_csv, "comma-separated axis values")->required();

    CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic dataset + manifest");
    gen->add_option("--spec", spec_path, "synthetic spec file (JSON)")->required();
    gen->add_option("--out", out_dir, "output directory")->required();

    CLI::App* tmpl = app.add_subcommand("emit-template", "print a documented config template");
    tmpl->add_option("--out", template_path, "write to file instead of stdout");

    CLI11_PARSE(app, argc, argv);

    try {
        mmofl::CliOptions options;
        options.out_override = out_dir;
        options.workers = workers;
        options.emit_plots = emit_plots;
        if (!seeds_csv.empty()) options.seeds_override = parse_seed_list(seeds_csv);

        if (run->parsed()) {
            mmofl::cmd_run(mmofl::load_config(config_path), options);
        } else if (sweep->parsed()) {
            mmofl::cmd_sweep(mmofl::load_config(config_path),
                             mmofl::sweep_axis_from_name(axis_name),
                             parse_value_list(values_csv), options);
        } else if (gen->parsed()) {
            mmofl::cmd_gen_data(mmofl::parse_synthetic_spec_file(spec_path), out_dir);
        } else if (tmpl->parsed()) {
            if (template_path.empty())
                std::cout << mmofl::config_template();
            else
                mmofl::write_file_atomic(template_path, mmofl::config_template());
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
