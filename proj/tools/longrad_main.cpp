#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "longrad/common.hpp"
#include "longrad/pipeline.hpp"

// Batch front end: every subcommand takes a TOML config and an output
// directory, writes its artifacts plus a run manifest, and exits 0 on
// success, 1 on validation errors, 2 on numerical failures.
int main(int argc, char** argv) {
    CLI::App app{"longitudinal radiomics survival-modeling toolkit"};
    app.set_version_flag("--version", std::string("longrad ") + longrad::pipeline::kToolVersion);
    app.require_subcommand(1);

    unsigned threads = 1;
    app.add_option("--threads", threads, "maximum worker threads")->capture_default_str();

    struct SubArgs {
        std::string config;
        std::string out;
    };
    std::map<std::string, SubArgs> args;
    for (const auto& name : longrad::pipeline::stage_names()) {
        auto* sub = app.add_subcommand(name, name + " stage");
        auto& a = args[name];
        sub->add_option("-c,--config", a.config, "TOML config file")->required();
        sub->add_option("-o,--out", a.out, "output directory")->required();
    }

    CLI11_PARSE(app, argc, argv);

    std::string command = app.get_subcommands().front()->get_name();
    longrad::pipeline::StageContext ctx;
    ctx.config_path = args[command].config;
    ctx.out_dir = args[command].out;
    ctx.threads = threads == 0 ? 1 : threads;

    try {
        longrad::pipeline::run_stage(command, ctx);
    } catch (const longrad::ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const longrad::NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "failure: %s\n", e.what());
        return 2;
    }
    return 0;
}
